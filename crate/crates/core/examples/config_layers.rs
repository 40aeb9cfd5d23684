//! Layered run configuration: defaults, a config file, `DFDNET_*`
//! environment variables and flags, then the echoed effective file.

use dfdnet::config::RunConfig;

fn main() -> dfdnet::Result<()> {
    let path = std::env::temp_dir().join("dfdnet_config_example.cfg");
    std::fs::write(
        &path,
        "[train]\nepochs = 50\nbatch_size = 8\nvariant = l1+charb\n",
    )
    .map_err(|e| dfdnet::Error::io(&path, e))?;
    let env = vec![("DFDNET_EPOCHS".to_string(), "80".to_string())];
    let flags = vec![("seed".to_string(), "3".to_string())];
    let cfg = RunConfig::layered(Some(&path), env, &flags)?;
    print!("{}", cfg.to_ini());
    println!("run id {}", cfg.train.run_id());
    Ok(())
}
