//! Thin-lens circle of confusion and depth-dependent Gaussian blur: prints
//! the blur diameter over depth and renders one synthetic scene to PNG/PFM.
//!
//! `cargo run --release --example defocus_synthesis -- [out_dir]` (defaults
//! to a directory under the system temp dir)

use std::path::PathBuf;

use dfdnet::data::{io, synthesize_scene, SceneConfig};
use dfdnet::metrics::psnr;
use dfdnet::optics::{coc_map, ThinLensCamera};

fn main() -> dfdnet::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dfdnet_defocus"));
    let camera = ThinLensCamera::default();
    println!("focus distance {} m", camera.focus_distance_m);
    for depth in [0.7, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0] {
        println!(
            "depth {depth:5.1} m  COC {:.4} px",
            camera.coc_pixels(depth)?
        );
    }

    // Stronger pixel scale so the blur is visible at 64x64.
    let mut scene = SceneConfig::default();
    scene.camera.coc_to_pixel = 4000.0;
    let sample = synthesize_scene(&scene, 11, "demo")?;
    let coc = coc_map(&scene.camera, &sample.depth)?;
    std::fs::create_dir_all(&out).map_err(|e| dfdnet::Error::io(&out, e))?;
    io::write_rgb(&out.join("demo_aif.png"), &sample.aif)?;
    io::write_rgb(&out.join("demo_defocused.png"), &sample.defocused)?;
    io::write_pfm(&out.join("demo_depth.pfm"), &sample.depth)?;
    io::write_gray8(
        &out.join("demo_coc.png"),
        coc.height,
        coc.width,
        coc.to_gray8(),
    )?;
    println!("max COC in scene {:.2} px", coc.max());
    println!(
        "defocused vs all-in-focus PSNR {:.2} dB",
        psnr(&sample.defocused, &sample.aif, 1.0, 100.0)?.db
    );
    println!("wrote {}", out.display());
    Ok(())
}
