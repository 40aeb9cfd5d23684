//! The `dfdnet` binary: artifacts, reproducibility and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dfdnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfdnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const MICRO_CFG: &str = "\
# micro run
epochs = 2
batch_size = 3
learning_rate = 0.05
momentum = 0.95
width_scale = 0.125
input_size = 32
augment = false
";

/// Temp dir holding a 4-scene 32x32 dataset (one test scene) and a micro config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = dfdnet(
        &[
            "synth",
            "--count",
            "4",
            "--test-count",
            "1",
            "--size",
            "32",
            "--seed",
            "7",
            "--out",
            "ds",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join("micro.cfg"), MICRO_CFG).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_count_triples_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = dfdnet(
            &[
                "synth", "--count", "8", "--size", "64", "--seed", "7", "--out", out,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0);
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a.len(), 8 * 3 + 1);
    assert_eq!(a, b);
    let manifest = String::from_utf8(
        a.iter()
            .find(|(p, _)| p == Path::new("manifest.tsv"))
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    assert_eq!(
        manifest.lines().filter(|l| l.starts_with("scene")).count(),
        8
    );

    // Rerunning into the same directory overwrites identically.
    let o = dfdnet(
        &[
            "synth", "--count", "8", "--size", "64", "--seed", "7", "--out", "a",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(files(&dir.path().join("a")), b);
}

#[test]
fn train_eval_infer_roundtrip() {
    let ws = workspace();
    let p = ws.path();
    let out = dfdnet(
        &[
            "train",
            "--config",
            "micro.cfg",
            "--manifest",
            "ds/manifest.tsv",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.2hde", "runlog.jsonl", "effective.cfg"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }
    let echo = fs::read_to_string(p.join("run/effective.cfg")).unwrap();
    assert!(echo.contains("epochs = 2  # File"));
    assert!(echo.contains("manifest = ds/manifest.tsv  # Flag"));

    let out = dfdnet(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.2hde",
            "--manifest",
            "ds/manifest.tsv",
            "--split",
            "test",
            "--out",
            "ev",
        ],
        p,
    );
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(p.join("ev/eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0],
        "label,rmse,abs_rel,delta1,delta2,delta3,psnr_db,ssim"
    );
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("test,"));
    assert!(rows[1]
        .split(',')
        .skip(1)
        .all(|v| v.parse::<f64>().unwrap().is_finite()));
    assert!(csv.contains("# checkpoint = run/checkpoint.2hde"));

    let image = "ds/scene000_defocused.png";
    for out_dir in ["inf1", "inf2"] {
        let out = dfdnet(
            &[
                "infer",
                "--checkpoint",
                "run/checkpoint.2hde",
                "--out",
                out_dir,
                image,
            ],
            p,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (files(&p.join("inf1")), files(&p.join("inf2")));
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    let depth = dfdnet::data::io::read_pfm(
        &p.join("inf1").join(
            &a.iter()
                .find(|(f, _)| f.extension().unwrap() == "pfm")
                .unwrap()
                .0,
        ),
    )
    .unwrap();
    assert_eq!(depth.shape(), &[1, 1, 32, 32]);
}

#[test]
fn flags_override_file_and_env_overrides_file() {
    let ws = workspace();
    let p = ws.path();
    let out = Command::new(env!("CARGO_BIN_EXE_dfdnet"))
        .args([
            "train",
            "--config",
            "micro.cfg",
            "--manifest",
            "ds/manifest.tsv",
            "--out",
            "run",
            "--epochs",
            "1",
        ])
        .env("DFDNET_SEED", "5")
        .env("DFDNET_BATCH_SIZE", "3")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let echo = fs::read_to_string(p.join("run/effective.cfg")).unwrap();
    assert!(echo.contains("epochs = 1  # Flag"), "{echo}");
    assert!(echo.contains("seed = 5  # Env"));
    assert!(echo.contains("batch_size = 3  # Env"));
    let log = dfdnet::train::RunLog::load(p.join("run/runlog.jsonl")).unwrap();
    let cfg = log.config().unwrap();
    assert_eq!((cfg.epochs, cfg.seed, cfg.batch_size), (1, 5, 3));
}

#[test]
fn ablate_and_grid_emit_tables() {
    let ws = workspace();
    let p = ws.path();
    let args = [
        "--config",
        "micro.cfg",
        "--manifest",
        "ds/manifest.tsv",
        "--epochs",
        "1",
    ];
    let out = dfdnet(&[&["ablate", "--out", "abl"], &args[..]].concat(), p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for run in ["both", "depth_only", "deblur_only"] {
        assert!(p.join("abl").join(run).join("runlog.jsonl").is_file());
    }
    let table = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    assert_eq!(stdout(&out), table);
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 7);

    let out = dfdnet(&[&["grid", "--out", "grid"], &args[..]].concat(), p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let grid = fs::read_to_string(p.join("grid/grid.csv")).unwrap();
    assert_eq!(grid.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // Usage and configuration errors.
    assert_eq!(code(&dfdnet(&["train", "--bogus"], p)), 1);
    assert_eq!(code(&dfdnet(&["frobnicate"], p)), 1);
    assert_eq!(code(&dfdnet(&[], p)), 1);
    assert_eq!(
        code(&dfdnet(
            &["train", "--set", "nope=1", "--manifest", "m.tsv"],
            p
        )),
        1
    );
    assert_eq!(
        code(&dfdnet(
            &["train", "--set", "epochs=many", "--manifest", "m.tsv"],
            p
        )),
        1
    );
    assert_eq!(code(&dfdnet(&["synth", "--size", "0", "--out", "x"], p)), 1);
    assert_eq!(
        code(&dfdnet(
            &[
                "eval",
                "--checkpoint",
                "c",
                "--manifest",
                "m",
                "--split",
                "val"
            ],
            p
        )),
        1
    );
    // 32x32 scenes have a 1x1 bottleneck, so single-sample batches are rejected.
    let ws = workspace();
    let out = dfdnet(
        &[
            "train",
            "--config",
            "micro.cfg",
            "--manifest",
            "ds/manifest.tsv",
            "--batch-size",
            "2",
        ],
        ws.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bottleneck"));
    // Missing or malformed data.
    assert_eq!(code(&dfdnet(&["train", "--manifest", "missing.tsv"], p)), 2);
    fs::write(p.join("bad.2hde"), b"not a checkpoint").unwrap();
    fs::write(p.join("x.png"), b"").unwrap();
    assert_eq!(
        code(&dfdnet(
            &["infer", "--checkpoint", "bad.2hde", "--out", "o", "x.png"],
            p
        )),
        2
    );
    // Help is not an error.
    let help = dfdnet(&["gradcheck", "--help"], p);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("--tolerance"));
}

#[test]
fn gradcheck_fails_with_exit_3_on_injected_bug() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dfdnet(&["gradcheck", "--only", "conv2d"], dir.path());
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("conv2d"));
    let bad = dfdnet(
        &["gradcheck", "--only", "conv2d", "--inject-bug", "conv2d"],
        dir.path(),
    );
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).contains("FAIL"));
    assert_eq!(
        code(&dfdnet(&["gradcheck", "--inject-bug", "warp"], dir.path())),
        1
    );
}
