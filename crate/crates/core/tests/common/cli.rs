//! Helpers that drive the `lvcs` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"
[simulation]
n_lon = 4
n_lat = 4
n_p = 5
seed = 11
holdout = { min_level = 2, lon_frac = [0.0, 0.6], lat_frac = [0.0, 0.6] }

[chain]
n_iter = 150
n_burn = 50

[prediction]
n_draws_per_sample = 2
"#;

pub fn lvcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvcs")).args(args).output().expect("binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "lvcs failed: {}", stderr(&out));
    out
}

/// Runs simulate, fit, predict and evaluate in `dir` and returns every file
/// the pipeline wrote, sorted by name.
pub fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let s = |path: &PathBuf| path.to_str().unwrap().to_owned();
    std::fs::write(p("config.toml"), SMALL_CONFIG).unwrap();
    let (cfg, granule, truth) = (s(&p("config.toml")), s(&p("granule.csv")), s(&p("truth.csv")));
    let (chain, pred, metrics) = (s(&p("chain.csv")), s(&p("pred.csv")), s(&p("metrics.csv")));
    ok(lvcs(&["simulate", &cfg, "-o", &granule, "--truth", &truth]));
    ok(lvcs(&["fit", &granule, &cfg, "-o", &chain]));
    ok(lvcs(&["predict", &chain, &granule, &cfg, "--targets", &truth, "-o", &pred]));
    ok(lvcs(&["evaluate", &pred, &truth, "-o", &metrics]));
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|path| path.file_name().unwrap() != "config.toml")
        .map(|path| (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()))
        .collect();
    files.sort();
    files
}
