#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn traffic() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/traffic")
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn framewise(data_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_framewise"))
        .arg("--data-root")
        .arg(data_root)
        .args(args)
        .env_remove("GEMINI_API_KEY")
        .env_remove("OPENAI_API_KEY")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

/// Analyzes the traffic fixture into `data_root` with mock backends.
pub fn analyze_fixture(data_root: &Path, run_id: &str, extra: &[&str]) -> Output {
    let t = traffic();
    let frames = path_arg(&t.join("frames"));
    let config = path_arg(&t.join("config.toml"));
    let detector = format!("mock:{}", t.join("detections.json").display());
    let vision = format!("mock:{}", t.join("vision.json").display());
    let text = format!("mock:{}", t.join("text.json").display());
    let mut args = vec![
        "analyze",
        "--frames",
        &frames,
        "--config",
        &config,
        "--run-id",
        run_id,
        "--detector",
        &detector,
        "--vision-provider",
        &vision,
        "--text-provider",
        &text,
    ];
    args.extend_from_slice(extra);
    framewise(data_root, &args)
}

pub fn text_mock() -> String {
    format!("mock:{}", traffic().join("text.json").display())
}

/// Data rows of the first pipe table in a markdown document.
pub fn table_rows(md: &str) -> Vec<Vec<String>> {
    md.lines()
        .filter(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect())
        .collect()
}
