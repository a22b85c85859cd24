#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde::de::DeserializeOwned;

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn cli(command: &str, config: &Path, out_dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tricoat"));
    c.arg(command).arg("--config").arg(config).arg("--out-dir").arg(out_dir);
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(command: &mut Command) -> Output {
    command.output().expect("tricoat binary runs")
}

pub fn run_ok(command: &mut Command) -> Output {
    let out = run(command);
    assert!(
        out.status.success(),
        "{command:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> T {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Copies `base` into `dir` with `extra` TOML appended.
pub fn write_config(dir: &Path, base: &Path, extra: &str) -> PathBuf {
    let mut text = std::fs::read_to_string(base).unwrap();
    text.push('\n');
    text.push_str(extra);
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}
