use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use overlap_gan::checkpoint::Checkpoint;
use overlap_gan::trainer::{PGanConfig, TrainConfig, Trainer};
use serde::de::DeserializeOwned;

use crate::failure::{Classify, CliResult, Code};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config: TrainConfig = read_json(path).code(Code::Config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config
        .validate()
        .with_context(|| format!("invalid config {}", path.display()))
        .code(Code::Config)?;
    Ok(config)
}

pub fn load_pgan_config(path: &Path, seed: Option<u64>) -> CliResult<PGanConfig> {
    let mut config: PGanConfig = read_json(path).code(Code::Config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config
        .validate()
        .with_context(|| format!("invalid config {}", path.display()))
        .code(Code::Config)?;
    Ok(config)
}

pub fn load_checkpoint(path: &Path, code: Code) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .code(code)
}

pub fn load_trainer(path: &Path, code: Code) -> CliResult<Trainer> {
    let ckpt = load_checkpoint(path, code)?;
    Trainer::from_checkpoint(&ckpt)
        .with_context(|| format!("restoring {}", path.display()))
        .code(code)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

pub fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}
