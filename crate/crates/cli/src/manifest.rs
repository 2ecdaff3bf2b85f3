//! Experiment manifests: train, optional posterior GAN, eval and export for
//! each seed, skipping stages whose inputs hash to a recorded value.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{anyhow, Context};
use overlap_gan::eval::{evaluate, EvalSettings};
use overlap_gan::tensor::NamedRng;
use overlap_gan::trainer::{train, train_pgan, FrozenClassifier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::export::{export_plots, ExportSettings};
use crate::failure::{training, Classify, CliResult, Code};
use crate::io;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    /// Paths relative to the output directory.
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Train config, relative to the manifest file.
    pub config: PathBuf,
    #[serde(default)]
    pub pgan_config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Output directory, relative to the manifest file.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: Option<EvalSettings>,
    #[serde(default)]
    pub export_samples: Option<usize>,
    #[serde(default)]
    pub seed_override: Option<u64>,
    /// Produced artifacts keyed by `seed_<n>/<stage>`.
    #[serde(default)]
    pub artifacts: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let m: Manifest = io::read_json(path).code(Code::Config)?;
        let out = &m.output_dir;
        if out.is_absolute() || out.components().any(|c| matches!(c, Component::ParentDir)) {
            return Err(anyhow!("output_dir {} must stay inside the manifest directory", out.display())).code(Code::Config);
        }
        if m.seeds.is_empty() && m.seed_override.is_none() {
            return Err(anyhow!("manifest {} lists no seeds", path.display())).code(Code::Config);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        io::write_json(path, self)
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    manifest: Manifest,
    manifest_path: &'a Path,
    out: PathBuf,
    summary: RunSummary,
}

impl Runner<'_> {
    fn up_to_date(&self, key: &str, hash: &str) -> bool {
        self.manifest
            .artifacts
            .get(key)
            .is_some_and(|r| r.hash == hash && r.files.iter().all(|f| self.out.join(f).exists()))
    }

    /// Runs `stage` unless its recorded hash matches, then records the files
    /// it produced and rewrites the manifest.
    fn stage(&mut self, key: String, hash: String, stage: impl FnOnce(&Path) -> CliResult<Vec<PathBuf>>) -> CliResult<()> {
        if self.up_to_date(&key, &hash) {
            eprintln!("{key}: up to date");
            self.summary.skipped.push(key);
            return Ok(());
        }
        eprintln!("{key}: running");
        let files = stage(&self.out)?;
        let files = files
            .into_iter()
            .map(|f| f.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or(f))
            .collect();
        self.manifest.artifacts.insert(key.clone(), StageRecord { hash, files });
        self.manifest.save(self.manifest_path).code(Code::Runtime)?;
        self.summary.executed.push(key);
        Ok(())
    }
}

pub fn run_experiment(manifest_path: &Path, seed: Option<u64>) -> CliResult<RunSummary> {
    let mut manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Some(s) = seed {
        manifest.seed_override = Some(s);
    }
    let seeds = match manifest.seed_override {
        Some(s) => vec![s],
        None => manifest.seeds.clone(),
    };
    let config_path = base.join(&manifest.config);
    let pgan_path = manifest.pgan_config.as_ref().map(|p| base.join(p));
    let eval_settings = manifest.eval.unwrap_or_default();
    let export = ExportSettings {
        samples: manifest.export_samples.unwrap_or(ExportSettings::default().samples),
        ..ExportSettings::default()
    };
    let out = base.join(&manifest.output_dir);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .code(Code::Runtime)?;

    let mut runner = Runner {
        manifest,
        manifest_path,
        out,
        summary: RunSummary::default(),
    };
    runner.manifest.save(manifest_path).code(Code::Runtime)?;

    for seed in seeds {
        let config = io::load_config(&config_path, Some(seed))?;
        let pgan = pgan_path.as_deref().map(|p| io::load_pgan_config(p, Some(seed))).transpose()?;
        let config_json = serde_json::to_vec(&config).code(Code::Config)?;
        let seed_bytes = seed.to_le_bytes();
        let train_hash = digest(&[b"train", CODE_VERSION.as_bytes(), &config_json, &seed_bytes]);
        let run_rel = PathBuf::from(format!("seed_{seed}"));

        let train_dir = run_rel.join("train");
        runner.stage(format!("seed_{seed}/train"), train_hash.clone(), |out| {
            let dir = out.join(&train_dir);
            train(&config, Some(&dir)).map_err(training)?;
            Ok(["final_checkpoint.json", "losses.csv", "eval.csv", "record.json"]
                .iter()
                .map(|f| dir.join(f))
                .collect())
        })?;
        let ckpt_path = runner.out.join(&train_dir).join("final_checkpoint.json");

        let mut pgan_hash = String::new();
        if let Some(pcfg) = &pgan {
            let pjson = serde_json::to_vec(pcfg).code(Code::Config)?;
            pgan_hash = digest(&[b"pgan", CODE_VERSION.as_bytes(), &pjson, train_hash.as_bytes()]);
            let pgan_dir = run_rel.join("pgan");
            runner.stage(format!("seed_{seed}/pgan"), pgan_hash.clone(), |out| {
                let dir = out.join(&pgan_dir);
                let source = io::load_trainer(&ckpt_path, Code::Runtime)?;
                let (_, record) =
                    train_pgan(pcfg, FrozenClassifier::from_trainer(&source), Some(&dir)).map_err(training)?;
                let rec_path = dir.join("pgan_record.json");
                io::write_json(&rec_path, &record).code(Code::Runtime)?;
                Ok(vec![dir.join("pgan_checkpoint.json"), rec_path])
            })?;
        }

        let settings_json = serde_json::to_vec(&eval_settings).code(Code::Config)?;
        let eval_hash = digest(&[b"eval", CODE_VERSION.as_bytes(), &settings_json, train_hash.as_bytes()]);
        let eval_rel = run_rel.join("eval.json");
        runner.stage(format!("seed_{seed}/eval"), eval_hash, |out| {
            let t = io::load_trainer(&ckpt_path, Code::Eval)?;
            let mut rng = NamedRng::new(seed, "cli-eval");
            let report = evaluate(t.config().variant, &t.generator, &t.disc, t.dataset(), &eval_settings, &mut rng)
                .context("evaluation failed")
                .code(Code::Eval)?;
            let path = out.join(&eval_rel);
            io::write_json(&path, &report).code(Code::Eval)?;
            Ok(vec![path])
        })?;

        let export_hash = digest(&[
            b"export",
            CODE_VERSION.as_bytes(),
            &export.samples.to_le_bytes(),
            train_hash.as_bytes(),
            pgan_hash.as_bytes(),
        ]);
        runner.stage(format!("seed_{seed}/export"), export_hash, |out| {
            export_plots(&out.join(&train_dir), &ExportSettings { seed, ..export })
        })?;
    }
    Ok(runner.summary)
}
