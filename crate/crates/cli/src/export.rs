//! Plot-ready CSV bundles for a finished run directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use overlap_gan::data::{sample_noise, OverlapDataset};
use overlap_gan::eval::{self, enumerate_states, ConditionState};
use overlap_gan::models::GeneratorNet;
use overlap_gan::tensor::{NamedRng, Tensor};
use overlap_gan::trainer::Trainer;

use crate::failure::{Classify, CliResult, Code};
use crate::io;

pub const SCATTER: &str = "scatter.csv";
pub const POSTERIOR_MATRIX: &str = "posterior_matrix.csv";
pub const INTERPOLATION: &str = "interpolation.csv";
pub const LOSSES: &str = "losses.csv";

pub const REQUIRED: [&str; 2] = ["final_checkpoint.json", "losses.csv"];

#[derive(Clone, Copy, Debug)]
pub struct ExportSettings {
    /// Real and generated points per condition state.
    pub samples: usize,
    pub steps: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            samples: 500,
            steps: 11,
            draws: 8,
            seed: 0,
        }
    }
}

/// Real points whose fine component belongs to the state.
pub fn real_points_for(dataset: &OverlapDataset, state: &ConditionState, n: usize, rng: &mut NamedRng) -> anyhow::Result<Tensor> {
    let mut rows = Vec::with_capacity(n * 2);
    let mut tries = 0;
    while rows.len() < n * 2 {
        tries += 1;
        if tries > 10_000 {
            bail!("state {} has no mass in the dataset", state.name());
        }
        let batch = dataset.sample_batch(n.max(64), rng)?;
        for (x, c) in batch.points.row_iter().zip(&batch.components) {
            if state.expected.contains(c) && rows.len() < n * 2 {
                rows.extend_from_slice(x);
            }
        }
    }
    Ok(Tensor::new(vec![n, 2], rows)?)
}

pub fn write_scatter(t: &Trainer, settings: &ExportSettings, path: &Path) -> anyhow::Result<usize> {
    let mut rng = NamedRng::new(settings.seed, "export-scatter");
    let mut rows = 0;
    io::write_with(path, |w| {
        writeln!(w, "source,state,x,y")?;
        for state in enumerate_states(&t.dataset().scheme) {
            let real = real_points_for(t.dataset(), &state, settings.samples, &mut rng).map_err(std::io::Error::other)?;
            let fake =
                eval::generate_at(&t.generator, &state.vector, settings.samples, &mut rng).map_err(std::io::Error::other)?;
            for (source, pts) in [("real", &real), ("generated", &fake)] {
                for x in pts.row_iter() {
                    writeln!(w, "{source},{},{},{}", state.name(), x[0], x[1])?;
                    rows += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(rows)
}

pub fn write_posterior_matrix(t: &Trainer, settings: &ExportSettings, path: &Path) -> anyhow::Result<()> {
    let mut rng = NamedRng::new(settings.seed, "export-posterior");
    let n = settings.samples * t.dataset().num_classes();
    let m = if t.disc.c_head.is_some() {
        eval::posterior_matrix_classifier(&t.disc, t.dataset(), n, &mut rng)?
    } else {
        eval::posterior_matrix_bayes(t.dataset(), n, &mut rng)?
    };
    io::write_with(path, |w| m.write_csv(w))
}

/// Interpolation traces from class `a` to class `b`, one per latent draw.
pub fn interpolation_trace(
    gen: &GeneratorNet,
    dataset: &OverlapDataset,
    a: usize,
    b: usize,
    settings: &ExportSettings,
    path: &Path,
) -> anyhow::Result<()> {
    let c = dataset.num_classes();
    if a >= c || b >= c {
        bail!("class index out of range for {c} classes");
    }
    let (mut from, mut to) = (vec![0.0; c], vec![0.0; c]);
    from[a] = 1.0;
    to[b] = 1.0;
    let mut rng = NamedRng::new(settings.seed, "export-interpolation");
    let mut traces = Vec::with_capacity(settings.draws);
    for _ in 0..settings.draws {
        let z = sample_noise(1, gen.z_dim, &mut rng);
        traces.push(eval::interpolate(gen, &from, &to, settings.steps, z.data())?);
    }
    io::write_with(path, |w| {
        writeln!(w, "draw,step,t,x,y,component")?;
        for (d, trace) in traces.iter().enumerate() {
            for (i, x) in trace.row_iter().enumerate() {
                let t = i as f64 / (settings.steps - 1) as f64;
                writeln!(w, "{d},{i},{t},{},{},{}", x[0], x[1], dataset.fine_argmax(x))?;
            }
        }
        Ok(())
    })
}

/// Writes the four export files into `run/plots` and returns their paths.
pub fn export_plots(run: &Path, settings: &ExportSettings) -> CliResult<Vec<PathBuf>> {
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|f| !run.join(f).exists()).collect();
    if !missing.is_empty() {
        return Err(anyhow!("incomplete run {}: missing {}", run.display(), missing.join(", "))).code(Code::Eval);
    }
    let t = io::load_trainer(&run.join("final_checkpoint.json"), Code::Eval)?;
    let dir = run.join("plots");
    let files: Vec<PathBuf> = [SCATTER, POSTERIOR_MATRIX, INTERPOLATION, LOSSES].iter().map(|f| dir.join(f)).collect();
    (|| -> anyhow::Result<()> {
        write_scatter(&t, settings, &files[0])?;
        write_posterior_matrix(&t, settings, &files[1])?;
        interpolation_trace(&t.generator, t.dataset(), 0, 1, settings, &files[2])?;
        let losses = std::fs::read(run.join(LOSSES)).context("reading losses.csv")?;
        io::write_atomic(&files[3], &losses)
    })()
    .code(Code::Eval)?;
    Ok(files)
}
