//! Evaluation against the analytic mixture oracle: DMA, raw-space Fréchet
//! distance, mean posterior matrices, interpolation traces and posterior
//! entropy profiles.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{entropy, sample_noise, OverlapDataset, OverlapScheme};
use crate::error::{Error, Result};
use crate::losses::kl_divergence;
use crate::models::{DiscClassifierNet, GeneratorNet, PGanNets, Variant};
use crate::tensor::Tensor;

/// Covariance jitter added when a fitted covariance is singular.
pub const FRECHET_JITTER: f64 = 1e-6;

/// A conditioning state: a set of coarse classes and the mean of their
/// one-hot vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionState {
    pub label: Vec<usize>,
    pub vector: Vec<f64>,
    /// Fine components whose membership equals `label`.
    pub expected: Vec<usize>,
}

impl ConditionState {
    pub fn new(label: Vec<usize>, num_classes: usize, expected: Vec<usize>) -> Self {
        let mut vector = vec![0.0; num_classes];
        let w = 1.0 / label.len() as f64;
        for &c in &label {
            vector[c] = w;
        }
        Self { label, vector, expected }
    }

    pub fn is_mutual(&self) -> bool {
        self.label.len() > 1
    }

    pub fn name(&self) -> String {
        self.label
            .iter()
            .map(|&c| crate::data::class_name(c))
            .collect::<Vec<_>>()
            .join("&")
    }
}

/// One state per distinct membership set, in order of first occurrence.
pub fn enumerate_states(scheme: &OverlapScheme) -> Vec<ConditionState> {
    let mut states: Vec<ConditionState> = Vec::new();
    for (comp, members) in scheme.membership.iter().enumerate() {
        match states.iter_mut().find(|s| &s.label == members) {
            Some(s) => s.expected.push(comp),
            None => states.push(ConditionState::new(members.clone(), scheme.num_classes, vec![comp])),
        }
    }
    states
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmaReport {
    pub states: Vec<String>,
    pub per_state: Vec<f64>,
    pub mean: f64,
}

/// DMA with an arbitrary sampler mapping a state to `n` generated points.
pub fn dma_with<F>(dataset: &OverlapDataset, n_per_state: usize, mut sampler: F) -> Result<DmaReport>
where
    F: FnMut(&ConditionState, usize) -> Result<Tensor>,
{
    if n_per_state == 0 {
        return Err(Error::EmptyBatch("dma"));
    }
    let states = enumerate_states(&dataset.scheme);
    let mut per_state = Vec::with_capacity(states.len());
    for s in &states {
        let points = sampler(s, n_per_state)?;
        let hits = points
            .row_iter()
            .filter(|x| s.expected.contains(&dataset.fine_argmax(x)))
            .count();
        per_state.push(hits as f64 / points.rows() as f64);
    }
    let mean = per_state.iter().sum::<f64>() / per_state.len() as f64;
    Ok(DmaReport {
        states: states.iter().map(ConditionState::name).collect(),
        per_state,
        mean,
    })
}

/// Generates `n` points at a fixed condition vector.
pub fn generate_at<R: Rng + ?Sized>(gen: &GeneratorNet, cond: &[f64], n: usize, rng: &mut R) -> Result<Tensor> {
    let z = sample_noise(n, gen.z_dim, rng);
    let c = Tensor::new(vec![n, cond.len()], cond.repeat(n))?;
    gen.generate(&z, &c)
}

pub fn dma<R: Rng + ?Sized>(
    gen: &GeneratorNet,
    dataset: &OverlapDataset,
    n_per_state: usize,
    rng: &mut R,
) -> Result<DmaReport> {
    dma_with(dataset, n_per_state, |s, n| generate_at(gen, &s.vector, n, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// Set when a covariance was singular and jitter was added.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "Fréchet distance needs at least {} samples, got {n}",
            d + 1
        )));
    }
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for r in x.row_iter() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let scale = cov.trace().abs().max(1.0);
    let min = SymmetricEigen::new(cov.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    min <= 1e-12 * scale
}

/// `Tr((a b)^{1/2})` for SPD `a`, `b` via the eigendecomposition of
/// `a^{1/2} b a^{1/2}`.
pub fn trace_sqrt_product_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ea = SymmetricEigen::new(a.clone());
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sa = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = &sa * b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Closed form for 2x2 SPD matrices: the eigenvalues of `ab` are real and
/// non-negative, so `Tr sqrt(ab) = sqrt(tr(ab) + 2 sqrt(det(ab)))`.
pub fn trace_sqrt_product_2x2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a * b;
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = (a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)]) * (b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)]);
    (tr + 2.0 * det.max(0.0).sqrt()).max(0.0).sqrt()
}

/// Fréchet distance between Gaussian fits of two point sets.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<Frechet> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ma, mut ca) = gaussian_fit(a)?;
    let (mb, mut cb) = gaussian_fit(b)?;
    let d = ma.len();
    let mut regularized = false;
    for c in [&mut ca, &mut cb] {
        if is_singular(c) {
            *c += DMatrix::identity(d, d) * FRECHET_JITTER;
            regularized = true;
        }
    }
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let cross = if d == 2 {
        trace_sqrt_product_2x2(&ca, &cb)
    } else {
        trace_sqrt_product_eigen(&ca, &cb)
    };
    let distance = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(Frechet {
        distance: distance.max(0.0),
        regularized,
    })
}

/// Maps simplex rows to 2-D points by placing vertex `k` at angle `2 pi k / c`
/// on the unit circle.
pub fn simplex_coordinates(s: &Tensor) -> Tensor {
    let c = s.cols();
    let verts: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / c as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut data = Vec::with_capacity(2 * s.rows());
    for r in s.row_iter() {
        let (mut x, mut y) = (0.0, 0.0);
        for (p, (vx, vy)) in r.iter().zip(&verts) {
            x += p * vx;
            y += p * vy;
        }
        data.push(x);
        data.push(y);
    }
    Tensor::new(vec![s.rows(), 2], data).expect("2-D coordinates")
}

/// `c x c` matrix whose row `j` is the mean posterior over samples
/// associated with class `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Samples contributing to each row.
    pub counts: Vec<usize>,
}

impl PosteriorMatrix {
    pub fn from_samples(posteriors: &Tensor, classes: &[usize], num_classes: usize) -> Result<Self> {
        if posteriors.rows() != classes.len() || posteriors.cols() != num_classes {
            return Err(Error::ShapeMismatch {
                op: "posterior_matrix",
                lhs: posteriors.shape().to_vec(),
                rhs: vec![classes.len(), num_classes],
            });
        }
        let mut rows = vec![vec![0.0; num_classes]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (p, &c) in posteriors.row_iter().zip(classes) {
            counts[c] += 1;
            for (acc, v) in rows[c].iter_mut().zip(p) {
                *acc += v;
            }
        }
        for (row, &n) in rows.iter_mut().zip(&counts) {
            if n > 0 {
                row.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(Self { rows, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn max_abs_diff(&self, other: &PosteriorMatrix) -> f64 {
        self.rows
            .iter()
            .flatten()
            .zip(other.rows.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let names: Vec<String> = (0..self.num_classes()).map(crate::data::class_name).collect();
        writeln!(out, "class,{}", names.join(","))?;
        for (name, row) in names.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{name},{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Mean classifier posterior on real samples grouped by coarse label.
pub fn posterior_matrix_classifier<R: Rng + ?Sized>(
    disc: &DiscClassifierNet,
    dataset: &OverlapDataset,
    n: usize,
    rng: &mut R,
) -> Result<PosteriorMatrix> {
    let batch = dataset.sample_batch(n, rng)?;
    let s = disc.classify(&batch.points)?;
    PosteriorMatrix::from_samples(&s, &batch.classes, dataset.num_classes())
}

/// Same as [`posterior_matrix_classifier`] with the analytic Bayes posterior.
pub fn posterior_matrix_bayes<R: Rng + ?Sized>(dataset: &OverlapDataset, n: usize, rng: &mut R) -> Result<PosteriorMatrix> {
    let batch = dataset.sample_batch(n, rng)?;
    let s = dataset.bayes_posteriors(&batch.points);
    PosteriorMatrix::from_samples(&s, &batch.classes, dataset.num_classes())
}

/// Mean generated posterior per conditioning class, `n` samples per class.
pub fn posterior_matrix_pgan<R: Rng + ?Sized>(nets: &PGanNets, n: usize, rng: &mut R) -> Result<PosteriorMatrix> {
    let c = nets.num_classes();
    let mut parts = Vec::with_capacity(c);
    let mut classes = Vec::with_capacity(c * n);
    for k in 0..c {
        parts.push(nets.sample_class(n, k, rng)?);
        classes.extend(std::iter::repeat_n(k, n));
    }
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let all = Tensor::new(vec![c * n, c], data)?;
    PosteriorMatrix::from_samples(&all, &classes, c)
}

/// Linear interpolation of the condition from `from` to `to` with a fixed
/// latent `z`; one generated point per step.
pub fn interpolate(gen: &GeneratorNet, from: &[f64], to: &[f64], steps: usize, z: &[f64]) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if from.len() != to.len() || z.len() != gen.z_dim {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: vec![from.len(), z.len()],
            rhs: vec![to.len(), gen.z_dim],
        });
    }
    let mut conds = Vec::with_capacity(steps * from.len());
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        conds.extend(from.iter().zip(to).map(|(a, b)| a * (1.0 - t) + b * t));
    }
    let c = Tensor::new(vec![steps, from.len()], conds)?;
    let zs = Tensor::new(vec![steps, z.len()], z.repeat(steps))?;
    gen.generate(&zs, &c)
}

/// Fraction of latent draws whose interpolation midpoint between classes
/// `a` and `b` lands (by oracle argmax) on a component shared by both.
pub fn midpoint_on_shared<R: Rng + ?Sized>(
    gen: &GeneratorNet,
    dataset: &OverlapDataset,
    a: usize,
    b: usize,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let shared: Vec<usize> = (0..dataset.num_fine())
        .filter(|&k| {
            let m = &dataset.scheme.membership[k];
            m.contains(&a) && m.contains(&b)
        })
        .collect();
    if shared.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "classes {} and {} share no component",
            crate::data::class_name(a),
            crate::data::class_name(b)
        )));
    }
    if draws == 0 {
        return Err(Error::EmptyBatch("midpoint_on_shared"));
    }
    let c = dataset.num_classes();
    let (mut ea, mut eb) = (vec![0.0; c], vec![0.0; c]);
    ea[a] = 1.0;
    eb[b] = 1.0;
    let mut hits = 0;
    for _ in 0..draws {
        let z = sample_noise(1, gen.z_dim, rng);
        let trace = interpolate(gen, &ea, &eb, 3, z.data())?;
        if shared.contains(&dataset.fine_argmax(trace.row(1))) {
            hits += 1;
        }
    }
    Ok(hits as f64 / draws as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub mean: f64,
    pub q10: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of the oracle (Bayes) posterior entropy over `points`, in nats.
pub fn posterior_entropy_profile(dataset: &OverlapDataset, points: &Tensor) -> Result<EntropyProfile> {
    if points.rows() == 0 {
        return Err(Error::EmptyBatch("posterior_entropy_profile"));
    }
    let mut h: Vec<f64> = points.row_iter().map(|x| entropy(&dataset.bayes_posterior(x).probs)).collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.sort_by(f64::total_cmp);
    Ok(EntropyProfile {
        mean,
        q10: quantile(&h, 0.10),
        q25: quantile(&h, 0.25),
        median: quantile(&h, 0.5),
        q75: quantile(&h, 0.75),
        q90: quantile(&h, 0.90),
    })
}

/// Draws `n` generated points with conditions distributed as at training
/// time: classifier posteriors of fresh real samples for CP-GAN, the real
/// samples' one-hot labels otherwise.
pub fn sample_generated<R: Rng + ?Sized>(
    variant: Variant,
    gen: &GeneratorNet,
    disc: &DiscClassifierNet,
    dataset: &OverlapDataset,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let real = dataset.sample_batch(n, rng)?;
    let cond = match variant {
        Variant::CpGan => disc.classify(&real.points)?,
        Variant::AcGan | Variant::CganConcat => real.labels,
    };
    let z = sample_noise(n, gen.z_dim, rng);
    gen.generate(&z, &cond)
}

/// Mean `KL(s_r || s_g)` over `n` paired draws, where `s_r = C(x_r)` and
/// `s_g = C(G(z, s_r))`.
pub fn posterior_consistency<R: Rng + ?Sized>(
    gen: &GeneratorNet,
    disc: &DiscClassifierNet,
    dataset: &OverlapDataset,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let real = dataset.sample_batch(n, rng)?;
    let s_r = disc.classify(&real.points)?;
    let z = sample_noise(n, gen.z_dim, rng);
    let x_g = gen.generate(&z, &s_r)?;
    let s_g = disc.classify(&x_g)?;
    kl_divergence(&s_r, &s_g)
}

/// Metrics bundle written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dma_states: Vec<String>,
    pub dma_per_state: Vec<f64>,
    pub dma_mean: f64,
    pub frechet_global: f64,
    pub frechet_regularized: bool,
    /// Per-state distance between generated points and real points of the
    /// state's expected components.
    pub frechet_per_state: Vec<Option<f64>>,
    pub posterior_matrix: Option<PosteriorMatrix>,
    pub posterior_matrix_bayes: PosteriorMatrix,
    pub entropy_profile: EntropyProfile,
    pub entropy_profile_real: EntropyProfile,
    pub mean_posterior_kl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_per_state: usize,
    pub n_global: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_per_state: 1000,
            n_global: 10_000,
        }
    }
}

/// Full evaluation of a trained generator/discriminator pair.
pub fn evaluate<R: Rng + ?Sized>(
    variant: Variant,
    gen: &GeneratorNet,
    disc: &DiscClassifierNet,
    dataset: &OverlapDataset,
    settings: &EvalSettings,
    rng: &mut R,
) -> Result<EvalReport> {
    let dma_report = dma(gen, dataset, settings.n_per_state, rng)?;
    let fake = sample_generated(variant, gen, disc, dataset, settings.n_global, rng)?;
    let real = dataset.sample_batch(settings.n_global, rng)?;
    let global = frechet_distance(&real.points, &fake)?;
    let mut frechet_per_state = Vec::new();
    for s in enumerate_states(&dataset.scheme) {
        let rows: Vec<f64> = real
            .points
            .row_iter()
            .zip(&real.components)
            .filter(|(_, c)| s.expected.contains(c))
            .flat_map(|(r, _)| r.iter().copied())
            .collect();
        let n_real = rows.len() / 2;
        let value = if n_real > 2 {
            let real_s = Tensor::new(vec![n_real, 2], rows)?;
            let gen_s = generate_at(gen, &s.vector, settings.n_per_state.max(3), rng)?;
            Some(frechet_distance(&real_s, &gen_s)?.distance)
        } else {
            None
        };
        frechet_per_state.push(value);
    }
    let (posterior_matrix, mean_posterior_kl) = if variant.has_classifier() {
        (
            Some(posterior_matrix_classifier(disc, dataset, settings.n_global, rng)?),
            Some(posterior_consistency(gen, disc, dataset, settings.n_global, rng)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        dma_states: dma_report.states,
        dma_per_state: dma_report.per_state,
        dma_mean: dma_report.mean,
        frechet_global: global.distance,
        frechet_regularized: global.regularized,
        frechet_per_state,
        posterior_matrix,
        posterior_matrix_bayes: posterior_matrix_bayes(dataset, settings.n_global, rng)?,
        entropy_profile: posterior_entropy_profile(dataset, &fake)?,
        entropy_profile_real: posterior_entropy_profile(dataset, &real.points)?,
        mean_posterior_kl,
    })
}
