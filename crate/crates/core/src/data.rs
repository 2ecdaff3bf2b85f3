//! Labeled mixture-of-Gaussians datasets with controlled class overlap.
//!
//! A dataset is a set of fine 2-D Gaussian components plus an
//! [`OverlapScheme`] mapping each component to the coarse classes that may
//! label it. A component in one class is class-distinct; a component in two
//! or more classes is class-mutual, and each of its samples gets a label
//! drawn uniformly from its membership set.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_DIM: usize = 2;

const RING_RADIUS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineComponent {
    pub id: usize,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub weight: f64,
}

impl FineComponent {
    pub fn isotropic(id: usize, mean: [f64; 2], sigma: f64, weight: f64) -> Self {
        let v = sigma * sigma;
        Self {
            id,
            mean,
            covariance: [[v, 0.0], [0.0, v]],
            weight,
        }
    }

    fn validate(&self) -> Result<()> {
        let [[a, b], [c, d]] = self.covariance;
        let det = a * d - b * c;
        if (b - c).abs() > 1e-12 || a <= 0.0 || det <= 0.0 {
            return Err(Error::InvalidScheme(format!(
                "component {} covariance is not symmetric positive-definite",
                self.id
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::InvalidScheme(format!("component {} has negative weight", self.id)));
        }
        Ok(())
    }

    /// Lower Cholesky factor `[l11, l21, l22]`.
    fn cholesky(&self) -> [f64; 3] {
        let [[a, b], [_, d]] = self.covariance;
        let l11 = a.sqrt();
        let l21 = b / l11;
        [l11, l21, (d - l21 * l21).sqrt()]
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let [[a, b], [_, d]] = self.covariance;
        let det = a * d - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -0.5 * quad - (2.0 * PI).ln() - 0.5 * det.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let [l11, l21, l22] = self.cholesky();
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        [self.mean[0] + l11 * u, self.mean[1] + l21 * u + l22 * v]
    }
}

/// Which coarse classes each fine component belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScheme {
    pub num_classes: usize,
    pub membership: Vec<Vec<usize>>,
}

impl OverlapScheme {
    pub fn new(num_classes: usize, membership: Vec<Vec<usize>>) -> Result<Self> {
        let mut membership = membership;
        for m in &mut membership {
            m.sort_unstable();
            m.dedup();
        }
        let scheme = Self {
            num_classes,
            membership,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Builds a scheme from per-class component lists.
    pub fn from_classes(num_fine: usize, classes: &[Vec<usize>]) -> Result<Self> {
        let mut membership = vec![Vec::new(); num_fine];
        for (class, comps) in classes.iter().enumerate() {
            for &c in comps {
                let slot = membership
                    .get_mut(c)
                    .ok_or_else(|| Error::InvalidScheme(format!("class {class} lists unknown component {c}")))?;
                slot.push(class);
            }
        }
        Self::new(classes.len(), membership)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidScheme("no classes".into()));
        }
        let mut used = vec![false; self.num_classes];
        for (i, m) in self.membership.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::InvalidScheme(format!("component {i} belongs to no class")));
            }
            for &c in m {
                if c >= self.num_classes {
                    return Err(Error::InvalidScheme(format!("component {i} names class {c} >= {}", self.num_classes)));
                }
                used[c] = true;
            }
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::InvalidScheme(format!("class {} has no components", class_name(c))));
        }
        Ok(())
    }

    pub fn num_fine(&self) -> usize {
        self.membership.len()
    }

    pub fn is_distinct(&self, component: usize) -> bool {
        self.membership[component].len() == 1
    }

    /// Components labelled by `class`.
    pub fn class_components(&self, class: usize) -> Vec<usize> {
        (0..self.num_fine())
            .filter(|&i| self.membership[i].contains(&class))
            .collect()
    }
}

/// `A`, `B`, ... for class indices.
pub fn class_name(class: usize) -> String {
    if class < 26 {
        ((b'A' + class as u8) as char).to_string()
    } else {
        format!("C{class}")
    }
}

/// Parses `A`, `b`, or a numeric index into a class index.
pub fn parse_class(name: &str) -> Option<usize> {
    let name = name.trim();
    if let Ok(i) = name.parse::<usize>() {
        return Some(i);
    }
    let mut chars = name.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some((c.to_ascii_uppercase() as u8 - b'A') as usize),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapDataset {
    pub components: Vec<FineComponent>,
    pub scheme: OverlapScheme,
}

/// A sampled minibatch. `labels` holds one-hot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub points: Tensor,
    pub labels: Tensor,
    pub classes: Vec<usize>,
    pub components: Vec<usize>,
}

/// Class posterior at a point; `degenerate` marks the uniform fallback used
/// when no component has finite density there.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    pub degenerate: bool,
}

impl OverlapDataset {
    pub fn new(components: Vec<FineComponent>, scheme: OverlapScheme) -> Result<Self> {
        if components.len() != scheme.num_fine() {
            return Err(Error::InvalidScheme(format!(
                "{} components but membership lists {}",
                components.len(),
                scheme.num_fine()
            )));
        }
        for c in &components {
            c.validate()?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidScheme(format!("component weights sum to {total}, expected 1")));
        }
        scheme.validate()?;
        Ok(Self { components, scheme })
    }

    pub fn num_classes(&self) -> usize {
        self.scheme.num_classes
    }

    pub fn num_fine(&self) -> usize {
        self.components.len()
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LabeledBatch> {
        if n == 0 {
            return Err(Error::EmptyBatch("sample_batch"));
        }
        let c = self.num_classes();
        let mut points = Vec::with_capacity(n * DATA_DIM);
        let mut labels = vec![0.0; n * c];
        let mut classes = Vec::with_capacity(n);
        let mut components = Vec::with_capacity(n);
        for row in 0..n {
            let comp = self.pick_component(rng);
            let p = self.components[comp].sample(rng);
            points.extend_from_slice(&p);
            let members = &self.scheme.membership[comp];
            let class = members[rng.random_range(0..members.len())];
            labels[row * c + class] = 1.0;
            classes.push(class);
            components.push(comp);
        }
        Ok(LabeledBatch {
            points: Tensor::new(vec![n, DATA_DIM], points)?,
            labels: Tensor::new(vec![n, c], labels)?,
            classes,
            components,
        })
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, comp) in self.components.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }

    /// `log(weight_i * N(x; mu_i, Sigma_i))` for every component.
    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect()
    }

    /// Posterior over fine components.
    pub fn fine_responsibilities(&self, x: &[f64]) -> Vec<f64> {
        normalize_log(&self.log_joint(x)).0
    }

    /// Most probable fine component at `x`.
    pub fn fine_argmax(&self, x: &[f64]) -> usize {
        argmax(&self.log_joint(x))
    }

    /// Bayes class posterior: each component splits its mass uniformly over
    /// its membership set.
    pub fn bayes_posterior(&self, x: &[f64]) -> Posterior {
        let c = self.num_classes();
        let lj = self.log_joint(x);
        let mut per_class = vec![Vec::new(); c];
        for (i, l) in lj.iter().enumerate() {
            let m = &self.scheme.membership[i];
            let share = l - (m.len() as f64).ln();
            for &class in m {
                per_class[class].push(share);
            }
        }
        let logs: Vec<f64> = per_class.iter().map(|v| crate::tensor::log_sum_exp(v)).collect();
        let (probs, degenerate) = normalize_log(&logs);
        Posterior { probs, degenerate }
    }

    /// Bayes class posteriors for every row of an `n x 2` point matrix.
    pub fn bayes_posteriors(&self, points: &Tensor) -> Tensor {
        let c = self.num_classes();
        let mut out = Vec::with_capacity(points.rows() * c);
        for row in points.row_iter() {
            out.extend(self.bayes_posterior(row).probs);
        }
        Tensor::new(vec![points.rows(), c], out).expect("posterior shape")
    }

    /// Writes `x0,x1,coarse_label,fine_component` rows.
    pub fn write_csv<W: Write>(&self, batch: &LabeledBatch, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x0,x1,coarse_label,fine_component")?;
        for (i, p) in batch.points.row_iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                p[0],
                p[1],
                class_name(batch.classes[i]),
                batch.components[i]
            )?;
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of log-weights; uniform with a flag when nothing is finite.
fn normalize_log(logs: &[f64]) -> (Vec<f64>, bool) {
    let lse = crate::tensor::log_sum_exp(logs);
    if !lse.is_finite() {
        let n = logs.len() as f64;
        return (vec![1.0 / n; logs.len()], true);
    }
    (logs.iter().map(|l| (l - lse).exp()).collect(), false)
}

/// Two unit-variance Gaussians at `(-1, 0)` and `(1, 0)`, one per class.
pub fn build_two_gaussian_toy() -> OverlapDataset {
    let components = vec![
        FineComponent::isotropic(0, [-1.0, 0.0], 1.0, 0.5),
        FineComponent::isotropic(1, [1.0, 0.0], 1.0, 0.5),
    ];
    let scheme = OverlapScheme::new(2, vec![vec![0], vec![1]]).expect("toy scheme");
    OverlapDataset::new(components, scheme).expect("toy dataset")
}

/// `k_fine` unit Gaussians evenly spaced on a circle of radius 4, relabelled
/// into overlapping coarse classes.
///
/// * `10to5`: A={9,0,1}, B={1,2,3}, C={3,4,5}, D={5,6,7}, E={7,8,9}
/// * `7to3`:  A={0,1,5,6}, B={1,2,3,6}, C={3,4,5,6}
pub fn build_ring_overlap(k_fine: usize, scheme: &str) -> Result<OverlapDataset> {
    build_ring_overlap_with_radius(k_fine, scheme, RING_RADIUS)
}

pub fn build_ring_overlap_with_radius(k_fine: usize, scheme: &str, radius: f64) -> Result<OverlapDataset> {
    let classes: Vec<Vec<usize>> = match scheme {
        "10to5" => vec![
            vec![9, 0, 1],
            vec![1, 2, 3],
            vec![3, 4, 5],
            vec![5, 6, 7],
            vec![7, 8, 9],
        ],
        "7to3" => vec![vec![0, 1, 5, 6], vec![1, 2, 3, 6], vec![3, 4, 5, 6]],
        other => return Err(Error::UnknownScheme(other.to_string())),
    };
    let expected = if scheme == "10to5" { 10 } else { 7 };
    if k_fine != expected {
        return Err(Error::InvalidScheme(format!("scheme {scheme} needs {expected} fine components, got {k_fine}")));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidScheme(format!("ring radius must be positive, got {radius}")));
    }
    let w = 1.0 / k_fine as f64;
    let components = (0..k_fine)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / k_fine as f64;
            FineComponent::isotropic(i, [radius * theta.cos(), radius * theta.sin()], 1.0, w)
        })
        .collect();
    OverlapDataset::new(components, OverlapScheme::from_classes(k_fine, &classes)?)
}

/// How a config names its dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoGaussianToy,
    Ring {
        scheme: String,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    Custom {
        components: Vec<FineComponent>,
        num_classes: usize,
        membership: Vec<Vec<usize>>,
    },
}

fn default_radius() -> f64 {
    RING_RADIUS
}

impl DatasetSpec {
    pub fn ring(scheme: &str) -> Self {
        DatasetSpec::Ring {
            scheme: scheme.to_string(),
            radius: RING_RADIUS,
        }
    }

    pub fn build(&self) -> Result<OverlapDataset> {
        match self {
            DatasetSpec::TwoGaussianToy => Ok(build_two_gaussian_toy()),
            DatasetSpec::Ring { scheme, radius } => {
                let k = match scheme.as_str() {
                    "10to5" => 10,
                    "7to3" => 7,
                    other => return Err(Error::UnknownScheme(other.to_string())),
                };
                build_ring_overlap_with_radius(k, scheme, *radius)
            }
            DatasetSpec::Custom {
                components,
                num_classes,
                membership,
            } => OverlapDataset::new(components.clone(), OverlapScheme::new(*num_classes, membership.clone())?),
        }
    }
}

/// `n x dim` i.i.d. standard normal entries.
pub fn sample_noise<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, dim], data).expect("noise shape")
}

/// `n` uniform one-hot rows over `c` classes, with the drawn indices.
pub fn sample_categorical<R: Rng + ?Sized>(n: usize, c: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
    let mut data = vec![0.0; n * c];
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    for (row, &k) in idx.iter().enumerate() {
        data[row * c + k] = 1.0;
    }
    (Tensor::new(vec![n, c], data).expect("categorical shape"), idx)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}
