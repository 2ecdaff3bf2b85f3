//! Generator, shared discriminator/classifier, and the posterior GAN nets.
//!
//! Each network owns its weights as plain [`Tensor`]s. To run a network on a
//! [`Graph`] it is first bound (`bind`), which places every weight on the tape
//! as a tracked leaf (trainable) or constant (frozen), and the returned
//! handle performs the forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Graph, Tensor, Var};

/// Tolerance for condition rows and posterior rows to count as on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ac-gan", alias = "AC-GAN", alias = "acgan")]
    AcGan,
    #[serde(rename = "cgan-concat", alias = "cGAN-concat", alias = "cgan")]
    CganConcat,
    #[serde(rename = "cp-gan", alias = "CP-GAN", alias = "cpgan")]
    CpGan,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AcGan => "ac-gan",
            Variant::CganConcat => "cgan-concat",
            Variant::CpGan => "cp-gan",
        }
    }

    /// Whether the shared network carries a classifier head.
    pub fn has_classifier(self) -> bool {
        !matches!(self, Variant::CganConcat)
    }

    /// Whether the critic sees the condition vector next to the sample.
    pub fn conditions_critic(self) -> bool {
        matches!(self, Variant::CganConcat)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Checks every row of `t` is a probability vector.
pub fn check_simplex(t: &Tensor, tol: f64) -> Result<()> {
    for (row, r) in t.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        let min = r.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > tol || min < -tol || !sum.is_finite() {
            return Err(Error::NotSimplex { row, sum, min });
        }
    }
    Ok(())
}

/// Fully connected layer `x @ weight + bias`, weight shaped `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let place = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LinearVars {
            weight: place(g, &self.weight),
            bias: place(g, &self.bias),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_bias(h, self.bias)
    }

    fn push_vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Named, ordered access to a network's weights. The order matches the
/// order of [`BoundNet::vars`] on the bound handle.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub trait BoundNet {
    fn vars(&self) -> Vec<Var>;
}

fn linear_params<'a>(prefix: &str, layers: &'a [Linear], out: &mut Vec<(String, &'a Tensor)>) {
    for (i, l) in layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &l.weight));
        out.push((format!("{prefix}.{i}.bias"), &l.bias));
    }
}

fn linear_params_mut<'a>(layers: &'a mut [Linear], out: &mut Vec<&'a mut Tensor>) {
    for l in layers {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
}

/// Plain ReLU MLP: hidden layers followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct BoundMlp {
    layers: Vec<LinearVars>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, width: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut fan_in = input;
        for _ in 0..hidden {
            layers.push(Linear::new(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Linear::new(fan_in, output, rng));
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl BoundNet for BoundMlp {
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.push_vars(&mut out);
        }
        out
    }
}

impl Parameters for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("layers", &self.layers, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        linear_params_mut(&mut self.layers, &mut out);
        out
    }
}

/// `x = G(z, cond)`: the condition is concatenated to the noise at the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub z_dim: usize,
    pub cond_dim: usize,
    pub mlp: Mlp,
}

impl GeneratorNet {
    pub fn new<R: Rng + ?Sized>(z_dim: usize, cond_dim: usize, width: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            z_dim,
            cond_dim,
            mlp: Mlp::new(z_dim + cond_dim, width, 3, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        self.mlp.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, z: Var, cond: Var) -> Result<Var> {
        let (zs, cs) = (g.shape(z).to_vec(), g.shape(cond).to_vec());
        if zs.len() != 2 || cs.len() != 2 || zs[1] != self.z_dim || cs[1] != self.cond_dim || zs[0] != cs[0] {
            return Err(Error::ShapeMismatch {
                op: "generator input",
                lhs: zs,
                rhs: cs,
            });
        }
        let input = g.concat(&[z, cond], 1)?;
        bound.forward(g, input)
    }

    /// Deterministic generation outside of training. Condition rows must lie
    /// on the simplex.
    pub fn generate(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        check_simplex(cond, SIMPLEX_TOL)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let out = self.forward(&mut g, &bound, zv, cv)?;
        Ok(g.value(out).clone())
    }
}

impl Parameters for GeneratorNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("generator", &self.mlp.layers, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

/// Discriminator `D(x)` and classifier `C(y|x)` with `k_shared` of the three
/// hidden layers shared. Unshared hidden layers are duplicated per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscClassifierNet {
    pub input_dim: usize,
    pub num_classes: usize,
    pub k_shared: usize,
    /// Dropout rate after each of the three hidden layers (0 disables).
    pub dropout: [f64; 3],
    pub trunk: Vec<Linear>,
    pub d_branch: Vec<Linear>,
    pub c_branch: Vec<Linear>,
    pub d_head: Linear,
    pub c_head: Option<Linear>,
}

pub const HIDDEN_LAYERS: usize = 3;

pub struct BoundDiscClassifier {
    trunk: Vec<LinearVars>,
    d_branch: Vec<LinearVars>,
    c_branch: Vec<LinearVars>,
    d_head: LinearVars,
    c_head: Option<LinearVars>,
}

/// Raw critic scores `[n, 1]` and, when a classifier head exists, its logits `[n, c]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub logits: Option<Var>,
}

impl DiscClassifierNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        width: usize,
        k_shared: usize,
        dropout: [f64; 3],
        with_classifier: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if k_shared > HIDDEN_LAYERS {
            return Err(Error::InvalidConfig(format!("k_shared must be in 0..=3, got {k_shared}")));
        }
        if let Some(r) = dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::DropoutRate(*r));
        }
        let mut fan_in = input_dim;
        let mut trunk = Vec::new();
        for _ in 0..k_shared {
            trunk.push(Linear::new(fan_in, width, rng));
            fan_in = width;
        }
        let branch = |rng: &mut R| {
            let mut f = fan_in;
            (k_shared..HIDDEN_LAYERS)
                .map(|_| {
                    let l = Linear::new(f, width, rng);
                    f = width;
                    l
                })
                .collect::<Vec<_>>()
        };
        let d_branch = branch(rng);
        let c_branch = if with_classifier { branch(rng) } else { Vec::new() };
        let d_head = Linear::new(width, 1, rng);
        let c_head = with_classifier.then(|| Linear::new(width, num_classes, rng));
        Ok(Self {
            input_dim,
            num_classes,
            k_shared,
            dropout,
            trunk,
            d_branch,
            c_branch,
            d_head,
            c_head,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDiscClassifier {
        let bind_all = |g: &mut Graph, ls: &[Linear]| ls.iter().map(|l| l.bind(g, trainable)).collect();
        BoundDiscClassifier {
            trunk: bind_all(g, &self.trunk),
            d_branch: bind_all(g, &self.d_branch),
            c_branch: bind_all(g, &self.c_branch),
            d_head: self.d_head.bind(g, trainable),
            c_head: self.c_head.as_ref().map(|l| l.bind(g, trainable)),
        }
    }

    fn hidden<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        layers: &[LinearVars],
        offset: usize,
        x: Var,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, h)?;
            h = g.relu(h);
            h = g.dropout(h, self.dropout[offset + i], rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Runs the trunk once and both heads on its activations. `rng = None`
    /// is evaluation mode (dropout off).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &BoundDiscClassifier,
        x: Var,
        mut rng: Option<&mut R>,
        want_logits: bool,
    ) -> Result<DiscOutput> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "discriminator input",
                lhs: xs,
                rhs: vec![self.input_dim],
            });
        }
        let shared = self.hidden(g, &bound.trunk, 0, x, &mut rng)?;
        let hd = self.hidden(g, &bound.d_branch, self.k_shared, shared, &mut rng)?;
        let score = bound.d_head.forward(g, hd)?;
        let logits = match (&bound.c_head, want_logits) {
            (Some(head), true) => {
                let hc = self.hidden(g, &bound.c_branch, self.k_shared, shared, &mut rng)?;
                Some(head.forward(g, hc)?)
            }
            _ => None,
        };
        Ok(DiscOutput { score, logits })
    }

    /// Critic-only forward (skips the classifier branch).
    pub fn critic<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &BoundDiscClassifier,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        Ok(self.forward(g, bound, x, rng, false)?.score)
    }

    /// Evaluation-mode raw critic scores, one per row.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.critic::<rand::rngs::ThreadRng>(&mut g, &bound, xv, None)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Evaluation-mode classifier posterior rows.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.classify_with::<rand::rngs::ThreadRng>(x, None)
    }

    pub fn classify_with<R: Rng + ?Sized>(&self, x: &Tensor, rng: Option<&mut R>) -> Result<Tensor> {
        if self.c_head.is_none() {
            return Err(Error::InvalidArgument("network has no classifier head".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, rng, true)?;
        let logits = out.logits.expect("classifier head present");
        let s = g.softmax(logits);
        Ok(g.value(s).clone())
    }
}

impl BoundNet for BoundDiscClassifier {
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.trunk.iter().chain(&self.d_branch).chain(&self.c_branch) {
            l.push_vars(&mut out);
        }
        self.d_head.push_vars(&mut out);
        if let Some(h) = &self.c_head {
            h.push_vars(&mut out);
        }
        out
    }
}

impl Parameters for DiscClassifierNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("disc.trunk", &self.trunk, &mut out);
        linear_params("disc.d_branch", &self.d_branch, &mut out);
        linear_params("disc.c_branch", &self.c_branch, &mut out);
        linear_params("disc.d_head", std::slice::from_ref(&self.d_head), &mut out);
        if let Some(h) = &self.c_head {
            linear_params("disc.c_head", std::slice::from_ref(h), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        linear_params_mut(&mut self.trunk, &mut out);
        linear_params_mut(&mut self.d_branch, &mut out);
        linear_params_mut(&mut self.c_branch, &mut out);
        linear_params_mut(std::slice::from_mut(&mut self.d_head), &mut out);
        if let Some(h) = &mut self.c_head {
            linear_params_mut(std::slice::from_mut(h), &mut out);
        }
        out
    }
}

/// Posterior generator `G_p(z_p, y_p)`, with `z_p` of dimension `c` and a
/// softmax on the output so every sample is a probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGenerator {
    pub num_classes: usize,
    pub mlp: Mlp,
}

impl PosteriorGenerator {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, width: usize, rng: &mut R) -> Self {
        Self {
            num_classes,
            mlp: Mlp::new(2 * num_classes, width, 3, num_classes, rng),
        }
    }

    pub fn z_dim(&self) -> usize {
        self.num_classes
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        self.mlp.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, z: Var, y: Var) -> Result<Var> {
        let input = g.concat(&[z, y], 1)?;
        let logits = bound.forward(g, input)?;
        Ok(g.softmax(logits))
    }

    pub fn generate(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y.clone());
        let s = self.forward(&mut g, &bound, zv, yv)?;
        Ok(g.value(s).clone())
    }
}

/// Posterior critic `D_p(s, y)`: after each hidden ReLU a learned projection
/// of `y` is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCritic {
    pub num_classes: usize,
    pub layers: Vec<Linear>,
    pub y_proj: Vec<Linear>,
    pub head: Linear,
}

pub struct BoundPosteriorCritic {
    layers: Vec<LinearVars>,
    y_proj: Vec<LinearVars>,
    head: LinearVars,
}

impl PosteriorCritic {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, width: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut y_proj = Vec::new();
        let mut fan_in = num_classes;
        for _ in 0..HIDDEN_LAYERS {
            layers.push(Linear::new(fan_in, width, rng));
            y_proj.push(Linear::new(num_classes, width, rng));
            fan_in = width;
        }
        Self {
            num_classes,
            layers,
            y_proj,
            head: Linear::new(width, 1, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPosteriorCritic {
        BoundPosteriorCritic {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            y_proj: self.y_proj.iter().map(|l| l.bind(g, trainable)).collect(),
            head: self.head.bind(g, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundPosteriorCritic, s: Var, y: Var) -> Result<Var> {
        let mut h = s;
        for (l, p) in bound.layers.iter().zip(&bound.y_proj) {
            h = l.forward(g, h)?;
            h = g.relu(h);
            let py = p.forward(g, y)?;
            h = g.add(h, py)?;
        }
        bound.head.forward(g, h)
    }

    pub fn score(&self, s: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let sv = g.constant(s.clone());
        let yv = g.constant(y.clone());
        let out = self.forward(&mut g, &bound, sv, yv)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl BoundNet for BoundPosteriorCritic {
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.push_vars(&mut out);
        }
        for l in &self.y_proj {
            l.push_vars(&mut out);
        }
        self.head.push_vars(&mut out);
        out
    }
}

impl Parameters for PosteriorGenerator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("pgan.generator", &self.mlp.layers, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

impl Parameters for PosteriorCritic {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_params("pgan.critic.layers", &self.layers, &mut out);
        linear_params("pgan.critic.y_proj", &self.y_proj, &mut out);
        linear_params("pgan.critic.head", std::slice::from_ref(&self.head), &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        linear_params_mut(&mut self.layers, &mut out);
        linear_params_mut(&mut self.y_proj, &mut out);
        linear_params_mut(std::slice::from_mut(&mut self.head), &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGanNets {
    pub generator: PosteriorGenerator,
    pub critic: PosteriorCritic,
}

impl PGanNets {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, width: usize, rng: &mut R) -> Self {
        Self {
            generator: PosteriorGenerator::new(num_classes, width, rng),
            critic: PosteriorCritic::new(num_classes, width, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.generator.num_classes
    }

    /// Draws `y_p ~ Cat(1/c)`, `z_p ~ N(0, I_c)` and returns `(G_p(z_p, y_p), y_p)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let c = self.num_classes();
        let (y, _) = crate::data::sample_categorical(n, c, rng);
        let z = crate::data::sample_noise(n, c, rng);
        Ok((self.generator.generate(&z, &y)?, y))
    }

    /// As [`PGanNets::sample`] with every label fixed to `class`.
    pub fn sample_class<R: Rng + ?Sized>(&self, n: usize, class: usize, rng: &mut R) -> Result<Tensor> {
        let c = self.num_classes();
        let mut y = Tensor::zeros(&[n, c]);
        for row in 0..n {
            y.data_mut()[row * c + class] = 1.0;
        }
        let z = crate::data::sample_noise(n, c, rng);
        self.generator.generate(&z, &y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn generator_is_deterministic_and_finite() {
        let mut r = rng();
        let net = GeneratorNet::new(2, 3, 16, 2, &mut r);
        let z = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]]).unwrap();
        let x = net.generate(&z, &c).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.row(0), x.row(1));
        assert!(x.all_finite());
    }

    #[test]
    fn generator_rejects_off_simplex_condition() {
        let net = GeneratorNet::new(2, 2, 8, 2, &mut rng());
        let z = Tensor::zeros(&[1, 2]);
        let c = Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(matches!(net.generate(&z, &c), Err(Error::NotSimplex { .. })));
    }

    #[test]
    fn classify_rows_sum_to_one_and_eval_is_deterministic() {
        let net = DiscClassifierNet::new(2, 3, 16, 3, [0.2, 0.5, 0.5], true, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-3.0, 1.0]]).unwrap();
        let a = net.classify(&x).unwrap();
        let b = net.classify(&x).unwrap();
        assert_eq!(a, b);
        for row in a.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut r = rng();
        let c = net.classify_with(&x, Some(&mut r)).unwrap();
        assert_ne!(a, c, "train-mode dropout should perturb the output");
    }

    #[test]
    fn shared_trunk_ties_heads() {
        let mut net = DiscClassifierNet::new(2, 2, 8, 3, [0.0; 3], true, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let (d0, c0) = (net.discriminate(&x).unwrap(), net.classify(&x).unwrap());
        net.trunk[0].bias.data_mut().iter_mut().for_each(|b| *b += 0.3);
        let (d1, c1) = (net.discriminate(&x).unwrap(), net.classify(&x).unwrap());
        assert_ne!(d0, d1);
        assert_ne!(c0, c1);
        // heads are independent
        net.d_head.bias.data_mut()[0] += 1.0;
        assert_eq!(net.classify(&x).unwrap(), c1);
    }

    #[test]
    fn k_shared_layout() {
        for k in 0..=3 {
            let net = DiscClassifierNet::new(2, 2, 8, k, [0.0; 3], true, &mut rng()).unwrap();
            assert_eq!(net.trunk.len(), k);
            assert_eq!(net.d_branch.len(), 3 - k);
            assert_eq!(net.c_branch.len(), 3 - k);
        }
        assert!(DiscClassifierNet::new(2, 2, 8, 4, [0.0; 3], true, &mut rng()).is_err());
        assert!(DiscClassifierNet::new(2, 2, 8, 1, [0.0, 1.0, 0.0], true, &mut rng()).is_err());
    }

    #[test]
    fn params_and_bound_vars_align() {
        let net = DiscClassifierNet::new(2, 3, 8, 1, [0.0; 3], true, &mut rng()).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let vars = bound.vars();
        let named = net.named_params();
        assert_eq!(vars.len(), named.len());
        for (v, (_, t)) in vars.iter().zip(&named) {
            assert_eq!(g.value(*v), *t);
        }
        let pc = PosteriorCritic::new(3, 8, &mut rng());
        let mut g = Graph::new();
        let b = pc.bind(&mut g, true);
        for (v, (_, t)) in b.vars().iter().zip(pc.named_params()) {
            assert_eq!(g.value(*v), t);
        }
    }

    #[test]
    fn pgan_samples_on_simplex() {
        let nets = PGanNets::new(3, 16, &mut rng());
        let (s, y) = nets.sample(50, &mut rng()).unwrap();
        check_simplex(&s, 1e-9).unwrap();
        check_simplex(&y, 0.0).unwrap();
        assert_eq!(nets.generator.z_dim(), 3);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("cp-gan".parse::<Variant>().unwrap(), Variant::CpGan);
        assert_eq!("AC-GAN".parse::<Variant>().unwrap(), Variant::AcGan);
        assert!("projection".parse::<Variant>().is_err());
    }
}
