//! Adversarial, gradient-penalty and classifier objectives, plus their
//! per-variant composition.
//!
//! Tape-level functions take and return [`Var`]s so that the composite can be
//! differentiated; the `*_value` functions evaluate the same formulas on
//! plain tensors for evaluation and testing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_simplex, Variant, SIMPLEX_TOL};
use crate::tensor::{Graph, Tensor, Var, LOG_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    #[default]
    Wgan,
    Nonsaturating,
}

fn require_rows(g: &Graph, v: Var, what: &'static str) -> Result<()> {
    if g.value(v).numel() == 0 {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Discriminator-side adversarial term from raw critic scores.
///
/// WGAN: `mean(d_fake) - mean(d_real)`. Nonsaturating:
/// `mean(softplus(-d_real)) + mean(softplus(d_fake))`, i.e. the negated
/// log-likelihood with `D = sigmoid(score)`.
pub fn adversarial_d(g: &mut Graph, d_real: Var, d_fake: Var, mode: AdversarialMode) -> Result<Var> {
    require_rows(g, d_real, "adversarial loss (real)")?;
    require_rows(g, d_fake, "adversarial loss (fake)")?;
    match mode {
        AdversarialMode::Wgan => {
            let mr = g.mean(d_real);
            let mf = g.mean(d_fake);
            g.sub(mf, mr)
        }
        AdversarialMode::Nonsaturating => {
            let nr = g.neg(d_real);
            let sr = g.softplus(nr);
            let lr = g.mean(sr);
            let sf = g.softplus(d_fake);
            let lf = g.mean(sf);
            g.add(lr, lf)
        }
    }
}

/// Generator-side adversarial term. WGAN: `-mean(d_fake)`; nonsaturating:
/// `mean(softplus(-d_fake))`.
pub fn adversarial_g(g: &mut Graph, d_fake: Var, mode: AdversarialMode) -> Result<Var> {
    require_rows(g, d_fake, "adversarial loss (fake)")?;
    Ok(match mode {
        AdversarialMode::Wgan => {
            let m = g.mean(d_fake);
            g.neg(m)
        }
        AdversarialMode::Nonsaturating => {
            let n = g.neg(d_fake);
            let s = g.softplus(n);
            g.mean(s)
        }
    })
}

/// Both adversarial parts from the same pair of score batches.
pub fn adversarial_loss(g: &mut Graph, d_real: Var, d_fake: Var, mode: AdversarialMode) -> Result<(Var, Var)> {
    Ok((adversarial_d(g, d_real, d_fake, mode)?, adversarial_g(g, d_fake, mode)?))
}

/// Loss pair for the posterior GAN; shares the adversarial implementation.
pub fn pgan_losses(g: &mut Graph, d_real: Var, d_fake: Var, mode: AdversarialMode) -> Result<(Var, Var)> {
    adversarial_loss(g, d_real, d_fake, mode)
}

/// Gradient penalty `mean((||grad critic(x_hat)|| - 1)^2)` on row-wise
/// interpolates `x_hat = eps * real + (1 - eps) * fake`, `eps ~ U(0, 1)`.
///
/// The critic may take several inputs (a sample and its condition). Every
/// input pair is interpolated with the same per-row `eps` and the norm is
/// taken over all inputs jointly. The returned node is differentiable with
/// respect to the critic weights.
pub fn gradient_penalty<R, F>(g: &mut Graph, real: &[&Tensor], fake: &[&Tensor], rng: &mut R, critic: F) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::InvalidArgument("gradient penalty needs matching real/fake inputs".into()));
    }
    let n = real[0].rows();
    if n == 0 {
        return Err(Error::EmptyBatch("gradient penalty"));
    }
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() || r.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "gradient penalty",
                lhs: r.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
    }
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let inputs: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            let cols = r.cols();
            let mut data = Vec::with_capacity(r.numel());
            for (i, (rr, fr)) in r.row_iter().zip(f.row_iter()).enumerate() {
                let e = eps[i];
                data.extend(rr.iter().zip(fr).map(|(a, b)| e * a + (1.0 - e) * b));
            }
            g.leaf(Tensor::new(vec![n, cols], data).expect("interpolate shape"))
        })
        .collect();
    penalty_at(g, &inputs, critic)
}

/// Penalty at fixed critic inputs (no interpolation).
pub fn penalty_at<F>(g: &mut Graph, inputs: &[Var], critic: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let scores = critic(g, inputs)?;
    let total = g.sum(scores);
    // rows are independent, so d(sum)/dx_i = d(score_i)/dx_i
    let grads = g.differentiate(total, inputs)?;
    let mut sq_norm: Option<Var> = None;
    for gr in grads {
        let sq = g.mul(gr, gr)?;
        let s = g.sum_axis(sq, 1)?;
        sq_norm = Some(match sq_norm {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let sq_norm = sq_norm.expect("at least one input");
    if !g.value(sq_norm).all_finite() {
        return Err(Error::NonFinite {
            what: "gradient-penalty gradient norm".into(),
            iteration: None,
        });
    }
    let norm = g.sqrt(sq_norm);
    let dev = g.affine(norm, 1.0, -1.0);
    let sq = g.mul(dev, dev)?;
    Ok(g.mean(sq))
}

fn check_one_hot(y: &Tensor) -> Result<()> {
    for (row, r) in y.row_iter().enumerate() {
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        let zeros = r.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != r.len() {
            return Err(Error::NotOneHot { row });
        }
    }
    Ok(())
}

fn check_log_simplex(g: &Graph, log_s: Var) -> Result<()> {
    let v = g.value(log_s);
    for (row, r) in v.row_iter().enumerate() {
        let sum: f64 = r.iter().map(|l| l.exp()).sum();
        if !((sum - 1.0).abs() <= SIMPLEX_TOL) {
            return Err(Error::NotSimplex { row, sum, min: 0.0 });
        }
    }
    Ok(())
}

/// `sum_k p_k log p_k` per batch, with `0 log 0 = 0`.
fn neg_entropy_sum(p: &Tensor) -> f64 {
    p.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.max(LOG_FLOOR).ln()).sum()
}

/// `mean_rows(sum_k target_k (log target_k - log_s_k))` with `target` held
/// constant. `neg_entropy` is the precomputed `sum target log target`.
fn cross_kl(g: &mut Graph, log_s: Var, target: &Tensor, neg_entropy: f64) -> Result<Var> {
    let n = target.rows();
    if n == 0 {
        return Err(Error::EmptyBatch("classifier loss"));
    }
    if g.shape(log_s) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "classifier loss",
            lhs: g.shape(log_s).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let weighted = g.mul_const(log_s, target)?;
    let cross = g.sum(weighted);
    let inv = 1.0 / n as f64;
    Ok(g.affine(cross, -inv, neg_entropy * inv))
}

/// KL-AC term `mean(-y . log s)` for one-hot labels `y`; `log_s` holds
/// classifier log-probabilities (e.g. from `log_softmax`).
pub fn kl_ac_loss(g: &mut Graph, log_s: Var, y: &Tensor) -> Result<Var> {
    check_one_hot(y)?;
    check_log_simplex(g, log_s)?;
    cross_kl(g, log_s, y, 0.0)
}

/// KL-CP term `mean(KL(s_r || s_g))` with `s_r` a constant target.
pub fn kl_cp_loss(g: &mut Graph, s_r: &Tensor, log_s_g: Var) -> Result<Var> {
    check_simplex(s_r, SIMPLEX_TOL)?;
    check_log_simplex(g, log_s_g)?;
    cross_kl(g, log_s_g, s_r, neg_entropy_sum(s_r))
}

/// Row-mean `KL(p || q)` on plain tensors, `0 log 0 = 0`, logs clamped at
/// `exp(-30)`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_simplex(p, SIMPLEX_TOL)?;
    check_simplex(q, SIMPLEX_TOL)?;
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    if p.rows() == 0 {
        return Err(Error::EmptyBatch("kl_divergence"));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

/// Evaluates [`kl_ac_loss`] on a posterior batch `s`.
pub fn kl_ac_loss_value(s: &Tensor, y: &Tensor) -> Result<f64> {
    check_simplex(s, SIMPLEX_TOL)?;
    let mut g = Graph::new();
    let log_s = g.constant(s.clone());
    let log_s = g.log(log_s);
    check_one_hot(y)?;
    let l = cross_kl(&mut g, log_s, y, 0.0)?;
    Ok(g.value(l).data()[0])
}

/// Evaluates [`kl_cp_loss`] on posterior batches.
pub fn kl_cp_loss_value(s_r: &Tensor, s_g: &Tensor) -> Result<f64> {
    check_simplex(s_r, SIMPLEX_TOL)?;
    check_simplex(s_g, SIMPLEX_TOL)?;
    let mut g = Graph::new();
    let log_s = g.constant(s_g.clone());
    let log_s = g.log(log_s);
    let l = cross_kl(&mut g, log_s, s_r, neg_entropy_sum(s_r))?;
    Ok(g.value(l).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_g: 1.0,
            lambda_gp: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_g", self.lambda_g),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn weighted(g: &mut Graph, base: Var, term: Option<Var>, weight: f64) -> Result<Var> {
    match term {
        Some(t) if weight != 0.0 => {
            let w = g.scale(t, weight);
            g.add(base, w)
        }
        _ => Ok(base),
    }
}

/// Discriminator/classifier composite `gan_d + lambda_r * ac_r + lambda_gp * gp`.
pub fn compose_d(
    g: &mut Graph,
    variant: Variant,
    gan_d: Var,
    ac_r: Option<Var>,
    gp: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    if !variant.has_classifier() && ac_r.is_some() {
        return Err(Error::InvalidArgument(format!("{variant} has no classifier term")));
    }
    let l = weighted(g, gan_d, ac_r, w.lambda_r)?;
    weighted(g, l, gp, w.lambda_gp)
}

/// Generator composite `gan_g + lambda_g * cls_g`, where `cls_g` is KL-AC on
/// generated data (AC-GAN) or KL-CP (CP-GAN).
pub fn compose_g(g: &mut Graph, variant: Variant, gan_g: Var, cls_g: Option<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    if !variant.has_classifier() && cls_g.is_some() {
        return Err(Error::InvalidArgument(format!("{variant} has no classifier term")));
    }
    weighted(g, gan_g, cls_g, w.lambda_g)
}

/// Scalar values of every loss term for one iteration, as logged to the
/// metrics CSV. Terms that do not apply are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub gan_d: f64,
    pub gan_g: f64,
    pub ac_r: f64,
    pub cls_g: f64,
    pub gp: f64,
    pub composite_d: f64,
    pub composite_g: f64,
}

impl LossTerms {
    pub const CSV_HEADER: &'static str = "gan_d,gan_g,ac_r,cls_g,gp,composite_d,composite_g";

    pub fn csv_fields(&self) -> [f64; 7] {
        [
            self.gan_d,
            self.gan_g,
            self.ac_r,
            self.cls_g,
            self.gp,
            self.composite_d,
            self.composite_g,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.csv_fields().iter().all(|v| v.is_finite())
    }

    /// Composite values implied by the individual terms.
    pub fn recompose(&self, w: &LossWeights, cls_active: bool) -> (f64, f64) {
        let d = self.gan_d + w.lambda_r * self.ac_r + w.lambda_gp * self.gp;
        let g = self.gan_g + if cls_active { w.lambda_g * self.cls_g } else { 0.0 };
        (d, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn wgan_values() {
        let mut g = Graph::new();
        let r = g.constant(t(&[vec![1.0], vec![1.0]]));
        let f = g.constant(t(&[vec![0.0], vec![0.0]]));
        let (ld, lg) = adversarial_loss(&mut g, r, f, AdversarialMode::Wgan).unwrap();
        assert_eq!(scalar(&g, ld), -1.0);
        assert_eq!(scalar(&g, lg), 0.0);
        let (ld, _) = adversarial_loss(&mut g, r, r, AdversarialMode::Wgan).unwrap();
        assert_eq!(scalar(&g, ld), 0.0);
    }

    #[test]
    fn nonsaturating_at_uninformative_critic() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4, 1]));
        let (ld, lg) = adversarial_loss(&mut g, z, z, AdversarialMode::Nonsaturating).unwrap();
        assert!((scalar(&g, ld) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((scalar(&g, lg) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 1]));
        let z = g.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(
            adversarial_loss(&mut g, e, z, AdversarialMode::Wgan),
            Err(Error::EmptyBatch(_))
        ));
    }

    fn linear_critic(w: Vec<f64>) -> impl FnOnce(&mut Graph, &[Var]) -> Result<Var> {
        move |g, xs| {
            let d = w.len();
            let wv = g.constant(Tensor::new(vec![d, 1], w).unwrap());
            g.matmul(xs[0], wv)
        }
    }

    fn gp_of(w: Vec<f64>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = t(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 3.0]]);
        let fake = t(&[vec![-1.0, 0.5], vec![2.0, 2.0], vec![0.0, 0.0]]);
        let mut g = Graph::new();
        let p = gradient_penalty(&mut g, &[&real], &[&fake], &mut rng, linear_critic(w)).unwrap();
        scalar(&g, p)
    }

    #[test]
    fn gradient_penalty_closed_forms() {
        let s = 0.5f64.sqrt();
        assert!(gp_of(vec![s, s]).abs() < 1e-15);
        assert!((gp_of(vec![0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((gp_of(vec![2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((gp_of(vec![3.0, 0.0]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kl_ac_closed_forms() {
        let y = t(&[vec![1.0, 0.0]]);
        assert!((kl_ac_loss_value(&t(&[vec![0.5, 0.5]]), &y).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_ac_loss_value(&y, &y).unwrap(), 0.0);
        assert!(matches!(
            kl_ac_loss_value(&t(&[vec![0.5, 0.5]]), &t(&[vec![0.5, 0.5]])),
            Err(Error::NotOneHot { row: 0 })
        ));
        assert!(kl_ac_loss_value(&t(&[vec![0.6, 0.6]]), &y).is_err());
    }

    #[test]
    fn kl_cp_closed_form() {
        let v = kl_cp_loss_value(&t(&[vec![0.5, 0.5]]), &t(&[vec![0.9, 0.1]])).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.5108256237659907).abs() < 1e-12);
        let p = t(&[vec![0.2, 0.3, 0.5]]);
        assert!(kl_cp_loss_value(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_cp_on_one_hot_equals_kl_ac() {
        let y = t(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let s = t(&[vec![0.2, 0.3, 0.5], vec![0.7, 0.1, 0.2]]);
        assert_eq!(kl_cp_loss_value(&y, &s).unwrap(), kl_ac_loss_value(&s, &y).unwrap());
    }

    #[test]
    fn kl_cp_stops_gradient_into_target() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[vec![0.3, -0.2]]));
        let log_s = g.log_softmax(logits);
        let s_r = t(&[vec![0.25, 0.75]]);
        let l = kl_cp_loss(&mut g, &s_r, log_s).unwrap();
        g.backward(l).unwrap();
        // d/dlogits KL(p || softmax(z)) = softmax(z) - p
        let mut sm = vec![0.3, -0.2];
        crate::tensor::softmax_in_place(&mut sm);
        let grad = g.grad(logits).unwrap();
        for k in 0..2 {
            assert!((grad[k] - (sm[k] - s_r.data()[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_g: -0.1,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert!(compose_g(&mut g, Variant::CpGan, z, None, &w).is_err());
    }

    #[test]
    fn compose_defaults_arithmetic() {
        let mut g = Graph::new();
        let gan_d = g.constant(Tensor::scalar(-0.4));
        let ac = g.constant(Tensor::scalar(0.3));
        let gp = g.constant(Tensor::scalar(2.0));
        let w = LossWeights::default();
        let d = compose_d(&mut g, Variant::AcGan, gan_d, Some(ac), Some(gp), &w).unwrap();
        assert!((scalar(&g, d) - (-0.4 + 0.3 + 0.1 * 2.0)).abs() < 1e-15);
        let zero = LossWeights {
            lambda_r: 0.0,
            lambda_g: 0.0,
            lambda_gp: 0.0,
        };
        let d = compose_d(&mut g, Variant::AcGan, gan_d, Some(ac), Some(gp), &zero).unwrap();
        assert_eq!(scalar(&g, d), -0.4);
        assert!(compose_d(&mut g, Variant::CganConcat, gan_d, Some(ac), None, &w).is_err());
    }
}
