//! Likelihoods, priors, bounds and the free-bits objective.
//!
//! Every quantity has a plain `f64` form and, where training needs it, a
//! tape form (`*_graph`) that returns one value per batch row.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flows::PosteriorSample;
use crate::tape::{sigmoid, softplus, Tape, Var};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Width of one intensity bin of an 8-bit pixel scaled to `[0, 1]`.
pub const BIN_WIDTH: f64 = 1.0 / 256.0;
/// Floor on a bin's probability mass before taking the log.
pub const MASS_FLOOR: f64 = 1e-12;

/// Observation model `p(x|z)` given the decoder output.
#[derive(Clone, Debug, PartialEq)]
pub enum LikelihoodModel {
    /// Decoder output is a logit per pixel.
    Bernoulli,
    /// Decoder output is a location per pixel; one shared log-scale.
    DiscretizedLogistic { log_scale: f64 },
    /// Decoder output is a mean; fixed isotropic noise.
    Gaussian { sigma: f64 },
}

impl LikelihoodModel {
    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodModel::Bernoulli => "bernoulli",
            LikelihoodModel::DiscretizedLogistic { .. } => "discretized_logistic",
            LikelihoodModel::Gaussian { .. } => "gaussian",
        }
    }

    /// `log p(x|z)` for one observation given the decoder output.
    pub fn log_prob(&self, x: &Tensor, out: &Tensor) -> Result<f64> {
        match *self {
            LikelihoodModel::Bernoulli => bernoulli_loglik(x, out),
            LikelihoodModel::DiscretizedLogistic { log_scale } => {
                discretized_logistic_loglik(x, out, log_scale)
            }
            LikelihoodModel::Gaussian { sigma } => gaussian_loglik(x, out, sigma),
        }
    }

    /// Row-wise `log p(x|z)` on the tape. `log_scale` must be supplied for the
    /// discretized logistic so it can be trained.
    pub fn log_prob_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        out: Var,
        log_scale: Option<Var>,
    ) -> Result<Var> {
        match *self {
            LikelihoodModel::Bernoulli => bernoulli_loglik_graph(tape, x, out),
            LikelihoodModel::DiscretizedLogistic { log_scale: fixed } => {
                let ls = match log_scale {
                    Some(v) => v,
                    None => tape.scalar_const(fixed),
                };
                discretized_logistic_graph(tape, x, out, ls)
            }
            LikelihoodModel::Gaussian { sigma } => gaussian_loglik_graph(tape, x, out, sigma),
        }
    }
}

fn same_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `Σ x·log σ(ℓ) + (1−x)·log(1−σ(ℓ))`, evaluated as `Σ x·ℓ − softplus(ℓ)`.
pub fn bernoulli_loglik(x: &Tensor, logits: &Tensor) -> Result<f64> {
    same_len("bernoulli_loglik", x, logits)?;
    Ok(x.data()
        .iter()
        .zip(logits.data())
        .map(|(&x, &l)| x * l - softplus(l))
        .sum())
}

fn logistic_bin_log_mass(x: f64, mu: f64, inv_s: f64) -> f64 {
    let upper = sigmoid((x + BIN_WIDTH - mu) * inv_s);
    let lower = sigmoid((x - mu) * inv_s);
    (upper - lower).max(MASS_FLOOR).ln()
}

/// Log-mass of the 1/256-wide bin starting at each `x` under a logistic with
/// location `mu` and scale `exp(log_s)`.
pub fn discretized_logistic_loglik(x: &Tensor, mu: &Tensor, log_s: f64) -> Result<f64> {
    same_len("discretized_logistic_loglik", x, mu)?;
    let inv_s = (-log_s).exp();
    if !inv_s.is_finite() || inv_s == 0.0 {
        return Err(Error::domain(
            "discretized_logistic_loglik",
            format!("log-scale {log_s} out of range"),
        ));
    }
    Ok(x.data()
        .iter()
        .zip(mu.data())
        .map(|(&x, &m)| logistic_bin_log_mass(x, m, inv_s))
        .sum())
}

/// Isotropic Gaussian log-density `log N(x; mean, σ²I)`.
pub fn gaussian_loglik(x: &Tensor, mean: &Tensor, sigma: f64) -> Result<f64> {
    same_len("gaussian_loglik", x, mean)?;
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "gaussian_loglik",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let ls = sigma.ln();
    Ok(x.data()
        .iter()
        .zip(mean.data())
        .map(|(&x, &m)| -0.5 * ((x - m) / sigma).powi(2) - ls - HALF_LN_2PI)
        .sum())
}

/// `log N(z; 0, I)`.
pub fn std_normal_logpdf(z: &Tensor) -> f64 {
    z.data().iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum()
}

/// Closed-form `KL(N(µ, diag σ²) ‖ N(0, I))`.
pub fn kl_diag_gaussian(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    same_len("kl_diag_gaussian", mu, sigma)?;
    let mut kl = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        if !(s > 0.0) {
            return Err(Error::domain(
                "kl_diag_gaussian",
                format!("sigma must be positive, got {s}"),
            ));
        }
        kl += 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
    }
    Ok(kl)
}

/// Free-bits settings: a floor of `lambda` nats applied to each group's KL.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeBitsConfig {
    pub lambda: f64,
    groups: Vec<Vec<usize>>,
    dim: usize,
}

impl FreeBitsConfig {
    /// Validates that `groups` partition `0..dim`.
    pub fn new(lambda: f64, groups: Vec<Vec<usize>>, dim: usize) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Contract(format!(
                "free-bits lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let mut seen = vec![false; dim];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Contract("free-bits group is empty".into()));
            }
            for &i in g {
                if i >= dim || seen[i] {
                    return Err(Error::Contract(format!(
                        "free-bits groups must partition 0..{dim}; index {i} is out of range or repeated"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!(
                "free-bits groups do not cover latent index {missing}"
            )));
        }
        Ok(FreeBitsConfig {
            lambda,
            groups,
            dim,
        })
    }

    /// One group per latent dimension.
    pub fn per_dimension(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(lambda, (0..dim).map(|i| vec![i]).collect(), dim)
    }

    /// `k` contiguous groups of near-equal size.
    pub fn contiguous(lambda: f64, dim: usize, k: usize) -> Result<Self> {
        if k == 0 || k > dim {
            return Err(Error::Contract(format!(
                "cannot split {dim} latent dimensions into {k} groups"
            )));
        }
        let groups = (0..k)
            .map(|g| (g * dim / k..(g + 1) * dim / k).collect())
            .collect();
        Self::new(lambda, groups, dim)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sums per-dimension values into per-group values.
    pub fn group_sums(&self, per_dim: &[f64]) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&i| per_dim[i]).sum())
            .collect()
    }

    /// `[D, K]` indicator matrix mapping dimensions to groups.
    pub fn membership(&self) -> Tensor {
        let k = self.groups.len();
        let mut m = Tensor::zeros(&[self.dim, k]);
        for (j, g) in self.groups.iter().enumerate() {
            for &i in g {
                m.data_mut()[i * k + j] = 1.0;
            }
        }
        m
    }
}

/// `recon − Σ_j max(λ, kl_j)`. `λ = 0` disables the floor entirely, so
/// negative Monte-Carlo KL estimates pass through unclamped.
pub fn free_bits_objective(recon: f64, group_kls: &[f64], cfg: &FreeBitsConfig) -> Result<f64> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "free-bits lambda must be >= 0, got {}",
            cfg.lambda
        )));
    }
    if group_kls.len() != cfg.groups.len() {
        return Err(Error::shape(
            "free_bits_objective",
            &[group_kls.len()],
            &[cfg.groups.len()],
        ));
    }
    let floor = |kl: f64| {
        if cfg.lambda > 0.0 {
            kl.max(cfg.lambda)
        } else {
            kl
        }
    };
    Ok(recon - group_kls.iter().map(|&kl| floor(kl)).sum::<f64>())
}

/// Single-sample bound terms for one datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub recon: f64,
    pub log_prior: f64,
    pub log_q: f64,
    pub elbo: f64,
    pub group_kls: Vec<f64>,
}

impl ObjectiveTerms {
    pub fn new(recon: f64, log_prior: f64, log_q: f64, group_kls: Vec<f64>) -> Self {
        ObjectiveTerms {
            recon,
            log_prior,
            log_q,
            elbo: recon + log_prior - log_q,
            group_kls,
        }
    }

    /// Averages several estimates term by term.
    pub fn mean(terms: &[ObjectiveTerms]) -> Result<Self> {
        let n = terms.len();
        if n == 0 {
            return Err(Error::Contract("mean of zero objective estimates".into()));
        }
        let k = terms[0].group_kls.len();
        let avg = |f: &dyn Fn(&ObjectiveTerms) -> f64| terms.iter().map(f).sum::<f64>() / n as f64;
        let group_kls = (0..k).map(|j| avg(&|t| t.group_kls[j])).collect();
        Ok(ObjectiveTerms {
            recon: avg(&|t| t.recon),
            log_prior: avg(&|t| t.log_prior),
            log_q: avg(&|t| t.log_q),
            elbo: avg(&|t| t.elbo),
            group_kls,
        })
    }
}

/// Bound terms for one posterior sample. `decode` maps `z` to the decoder
/// output consumed by `lik`. The whole latent vector is reported as a single
/// KL group; per-dimension groups come from the model's batched path.
pub fn elbo_estimate<F>(
    x: &Tensor,
    sample: &PosteriorSample,
    lik: &LikelihoodModel,
    mut decode: F,
) -> Result<ObjectiveTerms>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let out = decode(&sample.z)?;
    let recon = lik.log_prob(x, &out)?;
    let log_prior = std_normal_logpdf(&sample.z);
    Ok(ObjectiveTerms::new(
        recon,
        log_prior,
        sample.log_q,
        vec![sample.log_q - log_prior],
    ))
}

/// `log (1/S) Σ exp(w_s)` for log importance weights `w_s = log p(x, z_s) − log q(z_s|x)`.
pub fn iwae_logp(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::Contract(
            "importance-sampled estimate needs S >= 1".into(),
        ));
    }
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(max);
    }
    let s: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    Ok(max + (s / log_weights.len() as f64).ln())
}

/// Row-wise `Σ x·ℓ − softplus(ℓ)`.
pub fn bernoulli_loglik_graph(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
    let xl = tape.mul(x, logits)?;
    let sp = tape.softplus(logits)?;
    let t = tape.sub(xl, sp)?;
    tape.sum_axis(t, 1)
}

/// Row-wise discretized logistic log-mass with a learnable scalar log-scale.
pub fn discretized_logistic_graph(tape: &mut Tape, x: Var, mu: Var, log_s: Var) -> Result<Var> {
    let neg_ls = tape.neg(log_s)?;
    let inv_s = tape.exp(neg_ls)?;
    let centred = tape.sub(x, mu)?;
    let lo = tape.mul(centred, inv_s)?;
    let shifted = tape.add_scalar(centred, BIN_WIDTH)?;
    let hi = tape.mul(shifted, inv_s)?;
    let cdf_hi = tape.sigmoid(hi)?;
    let cdf_lo = tape.sigmoid(lo)?;
    let mass = tape.sub(cdf_hi, cdf_lo)?;
    let mass = tape.clamp_min(mass, MASS_FLOOR)?;
    let lm = tape.log(mass)?;
    tape.sum_axis(lm, 1)
}

/// Row-wise isotropic Gaussian log-density with fixed `sigma`.
pub fn gaussian_loglik_graph(tape: &mut Tape, x: Var, mean: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "gaussian_loglik",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let (_, d) = tape.value(x).dims2()?;
    let diff = tape.sub(x, mean)?;
    let sq = tape.square(diff)?;
    let s = tape.sum_axis(sq, 1)?;
    let s = tape.scale(s, -0.5 / (sigma * sigma))?;
    tape.add_scalar(s, -(d as f64) * (sigma.ln() + HALF_LN_2PI))
}

/// Per-dimension `log N(z_i; 0, 1)`, same shape as `z`.
pub fn std_normal_logpdf_graph(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let t = tape.scale(sq, -0.5)?;
    tape.add_scalar(t, -HALF_LN_2PI)
}

/// Minibatch-mean KL per group from per-dimension `log q − log p` of shape
/// `[batch, D]`; returns a `[1, K]` row.
pub fn group_kl_graph(tape: &mut Tape, kl_dims: Var, cfg: &FreeBitsConfig) -> Result<Var> {
    let (_, d) = tape.value(kl_dims).dims2()?;
    if d != cfg.dim {
        return Err(Error::shape("group_kl", &[d], &[cfg.dim]));
    }
    let mean = tape.mean_axis(kl_dims, 0)?;
    let row = tape.reshape(mean, &[1, d])?;
    let m = tape.constant(cfg.membership());
    tape.affine(row, m, None, None)
}

/// `Σ_j max(λ, kl_j)` for a `[1, K]` row of group KLs; `λ = 0` sums unclamped.
pub fn free_bits_penalty_graph(tape: &mut Tape, group_kls: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "free-bits lambda must be >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return tape.sum(group_kls);
    }
    let clamped = tape.clamp_min(group_kls, lambda)?;
    tape.sum(clamped)
}

/// CDF of a logistic with location `mu` and scale `s`.
pub fn logistic_cdf(x: f64, mu: f64, s: f64) -> f64 {
    sigmoid((x - mu) / s)
}

/// Marginal of the linear-Gaussian model `z ~ N(0,1)`, `x|z ~ N(a·z, σ²)`.
pub fn conjugate_1d_log_marginal(x: f64, a: f64, sigma: f64) -> f64 {
    let var = a * a + sigma * sigma;
    -0.5 * x * x / var - 0.5 * (2.0 * PI * var).ln()
}
