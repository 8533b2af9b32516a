//! Normalizing-flow steps with exact log-density accounting.
//!
//! A posterior sample starts from the diagonal Gaussian
//! `z₀ = µ₀ + σ₀ ⊙ ε` with
//! `log q₀ = −Σ (log σ₀ + ½ε² + ½ log 2π)` and then runs through a list of
//! [`FlowStep`]s, each subtracting its `log|det ∂z_t/∂z_{t−1}|`. The
//! running log-density is tracked per dimension so objectives can attribute
//! it to latent groups; a permutation moves those per-dimension terms along
//! with the coordinates.
//!
//! Noise `ε` is always supplied by the caller.

mod autoregressive;
mod iaf;
mod linear;
mod planar;

use crate::error::{Error, Result};
use crate::made::MadeConfig;
use crate::params::ParamStore;
use crate::rng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use autoregressive::{
    autoregressive_sample, sigma_head_bias, whiten, AutoregressiveSampleResult,
};
pub use iaf::{IafMode, IafStep};
pub use linear::{strict_lower_pairs, unit_lower_apply, unit_lower_solve, LinearIaf};
pub use planar::Planar;

/// Lower bound added to `softplus(s)` wherever a scale must stay positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Reordering of coordinates: `out[k] = in[order[k]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || seen[o] {
                return Err(Error::Contract(format!("{order:?} is not a permutation")));
            }
            seen[o] = true;
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn inverse_order(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (k, &o) in self.order.iter().enumerate() {
            inv[o] = k;
        }
        inv
    }

    /// Applies the reordering to a vector; the log-density change is exactly 0.
    pub fn apply(&self, z: &Tensor) -> Result<(Tensor, f64)> {
        if z.len() != self.dim() {
            return Err(Error::shape("permutation", z.shape(), &[self.dim()]));
        }
        let out = self.order.iter().map(|&o| z.data()[o]).collect();
        Ok((Tensor::vector(out), 0.0))
    }
}

/// Order reversal `(D−1, …, 0)`.
pub fn reverse_perm(dim: usize) -> Permutation {
    Permutation {
        order: (0..dim).rev().collect(),
    }
}

#[derive(Clone, Debug)]
pub enum FlowStep {
    Iaf(IafStep),
    Permutation(Permutation),
    Planar(Planar),
    LinearIaf(LinearIaf),
}

impl FlowStep {
    pub fn dim(&self) -> usize {
        match self {
            FlowStep::Iaf(s) => s.dim(),
            FlowStep::Permutation(p) => p.dim(),
            FlowStep::Planar(p) => p.dim(),
            FlowStep::LinearIaf(l) => l.dim(),
        }
    }

    pub fn is_volume_preserving(&self) -> bool {
        match self {
            FlowStep::Permutation(_) | FlowStep::LinearIaf(_) => true,
            FlowStep::Iaf(s) => s.mode == IafMode::LocationOnly,
            FlowStep::Planar(_) => false,
        }
    }

    /// Applies the step to `z: [batch, D]` and updates the per-dimension
    /// log-density `log_q: [batch, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        h: Option<Var>,
        log_q: Var,
    ) -> Result<(Var, Var)> {
        match self {
            FlowStep::Iaf(step) => {
                let (z_new, delta) = step.forward(tape, store, z, h)?;
                let log_q = match delta {
                    Some(d) => tape.add(log_q, d)?,
                    None => log_q,
                };
                Ok((z_new, log_q))
            }
            FlowStep::Permutation(p) => Ok((
                tape.select_cols(z, p.order())?,
                tape.select_cols(log_q, p.order())?,
            )),
            FlowStep::Planar(p) => {
                let (z_new, delta) = p.forward(tape, store, z)?;
                // not separable across dimensions; spread evenly
                let d = p.dim();
                let spread = tape.constant(Tensor::full(&[1, d], 1.0 / d as f64));
                let per_dim = tape.affine(delta, spread, None, None)?;
                Ok((z_new, tape.add(log_q, per_dim)?))
            }
            FlowStep::LinearIaf(l) => Ok((l.forward(tape, store, z)?, log_q)),
        }
    }

    /// Plain batched application; returns the new points and the per-row
    /// log-density change.
    pub fn apply(
        &self,
        store: &ParamStore,
        z: &Tensor,
        h: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        let (rows, d) = z.dims2()?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let hv = h.map(|h| tape.constant(h.clone()));
        let lq = tape.constant(Tensor::zeros(&[rows, d]));
        let (z_new, lq_new) = self.forward(&mut tape, store, zv, hv, lq)?;
        let delta = tape.sum_axis(lq_new, 1)?;
        Ok((tape.value(z_new).clone(), tape.value(delta).data().to_vec()))
    }

    /// Maps points back through the step.
    pub fn inverse(&self, store: &ParamStore, z: &Tensor, h: Option<&Tensor>) -> Result<Tensor> {
        match self {
            FlowStep::Iaf(step) => step.inverse(store, z, h),
            FlowStep::Permutation(p) => {
                let inv = p.inverse_order();
                let (rows, d) = z.dims2()?;
                let mut data = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    let row = z.row(r);
                    data.extend(inv.iter().map(|&k| row[k]));
                }
                Tensor::from_rows(rows, d, data)
            }
            FlowStep::Planar(p) => p.inverse(store, z),
            FlowStep::LinearIaf(l) => l.inverse(store, z),
        }
    }
}

/// Parameters of the initial diagonal Gaussian and the shared context `h`.
#[derive(Clone, Debug)]
pub struct BaseGaussianParams {
    pub mu0: Tensor,
    pub sigma0: Tensor,
    pub h: Tensor,
}

impl BaseGaussianParams {
    pub fn new(mu0: Tensor, sigma0: Tensor, h: Tensor) -> Result<Self> {
        if mu0.shape() != sigma0.shape() || mu0.rank() != 1 {
            return Err(Error::shape("base gaussian", mu0.shape(), sigma0.shape()));
        }
        if let Some(bad) = sigma0.data().iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::domain(
                "base_sample",
                format!("sigma0 must be positive, got {bad}"),
            ));
        }
        Ok(Self { mu0, sigma0, h })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu0: Tensor::zeros(&[dim]),
            sigma0: Tensor::ones(&[dim]),
            h: Tensor::zeros(&[0]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

/// Result of running a posterior chain on one noise vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub z: Tensor,
    pub eps: Tensor,
    pub log_q: f64,
}

/// Initial sample on the tape: returns `z₀` and per-dimension `log q₀`.
pub fn base_sample_graph(tape: &mut Tape, mu0: Var, sigma0: Var, eps: Var) -> Result<(Var, Var)> {
    let scaled = tape.mul(sigma0, eps)?;
    let z0 = tape.add(mu0, scaled)?;
    let log_sigma = tape.log(sigma0)?;
    let e2 = tape.square(eps)?;
    let half_e2 = tape.scale(e2, 0.5)?;
    let t = tape.add(log_sigma, half_e2)?;
    let t = tape.add_scalar(t, HALF_LN_2PI)?;
    let log_q = tape.neg(t)?;
    Ok((z0, log_q))
}

/// Differentiable chain: base sample followed by every step.
/// Returns the final iterate and the per-dimension log-density, both `[batch, D]`.
pub fn flow_sample_graph(
    tape: &mut Tape,
    store: &ParamStore,
    steps: &[FlowStep],
    mu0: Var,
    sigma0: Var,
    h: Option<Var>,
    eps: Var,
) -> Result<(Var, Var)> {
    let (mut z, mut log_q) = base_sample_graph(tape, mu0, sigma0, eps)?;
    for step in steps {
        (z, log_q) = step.forward(tape, store, z, h, log_q)?;
    }
    Ok((z, log_q))
}

/// `z₀ = µ₀ + σ₀ ⊙ ε` and its log-density.
pub fn base_sample(params: &BaseGaussianParams, eps: &Tensor) -> Result<(Tensor, f64)> {
    let d = params.dim();
    if eps.len() != d {
        return Err(Error::shape("base_sample", eps.shape(), &[d]));
    }
    if let Some(bad) = params.sigma0.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::domain(
            "base_sample",
            format!("sigma0 must be positive, got {bad}"),
        ));
    }
    let mut z = Vec::with_capacity(d);
    let mut log_q = 0.0;
    for i in 0..d {
        let (m, s, e) = (params.mu0.data()[i], params.sigma0.data()[i], eps.data()[i]);
        z.push(m + s * e);
        log_q -= s.ln() + 0.5 * e * e + HALF_LN_2PI;
    }
    Ok((Tensor::vector(z), log_q))
}

fn check_chain(dim: usize, steps: &[FlowStep]) -> Result<()> {
    for (t, s) in steps.iter().enumerate() {
        if s.dim() != dim {
            return Err(Error::Contract(format!(
                "flow step {t} has dimension {} but the base has {dim}",
                s.dim()
            )));
        }
    }
    Ok(())
}

fn context_rows(h: &Tensor, rows: usize) -> Option<Tensor> {
    (!h.is_empty()).then(|| h.tile_rows(rows))
}

/// Runs the base Gaussian and every step on one noise vector.
pub fn flow_posterior_sample(
    store: &ParamStore,
    base: &BaseGaussianParams,
    steps: &[FlowStep],
    eps: &Tensor,
) -> Result<PosteriorSample> {
    let d = base.dim();
    if eps.len() != d {
        return Err(Error::shape("flow_posterior_sample", eps.shape(), &[d]));
    }
    let (z, log_q) = flow_log_q_rows(store, base, steps, &eps.reshape(vec![1, d])?)?;
    Ok(PosteriorSample {
        z: z.reshape(vec![d])?,
        eps: eps.clone(),
        log_q: log_q[0],
    })
}

/// Batched chain evaluation for rows of noise `eps: [n, D]`.
pub fn flow_log_q_rows(
    store: &ParamStore,
    base: &BaseGaussianParams,
    steps: &[FlowStep],
    eps: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let d = base.dim();
    check_chain(d, steps)?;
    BaseGaussianParams::new(base.mu0.clone(), base.sigma0.clone(), base.h.clone())?;
    let (rows, _) = eps.dims2()?;
    let mut tape = Tape::new();
    let mu = tape.constant(base.mu0.clone());
    let sigma = tape.constant(base.sigma0.clone());
    let e = tape.constant(eps.clone());
    let h = context_rows(&base.h, rows).map(|h| tape.constant(h));
    let (z, log_q) = flow_sample_graph(&mut tape, store, steps, mu, sigma, h, e)?;
    let total = tape.sum_axis(log_q, 1)?;
    Ok((tape.value(z).clone(), tape.value(total).data().to_vec()))
}

/// Recovers the base noise `ε` that the chain maps to each row of `z`.
pub fn invert_chain(
    store: &ParamStore,
    base: &BaseGaussianParams,
    steps: &[FlowStep],
    z: &Tensor,
) -> Result<Tensor> {
    check_chain(base.dim(), steps)?;
    let (rows, d) = z.dims2()?;
    let h = context_rows(&base.h, rows);
    let mut x = z.clone();
    for step in steps.iter().rev() {
        x = step.inverse(store, &x, h.as_ref())?;
    }
    for r in 0..rows {
        for i in 0..d {
            let v = &mut x.data_mut()[r * d + i];
            *v = (*v - base.mu0.data()[i]) / base.sigma0.data()[i];
        }
    }
    Ok(x)
}

/// `log q(z)` of the flow posterior at arbitrary points `z: [n, D]`, by
/// inverting the chain and re-running it forward.
pub fn flow_log_density(
    store: &ParamStore,
    base: &BaseGaussianParams,
    steps: &[FlowStep],
    z: &Tensor,
) -> Result<Vec<f64>> {
    let eps = invert_chain(store, base, steps, z)?;
    Ok(flow_log_q_rows(store, base, steps, &eps)?.1)
}

/// Single gated/affine/location-only IAF step on one vector.
pub fn iaf_step(
    step: &IafStep,
    store: &ParamStore,
    z_prev: &Tensor,
    h: &Tensor,
) -> Result<(Tensor, f64)> {
    single(&FlowStep::Iaf(step.clone()), store, z_prev, h)
}

pub fn planar_step(step: &Planar, store: &ParamStore, z: &Tensor) -> Result<(Tensor, f64)> {
    single(
        &FlowStep::Planar(step.clone()),
        store,
        z,
        &Tensor::zeros(&[0]),
    )
}

pub fn linear_iaf(step: &LinearIaf, store: &ParamStore, y: &Tensor) -> Result<(Tensor, f64)> {
    single(
        &FlowStep::LinearIaf(step.clone()),
        store,
        y,
        &Tensor::zeros(&[0]),
    )
}

fn single(step: &FlowStep, store: &ParamStore, z: &Tensor, h: &Tensor) -> Result<(Tensor, f64)> {
    let d = step.dim();
    if z.len() != d {
        return Err(Error::shape("flow step", z.shape(), &[d]));
    }
    let zb = z.reshape(vec![1, d])?;
    let hb = (!h.is_empty())
        .then(|| h.reshape(vec![1, h.len()]))
        .transpose()?;
    let (out, delta) = step.apply(store, &zb, hb.as_ref())?;
    Ok((out.reshape(vec![d])?, delta[0]))
}

/// Layout options for an IAF chain.
#[derive(Clone, Debug, PartialEq)]
pub struct IafChainConfig {
    pub dim: usize,
    pub steps: usize,
    pub made_hidden: Vec<usize>,
    pub context_dim: usize,
    pub mode: IafMode,
    /// Insert an order reversal between consecutive IAF steps.
    pub reverse_between: bool,
    /// Initial `s`-head bias; `None` keeps the initializer's zero bias.
    pub forget_bias: Option<f64>,
}

impl IafChainConfig {
    pub fn new(dim: usize, steps: usize, made_hidden: Vec<usize>) -> Self {
        Self {
            dim,
            steps,
            made_hidden,
            context_dim: 0,
            mode: IafMode::Gated,
            reverse_between: true,
            forget_bias: Some(2.0),
        }
    }
}

/// Builds `IAF, reverse, IAF, reverse, …, IAF`.
pub fn build_iaf_chain(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &IafChainConfig,
    rng: &mut Prng,
) -> Result<Vec<FlowStep>> {
    let mut steps = Vec::new();
    for t in 0..cfg.steps {
        if t > 0 && cfg.reverse_between {
            steps.push(FlowStep::Permutation(reverse_perm(cfg.dim)));
        }
        let made = MadeConfig::new(cfg.dim, cfg.made_hidden.clone()).with_context(cfg.context_dim);
        let step = IafStep::new(store, &format!("{prefix}.{t}"), made, cfg.mode, rng)?;
        if let Some(bias) = cfg.forget_bias {
            step.net.init_forget_bias(store, bias)?;
        }
        steps.push(FlowStep::Iaf(step));
    }
    Ok(steps)
}
