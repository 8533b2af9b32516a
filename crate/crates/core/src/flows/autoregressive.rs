//! The autoregressive Gaussian read as a sampler and as a whitening map.
//!
//! A MADE with heads `(m, s)` defines `µ = m` and `σ = softplus(s) + 1e-4`.
//! Sampling `y_i = µ_i(y_{<i}) + σ_i(y_{<i}) ε_i` needs `D` sequential network
//! evaluations; the inverse `ε = (y − µ(y)) / σ(y)` needs one.

use crate::error::{Error, Result};
use crate::made::MadeNetwork;
use crate::params::ParamStore;
use crate::tape::softplus;
use crate::tensor::Tensor;

use super::SIGMA_FLOOR;

#[derive(Clone, Debug, PartialEq)]
pub struct AutoregressiveSampleResult {
    pub y: Tensor,
}

fn check(net: &MadeNetwork, v: &Tensor) -> Result<()> {
    if net.context_dim() != 0 {
        return Err(Error::Contract(
            "autoregressive sampling expects a network without context".into(),
        ));
    }
    if v.len() != net.dim() {
        return Err(Error::shape("autoregressive", v.shape(), &[net.dim()]));
    }
    Ok(())
}

/// Head bias that makes `σ = softplus(s) + 1e-4` equal `sigma` at zero weights.
pub fn sigma_head_bias(sigma: f64) -> f64 {
    let target = sigma - SIGMA_FLOOR;
    // inverse softplus
    target + (-(-target).exp_m1()).ln()
}

pub fn autoregressive_sample(
    net: &MadeNetwork,
    store: &ParamStore,
    eps: &Tensor,
) -> Result<AutoregressiveSampleResult> {
    check(net, eps)?;
    let d = net.dim();
    let mut y = Tensor::zeros(&[1, d]);
    for i in 0..d {
        let (m, s) = net.eval(store, &y, None)?;
        let sigma = softplus(s.data()[i]) + SIGMA_FLOOR;
        y.data_mut()[i] = m.data()[i] + sigma * eps.data()[i];
    }
    Ok(AutoregressiveSampleResult {
        y: y.reshape(vec![d])?,
    })
}

/// Returns `ε` and `log_det = −Σ log σ_i(y)`, the log-determinant of `y ↦ ε`.
pub fn whiten(net: &MadeNetwork, store: &ParamStore, y: &Tensor) -> Result<(Tensor, f64)> {
    check(net, y)?;
    let d = net.dim();
    let (m, s) = net.eval(store, &y.reshape(vec![1, d])?, None)?;
    let mut eps = Vec::with_capacity(d);
    let mut log_det = 0.0;
    for i in 0..d {
        let sigma = softplus(s.data()[i]) + SIGMA_FLOOR;
        eps.push((y.data()[i] - m.data()[i]) / sigma);
        log_det -= sigma.ln();
    }
    Ok((Tensor::vector(eps), log_det))
}
