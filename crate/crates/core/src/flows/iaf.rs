use crate::error::Result;
use crate::made::{MadeConfig, MadeNetwork};
use crate::params::ParamStore;
use crate::rng::Prng;
use crate::tape::{sigmoid, softplus, Tape, Var};
use crate::tensor::Tensor;

use super::SIGMA_FLOOR;

/// How an IAF step turns the MADE outputs `(m, s)` into an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IafMode {
    /// `σ = sigmoid(s)`, `z = σ ⊙ z + (1 − σ) ⊙ m`.
    Gated,
    /// `σ = softplus(s) + 1e-4`, `z = m + σ ⊙ z`.
    Affine,
    /// `z = z + m`; volume preserving.
    LocationOnly,
}

impl IafMode {
    pub fn name(self) -> &'static str {
        match self {
            IafMode::Gated => "gated",
            IafMode::Affine => "affine",
            IafMode::LocationOnly => "location_only",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IafStep {
    pub net: MadeNetwork,
    pub mode: IafMode,
}

impl IafStep {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MadeConfig,
        mode: IafMode,
        rng: &mut Prng,
    ) -> Result<Self> {
        let net = MadeNetwork::new(store, prefix, cfg, rng)?;
        Ok(Self { net, mode })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    /// Returns the new iterate and the per-dimension `−log σ` contributions.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        h: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let (m, s) = self.net.forward(tape, store, z, h)?;
        match self.mode {
            IafMode::Gated => {
                // 1 − sigmoid(s) = sigmoid(−s) and −log sigmoid(s) = softplus(−s)
                let sigma = tape.sigmoid(s)?;
                let neg_s = tape.neg(s)?;
                let one_minus = tape.sigmoid(neg_s)?;
                let a = tape.mul(sigma, z)?;
                let b = tape.mul(one_minus, m)?;
                let z_new = tape.add(a, b)?;
                let delta = tape.softplus(neg_s)?;
                Ok((z_new, Some(delta)))
            }
            IafMode::Affine => {
                let sp = tape.softplus(s)?;
                let sigma = tape.add_scalar(sp, SIGMA_FLOOR)?;
                let a = tape.mul(sigma, z)?;
                let z_new = tape.add(m, a)?;
                let log_sigma = tape.log(sigma)?;
                let delta = tape.neg(log_sigma)?;
                Ok((z_new, Some(delta)))
            }
            IafMode::LocationOnly => Ok((tape.add(z, m)?, None)),
        }
    }

    /// Recovers `z_prev` from `z` with one network pass per dimension.
    pub(crate) fn inverse(
        &self,
        store: &ParamStore,
        z: &Tensor,
        h: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (rows, d) = z.dims2()?;
        let mut x = Tensor::zeros(&[rows, d]);
        for i in 0..d {
            let (m, s) = self.net.eval(store, &x, h)?;
            for r in 0..rows {
                let (mi, si, zi) = (m.at2(r, i), s.at2(r, i), z.at2(r, i));
                let xi = match self.mode {
                    IafMode::Gated => (zi - sigmoid(-si) * mi) / sigmoid(si),
                    IafMode::Affine => (zi - mi) / (softplus(si) + SIGMA_FLOOR),
                    IafMode::LocationOnly => zi - mi,
                };
                x.data_mut()[r * d + i] = xi;
            }
        }
        Ok(x)
    }
}
