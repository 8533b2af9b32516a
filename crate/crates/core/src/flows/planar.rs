use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

/// Planar flow `z' = z + û · tanh(wᵀz + b)`.
///
/// `û = u + (softplus(wᵀu) − 1 − wᵀu) · w / ‖w‖²` keeps `wᵀû > −1`, which makes
/// the map invertible with `1 + ûᵀψ(z) > 0`. For `w = 0`, `û = u`.
#[derive(Clone, Debug)]
pub struct Planar {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    dim: usize,
}

impl Planar {
    pub fn new(store: &mut ParamStore, prefix: &str, u: Tensor, w: Tensor, b: f64) -> Result<Self> {
        if u.rank() != 1 || u.shape() != w.shape() {
            return Err(Error::shape("planar", u.shape(), w.shape()));
        }
        let dim = u.len();
        Ok(Self {
            u: store.add(format!("{prefix}.u"), u)?,
            w: store.add(format!("{prefix}.w"), w)?,
            b: store.add(format!("{prefix}.b"), Tensor::vector(vec![b]))?,
            dim,
        })
    }

    pub fn random(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        let u = rng.normal_tensor(&[dim]).map(|v| v * scale);
        let w = rng.normal_tensor(&[dim]).map(|v| v * scale);
        let b = rng.normal() * scale;
        Self::new(store, prefix, u, w, b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The invertibility-corrected `û`.
    pub fn u_hat(&self, store: &ParamStore) -> Tensor {
        let u = store.value(self.u).data();
        let w = store.value(self.w).data();
        let wu: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
        let ww: f64 = w.iter().map(|v| v * v).sum();
        if ww == 0.0 {
            return Tensor::vector(u.to_vec());
        }
        let coef = (softplus(wu) - 1.0 - wu) / ww;
        Tensor::vector(u.iter().zip(w).map(|(a, b)| a + coef * b).collect())
    }

    fn u_hat_graph(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let u = tape.param(store, self.u);
        let w = tape.param(store, self.w);
        let ww: f64 = store.value(self.w).data().iter().map(|v| v * v).sum();
        if ww == 0.0 {
            return Ok(u);
        }
        let uw = tape.mul(u, w)?;
        let wu = tape.sum(uw)?;
        let sp = tape.softplus(wu)?;
        let t = tape.sub(sp, wu)?;
        let t = tape.add_scalar(t, -1.0)?;
        let w2 = tape.square(w)?;
        let nw = tape.sum(w2)?;
        let coef = tape.div(t, nw)?;
        let corr = tape.mul(w, coef)?;
        tape.add(u, corr)
    }

    /// Returns the new point and the per-row `−log|det|` as a `[batch, 1]` node.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
    ) -> Result<(Var, Var)> {
        let d = self.dim;
        let u_hat = self.u_hat_graph(tape, store)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let w_col = tape.reshape(w, &[d, 1])?;
        let a = tape.affine(z, w_col, Some(b), None)?;
        let t = tape.tanh(a)?;
        let u_row = tape.reshape(u_hat, &[1, d])?;
        let shift = tape.affine(t, u_row, None, None)?;
        let z_new = tape.add(z, shift)?;
        // det = 1 + (1 − t²) wᵀû
        let wu_hat = {
            let p = tape.mul(w, u_hat)?;
            tape.sum(p)?
        };
        let t2 = tape.square(t)?;
        let one_minus = {
            let n = tape.neg(t2)?;
            tape.add_scalar(n, 1.0)?
        };
        let scaled = tape.mul(one_minus, wu_hat)?;
        let det = tape.add_scalar(scaled, 1.0)?;
        let log_det = tape.log(det)?;
        let delta = tape.neg(log_det)?;
        Ok((z_new, delta))
    }

    pub(crate) fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (rows, d) = z.dims2()?;
        let u_hat = self.u_hat(store);
        let w = store.value(self.w).data();
        let b = store.value(self.b).data()[0];
        let c: f64 = w.iter().zip(u_hat.data()).map(|(a, b)| a * b).sum();
        let mut out = z.clone();
        for r in 0..rows {
            let row = z.row(r);
            let target: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            // solve a + c·tanh(a + b) = target; the left side is increasing in a
            let (mut lo, mut hi) = (target - c.abs() - 1.0, target + c.abs() + 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid + c * (mid + b).tanh() < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                    break;
                }
            }
            let a = 0.5 * (lo + hi);
            let t = (a + b).tanh();
            for i in 0..d {
                out.data_mut()[r * d + i] = row[i] - u_hat.data()[i] * t;
            }
        }
        Ok(out)
    }
}
