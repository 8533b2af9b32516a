use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index pairs `(i, j)` with `j < i`, row-major: `(1,0), (2,0), (2,1), …`.
pub fn strict_lower_pairs(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

/// `z = L·y` per row, where `lower[.., k]` holds `L[i_k, j_k]` of
/// [`strict_lower_pairs`] and the diagonal of `L` is fixed to one.
///
/// `lower` is either `[K]`, shared by all rows, or `[batch, K]`.
pub fn unit_lower_apply(tape: &mut Tape, y: Var, lower: Var) -> Result<Var> {
    let (_, d) = tape.value(y).dims2()?;
    let pairs = strict_lower_pairs(d);
    if pairs.is_empty() {
        return Ok(y);
    }
    let cols: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let gathered = tape.select_cols(y, &cols)?;
    let prod = tape.mul(gathered, lower)?;
    let mut scatter = Tensor::zeros(&[pairs.len(), d]);
    for (k, &(i, _)) in pairs.iter().enumerate() {
        scatter.data_mut()[k * d + i] = 1.0;
    }
    let scatter = tape.constant(scatter);
    let contrib = tape.affine(prod, scatter, None, None)?;
    tape.add(y, contrib)
}

/// Solves `L·y = z` for unit lower-triangular `L` given by its strict-lower entries.
pub fn unit_lower_solve(lower: &[f64], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut y = vec![0.0; d];
    let mut k = 0;
    for i in 0..d {
        let mut acc = z[i];
        for yj in y.iter().take(i) {
            acc -= lower[k] * yj;
            k += 1;
        }
        y[i] = acc;
    }
    y
}

/// Linear IAF step `z = L·y` with unit-diagonal lower-triangular `L`.
#[derive(Clone, Debug)]
pub struct LinearIaf {
    /// Strict-lower entries of `L`, ordered as [`strict_lower_pairs`].
    pub lower: ParamId,
    dim: usize,
}

impl LinearIaf {
    /// Fails unless `l` is square, lower triangular, and has a unit diagonal.
    pub fn new(store: &mut ParamStore, prefix: &str, l: &Tensor) -> Result<Self> {
        let (r, c) = l.dims2()?;
        if r != c {
            return Err(Error::Contract(format!(
                "linear IAF matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in 0..c {
                let v = l.at2(i, j);
                if i == j && v != 1.0 {
                    return Err(Error::Contract(format!(
                        "linear IAF diagonal entry ({i},{i}) is {v}, expected 1"
                    )));
                }
                if j > i && v != 0.0 {
                    return Err(Error::Contract(format!(
                        "linear IAF entry ({i},{j}) above the diagonal is {v}"
                    )));
                }
            }
        }
        let lower: Vec<f64> = strict_lower_pairs(r)
            .iter()
            .map(|&(i, j)| l.at2(i, j))
            .collect();
        Ok(Self {
            lower: store.add(format!("{prefix}.lower"), Tensor::vector(lower))?,
            dim: r,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, store: &ParamStore) -> Tensor {
        let mut l = Tensor::identity(self.dim);
        let lower = store.value(self.lower).data();
        for (k, (i, j)) in strict_lower_pairs(self.dim).into_iter().enumerate() {
            l.data_mut()[i * self.dim + j] = lower[k];
        }
        l
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let lower = tape.param(store, self.lower);
        unit_lower_apply(tape, y, lower)
    }

    pub(crate) fn inverse(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (rows, d) = z.dims2()?;
        let lower = store.value(self.lower).data();
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            data.extend(unit_lower_solve(lower, z.row(r)));
        }
        Tensor::from_rows(rows, d, data)
    }
}
