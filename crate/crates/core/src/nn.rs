//! Weight-normalized dense layers and small MLPs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tape::{Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// Minimum standard deviation used by data-dependent initialization.
pub const DDI_MIN_STD: f64 = 1e-8;

/// Dense layer with weights parameterized as `w = g · v / ‖v‖`, the norm taken
/// per output unit over the unmasked entries of its column.
///
/// Columns whose mask is entirely zero carry no signal; their norm is treated
/// as 1 so they never trip the zero-norm check.
#[derive(Clone, Debug)]
pub struct WeightNormLayer {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    n_in: usize,
    n_out: usize,
    mask: Option<Arc<Tensor>>,
    dead_cols: Arc<Tensor>,
}

impl WeightNormLayer {
    /// Draws `v` uniformly in `±1/√n_in` and sets `g = ‖v‖`, so the initial
    /// effective weights equal the raw draw. Biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        mask: Option<Tensor>,
        rng: &mut Prng,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            if m.shape() != [n_in, n_out] {
                return Err(Error::shape(
                    "WeightNormLayer(mask)",
                    m.shape(),
                    &[n_in, n_out],
                ));
            }
        }
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        let v = rng.uniform_tensor(&[n_in, n_out], -bound, bound);
        let mask = mask.map(Arc::new);
        let norms = column_norms(&v, mask.as_deref());
        let dead: Vec<f64> = (0..n_out)
            .map(|j| match &mask {
                Some(m) if (0..n_in).all(|i| m.at2(i, j) == 0.0) => 1.0,
                _ => 0.0,
            })
            .collect();
        let g: Vec<f64> = norms
            .iter()
            .zip(&dead)
            .map(|(&n, &d)| if d == 1.0 { 1.0 } else { n })
            .collect();
        let v_id = store.add(format!("{prefix}.v"), v)?;
        let g_id = store.add(format!("{prefix}.g"), Tensor::vector(g))?;
        let b_id = store.add(format!("{prefix}.b"), Tensor::zeros(&[n_out]))?;
        Ok(Self {
            v: v_id,
            g: g_id,
            b: b_id,
            n_in,
            n_out,
            mask,
            dead_cols: Arc::new(Tensor::vector(dead)),
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_deref()
    }

    fn check_norms(&self, store: &ParamStore) -> Result<()> {
        let norms = column_norms(store.value(self.v), self.mask.as_deref());
        for (j, (&n, &d)) in norms.iter().zip(self.dead_cols.data()).enumerate() {
            if d == 0.0 && n == 0.0 {
                return Err(Error::domain(
                    "weight_norm",
                    format!("zero-norm direction for output unit {j}"),
                ));
            }
        }
        Ok(())
    }

    /// Records the effective weight matrix `g · v / ‖v‖` on the tape.
    pub fn weight(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        self.check_norms(store)?;
        let v = tape.param(store, self.v);
        let g = tape.param(store, self.g);
        let vm = match &self.mask {
            Some(m) => {
                let m = tape.constant((**m).clone());
                tape.mul(v, m)?
            }
            None => v,
        };
        let sq = tape.square(vm)?;
        let ss = tape.sum_axis(sq, 0)?;
        // dead columns get norm sqrt(0 + 1); adding before the sqrt keeps its
        // derivative finite there
        let ss = if self.dead_cols.data().iter().any(|&d| d != 0.0) {
            let dead = tape.constant((*self.dead_cols).clone());
            tape.add(ss, dead)?
        } else {
            ss
        };
        let norm = tape.sqrt(ss)?;
        let scale = tape.div(g, norm)?;
        tape.mul(v, scale)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = self.weight(tape, store)?;
        let b = tape.param(store, self.b);
        tape.affine(x, w, Some(b), self.mask.clone())
    }

    /// Plain forward pass on a `[batch, n_in]` tensor.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Data-dependent initialization: sets `g` and `b` so the pre-activations
    /// on `x` have per-unit mean 0 and variance 1, and returns them.
    ///
    /// Units whose standard deviation is below [`DDI_MIN_STD`] use the floor.
    pub fn data_dependent_init(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_norms(store)?;
        let (rows, n_in) = x.dims2()?;
        if rows == 0 {
            return Err(Error::Contract(
                "data-dependent init needs a nonempty batch".into(),
            ));
        }
        if n_in != self.n_in {
            return Err(Error::shape(
                "data_dependent_init",
                x.shape(),
                &[rows, self.n_in],
            ));
        }
        let v = store.value(self.v);
        let norms = column_norms(v, self.mask.as_deref());
        let mut dir = vec![0.0; self.n_in * self.n_out];
        for i in 0..self.n_in {
            for j in 0..self.n_out {
                let m = self.mask.as_ref().map_or(1.0, |m| m.at2(i, j));
                let n = if self.dead_cols.data()[j] != 0.0 {
                    1.0
                } else {
                    norms[j]
                };
                dir[i * self.n_out + j] = m * v.at2(i, j) / n;
            }
        }
        let mut t = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            for i in 0..self.n_in {
                let xi = x.at2(r, i);
                for j in 0..self.n_out {
                    t[r * self.n_out + j] += xi * dir[i * self.n_out + j];
                }
            }
        }
        let mut g = vec![0.0; self.n_out];
        let mut b = vec![0.0; self.n_out];
        for j in 0..self.n_out {
            let mean = (0..rows).map(|r| t[r * self.n_out + j]).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (t[r * self.n_out + j] - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            let std = var.sqrt().max(DDI_MIN_STD);
            g[j] = 1.0 / std;
            b[j] = -mean / std;
            for r in 0..rows {
                let e = &mut t[r * self.n_out + j];
                *e = (*e - mean) / std;
            }
        }
        store.set(self.g, Tensor::vector(g))?;
        store.set(self.b, Tensor::vector(b))?;
        Tensor::from_rows(rows, self.n_out, t)
    }
}

fn column_norms(v: &Tensor, mask: Option<&Tensor>) -> Vec<f64> {
    let (n_in, n_out) = v.dims2().expect("rank-2 direction");
    (0..n_out)
        .map(|j| {
            (0..n_in)
                .map(|i| {
                    let m = mask.map_or(1.0, |m| m.at2(i, j));
                    (m * v.at2(i, j)).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Effective weights `w = g · v / ‖v‖` (column norms), without a tape.
pub fn weight_norm_apply(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n_in, n_out) = v.dims2()?;
    if g.len() != n_out {
        return Err(Error::shape("weight_norm_apply", v.shape(), g.shape()));
    }
    let norms = column_norms(v, None);
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::domain(
            "weight_norm",
            format!("zero-norm direction for output unit {j}"),
        ));
    }
    let mut w = v.clone();
    for i in 0..n_in {
        for j in 0..n_out {
            w.data_mut()[i * n_out + j] *= g.data()[j] / norms[j];
        }
    }
    Ok(w)
}

/// Stack of weight-normalized layers with a nonlinearity between them and a
/// linear final layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<WeightNormLayer>,
    activation: UnaryKind,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[64, 32, 8]`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: UnaryKind,
        rng: &mut Prng,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Contract(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                WeightNormLayer::new(store, &format!("{prefix}.{i}"), w[0], w[1], None, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[WeightNormLayer] {
        &self.layers
    }

    pub fn output_layer(&self) -> &WeightNormLayer {
        self.layers.last().expect("nonempty")
    }

    pub fn n_out(&self) -> usize {
        self.output_layer().n_out()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.unary(self.activation, h)?;
            }
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Initializes every hidden layer from data, in forward order, and returns
    /// the network output on `x`. The output layer keeps its parameters.
    pub fn data_dependent_init(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let pre = layer.data_dependent_init(store, &h)?;
            h = pre.map(|v| self.activation.apply(v));
        }
        self.layers[last].eval(store, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_normalization() {
        let v = Tensor::matrix(&[&[3.0], &[4.0]]);
        let w = weight_norm_apply(&v, &Tensor::vector(vec![1.0])).unwrap();
        assert!((w.data()[0] - 0.6).abs() < 1e-15);
        assert!((w.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn scale_invariance() {
        let v = Tensor::matrix(&[&[3.0, -1.0], &[4.0, 2.0]]);
        let g = Tensor::vector(vec![0.7, 1.3]);
        let w1 = weight_norm_apply(&v, &g).unwrap();
        for c in [0.01, 2.5, 1e3] {
            let w2 = weight_norm_apply(&v.map(|x| x * c), &g).unwrap();
            assert!(w1.max_abs_diff(&w2) < 1e-12);
        }
    }

    #[test]
    fn zero_norm_direction_is_domain_error() {
        let v = Tensor::matrix(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let err = weight_norm_apply(&v, &Tensor::vector(vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(
            err,
            Error::Domain {
                op: "weight_norm",
                ..
            }
        ));
    }

    #[test]
    fn initial_effective_weights_equal_raw_draw() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(1);
        let layer = WeightNormLayer::new(&mut store, "l", 3, 4, None, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = layer.weight(&mut tape, &store).unwrap();
        assert!(tape.value(w).max_abs_diff(store.value(layer.v)) < 1e-15);
    }

    #[test]
    fn tape_weight_matches_plain_weight_norm() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(2);
        let layer = WeightNormLayer::new(&mut store, "l", 5, 3, None, &mut rng).unwrap();
        store
            .set(layer.g, Tensor::vector(vec![0.3, -2.0, 1.1]))
            .unwrap();
        let mut tape = Tape::new();
        let w = layer.weight(&mut tape, &store).unwrap();
        let plain = weight_norm_apply(store.value(layer.v), store.value(layer.g)).unwrap();
        assert!(tape.value(w).max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn ddi_standardizes_and_is_idempotent() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(3);
        let layer = WeightNormLayer::new(&mut store, "l", 4, 6, None, &mut rng).unwrap();
        let x = rng.normal_tensor(&[50, 4]).map(|v| 3.0 * v + 1.5);
        layer.data_dependent_init(&mut store, &x).unwrap();
        let pre = layer.eval(&store, &x).unwrap();
        for j in 0..6 {
            let col: Vec<f64> = (0..50).map(|r| pre.at2(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
        let g1 = store.value(layer.g).clone();
        let b1 = store.value(layer.b).clone();
        layer.data_dependent_init(&mut store, &x).unwrap();
        assert!(store.value(layer.g).max_abs_diff(&g1) < 1e-10);
        assert!(store.value(layer.b).max_abs_diff(&b1) < 1e-10);
    }

    #[test]
    fn ddi_constant_input_uses_std_floor() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(4);
        let layer = WeightNormLayer::new(&mut store, "l", 2, 3, None, &mut rng).unwrap();
        let x = Tensor::full(&[8, 2], 0.5);
        let pre = layer.data_dependent_init(&mut store, &x).unwrap();
        assert!(pre.all_finite());
        assert!(store
            .value(layer.g)
            .data()
            .iter()
            .all(|&g| g == 1.0 / DDI_MIN_STD));
        let out = layer.eval(&store, &x).unwrap();
        assert!(out.all_finite());
    }
}
