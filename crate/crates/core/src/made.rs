//! Masked autoregressive networks (MADE).
//!
//! Degrees are assigned deterministically: inputs get `1..=D`, hidden unit `k`
//! (1-based) of every hidden layer gets `((k − 1) mod max(D − 1, 1)) + 1`, and
//! the outputs of both heads get `1..=D` again. A hidden connection is kept
//! when `deg_out ≥ deg_in`, an output connection only when `deg_out > deg_in`,
//! so output `i` never sees inputs `j ≥ i`.
//!
//! An optional context vector `h` feeds the first hidden layer through
//! unmasked weights; nothing constrains how outputs depend on it.

use crate::error::{Error, Result};
use crate::nn::WeightNormLayer;
use crate::params::ParamStore;
use crate::rng::Prng;
use crate::tape::{Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// Degree vectors and binary masks of one MADE.
///
/// Masks are stored in affine layout `[n_in, n_out]`; [`MaskSet::rows`] gives
/// the `[n_out][n_in]` view.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    pub output_degrees: Vec<usize>,
    masks: Vec<Tensor>,
}

impl MaskSet {
    pub fn dim(&self) -> usize {
        self.input_degrees.len()
    }

    /// Masks of all layers, hidden layers first, output (shared by both heads) last.
    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn output_mask(&self) -> &Tensor {
        self.masks.last().expect("at least one layer")
    }

    /// Layer `layer`'s mask as `rows[out][in]` with 0/1 entries.
    pub fn rows(&self, layer: usize) -> Vec<Vec<u8>> {
        let m = &self.masks[layer];
        let (n_in, n_out) = m.dims2().expect("rank-2 mask");
        (0..n_out)
            .map(|o| (0..n_in).map(|i| m.at2(i, o) as u8).collect())
            .collect()
    }

    /// Boolean reachability from input `j` to output `i` through all layers.
    pub fn reachability(&self) -> Vec<Vec<bool>> {
        let d = self.dim();
        // reach[u][j]: unit u of the current layer is reachable from input j
        let mut reach: Vec<Vec<bool>> = (0..d).map(|j| (0..d).map(|k| k == j).collect()).collect();
        for m in &self.masks {
            let (n_in, n_out) = m.dims2().expect("rank-2 mask");
            reach = (0..n_out)
                .map(|o| {
                    (0..d)
                        .map(|j| (0..n_in).any(|i| m.at2(i, o) != 0.0 && reach[i][j]))
                        .collect()
                })
                .collect();
        }
        reach
    }
}

fn degree_mask(deg_in: &[usize], deg_out: &[usize], strict: bool) -> Tensor {
    let mut m = Tensor::zeros(&[deg_in.len(), deg_out.len()]);
    let n_out = deg_out.len();
    for (i, &di) in deg_in.iter().enumerate() {
        for (o, &d_o) in deg_out.iter().enumerate() {
            let keep = if strict { d_o > di } else { d_o >= di };
            if keep {
                m.data_mut()[i * n_out + o] = 1.0;
            }
        }
    }
    m
}

pub fn build_masks(dim: usize, hidden_sizes: &[usize]) -> Result<MaskSet> {
    if dim == 0 {
        return Err(Error::Contract("MADE dimension must be at least 1".into()));
    }
    if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
        return Err(Error::Contract(format!(
            "MADE hidden sizes must be a nonempty list of positive widths, got {hidden_sizes:?}"
        )));
    }
    let input_degrees: Vec<usize> = (1..=dim).collect();
    let cycle = (dim - 1).max(1);
    let hidden_degrees: Vec<Vec<usize>> = hidden_sizes
        .iter()
        .map(|&n| (0..n).map(|k| (k % cycle) + 1).collect())
        .collect();
    let output_degrees = input_degrees.clone();

    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut prev = &input_degrees;
    for hd in &hidden_degrees {
        masks.push(degree_mask(prev, hd, false));
        prev = hd;
    }
    masks.push(degree_mask(prev, &output_degrees, true));
    Ok(MaskSet {
        input_degrees,
        hidden_degrees,
        output_degrees,
        masks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MadeConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub context_dim: usize,
    pub activation: UnaryKind,
}

impl MadeConfig {
    pub fn new(dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            dim,
            hidden,
            context_dim: 0,
            activation: UnaryKind::Elu,
        }
    }

    pub fn with_context(mut self, context_dim: usize) -> Self {
        self.context_dim = context_dim;
        self
    }
}

/// Masked feedforward network with two heads `m` and `s`.
#[derive(Clone, Debug)]
pub struct MadeNetwork {
    cfg: MadeConfig,
    masks: MaskSet,
    hidden: Vec<WeightNormLayer>,
    m_head: WeightNormLayer,
    s_head: WeightNormLayer,
}

impl MadeNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: MadeConfig,
        rng: &mut Prng,
    ) -> Result<Self> {
        let masks = build_masks(cfg.dim, &cfg.hidden)?;
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        for (l, &width) in cfg.hidden.iter().enumerate() {
            let mut mask = masks.masks()[l].clone();
            let mut n_in = mask.shape()[0];
            if l == 0 && cfg.context_dim > 0 {
                // context rows are fully connected
                let mut data = mask.into_data();
                data.extend(std::iter::repeat(1.0).take(cfg.context_dim * width));
                n_in += cfg.context_dim;
                mask = Tensor::from_rows(n_in, width, data)?;
            }
            hidden.push(WeightNormLayer::new(
                store,
                &format!("{prefix}.h{l}"),
                n_in,
                width,
                Some(mask),
                rng,
            )?);
        }
        let last = *cfg.hidden.last().expect("nonempty hidden");
        let out_mask = masks.output_mask().clone();
        let m_head = WeightNormLayer::new(
            store,
            &format!("{prefix}.m"),
            last,
            cfg.dim,
            Some(out_mask.clone()),
            rng,
        )?;
        let s_head = WeightNormLayer::new(
            store,
            &format!("{prefix}.s"),
            last,
            cfg.dim,
            Some(out_mask),
            rng,
        )?;
        Ok(Self {
            cfg,
            masks,
            hidden,
            m_head,
            s_head,
        })
    }

    pub fn config(&self) -> &MadeConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn hidden_layers(&self) -> &[WeightNormLayer] {
        &self.hidden
    }

    pub fn m_head(&self) -> &WeightNormLayer {
        &self.m_head
    }

    pub fn s_head(&self) -> &WeightNormLayer {
        &self.s_head
    }

    /// Batched forward pass: `z: [batch, D]`, `h: [batch, context_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        h: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (_, d) = tape.value(z).dims2()?;
        if d != self.cfg.dim {
            return Err(Error::shape(
                "made_forward",
                tape.value(z).shape(),
                &[self.cfg.dim],
            ));
        }
        let mut x = match (self.cfg.context_dim, h) {
            (0, _) => z,
            (c, Some(h)) => {
                let hv = tape.value(h);
                if hv.dims2()?.1 != c {
                    return Err(Error::shape("made_forward(context)", hv.shape(), &[c]));
                }
                tape.concat_cols(&[z, h])?
            }
            (c, None) => {
                return Err(Error::shape("made_forward(context)", &[0], &[c]));
            }
        };
        for layer in &self.hidden {
            let pre = layer.forward(tape, store, x)?;
            x = tape.unary(self.cfg.activation, pre)?;
        }
        let m = self.m_head.forward(tape, store, x)?;
        let s = self.s_head.forward(tape, store, x)?;
        Ok((m, s))
    }

    /// Plain batched evaluation.
    pub fn eval(
        &self,
        store: &ParamStore,
        z: &Tensor,
        h: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let hv = h.map(|h| tape.constant(h.clone()));
        let (m, s) = self.forward(&mut tape, store, zv, hv)?;
        Ok((tape.value(m).clone(), tape.value(s).clone()))
    }

    /// Sets the `s`-head bias to `target_s` so the gate starts near
    /// `sigmoid(target_s)`; weights keep their initializer draw.
    pub fn init_forget_bias(&self, store: &mut ParamStore, target_s: f64) -> Result<()> {
        store.set(self.s_head.b, Tensor::full(&[self.cfg.dim], target_s))
    }

    /// Zeroes every effective weight by setting all gains to 0.
    pub fn zero_weights(&self, store: &mut ParamStore) -> Result<()> {
        for layer in self.hidden.iter().chain([&self.m_head, &self.s_head]) {
            let n = layer.n_out();
            store.set(layer.g, Tensor::zeros(&[n]))?;
        }
        Ok(())
    }

    pub fn set_head_biases(
        &self,
        store: &mut ParamStore,
        m_bias: &Tensor,
        s_bias: &Tensor,
    ) -> Result<()> {
        store.set(self.m_head.b, m_bias.clone())?;
        store.set(self.s_head.b, s_bias.clone())
    }

    /// Data-dependent initialization of the hidden layers on inputs `z`
    /// (and context `h`). The heads keep their parameters.
    pub fn data_dependent_init(
        &self,
        store: &mut ParamStore,
        z: &Tensor,
        h: Option<&Tensor>,
    ) -> Result<()> {
        let mut x = match (self.cfg.context_dim, h) {
            (0, _) => z.clone(),
            (_, Some(h)) => {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let hv = tape.constant(h.clone());
                let c = tape.concat_cols(&[zv, hv])?;
                tape.value(c).clone()
            }
            (c, None) => return Err(Error::shape("made ddi(context)", &[0], &[c])),
        };
        for layer in &self.hidden {
            let pre = layer.data_dependent_init(store, &x)?;
            x = pre.map(|v| self.cfg.activation.apply(v));
        }
        Ok(())
    }
}

/// Single-vector convenience wrapper: `z: [D]`, `h: [context_dim]`.
pub fn made_forward(
    net: &MadeNetwork,
    store: &ParamStore,
    z: &Tensor,
    h: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = net.dim();
    if z.len() != d {
        return Err(Error::shape("made_forward", z.shape(), &[d]));
    }
    if h.len() != net.context_dim() {
        return Err(Error::shape(
            "made_forward(context)",
            h.shape(),
            &[net.context_dim()],
        ));
    }
    let zb = z.reshape(vec![1, d])?;
    let hb = h.reshape(vec![1, h.len()])?;
    let (m, s) = net.eval(store, &zb, (net.context_dim() > 0).then_some(&hb))?;
    Ok((m.reshape(vec![d])?, s.reshape(vec![d])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_for_d3_hidden4() {
        let ms = build_masks(3, &[4]).unwrap();
        assert_eq!(ms.hidden_degrees[0], vec![1, 2, 1, 2]);
        assert_eq!(
            ms.rows(0),
            vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 0, 0], vec![1, 1, 0]]
        );
        assert_eq!(
            ms.rows(1),
            vec![vec![0, 0, 0, 0], vec![1, 0, 1, 0], vec![1, 1, 1, 1]]
        );
    }

    #[test]
    fn masks_for_d1_disconnect_outputs() {
        let ms = build_masks(1, &[2]).unwrap();
        assert_eq!(ms.hidden_degrees[0], vec![1, 1]);
        assert_eq!(ms.rows(1), vec![vec![0, 0]]);
    }

    #[test]
    fn masks_for_d2_hidden2() {
        let ms = build_masks(2, &[2]).unwrap();
        assert_eq!(ms.hidden_degrees[0], vec![1, 1]);
        assert_eq!(ms.rows(1), vec![vec![0, 0], vec![1, 1]]);
    }

    #[test]
    fn zero_dimension_is_contract_error() {
        assert!(matches!(build_masks(0, &[3]), Err(Error::Contract(_))));
        assert!(matches!(build_masks(3, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn reachability_is_strictly_lower_triangular() {
        for d in 1..8 {
            for hidden in [vec![1], vec![3], vec![5, 7], vec![16, 16, 4]] {
                let ms = build_masks(d, &hidden).unwrap();
                let r = ms.reachability();
                for i in 0..d {
                    for j in 0..d {
                        if j >= i {
                            assert!(!r[i][j], "d={d} hidden={hidden:?} ({i},{j})");
                        }
                    }
                }
            }
        }
        // with enough hidden units every strictly-earlier input is reachable
        let r = build_masks(5, &[8, 8]).unwrap().reachability();
        for i in 0..5 {
            for j in 0..i {
                assert!(r[i][j]);
            }
        }
    }

    #[test]
    fn zero_weights_return_head_biases() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(11);
        let net = MadeNetwork::new(
            &mut store,
            "made",
            MadeConfig::new(3, vec![5, 5]).with_context(2),
            &mut rng,
        )
        .unwrap();
        net.zero_weights(&mut store).unwrap();
        let bm = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let bs = Tensor::vector(vec![1.0, 0.0, -3.0]);
        net.set_head_biases(&mut store, &bm, &bs).unwrap();
        for k in 0..5 {
            let z = rng.normal_tensor(&[3]);
            let h = Tensor::vector(vec![k as f64, -2.0]);
            let (m, s) = made_forward(&net, &store, &z, &h).unwrap();
            assert_eq!(m, bm);
            assert_eq!(s, bs);
        }
    }

    #[test]
    fn perturbing_later_inputs_leaves_earlier_outputs_bit_identical() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(12);
        let net =
            MadeNetwork::new(&mut store, "made", MadeConfig::new(4, vec![6, 6]), &mut rng).unwrap();
        let z = rng.normal_tensor(&[4]);
        let mut z2 = z.clone();
        z2.data_mut()[1] += 0.75;
        let empty = Tensor::zeros(&[0]);
        let (m1, s1) = made_forward(&net, &store, &z, &empty).unwrap();
        let (m2, s2) = made_forward(&net, &store, &z2, &empty).unwrap();
        for i in 0..2 {
            assert_eq!(m1.data()[i].to_bits(), m2.data()[i].to_bits());
            assert_eq!(s1.data()[i].to_bits(), s2.data()[i].to_bits());
        }
        assert_ne!(m1.data()[2], m2.data()[2]);
    }

    #[test]
    fn forget_bias_sets_gate() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(13);
        let net =
            MadeNetwork::new(&mut store, "made", MadeConfig::new(2, vec![4]), &mut rng).unwrap();
        net.zero_weights(&mut store).unwrap();
        net.init_forget_bias(&mut store, 2.0).unwrap();
        let (_, s) = made_forward(
            &net,
            &store,
            &Tensor::vector(vec![0.3, 0.1]),
            &Tensor::zeros(&[0]),
        )
        .unwrap();
        assert_eq!(s.data(), &[2.0, 2.0]);
        let sig = crate::tape::sigmoid(2.0);
        assert!((sig - 0.88079).abs() < 1e-5);
        assert!((crate::tape::sigmoid(1.0) - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(14);
        let net =
            MadeNetwork::new(&mut store, "made", MadeConfig::new(3, vec![4]), &mut rng).unwrap();
        let err =
            made_forward(&net, &store, &Tensor::zeros(&[2]), &Tensor::zeros(&[0])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let err =
            made_forward(&net, &store, &Tensor::zeros(&[3]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
