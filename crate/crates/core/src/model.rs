//! Variational autoencoder with a configurable approximate posterior.
//!
//! The encoder emits, per datapoint, `[µ₀ | σ₀-preactivation | h | L]`
//! where `h` is the flow context and `L` the strict-lower entries used by
//! the linear IAF posterior. `σ₀ = softplus(·) + 1e-4`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flows::{
    base_sample_graph, build_iaf_chain, strict_lower_pairs, unit_lower_apply, FlowStep,
    IafChainConfig, IafMode, SIGMA_FLOOR,
};
use crate::nn::Mlp;
use crate::objectives::{
    free_bits_penalty_graph, group_kl_graph, std_normal_logpdf_graph, FreeBitsConfig,
    LikelihoodModel, ObjectiveTerms,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tape::{sigmoid, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// Family of the approximate posterior `q(z|x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorKind {
    Diagonal,
    /// One data-dependent unit lower-triangular step `z = L(x)·y`.
    LinearIaf,
    Iaf {
        steps: usize,
        made_hidden: Vec<usize>,
        mode: IafMode,
    },
}

impl PosteriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorKind::Diagonal => "diagonal",
            PosteriorKind::LinearIaf => "linear_iaf",
            PosteriorKind::Iaf { .. } => "iaf",
        }
    }
}

/// Generative network `z ↦ decoder output`.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderKind {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Fixed linear map `x̂ = z·A` with `A: [latent, obs]`; no parameters.
    FixedLinear {
        a: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub context_dim: usize,
    pub posterior: PosteriorKind,
    pub decoder: DecoderKind,
    pub likelihood: LikelihoodModel,
    pub free_bits: FreeBitsConfig,
    pub forget_bias: f64,
}

impl VaeConfig {
    /// MLP encoder and decoder with the given hidden widths, Bernoulli
    /// likelihood and one free-bits group per latent dimension.
    pub fn mlp(
        obs_dim: usize,
        latent_dim: usize,
        hidden: Vec<usize>,
        posterior: PosteriorKind,
    ) -> Result<Self> {
        Ok(VaeConfig {
            obs_dim,
            latent_dim,
            encoder_hidden: hidden.clone(),
            context_dim: if matches!(posterior, PosteriorKind::Iaf { .. }) {
                latent_dim
            } else {
                0
            },
            posterior,
            decoder: DecoderKind::Mlp { hidden },
            likelihood: LikelihoodModel::Bernoulli,
            free_bits: FreeBitsConfig::per_dimension(0.0, latent_dim)?,
            forget_bias: 2.0,
        })
    }

    fn n_pairs(&self) -> usize {
        match self.posterior {
            PosteriorKind::LinearIaf => strict_lower_pairs(self.latent_dim).len(),
            _ => 0,
        }
    }

    fn encoder_out(&self) -> usize {
        2 * self.latent_dim + self.context_dim + self.n_pairs()
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Contract(
                "observation and latent dimensions must be >= 1".into(),
            ));
        }
        if self.free_bits.dim() != self.latent_dim {
            return Err(Error::Contract(format!(
                "free-bits groups cover {} dimensions but the latent has {}",
                self.free_bits.dim(),
                self.latent_dim
            )));
        }
        if let DecoderKind::FixedLinear { a } = &self.decoder {
            if a.shape() != [self.latent_dim, self.obs_dim] {
                return Err(Error::shape(
                    "fixed decoder",
                    a.shape(),
                    &[self.latent_dim, self.obs_dim],
                ));
            }
        }
        if let LikelihoodModel::Gaussian { sigma } = self.likelihood {
            if !(sigma > 0.0) {
                return Err(Error::domain(
                    "gaussian likelihood",
                    format!("sigma must be positive, got {sigma}"),
                ));
            }
        }
        if !matches!(self.posterior, PosteriorKind::Iaf { .. }) && self.context_dim != 0 {
            return Err(Error::Contract(
                "a context vector is only used by the IAF posterior".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Mlp(Mlp),
    Fixed(Arc<Tensor>),
}

/// Nodes of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchGraph {
    /// Negative free-bits objective, averaged over the batch.
    pub loss: Var,
    pub recon: Var,
    pub log_prior: Var,
    pub log_q: Var,
    /// `[1, K]` minibatch-mean KL per free-bits group.
    pub group_kls: Var,
    pub z: Var,
    pub decoded: Var,
}

#[derive(Clone, Debug)]
pub struct Vae {
    cfg: VaeConfig,
    encoder: Mlp,
    decoder: Decoder,
    steps: Vec<FlowStep>,
    log_scale: Option<ParamId>,
}

impl Vae {
    pub fn new(store: &mut ParamStore, cfg: VaeConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![cfg.obs_dim];
        sizes.extend(&cfg.encoder_hidden);
        sizes.push(cfg.encoder_out());
        let encoder = Mlp::new(store, "enc", &sizes, UnaryKind::Elu, rng)?;
        let steps = match &cfg.posterior {
            PosteriorKind::Iaf {
                steps,
                made_hidden,
                mode,
            } => {
                let chain = IafChainConfig {
                    dim: cfg.latent_dim,
                    steps: *steps,
                    made_hidden: made_hidden.clone(),
                    context_dim: cfg.context_dim,
                    mode: *mode,
                    reverse_between: true,
                    forget_bias: Some(cfg.forget_bias),
                };
                build_iaf_chain(store, "flow", &chain, rng)?
            }
            _ => Vec::new(),
        };
        let decoder = match &cfg.decoder {
            DecoderKind::Mlp { hidden } => {
                let mut sizes = vec![cfg.latent_dim];
                sizes.extend(hidden);
                sizes.push(cfg.obs_dim);
                Decoder::Mlp(Mlp::new(store, "dec", &sizes, UnaryKind::Elu, rng)?)
            }
            DecoderKind::FixedLinear { a } => Decoder::Fixed(Arc::new(a.clone())),
        };
        let log_scale = match cfg.likelihood {
            LikelihoodModel::DiscretizedLogistic { log_scale } => {
                Some(store.add("lik.log_scale", Tensor::scalar(log_scale))?)
            }
            _ => None,
        };
        Ok(Vae {
            cfg,
            encoder,
            decoder,
            steps,
            log_scale,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn steps(&self) -> &[FlowStep] {
        &self.steps
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    /// Likelihood with the current learned scale filled in.
    pub fn likelihood(&self, store: &ParamStore) -> LikelihoodModel {
        match (self.cfg.likelihood.clone(), self.log_scale) {
            (LikelihoodModel::DiscretizedLogistic { .. }, Some(id)) => {
                LikelihoodModel::DiscretizedLogistic {
                    log_scale: store.value(id).data()[0],
                }
            }
            (lik, _) => lik,
        }
    }

    /// Encoder outputs on the tape: `(µ₀, σ₀, h, L)`.
    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
        let d = self.cfg.latent_dim;
        let out = self.encoder.forward(tape, store, x)?;
        let mu = tape.slice_cols(out, 0, d)?;
        let pre = tape.slice_cols(out, d, 2 * d)?;
        let sp = tape.softplus(pre)?;
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR)?;
        let mut at = 2 * d;
        let h = (self.cfg.context_dim > 0)
            .then(|| tape.slice_cols(out, at, at + self.cfg.context_dim))
            .transpose()?;
        at += self.cfg.context_dim;
        let n_pairs = self.cfg.n_pairs();
        let lower = (n_pairs > 0)
            .then(|| tape.slice_cols(out, at, at + n_pairs))
            .transpose()?;
        Ok((mu, sigma, h, lower))
    }

    /// Posterior sample on the tape: `(z, per-dimension log q)`.
    pub fn posterior_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        eps: Var,
    ) -> Result<(Var, Var)> {
        let (mu, sigma, h, lower) = self.encode(tape, store, x)?;
        let (mut z, mut log_q) = base_sample_graph(tape, mu, sigma, eps)?;
        if let Some(lower) = lower {
            z = unit_lower_apply(tape, z, lower)?;
        }
        for step in &self.steps {
            (z, log_q) = step.forward(tape, store, z, h, log_q)?;
        }
        Ok((z, log_q))
    }

    /// Decoder output for latent rows `z`.
    pub fn decode_graph(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        match &self.decoder {
            Decoder::Mlp(mlp) => mlp.forward(tape, store, z),
            Decoder::Fixed(a) => {
                let av = tape.constant((**a).clone());
                tape.affine(z, av, None, None)
            }
        }
    }

    /// Full batched objective for observations `x: [B, obs]` and noise
    /// `eps: [B, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        eps: &Tensor,
    ) -> Result<BatchGraph> {
        let (b, obs) = x.dims2()?;
        if obs != self.cfg.obs_dim {
            return Err(Error::shape("vae input", x.shape(), &[b, self.cfg.obs_dim]));
        }
        if eps.shape() != [b, self.cfg.latent_dim] {
            return Err(Error::shape(
                "vae noise",
                eps.shape(),
                &[b, self.cfg.latent_dim],
            ));
        }
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone());
        let (z, log_q_dims) = self.posterior_graph(tape, store, xv, ev)?;
        let decoded = self.decode_graph(tape, store, z)?;
        let ls = self.log_scale.map(|id| tape.param(store, id));
        let recon = self.cfg.likelihood.log_prob_graph(tape, xv, decoded, ls)?;
        let log_p_dims = std_normal_logpdf_graph(tape, z)?;
        let log_prior = tape.sum_axis(log_p_dims, 1)?;
        let log_q = tape.sum_axis(log_q_dims, 1)?;
        let kl_dims = tape.sub(log_q_dims, log_p_dims)?;
        let group_kls = group_kl_graph(tape, kl_dims, &self.cfg.free_bits)?;
        let penalty = free_bits_penalty_graph(tape, group_kls, self.cfg.free_bits.lambda)?;
        let mean_recon = tape.mean(recon)?;
        let objective = tape.sub(mean_recon, penalty)?;
        let loss = tape.neg(objective)?;
        Ok(BatchGraph {
            loss,
            recon,
            log_prior,
            log_q,
            group_kls,
            z,
            decoded,
        })
    }

    /// Per-row bound terms (no gradients needed). Group KLs are per row.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        x: &Tensor,
        eps: &Tensor,
    ) -> Result<Vec<ObjectiveTerms>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone());
        let (z, log_q_dims) = self.posterior_graph(&mut tape, store, xv, ev)?;
        let decoded = self.decode_graph(&mut tape, store, z)?;
        let ls = self.log_scale.map(|id| tape.param(store, id));
        let recon = self
            .cfg
            .likelihood
            .log_prob_graph(&mut tape, xv, decoded, ls)?;
        let log_p_dims = std_normal_logpdf_graph(&mut tape, z)?;
        let lq = tape.value(log_q_dims);
        let lp = tape.value(log_p_dims);
        let (rows, d) = lq.dims2()?;
        let recon = tape.value(recon).data();
        Ok((0..rows)
            .map(|r| {
                let kl: Vec<f64> = (0..d).map(|i| lq.at2(r, i) - lp.at2(r, i)).collect();
                ObjectiveTerms::new(
                    recon[r],
                    lp.row(r).iter().sum(),
                    lq.row(r).iter().sum(),
                    self.cfg.free_bits.group_sums(&kl),
                )
            })
            .collect())
    }

    /// Posterior draws `[n, D]` for one observation row.
    pub fn posterior_samples(
        &self,
        store: &ParamStore,
        x_row: &[f64],
        eps: &Tensor,
    ) -> Result<Tensor> {
        let (n, _) = eps.dims2()?;
        let x = Tensor::from_rows(1, x_row.len(), x_row.to_vec())?.tile_rows(n);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ev = tape.constant(eps.clone());
        let (z, _) = self.posterior_graph(&mut tape, store, xv, ev)?;
        Ok(tape.value(z).clone())
    }

    /// Decoder mean image for latent rows: Bernoulli probabilities,
    /// logistic locations, or Gaussian means.
    pub fn decode_mean(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_graph(&mut tape, store, zv)?;
        let v = tape.value(out);
        Ok(match self.cfg.likelihood {
            LikelihoodModel::Bernoulli => v.map(sigmoid),
            _ => v.clone(),
        })
    }

    /// Importance-sampled `log p(x)` per row with `s` samples each.
    pub fn iwae_logp(
        &self,
        store: &ParamStore,
        x: &Tensor,
        s: usize,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        if s == 0 {
            return Err(Error::Contract(
                "importance-sampled estimate needs S >= 1".into(),
            ));
        }
        let (rows, _) = x.dims2()?;
        let d = self.cfg.latent_dim;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = Tensor::from_rows(1, x.row(r).len(), x.row(r).to_vec())?.tile_rows(s);
            let eps = rng.normal_tensor(&[s, d]);
            let w: Vec<f64> = self
                .evaluate(store, &xr, &eps)?
                .iter()
                .map(|t| t.elbo)
                .collect();
            out.push(crate::objectives::iwae_logp(&w)?);
        }
        Ok(out)
    }

    /// Data-dependent initialization of every hidden layer in forward
    /// order: encoder, each flow network, decoder.
    pub fn data_dependent_init(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        rng: &mut Prng,
    ) -> Result<()> {
        let (b, _) = x.dims2()?;
        if b == 0 {
            return Err(Error::Contract(
                "data-dependent init needs a nonempty batch".into(),
            ));
        }
        self.encoder.data_dependent_init(store, x)?;
        let eps = rng.normal_tensor(&[b, self.cfg.latent_dim]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps);
        let (mu, sigma, h, lower) = self.encode(&mut tape, store, xv)?;
        let (mut z, _) = base_sample_graph(&mut tape, mu, sigma, ev)?;
        if let Some(lower) = lower {
            z = unit_lower_apply(&mut tape, z, lower)?;
        }
        let mut zt = tape.value(z).clone();
        let ht = h.map(|h| tape.value(h).clone());
        for step in &self.steps {
            if let FlowStep::Iaf(iaf) = step {
                iaf.net.data_dependent_init(store, &zt, ht.as_ref())?;
            }
            zt = step.apply(store, &zt, ht.as_ref())?.0;
        }
        if let Decoder::Mlp(mlp) = &self.decoder {
            mlp.data_dependent_init(store, &zt)?;
        }
        Ok(())
    }

    /// Same bound evaluated in the pre-flow variables `y`: factorized
    /// `q(y|x)` against the autoregressive prior `p(y) = N(f(y))·|∂f/∂y|`.
    /// Returns `(recon, log p(y), log q(y))` for each row.
    pub fn y_space_terms(
        &self,
        store: &ParamStore,
        x: &Tensor,
        eps: &Tensor,
    ) -> Result<Vec<(f64, f64, f64)>> {
        let (rows, _) = x.dims2()?;
        let d = self.cfg.latent_dim;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone());
        let (mu, sigma, h, lower) = self.encode(&mut tape, store, xv)?;
        let (mut y, log_q_y) = base_sample_graph(&mut tape, mu, sigma, ev)?;
        if let Some(lower) = lower {
            y = unit_lower_apply(&mut tape, y, lower)?;
        }
        let ht = h.map(|h| tape.value(h).clone());
        let mut z = tape.value(y).clone();
        let mut log_det = vec![0.0; rows];
        for step in &self.steps {
            let (zn, delta) = step.apply(store, &z, ht.as_ref())?;
            z = zn;
            // delta is the change in log q, i.e. −log|∂f/∂y|
            for (acc, dl) in log_det.iter_mut().zip(delta) {
                *acc -= dl;
            }
        }
        let lik = self.likelihood(store);
        let decoded = self.decode_mean_raw(store, &z)?;
        let lq = tape.value(log_q_y).clone();
        (0..rows)
            .map(|r| {
                let recon = lik.log_prob(
                    &Tensor::vector(x.row(r).to_vec()),
                    &Tensor::vector(decoded.row(r).to_vec()),
                )?;
                let zr = z.row(r);
                let log_p =
                    crate::objectives::std_normal_logpdf(&Tensor::vector(zr.to_vec())) + log_det[r];
                let log_q: f64 = lq.row(r).iter().sum();
                debug_assert_eq!(zr.len(), d);
                Ok((recon, log_p, log_q))
            })
            .collect()
    }

    fn decode_mean_raw(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_graph(&mut tape, store, zv)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn tiny(posterior: PosteriorKind, seed: u64) -> (ParamStore, Vae) {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed);
        let cfg = VaeConfig::mlp(6, 2, vec![4], posterior).unwrap();
        let vae = Vae::new(&mut store, cfg, &mut rng).unwrap();
        (store, vae)
    }

    fn iaf(steps: usize) -> PosteriorKind {
        PosteriorKind::Iaf {
            steps,
            made_hidden: vec![4, 4],
            mode: IafMode::Gated,
        }
    }

    fn binary_batch(rng: &mut Prng, b: usize, d: usize) -> Tensor {
        Tensor::from_rows(
            b,
            d,
            (0..b * d)
                .map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn batch_terms_match_row_evaluation() {
        for post in [PosteriorKind::Diagonal, PosteriorKind::LinearIaf, iaf(2)] {
            let (store, vae) = tiny(post, 1);
            let mut rng = Prng::new(2);
            let x = binary_batch(&mut rng, 3, 6);
            let eps = rng.normal_tensor(&[3, 2]);
            let mut tape = Tape::new();
            let g = vae.forward(&mut tape, &store, &x, &eps).unwrap();
            let rows = vae.evaluate(&store, &x, &eps).unwrap();
            for (r, t) in rows.iter().enumerate() {
                assert_eq!(t.recon, tape.value(g.recon).data()[r]);
                assert_eq!(t.log_q, tape.value(g.log_q).data()[r]);
                assert_eq!(t.elbo, t.recon + t.log_prior - t.log_q);
            }
            let mean_elbo = rows.iter().map(|t| t.elbo).sum::<f64>() / 3.0;
            // λ = 0: the loss is exactly the negative mean bound
            assert!((tape.scalar(g.loss) + mean_elbo).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_log_q_matches_flow_density() {
        let (store, vae) = tiny(iaf(2), 3);
        let mut rng = Prng::new(4);
        let x = binary_batch(&mut rng, 1, 6);
        let eps = rng.normal_tensor(&[1, 2]);
        let t = &vae.evaluate(&store, &x, &eps).unwrap()[0];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (mu, sigma, h, _) = vae.encode(&mut tape, &store, xv).unwrap();
        let base = crate::flows::BaseGaussianParams::new(
            tape.value(mu).reshape(vec![2]).unwrap(),
            tape.value(sigma).reshape(vec![2]).unwrap(),
            tape.value(h.unwrap()).reshape(vec![2]).unwrap(),
        )
        .unwrap();
        let z = vae.posterior_samples(&store, x.row(0), &eps).unwrap();
        let lq = crate::flows::flow_log_density(&store, &base, vae.steps(), &z).unwrap();
        assert!((lq[0] - t.log_q).abs() < 1e-10);
    }

    #[test]
    fn y_space_bound_equals_z_space_bound() {
        for post in [iaf(1), iaf(3), PosteriorKind::LinearIaf] {
            let (store, vae) = tiny(post, 5);
            let mut rng = Prng::new(6);
            let x = binary_batch(&mut rng, 4, 6);
            let eps = rng.normal_tensor(&[4, 2]);
            let zs = vae.evaluate(&store, &x, &eps).unwrap();
            let ys = vae.y_space_terms(&store, &x, &eps).unwrap();
            for (z, (recon, lp, lq)) in zs.iter().zip(ys) {
                assert!((z.elbo - (recon + lp - lq)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(7);
        let mut cfg = VaeConfig::mlp(4, 2, vec![2], iaf(1)).unwrap();
        cfg.free_bits = FreeBitsConfig::per_dimension(0.05, 2).unwrap();
        let vae = Vae::new(&mut store, cfg, &mut rng).unwrap();
        let x = binary_batch(&mut rng, 2, 4);
        let eps = rng.normal_tensor(&[2, 2]);
        let mut tape = Tape::new();
        let g = vae.forward(&mut tape, &store, &x, &eps).unwrap();
        tape.backward(g.loss, &mut store).unwrap();
        let numeric = oracle::fd_gradient(
            |s| {
                let mut t = Tape::new();
                let g = vae.forward(&mut t, s, &x, &eps).unwrap();
                t.scalar(g.loss)
            },
            &store,
            oracle::FD_STEP,
        );
        for (id, num) in store.ids().zip(&numeric) {
            for (a, n) in store.grad(id).data().iter().zip(num.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-4, "{}: {a} vs {n}", store.name(id));
            }
        }
    }

    #[test]
    fn ddi_normalizes_encoder_hidden_units() {
        let (mut store, vae) = tiny(iaf(2), 8);
        let mut rng = Prng::new(9);
        let x = binary_batch(&mut rng, 64, 6);
        vae.data_dependent_init(&mut store, &x, &mut rng).unwrap();
        let pre = vae.encoder().layers()[0].eval(&store, &x).unwrap();
        let (b, n) = pre.dims2().unwrap();
        for j in 0..n {
            let col: Vec<f64> = (0..b).map(|r| pre.at2(r, j)).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / b as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-8);
        }
        // flow heads keep the forget bias
        if let FlowStep::Iaf(s) = &vae.steps()[0] {
            assert!(store
                .value(s.net.s_head().b)
                .data()
                .iter()
                .all(|&b| b == 2.0));
        }
    }

    #[test]
    fn iwae_with_one_sample_is_the_bound() {
        let (store, vae) = tiny(iaf(1), 10);
        let mut rng = Prng::new(11);
        let x = binary_batch(&mut rng, 2, 6);
        let mut r1 = Prng::new(12);
        let iw = vae.iwae_logp(&store, &x, 1, &mut r1).unwrap();
        let mut r2 = Prng::new(12);
        for r in 0..2 {
            let eps = r2.normal_tensor(&[1, 2]);
            let xr = Tensor::from_rows(1, 6, x.row(r).to_vec()).unwrap();
            assert_eq!(iw[r], vae.evaluate(&store, &xr, &eps).unwrap()[0].elbo);
        }
    }

    #[test]
    fn config_errors() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(0);
        let mut cfg = VaeConfig::mlp(4, 2, vec![3], PosteriorKind::Diagonal).unwrap();
        cfg.context_dim = 2;
        assert!(Vae::new(&mut store, cfg, &mut rng).is_err());
        let mut cfg = VaeConfig::mlp(4, 2, vec![3], PosteriorKind::Diagonal).unwrap();
        cfg.decoder = DecoderKind::FixedLinear {
            a: Tensor::zeros(&[3, 4]),
        };
        assert!(Vae::new(&mut store, cfg, &mut rng).is_err());
    }
}
