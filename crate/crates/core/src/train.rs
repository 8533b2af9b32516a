//! Adam and the epoch loop.

use std::time::Instant;

use crate::data::binarize_dynamic;
use crate::error::{Error, Result};
use crate::model::Vae;
use crate::objectives::iwae_logp;
use crate::params::ParamStore;
use crate::rng::Prng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect()
        };
        AdamState {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update using the gradients currently in `store`.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters but the store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.cfg;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for ((entry, m), v) in store.entries_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != entry.value.shape() {
            return Err(Error::shape("adam_step", m.shape(), entry.value.shape()));
        }
        let g = entry.grad.data();
        let theta = entry.value.data_mut();
        for i in 0..g.len() {
            let mi = &mut m.data_mut()[i];
            *mi = beta1 * *mi + (1.0 - beta1) * g[i];
            let vi = &mut v.data_mut()[i];
            *vi = beta2 * *vi + (1.0 - beta2) * g[i] * g[i];
            let mhat = m.data()[i] / c1;
            let vhat = v.data()[i] / c2;
            theta[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Resample binary observations from the intensities for every batch.
    pub binarize: bool,
    /// Rows used for data-dependent initialization; 0 skips it.
    pub init_rows: usize,
    pub iwae_samples: usize,
    /// Evaluate on held-out data every this many epochs (the last epoch is
    /// always evaluated when held-out data is given). 0 means last only.
    pub eval_every: usize,
    /// Record wall-clock seconds in the metrics; off keeps output reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            adam: AdamConfig::default(),
            seed: 0,
            binarize: false,
            init_rows: 256,
            iwae_samples: 128,
            eval_every: 0,
            record_time: false,
        }
    }
}

/// One metrics row per epoch. Training-set quantities are averages of the
/// minibatch estimates seen during the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub free_bits_obj: f64,
    /// Held-out importance-sampled `log p(x)`; NaN when not evaluated.
    pub logp_iwae: f64,
    pub seconds: f64,
}

/// Held-out bound and marginal-likelihood estimates with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub n: usize,
    pub vlb: f64,
    pub vlb_se: f64,
    pub logp_iwae: f64,
    pub logp_iwae_se: f64,
    pub iwae_samples: usize,
    /// Mean KL per free-bits group.
    pub group_kls: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub metrics: Vec<EpochMetrics>,
    pub evaluation: Option<Evaluation>,
}

// independent streams of one run
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_BINARIZE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_INIT: u64 = 5;

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Names the first parameter (then gradient) that is not finite.
fn non_finite_diagnostic(store: &ParamStore, loss: f64) -> Error {
    for e in store.entries() {
        if !e.value.all_finite() {
            return Error::NonFinite {
                param: e.name.clone(),
                detail: format!("value not finite; loss = {loss}"),
            };
        }
    }
    for e in store.entries() {
        if !e.grad.all_finite() {
            return Error::NonFinite {
                param: e.name.clone(),
                detail: format!("gradient not finite; loss = {loss}"),
            };
        }
    }
    let first = store
        .entries()
        .first()
        .map(|e| e.name.clone())
        .unwrap_or_default();
    Error::NonFinite {
        param: first,
        detail: format!("loss = {loss} with finite parameters and gradients"),
    }
}

/// Held-out estimates from `S` posterior draws per row: the bound is the
/// mean log weight, `log p̂` the log-mean-exp. With `S = 1` they coincide.
/// With `binarize`, rows are binarized once from `rng` first.
pub fn evaluate(
    vae: &Vae,
    store: &ParamStore,
    data: &Tensor,
    iwae_samples: usize,
    binarize: bool,
    rng: &mut Prng,
) -> Result<Evaluation> {
    let (n, obs) = data.dims2()?;
    if n == 0 || iwae_samples == 0 {
        return Err(Error::Contract(
            "evaluation needs at least one row and one sample".into(),
        ));
    }
    let x = if binarize {
        binarize_dynamic(data, rng)?
    } else {
        data.clone()
    };
    let (s, d) = (iwae_samples, vae.latent_dim());
    let k = vae.config().free_bits.groups().len();
    let (mut vlb_rows, mut iw_rows, mut group_kls) =
        (Vec::with_capacity(n), Vec::with_capacity(n), vec![0.0; k]);
    for r in 0..n {
        let xr = Tensor::from_rows(1, obs, x.row(r).to_vec())?.tile_rows(s);
        let eps = rng.normal_tensor(&[s, d]);
        let terms = vae.evaluate(store, &xr, &eps)?;
        let w: Vec<f64> = terms.iter().map(|t| t.elbo).collect();
        vlb_rows.push(w.iter().sum::<f64>() / s as f64);
        iw_rows.push(iwae_logp(&w)?);
        for t in &terms {
            for (acc, g) in group_kls.iter_mut().zip(&t.group_kls) {
                *acc += g / (n * s) as f64;
            }
        }
    }
    let (vlb, vlb_se) = mean_se(&vlb_rows);
    let (logp_iwae, logp_iwae_se) = mean_se(&iw_rows);
    Ok(Evaluation {
        n,
        vlb,
        vlb_se,
        logp_iwae,
        logp_iwae_se,
        iwae_samples,
        group_kls,
    })
}

/// Trains `vae` on the rows of `train_data`, optionally evaluating on
/// `test_data`. Parameters are updated in place.
pub fn train(
    vae: &Vae,
    store: &mut ParamStore,
    train_data: &Tensor,
    test_data: Option<&Tensor>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let (n, _) = train_data.dims2()?;
    if n == 0 || cfg.batch == 0 {
        return Err(Error::Contract(
            "training needs data and a positive batch size".into(),
        ));
    }
    let mut shuffle_rng = Prng::derive(cfg.seed, STREAM_SHUFFLE);
    let mut noise_rng = Prng::derive(cfg.seed, STREAM_NOISE);
    let mut bin_rng = Prng::derive(cfg.seed, STREAM_BINARIZE);
    let d = vae.latent_dim();

    if cfg.init_rows > 0 {
        let mut init_rng = Prng::derive(cfg.seed, STREAM_INIT);
        let mut order: Vec<usize> = (0..n).collect();
        init_rng.shuffle(&mut order);
        order.truncate(cfg.init_rows.min(n));
        let mut x = train_data.select_rows(&order)?;
        if cfg.binarize {
            x = binarize_dynamic(&x, &mut init_rng)?;
        }
        vae.data_dependent_init(store, &x, &mut init_rng)?;
    }

    let mut adam = AdamState::new(store, cfg.adam);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut evaluation = None;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut elbo, mut recon, mut kl, mut obj, mut seen) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let mut x = train_data.select_rows(chunk)?;
            if cfg.binarize {
                x = binarize_dynamic(&x, &mut bin_rng)?;
            }
            let eps = noise_rng.normal_tensor(&[chunk.len(), d]);
            let mut tape = Tape::new();
            let g = vae.forward(&mut tape, store, &x, &eps)?;
            let loss = tape.scalar(g.loss);
            tape.backward(g.loss, store)?;
            if !loss.is_finite() || store.entries().iter().any(|e| !e.grad.all_finite()) {
                return Err(non_finite_diagnostic(store, loss));
            }
            adam_step(&mut adam, store)?;
            let b = chunk.len() as f64;
            let r = tape.value(g.recon).sum() / b;
            let lp = tape.value(g.log_prior).sum() / b;
            let lq = tape.value(g.log_q).sum() / b;
            elbo += b * (r + lp - lq);
            recon += b * r;
            kl += b * (lq - lp);
            obj += b * -loss;
            seen += b;
        }
        if let Some(bad) = store.entries().iter().find(|e| !e.value.all_finite()) {
            return Err(Error::NonFinite {
                param: bad.name.clone(),
                detail: format!("value not finite after epoch {epoch}"),
            });
        }
        let last = epoch == cfg.epochs;
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        let mut logp_iwae = f64::NAN;
        if let (Some(test), true) = (test_data, last || due) {
            // same stream every time so evaluations are comparable across epochs
            let mut eval_rng = Prng::derive(cfg.seed, STREAM_EVAL);
            let e = evaluate(
                vae,
                store,
                test,
                cfg.iwae_samples,
                cfg.binarize,
                &mut eval_rng,
            )?;
            logp_iwae = e.logp_iwae;
            if last {
                evaluation = Some(e);
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            step: adam.steps_taken(),
            elbo: elbo / seen,
            recon: recon / seen,
            kl: kl / seen,
            free_bits_obj: obj / seen,
            logp_iwae,
            seconds: if cfg.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainResult {
        metrics,
        evaluation,
    })
}
