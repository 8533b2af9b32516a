//! Turning a [`RunConfig`] into data, a model, and files on disk.

use std::path::Path;

use iaflow::checkpoint;
use iaflow::csv::{self, SampleRow};
use iaflow::data::{self, gen_synthetic_digits, gen_toy4, SynthOptions, DIGIT_SIDE, TOY_SIGMA_OBS};
use iaflow::model::{DecoderKind, PosteriorKind, Vae, VaeConfig};
use iaflow::objectives::{FreeBitsConfig, LikelihoodModel};
use iaflow::oracle::w2_to_standard_normal;
use iaflow::train::{self, AdamConfig, EpochMetrics, Evaluation, TrainConfig};
use iaflow::{Error, ParamStore, Prng, Result, Tensor};

use crate::config::{Experiment, LikelihoodChoice, PosteriorChoice, RunConfig};

// seed streams used here; the trainer owns 1 to 5
const STREAM_MODEL: u64 = 0;
const STREAM_EVAL: u64 = 4;
const STREAM_POSTERIOR: u64 = 6;
const STREAM_PRIOR: u64 = 7;

/// Initial log-scale of the discretized logistic likelihood.
pub const DL_INIT_LOG_SCALE: f64 = -2.0;
/// Observation noise for Gaussian likelihoods on image data.
pub const IMAGE_SIGMA_OBS: f64 = 0.1;
/// Decoder weight and noise of the one-dimensional conjugate model.
pub const CONJ_A: f64 = 1.0;
pub const CONJ_SIGMA: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Tensor,
    pub test: Tensor,
    pub binarize: bool,
    /// Side length when observations are square images.
    pub image_side: Option<usize>,
}

fn quantize_256(x: &Tensor) -> Tensor {
    x.map(|v| (v * 256.0).floor().clamp(0.0, 255.0) / 256.0)
}

fn take_rows(x: &Tensor, n: usize) -> Result<Tensor> {
    let rows: Vec<usize> = (0..n.min(x.shape()[0])).collect();
    x.select_rows(&rows)
}

/// Draws `n` observations from the conjugate model's marginal `N(0, a² + σ²)`.
pub fn conjugate1d_data(n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = Prng::new(seed);
    let sd = (CONJ_A * CONJ_A + CONJ_SIGMA * CONJ_SIGMA).sqrt();
    Tensor::from_rows(n, 1, (0..n).map(|_| sd * rng.normal()).collect())
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let image_data = |train: Tensor, test: Tensor, side: usize| -> Prepared {
        let (train, test) = match cfg.likelihood {
            LikelihoodChoice::DiscretizedLogistic => (quantize_256(&train), quantize_256(&test)),
            _ => (train, test),
        };
        Prepared {
            train,
            test,
            binarize: cfg.likelihood == LikelihoodChoice::Bernoulli,
            image_side: Some(side),
        }
    };
    Ok(match cfg.experiment {
        Experiment::Synth => {
            let train = gen_synthetic_digits(cfg.n_train, cfg.data_seed, SynthOptions::default())?;
            let test = gen_synthetic_digits(
                cfg.n_test,
                cfg.data_seed.wrapping_add(1),
                SynthOptions::default(),
            )?;
            image_data(train.items, test.items, DIGIT_SIDE)
        }
        Experiment::Mnist => {
            let path = cfg
                .mnist_train
                .as_deref()
                .ok_or_else(|| Error::Contract("the mnist experiment needs mnist_train".into()))?;
            let full = data::idx_load(path)?;
            let (train, test) = match &cfg.mnist_test {
                Some(p) => (full.items, data::idx_load(p)?.items),
                None => {
                    let keep = full.len().saturating_sub(cfg.n_test.min(full.len() / 2));
                    let (a, b) = full.split(keep)?;
                    (a.items, b.items)
                }
            };
            let side = (train.shape()[1] as f64).sqrt().round() as usize;
            let side = (side * side == train.shape()[1]).then_some(side);
            let mut p = image_data(
                take_rows(&train, cfg.n_train)?,
                take_rows(&test, cfg.n_test)?,
                0,
            );
            p.image_side = side;
            p
        }
        Experiment::Toy4 => {
            let toy = gen_toy4();
            let idx: Vec<usize> = (0..4 * cfg.toy_reps).map(|i| i % 4).collect();
            Prepared {
                train: toy.items.select_rows(&idx)?,
                test: toy.items,
                binarize: false,
                image_side: None,
            }
        }
        Experiment::Conjugate1d => {
            let x = conjugate1d_data(cfg.n_train, cfg.data_seed)?;
            Prepared {
                train: x.clone(),
                test: x,
                binarize: false,
                image_side: None,
            }
        }
    })
}

pub fn posterior_kind(cfg: &RunConfig) -> PosteriorKind {
    match cfg.posterior {
        PosteriorChoice::Diagonal => PosteriorKind::Diagonal,
        PosteriorChoice::LinearIaf => PosteriorKind::LinearIaf,
        PosteriorChoice::Iaf => PosteriorKind::Iaf {
            steps: cfg.iaf_steps,
            made_hidden: vec![cfg.made_hidden; cfg.made_layers],
            mode: cfg.iaf_mode,
        },
    }
}

pub fn vae_config(cfg: &RunConfig, obs_dim: usize) -> Result<VaeConfig> {
    let d = cfg.latent_dim;
    let mut v = VaeConfig::mlp(obs_dim, d, cfg.hidden.clone(), posterior_kind(cfg))?;
    v.free_bits = match cfg.free_bits_groups {
        0 => FreeBitsConfig::per_dimension(cfg.lambda, d)?,
        k => FreeBitsConfig::contiguous(cfg.lambda, d, k)?,
    };
    let gaussian_sigma = match cfg.experiment {
        Experiment::Toy4 => TOY_SIGMA_OBS,
        Experiment::Conjugate1d => CONJ_SIGMA,
        _ => IMAGE_SIGMA_OBS,
    };
    v.likelihood = match cfg.likelihood {
        LikelihoodChoice::Bernoulli => LikelihoodModel::Bernoulli,
        LikelihoodChoice::DiscretizedLogistic => LikelihoodModel::DiscretizedLogistic {
            log_scale: DL_INIT_LOG_SCALE,
        },
        LikelihoodChoice::Gaussian => LikelihoodModel::Gaussian {
            sigma: gaussian_sigma,
        },
    };
    if cfg.experiment == Experiment::Conjugate1d {
        v.decoder = DecoderKind::FixedLinear {
            a: Tensor::matrix(&[&[CONJ_A]]),
        };
    }
    Ok(v)
}

/// Fresh model with parameters drawn from the run seed.
pub fn build_model(cfg: &RunConfig, obs_dim: usize) -> Result<(ParamStore, Vae)> {
    let mut store = ParamStore::new();
    let mut rng = Prng::derive(cfg.seed, STREAM_MODEL);
    let vae = Vae::new(&mut store, vae_config(cfg, obs_dim)?, &mut rng)?;
    Ok((store, vae))
}

pub fn train_config(cfg: &RunConfig, binarize: bool) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
        binarize,
        iwae_samples: cfg.iwae_samples,
        record_time: cfg.timing,
        ..TrainConfig::default()
    }
}

/// A trained model with its history.
pub struct TrainedRun {
    pub vae: Vae,
    pub store: ParamStore,
    pub data: Prepared,
    pub metrics: Vec<EpochMetrics>,
    pub evaluation: Evaluation,
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainedRun> {
    let data = prepare_data(cfg)?;
    let (mut store, vae) = build_model(cfg, data.train.shape()[1])?;
    let result = train::train(
        &vae,
        &mut store,
        &data.train,
        Some(&data.test),
        &train_config(cfg, data.binarize),
    )?;
    let evaluation = result
        .evaluation
        .ok_or_else(|| Error::Contract("training finished without an evaluation".into()))?;
    Ok(TrainedRun {
        vae,
        store,
        data,
        metrics: result.metrics,
        evaluation,
    })
}

/// Posterior draws for the first `rows` test points, `per_row` each.
pub fn posterior_sample_rows(
    run: &TrainedRun,
    seed: u64,
    rows: usize,
    per_row: usize,
) -> Result<Vec<SampleRow>> {
    let mut rng = Prng::derive(seed, STREAM_POSTERIOR);
    let n = rows.min(run.data.test.shape()[0]);
    let d = run.vae.latent_dim();
    let mut out = Vec::with_capacity(n * per_row);
    for i in 0..n {
        let mut x = run.data.test.row(i).to_vec();
        if run.data.binarize {
            x = data::binarize_dynamic(&Tensor::vector(x), &mut rng)?
                .data()
                .to_vec();
        }
        let eps = rng.normal_tensor(&[per_row, d]);
        let z = run.vae.posterior_samples(&run.store, &x, &eps)?;
        out.extend((0..per_row).map(|k| SampleRow {
            datapoint: i,
            sample_idx: k,
            z: z.row(k).to_vec(),
        }));
    }
    Ok(out)
}

/// Decoder means of `n` draws from the prior.
pub fn prior_samples(vae: &Vae, store: &ParamStore, seed: u64, n: usize) -> Result<Tensor> {
    let mut rng = Prng::derive(seed, STREAM_PRIOR);
    let z = rng.normal_tensor(&[n, vae.latent_dim()]);
    vae.decode_mean(store, &z)
}

pub fn samples_table(x: &Tensor) -> Result<String> {
    let (n, d) = x.dims2()?;
    let mut out = String::from("sample_idx");
    for j in 1..=d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&i.to_string());
        for v in x.row(i) {
            out.push(',');
            out.push_str(&csv::fmt_g9(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a decoded prior-sample grid (`samples.csv`, plus `samples.pgm`
/// for image data).
pub fn write_prior_samples(
    dir: &Path,
    vae: &Vae,
    store: &ParamStore,
    seed: u64,
    side: Option<usize>,
) -> Result<()> {
    let x = prior_samples(vae, store, seed, 64)?;
    write_text(&dir.join("samples.csv"), &samples_table(&x)?)?;
    if let Some(side) = side {
        data::write_pgm(&dir.join("samples.pgm"), &x, side, 8)?;
    }
    Ok(())
}

/// Number of test points whose posterior draws are exported, and draws per point.
pub const EXPORT_ROWS: usize = 8;
pub const EXPORT_SAMPLES: usize = 500;

/// `metrics.csv`, `eval.csv`, `ckpt.txt`, `posterior_samples.csv`, and the
/// prior sample grid.
pub fn write_run(dir: &Path, cfg: &RunConfig, run: &TrainedRun) -> Result<Vec<SampleRow>> {
    create_dir(dir)?;
    csv::write_metrics_csv(&dir.join("metrics.csv"), &run.metrics)?;
    csv::write_eval_csv(&dir.join("eval.csv"), &run.evaluation)?;
    checkpoint::save(&dir.join("ckpt.txt"), &run.store)?;
    let rows = posterior_sample_rows(run, cfg.seed, EXPORT_ROWS, EXPORT_SAMPLES)?;
    csv::write_samples_csv(&dir.join("posterior_samples.csv"), &rows)?;
    write_prior_samples(dir, &run.vae, &run.store, cfg.seed, run.data.image_side)?;
    Ok(rows)
}

/// Rebuilds the configured model and loads its checkpoint.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(ParamStore, Vae, Prepared)> {
    let data = prepare_data(cfg)?;
    let (mut store, vae) = build_model(cfg, data.train.shape()[1])?;
    checkpoint::load(ckpt, &mut store)?;
    Ok((store, vae, data))
}

/// Held-out VLB and `log p̂` with the configured number of samples.
pub fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Evaluation> {
    let (store, vae, data) = load_model(cfg, ckpt)?;
    let mut rng = Prng::derive(cfg.seed, STREAM_EVAL);
    train::evaluate(
        &vae,
        &store,
        &data.test,
        cfg.iwae_samples,
        data.binarize,
        &mut rng,
    )
}

/// One posterior family of the toy comparison.
#[derive(Clone, Debug)]
pub struct ToyVariant {
    pub name: &'static str,
    pub evaluation: Evaluation,
    /// Distance of the pooled posterior draws of all four points to `N(0, I)`.
    pub w2: f64,
    pub metrics: Vec<EpochMetrics>,
}

pub const TOY_SUMMARY_HEADER: &str = "posterior,final_elbo,final_elbo_se,logp_iwae,w2_to_prior";

/// Trains the diagonal and the IAF posterior on the four toy points and
/// writes each run under `out/diagonal` and `out/iaf`.
pub fn run_toy(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<ToyVariant>> {
    let mut variants = Vec::new();
    let mut summary = format!("{TOY_SUMMARY_HEADER}\n");
    for (name, posterior) in [
        ("diagonal", PosteriorChoice::Diagonal),
        ("iaf", PosteriorChoice::Iaf),
    ] {
        let mut c = cfg.clone();
        c.experiment = Experiment::Toy4;
        c.posterior = posterior;
        let run = run_training(&c)?;
        let rows = match out {
            Some(dir) => write_run(&dir.join(name), &c, &run)?,
            None => posterior_sample_rows(&run, c.seed, EXPORT_ROWS, EXPORT_SAMPLES)?,
        };
        let pooled: Vec<Vec<f64>> = rows.into_iter().map(|r| r.z).collect();
        let v = ToyVariant {
            name,
            w2: w2_to_standard_normal(&pooled),
            evaluation: run.evaluation,
            metrics: run.metrics,
        };
        summary.push_str(&format!(
            "{name},{},{},{},{}\n",
            csv::fmt_g9(v.evaluation.vlb),
            csv::fmt_g9(v.evaluation.vlb_se),
            csv::fmt_g9(v.evaluation.logp_iwae),
            csv::fmt_g9(v.w2)
        ));
        variants.push(v);
    }
    if let Some(dir) = out {
        write_text(&dir.join("toy_summary.csv"), &summary)?;
    }
    Ok(variants)
}
