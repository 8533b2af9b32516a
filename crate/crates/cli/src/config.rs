//! Run configuration: flat `key = value` files plus `--key value` overrides.
//!
//! Settings that depend on the experiment (latent size, likelihood, network
//! widths, epochs, …) fall back to per-experiment defaults when unset.

use std::fmt;
use std::path::{Path, PathBuf};

use iaflow::flows::IafMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Toy4,
    Synth,
    Mnist,
    Conjugate1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorChoice {
    Diagonal,
    LinearIaf,
    Iaf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikelihoodChoice {
    Bernoulli,
    DiscretizedLogistic,
    Gaussian,
}

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Line(usize),
    Flag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub source: Option<Source>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`", self.key)?;
        match self.source {
            Some(Source::Line(n)) => write!(f, " (line {n})")?,
            Some(Source::Flag) => write!(f, " (command line)")?,
            None => {}
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub posterior: PosteriorChoice,
    pub iaf_steps: usize,
    /// Width of each MADE hidden layer.
    pub made_hidden: usize,
    pub made_layers: usize,
    pub iaf_mode: IafMode,
    pub lambda: f64,
    /// Number of free-bits groups; 0 means one per latent dimension.
    pub free_bits_groups: usize,
    pub latent_dim: usize,
    pub likelihood: LikelihoodChoice,
    /// Encoder and decoder hidden widths.
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub iwae_samples: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// Copies of the four toy points per minibatch.
    pub toy_reps: usize,
    pub mnist_train: Option<PathBuf>,
    pub mnist_test: Option<PathBuf>,
    pub out: PathBuf,
    /// Record wall-clock seconds in metrics (breaks byte-for-byte replay).
    pub timing: bool,
}

/// Every accepted key with a description of its accepted values.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "one of toy4, synth, mnist, conjugate1d"),
    ("posterior", "one of diagonal, linear_iaf, iaf"),
    ("iaf_steps", "integer >= 0"),
    ("made_hidden", "integer >= 1"),
    ("made_layers", "integer >= 1"),
    ("iaf_mode", "one of gated, affine, location_only"),
    ("lambda", "number >= 0"),
    (
        "free_bits_groups",
        "integer >= 0 (0 = one group per latent dimension), dividing latent_dim",
    ),
    ("latent_dim", "integer >= 1"),
    (
        "likelihood",
        "one of bernoulli, discretized_logistic, gaussian",
    ),
    ("hidden", "comma-separated integers >= 1, or `none`"),
    ("lr", "number > 0"),
    ("batch", "integer >= 1"),
    ("epochs", "integer >= 1"),
    ("seed", "integer >= 0"),
    ("iwae_samples", "integer >= 1"),
    ("n_train", "integer >= 1"),
    ("n_test", "integer >= 1"),
    ("data_seed", "integer >= 0"),
    ("toy_reps", "integer >= 1"),
    ("mnist_train", "path to an IDX image file"),
    ("mnist_test", "path to an IDX image file"),
    ("out", "output directory"),
    ("timing", "true or false"),
];

fn accepted(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, a)| a)
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = RunConfig {
            experiment,
            posterior: PosteriorChoice::Iaf,
            iaf_steps: 2,
            made_hidden: 32,
            made_layers: 2,
            iaf_mode: IafMode::Gated,
            lambda: 0.0,
            free_bits_groups: 0,
            latent_dim: 8,
            likelihood: LikelihoodChoice::Bernoulli,
            hidden: vec![64],
            lr: 1e-3,
            batch: 32,
            epochs: 30,
            seed: 0,
            iwae_samples: 128,
            n_train: 2000,
            n_test: 500,
            data_seed: 1,
            toy_reps: 8,
            mnist_train: None,
            mnist_test: None,
            out: PathBuf::from("out"),
            timing: false,
        };
        match experiment {
            Experiment::Synth => {}
            Experiment::Mnist => {
                c.latent_dim = 32;
                c.hidden = vec![256];
                c.made_hidden = 256;
                c.epochs = 10;
                c.batch = 100;
                c.n_train = 60000;
                c.n_test = 10000;
            }
            Experiment::Toy4 => {
                c.latent_dim = 2;
                c.likelihood = LikelihoodChoice::Gaussian;
                c.hidden = vec![32, 32];
                c.epochs = 10000;
                c.iwae_samples = 1000;
            }
            Experiment::Conjugate1d => {
                c.latent_dim = 1;
                c.likelihood = LikelihoodChoice::Gaussian;
                c.posterior = PosteriorChoice::Diagonal;
                c.hidden = Vec::new();
                c.n_train = 8;
                c.n_test = 8;
                c.batch = 8;
                c.epochs = 3000;
                c.lr = 1e-2;
            }
        }
        c
    }

    /// Parses file text (if any) and then the overrides, in that order.
    pub fn parse(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String, Source)> = Vec::new();
        if let Some(text) = file {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(ConfigError {
                        key: line.to_string(),
                        source: Some(Source::Line(i + 1)),
                        message: "expected `key = value`".into(),
                    });
                };
                entries.push((
                    k.trim().to_string(),
                    v.trim().to_string(),
                    Source::Line(i + 1),
                ));
            }
        }
        entries.extend(
            overrides
                .iter()
                .map(|(k, v)| (k.clone(), v.clone(), Source::Flag)),
        );

        for (k, _, src) in &entries {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(ConfigError {
                    key: k.clone(),
                    source: Some(src.clone()),
                    message: "unknown key".into(),
                });
            }
        }
        // the experiment picks the defaults, so it is resolved first
        let mut experiment = Experiment::Synth;
        for (k, v, src) in &entries {
            if k == "experiment" {
                experiment = parse_enum(
                    k,
                    v,
                    src,
                    &[
                        ("toy4", Experiment::Toy4),
                        ("synth", Experiment::Synth),
                        ("mnist", Experiment::Mnist),
                        ("conjugate1d", Experiment::Conjugate1d),
                    ],
                )?;
            }
        }
        let mut cfg = RunConfig::defaults(experiment);
        let mut latent_set = None;
        for (k, v, src) in &entries {
            cfg.set(k, v, src)?;
            if k == "latent_dim" {
                latent_set = Some(src.clone());
            }
        }
        cfg.validate(latent_set)?;
        Ok(cfg)
    }

    /// Reads and parses a config file, then applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError {
                key: "config".into(),
                source: None,
                message: format!("cannot read {}: {e}", p.display()),
            })?),
            None => None,
        };
        Self::parse(text.as_deref(), overrides)
    }

    fn set(&mut self, key: &str, value: &str, src: &Source) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError {
            key: key.to_string(),
            source: Some(src.clone()),
            message: format!("{message}; accepted: {}", accepted(key)),
        };
        let int = |min: usize| -> Result<usize, ConfigError> {
            let n: usize = value
                .parse()
                .map_err(|_| err(format!("`{value}` is not an integer")))?;
            if n < min {
                return Err(err(format!("{n} is out of range")));
            }
            Ok(n)
        };
        let seed = || -> Result<u64, ConfigError> {
            value
                .parse()
                .map_err(|_| err(format!("`{value}` is not an integer")))
        };
        let num = |positive: bool| -> Result<f64, ConfigError> {
            let x: f64 = value
                .parse()
                .map_err(|_| err(format!("`{value}` is not a number")))?;
            let ok = x.is_finite() && if positive { x > 0.0 } else { x >= 0.0 };
            if !ok {
                return Err(err(format!("{value} is out of range")));
            }
            Ok(x)
        };
        match key {
            "experiment" => {}
            "posterior" => {
                self.posterior = parse_enum(
                    key,
                    value,
                    src,
                    &[
                        ("diagonal", PosteriorChoice::Diagonal),
                        ("linear_iaf", PosteriorChoice::LinearIaf),
                        ("iaf", PosteriorChoice::Iaf),
                    ],
                )?
            }
            "iaf_steps" => self.iaf_steps = int(0)?,
            "made_hidden" => self.made_hidden = int(1)?,
            "made_layers" => self.made_layers = int(1)?,
            "iaf_mode" => {
                self.iaf_mode = parse_enum(
                    key,
                    value,
                    src,
                    &[
                        ("gated", IafMode::Gated),
                        ("affine", IafMode::Affine),
                        ("location_only", IafMode::LocationOnly),
                    ],
                )?
            }
            "lambda" => self.lambda = num(false)?,
            "free_bits_groups" => self.free_bits_groups = int(0)?,
            "latent_dim" => self.latent_dim = int(1)?,
            "likelihood" => {
                self.likelihood = parse_enum(
                    key,
                    value,
                    src,
                    &[
                        ("bernoulli", LikelihoodChoice::Bernoulli),
                        (
                            "discretized_logistic",
                            LikelihoodChoice::DiscretizedLogistic,
                        ),
                        ("gaussian", LikelihoodChoice::Gaussian),
                    ],
                )?
            }
            "hidden" => {
                self.hidden = if value == "none" || value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| match w.trim().parse::<usize>() {
                            Ok(n) if n >= 1 => Ok(n),
                            _ => Err(err(format!("`{w}` is not a positive width"))),
                        })
                        .collect::<Result<_, _>>()?
                }
            }
            "lr" => self.lr = num(true)?,
            "batch" => self.batch = int(1)?,
            "epochs" => self.epochs = int(1)?,
            "seed" => self.seed = seed()?,
            "iwae_samples" => self.iwae_samples = int(1)?,
            "n_train" => self.n_train = int(1)?,
            "n_test" => self.n_test = int(1)?,
            "data_seed" => self.data_seed = seed()?,
            "toy_reps" => self.toy_reps = int(1)?,
            "mnist_train" => self.mnist_train = Some(PathBuf::from(value)),
            "mnist_test" => self.mnist_test = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "timing" => {
                self.timing = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(err(format!("`{value}` is not a boolean"))),
                }
            }
            _ => unreachable!("keys are checked before assignment"),
        }
        Ok(())
    }

    fn validate(&self, latent_src: Option<Source>) -> Result<(), ConfigError> {
        let fail = |key: &str, source: Option<Source>, message: String| ConfigError {
            key: key.into(),
            source,
            message: format!("{message}; accepted: {}", accepted(key)),
        };
        let fixed = match self.experiment {
            Experiment::Toy4 => Some(2),
            Experiment::Conjugate1d => Some(1),
            _ => None,
        };
        if let Some(d) = fixed {
            if self.latent_dim != d {
                return Err(fail(
                    "latent_dim",
                    latent_src,
                    format!("this experiment has a {d}-dimensional latent"),
                ));
            }
        }
        let k = self.free_bits_groups;
        if k > 0 && (k > self.latent_dim || self.latent_dim % k != 0) {
            return Err(fail(
                "free_bits_groups",
                None,
                format!("{k} groups do not divide latent_dim {}", self.latent_dim),
            ));
        }
        if self.experiment == Experiment::Mnist && self.mnist_train.is_none() {
            return Err(fail(
                "mnist_train",
                None,
                "required by the mnist experiment".into(),
            ));
        }
        Ok(())
    }
}

fn parse_enum<T: Copy>(
    key: &str,
    value: &str,
    src: &Source,
    options: &[(&str, T)],
) -> Result<T, ConfigError> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| ConfigError {
            key: key.to_string(),
            source: Some(src.clone()),
            message: format!("`{value}` is not valid; accepted: {}", accepted(key)),
        })
}

/// Splits `--key value` pairs; `--key=value` is accepted too.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(ConfigError {
                key: a.clone(),
                source: Some(Source::Flag),
                message: "expected `--key value`".into(),
            });
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| ConfigError {
            key: flag.to_string(),
            source: Some(Source::Flag),
            message: "missing value".into(),
        })?;
        out.push((flag.to_string(), v.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn file_values_and_comments() {
        let c = RunConfig::parse(Some("# run\niaf_steps = 2 # two\n\nlambda=0.5\n"), &[]).unwrap();
        assert_eq!(c.iaf_steps, 2);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.experiment, Experiment::Synth);
    }

    #[test]
    fn flag_overrides_file() {
        let c = RunConfig::parse(Some("iaf_steps = 2\n"), &ov(&[("iaf_steps", "4")])).unwrap();
        assert_eq!(c.iaf_steps, 4);
    }

    #[test]
    fn range_error_names_key_and_line() {
        let e = RunConfig::parse(Some("seed = 1\nlambda = -1\n"), &[]).unwrap_err();
        assert_eq!(e.key, "lambda");
        assert_eq!(e.source, Some(Source::Line(2)));
        let msg = e.to_string();
        assert!(
            msg.contains("`lambda`") && msg.contains("line 2") && msg.contains(">= 0"),
            "{msg}"
        );
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            RunConfig::parse(Some("learning_rate = 1\n"), &[])
                .unwrap_err()
                .key,
            "learning_rate"
        );
        assert_eq!(
            RunConfig::parse(Some("iaf_steps 2\n"), &[])
                .unwrap_err()
                .source,
            Some(Source::Line(1))
        );
        assert_eq!(
            RunConfig::parse(None, &ov(&[("posterior", "full")]))
                .unwrap_err()
                .key,
            "posterior"
        );
        assert_eq!(
            RunConfig::parse(None, &ov(&[("epochs", "0")]))
                .unwrap_err()
                .key,
            "epochs"
        );
        assert_eq!(
            RunConfig::parse(None, &ov(&[("lr", "nan")]))
                .unwrap_err()
                .key,
            "lr"
        );
    }

    #[test]
    fn experiment_defaults_and_checks() {
        let c = RunConfig::parse(None, &ov(&[("experiment", "toy4")])).unwrap();
        assert_eq!(
            (c.latent_dim, c.likelihood),
            (2, LikelihoodChoice::Gaussian)
        );
        let e = RunConfig::parse(Some("latent_dim = 3\nexperiment = toy4\n"), &[]).unwrap_err();
        assert_eq!(
            (e.key.as_str(), e.source),
            ("latent_dim", Some(Source::Line(1)))
        );
        let e = RunConfig::parse(None, &ov(&[("latent_dim", "6"), ("free_bits_groups", "4")]))
            .unwrap_err();
        assert_eq!(e.key, "free_bits_groups");
        assert_eq!(
            RunConfig::parse(None, &ov(&[("experiment", "mnist")]))
                .unwrap_err()
                .key,
            "mnist_train"
        );
    }

    #[test]
    fn override_syntax() {
        let args: Vec<String> = ["--seed", "7", "--hidden=16,16"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = parse_overrides(&args).unwrap();
        assert_eq!(pairs, ov(&[("seed", "7"), ("hidden", "16,16")]));
        let c = RunConfig::parse(None, &pairs).unwrap();
        assert_eq!(c.hidden, vec![16, 16]);
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
        assert!(parse_overrides(&["seed".to_string()]).is_err());
    }
}
