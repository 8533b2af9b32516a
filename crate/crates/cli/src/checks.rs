//! Oracle suites behind `iaflow check`. Each suite compares library code
//! against an independent computation and reports the worst discrepancy.

use std::fmt;

use iaflow::flows::{
    autoregressive_sample, build_iaf_chain, flow_log_density, flow_log_q_rows, whiten,
    BaseGaussianParams, FlowStep, IafChainConfig, IafMode, IafStep, LinearIaf, Permutation, Planar,
};
use iaflow::made::{MadeConfig, MadeNetwork};
use iaflow::model::{PosteriorKind, Vae, VaeConfig};
use iaflow::objectives::{free_bits_objective, free_bits_penalty_graph, FreeBitsConfig};
use iaflow::oracle::{self, FD_STEP};
use iaflow::{ParamStore, Prng, Result, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    /// Passes when every discrepancy is strictly below `tolerance`.
    fn below(name: &'static str, cases: usize, worst: f64, tolerance: f64) -> Self {
        SuiteReport {
            name,
            cases,
            worst,
            tolerance,
            passed: worst < tolerance,
        }
    }

    /// Passes when every discrepancy is at most `tolerance`.
    fn within(name: &'static str, cases: usize, worst: f64, tolerance: f64) -> Self {
        SuiteReport {
            passed: worst <= tolerance,
            ..Self::below(name, cases, worst, tolerance)
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} {:>6} cases  worst {:.3e}  tolerance {:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

/// NaN never compares below a tolerance, so it is kept as the worst value.
fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn randomize_heads(net: &MadeNetwork, store: &mut ParamStore, rng: &mut Prng) -> Result<()> {
    let d = net.dim();
    let m = rng.normal_tensor(&[d]);
    let s = rng.normal_tensor(&[d]);
    net.set_head_biases(store, &m, &s)
}

fn random_lower(dim: usize, rng: &mut Prng) -> Tensor {
    let mut l = Tensor::identity(dim);
    for i in 0..dim {
        for j in 0..i {
            l.data_mut()[i * dim + j] = rng.normal();
        }
    }
    l
}

/// Flow step of the given kind with random parameters, plus its context.
fn random_step(
    kind: usize,
    dim: usize,
    store: &mut ParamStore,
    rng: &mut Prng,
) -> Result<(FlowStep, Option<Tensor>)> {
    Ok(match kind {
        0 | 1 => {
            let mode = if kind == 0 {
                IafMode::Gated
            } else {
                IafMode::Affine
            };
            let cfg = MadeConfig::new(dim, vec![2 * dim, 2 * dim]).with_context(2);
            let step = IafStep::new(store, "iaf", cfg, mode, rng)?;
            randomize_heads(&step.net, store, rng)?;
            (FlowStep::Iaf(step), Some(rng.normal_tensor(&[1, 2])))
        }
        2 => (
            FlowStep::Planar(Planar::random(store, "planar", dim, 1.0, rng)?),
            None,
        ),
        3 => (
            FlowStep::LinearIaf(LinearIaf::new(store, "lin", &random_lower(dim, rng))?),
            None,
        ),
        _ => {
            let mut order: Vec<usize> = (0..dim).collect();
            rng.shuffle(&mut order);
            (FlowStep::Permutation(Permutation::new(order)?), None)
        }
    })
}

/// Analytic log-density change of every step kind against the
/// finite-difference Jacobian, `draws` random instances per kind and size.
pub fn logdet_suite(draws: usize) -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for dim in [2usize, 4, 8] {
        for draw in 0..draws {
            let mut rng = Prng::derive(draw as u64, 100 + dim as u64);
            for kind in 0..5 {
                let mut store = ParamStore::new();
                let (step, h) = random_step(kind, dim, &mut store, &mut rng)?;
                let z = rng.normal_tensor(&[1, dim]);
                let (_, delta) = step.apply(&store, &z, h.as_ref())?;
                let map = |p: &[f64]| -> Vec<f64> {
                    let zp = Tensor::from_rows(1, dim, p.to_vec()).expect("row");
                    step.apply(&store, &zp, h.as_ref())
                        .expect("step")
                        .0
                        .into_data()
                };
                // the step lowers log q by log|det J|
                let report = oracle::fd_jacobian_logdet(map, z.data(), FD_STEP, -delta[0]);
                worst = worse(worst, report.rel_error);
                cases += 1;
            }
        }
    }
    Ok(SuiteReport::below("logdet_vs_fd", cases, worst, 1e-5))
}

/// Quadrature of `exp(log q)` for IAF chains of length 0 to 3 in one and
/// two dimensions; reports the largest `|∫q − 1|`.
pub fn normalization_suite(instances: usize) -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for dim in [1usize, 2] {
        for steps in 0..=3 {
            for inst in 0..instances {
                let mut rng = Prng::derive(inst as u64, 200 + 10 * dim as u64 + steps as u64);
                let mut store = ParamStore::new();
                let chain = IafChainConfig {
                    dim,
                    steps,
                    made_hidden: vec![8, 8],
                    context_dim: 2,
                    mode: if inst % 2 == 0 {
                        IafMode::Gated
                    } else {
                        IafMode::Affine
                    },
                    reverse_between: true,
                    forget_bias: Some(rng.uniform_range(-1.0, 2.0)),
                };
                let flow = build_iaf_chain(&mut store, "f", &chain, &mut rng)?;
                let mu0 = Tensor::vector((0..dim).map(|_| 0.5 * rng.normal()).collect());
                let sigma0 =
                    Tensor::vector((0..dim).map(|_| rng.uniform_range(0.5, 1.5)).collect());
                let base = BaseGaussianParams::new(mu0, sigma0, rng.normal_tensor(&[2]))?;

                // box from the spread of samples, padded well into the tails
                let eps = rng.normal_tensor(&[4000, dim]);
                let (z, _) = flow_log_q_rows(&store, &base, &flow, &eps)?;
                let bounds: Vec<(f64, f64)> = (0..dim)
                    .map(|i| {
                        let col: Vec<f64> = (0..4000).map(|r| z.at2(r, i)).collect();
                        let m = col.iter().sum::<f64>() / col.len() as f64;
                        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                            / col.len() as f64)
                            .sqrt();
                        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        (lo - 6.0 * sd, hi + 6.0 * sd)
                    })
                    .collect();
                let points = if dim == 1 { 4001 } else { 401 };
                let mass = oracle::quadrature_normalize(
                    |pts| flow_log_density(&store, &base, &flow, pts).expect("density"),
                    &bounds,
                    points,
                );
                worst = worse(worst, (mass - 1.0).abs());
                cases += 1;
            }
        }
    }
    Ok(SuiteReport::within(
        "density_normalization",
        cases,
        worst,
        1e-3,
    ))
}

/// `whiten(autoregressive_sample(ε)) = ε` for `D = 1..=max_dim`.
pub fn roundtrip_suite(seeds: usize, max_dim: usize) -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for dim in 1..=max_dim {
        for seed in 0..seeds {
            let mut rng = Prng::derive(seed as u64, 300 + dim as u64);
            let mut store = ParamStore::new();
            let width = 2 * dim.max(3);
            let net = MadeNetwork::new(
                &mut store,
                "ar",
                MadeConfig::new(dim, vec![width, width]),
                &mut rng,
            )?;
            randomize_heads(&net, &mut store, &mut rng)?;
            let eps = rng.normal_tensor(&[dim]);
            let y = autoregressive_sample(&net, &store, &eps)?.y;
            let (back, _) = whiten(&net, &store, &y)?;
            worst = worse(worst, back.max_abs_diff(&eps));
            cases += 1;
        }
    }
    Ok(SuiteReport::below(
        "inversion_roundtrip",
        cases,
        worst,
        1e-10,
    ))
}

/// Linear-IAF density against the multivariate normal with covariance
/// `L·diag(σ²)·Lᵀ` and mean `L·µ`.
pub fn linear_iaf_suite(points: usize) -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    let per_draw = 100;
    for dim in [2usize, 3] {
        for draw in 0..points.div_ceil(per_draw) {
            let mut rng = Prng::derive(draw as u64, 400 + dim as u64);
            let mut store = ParamStore::new();
            let l = random_lower(dim, &mut rng);
            let step = LinearIaf::new(&mut store, "lin", &l)?;
            let mu: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let sigma: Vec<f64> = (0..dim).map(|_| rng.uniform_range(0.3, 2.0)).collect();
            let base = BaseGaussianParams::new(
                Tensor::vector(mu.clone()),
                Tensor::vector(sigma.clone()),
                Tensor::zeros(&[0]),
            )?;
            let mean: Vec<f64> = (0..dim)
                .map(|i| (0..dim).map(|j| l.at2(i, j) * mu[j]).sum())
                .collect();
            let cov: Vec<Vec<f64>> = (0..dim)
                .map(|i| {
                    (0..dim)
                        .map(|j| {
                            (0..dim)
                                .map(|k| l.at2(i, k) * sigma[k] * sigma[k] * l.at2(j, k))
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let n = per_draw.min(points - draw * per_draw);
            let z = rng.normal_tensor(&[n, dim]).map(|v| 3.0 * v);
            let lq = flow_log_density(&store, &base, &[FlowStep::LinearIaf(step)], &z)?;
            for (r, q) in lq.iter().enumerate() {
                let want = oracle::mvn_logpdf(z.row(r), &mean, &cov);
                worst = worse(worst, (q - want).abs());
                cases += 1;
            }
        }
    }
    Ok(SuiteReport::below(
        "linear_iaf_full_cov",
        cases,
        worst,
        1e-8,
    ))
}

fn binary_rows(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    let bits = (0..rows * cols)
        .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_rows(rows, cols, bits).expect("shape")
}

/// Bound computed with the flow posterior against the factorized prior,
/// versus the factorized posterior against the autoregressive prior.
pub fn ar_prior_suite(instances: usize) -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for inst in 0..instances {
        let mut rng = Prng::derive(inst as u64, 500);
        let dim = 2 + inst % 3;
        let posterior = match inst % 4 {
            0 => PosteriorKind::LinearIaf,
            k => PosteriorKind::Iaf {
                steps: k,
                made_hidden: vec![6, 6],
                mode: if inst % 2 == 0 {
                    IafMode::Gated
                } else {
                    IafMode::Affine
                },
            },
        };
        let mut store = ParamStore::new();
        let mut cfg = VaeConfig::mlp(5, dim, vec![6], posterior)?;
        cfg.forget_bias = rng.uniform_range(-1.0, 1.0);
        let vae = Vae::new(&mut store, cfg, &mut rng)?;
        let x = binary_rows(&mut rng, 3, 5);
        let eps = rng.normal_tensor(&[3, dim]);
        let z_terms = vae.evaluate(&store, &x, &eps)?;
        let y_terms = vae.y_space_terms(&store, &x, &eps)?;
        for (z, (recon, lp, lq)) in z_terms.iter().zip(y_terms) {
            worst = worse(worst, (z.elbo - (recon + lp - lq)).abs());
            cases += 1;
        }
    }
    Ok(SuiteReport::below(
        "ar_prior_equivalence",
        cases,
        worst,
        1e-10,
    ))
}

/// Largest relative gradient error of one tiny model; the denominator is
/// floored at 1e-3 so vanishing gradients are compared absolutely.
pub fn gradient_error(seed: u64) -> Result<f64> {
    let make = |lambda: f64| -> Result<(ParamStore, Vae)> {
        let mut store = ParamStore::new();
        let mut rng = Prng::derive(seed, 600);
        let posterior = PosteriorKind::Iaf {
            steps: 1,
            made_hidden: vec![2],
            mode: IafMode::Gated,
        };
        let mut cfg = VaeConfig::mlp(4, 2, vec![2], posterior)?;
        cfg.free_bits = FreeBitsConfig::per_dimension(lambda, 2)?;
        let vae = Vae::new(&mut store, cfg, &mut rng)?;
        Ok((store, vae))
    };
    let mut rng = Prng::derive(seed, 601);
    let x = binary_rows(&mut rng, 2, 4);
    let eps = rng.normal_tensor(&[2, 2]);

    // put λ between the two group KLs so one group is clamped and one is not
    let (store, vae) = make(0.0)?;
    let mut tape = Tape::new();
    let g = vae.forward(&mut tape, &store, &x, &eps)?;
    let kls = tape.value(g.group_kls).data().to_vec();
    let lambda = if (kls[0] - kls[1]).abs() > 1e-2 {
        (0.5 * (kls[0] + kls[1])).max(0.0)
    } else {
        0.0
    };

    let (mut store, vae) = make(lambda)?;
    let mut tape = Tape::new();
    let g = vae.forward(&mut tape, &store, &x, &eps)?;
    tape.backward(g.loss, &mut store)?;
    let numeric = oracle::fd_gradient(
        |s| {
            let mut t = Tape::new();
            let g = vae.forward(&mut t, s, &x, &eps).expect("forward");
            t.scalar(g.loss)
        },
        &store,
        FD_STEP,
    );
    let mut worst = 0.0f64;
    for (id, num) in store.ids().zip(&numeric) {
        for (a, n) in store.grad(id).data().iter().zip(num.data()) {
            worst = worse(worst, (a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

pub fn gradient_suite(seeds: usize) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worse(worst, gradient_error(seed as u64)?);
    }
    Ok(SuiteReport::below(
        "end_to_end_gradient",
        seeds,
        worst,
        1e-4,
    ))
}

/// Clamp arithmetic and the λ = 0 reduction. Identities that are exact by
/// construction must hold bit for bit; comparisons across the graph and
/// scalar code paths allow 1e-12.
pub fn free_bits_suite() -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut exact = |got: f64, want: f64| {
        if got != want {
            worst = f64::INFINITY;
        }
        cases += 1;
    };
    let cfg2 = |lambda: f64| FreeBitsConfig::per_dimension(lambda, 2);
    exact(
        free_bits_objective(-10.0, &[0.2, 0.7], &cfg2(0.5)?)?,
        -10.0 - (0.5 + 0.7),
    );
    let mut rng = Prng::new(700);
    for _ in 0..200 {
        let recon = -50.0 * rng.uniform();
        let kls = [rng.normal(), rng.normal().abs(), rng.uniform()];
        let cfg0 = FreeBitsConfig::per_dimension(0.0, 3)?;
        let plain = recon - (kls[0] + kls[1] + kls[2]);
        exact(free_bits_objective(recon, &kls, &cfg0)?, plain);
        let lambda = rng.uniform();
        let clamped = free_bits_objective(recon, &kls, &FreeBitsConfig::per_dimension(lambda, 3)?)?;
        exact(clamped.min(plain), clamped);
        let floor = kls.iter().cloned().fold(f64::INFINITY, f64::min);
        if floor >= 0.0 {
            let below =
                free_bits_objective(recon, &kls, &FreeBitsConfig::per_dimension(floor, 3)?)?;
            exact(below, plain);
        }
    }

    let mut worst_graph = 0.0f64;
    // penalty graph: value matches the scalar form, gradient vanishes below λ
    for _ in 0..50 {
        let kls = vec![rng.uniform(), rng.uniform(), rng.uniform()];
        let lambda = rng.uniform();
        let mut store = ParamStore::new();
        let id = store.add("kl", Tensor::from_rows(1, 3, kls.clone())?)?;
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let p = free_bits_penalty_graph(&mut tape, v, lambda)?;
        let want: f64 = kls.iter().map(|k| k.max(lambda)).sum();
        worst_graph = worse(worst_graph, (tape.scalar(p) - want).abs());
        tape.backward(p, &mut store)?;
        for (k, g) in kls.iter().zip(store.grad(id).data()) {
            let expect = if *k > lambda { 1.0 } else { 0.0 };
            exact(*g, expect);
        }
    }
    // λ = 0 model loss is the negated mean bound
    for seed in 0..10 {
        let mut rng = Prng::derive(seed, 701);
        let mut store = ParamStore::new();
        let post = PosteriorKind::Iaf {
            steps: 2,
            made_hidden: vec![4],
            mode: IafMode::Gated,
        };
        let vae = Vae::new(&mut store, VaeConfig::mlp(5, 3, vec![4], post)?, &mut rng)?;
        let x = binary_rows(&mut rng, 4, 5);
        let eps = rng.normal_tensor(&[4, 3]);
        let mut tape = Tape::new();
        let g = vae.forward(&mut tape, &store, &x, &eps)?;
        let terms = vae.evaluate(&store, &x, &eps)?;
        let mean_elbo = terms.iter().map(|t| t.elbo).sum::<f64>() / 4.0;
        worst_graph = worse(worst_graph, (tape.scalar(g.loss) + mean_elbo).abs());
        cases += 1;
    }
    Ok(SuiteReport::below(
        "free_bits_identities",
        cases,
        worse(worst, worst_graph),
        1e-12,
    ))
}

/// Output `i` of every MADE must be unaffected by inputs `j ≥ i`.
pub fn made_suite() -> Result<SuiteReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for dim in 1..=8usize {
        for context in [0usize, 3] {
            let mut rng = Prng::derive(dim as u64, 800 + context as u64);
            let mut store = ParamStore::new();
            let cfg = MadeConfig::new(dim, vec![dim + 3, dim + 3]).with_context(context);
            let net = MadeNetwork::new(&mut store, "made", cfg, &mut rng)?;
            let h = (context > 0).then(|| rng.normal_tensor(&[1, context]));
            let z = rng.normal_tensor(&[1, dim]);
            let (m0, s0) = net.eval(&store, &z, h.as_ref())?;
            for j in 0..dim {
                let mut zp = z.clone();
                zp.data_mut()[j] += 1.5;
                let (m1, s1) = net.eval(&store, &zp, h.as_ref())?;
                for i in 0..=j {
                    let change =
                        (m1.data()[i] - m0.data()[i]).abs() + (s1.data()[i] - s0.data()[i]).abs();
                    worst = worse(worst, change);
                    cases += 1;
                }
            }
        }
    }
    Ok(SuiteReport::within(
        "made_autoregressive",
        cases,
        worst,
        0.0,
    ))
}

/// Every suite at its full size, in a fixed order.
pub fn run_all() -> Result<Vec<SuiteReport>> {
    Ok(vec![
        made_suite()?,
        logdet_suite(100)?,
        normalization_suite(3)?,
        roundtrip_suite(50, 16)?,
        linear_iaf_suite(1000)?,
        ar_prior_suite(100)?,
        gradient_suite(10)?,
        free_bits_suite()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in [
            made_suite().unwrap(),
            logdet_suite(3).unwrap(),
            roundtrip_suite(3, 6).unwrap(),
            linear_iaf_suite(50).unwrap(),
            ar_prior_suite(8).unwrap(),
            gradient_suite(2).unwrap(),
            free_bits_suite().unwrap(),
        ] {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn nan_is_never_a_pass() {
        assert!(!SuiteReport::below("x", 1, worse(0.0, f64::NAN), 1.0).passed);
        assert!(SuiteReport::within("x", 1, 0.0, 0.0).passed);
    }
}
