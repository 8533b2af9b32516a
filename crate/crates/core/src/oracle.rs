//! Brute-force verifiers.
//!
//! Everything here works on plain `f64` slices with its own linear algebra
//! (LU with partial pivoting, Cholesky, Jacobi eigenvalues). None of it calls
//! into the tape, the flows, or the objectives it is used to check.

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Outcome of a finite-difference log-determinant check.
#[derive(Clone, Debug)]
pub struct JacobianReport {
    /// Row-major `D × D` numeric Jacobian, `jacobian[i][j] = ∂f_i/∂x_j`.
    pub jacobian: Vec<Vec<f64>>,
    /// `log|det J|`, or `-inf` when the numeric Jacobian is singular.
    pub numeric_log_det: f64,
    pub analytic_log_det: f64,
    /// `|analytic − numeric| / max(1, |numeric|)`.
    pub rel_error: f64,
    pub singular: bool,
}

/// Central-difference Jacobian of `map` at `point`.
pub fn fd_jacobian<F>(mut map: F, point: &[f64], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let d_in = point.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_in);
    let mut x = point.to_vec();
    for j in 0..d_in {
        x[j] = point[j] + step;
        let plus = map(&x);
        x[j] = point[j] - step;
        let minus = map(&x);
        x[j] = point[j];
        cols.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * step))
                .collect(),
        );
    }
    let d_out = cols.first().map_or(0, |c| c.len());
    (0..d_out)
        .map(|i| (0..d_in).map(|j| cols[j][i]).collect())
        .collect()
}

/// Checks an analytic `log|det ∂map/∂x|` against the numeric Jacobian.
pub fn fd_jacobian_logdet<F>(
    map: F,
    point: &[f64],
    step: f64,
    analytic_log_det: f64,
) -> JacobianReport
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let jacobian = fd_jacobian(map, point, step);
    let (numeric_log_det, singular) = match lu_log_abs_det(&jacobian) {
        Some(v) => (v, false),
        None => (f64::NEG_INFINITY, true),
    };
    let rel_error = if singular {
        f64::INFINITY
    } else {
        (analytic_log_det - numeric_log_det).abs() / numeric_log_det.abs().max(1.0)
    };
    JacobianReport {
        jacobian,
        numeric_log_det,
        analytic_log_det,
        rel_error,
        singular,
    }
}

/// `log|det A|` by LU decomposition with partial pivoting; `None` if singular.
pub fn lu_log_abs_det(a: &[Vec<f64>]) -> Option<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut log_det = 0.0;
    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, m[i][k].abs()))
            .fold(
                (k, -1.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if pivot == 0.0 || !pivot.is_finite() {
            return None;
        }
        m.swap(k, p);
        log_det += m[k][k].abs().ln();
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    Some(log_det)
}

/// Central-difference gradient of `loss` with respect to every scalar in
/// `params`, returned in store order.
pub fn fd_gradient<F>(mut loss: F, params: &ParamStore, step: f64) -> Vec<Tensor>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = params.clone();
    let ids: Vec<_> = params.ids().collect();
    ids.iter()
        .map(|&id| {
            let n = params.value(id).len();
            let mut grad = Tensor::zeros(params.value(id).shape());
            for k in 0..n {
                let orig = params.value(id).data()[k];
                work.value_mut(id).data_mut()[k] = orig + step;
                let plus = loss(&work);
                work.value_mut(id).data_mut()[k] = orig - step;
                let minus = loss(&work);
                work.value_mut(id).data_mut()[k] = orig;
                grad.data_mut()[k] = (plus - minus) / (2.0 * step);
            }
            grad
        })
        .collect()
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h })
        .collect()
}

/// Trapezoidal integral of `exp(log_density)` over an axis-aligned box, D ∈ {1, 2}.
///
/// `log_density` receives batches of points as `[n, D]` tensors and returns
/// one log-density per row.
pub fn quadrature_normalize<F>(mut log_density: F, bounds: &[(f64, f64)], points: usize) -> f64
where
    F: FnMut(&Tensor) -> Vec<f64>,
{
    assert!(points >= 2, "need at least two grid points");
    let grid = |(lo, hi): (f64, f64)| -> (Vec<f64>, Vec<f64>) {
        let h = (hi - lo) / (points - 1) as f64;
        let xs = (0..points).map(|i| lo + h * i as f64).collect();
        (xs, trapezoid_weights(points, h))
    };
    match bounds {
        [b] => {
            let (xs, ws) = grid(*b);
            let pts = Tensor::from_rows(points, 1, xs).expect("grid");
            let lp = log_density(&pts);
            lp.iter().zip(&ws).map(|(l, w)| w * l.exp()).sum()
        }
        [bx, by] => {
            let (xs, wx) = grid(*bx);
            let (ys, wy) = grid(*by);
            let mut total = 0.0;
            for (i, &x) in xs.iter().enumerate() {
                let mut row = Vec::with_capacity(2 * points);
                for &y in &ys {
                    row.push(x);
                    row.push(y);
                }
                let pts = Tensor::from_rows(points, 2, row).expect("grid");
                let lp = log_density(&pts);
                let line: f64 = lp.iter().zip(&wy).map(|(l, w)| w * l.exp()).sum();
                total += wx[i] * line;
            }
            total
        }
        _ => panic!("quadrature_normalize supports D = 1 or 2"),
    }
}

/// `∫ q log(q / p)` over `[lo, hi]` by the trapezoidal rule.
pub fn quadrature_kl_1d<Q, P>(log_q: Q, log_p: P, lo: f64, hi: f64, points: usize) -> f64
where
    Q: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    let h = (hi - lo) / (points - 1) as f64;
    trapezoid_weights(points, h)
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let x = lo + h * i as f64;
            let lq = log_q(x);
            let q = lq.exp();
            if q == 0.0 {
                0.0
            } else {
                w * q * (lq - log_p(x))
            }
        })
        .sum()
}

/// Diagonal-Gaussian log-density, written out term by term.
pub fn diag_gaussian_logpdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let r = (x[i] - mu[i]) / sigma[i];
        acc += -0.5 * r * r - sigma[i].ln() - 0.5 * LN_2PI;
    }
    acc
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Full-covariance Gaussian log-density via Cholesky and a forward solve.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let l = cholesky(cov).expect("covariance must be positive definite");
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (x[i] - mean[i] - s) / l[i][i];
    }
    let quad: f64 = y.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..n).map(|i| 2.0 * l[i][i].ln()).sum();
    -0.5 * (quad + log_det + n as f64 * LN_2PI)
}

/// Empirical mean and (biased) covariance of the rows of `samples`.
pub fn empirical_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n);
    (mean, cov)
}

/// Result of comparing sample moments with expected ones.
#[derive(Clone, Debug)]
pub struct MomentReport {
    pub mean_z: Vec<f64>,
    /// Row-major z-scores of the covariance entries.
    pub cov_z: Vec<Vec<f64>>,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// Draws `n` samples and checks mean and covariance against 3-standard-error
/// bands computed from the expected Gaussian moments.
pub fn sample_moment_check<S>(
    mut sampler: S,
    mean: &[f64],
    cov: &[Vec<f64>],
    n: usize,
) -> MomentReport
where
    S: FnMut() -> Vec<f64>,
{
    assert!(n >= 10_000, "moment checks need at least 1e4 draws");
    let samples: Vec<Vec<f64>> = (0..n).map(|_| sampler()).collect();
    let (m, c) = empirical_moments(&samples);
    let d = mean.len();
    let nf = n as f64;
    let mean_z: Vec<f64> = (0..d)
        .map(|i| (m[i] - mean[i]) / (cov[i][i] / nf).sqrt())
        .collect();
    let cov_z: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let se = ((cov[i][i] * cov[j][j] + cov[i][j] * cov[i][j]) / nf).sqrt();
                    (c[i][j] - cov[i][j]) / se
                })
                .collect()
        })
        .collect();
    let max_abs_z = mean_z
        .iter()
        .chain(cov_z.iter().flatten())
        .fold(0.0f64, |a, z| a.max(z.abs()));
    MomentReport {
        mean_z,
        cov_z,
        max_abs_z,
        pass: max_abs_z <= 3.0,
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// 2-Wasserstein distance between the Gaussian with the samples' empirical
/// moments and the standard normal:
/// `W₂² = ‖m‖² + tr C + D − 2 tr C^{1/2}`.
pub fn w2_to_standard_normal(samples: &[Vec<f64>]) -> f64 {
    let (m, c) = empirical_moments(samples);
    let d = m.len() as f64;
    let trace: f64 = (0..m.len()).map(|i| c[i][i]).sum();
    let trace_sqrt: f64 = symmetric_eigenvalues(&c)
        .iter()
        .map(|&e| e.max(0.0).sqrt())
        .sum();
    let w2sq = m.iter().map(|v| v * v).sum::<f64>() + trace + d - 2.0 * trace_sqrt;
    w2sq.max(0.0).sqrt()
}

/// Log of the mean of `exp(values)`, computed by a direct shifted sum.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}
