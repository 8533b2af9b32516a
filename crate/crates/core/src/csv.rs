//! CSV emitters for training metrics, posterior samples and evaluations.
//!
//! Numbers use nine significant digits in the style of C's `%.9g`; lines end
//! with `\n`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{EpochMetrics, Evaluation};

pub const METRICS_HEADER: &str = "epoch,step,elbo,recon,kl,free_bits_obj,logp_iwae,seconds";
pub const EVAL_HEADER: &str = "n,vlb,vlb_se,logp_iwae,logp_iwae_se,iwae_samples";

/// Formats like `%.9g`: shortest of fixed or exponent notation, trailing
/// zeros removed.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let cells = [
            r.epoch.to_string(),
            r.step.to_string(),
            fmt_g9(r.elbo),
            fmt_g9(r.recon),
            fmt_g9(r.kl),
            fmt_g9(r.free_bits_obj),
            fmt_g9(r.logp_iwae),
            fmt_g9(r.seconds),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// One posterior draw for one datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub datapoint: usize,
    pub sample_idx: usize,
    pub z: Vec<f64>,
}

/// Header `datapoint,sample_idx,z1,…,zD`; `D` is taken from the first row
/// (two when empty).
pub fn samples_csv(rows: &[SampleRow]) -> Result<String> {
    let d = rows.first().map_or(2, |r| r.z.len());
    let mut out = String::from("datapoint,sample_idx");
    for i in 1..=d {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for r in rows {
        if r.z.len() != d {
            return Err(Error::shape("samples_csv", &[r.z.len()], &[d]));
        }
        out.push_str(&format!("{},{}", r.datapoint, r.sample_idx));
        for v in &r.z {
            out.push(',');
            out.push_str(&fmt_g9(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn eval_csv(e: &Evaluation) -> String {
    format!(
        "{EVAL_HEADER}\n{},{},{},{},{},{}\n",
        e.n,
        fmt_g9(e.vlb),
        fmt_g9(e.vlb_se),
        fmt_g9(e.logp_iwae),
        fmt_g9(e.logp_iwae_se),
        e.iwae_samples
    )
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    write(path, &metrics_csv(rows))
}

pub fn write_samples_csv(path: &Path, rows: &[SampleRow]) -> Result<()> {
    write(path, &samples_csv(rows)?)
}

pub fn write_eval_csv(path: &Path, e: &Evaluation) -> Result<()> {
    write(path, &eval_csv(e))
}

fn parse_cell<T: std::str::FromStr>(cell: &str, line: usize) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse `{cell}`")))
}

/// Reads back a file produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let ln = i + 2;
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 8 {
                return Err(Error::Format(format!(
                    "line {ln}: expected 8 fields, found {}",
                    c.len()
                )));
            }
            Ok(EpochMetrics {
                epoch: parse_cell(c[0], ln)?,
                step: parse_cell(c[1], ln)?,
                elbo: parse_cell(c[2], ln)?,
                recon: parse_cell(c[3], ln)?,
                kl: parse_cell(c[4], ln)?,
                free_bits_obj: parse_cell(c[5], ln)?,
                logp_iwae: parse_cell(c[6], ln)?,
                seconds: parse_cell(c[7], ln)?,
            })
        })
        .collect()
}

/// Reads back a file produced by [`samples_csv`].
pub fn parse_samples_csv(text: &str) -> Result<Vec<SampleRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty samples CSV".into()))?;
    if !header.starts_with("datapoint,sample_idx") {
        return Err(Error::Format("samples CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let ln = i + 2;
            let c: Vec<&str> = line.split(',').collect();
            if c.len() < 3 {
                return Err(Error::Format(format!("line {ln}: too few fields")));
            }
            Ok(SampleRow {
                datapoint: parse_cell(c[0], ln)?,
                sample_idx: parse_cell(c[1], ln)?,
                z: c[2..]
                    .iter()
                    .map(|v| parse_cell(v, ln))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_c_printf() {
        let cases = [
            (1.0, "1"),
            (-0.5, "-0.5"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (std::f64::consts::PI, "3.14159265"),
            (-79.1, "-79.1"),
            (2.0 / 3.0, "0.666666667"),
            (1e100, "1e+100"),
            (9.9999999996, "10"),
            (f64::NAN, "nan"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g9(x), want, "{x}");
        }
    }

    fn row(epoch: usize, elbo: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            step: 63 * epoch as u64,
            elbo,
            recon: elbo - 2.5,
            kl: 2.5,
            free_bits_obj: elbo - 0.125,
            logp_iwae: if epoch == 2 { -40.0 } else { f64::NAN },
            seconds: 0.0,
        }
    }

    #[test]
    fn empty_metrics_is_header_only() {
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        assert_eq!(samples_csv(&[]).unwrap(), "datapoint,sample_idx,z1,z2\n");
    }

    #[test]
    fn metrics_golden() {
        let golden = "epoch,step,elbo,recon,kl,free_bits_obj,logp_iwae,seconds\n\
                      1,63,-45.1234567891,-47.6234567891,2.5,-45.2484567891,nan,0\n\
                      2,126,-41,-43.5,2.5,-41.125,-40,0\n";
        let text = metrics_csv(&[row(1, -45.123456789123), row(2, -41.0)]);
        // nine significant digits
        assert_eq!(
            text.lines().nth(1).unwrap().split(',').nth(2),
            Some("-45.1234568")
        );
        let golden = golden.replace(
            "-45.1234567891,-47.6234567891,2.5,-45.2484567891",
            "-45.1234568,-47.6234568,2.5,-45.2484568",
        );
        assert_eq!(text, golden);
    }

    #[test]
    fn round_trip_to_nine_digits() {
        let rows = vec![row(1, -123.456789012345), row(2, 1e-7)];
        let back = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert!(((a.elbo - b.elbo) / a.elbo).abs() < 5e-9);
            assert_eq!(a.step, b.step);
        }
        let s = vec![SampleRow {
            datapoint: 3,
            sample_idx: 1,
            z: vec![0.1, -2.0],
        }];
        assert_eq!(parse_samples_csv(&samples_csv(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn write_error_names_path() {
        let err = write_metrics_csv(Path::new("/nonexistent-dir/m.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/m.csv"));
    }
}
