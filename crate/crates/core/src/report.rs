//! CSV artifact writers with a fixed numeric format.
//!
//! Every float is rendered with six significant digits (fixed notation in a
//! comfortable range, scientific outside it), so re-running a command from
//! the same inputs reproduces each file byte for byte. Files are written
//! atomically via [`crate::checkpoint::atomic_write`]: a failure mid-run
//! never leaves a partial CSV behind.

use std::path::Path;

use crate::checkpoint::atomic_write;
use crate::erasure::TraceRow;
use crate::eval::{AblationRow, SweepRow};

pub type Result<T> = std::io::Result<T>;

const SIG_DIGITS: usize = 6;

/// Render `v` with [`SIG_DIGITS`] significant digits. Fixed notation is used
/// while the exponent stays in [-4, 5]; outside that, scientific (`1.23457e8`)
/// keeps the digit count honest. The output is locale-independent and stable
/// across platforms, which is what makes CSV reruns byte-comparable.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".to_string() } else { "-inf".to_string() };
    }
    if v == 0.0 {
        return "0.00000".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..=5).contains(&exp) {
        let prec = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        format!("{v:.prec$}")
    } else {
        let mantissa_prec = SIG_DIGITS - 1;
        format!("{v:.mantissa_prec$e}")
    }
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, render(header, rows).as_bytes())
}

/// `eval.csv`: one row per reported metric.
pub fn write_eval_csv(path: &Path, metrics: &[(&str, f64, usize, u64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|(m, v, n, s)| vec![m.to_string(), fmt_float(*v), n.to_string(), s.to_string()])
        .collect();
    write(path, &["metric", "value", "n", "seed"], &rows)
}

/// `sweep.csv`: one row per (η, seed) grid point.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![fmt_float(r.eta), r.seed.to_string(), fmt_float(r.asr), fmt_float(r.ffd)])
        .collect();
    write(path, &["eta", "seed", "asr", "ffd"], &rendered)
}

/// `ablation.csv`: one row per (configuration, seed).
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.config.clone(),
                r.seed.to_string(),
                fmt_float(r.asr),
                fmt_float(r.align_target),
                fmt_float(r.ffd_benign),
            ]
        })
        .collect();
    write(path, &["config", "seed", "asr", "align_target", "ffd_benign"], &rendered)
}

/// `trace.csv`: one row per erasure optimizer step.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                fmt_float(r.lambda_neg),
                fmt_float(r.lambda_pos),
                fmt_float(r.loss_neg),
                fmt_float(r.loss_pos),
                fmt_float(r.loss),
            ]
        })
        .collect();
    write(path, &["iter", "lambda_neg", "lambda_pos", "loss_neg", "loss_pos", "loss"], &rendered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_six_significant_digits() {
        assert_eq!(fmt_float(0.123456789), "0.123457");
        assert_eq!(fmt_float(123456.789), "123457");
        assert_eq!(fmt_float(1.0), "1.00000");
        assert_eq!(fmt_float(0.75), "0.750000");
        assert_eq!(fmt_float(-0.5), "-0.500000");
        assert_eq!(fmt_float(0.0), "0.00000");
        assert_eq!(fmt_float(98765.4321), "98765.4");
        assert_eq!(fmt_float(0.000012345678), "1.23457e-5");
        assert_eq!(fmt_float(12345678.9), "1.23457e7");
        assert_eq!(fmt_float(f64::NAN), "NaN");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn fixed_range_boundaries_stay_fixed_notation() {
        assert_eq!(fmt_float(0.000123456789), "0.000123457");
        assert_eq!(fmt_float(999999.4), "999999");
        assert_eq!(fmt_float(1e-4), "0.000100000");
        assert_eq!(fmt_float(1e6), "1.00000e6");
    }

    #[test]
    fn eval_csv_has_the_fixed_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        write_eval_csv(&path, &[("asr", 0.8125, 32, 7), ("ffd", 3.14159265, 32, 7)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "metric,value,n,seed\nasr,0.812500,32,7\nffd,3.14159,32,7\n");
    }

    #[test]
    fn sweep_and_ablation_csvs_have_their_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = dir.path().join("sweep.csv");
        write_sweep_csv(
            &sweep,
            &[SweepRow { eta: 0.25, seed: 1, asr: 0.5, ffd: 1.25 }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&sweep).unwrap(),
            "eta,seed,asr,ffd\n0.250000,1,0.500000,1.25000\n"
        );

        let ablation = dir.path().join("ablation.csv");
        write_ablation_csv(
            &ablation,
            &[AblationRow {
                config: "full".into(),
                seed: 2,
                asr: 0.0625,
                align_target: 0.875,
                ffd_benign: 2.5,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&ablation).unwrap(),
            "config,seed,asr,align_target,ffd_benign\nfull,2,0.0625000,0.875000,2.50000\n"
        );
    }

    #[test]
    fn trace_csv_round_trips_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = [
            TraceRow {
                iter: 0,
                lambda_neg: 1.0,
                lambda_pos: 0.0,
                loss_neg: 0.25,
                loss_pos: 0.0,
                loss: 0.25,
            },
            TraceRow {
                iter: 1,
                lambda_neg: 1.0,
                lambda_pos: 0.5,
                loss_neg: 0.125,
                loss_pos: 0.0625,
                loss: 0.15625,
            },
        ];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,lambda_neg,lambda_pos,loss_neg,loss_pos,loss");
        assert_eq!(lines[1], "0,1.00000,0.00000,0.250000,0.00000,0.250000");
        assert_eq!(lines[2], "1,1.00000,0.500000,0.125000,0.0625000,0.156250");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn rewriting_identical_rows_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let metrics = [("asr", 1.0 / 3.0, 16, 42)];
        write_eval_csv(&path, &metrics).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_eval_csv(&path, &metrics).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
