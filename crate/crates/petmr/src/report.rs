//! CSV and graymap outputs.
//!
//! Metrics CSV columns are `sample_id,method,mae_ct_hu,mae_pet_au`, one row
//! per (method, sample). A summary block follows, each line starting with
//! `#`:
//!
//! ```text
//! # aggregate,<method>,<n>,<ct_mean>,<ct_std>,<pet_mean>,<pet_std>
//! # ttest,<method>,<against>,<metric>,<t>,<p>,<n>,<degenerate>,<pairing>
//! # zscore,population_std,sigma_floor=<floor>
//! ```
//!
//! Standard deviations in aggregates are sample standard deviations. Floats
//! are written in shortest round-trip form.

use std::io::Write as _;
use std::path::Path;

use petmr_core::eval::{
    ComparisonTest, MethodAggregate, MetricsReport, MetricsRow, SamplingStudy, TTest,
    SIGMA_FLOOR,
};
use petmr_core::training::IterationLog;
use petmr_core::{Image2D, Modality};

use crate::error::{Error, Result};
use crate::store;

pub const METRICS_HEADER: [&str; 4] = ["sample_id", "method", "mae_ct_hu", "mae_pet_au"];

pub fn metrics_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    if report.rows.is_empty() {
        return Err(Error::usage("metrics report has no rows"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::usage(e.to_string());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.sample_id.to_string(),
            r.method.clone(),
            r.mae_ct_hu.to_string(),
            r.mae_pet_au.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let mut out = w.into_inner().map_err(|e| Error::usage(e.to_string()))?;
    for a in &report.aggregates {
        writeln!(
            out,
            "# aggregate,{},{},{},{},{},{}",
            a.method, a.n, a.ct_mean, a.ct_std, a.pet_mean, a.pet_std
        )
        .expect("in-memory write");
    }
    for t in &report.tests {
        writeln!(
            out,
            "# ttest,{},{},{},{},{},{},{},{}",
            t.method,
            t.against,
            t.metric,
            t.test.t,
            t.test.p,
            t.test.n,
            t.test.degenerate,
            t.pairing
        )
        .expect("in-memory write");
    }
    writeln!(out, "# zscore,population_std,sigma_floor={SIGMA_FLOOR}").expect("in-memory write");
    Ok(out)
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    store::write(path, &metrics_csv(report)?)
}

/// Parses a metrics CSV and checks its aggregates against its rows.
pub fn parse_metrics(bytes: &[u8], path: &Path) -> Result<MetricsReport> {
    let bad = |m: String| Error::format(path, m);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(bytes);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| bad(format!("bad number `{}`", &rec[i])))
        };
        rows.push(MetricsRow {
            sample_id: rec[0].parse().map_err(|_| bad(format!("bad sample id `{}`", &rec[0])))?,
            method: rec[1].to_string(),
            mae_ct_hu: num(2)?,
            mae_pet_au: num(3)?,
        });
    }
    let text = std::str::from_utf8(bytes).map_err(|_| bad("not UTF-8".into()))?;
    let mut aggregates = Vec::new();
    let mut tests = Vec::new();
    for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number `{s}`"))) };
        match f[0] {
            "aggregate" if f.len() == 7 => aggregates.push(MethodAggregate {
                method: f[1].into(),
                n: f[2].parse().map_err(|_| bad(format!("bad count `{}`", f[2])))?,
                ct_mean: num(f[3])?,
                ct_std: num(f[4])?,
                pet_mean: num(f[5])?,
                pet_std: num(f[6])?,
            }),
            "ttest" if f.len() >= 9 => tests.push(ComparisonTest {
                method: f[1].into(),
                against: f[2].into(),
                metric: f[3].into(),
                test: TTest {
                    t: num(f[4])?,
                    p: num(f[5])?,
                    n: f[6].parse().map_err(|_| bad(format!("bad count `{}`", f[6])))?,
                    mean_difference: f64::NAN,
                    degenerate: f[7] == "true",
                },
                pairing: f[8..].join(","),
            }),
            "zscore" => {}
            _ => return Err(bad(format!("unrecognized summary line `# {line}`"))),
        }
    }
    let report = MetricsReport {
        rows,
        aggregates,
        tests,
    };
    report
        .check_aggregates(1e-12)
        .map_err(|e| bad(e.to_string()))?;
    Ok(report)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    parse_metrics(&store::read(path)?, path)
}

/// Per-iteration training log: `iteration,lr,loss,ct_term,metric_term,
/// val_loss,wins_h0,...`. `val_loss` is empty except at validation points.
pub fn training_log_csv(log: &[IterationLog], validation: &[(usize, f64)], heads: usize) -> Vec<u8> {
    let mut out = String::from("iteration,lr,loss,ct_term,metric_term,val_loss");
    for j in 0..heads {
        out.push_str(&format!(",wins_h{j}"));
    }
    out.push('\n');
    let mut val = validation.iter().peekable();
    if let Some(&&(0, v)) = val.peek() {
        out.push_str(&format!("0,,,,,{v}{}\n", ",".repeat(heads)));
        val.next();
    }
    for row in log {
        let v = match val.peek() {
            Some(&&(it, v)) if it == row.iteration => {
                val.next();
                v.to_string()
            }
            _ => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            row.iteration, row.lr, row.loss, row.ct_term, row.metric_term, v
        ));
        for j in 0..heads {
            out.push_str(&format!(",{}", row.wins.get(j).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Sampling comparison summary as `key,value` CSV.
pub fn sampling_csv(study: &SamplingStudy, mh: &str, mc: &str) -> Vec<u8> {
    let rows = [
        ("slices", study.slices.to_string()),
        ("mh_method", mh.to_string()),
        ("mc_method", mc.to_string()),
        ("mean_median_abs_z_mh", study.mean_median_abs_z_mh.to_string()),
        ("mean_median_abs_z_mc", study.mean_median_abs_z_mc.to_string()),
        ("mean_median_variance_mh", study.mean_median_variance_mh.to_string()),
        ("mean_median_variance_mc", study.mean_median_variance_mc.to_string()),
        ("t", study.test.t.to_string()),
        ("p", study.test.p.to_string()),
        ("degenerate", study.test.degenerate.to_string()),
        ("zscore_std", "population".to_string()),
        ("sigma_floor", SIGMA_FLOOR.to_string()),
    ];
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out.into_bytes()
}

/// Fixed linear display window per panel kind, so dumps of different runs
/// compare directly.
pub fn window(panel: &str, modality: Modality) -> (f64, f64, &'static str) {
    match (panel, modality) {
        (_, Modality::CtHu) => (-1000.0, 2000.0, "HU"),
        (_, Modality::Mr) => (0.0, 1.0, "a.u."),
        (_, Modality::Pet) => (0.0, 400.0, "a.u."),
        (_, Modality::Mask) => (0.0, 1.0, "mask"),
        (_, Modality::MuMap) => (0.0, 0.2, "1/cm"),
        ("ct_residual", _) => (-1000.0, 1000.0, "HU"),
        ("zscore" | "abs_z", _) => (-5.0, 5.0, "z"),
        ("variance", _) => (0.0, 400.0, "a.u.^2"),
        _ => (-50.0, 50.0, "a.u."),
    }
}

/// Binary graymap (P5, max value 65535, big-endian samples) with the display
/// window in a header comment.
pub fn pgm_bytes(img: &Image2D, lo: f64, hi: f64, unit: &str) -> Vec<u8> {
    let mut out = format!(
        "P5\n# window {lo} {hi} {unit}, linear, clipped\n{} {}\n65535\n",
        img.width(),
        img.height()
    )
    .into_bytes();
    for &v in img.data() {
        let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        let q = (t * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(dir: &Path, sample: u64, method: &str, panel: &str, img: &Image2D) -> Result<()> {
    let (lo, hi, unit) = window(panel, img.modality());
    let name = format!("{sample}_{method}_{panel}.pgm");
    store::write(&dir.join(name), &pgm_bytes(img, lo, hi, unit))
}
