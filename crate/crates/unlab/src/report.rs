//! Report emission: JSON (stable schema, byte-deterministic) and a CSV
//! table with one method per row in the reference column order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use unlab_core::eval::EvalReport;
use unlab_core::unlearn::{TrainLog, UnlearnLog};

use crate::{RunError, RunResult};

/// Context rows (original / retrained raw accuracies) written alongside a
/// method row so a report file reads like one table.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ContextRow {
    pub method: String,
    pub fa: f64,
    pub ra: f64,
    pub tfa: f64,
    pub tra: f64,
    pub knn: Vec<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ReportFile {
    pub config_hash: String,
    pub seed: u64,
    pub original: ContextRow,
    pub retrained: ContextRow,
    pub report: EvalReport,
}

pub fn write_report_json(report: &ReportFile, path: &Path) -> RunResult<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| RunError::Runtime(format!("encode report: {e}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> RunResult<ReportFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RunError::Runtime(format!("decode report: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "--".into())
}

/// One table: Original and Retrained context rows plus the method row,
/// columns ordered method, FA, RA, TFA, TRA, k-NN acc (gap)..., CKA, |IDI|,
/// H-Mean, probe-recovered TFA.
pub fn write_report_csv(report: &ReportFile, path: &Path) -> RunResult<()> {
    let knn_cols = report.report.knn.len();
    let mut out = String::new();
    write!(out, "method,fa,ra,tfa,tra").unwrap();
    for i in 0..knn_cols {
        write!(out, ",knn{i}_acc,knn{i}_gap").unwrap();
    }
    writeln!(out, ",cka,idi_abs,h_mean,probe_recovered_tfa").unwrap();

    let context = |row: &ContextRow, cka: &str, idi: &str, out: &mut String| {
        write!(out, "{},{},{},{},{}", row.method, row.fa, row.ra, row.tfa, row.tra).unwrap();
        for i in 0..knn_cols {
            let acc = row.knn.get(i).copied().unwrap_or(f64::NAN);
            write!(out, ",{acc},--").unwrap();
        }
        writeln!(out, ",{cka},{idi},--,--").unwrap();
    };
    context(&report.original, "100", "1", &mut out);
    context(&report.retrained, "--", "0", &mut out);

    let r = &report.report;
    write!(out, "{},{},{},{},{}", r.method, r.fa, r.ra, r.tfa, r.tra).unwrap();
    for e in &r.knn {
        write!(out, ",{},{}", e.accuracy, e.gap).unwrap();
    }
    writeln!(
        out,
        ",{},{},{},{}",
        r.cka,
        r.idi.abs(),
        fmt_opt(r.h_mean),
        r.probe_recovered_tfa
    )
    .unwrap();

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loss log of the layer-wise loop: epoch, step, per-point CU and CE, total.
pub fn write_unlearn_losses_csv(log: &UnlearnLog, path: &Path) -> RunResult<()> {
    let mut out = String::new();
    write!(out, "epoch,step").unwrap();
    for p in &log.points {
        write!(out, ",cu_{p}").unwrap();
    }
    for p in &log.points {
        write!(out, ",ce_{p}").unwrap();
    }
    writeln!(out, ",total").unwrap();
    for row in &log.rows {
        write!(out, "{},{}", row.epoch, row.step).unwrap();
        for v in &row.cu {
            write!(out, ",{v}").unwrap();
        }
        for v in &row.ce {
            match v {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => write!(out, ",").unwrap(),
            }
        }
        writeln!(out, ",{}", row.total).unwrap();
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Plain training loss log: epoch, step, loss.
pub fn write_train_losses_csv(log: &TrainLog, path: &Path) -> RunResult<()> {
    let mut out = String::from("epoch,step,loss\n");
    for (epoch, step, loss) in &log.rows {
        writeln!(out, "{epoch},{step},{loss}").unwrap();
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
