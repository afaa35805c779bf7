//! Report files: one summary row per evaluated model and the ROC curve.

use std::path::Path;

use densenet_core::metrics::MetricsReport;

use crate::error::{io_err, Result};

/// `model,auc_roc,accuracy,n`; the AUC cell is empty when only one class was
/// present.
pub fn report_csv(model: &str, report: &MetricsReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let auc = report.auc_roc.map(|a| a.to_string()).unwrap_or_default();
    w.write_record(["model", "auc_roc", "accuracy", "n"]).expect("in-memory write");
    w.write_record([model, &auc, &report.accuracy.to_string(), &report.n_samples.to_string()])
        .expect("in-memory write");
    w.into_inner().expect("in-memory write")
}

/// `fpr,tpr`, one row per curve point; header only without a curve.
pub fn roc_csv(report: &MetricsReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fpr", "tpr"]).expect("in-memory write");
    for p in report.curve.iter().flat_map(|c| &c.points) {
        w.write_record([p.fpr.to_string(), p.tpr.to_string()]).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_report(path: &Path, model: &str, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, report_csv(model, report)).map_err(io_err(path))
}

pub fn write_roc(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, roc_csv(report)).map_err(io_err(path))
}
