//! Delimited metric tables built from metric report JSON.

use codtox_core::metrics::MetricReport;

/// Column order of the summary table.
pub const METRIC_COLUMNS: [&str; 6] =
    ["macro_f1", "accuracy", "hamming_loss", "macro_auroc", "micro_auroc", "macro_average_precision"];

/// One row per report: model, dataset, n, split fingerprint, then each
/// metric. With `precision` a metric is one `point (low-high)` cell rounded
/// to that many decimals; without it, three full-precision columns whose
/// values parse back to the JSON numbers exactly.
pub fn summary_table(reports: &[MetricReport], delimiter: u8, precision: Option<usize>) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "dataset".into(), "n_cases".into(), "split_fingerprint".into()];
    for m in METRIC_COLUMNS {
        match precision {
            Some(_) => header.push(m.to_string()),
            None => header.extend([m.to_string(), format!("{m}_low"), format!("{m}_high")]),
        }
    }
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        let mut row = vec![
            r.model.clone(),
            r.dataset.to_string(),
            r.n_cases.to_string(),
            r.split_fingerprint.clone().unwrap_or_default(),
        ];
        for m in METRIC_COLUMNS {
            let ci = r.metrics.get(m);
            match (precision, ci) {
                (Some(p), Some(c)) => row.push(format!("{:.p$} ({:.p$}-{:.p$})", c.point, c.low, c.high)),
                (Some(_), None) => row.push(String::new()),
                (None, Some(c)) => row.extend([c.point.to_string(), c.low.to_string(), c.high.to_string()]),
                (None, None) => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
