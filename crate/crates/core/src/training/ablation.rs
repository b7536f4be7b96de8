use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::metrics::Metrics;
use super::trainer::{evaluate, train, EpochRecord};
use crate::encoding::Example;
use crate::error::{Error, Result};
use crate::layer::AblationMode;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub metrics: Metrics,
    pub best_epoch: usize,
}

/// Trains every ablation mode with otherwise identical settings.
///
/// Each mode is scored on `test` when given, else on the validation metrics
/// of its selected epoch.
pub fn run_ablations(
    train_data: &[Example],
    val: Option<&[Example]>,
    test: Option<&[Example]>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(AblationMode::ALL.len());
    for mode in AblationMode::ALL {
        let run_cfg = TrainConfig { mode, ..cfg.clone() };
        let out = train(train_data, val, &run_cfg)?;
        let metrics = match (test, out.val_metrics) {
            (Some(t), _) => evaluate(t, &out.checkpoint, mode)?,
            (None, Some(m)) => m,
            (None, None) => {
                return Err(Error::Data(
                    "ablation needs a test set or a nonempty validation split".into(),
                ))
            }
        };
        let row = AblationRow {
            mode,
            metrics,
            best_epoch: out.best_epoch,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Markdown table with accuracy and macro-F1 as percentages.
pub fn ablation_report(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Model | Acc. | F1 |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} |",
            r.mode.report_label(),
            100.0 * r.metrics.accuracy,
            100.0 * r.metrics.macro_f1
        );
    }
    s
}

/// Writes the epoch history as CSV, preceded by a `# mode=… seed=…` line.
pub fn write_metrics_csv(path: impl AsRef<Path>, history: &[EpochRecord], mode: AblationMode, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("# mode={mode} seed={seed}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["epoch", "split", "loss", "accuracy", "macro_f1"])
            .map_err(csv_err)?;
        for r in history {
            w.write_record([
                r.epoch.to_string(),
                r.split.as_str().to_string(),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.macro_f1),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
