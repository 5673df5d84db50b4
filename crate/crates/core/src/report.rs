//! CSV exports. Numbers use Rust's shortest round-trip formatting, `.` as the
//! decimal separator and LF line endings, so identical runs give identical
//! bytes.

use std::path::Path;

use crate::diagnostics::{FeatureProjection, PcReport};
use crate::error::{PegoError, Result};
use crate::trainer::{AblationRow, HistoryRow, LodoResult, RunRecord, SweepResult};

pub const HISTORY_HEADER: [&str; 6] = [
    "iter",
    "loss_cls",
    "loss_preserve",
    "loss_diversify",
    "loss_or",
    "val_acc",
];
pub const SUMMARY_HEADER: [&str; 4] = ["test_domain", "seed", "accuracy", "selected_iter"];

fn to_csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    to_csv(
        HISTORY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.iter.to_string(),
                r.loss_cls.to_string(),
                r.loss_preserve.to_string(),
                r.loss_diversify.to_string(),
                r.loss_or.to_string(),
                r.val_acc.map_or_else(String::new, |v| v.to_string()),
            ]
        }),
    )
}

pub fn summary_csv(records: &[RunRecord]) -> String {
    to_csv(
        SUMMARY_HEADER,
        records.iter().map(|r| {
            vec![
                r.test_name.clone(),
                r.seed.to_string(),
                r.accuracy.to_string(),
                r.selected_iter.to_string(),
            ]
        }),
    )
}

/// Per-domain mean and standard error, then the overall average.
pub fn lodo_csv(result: &LodoResult) -> String {
    let mut rows: Vec<Vec<String>> = result
        .per_domain
        .iter()
        .map(|d| vec![d.name.clone(), d.mean.to_string(), d.stderr.to_string()])
        .collect();
    rows.push(vec![
        "average".into(),
        result.average.to_string(),
        result.average_stderr().to_string(),
    ]);
    to_csv(["test_domain", "mean", "stderr"], rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let on = |b: bool| if b { "on" } else { "off" }.to_string();
    to_csv(
        ["method", "preserve", "diversify", "group_n", "alpha", "mean", "stderr"],
        rows.iter().map(|r| {
            let method = if r.label == "LoRA" { "LoRA" } else { "PEGO" };
            vec![
                method.to_string(),
                on(r.preserve),
                on(r.diversify),
                r.group_n.to_string(),
                r.alpha.to_string(),
                r.mean.to_string(),
                r.stderr.to_string(),
            ]
        }),
    )
}

pub fn sweep_csv(result: &SweepResult) -> String {
    to_csv(
        ["group_n", "mean_val_acc", "mean_test_acc", "selected"],
        result.rows.iter().map(|r| {
            vec![
                r.group_n.to_string(),
                r.mean_val_acc.to_string(),
                r.mean_test_acc.to_string(),
                (r.group_n == result.selected).to_string(),
            ]
        }),
    )
}

pub fn pc_evr_csv(report: &PcReport) -> String {
    to_csv(
        ["component", "evr"],
        report
            .evr_top_k
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}

pub fn pc_cosine_csv(report: &PcReport) -> String {
    let m = &report.pc_cosine;
    to_csv(
        ["i", "j", "abs_cos"],
        (0..m.rows())
            .flat_map(|i| (0..m.cols()).map(move |j| vec![i.to_string(), j.to_string(), m[(i, j)].to_string()])),
    )
}

pub fn feature_proj_csv(p: &FeatureProjection) -> String {
    to_csv(
        ["model_tag", "label", "x", "y"],
        p.points.iter().map(|q| {
            vec![
                q.model_tag.clone(),
                q.label.to_string(),
                q.x.to_string(),
                q.y.to_string(),
            ]
        }),
    )
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| PegoError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PegoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_format() {
        let rows = [
            HistoryRow {
                iter: 1,
                loss_cls: 1.5,
                loss_preserve: 0.0,
                loss_diversify: 0.25,
                loss_or: 0.25,
                val_acc: None,
            },
            HistoryRow {
                iter: 2,
                loss_cls: 1.0,
                loss_preserve: 1e-7,
                loss_diversify: 0.0,
                loss_or: 1e-7,
                val_acc: Some(0.5),
            },
        ];
        assert_eq!(
            history_csv(&rows),
            "iter,loss_cls,loss_preserve,loss_diversify,loss_or,val_acc\n1,1.5,0,0.25,0.25,\n2,1,0.0000001,0,0.0000001,0.5\n"
        );
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
