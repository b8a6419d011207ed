//! Frame-level precision, recall and F1 over key presses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{PianoState, PianoStateTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Metrics {
    /// Rates from counts. Empty denominators give precision or recall 1.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, tp, fp, fn_ }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Counts TP/FP/FN over every (key, frame) cell. The pedal is ignored.
pub fn compute_metrics(pressed: &[PianoState], goal: &[PianoState]) -> Result<Metrics> {
    if pressed.len() != goal.len() {
        return Err(Error::input(format!(
            "pressed has {} frames but goal has {}",
            pressed.len(),
            goal.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pressed.iter().zip(goal) {
        let both = p.key_mask() & g.key_mask();
        tp += both.count_ones() as u64;
        fp += (p.key_mask() & !both).count_ones() as u64;
        fn_ += (g.key_mask() & !both).count_ones() as u64;
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

pub fn compute_metrics_traj(pressed: &PianoStateTrajectory, goal: &PianoStateTrajectory) -> Result<Metrics> {
    compute_metrics(&pressed.frames, &goal.frames)
}

/// One row per song plus a final pooled row, columns `song,precision,recall,f1,tp,fp,fn`.
pub fn metrics_table_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("song,precision,recall,f1,tp,fp,fn\n");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (song, m) in rows {
        out.push_str(&format!(
            "{song},{:.6},{:.6},{:.6},{},{},{}\n",
            m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        ));
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    let all = Metrics::from_counts(tp, fp, fn_);
    out.push_str(&format!(
        "ALL,{:.6},{:.6},{:.6},{},{},{}\n",
        all.precision, all.recall, all.f1, all.tp, all.fp, all.fn_
    ));
    out
}
