use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::spec::TaskKind;

/// One annotation of one utterance, for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub utterance: usize,
    pub position: usize,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    /// With no predictions and no gold every score is 1.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                tp,
                fp,
                fn_,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_category: BTreeMap<TaskKind, PrecisionRecall>,
    pub micro: PrecisionRecall,
}

/// Exact-position matching per category, pooled for the micro average.
pub fn f1_micro(predicted: &[Label], gold: &[Label], categories: &[TaskKind]) -> F1Report {
    let pred: BTreeSet<Label> = predicted.iter().copied().collect();
    let gold: BTreeSet<Label> = gold.iter().copied().collect();
    let mut per_category = BTreeMap::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for &k in categories {
        let p: BTreeSet<&Label> = pred.iter().filter(|l| l.kind == k).collect();
        let g: BTreeSet<&Label> = gold.iter().filter(|l| l.kind == k).collect();
        let tp = p.intersection(&g).count();
        let fp = p.len() - tp;
        let fn_ = g.len() - tp;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_category.insert(k, PrecisionRecall::from_counts(tp, fp, fn_));
    }
    F1Report {
        per_category,
        micro: PrecisionRecall::from_counts(tp_all, fp_all, fn_all),
    }
}
