//! Multi-label evaluation: average precision, macro and micro
//! precision/recall/F1 under a 0.5 threshold or a top-k restriction.
//!
//! The counting kernels are generic over [`Field`] so an exact rational type
//! can be used as an oracle; [`MetricReport`] carries the `f64` values that
//! are logged and serialized.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Field;

/// Per-image class scores in `[0, 1]` and binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<T> {
    scores: Vec<Vec<T>>,
    truths: Vec<Vec<bool>>,
}

impl<T: Field> PredictionSet<T> {
    pub fn new(scores: Vec<Vec<T>>, truths: Vec<Vec<bool>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Domain("prediction set has no images".into()));
        }
        if scores.len() != truths.len() {
            return Err(Error::dim("truth rows", scores.len(), truths.len()));
        }
        let c = scores[0].len();
        if c == 0 {
            return Err(Error::Domain("prediction set has no classes".into()));
        }
        for (s, t) in scores.iter().zip(&truths) {
            if s.len() != c {
                return Err(Error::dim("score vector length", c, s.len()));
            }
            if t.len() != c {
                return Err(Error::dim("truth vector length", c, t.len()));
            }
            if let Some(bad) = s.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
                return Err(Error::Domain(format!("score {bad:?} outside [0, 1]")));
            }
        }
        Ok(Self { scores, truths })
    }

    /// Builds truths from per-image label lists.
    pub fn from_labels(scores: Vec<Vec<T>>, labels: &[Vec<usize>]) -> Result<Self> {
        let c = scores.first().map_or(0, Vec::len);
        let mut truths = Vec::with_capacity(labels.len());
        for ls in labels {
            let mut row = vec![false; c];
            for &l in ls {
                *row.get_mut(l).ok_or(Error::dim("label index bound", c, l + 1))? = true;
            }
            truths.push(row);
        }
        Self::new(scores, truths)
    }

    pub fn num_images(&self) -> usize {
        self.scores.len()
    }

    pub fn num_classes(&self) -> usize {
        self.scores[0].len()
    }

    pub fn scores(&self) -> &[Vec<T>] {
        &self.scores
    }

    pub fn truths(&self) -> &[Vec<bool>] {
        &self.truths
    }

    fn column(&self, j: usize) -> (Vec<T>, Vec<bool>) {
        (
            self.scores.iter().map(|s| s[j].clone()).collect(),
            self.truths.iter().map(|t| t[j]).collect(),
        )
    }

    fn positives(&self, j: usize) -> usize {
        self.truths.iter().filter(|t| t[j]).count()
    }
}

fn ratio<T: Field>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::count(num) / T::count(den)
    }
}

/// `2PR / (P + R)`, zero when both vanish.
pub fn f1<T: Field>(p: T, r: T) -> T {
    let s = p.clone() + r.clone();
    if s == T::zero() {
        T::zero()
    } else {
        (T::one() + T::one()) * p * r / s
    }
}

/// All-points average precision. `None` when the class has no positives.
///
/// Images are ranked by descending score, ties by ascending index.
pub fn average_precision<T: Field>(scores: &[T], truths: &[bool]) -> Option<T> {
    let positives = truths.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0;
    let mut sum = T::zero();
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum = sum + ratio::<T>(hits, rank + 1);
        }
    }
    Some(sum / T::count(positives))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary<T> {
    pub map: T,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<T>>,
    pub excluded: Vec<usize>,
}

pub fn mean_average_precision<T: Field>(preds: &PredictionSet<T>) -> Result<ApSummary<T>> {
    let per_class: Vec<Option<T>> = (0..preds.num_classes())
        .map(|j| {
            let (s, t) = preds.column(j);
            average_precision(&s, &t)
        })
        .collect();
    let included: Vec<T> = per_class.iter().flatten().cloned().collect();
    if included.is_empty() {
        return Err(Error::Domain("no class has a positive ground truth".into()));
    }
    let n = included.len();
    let map = included.into_iter().fold(T::zero(), |a, b| a + b) / T::count(n);
    let excluded = per_class
        .iter()
        .enumerate()
        .filter_map(|(j, ap)| ap.is_none().then_some(j))
        .collect();
    Ok(ApSummary {
        map,
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Positive iff `score ≥ 0.5`.
    Threshold,
    /// The `k` highest scores per image.
    TopK(usize),
}

/// Exactly `min(k, c)` positives: highest scores, ties by ascending class.
pub fn top_k_restrict<T: Field>(scores: &[T], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![false; scores.len()];
    for &j in order.iter().take(k) {
        out[j] = true;
    }
    out
}

pub fn decisions<T: Field>(preds: &PredictionSet<T>, rule: DecisionRule) -> Vec<Vec<bool>> {
    preds
        .scores
        .iter()
        .map(|s| match rule {
            DecisionRule::Threshold => s.iter().map(|v| *v >= T::half()).collect(),
            DecisionRule::TopK(k) => top_k_restrict(s, k),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn class_tallies<T: Field>(preds: &PredictionSet<T>, rule: DecisionRule) -> Vec<Tally> {
    let mut out = vec![Tally::default(); preds.num_classes()];
    for (d, t) in decisions(preds, rule).iter().zip(&preds.truths) {
        for (tally, (&pred, &truth)) in out.iter_mut().zip(d.iter().zip(t)) {
            match (pred, truth) {
                (true, true) => tally.tp += 1,
                (true, false) => tally.fp += 1,
                (false, true) => tally.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

/// Macro average over classes with at least one positive.
pub fn per_class_prf<T: Field>(preds: &PredictionSet<T>, rule: DecisionRule) -> Prf<T> {
    let tallies = class_tallies(preds, rule);
    let mut p = T::zero();
    let mut r = T::zero();
    let mut n = 0;
    for (j, t) in tallies.iter().enumerate() {
        if preds.positives(j) == 0 {
            continue;
        }
        p = p + ratio::<T>(t.tp, t.tp + t.fp);
        r = r + ratio::<T>(t.tp, t.tp + t.fn_);
        n += 1;
    }
    if n > 0 {
        p = p / T::count(n);
        r = r / T::count(n);
    }
    Prf {
        f1: f1(p.clone(), r.clone()),
        precision: p,
        recall: r,
    }
}

/// Micro average: counts pooled over every class and image.
pub fn overall_prf<T: Field>(preds: &PredictionSet<T>, rule: DecisionRule) -> Prf<T> {
    let t = class_tallies(preds, rule).into_iter().fold(Tally::default(), |a, b| Tally {
        tp: a.tp + b.tp,
        fp: a.fp + b.fp,
        fn_: a.fn_ + b.fn_,
    });
    let p = ratio::<T>(t.tp, t.tp + t.fp);
    let r = ratio::<T>(t.tp, t.tp + t.fn_);
    Prf {
        f1: f1(p.clone(), r.clone()),
        precision: p,
        recall: r,
    }
}

/// The six threshold metrics for one decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfBlock<T> {
    #[serde(rename = "CP")]
    pub cp: T,
    #[serde(rename = "CR")]
    pub cr: T,
    #[serde(rename = "CF1")]
    pub cf1: T,
    #[serde(rename = "OP")]
    pub op: T,
    #[serde(rename = "OR")]
    pub or: T,
    #[serde(rename = "OF1")]
    pub of1: T,
}

impl<T: Field> PrfBlock<T> {
    pub fn compute(preds: &PredictionSet<T>, rule: DecisionRule) -> Self {
        let c = per_class_prf(preds, rule);
        let o = overall_prf(preds, rule);
        Self {
            cp: c.precision,
            cr: c.recall,
            cf1: c.f1,
            op: o.precision,
            or: o.recall,
            of1: o.f1,
        }
    }

    pub fn values(&self) -> [T; 6] {
        [
            self.cp.clone(),
            self.cr.clone(),
            self.cf1.clone(),
            self.op.clone(),
            self.or.clone(),
            self.of1.clone(),
        ]
    }
}

pub const TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T = f64> {
    #[serde(rename = "mAP")]
    pub map: T,
    pub all: PrfBlock<T>,
    pub top_k: PrfBlock<T>,
    pub k: usize,
    pub per_class_ap: Vec<Option<T>>,
    /// Classes without positives, left out of mAP and the macro averages.
    pub excluded_classes: Vec<usize>,
}

impl<T: Field> MetricReport<T> {
    pub fn compute(preds: &PredictionSet<T>) -> Result<Self> {
        let ap = mean_average_precision(preds)?;
        Ok(Self {
            map: ap.map,
            all: PrfBlock::compute(preds, DecisionRule::Threshold),
            top_k: PrfBlock::compute(preds, DecisionRule::TopK(TOP_K)),
            k: TOP_K,
            per_class_ap: ap.per_class,
            excluded_classes: ap.excluded,
        })
    }

    /// The thirteen headline values in CSV column order.
    pub fn values(&self) -> Vec<T> {
        let mut v = vec![self.map.clone()];
        v.extend(self.all.values());
        v.extend(self.top_k.values());
        v
    }
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "mAP", "CP", "CR", "CF1", "OP", "OR", "OF1", "topk_CP", "topk_CR", "topk_CF1", "topk_OP", "topk_OR",
    "topk_OF1",
];

impl MetricReport<f64> {
    /// Human-readable summary table, values in percent.
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let mut s = format!("mAP {}\n", pct(self.map));
        s.push_str("         CP     CR    CF1     OP     OR    OF1\n");
        for (name, b) in [("All  ", &self.all), ("Top-3", &self.top_k)] {
            s.push_str(name);
            for v in b.values() {
                s.push(' ');
                s.push_str(&pct(v));
            }
            s.push('\n');
        }
        if !self.excluded_classes.is_empty() {
            s.push_str(&format!("classes without positives: {:?}\n", self.excluded_classes));
        }
        s
    }
}
