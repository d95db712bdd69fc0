//! Multi-class evaluation: one-vs-rest AUC plus confusion-matrix metrics,
//! all macro-averaged over classes.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::data::{Dataset, UnlabeledClient};
use crate::error::{Error, Result};
use crate::numerics::{Mode, Network};
use crate::relation::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Mann-Whitney AUC of one score column; ties count one half.
pub fn binary_auc(scores: ArrayView1<f64>, positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average of 1-based ranks i+1 ..= j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Macro-averaged one-vs-rest AUC over classes with both positives and negatives.
pub fn auc_ovr(scores: ArrayView2<f64>, labels: &[usize]) -> Result<AucReport> {
    if scores.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} score rows but {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::invalid("AUC needs at least two samples"));
    }
    let c = scores.ncols();
    let mut per_class = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for k in 0..c {
        let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        let auc = binary_auc(scores.column(k), &positive);
        if auc.is_none() {
            skipped.push(k);
        }
        per_class.push(auc);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(AucReport {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        skipped,
    })
}

/// A per-class ratio; `None` when its denominator was zero.
pub type ClassRatio = Option<f64>;

fn ratio(num: usize, den: usize) -> ClassRatio {
    (den > 0).then(|| num as f64 / den as f64)
}

fn macro_mean(values: &[ClassRatio]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionReport {
    /// `confusion[[true, predicted]]`
    pub confusion: Array2<usize>,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class_sensitivity: Vec<ClassRatio>,
    pub per_class_specificity: Vec<ClassRatio>,
    pub per_class_f1: Vec<ClassRatio>,
}

pub fn confusion_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut confusion = Array2::<usize>::zeros((classes, classes));
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::invalid(format!("class index outside [0, {classes})")));
        }
        confusion[[y, p]] += 1;
    }
    let n = labels.len();
    let trace: usize = (0..classes).map(|k| confusion[[k, k]]).sum();
    let mut sens = Vec::with_capacity(classes);
    let mut spec = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for k in 0..classes {
        let tp = confusion[[k, k]];
        let fn_ = confusion.row(k).sum() - tp;
        let fp = confusion.column(k).sum() - tp;
        let tn = n - tp - fn_ - fp;
        sens.push(ratio(tp, tp + fn_));
        spec.push(ratio(tn, tn + fp));
        f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
    }
    Ok(ConfusionReport {
        accuracy: trace as f64 / n as f64,
        sensitivity: macro_mean(&sens),
        specificity: macro_mean(&spec),
        f1: macro_mean(&f1),
        confusion,
        per_class_sensitivity: sens,
        per_class_specificity: spec,
        per_class_f1: f1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_sensitivity: Vec<ClassRatio>,
    pub per_class_specificity: Vec<ClassRatio>,
    pub per_class_f1: Vec<ClassRatio>,
    pub samples: usize,
}

impl EvalResult {
    /// Comma-separated `auc,sensitivity,specificity,accuracy,f1`.
    pub fn csv_fields(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.auc, self.sensitivity, self.specificity, self.accuracy, self.f1
        )
    }

    /// Human-readable multi-line report.
    pub fn report(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "samples      {}", self.samples);
        let _ = writeln!(out, "auc          {:.4}", self.auc);
        let _ = writeln!(out, "sensitivity  {:.4}", self.sensitivity);
        let _ = writeln!(out, "specificity  {:.4}", self.specificity);
        let _ = writeln!(out, "accuracy     {:.4}", self.accuracy);
        let _ = writeln!(out, "f1           {:.4}", self.f1);
        let _ = writeln!(out, "class  auc        sens       spec       f1");
        for k in 0..self.per_class_auc.len() {
            let _ = writeln!(
                out,
                "{k:<6} {:<10} {:<10} {:<10} {}",
                fmt(&self.per_class_auc[k]),
                fmt(&self.per_class_sensitivity[k]),
                fmt(&self.per_class_specificity[k]),
                fmt(&self.per_class_f1[k])
            );
        }
        out
    }
}

/// Scores `net` (eval mode) against ground truth.
pub fn evaluate(net: &Network, features: ArrayView2<f64>, labels: &[usize]) -> Result<EvalResult> {
    let probs = net.forward(features, Mode::Eval)?.probs;
    let predictions: Vec<usize> = probs.outer_iter().map(argmax).collect();
    let auc = auc_ovr(probs.view(), labels)?;
    let conf = confusion_metrics(&predictions, labels, net.classes())?;
    Ok(EvalResult {
        auc: auc.macro_auc,
        sensitivity: conf.sensitivity,
        specificity: conf.specificity,
        accuracy: conf.accuracy,
        f1: conf.f1,
        per_class_auc: auc.per_class,
        per_class_sensitivity: conf.per_class_sensitivity,
        per_class_specificity: conf.per_class_specificity,
        per_class_f1: conf.per_class_f1,
        samples: labels.len(),
    })
}

pub fn evaluate_dataset(net: &Network, data: &Dataset) -> Result<EvalResult> {
    evaluate(net, data.features.view(), &data.labels)
}

/// Evaluation against an unlabeled client's hidden ground truth.
pub fn evaluate_unlabeled_client(net: &Network, client: &UnlabeledClient) -> Result<EvalResult> {
    evaluate(net, client.features.view(), client.hidden_targets().reveal_for_evaluation())
}
