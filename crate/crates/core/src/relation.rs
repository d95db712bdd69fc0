//! Class-relation matrices, MC-dropout uncertainty filtering and the
//! symmetric-KL relation matching loss.
//!
//! Row `c` of a relation matrix is the temperature-softened mean model
//! response over samples of class `c`. Labeled clients average pre-softmax
//! outputs over their ground-truth classes; unlabeled clients average
//! per-sample predictions over confident pseudo-labels of a minibatch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::LabeledClient;
use crate::error::{Error, Result};
use crate::numerics::{
    floored_ln, floored_ln_grad, temperature_softmax, temperature_softmax_backward, Mode, Network,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LabeledClient(usize),
    UnlabeledBatch,
    ServerAggregate,
}

/// `C x C` matrix of per-class soft labels. Rows for classes that had no
/// contributing samples are marked invalid and hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub entries: Array2<f64>,
    pub valid: Vec<bool>,
    pub provenance: Provenance,
}

impl RelationMatrix {
    pub fn classes(&self) -> usize {
        self.valid.len()
    }

    pub fn row(&self, c: usize) -> Option<ArrayView1<'_, f64>> {
        self.valid[c].then(|| self.entries.row(c))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Builds a matrix by softening each available class mean.
    fn from_means(means: &[Option<Array1<f64>>], tau: f64, provenance: Provenance) -> Result<Self> {
        let c = means.len();
        let mut entries = Array2::zeros((c, c));
        let mut valid = vec![false; c];
        for (k, mean) in means.iter().enumerate() {
            if let Some(v) = mean {
                entries.row_mut(k).assign(&temperature_softmax(v.view(), tau)?);
                valid[k] = true;
            }
        }
        Ok(Self {
            entries,
            valid,
            provenance,
        })
    }

    /// CSV with one row per class: `class,c0,..,c{C-1},valid`, six decimals.
    pub fn to_csv(&self) -> String {
        matrix_csv(None, &self.entries, &self.valid)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Entrywise `|self - other|`; a row is valid when valid in both.
    pub fn abs_difference(&self, other: &RelationMatrix) -> Result<(Array2<f64>, Vec<bool>)> {
        check_classes(self, other)?;
        let valid: Vec<bool> = self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect();
        let mut diff = (&self.entries - &other.entries).mapv(f64::abs);
        for (c, ok) in valid.iter().enumerate() {
            if !ok {
                diff.row_mut(c).fill(0.0);
            }
        }
        Ok((diff, valid))
    }
}

/// Shared CSV writer; `label` prepends a `matrix` column.
pub fn matrix_csv(label: Option<&str>, entries: &Array2<f64>, valid: &[bool]) -> String {
    let mut out = String::new();
    let c = entries.ncols();
    if label.is_some() {
        out.push_str("matrix,");
    }
    out.push_str("class");
    for j in 0..c {
        let _ = write!(out, ",c{j}");
    }
    out.push_str(",valid\n");
    out.push_str(&matrix_csv_rows(label, entries, valid));
    out
}

pub(crate) fn matrix_csv_rows(label: Option<&str>, entries: &Array2<f64>, valid: &[bool]) -> String {
    let mut out = String::new();
    for (k, row) in entries.outer_iter().enumerate() {
        if let Some(l) = label {
            let _ = write!(out, "{l},");
        }
        let _ = write!(out, "{k}");
        for v in row.iter() {
            let _ = write!(out, ",{v:.6}");
        }
        let _ = writeln!(out, ",{}", u8::from(valid[k]));
    }
    out
}

fn check_classes(a: &RelationMatrix, b: &RelationMatrix) -> Result<()> {
    if a.classes() != b.classes() {
        return Err(Error::invalid(format!(
            "relation class counts differ: {} vs {}",
            a.classes(),
            b.classes()
        )));
    }
    Ok(())
}

/// Relation matrix of a labeled client: per-class mean of pre-softmax
/// outputs (eval mode), softened at temperature `tau`.
pub fn labeled_relation(net: &Network, client: &LabeledClient, tau: f64) -> Result<RelationMatrix> {
    let c = net.classes();
    let logits = net.forward(client.features.view(), Mode::Eval)?.logits;
    let mut sums = vec![Array1::<f64>::zeros(c); c];
    let mut counts = vec![0usize; c];
    for (row, &y) in logits.outer_iter().zip(&client.targets) {
        if y >= c {
            return Err(Error::invalid(format!("target {y} outside [0, {c})")));
        }
        sums[y] += &row;
        counts[y] += 1;
    }
    let means: Vec<Option<Array1<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    RelationMatrix::from_means(&means, tau, Provenance::LabeledClient(client.id))
}

/// Monte-Carlo dropout statistics for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub mean_probs: Array2<f64>,
    /// Predictive entropy (natural log) of each row of `mean_probs`.
    pub entropy: Array1<f64>,
    pub passes: usize,
    pub threshold: f64,
    /// `entropy[i] < threshold`.
    pub keep: Vec<bool>,
}

impl UncertaintyReport {
    pub fn from_mean_probs(mean_probs: Array2<f64>, passes: usize, threshold: f64) -> Self {
        let entropy: Array1<f64> = mean_probs
            .outer_iter()
            .map(|row| {
                -row.iter()
                    .filter(|&&q| q > 0.0)
                    .map(|&q| q * q.ln())
                    .sum::<f64>()
            })
            .map(|w: f64| w.max(0.0))
            .collect();
        let keep = entropy.iter().map(|&w| w < threshold).collect();
        Self {
            mean_probs,
            entropy,
            passes,
            threshold,
            keep,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Runs `passes` dropout forward passes (pass `t` uses seed `derive(seed, t)`)
/// and reports the predictive entropy of the averaged probabilities.
pub fn mc_dropout_uncertainty(
    net: &Network,
    batch: ArrayView2<f64>,
    passes: usize,
    threshold: f64,
    seed: u64,
) -> Result<UncertaintyReport> {
    if passes < 2 {
        return Err(Error::invalid(format!("MC dropout needs at least 2 passes, got {passes}")));
    }
    if net.dropout <= 0.0 {
        return Err(Error::invalid("MC dropout requires a positive dropout rate"));
    }
    let mut mean = Array2::<f64>::zeros((batch.nrows(), net.classes()));
    for t in 0..passes {
        let out = net.forward(batch, Mode::Train { seed: seed::derive(seed, t as u64) })?;
        mean += &out.probs;
    }
    mean /= passes as f64;
    Ok(UncertaintyReport::from_mean_probs(mean, passes, threshold))
}

/// Pseudo labels and confidence mask of an unlabeled minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub pseudo_labels: Vec<usize>,
    pub keep: Vec<bool>,
}

impl Selection {
    pub fn new(values: ArrayView2<f64>, report: &UncertaintyReport) -> Result<Self> {
        if values.nrows() != report.batch_size() {
            return Err(Error::invalid(format!(
                "prediction batch {} does not match uncertainty batch {}",
                values.nrows(),
                report.batch_size()
            )));
        }
        Ok(Self {
            pseudo_labels: values.outer_iter().map(argmax).collect(),
            keep: report.keep.clone(),
        })
    }

    /// Number of kept samples per pseudo class.
    pub fn counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for (&y, &k) in self.pseudo_labels.iter().zip(&self.keep) {
            if k {
                counts[y] += 1;
            }
        }
        counts
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Relation matrix of an unlabeled minibatch from its predictions `values`
/// (probabilities, or logits under the ablation switch) and an uncertainty
/// report. Only confident samples contribute to their pseudo class.
pub fn unlabeled_relation(
    values: ArrayView2<f64>,
    report: &UncertaintyReport,
    tau: f64,
) -> Result<RelationMatrix> {
    let selection = Selection::new(values, report)?;
    relation_from_selection(values, &selection, tau)
}

pub fn relation_from_selection(
    values: ArrayView2<f64>,
    selection: &Selection,
    tau: f64,
) -> Result<RelationMatrix> {
    let c = values.ncols();
    let counts = selection.counts(c);
    let mut sums = vec![Array1::<f64>::zeros(c); c];
    for ((row, &y), &k) in values.outer_iter().zip(&selection.pseudo_labels).zip(&selection.keep) {
        if k {
            sums[y] += &row;
        }
    }
    let means: Vec<Option<Array1<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    RelationMatrix::from_means(&means, tau, Provenance::UnlabeledBatch)
}

/// Pulls `d loss / d relation` back to `d loss / d values` through the
/// per-class averaging and temperature softmax of [`relation_from_selection`].
pub fn relation_backward(
    relation: &RelationMatrix,
    drelation: ArrayView2<f64>,
    selection: &Selection,
    tau: f64,
) -> Array2<f64> {
    let c = relation.classes();
    let counts = selection.counts(c);
    let dmeans: Vec<Option<Array1<f64>>> = (0..c)
        .map(|k| {
            relation.row(k).map(|s| {
                temperature_softmax_backward(s, drelation.row(k), tau) / counts[k] as f64
            })
        })
        .collect();
    let mut dvalues = Array2::zeros((selection.keep.len(), c));
    for (i, (&y, &k)) in selection.pseudo_labels.iter().zip(&selection.keep).enumerate() {
        if k {
            if let Some(dm) = &dmeans[y] {
                dvalues.row_mut(i).assign(dm);
            }
        }
    }
    dvalues
}

fn kl(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| a * (floored_ln(a) - floored_ln(b)))
        .sum()
}

/// Symmetric KL between matching rows, averaged over the classes that are
/// valid in both matrices. Zero when no class is shared.
pub fn irm_loss(reference: &RelationMatrix, local: &RelationMatrix) -> Result<f64> {
    irm_loss_with_grad(reference, local).map(|(l, _)| l)
}

/// [`irm_loss`] together with its gradient with respect to `local.entries`.
/// The reference matrix is treated as a constant.
pub fn irm_loss_with_grad(
    reference: &RelationMatrix,
    local: &RelationMatrix,
) -> Result<(f64, Array2<f64>)> {
    check_classes(reference, local)?;
    let c = reference.classes();
    let shared: Vec<usize> = (0..c).filter(|&k| reference.valid[k] && local.valid[k]).collect();
    let mut grad = Array2::zeros((c, c));
    if shared.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / shared.len() as f64;
    let mut total = 0.0;
    for &k in &shared {
        let m = reference.entries.row(k);
        let s = local.entries.row(k);
        total += kl(m, s) + kl(s, m);
        for j in 0..c {
            let (mj, sj) = (m[j], s[j]);
            let d = -mj * floored_ln_grad(sj) + floored_ln(sj) - floored_ln(mj)
                + sj * floored_ln_grad(sj);
            grad[[k, j]] = scale * d;
        }
    }
    Ok((total * scale, grad))
}

/// Entrywise mean over labeled-client matrices, skipping invalid rows, with
/// each aggregated row renormalized to sum to one.
pub fn aggregate_relations(matrices: &[RelationMatrix]) -> Result<RelationMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty list of relation matrices"))?;
    let c = first.classes();
    for m in matrices {
        check_classes(first, m)?;
        if !matches!(m.provenance, Provenance::LabeledClient(_)) {
            return Err(Error::invalid(format!(
                "aggregate expects labeled-client matrices, got {:?}",
                m.provenance
            )));
        }
    }
    let mut entries = Array2::zeros((c, c));
    let mut valid = vec![false; c];
    for k in 0..c {
        let rows: Vec<ArrayView1<f64>> = matrices.iter().filter_map(|m| m.row(k)).collect();
        if rows.is_empty() {
            continue;
        }
        let mut mean = Array1::<f64>::zeros(c);
        for r in &rows {
            mean += r;
        }
        mean /= rows.len() as f64;
        let total = mean.sum();
        entries.row_mut(k).assign(&(mean / total));
        valid[k] = true;
    }
    Ok(RelationMatrix {
        entries,
        valid,
        provenance: Provenance::ServerAggregate,
    })
}
