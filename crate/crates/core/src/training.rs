//! Local client objectives and the round-indexed warm-up schedule.
//!
//! Labeled clients minimize cross-entropy. Unlabeled clients minimize
//! `lambda * (consistency + irm_weight * relation_matching)`, where the
//! relation term is only present once the server has broadcast an aggregate
//! relation matrix.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{perturb_batch, LabeledClient, PerturbConfig, UnlabeledClient};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, floored_ln, floored_ln_grad, softmax_backward, AdamConfig, Mode, Network,
    OptimizerState, ParameterSet,
};
use crate::relation::{
    irm_loss_with_grad, mc_dropout_uncertainty, relation_backward, relation_from_selection,
    RelationMatrix, Selection, UncertaintyReport,
};
use crate::seed::{self, tag};

/// Hyperparameters of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub adam: AdamConfig,
    pub perturb: PerturbConfig,
    pub temperature: f64,
    pub mc_passes: usize,
    pub entropy_threshold: f64,
    pub warmup_horizon: usize,
    pub warmup_squared: bool,
    /// Multiplier on the relation matching term (0 gives plain consistency).
    pub irm_weight: f64,
    /// Build unlabeled relations from logits instead of probabilities.
    pub unlabeled_uses_logits: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            local_epochs: 1,
            adam: AdamConfig::default(),
            perturb: PerturbConfig::default(),
            temperature: 2.0,
            mc_passes: 8,
            entropy_threshold: std::f64::consts::LN_2,
            warmup_horizon: 30,
            warmup_squared: true,
            irm_weight: 1.0,
            unlabeled_uses_logits: false,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.local_epochs < 1 || self.warmup_horizon < 1 {
            return Err(Error::invalid("batch_size, local_epochs and warmup_horizon must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.mc_passes < 2 {
            return Err(Error::invalid("mc_passes must be >= 2"));
        }
        if !(self.adam.learning_rate >= 0.0) || !(self.irm_weight >= 0.0) {
            return Err(Error::invalid("learning_rate and irm_weight must be non-negative"));
        }
        if !(self.perturb.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Gaussian ramp `exp(-5 (1 - min(round/horizon, 1))^2)`; with `squared`
/// off the exponent is used without the square.
pub fn warmup(round: usize, horizon: usize, squared: bool) -> f64 {
    let progress = (round as f64 / horizon.max(1) as f64).min(1.0);
    let gap = 1.0 - progress;
    let exponent = if squared { gap * gap } else { gap };
    (-5.0 * exponent).exp()
}

fn check_targets(probs: ArrayView2<f64>, targets: &[usize]) -> Result<()> {
    if probs.nrows() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= probs.ncols()) {
        return Err(Error::invalid(format!("target {bad} outside [0, {})", probs.ncols())));
    }
    Ok(())
}

/// Mean negative log-probability of the targets.
pub fn cross_entropy(probs: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    check_targets(probs, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -floored_ln(probs[[i, t]]))
        .sum();
    Ok(total / targets.len() as f64)
}

pub fn cross_entropy_grad(probs: ArrayView2<f64>, targets: &[usize]) -> Result<Array2<f64>> {
    check_targets(probs, targets)?;
    let scale = 1.0 / targets.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        g[[i, t]] = -scale * floored_ln_grad(probs[[i, t]]);
    }
    Ok(g)
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean over all `B x C` entries of the squared prediction difference.
pub fn consistency_loss(p1: ArrayView2<f64>, p2: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(p1, p2)?;
    let n = p1.len() as f64;
    Ok((&p1 - &p2).mapv(|d| d * d).sum() / n)
}

/// Gradient of [`consistency_loss`] with respect to `p1` (negate for `p2`).
pub fn consistency_grad(p1: ArrayView2<f64>, p2: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_same_shape(p1, p2)?;
    let n = p1.len() as f64;
    Ok((&p1 - &p2) * (2.0 / n))
}

/// Unlabeled-client objective for one minibatch.
#[derive(Debug, Clone)]
pub struct UnlabeledObjective<'a> {
    /// Input under perturbation xi; feeds the relation estimate.
    pub view_a: ArrayView2<'a, f64>,
    /// Input under perturbation xi'.
    pub view_b: ArrayView2<'a, f64>,
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub consistency_weight: f64,
    pub irm_weight: f64,
    pub reference: Option<&'a RelationMatrix>,
    pub uncertainty: Option<&'a UncertaintyReport>,
    /// Pseudo labels and mask to use instead of re-deriving them.
    pub frozen_selection: Option<&'a Selection>,
    pub temperature: f64,
    pub uses_logits: bool,
}

/// Differentiable losses understood by [`backward`].
#[derive(Debug, Clone)]
pub enum Objective<'a> {
    CrossEntropy {
        inputs: ArrayView2<'a, f64>,
        targets: &'a [usize],
        mode: Mode,
    },
    /// Mean squared error between probabilities and a fixed target.
    SquaredError {
        inputs: ArrayView2<'a, f64>,
        target: ArrayView2<'a, f64>,
        mode: Mode,
    },
    Unlabeled(UnlabeledObjective<'a>),
}

impl Objective<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::CrossEntropy { .. } => "cross_entropy",
            Objective::SquaredError { .. } => "squared_error",
            Objective::Unlabeled(u) if u.consistency_weight == 0.0 => "irm",
            Objective::Unlabeled(u) if u.irm_weight == 0.0 || u.reference.is_none() => "consistency",
            Objective::Unlabeled(_) => "unlabeled_total",
        }
    }
}

/// Loss value plus its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub consistency: f64,
    pub irm: f64,
    pub selection: Option<Selection>,
}

impl LossValue {
    fn plain(total: f64) -> Self {
        Self {
            total,
            consistency: 0.0,
            irm: 0.0,
            selection: None,
        }
    }
}

/// Evaluates an objective and its parameter gradient.
pub fn loss_and_grad(net: &Network, objective: &Objective) -> Result<(LossValue, ParameterSet)> {
    let (value, grads) = match objective {
        Objective::CrossEntropy {
            inputs,
            targets,
            mode,
        } => {
            let (out, cache) = net.forward_cached(*inputs, *mode)?;
            let loss = cross_entropy(out.probs.view(), targets)?;
            let dp = cross_entropy_grad(out.probs.view(), targets)?;
            let g = net.backward_from_probs(&cache, out.probs.view(), dp.view());
            (LossValue::plain(loss), g)
        }
        Objective::SquaredError {
            inputs,
            target,
            mode,
        } => {
            let (out, cache) = net.forward_cached(*inputs, *mode)?;
            let loss = consistency_loss(out.probs.view(), *target)?;
            let dp = consistency_grad(out.probs.view(), *target)?;
            let g = net.backward_from_probs(&cache, out.probs.view(), dp.view());
            (LossValue::plain(loss), g)
        }
        Objective::Unlabeled(u) => unlabeled_loss_and_grad(net, u)?,
    };
    if !value.total.is_finite() {
        return Err(Error::NumericalFailure {
            loss: objective.name().to_string(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NumericalFailure {
            loss: format!("{} gradient", objective.name()),
        });
    }
    Ok((value, grads))
}

/// Gradient of `objective` with respect to every parameter of `net`.
pub fn backward(net: &Network, objective: &Objective) -> Result<ParameterSet> {
    loss_and_grad(net, objective).map(|(_, g)| g)
}

fn unlabeled_loss_and_grad(net: &Network, u: &UnlabeledObjective) -> Result<(LossValue, ParameterSet)> {
    let (out_a, cache_a) = net.forward_cached(u.view_a, u.mode_a)?;
    let (out_b, cache_b) = net.forward_cached(u.view_b, u.mode_b)?;

    let consistency = consistency_loss(out_a.probs.view(), out_b.probs.view())?;
    let dcons = consistency_grad(out_a.probs.view(), out_b.probs.view())? * u.consistency_weight;
    let mut dprobs_a = dcons.clone();
    let dprobs_b = -dcons;
    let mut dlogits_a = Array2::<f64>::zeros(out_a.logits.raw_dim());

    let mut irm = 0.0;
    let mut selection_out = None;
    if let (Some(reference), true) = (u.reference, u.irm_weight != 0.0) {
        let values = if u.uses_logits { &out_a.logits } else { &out_a.probs };
        let selection = match (u.frozen_selection, u.uncertainty) {
            (Some(s), _) => s.clone(),
            (None, Some(report)) => Selection::new(values.view(), report)?,
            (None, None) => {
                return Err(Error::invalid(
                    "relation matching needs an uncertainty report or a frozen selection",
                ))
            }
        };
        let local = relation_from_selection(values.view(), &selection, u.temperature)?;
        let (loss, dlocal) = irm_loss_with_grad(reference, &local)?;
        irm = loss;
        let dvalues = relation_backward(&local, (dlocal * u.irm_weight).view(), &selection, u.temperature);
        if u.uses_logits {
            dlogits_a += &dvalues;
        } else {
            dprobs_a += &dvalues;
        }
        selection_out = Some(selection);
    }

    dlogits_a += &softmax_backward(out_a.probs.view(), dprobs_a.view());
    let dlogits_b = softmax_backward(out_b.probs.view(), dprobs_b.view());
    let mut grads = net.backward(&cache_a, dlogits_a.view());
    grads.add_scaled(&net.backward(&cache_b, dlogits_b.view()), 1.0);

    let value = LossValue {
        total: u.consistency_weight * consistency + u.irm_weight * irm,
        consistency,
        irm,
        selection: selection_out,
    };
    Ok((value, grads))
}

fn batch_seed(round_seed: u64, epoch: usize, batch: usize) -> u64 {
    seed::derive(seed::derive(round_seed, epoch as u64), batch as u64)
}

fn epoch_order(n: usize, round_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(round_seed ^ tag::SHUFFLE, epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn apply_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    state: &OptimizerState,
) -> Result<(ParameterSet, OptimizerState)> {
    let (next, state) = adam_step(params, grads, state)?;
    if !next.is_finite() {
        return Err(Error::NumericalFailure {
            loss: "adam update".into(),
        });
    }
    Ok((next, state))
}

/// `local_epochs` of minibatch Adam on cross-entropy. Batch order and
/// dropout masks are pure functions of `round_seed`.
pub fn labeled_local_update(
    net: &Network,
    client: &LabeledClient,
    cfg: &LocalConfig,
    round_seed: u64,
) -> Result<ParameterSet> {
    if client.is_empty() {
        return Err(Error::invalid(format!("labeled client {} has no samples", client.id)));
    }
    let mut params = net.params.clone();
    let mut state = OptimizerState::new(&params, cfg.adam);
    for epoch in 0..cfg.local_epochs {
        let order = epoch_order(client.len(), round_seed, epoch);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = client.features.select(Axis(0), idx);
            let targets: Vec<usize> = idx.iter().map(|&i| client.targets[i]).collect();
            let bs = batch_seed(round_seed, epoch, b);
            let current = net.with_params(params);
            let grads = backward(
                &current,
                &Objective::CrossEntropy {
                    inputs: inputs.view(),
                    targets: &targets,
                    mode: Mode::Train {
                        seed: seed::derive(bs, tag::DROPOUT),
                    },
                },
            )?;
            (params, state) = apply_step(&current.params, &grads, &state)?;
        }
    }
    Ok(params)
}

/// Local training at an unlabeled client. Reads only the client's features.
pub fn unlabeled_local_update(
    net: &Network,
    client: &UnlabeledClient,
    reference: Option<&RelationMatrix>,
    lambda: f64,
    cfg: &LocalConfig,
    round_seed: u64,
) -> Result<ParameterSet> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    if client.is_empty() {
        return Err(Error::invalid(format!("unlabeled client {} has no samples", client.id)));
    }
    if lambda == 0.0 {
        return Ok(net.params.clone());
    }
    let irm_active = reference.is_some() && cfg.irm_weight > 0.0;
    let mut params = net.params.clone();
    // Adam is invariant to a constant loss scale, so the warm-up weight also
    // scales the step size; otherwise lambda would have no effect.
    let mut adam = cfg.adam;
    adam.learning_rate *= lambda;
    let mut state = OptimizerState::new(&params, adam);
    for epoch in 0..cfg.local_epochs {
        let order = epoch_order(client.len(), round_seed, epoch);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = client.features.select(Axis(0), idx);
            let bs = batch_seed(round_seed, epoch, b);
            let view_a = perturb_batch(&batch, client.image_shape, &cfg.perturb, seed::derive(bs, tag::PERTURB));
            let view_b = perturb_batch(&batch, client.image_shape, &cfg.perturb, seed::derive(bs, tag::PERTURB_ALT));
            let current = net.with_params(params);
            let report = if irm_active {
                Some(mc_dropout_uncertainty(
                    &current,
                    batch.view(),
                    cfg.mc_passes,
                    cfg.entropy_threshold,
                    seed::derive(bs, tag::MC),
                )?)
            } else {
                None
            };
            let objective = Objective::Unlabeled(UnlabeledObjective {
                view_a: view_a.view(),
                view_b: view_b.view(),
                mode_a: Mode::Train {
                    seed: seed::derive(bs, tag::DROPOUT),
                },
                mode_b: Mode::Train {
                    seed: seed::derive(bs, tag::DROPOUT_ALT),
                },
                consistency_weight: lambda,
                irm_weight: lambda * cfg.irm_weight,
                reference: if irm_active { reference } else { None },
                uncertainty: report.as_ref(),
                frozen_selection: None,
                temperature: cfg.temperature,
                uses_logits: cfg.unlabeled_uses_logits,
            });
            let grads = backward(&current, &objective)?;
            (params, state) = apply_step(&current.params, &grads, &state)?;
        }
    }
    Ok(params)
}
