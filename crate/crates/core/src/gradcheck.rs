//! Finite-difference verification of every training loss.
//!
//! For each loss, random tiny networks (at most 100 parameters) are checked
//! against central differences with step `1e-4`. The error measure is
//! `|g - g_fd| / max(|g| + |g_fd|, 1e-12)` over the whole gradient vector
//! (Euclidean norms). Dropout masks, perturbations and the unlabeled
//! pseudo-label selection are frozen at the base point.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{temperature_softmax, Activation, Mode, Network, ParameterSet};
use crate::relation::{mc_dropout_uncertainty, Provenance, RelationMatrix, Selection};
use crate::seed;
use crate::training::{loss_and_grad, Objective, UnlabeledObjective};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const LOSSES: [&str; 3] = ["cross_entropy", "consistency", "irm"];

/// Analytic gradient provider; [`loss_and_grad`] in production.
pub type GradientFn<'a> = dyn Fn(&Network, &Objective) -> Result<ParameterSet> + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| !(c.max_rel_error <= self.tolerance))
            .map(|c| c.loss)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<14} trials={:<3} max_rel_error={:.3e} {status}",
                c.loss, c.trials, c.max_rel_error
            );
        }
        out
    }
}

fn random_net(rng: &mut ChaCha8Rng) -> Network {
    loop {
        let input = rng.gen_range(2..=4);
        let h1 = rng.gen_range(2..=5);
        let h2 = rng.gen_range(2..=5);
        let classes = rng.gen_range(2..=4);
        let sig = Network::signature(input, &[h1, h2], classes);
        let count: usize = sig.iter().map(|&(o, i)| o * i + o).sum();
        if count <= 100 {
            // scale up so predictions are not all near uniform
            let mut params = ParameterSet::init_uniform(&sig, rng.gen());
            params.scale(2.0);
            return Network::new(params, Activation::Tanh, 0.3).expect("valid dropout");
        }
    }
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn random_relation(rng: &mut ChaCha8Rng, classes: usize) -> RelationMatrix {
    let mut entries = Array2::zeros((classes, classes));
    for k in 0..classes {
        let v: ndarray::Array1<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        entries.row_mut(k).assign(&temperature_softmax(v.view(), 1.0).expect("finite"));
    }
    RelationMatrix {
        entries,
        valid: vec![true; classes],
        provenance: Provenance::ServerAggregate,
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

fn numeric_gradient(net: &Network, objective: &Objective) -> Result<Vec<f64>> {
    let sig = net.params.shape_signature();
    let base = net.params.to_flat();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for k in 0..base.len() {
        probe[k] = base[k] + STEP;
        let up = loss_and_grad(&net.with_params(ParameterSet::from_flat(&sig, &probe)?), objective)?.0.total;
        probe[k] = base[k] - STEP;
        let down = loss_and_grad(&net.with_params(ParameterSet::from_flat(&sig, &probe)?), objective)?.0.total;
        probe[k] = base[k];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn check_one(net: &Network, objective: &Objective, grad: &GradientFn) -> Result<f64> {
    let analytic = grad(net, objective)?.to_flat();
    let numeric = numeric_gradient(net, objective)?;
    Ok(rel_error(&analytic, &numeric))
}

/// Runs the suite with the production gradient.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_gradcheck_with(seed, trials, &|net, obj| loss_and_grad(net, obj).map(|(_, g)| g))
}

/// Runs the suite against an arbitrary gradient implementation.
pub fn run_gradcheck_with(seed: u64, trials: usize, grad: &GradientFn) -> Result<GradcheckReport> {
    let mut checks = Vec::with_capacity(LOSSES.len());
    for (li, &loss) in LOSSES.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed::derive(seed, li as u64), trial as u64));
            let net = random_net(&mut rng);
            let rows = rng.gen_range(3..=6);
            let x = random_batch(&mut rng, rows, net.input_dim());
            let err = match loss {
                "cross_entropy" => {
                    let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..net.classes())).collect();
                    let obj = Objective::CrossEntropy {
                        inputs: x.view(),
                        targets: &targets,
                        mode: Mode::Train { seed: rng.gen() },
                    };
                    check_one(&net, &obj, grad)?
                }
                _ => {
                    let noise = random_batch(&mut rng, rows, net.input_dim()) * 0.1;
                    let x_alt = &x + &noise;
                    let irm = loss == "irm";
                    let reference = random_relation(&mut rng, net.classes());
                    let mode_a = Mode::Train { seed: rng.gen() };
                    let uses_logits = irm && trial % 4 == 3;
                    let base = net.forward(x.view(), mode_a)?;
                    let report = mc_dropout_uncertainty(&net, x.view(), 4, (net.classes() as f64).ln() + 1.0, rng.gen())?;
                    let values = if uses_logits { &base.logits } else { &base.probs };
                    let selection = Selection::new(values.view(), &report)?;
                    let obj = Objective::Unlabeled(UnlabeledObjective {
                        view_a: x.view(),
                        view_b: x_alt.view(),
                        mode_a,
                        mode_b: Mode::Train { seed: rng.gen() },
                        consistency_weight: if irm { 0.0 } else { 1.0 },
                        irm_weight: if irm { 1.0 } else { 0.0 },
                        reference: irm.then_some(&reference),
                        uncertainty: Some(&report),
                        frozen_selection: Some(&selection),
                        temperature: 2.0,
                        uses_logits,
                    });
                    check_one(&net, &obj, grad)?
                }
            };
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            if worst.is_nan() {
                break;
            }
        }
        checks.push(LossCheck {
            loss,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        checks,
        tolerance: TOLERANCE,
    })
}
