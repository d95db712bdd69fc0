//! Acceptance suite. Each test writes one `criterion N [PASS|FAIL]` line to
//! stdout (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedirm::cli::{cmd_sweep, SweepAxis, SweepRow};
use fedirm::config::{ExperimentConfig, RunMode};
use fedirm::data::{HiddenTargets, LabeledClient, PerturbConfig, UnlabeledClient};
use fedirm::federation::{fedavg, run_experiment, ClientUpdate};
use fedirm::gradcheck::{run_gradcheck, LOSSES, TOLERANCE};
use fedirm::metrics::{auc_ovr, confusion_metrics};
use fedirm::numerics::{
    read_checkpoint, write_checkpoint, Activation, Layer, Mode, Network, ParameterSet,
};
use fedirm::relation::{
    aggregate_relations, irm_loss, labeled_relation, mc_dropout_uncertainty, unlabeled_relation,
    Provenance, RelationMatrix,
};
use fedirm::training::{unlabeled_local_update, warmup, LocalConfig};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(criterion: u32, ok: bool, detail: &str) {
    let line = format!("criterion {criterion} [{}] {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_net(rng: &mut ChaCha8Rng, input: usize, classes: usize, activation: Activation) -> Network {
    let hidden = rng.gen_range(2..=6);
    let sig = Network::signature(input, &[hidden], classes);
    let mut params = ParameterSet::init_uniform(&sig, rng.gen());
    params.scale(2.0);
    Network::new(params, activation, 0.3).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

// Straight-line eval-mode forward pass, independent of the library's.
fn oracle_logits(net: &Network, x: &[f64]) -> Vec<f64> {
    let layers = &net.params.layers;
    let mut h = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let (out, inp) = layer.weight.dim();
        let mut z = vec![0.0; out];
        for o in 0..out {
            let mut s = layer.bias[o];
            for i in 0..inp {
                s += layer.weight[[o, i]] * h[i];
            }
            z[o] = s;
        }
        if l + 1 < layers.len() {
            for v in &mut z {
                *v = match net.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = z;
    }
    h
}

fn oracle_softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn oracle_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

fn oracle_class_means(rows: &[Vec<f64>], classes_of: &[usize], keep: &[bool], c: usize) -> Vec<Option<Vec<f64>>> {
    (0..c)
        .map(|k| {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .zip(classes_of)
                .zip(keep)
                .filter(|((_, &y), &kept)| kept && y == k)
                .map(|((r, _), _)| r)
                .collect();
            if members.is_empty() {
                return None;
            }
            let mut mean = vec![0.0; c];
            for r in &members {
                for j in 0..c {
                    mean[j] += r[j];
                }
            }
            Some(mean.iter().map(|v| v / members.len() as f64).collect())
        })
        .collect()
}

fn compare_relation(m: &RelationMatrix, means: &[Option<Vec<f64>>], tau: f64) -> Option<f64> {
    let mut worst = 0.0f64;
    for (k, mean) in means.iter().enumerate() {
        match (mean, m.row(k)) {
            (None, None) => {}
            (Some(v), Some(row)) => {
                let s = oracle_softmax(v, tau);
                for j in 0..s.len() {
                    worst = worst.max((s[j] - row[j]).abs());
                }
            }
            _ => return None,
        }
    }
    Some(worst)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let report = run_gradcheck(7, 20).unwrap();
    let elapsed = start.elapsed();
    let covered = LOSSES.iter().all(|l| report.checks.iter().any(|c| c.loss == *l && c.trials >= 20));
    let worst = report.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let ok = report.passed() && covered && worst <= TOLERANCE && elapsed < Duration::from_secs(30);
    verdict(
        1,
        ok,
        &format!("max relative error {worst:.2e} over 20 nets per loss in {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_relation_oracle() {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut mismatched_validity = 0;
    let trials = 250;
    for trial in 0..trials {
        let c = r.gen_range(2..=4);
        let b = r.gen_range(1..=8);
        let d = r.gen_range(2..=5);
        let tau = r.gen_range(0.5..4.0);
        let activation = if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let net = random_net(&mut r, d, c, activation);
        let features = random_matrix(&mut r, b, d, 2.0);
        let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let client = LabeledClient {
            id: 0,
            features: features.clone(),
            targets: targets.clone(),
            classes: c,
            image_shape: None,
        };
        let lab = labeled_relation(&net, &client, tau).unwrap();
        let logits: Vec<Vec<f64>> = features.outer_iter().map(|x| oracle_logits(&net, &x.to_vec())).collect();
        let means = oracle_class_means(&logits, &targets, &vec![true; b], c);
        match compare_relation(&lab, &means, tau) {
            Some(e) => worst = worst.max(e),
            None => mismatched_validity += 1,
        }

        let batch = random_matrix(&mut r, b, d, 2.0);
        let probs = net.forward(batch.view(), Mode::Train { seed: r.gen() }).unwrap().probs;
        let h = r.gen_range(0.05..(c as f64).ln() + 0.1);
        let report = mc_dropout_uncertainty(&net, batch.view(), r.gen_range(2..=8), h, r.gen()).unwrap();
        let entropy: Vec<f64> = report
            .mean_probs
            .outer_iter()
            .map(|q| -q.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
            .collect();
        for (e, w) in entropy.iter().zip(report.entropy.iter()) {
            worst = worst.max((e - w).abs());
        }
        let keep: Vec<bool> = entropy.iter().map(|&w| w < h).collect();
        if keep != report.keep {
            mismatched_validity += 1;
        }
        let p: Vec<Vec<f64>> = probs.outer_iter().map(|row| row.to_vec()).collect();
        let pseudo: Vec<usize> = p.iter().map(|row| oracle_argmax(row)).collect();
        let unl = unlabeled_relation(probs.view(), &report, tau).unwrap();
        let means = oracle_class_means(&p, &pseudo, &keep, c);
        match compare_relation(&unl, &means, tau) {
            Some(e) => worst = worst.max(e),
            None => mismatched_validity += 1,
        }
    }
    let ok = worst <= 1e-6 && mismatched_validity == 0;
    verdict(
        2,
        ok,
        &format!("{trials} instances (B<=8, C<=4), max elementwise error {worst:.2e}, validity mismatches {mismatched_validity}"),
    );
}

fn random_stochastic(r: &mut ChaCha8Rng, c: usize, provenance: Provenance) -> RelationMatrix {
    let mut entries = Array2::zeros((c, c));
    let valid: Vec<bool> = (0..c).map(|_| r.gen_bool(0.8)).collect();
    for k in 0..c {
        if valid[k] {
            let v: Vec<f64> = (0..c).map(|_| r.gen_range(-3.0..3.0)).collect();
            entries.row_mut(k).assign(&Array1::from(oracle_softmax(&v, 2.0)));
        }
    }
    RelationMatrix { entries, valid, provenance }
}

fn rows_stochastic(m: &RelationMatrix) -> bool {
    (0..m.classes()).all(|k| match m.row(k) {
        Some(row) => (row.sum() - 1.0).abs() <= 1e-6 && row.iter().all(|&v| v > 0.0),
        None => true,
    })
}

fn tiny_unlabeled(seed: u64, targets: Vec<usize>) -> UnlabeledClient {
    let mut r = rng(seed);
    let features = random_matrix(&mut r, targets.len(), 4, 1.0);
    UnlabeledClient::new(5, features, 3, None, HiddenTargets::new(targets))
}

#[test]
fn criterion_3_invariants() {
    let mut r = rng(3);
    let mut failures: Vec<String> = Vec::new();

    // Row-stochasticity of computed relation matrices.
    for _ in 0..100 {
        let c = r.gen_range(2..=5);
        let net = random_net(&mut r, 3, c, Activation::Relu);
        let b = r.gen_range(1..=12);
        let features = random_matrix(&mut r, b, 3, 2.0);
        let client = LabeledClient {
            id: 1,
            features: features.clone(),
            targets: (0..b).map(|_| r.gen_range(0..c)).collect(),
            classes: c,
            image_shape: None,
        };
        let lab = labeled_relation(&net, &client, 2.0).unwrap();
        let report = mc_dropout_uncertainty(&net, features.view(), 4, 10.0, r.gen()).unwrap();
        let probs = net.forward(features.view(), Mode::Eval).unwrap().probs;
        let unl = unlabeled_relation(probs.view(), &report, 2.0).unwrap();
        let agg = aggregate_relations(&[lab.clone(), random_stochastic(&mut r, c, Provenance::LabeledClient(2))]).unwrap();
        if ![&lab, &unl, &agg].iter().all(|m| rows_stochastic(m)) {
            failures.push("relation row not stochastic".into());
        }
        if report.entropy.iter().any(|&w| !(0.0..=(c as f64).ln() + 1e-9).contains(&w)) {
            failures.push("entropy outside [0, ln C]".into());
        }
        let a = random_stochastic(&mut r, c, Provenance::ServerAggregate);
        let u = random_stochastic(&mut r, c, Provenance::UnlabeledBatch);
        if irm_loss(&a, &u).unwrap() < 0.0 || irm_loss(&a, &a).unwrap() != 0.0 {
            failures.push("irm loss sign or identity".into());
        }
    }

    // FedAvg weighted mean and permutation invariance.
    for _ in 0..50 {
        let k = r.gen_range(1..=6);
        let sig = [(3, 2), (2, 3)];
        let mut updates: Vec<ClientUpdate> = (0..k)
            .map(|id| ClientUpdate {
                client_id: id,
                params: ParameterSet::init_uniform(&sig, r.gen()),
                samples: r.gen_range(1..50),
                relation: None,
            })
            .collect();
        let avg = fedavg(&updates).unwrap();
        let total: usize = updates.iter().map(|u| u.samples).sum();
        let flat: Vec<Vec<f64>> = updates.iter().map(|u| u.params.to_flat()).collect();
        let got = avg.to_flat();
        for j in 0..got.len() {
            let expected: f64 = updates.iter().zip(&flat).map(|(u, f)| u.samples as f64 * f[j]).sum::<f64>() / total as f64;
            if (got[j] - expected).abs() > 1e-12 {
                failures.push(format!("fedavg weighted mean off by {:e}", (got[j] - expected).abs()));
                break;
            }
        }
        updates.shuffle(&mut r);
        if fedavg(&updates).unwrap() != avg {
            failures.push("fedavg depends on update order".into());
        }
    }

    // Warm-up schedule.
    let horizon = 30;
    let lambdas: Vec<f64> = (0..=horizon).map(|w| warmup(w, horizon, true)).collect();
    if lambdas[horizon] != 1.0 || lambdas.windows(2).any(|p| p[1] < p[0]) || warmup(45, horizon, true) != 1.0 {
        failures.push("warm-up not monotone to 1".into());
    }

    // Label blindness with both loss terms active.
    let sig = Network::signature(4, &[6], 3);
    let net = Network::new(ParameterSet::init_uniform(&sig, 11), Activation::Relu, 0.3).unwrap();
    let reference = RelationMatrix {
        entries: Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.6 } else { 0.2 }),
        valid: vec![true; 3],
        provenance: Provenance::ServerAggregate,
    };
    let cfg = LocalConfig {
        batch_size: 4,
        entropy_threshold: 10.0,
        perturb: PerturbConfig { noise_std: 0.1 },
        ..LocalConfig::default()
    };
    let a = tiny_unlabeled(4, vec![0, 1, 2, 0, 1, 2, 0, 1]);
    let b = tiny_unlabeled(4, vec![2, 2, 2, 2, 2, 2, 2, 2]);
    let pa = unlabeled_local_update(&net, &a, Some(&reference), 1.0, &cfg, 99).unwrap();
    let pb = unlabeled_local_update(&net, &b, Some(&reference), 1.0, &cfg, 99).unwrap();
    if pa != pb || pa == net.params {
        failures.push("unlabeled update depends on hidden targets".into());
    }

    let ok = failures.is_empty();
    verdict(
        3,
        ok,
        &if ok {
            "row-stochasticity, irm sign/identity, entropy bounds, fedavg, warm-up, label blindness".to_string()
        } else {
            failures.join("; ")
        },
    );
}

fn benchmark_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs_benchmark.toml");
    ExperimentConfig::from_path(&path).unwrap()
}

struct Benchmark {
    /// Sweep rows over n in {1, 2, 4, 8}; n = 8 is the full ten-client task.
    rows: Vec<SweepRow>,
    full_task_time: Duration,
    all_labeled: (f64, f64),
}

impl Benchmark {
    fn cell(&self, n: usize, mode: RunMode) -> &SweepRow {
        self.rows.iter().find(|r| r.value == n && r.mode == mode).expect("sweep cell")
    }
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = benchmark_config();
        let start = Instant::now();
        let mut rows = cmd_sweep(&cfg, SweepAxis::Unlabeled, &[8], &SEEDS, false).unwrap();
        let full_task_time = start.elapsed();
        rows.extend(cmd_sweep(&cfg, SweepAxis::Unlabeled, &[1, 2, 4], &SEEDS, false).unwrap());
        let mut acc = 0.0;
        let mut auc = 0.0;
        for &s in &SEEDS {
            let mut c = cfg.clone();
            c.mode = RunMode::FedavgAllLabeled;
            c.seed = s;
            let o = run_experiment(&c).unwrap();
            acc += o.test.accuracy / SEEDS.len() as f64;
            auc += o.test.auc / SEEDS.len() as f64;
        }
        Benchmark { rows, full_task_time, all_labeled: (acc, auc) }
    })
}

fn cell_summary(r: &SweepRow) -> String {
    format!("{} acc {:.2} auc {:.4}", r.mode.name(), r.accuracy.0 * 100.0, r.auc.0)
}

#[test]
fn criterion_4_semi_supervised_ordering() {
    let b = benchmark();
    let irm = b.cell(8, RunMode::Fedirm);
    let cons = b.cell(8, RunMode::FedConsistency);
    let lab = b.cell(8, RunMode::FedavgLabeledOnly);
    let failures = [irm, cons, lab].iter().map(|r| r.failures.len()).sum::<usize>();
    let ok = failures == 0
        && irm.accuracy.0 >= cons.accuracy.0
        && cons.accuracy.0 >= lab.accuracy.0
        && irm.auc.0 >= cons.auc.0
        && cons.auc.0 >= lab.auc.0
        && irm.accuracy.0 - lab.accuracy.0 >= 0.02
        && b.full_task_time < Duration::from_secs(300);
    verdict(
        4,
        ok,
        &format!(
            "{}; {}; {}; gain {:+.2} points; {:.1}s",
            cell_summary(irm),
            cell_summary(cons),
            cell_summary(lab),
            (irm.accuracy.0 - lab.accuracy.0) * 100.0,
            b.full_task_time.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_all_labeled_upper_bound() {
    let b = benchmark();
    let (acc, auc) = b.all_labeled;
    let semi = [b.cell(8, RunMode::Fedirm), b.cell(8, RunMode::FedConsistency)];
    let ok = semi.iter().all(|r| acc >= r.accuracy.0 && auc >= r.auc.0);
    verdict(
        5,
        ok,
        &format!(
            "fedavg_all_labeled acc {:.2} auc {:.4}; {}; {}",
            acc * 100.0,
            auc,
            cell_summary(semi[0]),
            cell_summary(semi[1])
        ),
    );
}

#[test]
fn criterion_6_unlabeled_sweep_shape() {
    let b = benchmark();
    let ns = [1, 2, 4, 8];
    let irm: Vec<&SweepRow> = ns.iter().map(|&n| b.cell(n, RunMode::Fedirm)).collect();
    let cons: Vec<&SweepRow> = ns.iter().map(|&n| b.cell(n, RunMode::FedConsistency)).collect();
    let monotone = irm.windows(2).all(|w| {
        let pooled = ((w[0].auc.1.powi(2) + w[1].auc.1.powi(2)) / 2.0).sqrt();
        w[1].auc.0 >= w[0].auc.0 - pooled
    });
    let dominates = irm.iter().zip(&cons).all(|(a, c)| a.auc.0 >= c.auc.0);
    let complete = irm.iter().chain(&cons).all(|r| r.failures.is_empty());
    let detail: Vec<String> = ns
        .iter()
        .zip(irm.iter().zip(&cons))
        .map(|(n, (a, c))| format!("n={n} fedirm {:.4}+-{:.4} fed_consistency {:.4}", a.auc.0, a.auc.1, c.auc.0))
        .collect();
    verdict(6, monotone && dominates && complete, &detail.join("; "));
}

#[test]
fn criterion_7_determinism_and_checkpoint() {
    let mut cfg = benchmark_config();
    cfg.federation.rounds = 4;
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let o = run_experiment(&cfg).unwrap();
        o.write(&out).unwrap();
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let identical = csvs[0] == csvs[1];

    let mut r = rng(7);
    let sig = Network::signature(16, &[256, 256], 5);
    let params = ParameterSet::init_uniform(&sig, r.gen());
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    write_checkpoint(&first, &params).unwrap();
    let loaded = read_checkpoint(&first).unwrap();
    write_checkpoint(&second, &loaded).unwrap();
    let bytes_equal = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    let values_equal = loaded
        .to_flat()
        .iter()
        .zip(params.to_flat())
        .all(|(&l, p)| l == p as f32 as f64);
    let exact = ParameterSet::new(vec![Layer {
        weight: Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 - j as f64) * 0.25),
        bias: Array1::from(vec![1.5, -0.125, 3.0]),
    }])
    .unwrap();
    write_checkpoint(&first, &exact).unwrap();
    let exact_round_trip = read_checkpoint(&first).unwrap() == exact;

    let ok = identical && bytes_equal && values_equal && exact_round_trip;
    verdict(
        7,
        ok,
        &format!(
            "metrics.csv identical {identical}; checkpoint re-encode identical {bytes_equal}; values equal stored f32 {values_equal}; f32-exact params round-trip {exact_round_trip}"
        ),
    );
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

#[test]
fn criterion_8_metrics_oracle() {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut disagreements = 0;
    for n in 2..=12 {
        for _ in 0..200 {
            let c = r.gen_range(2..=4);
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
            // Coarse scores force plenty of ties.
            let scores = Array2::from_shape_fn((n, c), |_| r.gen_range(0..5) as f64 / 4.0);
            let per_class: Vec<Option<f64>> = (0..c)
                .map(|k| {
                    let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
                    pairwise_auc(&scores.column(k).to_vec(), &pos)
                })
                .collect();
            let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
            match auc_ovr(scores.view(), &labels) {
                Ok(rep) => {
                    instances += 1;
                    let expected = defined.iter().sum::<f64>() / defined.len() as f64;
                    worst = worst.max((rep.macro_auc - expected).abs());
                    for (a, b) in rep.per_class.iter().zip(&per_class) {
                        match (a, b) {
                            (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                            (None, None) => {}
                            _ => disagreements += 1,
                        }
                    }
                }
                Err(_) if defined.is_empty() => {}
                Err(_) => disagreements += 1,
            }
        }
    }

    let mut fixtures = Vec::new();
    let two = confusion_metrics(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
    fixtures.push(two.accuracy == 0.5 && two.per_class_sensitivity == vec![Some(0.5), Some(0.5)]);
    let perfect = confusion_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    fixtures.push([perfect.accuracy, perfect.sensitivity, perfect.specificity, perfect.f1] == [1.0; 4]);
    let empty = confusion_metrics(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
    fixtures.push(empty.per_class_sensitivity[2].is_none() && empty.sensitivity == 1.0);
    let skewed = confusion_metrics(&[0, 0, 1, 2, 2, 1], &[0, 1, 1, 2, 0, 1], 3).unwrap();
    // TP = (1, 2, 1); FP = (1, 0, 1); FN = (1, 1, 0)
    fixtures.push(
        (skewed.accuracy - 4.0 / 6.0).abs() < 1e-15
            && (skewed.sensitivity - (0.5 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15
            && (skewed.f1 - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-15,
    );
    let fixtures_ok = fixtures.iter().all(|&f| f);

    let ok = worst <= 1e-12 && disagreements == 0 && fixtures_ok && instances > 1000;
    verdict(
        8,
        ok,
        &format!(
            "{instances} AUC instances with N<=12, max error {worst:.1e}, {disagreements} disagreements; confusion fixtures {}",
            if fixtures_ok { "match" } else { "differ" }
        ),
    );
}
