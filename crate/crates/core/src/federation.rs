//! Server-side orchestration: synchronous rounds, FedAvg aggregation and
//! relation-matrix collection and broadcast.
//!
//! The aggregate relation collected at the end of round `w` supervises
//! unlabeled clients in round `w + 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, RunMode};
use crate::data::{self, Dataset, FederationSplit};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalResult};
use crate::numerics::{write_checkpoint, Activation, Mode, Network, ParameterSet};
use crate::relation::{
    aggregate_relations, labeled_relation, matrix_csv, matrix_csv_rows, mc_dropout_uncertainty,
    unlabeled_relation, RelationMatrix,
};
use crate::seed::{self, tag};
use crate::training::{labeled_local_update, unlabeled_local_update, warmup, LocalConfig};

/// Message from a client to the server after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterSet,
    pub samples: usize,
    /// Present exactly for labeled clients.
    pub relation: Option<RelationMatrix>,
}

/// Message from the server to every client at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundBroadcast {
    pub round: usize,
    pub params: ParameterSet,
    pub relation: Option<RelationMatrix>,
}

/// Sample-count weighted parameter average.
///
/// Updates are processed in ascending client-id order, so the result is
/// bit-identical under any permutation of the input. The lowest-id update
/// acts as the anchor, `theta = theta_0 + sum_k (N_k / N) (theta_k - theta_0)`,
/// which returns identical inputs unchanged.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    if updates.is_empty() {
        return Err(Error::invalid("fedavg needs at least one client update"));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    for pair in ordered.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::invalid(format!("duplicate update from client {}", pair[0].client_id)));
        }
    }
    let anchor = &ordered[0].params;
    for u in &ordered {
        if u.samples == 0 {
            return Err(Error::invalid(format!("client {} reports zero samples", u.client_id)));
        }
        u.params.check_compatible(anchor).map_err(|e| {
            Error::invalid(format!("client {}: {e}", u.client_id))
        })?;
    }
    let total: usize = ordered.iter().map(|u| u.samples).sum();
    let mut out = anchor.clone();
    for u in &ordered[1..] {
        let mut delta = u.params.clone();
        delta.add_scaled(anchor, -1.0);
        out.add_scaled(&delta, u.samples as f64 / total as f64);
    }
    Ok(out)
}

/// Static settings shared by every round of an experiment.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub activation: Activation,
    pub dropout: f64,
    pub local: LocalConfig,
    pub mode: RunMode,
}

impl RoundConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            activation: cfg.model.activation,
            dropout: cfg.model.dropout,
            local: cfg.local_config(),
            mode: cfg.mode,
        }
    }

    fn network(&self, params: ParameterSet) -> Network {
        Network {
            params,
            activation: self.activation,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub lambda: f64,
    pub validation: EvalResult,
}

/// Server-owned state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentState {
    pub params: ParameterSet,
    /// Completed aggregations.
    pub round: usize,
    pub history: Vec<RoundMetrics>,
    pub root_seed: u64,
    /// Aggregate relation to broadcast next round.
    pub relation: Option<RelationMatrix>,
}

impl ExperimentState {
    pub fn new(params: ParameterSet, root_seed: u64) -> Self {
        Self {
            params,
            round: 0,
            history: Vec::new(),
            root_seed,
            relation: None,
        }
    }

    pub fn broadcast(&self) -> RoundBroadcast {
        RoundBroadcast {
            round: self.round,
            params: self.params.clone(),
            relation: self.relation.clone(),
        }
    }
}

enum ClientRef<'a> {
    Labeled(&'a data::LabeledClient),
    Unlabeled(&'a data::UnlabeledClient),
}

fn client_update(
    client: &ClientRef,
    broadcast: &RoundBroadcast,
    cfg: &RoundConfig,
    lambda: f64,
    round_seed: u64,
) -> Result<ClientUpdate> {
    let global = cfg.network(broadcast.params.clone());
    match client {
        ClientRef::Labeled(c) => {
            let params = labeled_local_update(&global, c, &cfg.local, seed::client_seed(round_seed, c.id))?;
            let local = global.with_params(params);
            let relation = labeled_relation(&local, c, cfg.local.temperature)?;
            Ok(ClientUpdate {
                client_id: c.id,
                params: local.params,
                samples: c.len(),
                relation: Some(relation),
            })
        }
        ClientRef::Unlabeled(c) => {
            let params = unlabeled_local_update(
                &global,
                c,
                broadcast.relation.as_ref(),
                lambda,
                &cfg.local,
                seed::client_seed(round_seed, c.id),
            )?;
            Ok(ClientUpdate {
                client_id: c.id,
                params,
                samples: c.len(),
                relation: None,
            })
        }
    }
}

/// Output of one round besides the new state.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub broadcast_had_relation: bool,
    pub updates: usize,
    pub lambda: f64,
}

/// One synchronous round: broadcast, local training on every participating
/// client, FedAvg, relation aggregation, validation.
pub fn run_round(
    state: &ExperimentState,
    split: &FederationSplit,
    cfg: &RoundConfig,
) -> Result<(ExperimentState, RoundOutcome)> {
    let broadcast = state.broadcast();
    let lambda = warmup(broadcast.round, cfg.local.warmup_horizon, cfg.local.warmup_squared);
    let round_seed = seed::round_seed(state.root_seed, broadcast.round);

    let mut clients: Vec<ClientRef> = split.labeled.iter().map(ClientRef::Labeled).collect();
    if cfg.mode.uses_unlabeled() {
        clients.extend(split.unlabeled.iter().map(ClientRef::Unlabeled));
    }
    let results: Vec<Result<ClientUpdate>> = clients
        .par_iter()
        .map(|c| {
            let id = match c {
                ClientRef::Labeled(l) => l.id,
                ClientRef::Unlabeled(u) => u.id,
            };
            client_update(c, &broadcast, cfg, lambda, round_seed).map_err(|e| Error::Client {
                client_id: id,
                source: Box::new(e),
            })
        })
        .collect();
    let updates: Vec<ClientUpdate> = results.into_iter().collect::<Result<_>>()?;

    let params = fedavg(&updates)?;
    let labeled_relations: Vec<RelationMatrix> =
        updates.iter().filter_map(|u| u.relation.clone()).collect();
    let relation = Some(aggregate_relations(&labeled_relations)?);

    let validation = evaluate_dataset(&cfg.network(params.clone()), &split.validation)?;
    let mut history = state.history.clone();
    history.push(RoundMetrics {
        round: broadcast.round,
        lambda,
        validation,
    });
    let next = ExperimentState {
        params,
        round: state.round + 1,
        history,
        root_seed: state.root_seed,
        relation,
    };
    Ok((
        next,
        RoundOutcome {
            broadcast_had_relation: broadcast.relation.is_some(),
            updates: updates.len(),
            lambda,
        },
    ))
}

/// Builds the source dataset described by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Blobs => data::generate_blobs(
            d.classes,
            d.per_class,
            d.dim,
            d.spread,
            seed::derive(cfg.seed, tag::DATA),
        ),
        DataSource::Idx => {
            let images = d.images.as_ref().ok_or_else(|| Error::Config("missing data.images".into()))?;
            let labels = d.labels.as_ref().ok_or_else(|| Error::Config("missing data.labels".into()))?;
            data::load_idx(images, labels, d.standardize)
        }
    }
}

/// Dataset plus federation split for a resolved config.
pub fn build_split(cfg: &ExperimentConfig) -> Result<FederationSplit> {
    let dataset = load_dataset(cfg)?;
    let fed = &cfg.federation;
    let split = data::partition(&dataset, fed.clients, fed.labeled, seed::derive(cfg.seed, tag::PARTITION))?;
    split.limit_unlabeled(cfg.unlabeled_count())
}

pub fn initial_params(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> ParameterSet {
    let sig = Network::signature(input_dim, &cfg.model.hidden, classes);
    ParameterSet::init_uniform(&sig, seed::derive(cfg.seed, tag::INIT))
}

/// Relation matrices captured after a round for offline analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDump {
    pub round: usize,
    pub aggregate: RelationMatrix,
    pub unlabeled_sample: Option<RelationMatrix>,
}

impl RelationDump {
    /// CSV with a leading `matrix` column: `labeled_aggregate`,
    /// `unlabeled_sample` and `abs_difference` blocks.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = matrix_csv(Some("labeled_aggregate"), &self.aggregate.entries, &self.aggregate.valid);
        if let Some(u) = &self.unlabeled_sample {
            out.push_str(&matrix_csv_rows(Some("unlabeled_sample"), &u.entries, &u.valid));
            let (diff, valid) = self.aggregate.abs_difference(u)?;
            out.push_str(&matrix_csv_rows(Some("abs_difference"), &diff, &valid));
        }
        Ok(out)
    }
}

/// Unlabeled relation of the global model on the first minibatch of the
/// first unlabeled client, estimated as during local training.
pub fn sample_unlabeled_relation(
    net: &Network,
    split: &FederationSplit,
    local: &LocalConfig,
    sample_seed: u64,
) -> Result<Option<RelationMatrix>> {
    let Some(client) = split.unlabeled.first() else {
        return Ok(None);
    };
    if net.dropout <= 0.0 {
        return Ok(None);
    }
    let n = client.len().min(local.batch_size);
    let batch = client.features.select(Axis(0), &(0..n).collect::<Vec<_>>());
    let view = data::perturb_batch(&batch, client.image_shape, &local.perturb, seed::derive(sample_seed, tag::PERTURB));
    let out = net.forward(view.view(), Mode::Train { seed: seed::derive(sample_seed, tag::DROPOUT) })?;
    let report = mc_dropout_uncertainty(net, batch.view(), local.mc_passes, local.entropy_threshold, seed::derive(sample_seed, tag::MC))?;
    let values = if local.unlabeled_uses_logits { &out.logits } else { &out.probs };
    unlabeled_relation(values.view(), &report, local.temperature).map(Some)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub history: Vec<RoundMetrics>,
    pub best_round: usize,
    pub best_params: ParameterSet,
    pub final_params: ParameterSet,
    pub test: EvalResult,
    pub relations: Vec<RelationDump>,
}

/// Runs every round of a config, selects the round with the best validation
/// AUC (earliest on ties) and scores it on the test set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let cfg = cfg.resolved()?;
    let split = build_split(&cfg)?;
    let classes = split.validation.classes;
    let round_cfg = RoundConfig::from_experiment(&cfg);
    let mut state = ExperimentState::new(initial_params(&cfg, split.validation.dim(), classes), cfg.seed);
    let mut best: Option<(usize, f64, ParameterSet)> = None;
    let mut relations = Vec::with_capacity(cfg.federation.rounds);
    for _ in 0..cfg.federation.rounds {
        let (next, _) = run_round(&state, &split, &round_cfg)?;
        state = next;
        let metrics = state.history.last().expect("round appended metrics");
        if best.as_ref().map_or(true, |(_, auc, _)| metrics.validation.auc > *auc) {
            best = Some((metrics.round, metrics.validation.auc, state.params.clone()));
        }
        let global = round_cfg.network(state.params.clone());
        let sample_seed = seed::derive(seed::round_seed(cfg.seed, metrics.round), tag::SAMPLE);
        relations.push(RelationDump {
            round: metrics.round,
            aggregate: state.relation.clone().expect("aggregate relation after a round"),
            unlabeled_sample: sample_unlabeled_relation(&global, &split, &round_cfg.local, sample_seed)?,
        });
    }
    let (best_round, _, best_params) = best.expect("at least one round");
    let test = evaluate_dataset(&round_cfg.network(best_params.clone()), &split.test)?;
    Ok(ExperimentOutcome {
        config: cfg,
        history: state.history,
        best_round,
        best_params,
        final_params: state.params,
        test,
        relations,
    })
}

pub const METRICS_HEADER: &str = "round,split,auc,sensitivity,specificity,accuracy,f1,lambda";

impl ExperimentOutcome {
    /// Validation rows for every round, then one test row for the selected round.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{METRICS_HEADER}");
        for m in &self.history {
            let _ = writeln!(out, "{},val,{},{:.6}", m.round, m.validation.csv_fields(), m.lambda);
        }
        let lambda = self.history[self.best_round].lambda;
        let _ = writeln!(out, "{},test,{},{lambda:.6}", self.best_round, self.test.csv_fields());
        out
    }

    /// Writes `metrics.csv`, `config.resolved`, `report.txt`,
    /// `checkpoints/{best,final}.ckpt` and `relations/round_{w}.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let ckpt = dir.join("checkpoints");
        let rel = dir.join("relations");
        for d in [dir, &ckpt, &rel] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let write = |path: &Path, text: &str| fs::write(path, text).map_err(|e| Error::io(path, e));
        write(&dir.join("metrics.csv"), &self.metrics_csv())?;
        write(&dir.join("config.resolved"), &self.config.to_toml())?;
        let report = format!(
            "mode {}\nbest round {}\n{}",
            self.config.mode.name(),
            self.best_round,
            self.test.report()
        );
        write(&dir.join("report.txt"), &report)?;
        write_checkpoint(&ckpt.join("best.ckpt"), &self.best_params)?;
        write_checkpoint(&ckpt.join("final.ckpt"), &self.final_params)?;
        for r in &self.relations {
            write(&rel.join(format!("round_{}.csv", r.round)), &r.to_csv()?)?;
        }
        Ok(())
    }
}
