//! Training runners: the split-federated protocol and its baselines.
//!
//! Every runner consumes the same shards, shuffle streams and initial
//! parameters, so differences between methods come from the method alone.

mod baselines;
mod rosfl;

use std::sync::{Arc, Mutex};

use serde::Serialize;

pub use baselines::{fedavg_rounds, run_centralized, run_fedavg, run_sequential_sl, LocalTrainer};
pub use rosfl::{run_rosfl, AggregationServerNode, BodySession, ClientNode, ComputationServerNode};

use crate::codec::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::data::{gen_shard, Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{psnr, MetricRecord};
use crate::nn::Optimizer;
use crate::rng::{Purpose, RngStream, StreamId};
use crate::task;
use crate::tensor::{ParamSet, Part};
use crate::unet::{UNet, UNetSpec};
use crate::wire::TraceEvent;

/// Which party a state snapshot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    ComputationServer,
    AggregationServer,
}

impl Role {
    /// Parts this role may hold.
    pub fn owns(self, part: Part) -> bool {
        match self {
            Role::Client | Role::AggregationServer => matches!(part, Part::Head | Part::Tail),
            Role::ComputationServer => part == Part::Body,
        }
    }
}

/// Facts recorded by parties between phases, for invariant checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Observation {
    /// Parts present in a party's state.
    Holds { role: Role, client: Option<u16>, round: u32, parts: Vec<Part> },
    /// Distance of a body replica from the broadcast body at round start.
    ReplicaReset { client: u16, round: u32, max_abs_diff: f64 },
    /// Distance between what a client received in a relay and what its
    /// predecessor handed off.
    Relay { round: u32, from: u16, to: u16, max_abs_diff: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct Observer(Arc<Mutex<Vec<Observation>>>);

impl Observer {
    pub fn record(&self, obs: Observation) {
        self.0.lock().unwrap().push(obs);
    }

    pub fn holds(&self, role: Role, client: Option<u16>, round: u32, sets: &[&ParamSet]) {
        let parts = sets.iter().map(|s| s.part).collect();
        self.record(Observation::Holds { role, client, round, parts });
    }

    pub fn snapshot(&self) -> Vec<Observation> {
        self.0.lock().unwrap().clone()
    }
}

/// Work done by one client in one round, fed to the timing model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClientRound {
    pub round: u32,
    pub client: u16,
    pub loss: f64,
    pub samples: usize,
    pub messages: usize,
}

/// Raw outcome of a runner before evaluation.
#[derive(Clone, Debug, Default)]
pub struct Trained {
    /// Post-aggregation (and post-correction) full models, by round, for
    /// evaluation and checkpoint rounds. Round 0 is the initial model.
    pub history: Vec<(u32, ParamSet)>,
    pub client_rounds: Vec<ClientRound>,
    /// Simulated wall-clock per round, milliseconds.
    pub round_times: Vec<(u32, f64)>,
    pub trace: Vec<TraceEvent>,
    pub observations: Vec<Observation>,
}

impl Trained {
    fn keep(&mut self, cfg: &ExperimentConfig, round: u32, params: impl FnOnce() -> Result<ParamSet>) -> Result<()> {
        if round == 0 || cfg.is_eval_round(round) || cfg.is_checkpoint_round(round) {
            self.history.push((round, params()?.with_round(round)));
        }
        Ok(())
    }
}

/// Train and test shards per client.
#[derive(Clone, Debug)]
pub struct Shards {
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

impl Shards {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Shards> {
        let mut train = Vec::with_capacity(cfg.clients);
        let mut test = Vec::with_capacity(cfg.clients);
        for n in 0..cfg.clients as u32 {
            let src = data_client(cfg, n);
            train.push(gen_shard(cfg.task, &cfg.data, seed, src, Split::Train, cfg.train_samples)?);
            test.push(gen_shard(cfg.task, &cfg.data, seed, src, Split::Test, cfg.test_samples)?);
        }
        Ok(Shards { train, test })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.train.iter().map(Dataset::len).collect()
    }

    /// Share of floored low-dose measurements over all generated pixels.
    pub fn clamp_rate(&self) -> f64 {
        let all = self.train.iter().chain(&self.test);
        let (clamped, pixels) = all.fold((0, 0), |(c, p), d| (c + d.clamped, p + d.inputs.len()));
        clamped as f64 / pixels.max(1) as f64
    }
}

/// The client whose samples and shuffle stream client `n` uses.
pub fn data_client(cfg: &ExperimentConfig, n: u32) -> u32 {
    if cfg.identical_shards {
        0
    } else {
        n
    }
}

/// Mini-batches of one local epoch; the permutation comes from
/// `(seed, Shuffle, client, round, epoch)`.
pub fn epoch_batches(seed: u64, client: u32, round: u32, epoch: u32, len: usize, batch: usize) -> Vec<Vec<usize>> {
    let id = StreamId::new(Purpose::Shuffle, client).with(u64::from(round), u64::from(epoch));
    let perm = RngStream::new(seed, id).permutation(len);
    perm.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub fn make_optimizer(cfg: &ExperimentConfig) -> Optimizer {
    Optimizer::new(cfg.optimizer.kind, cfg.optimizer.lr, cfg.optimizer.weight_decay)
}

/// Empty parameter templates `(head, body, tail, full)` fixing names and
/// order for `spec` split at `level`.
pub fn part_templates(cfg: &ExperimentConfig) -> Result<[ParamSet; 4]> {
    let net = UNet::build(&cfg.unet_spec(), 0)?;
    let full = net.params();
    let (h, b, t) = net.split(cfg.split)?.into_parts();
    Ok([h.params(), b.params(), t.params(), full])
}

/// Full model from its three parts, in monolithic order.
pub fn assemble(templates: &[ParamSet; 4], head: &ParamSet, body: &ParamSet, tail: &ParamSet) -> Result<ParamSet> {
    ParamSet::merge(Part::Full, &[head, body, tail])?.select_like(&templates[3])
}

/// `(head, body, tail)` of a full model.
pub fn disassemble(templates: &[ParamSet; 4], full: &ParamSet) -> Result<[ParamSet; 3]> {
    Ok([full.select_like(&templates[0])?, full.select_like(&templates[1])?, full.select_like(&templates[2])?])
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<MetricRecord>,
    /// Part checkpoints at checkpoint rounds, ascending.
    pub checkpoints: Vec<Checkpoint>,
    pub final_model: ParamSet,
    pub trace: Vec<TraceEvent>,
    pub observations: Vec<Observation>,
    pub client_rounds: Vec<ClientRound>,
}

impl RunOutput {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("the final round is always checkpointed")
    }

    pub fn metric(&self, round: u32, client: Option<u32>, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.round == round && m.client == client && m.name == name)
            .map(|m| m.value)
    }

    /// Mean of a metric over the evaluated rounds among the last `last`.
    pub fn tail_mean(&self, client: Option<u32>, name: &str, rounds: u32, last: u32) -> Option<f64> {
        let vals: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.client == client && m.name == name && m.round + last > rounds && m.round >= 1)
            .map(|m| m.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Runs `cfg.method` with `seed` on freshly generated shards.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let shards = Shards::generate(cfg, seed)?;
    run_with_shards(cfg, seed, &shards)
}

pub fn run_with_shards(cfg: &ExperimentConfig, seed: u64, shards: &Shards) -> Result<RunOutput> {
    if shards.train.len() != cfg.clients || shards.test.len() != cfg.clients {
        return Err(Error::config(format!("{} shards for {} clients", shards.train.len(), cfg.clients)));
    }
    let trained = match cfg.method {
        Method::Rosfl => run_rosfl(cfg, seed, shards)?,
        Method::Fedavg => run_fedavg(cfg, seed, shards)?,
        Method::Sl => run_sequential_sl(cfg, seed, shards)?,
        Method::Central => run_centralized(cfg, seed, shards)?,
    };
    finish(cfg, seed, shards, trained)
}

fn finish(cfg: &ExperimentConfig, seed: u64, shards: &Shards, trained: Trained) -> Result<RunOutput> {
    let templates = part_templates(cfg)?;
    let spec = cfg.unet_spec();
    let mut metrics = input_metrics(cfg, shards)?;
    for r in &trained.client_rounds {
        metrics.push(MetricRecord::new(r.round, Some(u32::from(r.client)), "loss", r.loss)?);
    }
    for &(round, ms) in &trained.round_times {
        metrics.push(MetricRecord::new(round, None, "round_time_ms", ms)?);
    }
    let mut checkpoints = Vec::new();
    for (round, full) in &trained.history {
        if *round >= 1 && cfg.is_eval_round(*round) {
            metrics.extend(evaluate(cfg, &spec, full, shards, *round)?);
        }
        if *round >= 1 && cfg.is_checkpoint_round(*round) {
            let [h, b, t] = disassemble(&templates, full)?;
            checkpoints.push(Checkpoint::from_parts(*round, &[&h, &b, &t], cfg.precision.dtype()));
        }
    }
    metrics.sort_by(|a, b| (a.round, a.client.map_or(0, |c| c + 1), &a.name).cmp(&(b.round, b.client.map_or(0, |c| c + 1), &b.name)));
    let final_model = trained
        .history
        .iter()
        .find(|(r, _)| *r == cfg.rounds)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| Error::misuse("runner did not keep the final model"))?;
    Ok(RunOutput {
        method: cfg.method,
        seed,
        metrics,
        checkpoints,
        final_model,
        trace: trained.trace,
        observations: trained.observations,
        client_rounds: trained.client_rounds,
    })
}

/// Round-0 records: input quality and the low-dose clamp rate.
fn input_metrics(cfg: &ExperimentConfig, shards: &Shards) -> Result<Vec<MetricRecord>> {
    let mut out = vec![MetricRecord::new(0, None, "clamp_rate", shards.clamp_rate())?];
    if cfg.task == TaskKind::Restoration {
        let mut total = 0.0;
        for (n, test) in shards.test.iter().enumerate() {
            let mut sum = 0.0;
            for i in 0..test.len() {
                let (x, y) = test.batch(&[i])?;
                sum += crate::metrics::psnr_capped(&x, &y, 1.0)?;
            }
            let mean = sum / test.len() as f64;
            total += mean;
            out.push(MetricRecord::new(0, Some(n as u32), "input_psnr", mean)?);
        }
        out.push(MetricRecord::new(0, None, "input_psnr", total / shards.test.len() as f64)?);
    }
    Ok(out)
}

/// Per-client test metrics of a full model plus their client mean.
pub fn evaluate(cfg: &ExperimentConfig, spec: &UNetSpec, full: &ParamSet, shards: &Shards, round: u32) -> Result<Vec<MetricRecord>> {
    let mut net = UNet::build(spec, 0)?;
    net.load_params(full)?;
    let mut out = Vec::new();
    let mut sums: Vec<(&'static str, f64)> = Vec::new();
    for (n, test) in shards.test.iter().enumerate() {
        let pred = net.forward(&test.inputs)?;
        let mut vals = task::evaluate(cfg.task, &pred, &test.targets)?;
        vals.push(("test_loss", task::loss(cfg.task, &pred, &test.targets)?));
        for (i, (name, v)) in vals.into_iter().enumerate() {
            out.push(MetricRecord::new(round, Some(n as u32), name, v)?);
            match sums.get_mut(i) {
                Some(s) => s.1 += v,
                None => sums.push((name, v)),
            }
        }
    }
    let clients = shards.test.len() as f64;
    for (name, total) in sums {
        out.push(MetricRecord::new(round, None, name, total / clients)?);
    }
    Ok(out)
}

/// PSNR of a restoration model's output against clean targets; exposed for
/// calibration checks.
pub fn model_psnr(spec: &UNetSpec, full: &ParamSet, data: &Dataset) -> Result<f64> {
    let mut net = UNet::build(spec, 0)?;
    net.load_params(full)?;
    psnr(&net.forward(&data.inputs)?, &data.targets, 1.0)
}

/// Round time when clients work in parallel and meet at a barrier: the
/// slowest client plus one weights download and one upload.
pub fn parallel_round_time(cfg: &ExperimentConfig, work: &[ClientRound]) -> f64 {
    let t = &cfg.timing;
    let slowest = work.iter().map(|w| client_time(cfg, w)).fold(0.0, f64::max);
    slowest + 2.0 * t.latency_ms
}

/// Round time when clients take turns, each receiving the relayed weights
/// before training.
pub fn sequential_round_time(cfg: &ExperimentConfig, work: &[ClientRound]) -> f64 {
    work.iter().map(|w| cfg.timing.latency_ms + client_time(cfg, w)).sum()
}

fn client_time(cfg: &ExperimentConfig, w: &ClientRound) -> f64 {
    w.messages as f64 * cfg.timing.latency_ms + w.samples as f64 * cfg.timing.per_sample_ms
}
