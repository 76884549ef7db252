//! Reference training loops: centralized, federated averaging, and
//! sequential split learning with a weight relay.

use super::{
    data_client, epoch_batches, make_optimizer, part_templates, assemble, sequential_round_time, ClientRound, Observation,
    Observer, Shards, Trained,
};
use crate::codec::{Checkpoint, DType};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::fed::{aggregate, AggregationWeights};
use crate::nn::Optimizer;
use crate::task;
use crate::tensor::{ParamSet, Part};
use crate::unet::{BodyNet, HeadNet, TailNet, UNet};

/// Trains one client's copy of a model for one round.
pub trait LocalTrainer {
    /// Starts from `global` and returns the locally trained parameters and
    /// the mean training loss.
    fn train_round(&mut self, global: &ParamSet, round: u32) -> Result<(ParamSet, f64)>;
}

/// Federated averaging over `trainers`; `on_round` sees each aggregate.
pub fn fedavg_rounds<T: LocalTrainer>(
    initial: ParamSet,
    trainers: &mut [T],
    weights: &AggregationWeights,
    rounds: u32,
    mut on_round: impl FnMut(u32, &ParamSet, &[f64]) -> Result<()>,
) -> Result<ParamSet> {
    let mut global = initial;
    for k in 1..=rounds {
        let mut locals = Vec::with_capacity(trainers.len());
        let mut losses = Vec::with_capacity(trainers.len());
        for t in trainers.iter_mut() {
            let (p, loss) = t.train_round(&global, k)?;
            locals.push(p);
            losses.push(loss);
        }
        global = aggregate(&locals, weights)?.with_round(k);
        on_round(k, &global, &losses)?;
    }
    Ok(global)
}

struct Schedule {
    seed: u64,
    shuffle_client: u32,
    local_epochs: u32,
    batch_size: usize,
    task: TaskKind,
}

impl Schedule {
    fn new(cfg: &ExperimentConfig, seed: u64, shuffle_client: u32) -> Self {
        Schedule { seed, shuffle_client, local_epochs: cfg.local_epochs, batch_size: cfg.batch_size, task: cfg.task }
    }

    /// Runs `step` over every batch of round `k`; returns (mean loss, samples, batches).
    fn round(&self, data: &Dataset, k: u32, mut step: impl FnMut(&[usize]) -> Result<f64>) -> Result<(f64, usize, usize)> {
        let (mut loss_sum, mut samples, mut batches) = (0.0, 0, 0);
        for epoch in 0..self.local_epochs {
            for idx in epoch_batches(self.seed, self.shuffle_client, k, epoch, data.len(), self.batch_size) {
                loss_sum += step(&idx)? * idx.len() as f64;
                samples += idx.len();
                batches += 1;
            }
        }
        Ok((loss_sum / samples as f64, samples, batches))
    }
}

fn monolithic_step(net: &mut UNet, opt: &mut Optimizer, data: &Dataset, task: TaskKind, idx: &[usize]) -> Result<f64> {
    let (x, y) = data.batch(idx)?;
    let out = net.forward(&x)?;
    let (loss, grad) = task::loss_and_grad(task, &out, &y)?;
    let (_, grads) = net.backward(&grad)?;
    let next = opt.step(&net.params(), &grads)?;
    net.load_params(&next)?;
    Ok(loss)
}

/// One FedAvg client: a full local model with a persistent optimizer.
struct MonolithicClient {
    net: UNet,
    opt: Optimizer,
    data: Dataset,
    schedule: Schedule,
}

impl LocalTrainer for MonolithicClient {
    fn train_round(&mut self, global: &ParamSet, round: u32) -> Result<(ParamSet, f64)> {
        self.net.load_params(global)?;
        let (net, opt, data, task) = (&mut self.net, &mut self.opt, &self.data, self.schedule.task);
        let (loss, _, _) = self.schedule.round(data, round, |idx| monolithic_step(net, opt, data, task, idx))?;
        Ok((self.net.params(), loss))
    }
}

/// Single model on the union of all training shards, in client order.
/// Batches follow client 0's shuffle stream, so with one client this is
/// the same data order every other runner uses.
pub fn run_centralized(cfg: &ExperimentConfig, seed: u64, shards: &Shards) -> Result<Trained> {
    let union = Dataset::concat(&shards.train.iter().collect::<Vec<_>>())?;
    let mut net = UNet::build(&cfg.unet_spec(), seed)?;
    let mut opt = make_optimizer(cfg);
    let schedule = Schedule::new(cfg, seed, data_client(cfg, 0));
    let mut out = Trained::default();
    out.keep(cfg, 0, || Ok(net.params()))?;
    for k in 1..=cfg.rounds {
        let (loss, samples, _) =
            schedule.round(&union, k, |idx| monolithic_step(&mut net, &mut opt, &union, cfg.task, idx))?;
        out.client_rounds.push(ClientRound { round: k, client: 0, loss, samples, messages: 0 });
        out.round_times.push((k, samples as f64 * cfg.timing.per_sample_ms));
        out.keep(cfg, k, || Ok(net.params().with_round(k)))?;
    }
    Ok(out)
}

/// Clients train the full model locally; the server averages.
pub fn run_fedavg(cfg: &ExperimentConfig, seed: u64, shards: &Shards) -> Result<Trained> {
    let init = UNet::build(&cfg.unet_spec(), seed)?;
    let initial = init.params();
    let mut clients: Vec<MonolithicClient> = shards
        .train
        .iter()
        .enumerate()
        .map(|(n, data)| MonolithicClient {
            net: init.clone(),
            opt: make_optimizer(cfg),
            data: data.clone(),
            schedule: Schedule::new(cfg, seed, data_client(cfg, n as u32)),
        })
        .collect();
    let weights = AggregationWeights::from_sizes(&shards.sizes())?;
    let mut out = Trained::default();
    out.keep(cfg, 0, || Ok(initial.clone()))?;
    let sizes = shards.sizes();
    let per_sample = cfg.timing.per_sample_ms * f64::from(cfg.local_epochs);
    fedavg_rounds(initial.clone(), &mut clients, &weights, cfg.rounds, |k, global, losses| {
        for (n, &loss) in losses.iter().enumerate() {
            let samples = sizes[n] * cfg.local_epochs as usize;
            out.client_rounds.push(ClientRound { round: k, client: n as u16, loss, samples, messages: 0 });
        }
        let slowest = sizes.iter().map(|&s| s as f64 * per_sample).fold(0.0, f64::max);
        out.round_times.push((k, slowest + 2.0 * cfg.timing.latency_ms));
        out.keep(cfg, k, || Ok(global.clone()))
    })?;
    Ok(out)
}

struct SplitClient {
    head: HeadNet,
    tail: TailNet,
    head_opt: Optimizer,
    tail_opt: Optimizer,
}

fn split_step(
    c: &mut SplitClient,
    body: &mut BodyNet,
    body_opt: &mut Optimizer,
    data: &Dataset,
    task: TaskKind,
    idx: &[usize],
) -> Result<f64> {
    let (x, y) = data.batch(idx)?;
    let (y_h, ctx) = c.head.forward(&x)?;
    let y_b = body.forward(&y_h)?;
    let out = c.tail.forward(&y_b, &ctx)?;
    let (loss, grad) = task::loss_and_grad(task, &out, &y)?;
    let (grad_b, grad_skips, tail_grads) = c.tail.backward(&grad)?;
    let (grad_h, body_grads) = body.backward(&grad_b)?;
    let head_grads = c.head.backward(&grad_h, &grad_skips, ctx)?;
    body.load_params(&body_opt.step(&body.params(), &body_grads)?)?;
    c.head.load_params(&c.head_opt.step(&c.head.params(), &head_grads)?)?;
    c.tail.load_params(&c.tail_opt.step(&c.tail.params(), &tail_grads)?)?;
    Ok(loss)
}

/// Classic split learning: one body on the server, clients visit in index
/// order each round, and each client starts from its predecessor's head
/// and tail. Nothing is averaged.
pub fn run_sequential_sl(cfg: &ExperimentConfig, seed: u64, shards: &Shards) -> Result<Trained> {
    let templates = part_templates(cfg)?;
    let (head, mut body, tail) = UNet::build(&cfg.unet_spec(), seed)?.split(cfg.split)?.into_parts();
    let mut body_opt = make_optimizer(cfg);
    let mut clients: Vec<SplitClient> = (0..cfg.clients)
        .map(|_| SplitClient {
            head: head.clone(),
            tail: tail.clone(),
            head_opt: make_optimizer(cfg),
            tail_opt: make_optimizer(cfg),
        })
        .collect();
    let observer = Observer::default();
    let mut out = Trained::default();
    out.keep(cfg, 0, || assemble(&templates, &head.params(), &body.params(), &tail.params()))?;
    // What the last client handed off: (client, encoded head and tail).
    let mut relay: Option<(u16, Vec<u8>)> = None;
    for k in 1..=cfg.rounds {
        let mut work = Vec::with_capacity(cfg.clients);
        for n in 0..cfg.clients {
            if let Some((from, bytes)) = &relay {
                let ck = Checkpoint::decode(bytes)?;
                clients[n].head.load_params(&ck.part(Part::Head))?;
                clients[n].tail.load_params(&ck.part(Part::Tail))?;
                let (to, prev) = (&clients[n], &clients[usize::from(*from)]);
                let max_abs_diff = to
                    .head
                    .params()
                    .max_abs_diff(&prev.head.params())?
                    .max(to.tail.params().max_abs_diff(&prev.tail.params())?);
                observer.record(Observation::Relay { round: k, from: *from, to: n as u16, max_abs_diff });
            }
            let c = &mut clients[n];
            let schedule = Schedule::new(cfg, seed, data_client(cfg, n as u32));
            let data = &shards.train[n];
            let (loss, samples, batches) =
                schedule.round(data, k, |idx| split_step(c, &mut body, &mut body_opt, data, cfg.task, idx))?;
            work.push(ClientRound { round: k, client: n as u16, loss, samples, messages: 4 * batches });
            let handoff = Checkpoint::from_parts(k, &[&c.head.params(), &c.tail.params()], DType::F64);
            relay = Some((n as u16, handoff.encode()?));
        }
        out.round_times.push((k, sequential_round_time(cfg, &work)));
        out.client_rounds.extend(work);
        let last = clients.last().ok_or_else(|| Error::config("no clients"))?;
        out.keep(cfg, k, || assemble(&templates, &last.head.params(), &body.params(), &last.tail.params()))?;
    }
    out.observations = observer.snapshot();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Minimises `(theta - target)^2` with plain gradient steps.
    struct Quadratic {
        target: f64,
        opt: Optimizer,
        epochs: u32,
    }

    impl LocalTrainer for Quadratic {
        fn train_round(&mut self, global: &ParamSet, _round: u32) -> Result<(ParamSet, f64)> {
            let mut p = global.clone();
            let mut loss = 0.0;
            for _ in 0..self.epochs {
                let theta = p.get("theta").unwrap().data()[0];
                loss = (theta - self.target).powi(2);
                let mut g = ParamSet::new(Part::Full);
                g.insert("theta", Tensor::scalar(2.0 * (theta - self.target)));
                p = self.opt.step(&p, &g)?;
            }
            Ok((p, loss))
        }
    }

    fn theta(v: f64) -> ParamSet {
        let mut p = ParamSet::new(Part::Full);
        p.insert("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn two_client_quadratic_matches_hand_trace() {
        // eta = 0.25: each local step maps theta to (theta + target) / 2.
        // Round 1: 0 -> {0.5, 1.5} -> 1.0; round 2: {1.0, 2.0} -> 1.5;
        // round 3: {1.25, 2.25} -> 1.75.
        let mut clients = [1.0, 3.0].map(|target| Quadratic { target, opt: Optimizer::sgd(0.25), epochs: 1 });
        let w = AggregationWeights::from_sizes(&[5, 5]).unwrap();
        let mut trace = Vec::new();
        fedavg_rounds(theta(0.0), &mut clients, &w, 3, |_, g, _| {
            trace.push(g.get("theta").unwrap().data()[0]);
            Ok(())
        })
        .unwrap();
        assert_eq!(trace, vec![1.0, 1.5, 1.75]);
    }

    #[test]
    fn unequal_weights_quadratic_trace() {
        // Weights 1/4, 3/4, two local steps: round 1 locals 0.75 and 2.25
        // average to 1.875.
        let mut clients = [1.0, 3.0].map(|target| Quadratic { target, opt: Optimizer::sgd(0.25), epochs: 2 });
        let w = AggregationWeights::from_sizes(&[1, 3]).unwrap();
        let out = fedavg_rounds(theta(0.0), &mut clients, &w, 1, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.get("theta").unwrap().data()[0], 1.875);
    }
}
