//! Clients, the computation server and the aggregation server.
//!
//! Each party runs on its own thread and talks to the others only through
//! [`Endpoint`]s. The computation server runs one session thread per client;
//! sessions hand their trained replica to the server's coordinator through
//! an in-party channel and block until the next round's body arrives.

use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};

use super::{
    assemble, data_client, epoch_batches, make_optimizer, parallel_round_time, part_templates, ClientRound, Observation,
    Observer, Role, Shards, Trained,
};
use crate::codec::DType;
use crate::config::{ExperimentConfig, TransportKind};
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::fed::{aggregate, correct, AggregationWeights, AnchorStore, DwcsConfig};
use crate::nn::Optimizer;
use crate::task;
use crate::tensor::{ParamSet, Part};
use crate::unet::{BodyNet, HeadNet, TailNet, UNet};
use crate::wire::{Endpoint, MessageKind, TcpHub, Trace, WireMessage};

/// Settings every client shares.
#[derive(Clone, Debug)]
struct ClientSettings {
    seed: u64,
    local_epochs: u32,
    batch_size: usize,
    task: TaskKind,
    dtype: DType,
}

pub struct ClientNode {
    id: u16,
    shuffle_client: u32,
    head: HeadNet,
    tail: TailNet,
    head_opt: Optimizer,
    tail_opt: Optimizer,
    shard: Dataset,
    agg: Endpoint,
    comp: Endpoint,
    settings: ClientSettings,
    observer: Observer,
}

impl ClientNode {
    /// Parts present in this client's state.
    pub fn held_parts(&self) -> Vec<Part> {
        vec![self.head.params().part, self.tail.params().part]
    }

    /// Serves rounds until the aggregation server says `Shutdown`.
    pub fn run(mut self) -> Result<Vec<ClientRound>> {
        let mut rounds = Vec::new();
        loop {
            let msg = self.agg.recv()?;
            match msg.kind {
                MessageKind::WeightsDown => rounds.push(self.train_round(&msg)?),
                MessageKind::Shutdown => {
                    self.comp.send(&WireMessage::control(MessageKind::Shutdown, msg.round, self.id))?;
                    return Ok(rounds);
                }
                other => return Err(Error::protocol(format!("client {} got {other:?} from aggregation", self.id))),
            }
        }
    }

    fn train_round(&mut self, down: &WireMessage) -> Result<ClientRound> {
        let k = down.round;
        for set in down.param_sets()? {
            match set.part {
                Part::Head => self.head.load_params(&set)?,
                Part::Tail => self.tail.load_params(&set)?,
                other => return Err(Error::protocol(format!("client received {} weights", other.prefix()))),
            }
        }
        self.observer.holds(Role::Client, Some(self.id), k, &[&self.head.params(), &self.tail.params()]);
        self.comp.send(&WireMessage::control(MessageKind::RoundBegin, k, self.id))?;
        let s = self.settings.clone();
        let (mut loss_sum, mut samples, mut messages) = (0.0, 0, 0);
        for epoch in 0..s.local_epochs {
            let batches = epoch_batches(s.seed, self.shuffle_client, k, epoch, self.shard.len(), s.batch_size);
            for (b, idx) in batches.iter().enumerate() {
                let loss = self.train_batch(k, epoch as u16, b as u32, idx)?;
                loss_sum += loss * idx.len() as f64;
                samples += idx.len();
                messages += 4;
            }
        }
        self.comp.send(&WireMessage::control(MessageKind::RoundEnd, k, self.id))?;
        let (head, tail) = (self.head.params(), self.tail.params());
        self.agg.send(&WireMessage::weights(MessageKind::WeightsUp, k, self.id, &[&head, &tail], s.dtype))?;
        Ok(ClientRound { round: k, client: self.id, loss: loss_sum / samples as f64, samples, messages })
    }

    fn train_batch(&mut self, k: u32, epoch: u16, batch: u32, idx: &[usize]) -> Result<f64> {
        let dtype = self.settings.dtype;
        let (x, y) = self.shard.batch(idx)?;
        let (y_h, ctx) = self.head.forward(&x)?;
        self.comp.send(&WireMessage::data(MessageKind::ActUp, k, self.id, epoch, batch, y_h, dtype))?;
        let y_b = expect_addressed(&mut self.comp, MessageKind::ActDown, k, self.id, epoch, batch)?;
        let out = self.tail.forward(&y_b, &ctx)?;
        let (loss, grad) = task::loss_and_grad(self.settings.task, &out, &y)?;
        let (grad_b, grad_skips, tail_grads) = self.tail.backward(&grad)?;
        self.comp.send(&WireMessage::data(MessageKind::GradUp, k, self.id, epoch, batch, grad_b, dtype))?;
        let grad_h = expect_addressed(&mut self.comp, MessageKind::GradDown, k, self.id, epoch, batch)?;
        let head_grads = self.head.backward(&grad_h, &grad_skips, ctx)?;
        let head = self.head_opt.step(&self.head.params(), &head_grads)?;
        self.head.load_params(&head)?;
        let tail = self.tail_opt.step(&self.tail.params(), &tail_grads)?;
        self.tail.load_params(&tail)?;
        Ok(loss)
    }
}

fn expect_addressed(ep: &mut Endpoint, kind: MessageKind, k: u32, client: u16, epoch: u16, batch: u32) -> Result<crate::tensor::Tensor> {
    let msg = ep.expect(kind)?;
    if (msg.round, msg.client, msg.epoch, msg.batch) != (k, client, epoch, batch) {
        return Err(Error::protocol(format!(
            "{kind:?} addressed to ({}, {}, {}, {}), expected ({k}, {client}, {epoch}, {batch})",
            msg.round, msg.client, msg.epoch, msg.batch
        )));
    }
    msg.into_tensor()
}

type Handoff = Result<(u16, u32, ParamSet)>;

/// The computation server's per-client body replica.
pub struct BodySession {
    client: u16,
    replica: BodyNet,
    /// The body the replica was last reset to.
    broadcast: ParamSet,
    opt: Optimizer,
    ep: Endpoint,
    dtype: DType,
    handoff: Sender<Handoff>,
    next_body: Receiver<ParamSet>,
    observer: Observer,
}

impl BodySession {
    pub fn held_parts(&self) -> Vec<Part> {
        vec![self.replica.params().part]
    }

    fn run(mut self) {
        let handoff = self.handoff.clone();
        if let Err(e) = self.serve() {
            let _ = handoff.send(Err(e));
        }
    }

    fn serve(&mut self) -> Result<()> {
        loop {
            let msg = self.ep.recv()?;
            match msg.kind {
                MessageKind::RoundBegin => self.serve_round(msg.round)?,
                MessageKind::Shutdown => return Ok(()),
                other => return Err(Error::protocol(format!("body session {} got {other:?} between rounds", self.client))),
            }
        }
    }

    fn serve_round(&mut self, k: u32) -> Result<()> {
        let max_abs_diff = self.replica.params().max_abs_diff(&self.broadcast)?;
        self.observer.record(Observation::ReplicaReset { client: self.client, round: k, max_abs_diff });
        self.observer.holds(Role::ComputationServer, Some(self.client), k, &[&self.replica.params()]);
        let mut pending: Option<(u16, u32)> = None;
        loop {
            let msg = self.ep.recv()?;
            if msg.round != k || msg.client != self.client {
                return Err(Error::protocol(format!("{:?} for round {} client {} in session {k}/{}", msg.kind, msg.round, msg.client, self.client)));
            }
            match (msg.kind, pending) {
                (MessageKind::ActUp, None) => {
                    let y_b = self.replica.forward(msg.tensor()?)?;
                    pending = Some((msg.epoch, msg.batch));
                    self.ep.send(&WireMessage::data(MessageKind::ActDown, k, self.client, msg.epoch, msg.batch, y_b, self.dtype))?;
                }
                (MessageKind::GradUp, Some(addr)) if addr == (msg.epoch, msg.batch) => {
                    let (grad_h, grads) = self.replica.backward(msg.tensor()?)?;
                    let next = self.opt.step(&self.replica.params(), &grads)?;
                    self.replica.load_params(&next)?;
                    pending = None;
                    self.ep.send(&WireMessage::data(MessageKind::GradDown, k, self.client, msg.epoch, msg.batch, grad_h, self.dtype))?;
                }
                (MessageKind::RoundEnd, None) => break,
                (kind, _) => {
                    return Err(Error::protocol(format!(
                        "{kind:?} out of sequence for client {} batch ({}, {})",
                        self.client, msg.epoch, msg.batch
                    )))
                }
            }
        }
        self.handoff.send(Ok((self.client, k, self.replica.params()))).map_err(|_| Error::ChannelClosed)?;
        let next = self.next_body.recv().map_err(|_| Error::ChannelClosed)?;
        self.replica.load_params(&next)?;
        self.broadcast = next;
        Ok(())
    }
}

/// Owns the global body, its anchor, and the sessions.
pub struct ComputationServerNode {
    body: ParamSet,
    anchors: AnchorStore,
    weights: AggregationWeights,
    dwcs: Option<DwcsConfig>,
    rounds: u32,
    keep: Vec<u32>,
    sessions: Vec<JoinHandle<()>>,
    handoff: Receiver<Handoff>,
    broadcast: Vec<Sender<ParamSet>>,
    observer: Observer,
}

impl ComputationServerNode {
    fn new(cfg: &ExperimentConfig, seed: u64, weights: AggregationWeights, endpoints: Vec<Endpoint>, observer: Observer) -> Result<Self> {
        let (_, body, _) = UNet::build(&cfg.unet_spec(), seed)?.split(cfg.split)?.into_parts();
        let initial = body.params().with_round(0);
        let mut anchors = AnchorStore::new();
        anchors.update(initial.clone())?;
        let (handoff_tx, handoff) = mpsc::channel();
        let mut broadcast = Vec::new();
        let mut sessions = Vec::new();
        for (n, ep) in endpoints.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel();
            broadcast.push(tx);
            let session = BodySession {
                client: n as u16,
                replica: body.clone(),
                broadcast: initial.clone(),
                opt: make_optimizer(cfg),
                ep,
                dtype: cfg.precision.dtype(),
                handoff: handoff_tx.clone(),
                next_body: rx,
                observer: observer.clone(),
            };
            sessions.push(thread::Builder::new().name(format!("body-{n}")).spawn(move || session.run())?);
        }
        let keep = (1..=cfg.rounds).filter(|&k| cfg.is_eval_round(k) || cfg.is_checkpoint_round(k)).collect();
        Ok(ComputationServerNode {
            body: initial,
            anchors,
            weights,
            dwcs: cfg.dwcs_active(),
            rounds: cfg.rounds,
            keep,
            sessions,
            handoff,
            broadcast,
            observer,
        })
    }

    pub fn held_parts(&self) -> Vec<Part> {
        vec![self.body.part]
    }

    /// Aggregates replicas each round; returns the kept body history.
    fn run(mut self) -> Result<Vec<(u32, ParamSet)>> {
        let result = self.coordinate();
        // Dropping the broadcast senders releases any session still waiting.
        self.broadcast.clear();
        for s in self.sessions.drain(..) {
            let _ = s.join();
        }
        result
    }

    fn coordinate(&mut self) -> Result<Vec<(u32, ParamSet)>> {
        let n = self.broadcast.len();
        let mut history = vec![(0, self.body.clone())];
        for k in 1..=self.rounds {
            let mut replicas: Vec<Option<ParamSet>> = vec![None; n];
            for _ in 0..n {
                let (client, round, params) = self.handoff.recv().map_err(|_| Error::ChannelClosed)??;
                if round != k || replicas[usize::from(client)].replace(params).is_some() {
                    return Err(Error::protocol(format!("unexpected replica from client {client} for round {round}")));
                }
            }
            let replicas: Vec<ParamSet> = replicas.into_iter().map(Option::unwrap).collect();
            let averaged = aggregate(&replicas, &self.weights)?;
            self.body = correct_part(averaged, &mut self.anchors, self.dwcs, k)?;
            self.observer.holds(Role::ComputationServer, None, k, &[&self.body]);
            if self.keep.contains(&k) {
                history.push((k, self.body.clone()));
            }
            for tx in &self.broadcast {
                tx.send(self.body.clone()).map_err(|_| Error::ChannelClosed)?;
            }
        }
        Ok(history)
    }
}

/// Applies the drift correction when enabled and advances the anchor.
fn correct_part(averaged: ParamSet, anchors: &mut AnchorStore, dwcs: Option<DwcsConfig>, k: u32) -> Result<ParamSet> {
    let next = match dwcs {
        Some(cfg) => {
            let anchor = anchors.get(averaged.part).ok_or_else(|| Error::misuse("missing anchor"))?;
            correct(&averaged, anchor, &cfg, k)?
        }
        None => averaged,
    }
    .with_round(k);
    anchors.update(next.clone())?;
    Ok(next)
}

/// Owns the global head and tail and their anchors.
pub struct AggregationServerNode {
    head: ParamSet,
    tail: ParamSet,
    anchors: AnchorStore,
    weights: AggregationWeights,
    dwcs: Option<DwcsConfig>,
    rounds: u32,
    keep: Vec<u32>,
    dtype: DType,
    endpoints: Vec<Endpoint>,
    observer: Observer,
}

impl AggregationServerNode {
    fn new(cfg: &ExperimentConfig, seed: u64, weights: AggregationWeights, endpoints: Vec<Endpoint>, observer: Observer) -> Result<Self> {
        let (head, _, tail) = UNet::build(&cfg.unet_spec(), seed)?.split(cfg.split)?.into_parts();
        let (head, tail) = (head.params().with_round(0), tail.params().with_round(0));
        let mut anchors = AnchorStore::new();
        anchors.update(head.clone())?;
        anchors.update(tail.clone())?;
        Ok(AggregationServerNode {
            head,
            tail,
            anchors,
            weights,
            dwcs: cfg.dwcs_active(),
            rounds: cfg.rounds,
            keep: (1..=cfg.rounds).filter(|&k| cfg.is_eval_round(k) || cfg.is_checkpoint_round(k)).collect(),
            dtype: cfg.precision.dtype(),
            endpoints,
            observer,
        })
    }

    pub fn held_parts(&self) -> Vec<Part> {
        vec![self.head.part, self.tail.part]
    }

    /// Drives all rounds; returns the kept `(round, head, tail)` history.
    fn run(mut self) -> Result<Vec<(u32, ParamSet, ParamSet)>> {
        let mut history = vec![(0, self.head.clone(), self.tail.clone())];
        for k in 1..=self.rounds {
            for (n, ep) in self.endpoints.iter_mut().enumerate() {
                ep.send(&WireMessage::weights(MessageKind::WeightsDown, k, n as u16, &[&self.head, &self.tail], self.dtype))?;
            }
            let mut heads = Vec::with_capacity(self.endpoints.len());
            let mut tails = Vec::with_capacity(self.endpoints.len());
            for (n, ep) in self.endpoints.iter_mut().enumerate() {
                let up = ep.expect(MessageKind::WeightsUp)?;
                if (up.round, usize::from(up.client)) != (k, n) {
                    return Err(Error::protocol(format!("upload for round {} client {} on link {n}", up.round, up.client)));
                }
                match up.param_sets()?.as_slice() {
                    [h, t] if h.part == Part::Head && t.part == Part::Tail => {
                        heads.push(h.clone());
                        tails.push(t.clone());
                    }
                    _ => return Err(Error::protocol("uploads must carry head then tail")),
                }
            }
            self.head = correct_part(aggregate(&heads, &self.weights)?, &mut self.anchors, self.dwcs, k)?;
            self.tail = correct_part(aggregate(&tails, &self.weights)?, &mut self.anchors, self.dwcs, k)?;
            self.observer.holds(Role::AggregationServer, None, k, &[&self.head, &self.tail]);
            if self.keep.contains(&k) {
                history.push((k, self.head.clone(), self.tail.clone()));
            }
        }
        for (n, ep) in self.endpoints.iter_mut().enumerate() {
            ep.send(&WireMessage::control(MessageKind::Shutdown, self.rounds, n as u16))?;
        }
        Ok(history)
    }
}

/// Links from every client to both servers: `(client side, server side)`
/// per server, ordered by client.
struct Links {
    agg_clients: Vec<Endpoint>,
    agg_server: Vec<Endpoint>,
    comp_clients: Vec<Endpoint>,
    comp_server: Vec<Endpoint>,
}

fn inproc_links(n: usize) -> Links {
    let (agg_clients, agg_server) = (0..n).map(|_| Endpoint::pair()).unzip();
    let (comp_clients, comp_server) = (0..n).map(|_| Endpoint::pair()).unzip();
    Links { agg_clients, agg_server, comp_clients, comp_server }
}

fn tcp_links(n: usize) -> Result<Links> {
    let agg_hub = TcpHub::bind("127.0.0.1:0")?;
    let comp_hub = TcpHub::bind("127.0.0.1:0")?;
    let (agg_addr, comp_addr) = (agg_hub.local_addr()?, comp_hub.local_addr()?);
    let acceptor = thread::spawn(move || -> Result<(Vec<Endpoint>, Vec<Endpoint>)> {
        Ok((agg_hub.accept_clients(n)?, comp_hub.accept_clients(n)?))
    });
    let mut agg_clients = Vec::with_capacity(n);
    for id in 0..n {
        agg_clients.push(Endpoint::connect(agg_addr, id as u16)?);
    }
    let mut comp_clients = Vec::with_capacity(n);
    for id in 0..n {
        comp_clients.push(Endpoint::connect(comp_addr, id as u16)?);
    }
    let (agg_server, comp_server) = acceptor.join().map_err(|_| Error::misuse("acceptor panicked"))??;
    Ok(Links { agg_clients, agg_server, comp_clients, comp_server })
}

/// Picks the most informative of several party failures: a root cause
/// rather than the channel closures it triggered elsewhere.
fn first_cause(errors: Vec<Error>) -> Option<Error> {
    let mut errors = errors.into_iter();
    let first = errors.next()?;
    if !matches!(first, Error::ChannelClosed) {
        return Some(first);
    }
    Some(errors.find(|e| !matches!(e, Error::ChannelClosed)).unwrap_or(first))
}

fn join<T>(h: JoinHandle<Result<T>>, what: &str) -> Result<T> {
    h.join().map_err(|_| Error::misuse(format!("{what} thread panicked")))?
}

/// Runs the split-federated protocol with one thread per party.
pub fn run_rosfl(cfg: &ExperimentConfig, seed: u64, shards: &Shards) -> Result<Trained> {
    let n = cfg.clients;
    let weights = AggregationWeights::from_sizes(&shards.sizes())?;
    let trace = Trace::new();
    let observer = Observer::default();
    let links = match cfg.transport {
        TransportKind::Inproc => inproc_links(n),
        TransportKind::Tcp => tcp_links(n)?,
    };
    let traced = |eps: Vec<Endpoint>| -> Vec<Endpoint> { eps.into_iter().map(|e| e.with_trace(trace.clone())).collect() };
    let (agg_clients, agg_server) = (traced(links.agg_clients), traced(links.agg_server));
    let (comp_clients, comp_server) = (traced(links.comp_clients), traced(links.comp_server));

    let settings = ClientSettings {
        seed,
        local_epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        task: cfg.task,
        dtype: cfg.precision.dtype(),
    };
    let mut clients = Vec::with_capacity(n);
    for (id, (agg, comp)) in agg_clients.into_iter().zip(comp_clients).enumerate() {
        let (head, _, tail) = UNet::build(&cfg.unet_spec(), seed)?.split(cfg.split)?.into_parts();
        let node = ClientNode {
            id: id as u16,
            shuffle_client: data_client(cfg, id as u32),
            head,
            tail,
            head_opt: make_optimizer(cfg),
            tail_opt: make_optimizer(cfg),
            shard: shards.train[id].clone(),
            agg,
            comp,
            settings: settings.clone(),
            observer: observer.clone(),
        };
        clients.push(thread::Builder::new().name(format!("client-{id}")).spawn(move || node.run())?);
    }
    let comp = ComputationServerNode::new(cfg, seed, weights.clone(), comp_server, observer.clone())?;
    let comp = thread::Builder::new().name("computation".into()).spawn(move || comp.run())?;
    let agg = AggregationServerNode::new(cfg, seed, weights, agg_server, observer.clone())?;
    let agg = thread::Builder::new().name("aggregation".into()).spawn(move || agg.run())?;

    let mut errors = Vec::new();
    let mut client_rounds = Vec::new();
    for (id, h) in clients.into_iter().enumerate() {
        match join(h, &format!("client {id}")) {
            Ok(r) => client_rounds.extend(r),
            Err(e) => errors.push(e),
        }
    }
    let bodies = join(comp, "computation server").map_err(|e| errors.push(e));
    let heads = join(agg, "aggregation server").map_err(|e| errors.push(e));
    if let Some(e) = first_cause(errors) {
        return Err(e);
    }
    let (bodies, heads) = (bodies.unwrap_or_default(), heads.unwrap_or_default());

    let templates = part_templates(cfg)?;
    let mut out = Trained { trace: trace.events(), observations: observer.snapshot(), ..Trained::default() };
    for ((k, head, tail), (kb, body)) in heads.iter().zip(&bodies) {
        if k != kb {
            return Err(Error::misuse(format!("server histories disagree: round {k} vs {kb}")));
        }
        out.history.push((*k, assemble(&templates, head, body, tail)?.with_round(*k)));
    }
    client_rounds.sort_by_key(|r| (r.round, r.client));
    for k in 1..=cfg.rounds {
        let work: Vec<ClientRound> = client_rounds.iter().filter(|r| r.round == k).copied().collect();
        out.round_times.push((k, parallel_round_time(cfg, &work)));
    }
    out.client_rounds = client_rounds;
    Ok(out)
}
