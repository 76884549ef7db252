//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion ids (e.g. `1 4 ablation-mu`) after
//! `--` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rosfl::codec::Checkpoint;
use rosfl::config::{ExperimentConfig, Method, TransportKind};
use rosfl::data::{simulate_low_dose, NoiseConfig, TaskKind};
use rosfl::experiment::{run_mu_sweep, run_round_epoch_tradeoff, summarize, RunSummary};
use rosfl::fed::{aggregate, alpha, correct, AggregationWeights, Direction, DwcsConfig};
use rosfl::nn::{
    finite_diff_grad, max_relative_error, ConcatChannels, Conv2d, Layer, MaxPool2x2, OptimizerKind, Relu, Upsample2x,
};
use rosfl::parties::{run, run_with_shards, Shards};
use rosfl::rng::RngStream;
use rosfl::unet::{SplitPlan, TaskHead, UNet, UNetSpec};
use rosfl::wire::{Endpoint, MessageKind, TcpHub, WireMessage};
use rosfl::{ParamSet, Part, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    /// Hard limit; exceeding it fails the criterion.
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "1", name: "layer gradients vs finite differences", limit: minutes(1), run: gradient_oracle },
    Criterion { id: "2", name: "split transparency", limit: minutes(1), run: split_transparency },
    Criterion { id: "3", name: "weighted aggregation", limit: None, run: aggregation },
    Criterion { id: "4", name: "weight correction closed form", limit: None, run: correction_closed_form },
    Criterion { id: "5", name: "reduction equivalences", limit: minutes(5), run: reductions },
    Criterion { id: "6", name: "wire protocol and tcp transport", limit: minutes(5), run: protocol },
    Criterion { id: "7", name: "heterogeneous restoration, correction on vs off", limit: None, run: heterogeneity },
    Criterion { id: "8", name: "low-dose noise model", limit: minutes(1), run: noise_model },
    Criterion { id: "9", name: "centralized learnability", limit: minutes(15), run: learnability },
    Criterion { id: "ablation-mu", name: "correction strength sweep", limit: None, run: mu_sweep },
    Criterion { id: "ablation-re", name: "rounds vs local epochs at fixed budget", limit: None, run: round_epoch },
];

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id)) {
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let took = start.elapsed();
        let over = c.limit.is_some_and(|l| took > l);
        let pass = outcome.pass && !over;
        let limit = c.limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
        println!(
            "criterion {:<11} {} {}: {} [{:.1}s{limit}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            outcome.detail,
            took.as_secs_f64()
        );
        failed += usize::from(!pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- helpers

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn set(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new(Part::Full);
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

fn get(p: &ParamSet, name: &str) -> Tensor {
    p.get(name).unwrap().clone()
}

fn restoration_cfg(method: Method, clients: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(method);
    cfg.clients = clients;
    cfg.model.depth = 3;
    cfg.model.base_channels = 4;
    cfg.data.size = 16;
    cfg.train_samples = 6;
    cfg.test_samples = 2;
    cfg.batch_size = 4;
    cfg.optimizer.kind = OptimizerKind::Sgd;
    cfg.optimizer.lr = 0.05;
    cfg.dwcs.enabled = false;
    cfg
}

fn checkpoint_diff(a: &Checkpoint, b: &Checkpoint) -> f64 {
    assert_eq!(a.records.len(), b.records.len());
    a.records
        .iter()
        .zip(&b.records)
        .map(|(x, y)| {
            assert_eq!(x.name, y.name);
            x.tensor.max_abs_diff(&y.tensor).unwrap()
        })
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------ criterion 1

const GRAD_TOL: f64 = 1e-6;
const FD_EPS: f64 = 1e-5;
const SHAPES_PER_KIND: usize = 20;

/// Worst relative error of one layer check: `inputs` are perturbed by the
/// oracle, `analytic` holds the hand-written gradients under the same names.
fn layer_error(inputs: &ParamSet, analytic: &ParamSet, loss: impl FnMut(&ParamSet) -> rosfl::Result<f64>) -> f64 {
    let fd = finite_diff_grad(loss, inputs, FD_EPS).unwrap();
    max_relative_error(analytic, &fd).unwrap()
}

fn conv_case(rng: &mut RngStream, k: usize) -> f64 {
    let (b, cin, cout) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
    let x = rand_tensor(rng, &[b, cin, h, w]);
    let weight = rand_tensor(rng, &[cout, cin, k, k]);
    let bias = rand_tensor(rng, &[cout]);
    let r = rand_tensor(rng, &[b, cout, h, w]);
    let mut layer = Conv2d::from_params(weight.clone(), bias.clone()).unwrap();
    layer.forward(&x).unwrap();
    let g = layer.backward(&r).unwrap();
    let mut analytic = set(vec![("x", g.input)]);
    for (n, t) in g.params {
        analytic.insert(n, t);
    }
    let inputs = set(vec![("x", x), ("weight", weight), ("bias", bias)]);
    layer_error(&inputs, &analytic, |p| {
        let mut l = Conv2d::from_params(get(p, "weight"), get(p, "bias"))?;
        Ok(dot(&l.forward(&get(p, "x"))?, &r))
    })
}

fn single_input_case<L: Layer + Default>(x: Tensor, rng: &mut RngStream) -> f64 {
    let mut layer = L::default();
    let out = layer.forward(&x).unwrap();
    let r = rand_tensor(rng, out.shape());
    let g = layer.backward(&r).unwrap();
    layer_error(&set(vec![("x", x)]), &set(vec![("x", g.input)]), |p| Ok(dot(&L::default().forward(&get(p, "x"))?, &r)))
}

fn dims(rng: &mut RngStream, even: bool) -> [usize; 4] {
    let side = |rng: &mut RngStream| if even { 2 * (1 + rng.below(4)) } else { 1 + rng.below(6) };
    [1 + rng.below(2), 1 + rng.below(3), side(rng), side(rng)]
}

fn relu_case(rng: &mut RngStream) -> f64 {
    let shape = dims(rng, false);
    // Keep every input at least 0.05 from the kink.
    let x = Tensor::from_fn(&shape, |_| {
        let m = rng.uniform(0.05, 1.0);
        if rng.rng().random_bool(0.5) { m } else { -m }
    });
    single_input_case::<Relu>(x, rng)
}

fn maxpool_case(rng: &mut RngStream) -> f64 {
    let shape = dims(rng, true);
    let n: usize = shape.iter().product();
    // Distinct values 0.01 apart so no perturbation changes a window's argmax.
    let perm = rng.permutation(n);
    let x = Tensor::new(shape.to_vec(), perm.iter().map(|&i| i as f64 * 0.01 - 0.5).collect()).unwrap();
    single_input_case::<MaxPool2x2>(x, rng)
}

fn upsample_case(rng: &mut RngStream) -> f64 {
    let shape = dims(rng, false);
    let x = rand_tensor(rng, &shape);
    single_input_case::<Upsample2x>(x, rng)
}

fn concat_case(rng: &mut RngStream) -> f64 {
    let [b, c1, h, w] = dims(rng, false);
    let c2 = 1 + rng.below(3);
    let a = rand_tensor(rng, &[b, c1, h, w]);
    let s = rand_tensor(rng, &[b, c2, h, w]);
    let r = rand_tensor(rng, &[b, c1 + c2, h, w]);
    let mut layer = ConcatChannels::new();
    layer.forward(&a, &s).unwrap();
    let (ga, gs) = layer.backward(&r).unwrap();
    layer_error(&set(vec![("a", a), ("s", s)]), &set(vec![("a", ga), ("s", gs)]), |p| {
        Ok(dot(&ConcatChannels::new().forward(&get(p, "a"), &get(p, "s"))?, &r))
    })
}

fn unet_case(rng: &mut RngStream, seed: u64) -> f64 {
    let spec = UNetSpec {
        depth: 2 + rng.below(2),
        base_channels: 2,
        in_channels: 1,
        out_channels: 1 + rng.below(2),
        height: 8,
        width: 8,
        head: TaskHead::RegressionLinear,
    };
    let mut net = UNet::build(&spec, seed).unwrap();
    // Zero-initialised biases put dead channels exactly on the ReLU kink;
    // random parameters move every pre-activation off it.
    let mut params = net.params();
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
    net.load_params(&params).unwrap();
    let x = rand_tensor(rng, &[1, 1, 8, 8]);
    let r = rand_tensor(rng, &[1, spec.out_channels, 8, 8]);
    net.forward(&x).unwrap();
    let (_, grads) = net.backward(&r).unwrap();
    let fd = finite_diff_grad(
        |p| {
            let mut n = UNet::build(&spec, seed)?;
            n.load_params(p)?;
            Ok(dot(&n.forward(&x)?, &r))
        },
        &params,
        FD_EPS,
    )
    .unwrap();
    max_relative_error(&grads, &fd).unwrap()
}

fn gradient_oracle() -> Outcome {
    let mut rng = common::stream(101);
    let kinds: [(&str, &dyn Fn(&mut RngStream) -> f64); 6] = [
        ("conv3x3", &|r| conv_case(r, 3)),
        ("conv1x1", &|r| conv_case(r, 1)),
        ("relu", &relu_case),
        ("maxpool2x2", &maxpool_case),
        ("upsample2x", &upsample_case),
        ("concat", &concat_case),
    ];
    let mut worst = Vec::new();
    for (name, case) in kinds {
        let e = (0..SHAPES_PER_KIND).map(|_| case(&mut rng)).fold(0.0, f64::max);
        worst.push((name, e));
    }
    let composite = (0..3).map(|s| unet_case(&mut rng, s)).fold(0.0, f64::max);
    worst.push(("unet", composite));
    let pass = worst.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("max rel err {detail} (tol {GRAD_TOL:e}, {SHAPES_PER_KIND} shapes per layer)"))
}

// ------------------------------------------------------------ criterion 2

const FORWARD_TOL: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-8;

fn split_transparency() -> Outcome {
    let mut rng = common::stream(202);
    let (mut worst_fwd, mut worst_grad, mut two_path) = (0.0f64, 0.0f64, true);
    let mut configs = Vec::new();
    for case in 0..10u64 {
        let depth = 2 + rng.below(2);
        let level = 1 + rng.below(depth - 1);
        let seg = rng.rng().random_bool(0.5);
        let spec = UNetSpec {
            depth,
            base_channels: 2 + rng.below(3),
            in_channels: 1,
            out_channels: if seg { 3 } else { 1 },
            height: 16,
            width: 16,
            head: if seg { TaskHead::SegmentationSoftmax } else { TaskHead::RegressionLinear },
        };
        configs.push(format!("L{depth}s{level}"));
        let x = rand_tensor(&mut rng, &[2, 1, 16, 16]);
        let g = rand_tensor(&mut rng, &[2, spec.out_channels, 16, 16]);

        let mut mono = UNet::build(&spec, case).unwrap();
        let y_mono = mono.forward(&x).unwrap();
        let (_, grads_mono) = mono.backward(&g).unwrap();

        let mut split = UNet::build(&spec, case).unwrap().split(SplitPlan { level }).unwrap();
        let (head_out, ctx) = split.split_forward(&x).unwrap();
        let body_out = split.body_forward(&head_out).unwrap();
        let y_split = split.tail_forward(&body_out, &ctx).unwrap();
        let (g_body_out, g_skips, g_tail) = split.tail_backward(&g).unwrap();
        let (g_head_out, g_body) = split.body_backward(&g_body_out).unwrap();
        let g_head = split.head_backward(&g_head_out, &g_skips, ctx).unwrap();
        let merged = ParamSet::merge(Part::Full, &[&g_head, &g_body, &g_tail]).unwrap();

        worst_fwd = worst_fwd.max(y_mono.max_abs_diff(&y_split).unwrap());
        worst_grad = worst_grad.max(grads_mono.max_abs_diff(&merged).unwrap());

        // Dropping either path must change the head gradient.
        let mut probe = UNet::build(&spec, case).unwrap().split(SplitPlan { level }).unwrap();
        let (ho, ctx) = probe.split_forward(&x).unwrap();
        let bo = probe.body_forward(&ho).unwrap();
        probe.tail_forward(&bo, &ctx).unwrap();
        let (gbo, gs, _) = probe.tail_backward(&g).unwrap();
        let (gho, _) = probe.body_backward(&gbo).unwrap();
        let zeros: Vec<Tensor> = gs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let body_only = probe.head_backward(&gho, &zeros, ctx).unwrap();
        two_path &= body_only.max_abs_diff(&g_head).unwrap() > 0.0;
    }
    let pass = worst_fwd <= FORWARD_TOL && worst_grad <= GRADIENT_TOL && two_path;
    Outcome::new(
        pass,
        format!(
            "10 configs [{}]: forward max diff {worst_fwd:.1e} (tol {FORWARD_TOL:e}), gradient max diff {worst_grad:.1e} (tol {GRADIENT_TOL:e}), skip path contributes to head gradient: {two_path}",
            configs.join(" ")
        ),
    )
}

// ------------------------------------------------------------ criterion 3

const AGG_TOL: f64 = 1e-12;

fn naive_weighted_sum(sets: &[ParamSet], w: &[f64]) -> Vec<f64> {
    let flat: Vec<Vec<f64>> = sets.iter().map(ParamSet::flatten).collect();
    let mut out = vec![0.0; flat[0].len()];
    for (i, f) in flat.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w[i] * v;
        }
    }
    out
}

fn aggregation() -> Outcome {
    let mut rng = common::stream(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 1 + rng.below(8);
        let shapes = common::shapes(rng.rng(), 4);
        let sets: Vec<ParamSet> = (0..n).map(|_| common::params(rng.rng(), Part::Body, &shapes)).collect();
        let w = AggregationWeights::from_sizes(&common::sizes(rng.rng(), n)).unwrap();
        let got = aggregate(&sets, &w).unwrap().flatten();
        for (a, b) in got.iter().zip(naive_weighted_sum(&sets, w.as_slice())) {
            worst = worst.max((a - b).abs());
        }
    }

    // Part-wise vs whole on real U-Net parameter layouts.
    let spec = restoration_cfg(Method::Rosfl, 4).unet_spec();
    let mut exact = true;
    for level in 1..spec.depth {
        let split = UNet::build(&spec, 0).unwrap().split(SplitPlan { level }).unwrap();
        let templates = [split.head.params(), split.body.params(), split.tail.params()];
        let base = split.params().unwrap();
        let clients: Vec<ParamSet> = (0..4)
            .map(|_| {
                let noise = Tensor::from_fn(&[base.numel()], |_| rng.uniform(-0.1, 0.1));
                let mut it = noise.data().iter();
                let mut c = base.clone();
                for (_, t) in c.iter_mut() {
                    for v in t.data_mut() {
                        *v += it.next().unwrap();
                    }
                }
                c
            })
            .collect();
        let w = AggregationWeights::from_sizes(&[3, 7, 11, 5]).unwrap();
        let whole = aggregate(&clients, &w).unwrap();
        let parts: Vec<ParamSet> = templates
            .iter()
            .map(|t| aggregate(&clients.iter().map(|c| c.select_like(t).unwrap()).collect::<Vec<_>>(), &w).unwrap())
            .collect();
        let merged = ParamSet::merge(Part::Full, &parts.iter().collect::<Vec<_>>()).unwrap();
        exact &= merged
            .flatten()
            .iter()
            .zip(whole.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Outcome::new(
        worst <= AGG_TOL && exact,
        format!("50 random cases vs naive: max diff {worst:.1e} (tol {AGG_TOL:e}); head+body+tail aggregation bit-identical to whole: {exact}"),
    )
}

// ------------------------------------------------------------ criterion 4

const DWCS_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-10;

fn correction_closed_form() -> Outcome {
    let mut rng = common::stream(404);
    let (mut worst, mut worst_norm, mut identities) = (0.0f64, 0.0f64, true);
    for case in 0..200 {
        let shapes = if case % 2 == 0 { vec![vec![1]] } else { common::shapes(rng.rng(), 3) };
        let cur = common::params(rng.rng(), Part::Head, &shapes);
        let prev = common::params(rng.rng(), Part::Head, &shapes);
        let k = 1 + rng.below(300) as u32;
        let dir = if rng.rng().random_bool(0.5) { Direction::Extrapolate } else { Direction::Stabilize };
        let cfg = DwcsConfig { mu: 10f64.powf(rng.uniform(-6.0, 2.0)), eta: 10f64.powf(rng.uniform(-5.0, -2.0)), beta: rng.uniform(0.0, 0.999), direction: dir };
        let got = correct(&cur, &prev, &cfg, k).unwrap();

        // Hand evaluation: gradient of (mu/2)||theta - anchor||^2, correction model, blend.
        let a = (1.0 - 1.0 / (f64::from(k) + 1.0)).min(cfg.beta);
        let sign = if dir == Direction::Stabilize { -1.0 } else { 1.0 };
        for ((g, c), p) in got.flatten().iter().zip(cur.flatten()).zip(prev.flatten()) {
            let grad = cfg.mu * (c - p);
            let theta_c = c + sign * cfg.eta * grad;
            worst = worst.max((g - ((1.0 - a) * c + a * theta_c)).abs());
        }

        let moved = got.zip_map(&cur, |r, c| r - c).unwrap().sq_norm().sqrt();
        let drift = cur.zip_map(&prev, |c, p| c - p).unwrap().sq_norm().sqrt();
        let want = alpha(k, cfg.beta) * cfg.eta * cfg.mu * drift;
        worst_norm = worst_norm.max((moved - want).abs());

        let still = correct(&cur, &cur, &cfg, k).unwrap();
        let off = correct(&cur, &prev, &DwcsConfig { mu: 0.0, ..cfg }, k).unwrap();
        identities &= still == cur && off == cur;
    }
    Outcome::new(
        worst <= DWCS_TOL && worst_norm <= NORM_TOL && identities,
        format!(
            "200 cases: max diff vs hand formula {worst:.1e} (tol {DWCS_TOL:e}), norm identity abs err {worst_norm:.1e} (tol {NORM_TOL:e}), unchanged model and zero strength are exact identities: {identities}"
        ),
    )
}

// ------------------------------------------------------------ criterion 5

const FEDAVG_TOL: f64 = 1e-8;

fn reductions() -> Outcome {
    let mut bit_exact = true;
    for task in [TaskKind::Restoration, TaskKind::Segmentation] {
        let mut cfg = restoration_cfg(Method::Rosfl, 1);
        cfg.task = task;
        cfg.rounds = 5;
        let split = run(&cfg, 21).unwrap();
        cfg.method = Method::Central;
        let central = run(&cfg, 21).unwrap();
        bit_exact &= split.final_model == central.final_model
            && split.final_model.max_abs_diff(&central.final_model).unwrap() == 0.0;
    }

    let mut cfg = restoration_cfg(Method::Rosfl, 4);
    cfg.rounds = 10;
    cfg.local_epochs = 1;
    cfg.train_samples = 5;
    let shards = Shards::generate(&cfg, 22).unwrap();
    let split = run_with_shards(&cfg, 22, &shards).unwrap();
    cfg.method = Method::Fedavg;
    let fedavg = run_with_shards(&cfg, 22, &shards).unwrap();
    let diff = split.final_model.max_abs_diff(&fedavg.final_model).unwrap();
    Outcome::new(
        bit_exact && diff <= FEDAVG_TOL,
        format!(
            "(a) one client, no correction, SGD, both tasks bit-identical to centralized: {bit_exact}; (b) four clients after 10 rounds vs monolithic FedAvg: max diff {diff:.1e} (tol {FEDAVG_TOL:e})"
        ),
    )
}

// ------------------------------------------------------------ criterion 6

const TCP_TOL: f64 = 1e-12;

fn protocol() -> Outcome {
    let mut rng = common::stream(606);
    let msgs: Vec<WireMessage> = (0..1000).map(|_| common::random_message(rng.rng())).collect();
    let codec_ok = msgs.iter().all(|m| {
        let bytes = m.encode().unwrap();
        let back = WireMessage::decode(&bytes).unwrap();
        back == *m && back.encode().unwrap() == bytes
    });

    // The same messages over a real socket; Shutdown closes a channel, so it
    // is sent last.
    let hub = TcpHub::bind("127.0.0.1:0").unwrap();
    let addr = hub.local_addr().unwrap();
    let mut ordered: Vec<&WireMessage> = msgs.iter().filter(|m| m.kind != MessageKind::Shutdown).collect();
    ordered.push(msgs.iter().find(|m| m.kind == MessageKind::Shutdown).unwrap());
    let sender = std::thread::spawn({
        let ordered: Vec<WireMessage> = ordered.iter().map(|m| (*m).clone()).collect();
        move || {
            let mut ep = Endpoint::connect(addr, 0).unwrap();
            for m in &ordered {
                ep.send(m).unwrap();
            }
        }
    });
    let mut rx = hub.accept_clients(1).unwrap().pop().unwrap();
    let socket_ok = ordered.iter().all(|m| rx.recv().map(|got| got == **m).unwrap_or(false));
    sender.join().unwrap();

    let mut cfg = restoration_cfg(Method::Rosfl, 4);
    cfg.rounds = 4;
    cfg.dwcs.enabled = true;
    cfg.dwcs.mu = 1.0;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.lr = 1e-3;
    let shards = Shards::generate(&cfg, 31).unwrap();
    let inproc = run_with_shards(&cfg, 31, &shards).unwrap();
    cfg.transport = TransportKind::Tcp;
    let tcp = run_with_shards(&cfg, 31, &shards).unwrap();
    let diff = checkpoint_diff(inproc.final_checkpoint(), tcp.final_checkpoint());
    Outcome::new(
        codec_ok && socket_ok && diff <= TCP_TOL,
        format!(
            "1000 random messages bit-exact through codec: {codec_ok}, through tcp loopback: {socket_ok}; 4-client tcp final checkpoint vs in-process max diff {diff:.1e} (tol {TCP_TOL:e})"
        ),
    )
}

// ------------------------------------------------------------ criterion 7

const HET_PSNR_TOL: f64 = 0.1;
const HET_SPREAD_TOL: f64 = 0.5;

/// Four-client heterogeneous restoration at 32x32 with the default client
/// dose levels.
fn heterogeneous_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Method::Rosfl);
    cfg.clients = 4;
    cfg.rounds = 50;
    cfg.local_epochs = 1;
    cfg.model.depth = 3;
    cfg.model.base_channels = 8;
    cfg.data.size = 32;
    cfg.train_samples = 16;
    cfg.test_samples = 8;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 1e-3;
    cfg
}

fn summary_of(cfg: &ExperimentConfig) -> RunSummary {
    let outputs: Vec<_> = cfg.seeds.iter().map(|&s| run(cfg, s).unwrap()).collect();
    summarize(cfg, &outputs).unwrap()
}

fn heterogeneity() -> Outcome {
    let mut on = heterogeneous_cfg();
    on.seeds = vec![0, 1, 2];
    let mut off = on.clone();
    off.dwcs.enabled = false;
    let (s_on, s_off) = (summary_of(&on), summary_of(&off));
    let pass = s_on.mean_final >= s_off.mean_final - HET_PSNR_TOL && s_on.mean_spread <= s_off.mean_spread + HET_SPREAD_TOL;
    Outcome::new(
        pass,
        format!(
            "3 seeds, 50 rounds: PSNR with correction {:.3} dB vs without {:.3} dB (tol {HET_PSNR_TOL}), client spread {:.3} vs {:.3} dB (tol {HET_SPREAD_TOL}), noisy input {:.3} dB",
            s_on.mean_final,
            s_off.mean_final,
            s_on.mean_spread,
            s_off.mean_spread,
            s_on.input_psnr.unwrap_or(f64::NAN)
        ),
    )
}

// ------------------------------------------------------------ criterion 8

const DRAWS: usize = 10_000;

/// Exact mean and variance of `p_hat - ln(max(d, 1) / lambda)` with
/// `d = Poisson(lambda) + Normal(0, s2)`, by quadrature over both terms.
fn reference_moments(p_hat: f64, i0: f64, s2: f64) -> (f64, f64) {
    let lambda = i0 * (-p_hat).exp();
    let f = |d: f64| p_hat - (d.max(1.0) / lambda).ln();
    let sd = s2.sqrt();
    let normal_nodes: Vec<(f64, f64)> = if sd == 0.0 {
        vec![(0.0, 1.0)]
    } else {
        let m = 401;
        let z: Vec<f64> = (0..m).map(|i| -10.0 + 20.0 * i as f64 / (m - 1) as f64).collect();
        let w: Vec<f64> = z.iter().map(|z| (-0.5 * z * z).exp()).collect();
        let total: f64 = w.iter().sum();
        z.iter().zip(&w).map(|(z, w)| (z * sd, w / total)).collect()
    };
    // Poisson weights by recurrence outward from the mode, then normalised.
    let mode = lambda.floor();
    let span = (12.0 * lambda.sqrt() + 12.0).ceil();
    let lo = (mode - span).max(0.0) as u64;
    let hi = (mode + span) as u64;
    let mut logw = vec![0.0; (hi - lo + 1) as usize];
    let m = (mode as u64 - lo) as usize;
    for i in m + 1..logw.len() {
        let k = (lo + i as u64) as f64;
        logw[i] = logw[i - 1] + lambda.ln() - k.ln();
    }
    for i in (0..m).rev() {
        let k = (lo + i as u64 + 1) as f64;
        logw[i] = logw[i + 1] - lambda.ln() + k.ln();
    }
    let pw: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
    let total: f64 = pw.iter().sum();
    let (mut m1, mut m2) = (0.0, 0.0);
    for (i, w) in pw.iter().enumerate() {
        let k = (lo + i as u64) as f64;
        for &(e, we) in &normal_nodes {
            let v = f(k + e);
            m1 += w / total * we * v;
            m2 += w / total * we * v * v;
        }
    }
    (m1, m2 - m1 * m1)
}

fn noise_model() -> Outcome {
    let mut rng = common::stream(808);
    let p_hat = Tensor::from_fn(&[4096], |i| (i % 97) as f64 * 0.05);
    let mean_mode = simulate_low_dose(&p_hat, &NoiseConfig::mean(1e5), rng.rng()).unwrap();
    let identity = mean_mode.p == p_hat && mean_mode.clamped == 0;

    let mut worst_z: f64 = 0.0;
    let mut settings = 0;
    for &i0 in &[1e5, 1e6, 5e4, 1.25e5, 100.0, 50.0] {
        for &ph in &[0.3, 1.0, 2.5] {
            let cfg = NoiseConfig::new(i0, 10.0);
            let draws = simulate_low_dose(&Tensor::full(&[DRAWS], ph), &cfg, rng.rng()).unwrap().p.into_data();
            let n = DRAWS as f64;
            let mean = draws.iter().sum::<f64>() / n;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = draws.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            let (ref_mean, ref_var) = reference_moments(ph, i0, 10.0);
            let z_mean = (mean - ref_mean).abs() / (ref_var / n).sqrt();
            let var_se = ((m4 - (n - 3.0) / (n - 1.0) * var * var) / n).max(f64::MIN_POSITIVE).sqrt();
            let z_var = (var - ref_var).abs() / var_se;
            worst_z = worst_z.max(z_mean).max(z_var);
            settings += 1;
        }
    }
    Outcome::new(
        identity && worst_z <= 3.0,
        format!("mean mode is the exact identity: {identity}; {settings} settings x {DRAWS} draws, worst |z| of mean and variance vs exact moments {worst_z:.2} (limit 3)"),
    )
}

// ------------------------------------------------------------ criterion 9

const DICE_TARGET: f64 = 0.85;
const PSNR_GAIN_TARGET: f64 = 3.0;

fn learnability_cfg(task: TaskKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Method::Central);
    cfg.task = task;
    cfg.clients = 4;
    cfg.model.depth = 3;
    cfg.model.base_channels = 8;
    cfg.data.size = 32;
    cfg.train_samples = 32;
    cfg.test_samples = 8;
    cfg.batch_size = 4;
    cfg.eval.last = 5;
    (cfg.optimizer.lr, cfg.rounds) = match task {
        TaskKind::Segmentation => (3e-3, 40),
        TaskKind::Restoration => (1e-3, 20),
    };
    cfg
}

fn learnability() -> Outcome {
    let seg = learnability_cfg(TaskKind::Segmentation);
    let s = summary_of(&seg);
    let res = learnability_cfg(TaskKind::Restoration);
    let r = summary_of(&res);
    let input = r.input_psnr.unwrap();
    let gain = r.mean_final - input;
    Outcome::new(
        s.mean_final >= DICE_TARGET && gain >= PSNR_GAIN_TARGET,
        format!(
            "segmentation Dice {:.4} after {} epochs (target {DICE_TARGET}); restoration PSNR {:.3} dB vs noisy input {input:.3} dB, gain {gain:.3} dB after {} epochs (target {PSNR_GAIN_TARGET})",
            s.mean_final, seg.rounds, r.mean_final, res.rounds
        ),
    )
}

// -------------------------------------------------------------- ablations

const MU_TOL: f64 = 0.5;
const RE_TOL: f64 = 0.2;

fn ablation_base() -> ExperimentConfig {
    let mut cfg = heterogeneous_cfg();
    cfg.train_samples = 8;
    cfg.test_samples = 8;
    cfg
}

fn mu_sweep() -> Outcome {
    let mut base = ablation_base();
    base.rounds = 20;
    let dir = tempfile::tempdir().unwrap();
    let mus = [1e-6, 1e-4, 1.0, 100.0];
    let table = run_mu_sweep(&base, &mus, dir.path()).unwrap();
    if !table.all_completed() {
        return Outcome::new(false, format!("cells failed: {:?}", table.cells.iter().filter_map(|c| c.error.clone()).collect::<Vec<_>>()));
    }
    let vals: Vec<f64> = table.cells.iter().map(|c| c.summary.as_ref().unwrap().mean_final).collect();
    let best_extreme = vals[0].max(vals[3]);
    let pass = vals[1] >= best_extreme - MU_TOL && vals[2] >= best_extreme - MU_TOL;
    let detail = table.cells.iter().zip(&vals).map(|(c, v)| format!("mu {} {v:.3}", c.label)).collect::<Vec<_>>().join(", ");
    Outcome::new(pass, format!("PSNR dB after 20 rounds: {detail}; interior within {MU_TOL} dB of best extreme"))
}

fn round_epoch() -> Outcome {
    let base = ablation_base();
    let dir = tempfile::tempdir().unwrap();
    let table = run_round_epoch_tradeoff(&base, &[(200, 1), (40, 5)], dir.path()).unwrap();
    let (Some(e1), Some(e5)) = (table.cell("200x1"), table.cell("40x5")) else {
        return Outcome::new(false, "a cell failed");
    };
    Outcome::new(
        e1.mean_final >= e5.mean_final - RE_TOL,
        format!("rounds x epochs = 200: 200x1 {:.3} dB vs 40x5 {:.3} dB (tol {RE_TOL})", e1.mean_final, e5.mean_final),
    )
}
