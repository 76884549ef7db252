#![allow(dead_code)]

use rand::Rng;
use rosfl::codec::{DType, TensorRecord};
use rosfl::rng::{Purpose, RngStream, StreamId};
use rosfl::wire::{MessageKind, WireMessage, VERSION};
use rosfl::{ParamSet, Part, Tensor};

pub fn stream(seed: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(Purpose::Test, 0))
}

/// Arbitrary finite value, including subnormals, negative zero and large magnitudes.
pub fn scalar<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..8) {
        0 => -0.0,
        1 => f64::MIN_POSITIVE / 4.0,
        2 => rng.random_range(-1e300..1e300),
        _ => rng.random_range(-10.0..10.0),
    }
}

pub fn tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_fn(shape, |_| dtype.quantize(scalar(rng)))
}

fn shape<R: Rng>(rng: &mut R, max_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(0..=max_rank);
    (0..rank).map(|_| rng.random_range(0..5)).collect()
}

pub fn random_message<R: Rng>(rng: &mut R) -> WireMessage {
    let kind = MessageKind::ALL[rng.random_range(0..MessageKind::ALL.len())];
    let dtype = if rng.random_bool(0.5) { DType::F64 } else { DType::F32 };
    let (round, client) = (rng.random::<u32>(), rng.random::<u16>());
    if kind.is_data() {
        let dims = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let t = tensor(rng, &dims, dtype);
        return WireMessage::data(kind, round, client, rng.random(), rng.random(), t, dtype);
    }
    match kind {
        MessageKind::WeightsUp | MessageKind::WeightsDown => {
            let mut head = ParamSet::new(Part::Head);
            let mut tail = ParamSet::new(Part::Tail);
            for i in 0..rng.random_range(1..4) {
                head.insert(format!("enc{i}.w"), {
                    let s = shape(rng, 4);
                    tensor(rng, &s, dtype)
                });
            }
            for i in 0..rng.random_range(0..4) {
                tail.insert(format!("dec{i}.b"), {
                    let s = shape(rng, 2);
                    tensor(rng, &s, dtype)
                });
            }
            let mut msg = WireMessage::weights(kind, round, client, &[&head, &tail], dtype);
            msg.epoch = rng.random();
            msg
        }
        _ => {
            let mut msg = WireMessage::control(kind, round, client);
            msg.batch = rng.random();
            msg
        }
    }
}

/// A message with a payload record that its kind does not allow.
pub fn smuggling_message(kind: MessageKind, name: &str) -> WireMessage {
    WireMessage {
        version: VERSION,
        kind,
        round: 1,
        client: 0,
        epoch: 0,
        batch: 0,
        payload: vec![TensorRecord::new(name, DType::F64, Tensor::zeros(&[1, 1, 2, 2]))],
    }
}

/// Parameter set with `tensors` random tensors of random small shapes.
pub fn params<R: Rng>(rng: &mut R, part: Part, shapes: &[Vec<usize>]) -> ParamSet {
    let mut p = ParamSet::new(part);
    for (i, s) in shapes.iter().enumerate() {
        p.insert(format!("p{i}"), Tensor::from_fn(s, |_| rng.random_range(-2.0..2.0)));
    }
    p
}

pub fn shapes<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect()).collect()
}

/// Weights of `n` clients from random positive dataset sizes.
pub fn sizes<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..100)).collect()
}
