//! Recording and validation of the message sequence of a run.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use super::{MessageKind, WireMessage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub kind: MessageKind,
    pub round: u32,
    pub client: u16,
    pub epoch: u16,
    pub batch: u32,
}

/// Shared, append-only log of sent messages in global send order.
#[derive(Clone, Debug, Default)]
pub struct Trace(Arc<Mutex<Vec<TraceEvent>>>);

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, msg: &WireMessage) {
        let ev = TraceEvent { kind: msg.kind, round: msg.round, client: msg.client, epoch: msg.epoch, batch: msg.batch };
        self.0.lock().unwrap().push(ev);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.0.lock().unwrap().clone()
    }
}

/// Checks a recorded run against the training protocol:
///
/// * each `(round, client, epoch, batch)` sees exactly
///   `ActUp -> ActDown -> GradUp -> GradDown`;
/// * a client's data messages for round `k` fall between its
///   `WeightsDown(k)` and its `WeightsUp(k)`;
/// * `WeightsDown(k + 1)` is only sent after all `clients` `WeightsUp(k)`.
pub fn validate_trace(events: &[TraceEvent], clients: usize) -> Result<()> {
    use MessageKind::*;
    const SEQUENCE: [MessageKind; 4] = [ActUp, ActDown, GradUp, GradDown];

    let mut per_batch: BTreeMap<(u32, u16, u16, u32), Vec<MessageKind>> = BTreeMap::new();
    // (round, client) -> (position of WeightsDown, first data, last data, WeightsUp)
    let mut windows: HashMap<(u32, u16), [Option<usize>; 4]> = HashMap::new();
    let mut ups_per_round: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut downs_per_round: HashMap<u32, Vec<usize>> = HashMap::new();

    for (pos, ev) in events.iter().enumerate() {
        let w = windows.entry((ev.round, ev.client)).or_default();
        match ev.kind {
            k if k.is_data() => {
                per_batch.entry((ev.round, ev.client, ev.epoch, ev.batch)).or_default().push(k);
                w[1].get_or_insert(pos);
                w[2] = Some(pos);
            }
            WeightsDown => {
                if w[0].replace(pos).is_some() {
                    return Err(Error::protocol(format!("duplicate WeightsDown round {} client {}", ev.round, ev.client)));
                }
                downs_per_round.entry(ev.round).or_default().push(pos);
            }
            WeightsUp => {
                if w[3].replace(pos).is_some() {
                    return Err(Error::protocol(format!("duplicate WeightsUp round {} client {}", ev.round, ev.client)));
                }
                ups_per_round.entry(ev.round).or_default().push(pos);
            }
            _ => {}
        }
    }

    for (key, kinds) in &per_batch {
        if kinds.as_slice() != SEQUENCE {
            return Err(Error::protocol(format!("batch {key:?} saw {kinds:?}")));
        }
    }
    for (&(round, client), w) in &windows {
        if let (Some(first), Some(last)) = (w[1], w[2]) {
            let down = w[0].ok_or_else(|| {
                Error::protocol(format!("client {client} trained round {round} without WeightsDown"))
            })?;
            let up = w[3]
                .ok_or_else(|| Error::protocol(format!("client {client} never uploaded round {round}")))?;
            if !(down < first && last < up) {
                return Err(Error::protocol(format!(
                    "weights exchanged inside round {round} of client {client}"
                )));
            }
        }
    }
    for (&round, ups) in &ups_per_round {
        if ups.len() != clients {
            return Err(Error::protocol(format!("round {round}: {} of {clients} uploads", ups.len())));
        }
        let last_up = *ups.iter().max().unwrap();
        if let Some(downs) = downs_per_round.get(&(round + 1)) {
            if downs.iter().any(|&d| d < last_up) {
                return Err(Error::protocol(format!("round {} broadcast before the round {round} barrier", round + 1)));
            }
        }
    }
    Ok(())
}
