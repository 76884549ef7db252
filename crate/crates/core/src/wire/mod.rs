//! Versioned, length-prefixed binary messages exchanged between parties.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! u32 length            bytes that follow this field
//! [u8; 4] magic         b"RSFL"
//! u8 version            1
//! u8 kind               see MessageKind
//! u32 round
//! u16 client
//! u16 epoch
//! u32 batch
//! u16 record_count
//! records...            see crate::codec
//! ```
//!
//! The header after the length field is [`HEADER_LEN`] bytes, so a message
//! without payload occupies exactly `4 + HEADER_LEN` bytes.

mod trace;
mod transport;

pub use trace::{validate_trace, Trace, TraceEvent};
pub use transport::{Endpoint, TcpHub};

use crate::codec::{DType, Reader, TensorRecord};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Part, Tensor};

pub const MAGIC: [u8; 4] = *b"RSFL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Upper bound on a frame body; larger declared lengths are rejected before
/// allocating.
pub const MAX_FRAME: usize = 1 << 30;

/// Payload name of the single boundary tensor in activation messages.
pub const ACTIVATION: &str = "activation";
/// Payload name of the single boundary tensor in gradient messages.
pub const GRADIENT: &str = "gradient";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    /// Head output, client to computation server.
    ActUp = 1,
    /// Body output, computation server to client.
    ActDown = 2,
    /// Loss gradient wrt the body output, client to computation server.
    GradUp = 3,
    /// Gradient wrt the head output, computation server to client.
    GradDown = 4,
    /// Client's local head or tail weights to the aggregation server.
    WeightsUp = 5,
    /// Aggregated head or tail weights to a client.
    WeightsDown = 6,
    RoundBegin = 7,
    RoundEnd = 8,
    Shutdown = 9,
    /// First frame on a TCP connection; carries the client id.
    Hello = 10,
}

/// What a message kind may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadSchema {
    Empty,
    /// Exactly one record with this name.
    Single(&'static str),
    /// Any number of records whose names start with one of these part
    /// prefixes.
    Parts(&'static [&'static str]),
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::ActUp,
        MessageKind::ActDown,
        MessageKind::GradUp,
        MessageKind::GradDown,
        MessageKind::WeightsUp,
        MessageKind::WeightsDown,
        MessageKind::RoundBegin,
        MessageKind::RoundEnd,
        MessageKind::Shutdown,
        MessageKind::Hello,
    ];

    pub fn from_u8(v: u8) -> Option<MessageKind> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }

    /// The complete list of tensors each kind can carry. Raw inputs,
    /// labels, predictions and skip activations have no slot in any kind.
    pub fn schema(self) -> PayloadSchema {
        match self {
            MessageKind::ActUp | MessageKind::ActDown => PayloadSchema::Single(ACTIVATION),
            MessageKind::GradUp | MessageKind::GradDown => PayloadSchema::Single(GRADIENT),
            MessageKind::WeightsUp | MessageKind::WeightsDown => PayloadSchema::Parts(&["head/", "tail/"]),
            MessageKind::RoundBegin | MessageKind::RoundEnd | MessageKind::Shutdown | MessageKind::Hello => {
                PayloadSchema::Empty
            }
        }
    }

    pub fn is_data(self) -> bool {
        matches!(
            self,
            MessageKind::ActUp | MessageKind::ActDown | MessageKind::GradUp | MessageKind::GradDown
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub version: u8,
    pub kind: MessageKind,
    pub round: u32,
    pub client: u16,
    pub epoch: u16,
    pub batch: u32,
    pub payload: Vec<TensorRecord>,
}

impl WireMessage {
    pub fn control(kind: MessageKind, round: u32, client: u16) -> Self {
        WireMessage { version: VERSION, kind, round, client, epoch: 0, batch: 0, payload: Vec::new() }
    }

    /// A data message carrying one boundary tensor.
    pub fn data(kind: MessageKind, round: u32, client: u16, epoch: u16, batch: u32, tensor: Tensor, dtype: DType) -> Self {
        let name = match kind.schema() {
            PayloadSchema::Single(name) => name,
            _ => panic!("{kind:?} is not a data message"),
        };
        WireMessage {
            version: VERSION,
            kind,
            round,
            client,
            epoch,
            batch,
            payload: vec![TensorRecord::new(name, dtype, tensor.map(|v| dtype.quantize(v)))],
        }
    }

    /// A weights message carrying one part's parameters under its prefix.
    /// Weights of one or more parts, each tensor named `part/name`.
    pub fn weights(kind: MessageKind, round: u32, client: u16, parts: &[&ParamSet], dtype: DType) -> Self {
        let payload = parts
            .iter()
            .flat_map(|p| {
                let prefix = p.part.prefix();
                p.iter().map(move |(name, t)| {
                    TensorRecord::new(format!("{prefix}/{name}"), dtype, t.map(|v| dtype.quantize(v)))
                })
            })
            .collect();
        WireMessage { version: VERSION, kind, round, client, epoch: 0, batch: 0, payload }
    }

    /// The boundary tensor of a data message.
    pub fn tensor(&self) -> Result<&Tensor> {
        match (self.kind.schema(), self.payload.as_slice()) {
            (PayloadSchema::Single(name), [rec]) if rec.name == name => Ok(&rec.tensor),
            _ => Err(Error::protocol(format!("{:?} message has no boundary tensor", self.kind))),
        }
    }

    pub fn into_tensor(mut self) -> Result<Tensor> {
        self.tensor()?;
        Ok(self.payload.pop().unwrap().tensor)
    }

    /// Reassembles the single part carried by a weights message.
    /// Regroups a weights payload into one set per part, in payload order.
    pub fn param_sets(&self) -> Result<Vec<ParamSet>> {
        if self.payload.is_empty() {
            return Err(Error::protocol("weights message without tensors"));
        }
        let mut sets: Vec<ParamSet> = Vec::new();
        for rec in &self.payload {
            let (prefix, name) = rec
                .name
                .split_once('/')
                .ok_or_else(|| Error::protocol(format!("weights tensor {} has no part prefix", rec.name)))?;
            let part = Part::from_prefix(prefix)
                .ok_or_else(|| Error::protocol(format!("unknown part prefix in {}", rec.name)))?;
            match sets.last_mut() {
                Some(set) if set.part == part => set.insert(name, rec.tensor.clone()),
                _ => {
                    if sets.iter().any(|s| s.part == part) {
                        return Err(Error::protocol(format!("part {prefix} is interleaved")));
                    }
                    let mut set = ParamSet::new(part).with_round(self.round);
                    set.insert(name, rec.tensor.clone());
                    sets.push(set);
                }
            }
        }
        Ok(sets)
    }

    pub fn validate_schema(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(Error::protocol(format!("unsupported version {}", self.version)));
        }
        let ok = match self.kind.schema() {
            PayloadSchema::Empty => self.payload.is_empty(),
            PayloadSchema::Single(name) => self.payload.len() == 1 && self.payload[0].name == name,
            PayloadSchema::Parts(prefixes) => {
                !self.payload.is_empty()
                    && self.payload.iter().all(|r| prefixes.iter().any(|p| r.name.starts_with(p)))
            }
        };
        if !ok {
            let names: Vec<&str> = self.payload.iter().map(|r| r.name.as_str()).collect();
            return Err(Error::protocol(format!("{:?} cannot carry payload {names:?}", self.kind)));
        }
        Ok(())
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate_schema()?;
        let body_len = HEADER_LEN + self.payload.iter().map(TensorRecord::encoded_len).sum::<usize>();
        if body_len > MAX_FRAME {
            return Err(Error::config(format!("message of {body_len} bytes exceeds frame limit")));
        }
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.batch.to_le_bytes());
        let count = u16::try_from(self.payload.len()).map_err(|_| Error::config("too many payload records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.payload {
            r.encode_into(&mut out)?;
        }
        debug_assert_eq!(out.len(), 4 + body_len);
        Ok(out)
    }

    /// Decodes exactly one complete frame.
    pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
        let body_len = frame_body_len(bytes)?;
        let available = bytes.len() - 4;
        if available < body_len {
            return Err(Error::Framing(format!("frame declares {body_len} bytes, {available} available")));
        }
        if available > body_len {
            return Err(Error::Corruption(format!("{} bytes after the frame", available - body_len)));
        }
        Self::decode_body(&bytes[4..])
    }

    /// Decodes a frame body (everything after the length prefix).
    pub fn decode_body(body: &[u8]) -> Result<WireMessage> {
        if body.len() < HEADER_LEN {
            return Err(Error::Framing(format!("frame body of {} bytes is shorter than the header", body.len())));
        }
        let mut rd = Reader::new(body);
        let magic = rd.take(4)?;
        if magic != MAGIC {
            return Err(Error::protocol(format!("bad magic {magic:02x?}")));
        }
        let version = rd.u8()?;
        if version != VERSION {
            return Err(Error::protocol(format!("unsupported version {version}")));
        }
        let kind_byte = rd.u8()?;
        let kind =
            MessageKind::from_u8(kind_byte).ok_or_else(|| Error::protocol(format!("unknown message kind {kind_byte}")))?;
        let round = rd.u32()?;
        let client = rd.u16()?;
        let epoch = rd.u16()?;
        let batch = rd.u32()?;
        let count = rd.u16()?;
        let mut payload = Vec::with_capacity(usize::from(count));
        for _ in 0..count {
            payload.push(TensorRecord::decode_from(&mut rd)?);
        }
        if rd.remaining() != 0 {
            return Err(Error::Corruption(format!("{} unread bytes in frame", rd.remaining())));
        }
        let msg = WireMessage { version, kind, round, client, epoch, batch, payload };
        msg.validate_schema()?;
        Ok(msg)
    }
}

/// Reads the length prefix.
pub fn frame_body_len(bytes: &[u8]) -> Result<usize> {
    let prefix: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Framing(format!("{} bytes cannot hold a length prefix", bytes.len())))?;
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(Error::Framing(format!("declared frame length {len} exceeds limit")));
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn documented_frames_are_bit_exact() {
        let act = WireMessage::data(
            MessageKind::ActUp,
            3,
            1,
            0,
            2,
            Tensor::new(vec![1, 1, 1, 2], vec![0.5, -1.0]).unwrap(),
            DType::F64,
        );
        assert_eq!(
            hex(&act.encode().unwrap()),
            "420000005253464c010103000000010000000200000001000a0061637469766174696f6e0104\
             01000000010000000100000002000000000000000000e03f000000000000f0bf"
        );
        let shutdown = WireMessage::control(MessageKind::Shutdown, 7, 2);
        assert_eq!(hex(&shutdown.encode().unwrap()), "140000005253464c01090700000002000000000000000000");
        let mut bias = ParamSet::new(Part::Head);
        bias.insert("enc1.conv1.bias", Tensor::new(vec![2], vec![0.25, -2.0]).unwrap());
        let up = WireMessage::weights(MessageKind::WeightsUp, 1, 0, &[&bias], DType::F32);
        assert_eq!(
            hex(&up.encode().unwrap()),
            "380000005253464c010501000000000000000000000001001400686561642f656e63312e636f6e76312e62696173\
             0201020000000000803e000000c0"
        );
    }

    fn act() -> WireMessage {
        WireMessage::data(
            MessageKind::ActUp,
            3,
            2,
            1,
            5,
            Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.5),
            DType::F64,
        )
    }

    #[test]
    fn round_trip() {
        let m = act();
        assert_eq!(WireMessage::decode(&m.encode().unwrap()).unwrap(), m);
    }

    #[test]
    fn empty_control_frame_is_fixed_size() {
        let m = WireMessage::control(MessageKind::RoundBegin, 9, 1);
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), 4 + HEADER_LEN);
        assert_eq!(&bytes[..4], &(HEADER_LEN as u32).to_le_bytes());
        assert_eq!(WireMessage::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn short_frame_is_framing_error() {
        let mut bytes = 10u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0; 6]);
        assert!(matches!(WireMessage::decode(&bytes), Err(Error::Framing(_))));
        assert!(matches!(WireMessage::decode(&[1, 2]), Err(Error::Framing(_))));
        let full = act().encode().unwrap();
        assert!(matches!(WireMessage::decode(&full[..full.len() - 1]), Err(Error::Framing(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let good = act().encode().unwrap();
        let mut bad = good.clone();
        bad[4] = b'X';
        assert!(matches!(WireMessage::decode(&bad), Err(Error::Protocol(_))));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(WireMessage::decode(&bad), Err(Error::Protocol(_))));
        let mut bad = good;
        bad[9] = 200;
        assert!(matches!(WireMessage::decode(&bad), Err(Error::Protocol(_))));
    }

    #[test]
    fn inconsistent_shape_is_corruption() {
        let mut bytes = act().encode().unwrap();
        // first dim of the record lives after header (24) + name_len (2) +
        // name (10) + dtype (1) + ndim (1)
        let dim_at = 4 + HEADER_LEN + 2 + ACTIVATION.len() + 2;
        bytes[dim_at] = 9;
        assert!(matches!(WireMessage::decode(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn schema_rejects_foreign_payloads() {
        let mut m = act();
        m.payload[0].name = "input".into();
        assert!(matches!(m.encode(), Err(Error::Protocol(_))));
        let mut body = ParamSet::new(Part::Body);
        body.insert("w", Tensor::zeros(&[1]));
        let w = WireMessage::weights(MessageKind::WeightsUp, 1, 0, &[&body], DType::F64);
        assert!(matches!(w.encode(), Err(Error::Protocol(_))));
    }

    #[test]
    fn no_kind_can_carry_private_tensors() {
        for kind in MessageKind::ALL {
            let allowed = |name: &str| match kind.schema() {
                PayloadSchema::Empty => false,
                PayloadSchema::Single(n) => n == name,
                PayloadSchema::Parts(prefixes) => prefixes.iter().any(|p| name.starts_with(p)),
            };
            for private in ["input", "x", "label", "y", "output", "prediction", "skip", "skip1", "body/w"] {
                assert!(!allowed(private), "{kind:?} admits {private}");
            }
        }
    }

    #[test]
    fn weights_message_reassembles_part() {
        let mut head = ParamSet::new(Part::Head);
        head.insert("enc1.conv1.weight", Tensor::full(&[2, 1, 3, 3], 0.5));
        head.insert("enc1.conv1.bias", Tensor::zeros(&[2]));
        let mut tail = ParamSet::new(Part::Tail);
        tail.insert("out.weight", Tensor::full(&[1, 2, 1, 1], -0.25));
        let m = WireMessage::weights(MessageKind::WeightsDown, 4, 1, &[&head, &tail], DType::F64);
        let back = WireMessage::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back.param_sets().unwrap(), vec![head.with_round(4), tail.with_round(4)]);
    }

    #[test]
    fn f32_payload_quantizes() {
        let t = Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap();
        let m = WireMessage::data(MessageKind::GradUp, 0, 0, 0, 0, t.clone(), DType::F32);
        let back = WireMessage::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.tensor().unwrap().data()[0], 0.1f32 as f64);
        assert_ne!(back.tensor().unwrap(), &t);
    }
}
