//! Experiment configuration: a TOML document with sections.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::DType;
use crate::data::{PhantomSpec, TaskKind};
use crate::error::{Error, Result};
use crate::fed::{Direction, DwcsConfig, DEFAULT_BETA, DEFAULT_MU};
use crate::nn::OptimizerKind;
use crate::unet::{SplitPlan, TaskHead, UNetSpec};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rosfl,
    Fedavg,
    Sl,
    Central,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rosfl, Method::Fedavg, Method::Sl, Method::Central];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rosfl => "rosfl",
            Method::Fedavg => "fedavg",
            Method::Sl => "sl",
            Method::Central => "central",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("method: unknown value {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

/// Floating-point width of tensors on the wire and in checkpoints.
/// Arithmetic is always 64-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: DEFAULT_LR, weight_decay: DEFAULT_WEIGHT_DECAY }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { depth: 3, base_channels: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwcsSection {
    pub enabled: bool,
    pub mu: f64,
    /// Correction step; the optimizer learning rate when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub beta: f64,
    pub direction: Direction,
}

impl Default for DwcsSection {
    fn default() -> Self {
        DwcsSection { enabled: true, mu: DEFAULT_MU, eta: None, beta: DEFAULT_BETA, direction: Direction::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate the global model after each of the final `last` rounds.
    pub last: u32,
    /// Also evaluate every `every` rounds; 0 disables.
    pub every: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { last: 5, every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write part checkpoints every this many rounds; the final round is
    /// always written. 0 writes only the final round.
    pub checkpoint_every: u32,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { checkpoint_every: 0 }
    }
}

/// Simulated cost model for comparing sequential and parallel training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub latency_ms: f64,
    pub per_sample_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { latency_ms: 5.0, per_sample_ms: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: u32,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::train_samples")]
    pub train_samples: usize,
    #[serde(default = "defaults::test_samples")]
    pub test_samples: usize,
    /// Every client draws client 0's samples in client 0's order.
    #[serde(default)]
    pub identical_shards: bool,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "defaults::task")]
    pub task: TaskKind,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitPlan,
    #[serde(default)]
    pub dwcs: DwcsSection,
    #[serde(default)]
    pub data: PhantomSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub timing: TimingConfig,
}

mod defaults {
    use crate::data::TaskKind;

    pub fn clients() -> usize {
        4
    }
    pub fn rounds() -> u32 {
        10
    }
    pub fn local_epochs() -> u32 {
        1
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn train_samples() -> usize {
        16
    }
    pub fn test_samples() -> usize {
        8
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
    pub fn task() -> TaskKind {
        TaskKind::Restoration
    }
}

impl ExperimentConfig {
    /// All defaults for `method`.
    pub fn new(method: Method) -> Self {
        let text = format!("method = \"{}\"", method.name());
        toml::from_str(&text).expect("defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` with `method` set or replaced.
    pub fn parse_with_method(text: &str, method: Method) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        table.insert("method".into(), toml::Value::String(method.name().into()));
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients as u64),
            ("rounds", u64::from(self.rounds)),
            ("local_epochs", u64::from(self.local_epochs)),
            ("batch_size", self.batch_size as u64),
            ("train_samples", self.train_samples as u64),
            ("test_samples", self.test_samples as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key} must be >= 1")));
            }
        }
        if self.clients > usize::from(u16::MAX) {
            return Err(Error::config(format!("clients must be <= {}", u16::MAX)));
        }
        if self.local_epochs > u32::from(u16::MAX) {
            return Err(Error::config("local_epochs must fit in 16 bits"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if let Some(s) = self.seeds.iter().find(|&&s| s > i64::MAX as u64) {
            return Err(Error::config(format!("seeds: {s} exceeds {}", i64::MAX)));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("optimizer.lr must be > 0, got {}", o.lr)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config(format!("optimizer.weight_decay must be >= 0, got {}", o.weight_decay)));
        }
        if self.model.depth < 2 {
            return Err(Error::config(format!("model.depth must be >= 2, got {}", self.model.depth)));
        }
        if self.model.base_channels == 0 {
            return Err(Error::config("model.base_channels must be >= 1"));
        }
        self.split.validate(self.model.depth)?;
        self.dwcs_config().validate()?;
        self.data.validate(self.model.depth)?;
        self.unet_spec().validate()
    }

    pub fn unet_spec(&self) -> UNetSpec {
        let (out_channels, head) = match self.task {
            TaskKind::Restoration => (1, TaskHead::RegressionLinear),
            TaskKind::Segmentation => (self.data.classes, TaskHead::SegmentationSoftmax),
        };
        UNetSpec {
            depth: self.model.depth,
            base_channels: self.model.base_channels,
            in_channels: 1,
            out_channels,
            height: self.data.size,
            width: self.data.size,
            head,
        }
    }

    pub fn dwcs_config(&self) -> DwcsConfig {
        DwcsConfig {
            mu: self.dwcs.mu,
            eta: self.dwcs.eta.unwrap_or(self.optimizer.lr),
            beta: self.dwcs.beta,
            direction: self.dwcs.direction,
        }
    }

    /// The correction, if enabled.
    pub fn dwcs_active(&self) -> Option<DwcsConfig> {
        self.dwcs.enabled.then(|| self.dwcs_config())
    }

    /// Whether round `k` is evaluated.
    pub fn is_eval_round(&self, k: u32) -> bool {
        k + self.eval.last > self.rounds || (self.eval.every > 0 && k % self.eval.every == 0)
    }

    /// Whether a checkpoint is written after round `k`.
    pub fn is_checkpoint_round(&self, k: u32) -> bool {
        k == self.rounds || (self.output.checkpoint_every > 0 && k % self.output.checkpoint_every == 0)
    }
}
