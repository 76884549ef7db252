//! Synthetic heterogeneous datasets.
//!
//! Every sample is a pure function of `(seed, client, index)`. Client `n`
//! owns global indices `n * CLIENT_STRIDE + i`; held-out samples start at
//! `TEST_OFFSET` inside the client's range, so shards never overlap.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::codec::{Checkpoint, DType, TensorRecord};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::Tensor;

pub const CLIENT_STRIDE: u64 = 1 << 32;
pub const TEST_OFFSET: u64 = 1 << 31;

/// Photon counts of the four heterogeneous dose levels.
pub const DOSE_LEVELS: [f64; 4] = [1e5, 1e6, 5e4, 1.25e5];
pub const ELECTRONIC_NOISE_VAR: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Poisson and Gaussian draws.
    #[default]
    Sampled,
    /// Poisson replaced by its mean and no electronic noise.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub i0: f64,
    pub sigma_e2: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl NoiseConfig {
    pub fn new(i0: f64, sigma_e2: f64) -> Self {
        NoiseConfig { i0, sigma_e2, mode: NoiseMode::Sampled }
    }

    pub fn mean(i0: f64) -> Self {
        NoiseConfig { i0, sigma_e2: 0.0, mode: NoiseMode::Mean }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return Err(Error::config(format!("noise i0 must be > 0, got {}", self.i0)));
        }
        if !(self.sigma_e2 >= 0.0 && self.sigma_e2.is_finite()) {
            return Err(Error::config(format!("noise sigma_e2 must be >= 0, got {}", self.sigma_e2)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowDose {
    pub p: Tensor,
    /// Elements whose sampled denominator fell below 1 and was floored.
    pub clamped: usize,
}

/// `p = ln(I0 / (Poisson(I0 e^-p̂) + Normal(0, σ_e²)))`, elementwise.
///
/// Evaluated as `p̂ - ln(d / λ)` with `λ = I0 e^-p̂`, which is the same
/// quantity and makes mean mode return `p̂` bit-for-bit.
pub fn simulate_low_dose<R: Rng + ?Sized>(p_hat: &Tensor, cfg: &NoiseConfig, rng: &mut R) -> Result<LowDose> {
    cfg.validate()?;
    if let Some(&bad) = p_hat.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::config(format!("attenuation must be finite and >= 0, got {bad}")));
    }
    let electronic = Normal::new(0.0, cfg.sigma_e2.sqrt()).map_err(|e| Error::config(e.to_string()))?;
    let mut clamped = 0;
    let mut out = Vec::with_capacity(p_hat.len());
    for &ph in p_hat.data() {
        let lambda = cfg.i0 * (-ph).exp();
        let denom = match cfg.mode {
            NoiseMode::Mean => lambda,
            NoiseMode::Sampled => {
                let counts = if lambda > 0.0 {
                    Poisson::new(lambda).map_err(|e| Error::Numeric(e.to_string()))?.sample(rng)
                } else {
                    0.0
                };
                counts + electronic.sample(rng)
            }
        };
        let denom = if denom < 1.0 {
            clamped += 1;
            1.0
        } else {
            denom
        };
        out.push(ph - (denom / lambda).ln());
    }
    let p = Tensor::new(p_hat.shape().to_vec(), out)?;
    p.ensure_finite("low-dose measurement")?;
    Ok(LowDose { p, clamped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Restoration,
    Segmentation,
}

/// Per-client acquisition differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientDomain {
    pub contrast: f64,
    pub bias: f64,
    pub i0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub background: f64,
    /// Edge width in pixels of restoration phantoms.
    pub softness: f64,
    /// Segmentation classes including background.
    pub classes: usize,
    /// Gaussian noise std of segmentation images.
    pub seg_noise: f64,
    pub sigma_e2: f64,
    /// Multiplies every client's `i0`; scales the dose to desk-size images.
    pub dose_scale: f64,
    /// Clean intensity to attenuation factor.
    pub attenuation_scale: f64,
    /// Per-client domains; client `n` uses entry `n % len`.
    pub domains: Vec<ClientDomain>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let shifts = [(1.0, 0.0), (0.85, 0.08), (1.1, -0.04), (0.95, 0.04)];
        PhantomSpec {
            size: 32,
            min_shapes: 2,
            max_shapes: 5,
            min_intensity: 0.3,
            max_intensity: 0.9,
            background: 0.05,
            softness: 1.0,
            classes: 4,
            seg_noise: 0.06,
            sigma_e2: ELECTRONIC_NOISE_VAR,
            dose_scale: 1e-3,
            attenuation_scale: 1.0,
            domains: DOSE_LEVELS
                .iter()
                .zip(shifts)
                .map(|(&i0, (contrast, bias))| ClientDomain { contrast, bias, i0 })
                .collect(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let div = 1usize << depth.saturating_sub(1);
        if self.size == 0 || self.size % div != 0 {
            return Err(Error::config(format!("data.size {} not divisible by {div}", self.size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::config("data.min_shapes must be in 1..=data.max_shapes"));
        }
        for (key, v) in [
            ("data.min_intensity", self.min_intensity),
            ("data.max_intensity", self.max_intensity),
            ("data.background", self.background),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{key} must be in [0, 1], got {v}")));
            }
        }
        if self.min_intensity > self.max_intensity {
            return Err(Error::config("data.min_intensity exceeds data.max_intensity"));
        }
        if !(self.softness > 0.0) {
            return Err(Error::config("data.softness must be > 0"));
        }
        if !(2..=255).contains(&self.classes) {
            return Err(Error::config(format!("data.classes must be in 2..=255, got {}", self.classes)));
        }
        for (key, v) in [
            ("data.seg_noise", self.seg_noise),
            ("data.sigma_e2", self.sigma_e2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{key} must be >= 0, got {v}")));
            }
        }
        for (key, v) in [
            ("data.dose_scale", self.dose_scale),
            ("data.attenuation_scale", self.attenuation_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{key} must be > 0, got {v}")));
            }
        }
        if self.domains.is_empty() {
            return Err(Error::config("data.domains must not be empty"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(d.contrast > 0.0) || !(d.i0 > 0.0) || !d.bias.is_finite() {
                return Err(Error::config(format!("data.domains[{i}] needs contrast > 0, i0 > 0, finite bias")));
            }
        }
        Ok(())
    }

    pub fn domain(&self, client: u32) -> ClientDomain {
        self.domains[client as usize % self.domains.len()]
    }

    pub fn noise(&self, client: u32) -> NoiseConfig {
        NoiseConfig::new(self.domain(client).i0 * self.dose_scale, self.sigma_e2)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn sample(rng: &mut RngStream, size: f64, value: f64) -> Self {
        let ry = rng.uniform(0.12, 0.3) * size;
        let rx = rng.uniform(0.12, 0.3) * size;
        let cy = rng.uniform(0.2, 0.8) * size;
        let cx = rng.uniform(0.2, 0.8) * size;
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        Ellipse { cy, cx, ry, rx, cos: angle.cos(), sin: angle.sin(), value }
    }

    /// Normalised radius: < 1 inside, 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y + 0.5 - self.cy, x + 0.5 - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn sample_stream(seed: u64, purpose: Purpose, client: u32, index: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(purpose, client).with(index, 0))
}

fn shape_count(rng: &mut RngStream, spec: &PhantomSpec) -> usize {
    spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1)
}

/// Clean restoration phantom in `[0, 1]`.
pub fn clean_phantom(spec: &PhantomSpec, seed: u64, client: u32, index: u64) -> Tensor {
    let mut rng = sample_stream(seed, Purpose::Data, client, index);
    let n = spec.size;
    let dom = spec.domain(client);
    let shapes: Vec<Ellipse> = (0..shape_count(&mut rng, spec))
        .map(|_| {
            let value = rng.uniform(spec.min_intensity, spec.max_intensity);
            Ellipse::sample(&mut rng, n as f64, value)
        })
        .collect();
    Tensor::from_fn(&[1, 1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let mut v = spec.background;
        for e in &shapes {
            let r = e.radius(y, x);
            let cover = 1.0 / (1.0 + ((r - 1.0) * e.rx.min(e.ry) / spec.softness).exp());
            v += cover * (e.value - v);
        }
        (dom.contrast * v + dom.bias).clamp(0.0, 1.0)
    })
}

/// `(noisy, clean, clamped)` for one restoration sample.
pub fn restoration_sample(spec: &PhantomSpec, seed: u64, client: u32, index: u64) -> Result<(Tensor, Tensor, usize)> {
    let clean = clean_phantom(spec, seed, client, index);
    let p_hat = clean.scale(spec.attenuation_scale);
    let mut rng = sample_stream(seed, Purpose::Noise, client, index);
    let LowDose { p, clamped } = simulate_low_dose(&p_hat, &spec.noise(client), rng.rng())?;
    let noisy = p.map(|v| (v / spec.attenuation_scale).clamp(0.0, 1.0));
    Ok((noisy, clean, clamped))
}

/// `(image, mask)` for one segmentation sample; the mask holds class labels
/// as values.
pub fn segmentation_sample(spec: &PhantomSpec, seed: u64, client: u32, index: u64) -> (Tensor, Tensor) {
    let mut rng = sample_stream(seed, Purpose::Data, client, index);
    let n = spec.size;
    let fg = spec.classes - 1;
    let shapes: Vec<Ellipse> = (0..shape_count(&mut rng, spec))
        .map(|_| {
            let class = 1 + rng.below(fg);
            Ellipse::sample(&mut rng, n as f64, class as f64)
        })
        .collect();
    let mask = Tensor::from_fn(&[1, 1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        shapes.iter().rev().find(|e| e.radius(y, x) < 1.0).map_or(0.0, |e| e.value)
    });
    let dom = spec.domain(client);
    let mut noise_rng = sample_stream(seed, Purpose::Noise, client, index);
    let gauss = Normal::new(0.0, spec.seg_noise).expect("validated noise std");
    let span = spec.max_intensity - spec.min_intensity;
    let image = mask.map(|label| {
        let level = spec.min_intensity + span * (label - 1.0) / (fg.max(2) - 1) as f64;
        let level = if label == 0.0 { spec.background } else { level };
        dom.contrast * level + dom.bias
    });
    let image = Tensor::new(
        image.shape().to_vec(),
        image.data().iter().map(|&v| (v + gauss.sample(noise_rng.rng())).clamp(0.0, 1.0)).collect(),
    )
    .expect("same shape");
    (image, mask)
}

/// A batch-major set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub clamped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((self.inputs.gather_batch(indices)?, self.targets.gather_batch(indices)?))
    }

    /// Concatenation in the given order.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let inputs: Vec<&Tensor> = parts.iter().map(|d| &d.inputs).collect();
        let targets: Vec<&Tensor> = parts.iter().map(|d| &d.targets).collect();
        Ok(Dataset {
            inputs: Tensor::stack_batch(&inputs)?,
            targets: Tensor::stack_batch(&targets)?,
            clamped: parts.iter().map(|d| d.clamped).sum(),
        })
    }
}

/// Which block of a client's index range to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub fn global_index(client: u32, split: Split, local: u64) -> u64 {
    let base = u64::from(client) * CLIENT_STRIDE;
    match split {
        Split::Train => base + local,
        Split::Test => base + TEST_OFFSET + local,
    }
}

pub fn gen_restoration_shard(spec: &PhantomSpec, seed: u64, client: u32, split: Split, count: usize) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut clamped = 0;
    for i in 0..count {
        let (noisy, clean, c) = restoration_sample(spec, seed, client, global_index(client, split, i as u64))?;
        inputs.push(noisy);
        targets.push(clean);
        clamped += c;
    }
    stack(inputs, targets, clamped)
}

pub fn gen_segmentation_shard(spec: &PhantomSpec, seed: u64, client: u32, split: Split, count: usize) -> Result<Dataset> {
    let (inputs, targets) = (0..count)
        .map(|i| segmentation_sample(spec, seed, client, global_index(client, split, i as u64)))
        .unzip();
    stack(inputs, targets, 0)
}

pub fn gen_shard(task: TaskKind, spec: &PhantomSpec, seed: u64, client: u32, split: Split, count: usize) -> Result<Dataset> {
    match task {
        TaskKind::Restoration => gen_restoration_shard(spec, seed, client, split, count),
        TaskKind::Segmentation => gen_segmentation_shard(spec, seed, client, split, count),
    }
}

fn stack(inputs: Vec<Tensor>, targets: Vec<Tensor>, clamped: usize) -> Result<Dataset> {
    if inputs.is_empty() {
        return Err(Error::config("a shard needs at least one sample"));
    }
    let i: Vec<&Tensor> = inputs.iter().collect();
    let t: Vec<&Tensor> = targets.iter().collect();
    Ok(Dataset { inputs: Tensor::stack_batch(&i)?, targets: Tensor::stack_batch(&t)?, clamped })
}

/// Describes exported shards; written next to them as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub task: TaskKind,
    pub seed: u64,
    pub spec: PhantomSpec,
    /// File name to `(client, split, count)`.
    pub shards: BTreeMap<String, (u32, Split, usize)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn shard_file_name(client: u32, split: Split) -> String {
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    format!("client{client}_{split}.shard")
}

/// Writes shards in the checkpoint container (`inputs`, `targets`) plus a
/// manifest.
pub fn export_shards(dir: &Path, manifest: &ShardManifest, shards: &[&Dataset]) -> Result<()> {
    if manifest.shards.len() != shards.len() {
        return Err(Error::config("manifest and shard list differ in length"));
    }
    fs::create_dir_all(dir)?;
    for (name, data) in manifest.shards.keys().zip(shards) {
        let ck = Checkpoint {
            round: 0,
            records: vec![
                TensorRecord::new("inputs", DType::F64, data.inputs.clone()),
                TensorRecord::new("targets", DType::F64, data.targets.clone()),
            ],
        };
        ck.save(&dir.join(name))?;
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Reads a manifest and all shards it lists, in manifest order.
pub fn import_shards(dir: &Path) -> Result<(ShardManifest, Vec<Dataset>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: ShardManifest =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("bad shard manifest: {e}")))?;
    let mut out = Vec::new();
    for (name, &(_, _, count)) in &manifest.shards {
        let ck = Checkpoint::load(&dir.join(name))?;
        let find = |key: &str| {
            ck.records
                .iter()
                .find(|r| r.name == key)
                .map(|r| r.tensor.clone())
                .ok_or_else(|| Error::Corruption(format!("{name} lacks a {key} record")))
        };
        let data = Dataset { inputs: find("inputs")?, targets: find("targets")?, clamped: 0 };
        if data.len() != count {
            return Err(Error::Corruption(format!("{name} holds {} samples, manifest says {count}", data.len())));
        }
        out.push(data);
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn draws(p_hat: f64, cfg: &NoiseConfig, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, StreamId::new(Purpose::Test, 0));
        let t = Tensor::full(&[n], p_hat);
        simulate_low_dose(&t, cfg, rng.rng()).unwrap().p.into_data()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn mean_mode_is_exact_identity() {
        let p_hat = Tensor::from_fn(&[64], |i| i as f64 * 0.11);
        let mut rng = RngStream::new(1, StreamId::new(Purpose::Test, 0));
        let out = simulate_low_dose(&p_hat, &NoiseConfig::mean(1e6), rng.rng()).unwrap();
        assert_eq!(out.p, p_hat);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn monte_carlo_mean_within_three_standard_errors() {
        let v = draws(1.0, &NoiseConfig::new(1e6, 10.0), 10_000, 7);
        let (m, var) = mean_var(&v);
        let se = (var / v.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn lower_dose_is_noisier() {
        let (_, v_low) = mean_var(&draws(1.0, &NoiseConfig::new(5e4, 10.0), 10_000, 3));
        let (_, v_high) = mean_var(&draws(1.0, &NoiseConfig::new(1e6, 10.0), 10_000, 4));
        assert!(v_low > v_high, "{v_low} vs {v_high}");
    }

    #[test]
    fn starved_measurements_are_floored_and_counted() {
        let t = Tensor::full(&[200], 30.0);
        let mut rng = RngStream::new(5, StreamId::new(Purpose::Test, 0));
        let out = simulate_low_dose(&t, &NoiseConfig::new(10.0, 10.0), rng.rng()).unwrap();
        assert!(out.clamped > 0);
        assert!(out.p.data().iter().all(|&v| v <= 30.0 + 10f64.ln() + 1e-12));
    }

    #[test]
    fn rejects_negative_attenuation() {
        let mut rng = RngStream::new(5, StreamId::new(Purpose::Test, 0));
        let t = Tensor::full(&[2], -0.5);
        assert!(simulate_low_dose(&t, &NoiseConfig::new(1e3, 0.0), rng.rng()).is_err());
    }

    #[test]
    fn samples_are_deterministic() {
        let spec = PhantomSpec::default();
        assert_eq!(restoration_sample(&spec, 9, 2, 17).unwrap(), restoration_sample(&spec, 9, 2, 17).unwrap());
        assert_eq!(segmentation_sample(&spec, 9, 2, 17), segmentation_sample(&spec, 9, 2, 17));
        assert_ne!(clean_phantom(&spec, 9, 2, 17), clean_phantom(&spec, 9, 2, 18));
    }

    #[test]
    fn infinite_dose_limit_returns_clean() {
        let mut spec = PhantomSpec::default();
        spec.sigma_e2 = 0.0;
        let clean = clean_phantom(&spec, 3, 1, 4);
        let mut rng = RngStream::new(3, StreamId::new(Purpose::Test, 0));
        let p = simulate_low_dose(&clean.scale(spec.attenuation_scale), &NoiseConfig::mean(1e12), rng.rng())
            .unwrap()
            .p
            .map(|v| (v / spec.attenuation_scale).clamp(0.0, 1.0));
        assert!(p.max_abs_diff(&clean).unwrap() < 1e-15);
    }

    #[test]
    fn intensities_in_unit_range() {
        let spec = PhantomSpec::default();
        for c in 0..4 {
            let (noisy, clean, _) = restoration_sample(&spec, 1, c, 0).unwrap();
            assert!(clean.data().iter().chain(noisy.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn masks_hold_valid_labels() {
        let spec = PhantomSpec::default();
        let d = gen_segmentation_shard(&spec, 2, 1, Split::Train, 20).unwrap();
        assert!(d.targets.data().iter().all(|&v| v.fract() == 0.0 && (0.0..spec.classes as f64).contains(&v)));
        assert!(d.targets.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn input_psnr_rises_with_dose() {
        let spec = PhantomSpec::default();
        let mut by_dose: Vec<(f64, f64)> = (0..4)
            .map(|c| {
                let d = gen_restoration_shard(&spec, 11, c, Split::Train, 100).unwrap();
                let mut total = 0.0;
                for i in 0..d.len() {
                    let (x, y) = d.batch(&[i]).unwrap();
                    total += psnr(&x, &y, 1.0).unwrap();
                }
                (spec.domain(c).i0, total / d.len() as f64)
            })
            .collect();
        by_dose.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in by_dose.windows(2) {
            assert!(w[0].1 < w[1].1, "{by_dose:?}");
        }
    }

    #[test]
    fn shards_are_disjoint_index_ranges() {
        assert_ne!(global_index(0, Split::Test, 0), global_index(0, Split::Train, 0));
        assert!(global_index(0, Split::Test, 1000) < global_index(1, Split::Train, 0));
        let spec = PhantomSpec::default();
        let a = gen_restoration_shard(&spec, 1, 0, Split::Train, 2).unwrap();
        let b = gen_restoration_shard(&spec, 1, 0, Split::Test, 2).unwrap();
        assert_ne!(a.targets, b.targets);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let a = gen_segmentation_shard(&spec, 4, 0, Split::Train, 3).unwrap();
        let b = gen_segmentation_shard(&spec, 4, 1, Split::Train, 2).unwrap();
        let mut shards = BTreeMap::new();
        shards.insert(shard_file_name(0, Split::Train), (0, Split::Train, 3));
        shards.insert(shard_file_name(1, Split::Train), (1, Split::Train, 2));
        let manifest = ShardManifest { task: TaskKind::Segmentation, seed: 4, spec, shards };
        export_shards(dir.path(), &manifest, &[&a, &b]).unwrap();
        let (m, got) = import_shards(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(got[0].inputs, a.inputs);
        assert_eq!(got[1].targets, b.targets);
    }
}
