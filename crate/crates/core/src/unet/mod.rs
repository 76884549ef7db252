//! Configurable U-shaped network and its head/body/tail split.

mod blocks;
mod split;

use serde::{Deserialize, Serialize};

pub use blocks::{ConvBlock, DecoderLevel, EncoderLevel};
pub use split::{BodyNet, HeadContext, HeadNet, SkipRoute, SplitPlan, SplitUNet, TailNet};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer};
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::{ParamSet, Part, Tensor};
use blocks::{collect_params, conv_backward, load_params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskHead {
    /// conv1x1, linear output.
    RegressionLinear,
    /// conv1x1 logits; softmax is applied by the loss and at prediction.
    SegmentationSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub head: TaskHead,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        let div = 1usize << (self.depth - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by 2^(depth-1) = {div}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Channels at resolution level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Spatial size at resolution level `level`.
    pub fn spatial(&self, level: usize) -> (usize, usize) {
        (self.height >> (level - 1), self.width >> (level - 1))
    }
}

/// The full network, used directly by the centralized and FedAvg runners and
/// as the reference the split parts must reproduce.
#[derive(Clone, Debug)]
pub struct UNet {
    spec: UNetSpec,
    encoders: Vec<EncoderLevel>,
    bottleneck: ConvBlock,
    /// Indexed by `level - 1`.
    decoders: Vec<DecoderLevel>,
    output: Conv2d,
}

impl UNet {
    /// Builds the network with parameters drawn from the `Init` stream of
    /// `seed`.
    pub fn build(spec: &UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(seed, StreamId::new(Purpose::Init, 0));
        let depth = spec.depth;
        let mut encoders = Vec::with_capacity(depth - 1);
        let mut in_ch = spec.in_channels;
        for level in 1..depth {
            encoders.push(EncoderLevel::new(level, in_ch, spec.channels(level), &mut rng));
            in_ch = spec.channels(level);
        }
        let bottleneck = ConvBlock::new("bottleneck".into(), in_ch, spec.channels(depth), &mut rng);
        let mut decoders = Vec::with_capacity(depth - 1);
        for level in (1..depth).rev() {
            decoders.push(DecoderLevel::new(level, spec.channels(level + 1), spec.channels(level), &mut rng));
        }
        decoders.reverse();
        let output = Conv2d::new(spec.channels(1), spec.out_channels, 1, &mut rng);
        Ok(UNet { spec: spec.clone(), encoders, bottleneck, decoders, output })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (self.spec.in_channels, self.spec.height, self.spec.width) {
            return Err(Error::shape(format!(
                "input {:?} does not match network input {}x{}x{}",
                x.shape(),
                self.spec.in_channels,
                self.spec.height,
                self.spec.width
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for enc in &mut self.encoders {
            let (skip, pooled) = enc.forward(&h)?;
            skips.push(skip);
            h = pooled;
        }
        h = self.bottleneck.forward(&h)?;
        for dec in self.decoders.iter_mut().rev() {
            h = dec.forward(&h, &skips[dec.level - 1])?;
        }
        self.output.forward(&h)
    }

    /// Returns `(grad_input, param_grads)`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Tensor, ParamSet)> {
        let mut grads = self.params().zeros_like();
        let mut g = conv_backward(&mut self.output, "out", grad_out, &mut grads)?;
        let mut skip_grads = Vec::with_capacity(self.decoders.len());
        for dec in &mut self.decoders {
            let (gx, gs) = dec.backward(&g, &mut grads)?;
            skip_grads.push(gs);
            g = gx;
        }
        g = self.bottleneck.backward(&g, &mut grads)?;
        for enc in self.encoders.iter_mut().rev() {
            g = enc.backward(&g, &skip_grads[enc.level - 1], &mut grads)?;
        }
        Ok((g, grads))
    }

    pub(crate) fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut v = Vec::new();
        for enc in &self.encoders {
            v.extend(enc.block.convs());
        }
        v.extend(self.bottleneck.convs());
        for dec in self.decoders.iter().rev() {
            v.extend(dec.convs());
        }
        v.push(("out".to_string(), &self.output));
        v
    }

    fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d)> {
        let mut v = Vec::new();
        for enc in &mut self.encoders {
            v.extend(enc.block.convs_mut());
        }
        v.extend(self.bottleneck.convs_mut());
        for dec in self.decoders.iter_mut().rev() {
            v.extend(dec.convs_mut());
        }
        v.push(("out".to_string(), &mut self.output));
        v
    }

    pub fn params(&self) -> ParamSet {
        collect_params(Part::Full, self.convs())
    }

    pub fn load_params(&mut self, src: &ParamSet) -> Result<()> {
        let expected = 2 * self.convs().len();
        if src.len() != expected {
            return Err(Error::config(format!(
                "parameter set has {} tensors, model expects {expected}",
                src.len()
            )));
        }
        load_params(self.convs_mut(), src)
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.param_count()).sum()
    }

    /// Moves the layers into head/body/tail parts without copying or
    /// re-initializing anything.
    pub fn split(self, plan: SplitPlan) -> Result<SplitUNet> {
        SplitUNet::from_unet(self, plan)
    }

    pub(crate) fn into_pieces(self) -> (UNetSpec, Vec<EncoderLevel>, ConvBlock, Vec<DecoderLevel>, Conv2d) {
        (self.spec, self.encoders, self.bottleneck, self.decoders, self.output)
    }
}
