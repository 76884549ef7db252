//! Encoder/decoder building blocks shared by the monolithic and split
//! networks.

use crate::error::{Error, Result};
use crate::nn::{ConcatChannels, Conv2d, Layer, MaxPool2x2, Relu, Upsample2x};
use crate::rng::RngStream;
use crate::tensor::{ParamSet, Tensor};

/// Writes a conv layer's gradients into `grads` under `prefix`.
pub(crate) fn store_conv_grads(
    grads: &mut ParamSet,
    prefix: &str,
    params: Vec<(&'static str, Tensor)>,
) -> Result<()> {
    for (suffix, g) in params {
        let name = format!("{prefix}.{suffix}");
        let slot = grads
            .get_mut(&name)
            .ok_or_else(|| Error::config(format!("no gradient slot for {name}")))?;
        *slot = g;
    }
    Ok(())
}

pub(crate) fn conv_backward(
    conv: &mut Conv2d,
    name: &str,
    upstream: &Tensor,
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let g = conv.backward(upstream)?;
    store_conv_grads(grads, name, g.params)?;
    Ok(g.input)
}

/// conv3x3 -> ReLU -> conv3x3 -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub(crate) name: String,
    pub(crate) conv1: Conv2d,
    relu1: Relu,
    pub(crate) conv2: Conv2d,
    relu2: Relu,
}

impl ConvBlock {
    pub fn new(name: String, in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, rng);
        ConvBlock { name, conv1, relu1: Relu::new(), conv2, relu2: Relu::new() }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?;
        let y = self.relu1.forward(&y)?;
        let y = self.conv2.forward(&y)?;
        self.relu2.forward(&y)
    }

    pub fn backward(&mut self, g: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let g = self.relu2.backward(g)?.input;
        let g = conv_backward(&mut self.conv2, &format!("{}.conv2", self.name), &g, grads)?;
        let g = self.relu1.backward(&g)?.input;
        conv_backward(&mut self.conv1, &format!("{}.conv1", self.name), &g, grads)
    }

    pub(crate) fn convs(&self) -> Vec<(String, &Conv2d)> {
        vec![
            (format!("{}.conv1", self.name), &self.conv1),
            (format!("{}.conv2", self.name), &self.conv2),
        ]
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d)> {
        vec![
            (format!("{}.conv1", self.name), &mut self.conv1),
            (format!("{}.conv2", self.name), &mut self.conv2),
        ]
    }
}

/// One encoder level: a conv block whose output feeds the skip route, then
/// 2x2 pooling.
#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub level: usize,
    pub(crate) block: ConvBlock,
    pool: MaxPool2x2,
}

impl EncoderLevel {
    pub fn new(level: usize, in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        EncoderLevel {
            level,
            block: ConvBlock::new(format!("enc{level}"), in_ch, out_ch, rng),
            pool: MaxPool2x2::new(),
        }
    }

    /// Returns `(skip, pooled)`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let skip = self.block.forward(x)?;
        let pooled = self.pool.forward(&skip)?;
        Ok((skip, pooled))
    }

    /// The block receives the pooled-path gradient plus the skip-path
    /// gradient, summed in that order.
    pub fn backward(&mut self, grad_pooled: &Tensor, grad_skip: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let mut g = self.pool.backward(grad_pooled)?.input;
        g.add_assign(grad_skip)?;
        self.block.backward(&g, grads)
    }
}

/// One decoder level: upsample, conv3x3+ReLU, concat with the skip, conv
/// block.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    up: Upsample2x,
    pub(crate) up_conv: Conv2d,
    up_relu: Relu,
    concat: ConcatChannels,
    pub(crate) block: ConvBlock,
}

impl DecoderLevel {
    /// `in_ch` is the channel count arriving from the level below; the skip
    /// and the output both have `out_ch` channels.
    pub fn new(level: usize, in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        let up_conv = Conv2d::new(in_ch, out_ch, 3, rng);
        let block = ConvBlock::new(format!("dec{level}"), 2 * out_ch, out_ch, rng);
        DecoderLevel {
            level,
            up: Upsample2x::new(),
            up_conv,
            up_relu: Relu::new(),
            concat: ConcatChannels::new(),
            block,
        }
    }

    pub fn forward(&mut self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let y = self.up.forward(x)?;
        let y = self.up_conv.forward(&y)?;
        let y = self.up_relu.forward(&y)?;
        let y = self.concat.forward(skip, &y)?;
        self.block.forward(&y)
    }

    /// Returns `(grad_x, grad_skip)`.
    pub fn backward(&mut self, g: &Tensor, grads: &mut ParamSet) -> Result<(Tensor, Tensor)> {
        let g = self.block.backward(g, grads)?;
        let (g_skip, g_up) = self.concat.backward(&g)?;
        let g_up = self.up_relu.backward(&g_up)?.input;
        let g_up = conv_backward(&mut self.up_conv, &format!("dec{}.up", self.level), &g_up, grads)?;
        let g_x = self.up.backward(&g_up)?.input;
        Ok((g_x, g_skip))
    }

    pub(crate) fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut v = vec![(format!("dec{}.up", self.level), &self.up_conv)];
        v.extend(self.block.convs());
        v
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d)> {
        let name = format!("dec{}.up", self.level);
        let mut v = vec![(name, &mut self.up_conv)];
        v.extend(self.block.convs_mut());
        v
    }
}

/// Collects `(name.weight, name.bias)` for a list of named convs.
pub(crate) fn collect_params(part: crate::tensor::Part, convs: Vec<(String, &Conv2d)>) -> ParamSet {
    let mut set = ParamSet::new(part);
    for (name, conv) in convs {
        set.insert(format!("{name}.weight"), conv.weight.clone());
        set.insert(format!("{name}.bias"), conv.bias.clone());
    }
    set
}

pub(crate) fn load_params(convs: Vec<(String, &mut Conv2d)>, src: &ParamSet) -> Result<()> {
    for (name, conv) in convs {
        for (suffix, slot) in [("weight", &mut conv.weight), ("bias", &mut conv.bias)] {
            let key = format!("{name}.{suffix}");
            let t = src
                .get(&key)
                .ok_or_else(|| Error::config(format!("missing parameter {key}")))?;
            t.ensure_same_shape(slot, &key)?;
            *slot = t.clone();
        }
    }
    Ok(())
}
