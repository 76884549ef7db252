use serde::{Deserialize, Serialize};

use super::blocks::{collect_params, conv_backward, load_params, ConvBlock, DecoderLevel, EncoderLevel};
use super::{UNet, UNetSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer};
use crate::tensor::{ParamSet, Part, Tensor};

/// Number of outer resolution levels kept on the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub level: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan { level: 1 }
    }
}

impl SplitPlan {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.level < 1 || self.level + 1 > depth {
            return Err(Error::config(format!(
                "split.level must be in [1, {}] for depth {depth}, got {}",
                depth.saturating_sub(1),
                self.level
            )));
        }
        Ok(())
    }
}

/// An encoder-to-decoder feature route. Both ends live on the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipRoute {
    pub level: usize,
    pub producer: Part,
    pub consumer: Part,
}

fn check_boundary(x: &Tensor, channels: usize, spatial: (usize, usize), what: &str) -> Result<()> {
    let (_, c, h, w) = x.dims4().map_err(|_| Error::protocol(format!("{what}: not rank 4")))?;
    if (c, (h, w)) != (channels, spatial) {
        return Err(Error::protocol(format!(
            "{what}: got {:?}, expected [*, {channels}, {}, {}]",
            x.shape(),
            spatial.0,
            spatial.1
        )));
    }
    Ok(())
}

/// Skip activations held on the client between the head forward and the
/// head backward of one batch.
#[derive(Debug)]
pub struct HeadContext {
    skips: Vec<Tensor>,
    generation: u64,
}

impl HeadContext {
    pub fn skips(&self) -> &[Tensor] {
        &self.skips
    }
}

/// Encoder levels `1..=s`.
#[derive(Clone, Debug)]
pub struct HeadNet {
    spec: UNetSpec,
    encoders: Vec<EncoderLevel>,
    generation: u64,
    pending: bool,
}

impl HeadNet {
    pub fn split_level(&self) -> usize {
        self.encoders.len()
    }

    /// Returns the boundary activation and the context holding the skips.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, HeadContext)> {
        check_boundary(x, self.spec.in_channels, (self.spec.height, self.spec.width), "head input")?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for enc in &mut self.encoders {
            let (skip, pooled) = enc.forward(&h)?;
            skips.push(skip);
            h = pooled;
        }
        self.generation += 1;
        self.pending = true;
        Ok((h, HeadContext { skips, generation: self.generation }))
    }

    /// Consumes the context. Head gradients are the sum of the path through
    /// the body (`grad_boundary`) and the local skip path (`grad_skips`).
    pub fn backward(&mut self, grad_boundary: &Tensor, grad_skips: &[Tensor], ctx: HeadContext) -> Result<ParamSet> {
        if !self.pending || ctx.generation != self.generation {
            return Err(Error::misuse("head backward with a stale or already consumed context"));
        }
        if grad_skips.len() != self.encoders.len() {
            return Err(Error::shape(format!(
                "{} skip gradients for {} head levels",
                grad_skips.len(),
                self.encoders.len()
            )));
        }
        self.pending = false;
        let mut grads = self.params().zeros_like();
        let mut g = grad_boundary.clone();
        for enc in self.encoders.iter_mut().rev() {
            g = enc.backward(&g, &grad_skips[enc.level - 1], &mut grads)?;
        }
        Ok(grads)
    }

    fn convs(&self) -> Vec<(String, &Conv2d)> {
        self.encoders.iter().flat_map(|e| e.block.convs()).collect()
    }

    pub fn params(&self) -> ParamSet {
        collect_params(Part::Head, self.convs())
    }

    pub fn load_params(&mut self, src: &ParamSet) -> Result<()> {
        load_part(self.encoders.iter_mut().flat_map(|e| e.block.convs_mut()).collect(), src, Part::Head)
    }
}

fn load_part(convs: Vec<(String, &mut Conv2d)>, src: &ParamSet, part: Part) -> Result<()> {
    if src.len() != 2 * convs.len() {
        return Err(Error::config(format!(
            "{} parameter set has {} tensors, expected {}",
            part.prefix(),
            src.len(),
            2 * convs.len()
        )));
    }
    load_params(convs, src)
}

/// Encoder levels `s+1..L-1`, the bottleneck and decoder levels
/// `L-1..s+1`, including their internal skips.
#[derive(Clone, Debug)]
pub struct BodyNet {
    spec: UNetSpec,
    split_level: usize,
    encoders: Vec<EncoderLevel>,
    bottleneck: ConvBlock,
    /// Ascending by level.
    decoders: Vec<DecoderLevel>,
    skips: Option<Vec<Tensor>>,
}

impl BodyNet {
    pub fn input_channels(&self) -> usize {
        self.spec.channels(self.split_level)
    }

    pub fn output_channels(&self) -> usize {
        self.spec.channels(self.split_level + 1)
    }

    pub fn boundary_spatial(&self) -> (usize, usize) {
        self.spec.spatial(self.split_level + 1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        check_boundary(x, self.input_channels(), self.boundary_spatial(), "body input")?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for enc in &mut self.encoders {
            let (skip, pooled) = enc.forward(&h)?;
            skips.push(skip);
            h = pooled;
        }
        h = self.bottleneck.forward(&h)?;
        let first = self.split_level + 1;
        for dec in self.decoders.iter_mut().rev() {
            h = dec.forward(&h, &skips[dec.level - first])?;
        }
        self.skips = Some(skips);
        Ok(h)
    }

    /// Returns `(grad wrt body input, body param grads)`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Tensor, ParamSet)> {
        if self.skips.take().is_none() {
            return Err(Error::misuse("body backward without a preceding forward"));
        }
        check_boundary(grad_out, self.output_channels(), self.boundary_spatial(), "body upstream gradient")?;
        let mut grads = self.params().zeros_like();
        let mut g = grad_out.clone();
        let mut skip_grads = Vec::with_capacity(self.decoders.len());
        for dec in &mut self.decoders {
            let (gx, gs) = dec.backward(&g, &mut grads)?;
            skip_grads.push(gs);
            g = gx;
        }
        g = self.bottleneck.backward(&g, &mut grads)?;
        let first = self.split_level + 1;
        for enc in self.encoders.iter_mut().rev() {
            g = enc.backward(&g, &skip_grads[enc.level - first], &mut grads)?;
        }
        Ok((g, grads))
    }

    fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut v: Vec<_> = self.encoders.iter().flat_map(|e| e.block.convs()).collect();
        v.extend(self.bottleneck.convs());
        for dec in self.decoders.iter().rev() {
            v.extend(dec.convs());
        }
        v
    }

    pub fn params(&self) -> ParamSet {
        collect_params(Part::Body, self.convs())
    }

    pub fn load_params(&mut self, src: &ParamSet) -> Result<()> {
        let mut convs: Vec<_> = self.encoders.iter_mut().flat_map(|e| e.block.convs_mut()).collect();
        convs.extend(self.bottleneck.convs_mut());
        for dec in self.decoders.iter_mut().rev() {
            convs.extend(dec.convs_mut());
        }
        load_part(convs, src, Part::Body)
    }
}

/// Decoder levels `s..1` and the task output layer.
#[derive(Clone, Debug)]
pub struct TailNet {
    spec: UNetSpec,
    split_level: usize,
    /// Ascending by level.
    decoders: Vec<DecoderLevel>,
    output: Conv2d,
    pending: bool,
}

impl TailNet {
    pub fn forward(&mut self, boundary: &Tensor, ctx: &HeadContext) -> Result<Tensor> {
        let s = self.split_level;
        check_boundary(boundary, self.spec.channels(s + 1), self.spec.spatial(s + 1), "tail input")?;
        if ctx.skips.len() != s {
            return Err(Error::misuse(format!("head context holds {} skips, tail needs {s}", ctx.skips.len())));
        }
        let mut h = boundary.clone();
        for dec in self.decoders.iter_mut().rev() {
            h = dec.forward(&h, &ctx.skips[dec.level - 1])?;
        }
        let out = self.output.forward(&h)?;
        self.pending = true;
        Ok(out)
    }

    /// Returns `(grad wrt boundary input, grads wrt each skip, tail grads)`.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<(Tensor, Vec<Tensor>, ParamSet)> {
        if !self.pending {
            return Err(Error::misuse("tail backward without a preceding forward"));
        }
        self.pending = false;
        let mut grads = self.params().zeros_like();
        let mut g = conv_backward(&mut self.output, "out", loss_grad, &mut grads)?;
        let mut skip_grads = Vec::with_capacity(self.decoders.len());
        for dec in &mut self.decoders {
            let (gx, gs) = dec.backward(&g, &mut grads)?;
            skip_grads.push(gs);
            g = gx;
        }
        Ok((g, skip_grads, grads))
    }

    fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut v = Vec::new();
        for dec in self.decoders.iter().rev() {
            v.extend(dec.convs());
        }
        v.push(("out".to_string(), &self.output));
        v
    }

    pub fn params(&self) -> ParamSet {
        collect_params(Part::Tail, self.convs())
    }

    pub fn load_params(&mut self, src: &ParamSet) -> Result<()> {
        let mut convs = Vec::new();
        for dec in self.decoders.iter_mut().rev() {
            convs.extend(dec.convs_mut());
        }
        convs.push(("out".to_string(), &mut self.output));
        load_part(convs, src, Part::Tail)
    }
}

/// A U-Net cut into head, body and tail such that every skip route starts
/// and ends inside the client's parts.
#[derive(Clone, Debug)]
pub struct SplitUNet {
    spec: UNetSpec,
    plan: SplitPlan,
    pub head: HeadNet,
    pub body: BodyNet,
    pub tail: TailNet,
    skip_routes: Vec<SkipRoute>,
}

impl SplitUNet {
    pub(super) fn from_unet(net: UNet, plan: SplitPlan) -> Result<Self> {
        let (spec, mut encoders, bottleneck, mut decoders, output) = net.into_pieces();
        plan.validate(spec.depth)?;
        let s = plan.level;
        let body_encoders = encoders.split_off(s);
        let body_decoders = decoders.split_off(s);
        let skip_routes = (1..=s)
            .map(|level| SkipRoute { level, producer: Part::Head, consumer: Part::Tail })
            .collect();
        Ok(SplitUNet {
            head: HeadNet { spec: spec.clone(), encoders, generation: 0, pending: false },
            body: BodyNet {
                spec: spec.clone(),
                split_level: s,
                encoders: body_encoders,
                bottleneck,
                decoders: body_decoders,
                skips: None,
            },
            tail: TailNet { spec: spec.clone(), split_level: s, decoders, output, pending: false },
            spec,
            plan,
            skip_routes,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn plan(&self) -> SplitPlan {
        self.plan
    }

    pub fn skip_routes(&self) -> &[SkipRoute] {
        &self.skip_routes
    }

    /// Shapes of `(head output, body output)` for a batch of `batch`.
    pub fn boundary_shapes(&self, batch: usize) -> ([usize; 4], [usize; 4]) {
        let s = self.plan.level;
        let (h, w) = self.spec.spatial(s + 1);
        ([batch, self.spec.channels(s), h, w], [batch, self.spec.channels(s + 1), h, w])
    }

    pub fn split_forward(&mut self, x: &Tensor) -> Result<(Tensor, HeadContext)> {
        self.head.forward(x)
    }

    pub fn body_forward(&mut self, head_out: &Tensor) -> Result<Tensor> {
        self.body.forward(head_out)
    }

    pub fn tail_forward(&mut self, body_out: &Tensor, ctx: &HeadContext) -> Result<Tensor> {
        self.tail.forward(body_out, ctx)
    }

    pub fn tail_backward(&mut self, loss_grad: &Tensor) -> Result<(Tensor, Vec<Tensor>, ParamSet)> {
        self.tail.backward(loss_grad)
    }

    pub fn body_backward(&mut self, grad_body_out: &Tensor) -> Result<(Tensor, ParamSet)> {
        self.body.backward(grad_body_out)
    }

    pub fn head_backward(&mut self, grad_head_out: &Tensor, grad_skips: &[Tensor], ctx: HeadContext) -> Result<ParamSet> {
        self.head.backward(grad_head_out, grad_skips, ctx)
    }

    /// All parameters in monolithic naming order.
    pub fn params(&self) -> Result<ParamSet> {
        ParamSet::merge(Part::Full, &[&self.head.params(), &self.body.params(), &self.tail.params()])
    }

    pub fn into_parts(self) -> (HeadNet, BodyNet, TailNet) {
        (self.head, self.body, self.tail)
    }
}
