//! Per-layer forward/backward with explicit caches.
//!
//! A layer caches whatever its backward needs during `forward`; `backward`
//! takes that cache, so a second backward without a fresh forward is an
//! error rather than a silent reuse.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Relu,
    MaxPool2x2,
    Upsample2x,
    ConcatChannels,
}

/// Output of a single-input layer backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    /// Parameter gradients in the same order as [`Layer::params`].
    pub params: Vec<(&'static str, Tensor)>,
}

pub trait Layer {
    fn kind(&self) -> LayerKind;

    fn forward(&mut self, input: &Tensor) -> Result<Tensor>;

    fn backward(&mut self, upstream: &Tensor) -> Result<Gradients>;

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

fn take_cache<T>(cache: &mut Option<T>, layer: &str) -> Result<T> {
    cache
        .take()
        .ok_or_else(|| Error::misuse(format!("{layer} backward called without a preceding forward")))
}

fn check_upstream(upstream: &Tensor, expected: &[usize], layer: &str) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::shape(format!(
            "{layer} upstream gradient {:?}, forward output was {expected:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

/// Valid `[lo, hi)` output range along one axis for tap offset `d` with
/// zero padding.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Stride-1 "same" convolution with a square odd kernel (1 or 3).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    k: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` weights, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut RngStream) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (in_ch * k * k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| rng.uniform(-bound, bound));
        Conv2d { weight, bias: Tensor::zeros(&[out_ch]), k, cache: None }
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out_ch, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::shape(format!("conv weight must be rank 4, got {:?}", weight.shape())));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!("unsupported kernel {kh}x{kw}")));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::shape(format!("conv bias {:?} for {out_ch} outputs", bias.shape())));
        }
        Ok(Conv2d { weight, bias, k: kh, cache: None })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> LayerKind {
        if self.k == 3 {
            LayerKind::Conv3x3
        } else {
            LayerKind::Conv1x1
        }
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = input.dims4()?;
        let cout = self.out_channels();
        if cin != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let k = self.k;
        let pad = (k / 2) as isize;
        let plane = h * w;
        let x = input.data();
        let wt = self.weight.data();
        let mut out = vec![0.0; b * cout * plane];
        for bi in 0..b {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * plane..][..plane];
                o.fill(self.bias.data()[co]);
                for ci in 0..cin {
                    let xin = &x[(bi * cin + ci) * plane..][..plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(w, dx);
                            let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                            for y in y0..y1 {
                                let src_row = (y as isize + dy) as usize * w;
                                let src = &xin[(src_row as isize + x0 as isize + dx) as usize..][..x1 - x0];
                                let dst = &mut o[y * w + x0..y * w + x1];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, cout, h, w], out)?;
        out.ensure_finite("conv forward")?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let input = take_cache(&mut self.cache, "conv")?;
        let (b, cin, h, w) = input.dims4()?;
        let cout = self.out_channels();
        check_upstream(upstream, &[b, cout, h, w], "conv")?;
        let k = self.k;
        let pad = (k / 2) as isize;
        let plane = h * w;
        let x = input.data();
        let g = upstream.data();
        let wt = self.weight.data();
        let mut gin = vec![0.0; x.len()];
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; cout];
        for bi in 0..b {
            for co in 0..cout {
                let go = &g[(bi * cout + co) * plane..][..plane];
                gb[co] += go.iter().sum::<f64>();
                for ci in 0..cin {
                    let xin = &x[(bi * cin + ci) * plane..][..plane];
                    let gi = &mut gin[(bi * cin + ci) * plane..][..plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(w, dx);
                            let widx = ((co * cin + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let src_off = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                                let src_off = src_off as usize;
                                let gsrc = &go[y * w + x0..y * w + x1];
                                let xs = &xin[src_off..src_off + (x1 - x0)];
                                for (gv, xv) in gsrc.iter().zip(xs) {
                                    acc += gv * xv;
                                }
                                let gdst = &mut gi[src_off..src_off + (x1 - x0)];
                                for (d, gv) in gdst.iter_mut().zip(gsrc) {
                                    *d += wv * gv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            input: Tensor::new(input.shape().to_vec(), gin)?,
            params: vec![
                ("weight", Tensor::new(self.weight.shape().to_vec(), gw)?),
                ("bias", Tensor::new(vec![cout], gb)?),
            ],
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
        out.ensure_finite("relu forward")?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let input = take_cache(&mut self.cache, "relu")?;
        check_upstream(upstream, input.shape(), "relu")?;
        let input = input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })?;
        Ok(Gradients { input, params: Vec::new() })
    }
}

/// 2x2 max pooling, stride 2. Ties route the gradient to the first maximum
/// in row-major scan order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for MaxPool2x2 {
    fn kind(&self) -> LayerKind {
        LayerKind::MaxPool2x2
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool needs even spatial size, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.cache = Some((input.shape().to_vec(), argmax));
        Tensor::new(vec![b, c, oh, ow], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let (in_shape, argmax) = take_cache(&mut self.cache, "maxpool")?;
        let out_shape = [in_shape[0], in_shape[1], in_shape[2] / 2, in_shape[3] / 2];
        check_upstream(upstream, &out_shape, "maxpool")?;
        let mut gin = Tensor::zeros(&in_shape);
        let gd = gin.data_mut();
        for (&idx, &g) in argmax.iter().zip(upstream.data()) {
            gd[idx] += g;
        }
        Ok(Gradients { input: gin, params: Vec::new() })
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Clone, Debug, Default)]
pub struct Upsample2x {
    cache: Option<Vec<usize>>,
}

impl Upsample2x {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Upsample2x {
    fn kind(&self) -> LayerKind {
        LayerKind::Upsample2x
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = input.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..][..h * w];
            let dst = &mut out[bc * oh * ow..][..oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * w..][..w];
                let drow = &mut dst[y * ow..][..ow];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        self.cache = Some(input.shape().to_vec());
        Tensor::new(vec![b, c, oh, ow], out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let in_shape = take_cache(&mut self.cache, "upsample")?;
        let (h, w) = (in_shape[2], in_shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        check_upstream(upstream, &[in_shape[0], in_shape[1], oh, ow], "upsample")?;
        let g = upstream.data();
        let mut gin = Tensor::zeros(&in_shape);
        let gd = gin.data_mut();
        for bc in 0..in_shape[0] * in_shape[1] {
            let src = &g[bc * oh * ow..][..oh * ow];
            let dst = &mut gd[bc * h * w..][..h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[(y / 2) * w + xo / 2] += src[y * ow + xo];
                }
            }
        }
        Ok(Gradients { input: gin, params: Vec::new() })
    }
}

/// Channel concatenation of two tensors, `[first, second]`.
///
/// Not a [`Layer`]: it has two inputs and two input gradients.
#[derive(Clone, Debug, Default)]
pub struct ConcatChannels {
    cache: Option<(usize, usize)>,
}

impl ConcatChannels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::ConcatChannels
    }

    pub fn forward(&mut self, first: &Tensor, second: &Tensor) -> Result<Tensor> {
        let (b, c1, h, w) = first.dims4()?;
        let (b2, c2, h2, w2) = second.dims4()?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(Error::shape(format!(
                "concat of {:?} and {:?}",
                first.shape(),
                second.shape()
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * (c1 + c2) * plane);
        for bi in 0..b {
            out.extend_from_slice(&first.data()[bi * c1 * plane..][..c1 * plane]);
            out.extend_from_slice(&second.data()[bi * c2 * plane..][..c2 * plane]);
        }
        self.cache = Some((c1, c2));
        Tensor::new(vec![b, c1 + c2, h, w], out)
    }

    /// Splits the upstream gradient back into `(first, second)`.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c1, c2) = take_cache(&mut self.cache, "concat")?;
        let (b, c, h, w) = upstream.dims4()?;
        if c != c1 + c2 {
            return Err(Error::shape(format!("concat upstream has {c} channels, expected {}", c1 + c2)));
        }
        let plane = h * w;
        let mut g1 = Vec::with_capacity(b * c1 * plane);
        let mut g2 = Vec::with_capacity(b * c2 * plane);
        for bi in 0..b {
            let item = &upstream.data()[bi * c * plane..][..c * plane];
            g1.extend_from_slice(&item[..c1 * plane]);
            g2.extend_from_slice(&item[c1 * plane..]);
        }
        Ok((Tensor::new(vec![b, c1, h, w], g1)?, Tensor::new(vec![b, c2, h, w], g2)?))
    }
}
