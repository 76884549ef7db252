//! Task metrics and losses.
//!
//! Segmentation tensors use `[batch, classes, height, width]`; masks are
//! flat `batch * height * width` class labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR written to CSV when the error is exactly zero.
pub const PSNR_CAP: f64 = 99.0;

/// Additive smoothing in the soft Dice ratio.
pub const SOFT_DICE_SMOOTH: f64 = 1.0;

/// One `(round, client, name, value)` row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u32,
    /// Client index, or `None` for global/aggregate metrics.
    pub client: Option<u32>,
    pub name: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(round: u32, client: Option<u32>, name: impl Into<String>, value: f64) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {name} is not finite: {value}")));
        }
        Ok(MetricRecord { round, client, name, value })
    }

    pub fn client_label(&self) -> String {
        self.client.map_or_else(|| "global".to_string(), |c| c.to_string())
    }
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target, "mse")?;
    if pred.is_empty() {
        return Err(Error::shape("mse of empty tensors"));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len() as f64;
    pred.zip_map(target, |a, b| 2.0 * (a - b) / n)
}

/// `10 log10(range^2 / mse)`; `+inf` when the inputs are identical.
pub fn psnr(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::config(format!("data_range must be > 0, got {data_range}")));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// [`psnr`] with the zero-error case capped at [`PSNR_CAP`].
pub fn psnr_capped(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    Ok(psnr(pred, target, data_range)?.min(PSNR_CAP))
}

fn check_masks(a: &[u8], b: &[u8], classes: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("mask lengths differ: {} vs {}", a.len(), b.len())));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&v| usize::from(v) >= classes) {
        return Err(Error::config(format!("class label {bad} outside 0..{classes}")));
    }
    Ok(())
}

fn overlap(pred: &[u8], truth: &[u8], class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        a += ip as usize;
        b += it as usize;
        inter += (ip && it) as usize;
    }
    (inter, a, b)
}

/// `2|A n B| / (|A| + |B|)` for one class; 1.0 when the class is absent from
/// both masks.
pub fn dice(pred: &[u8], truth: &[u8], class: u8, classes: usize) -> Result<f64> {
    check_masks(pred, truth, classes)?;
    if usize::from(class) >= classes {
        return Err(Error::config(format!("class {class} outside 0..{classes}")));
    }
    let (inter, a, b) = overlap(pred, truth, class);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `|A n B| / |A u B|` for one class; 1.0 when absent from both.
pub fn jaccard(pred: &[u8], truth: &[u8], class: u8, classes: usize) -> Result<f64> {
    check_masks(pred, truth, classes)?;
    if usize::from(class) >= classes {
        return Err(Error::config(format!("class {class} outside 0..{classes}")));
    }
    let (inter, a, b) = overlap(pred, truth, class);
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Macro average over foreground classes `1..classes`.
pub fn mean_foreground_dice(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    mean_foreground(pred, truth, classes, dice)
}

pub fn mean_foreground_jaccard(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    mean_foreground(pred, truth, classes, jaccard)
}

fn mean_foreground(
    pred: &[u8],
    truth: &[u8],
    classes: usize,
    f: fn(&[u8], &[u8], u8, usize) -> Result<f64>,
) -> Result<f64> {
    if classes < 2 {
        return Err(Error::config("need at least one foreground class"));
    }
    let mut s = 0.0;
    for c in 1..classes {
        s += f(pred, truth, c as u8, classes)?;
    }
    Ok(s / (classes - 1) as f64)
}

/// Converts an integer-valued label tensor to a mask.
pub fn mask_from_tensor(t: &Tensor, classes: usize) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
                Err(Error::config(format!("invalid class label {v} for {classes} classes")))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}

fn seg_dims(probs: &Tensor, mask: &[u8]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = probs.dims4()?;
    if mask.len() != b * h * w {
        return Err(Error::shape(format!("mask has {} pixels, probabilities {}", mask.len(), b * h * w)));
    }
    if let Some(&bad) = mask.iter().find(|&&v| usize::from(v) >= c) {
        return Err(Error::config(format!("class label {bad} outside 0..{c}")));
    }
    Ok((b, c, h * w))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let z = logits.data();
    let mut out = vec![0.0; z.len()];
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let m = (0..c).map(|k| z[base + k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (z[base + k * plane + i] - m).exp();
                out[base + k * plane + i] = e;
                s += e;
            }
            for k in 0..c {
                out[base + k * plane + i] /= s;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Pulls a gradient wrt softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    probs.ensure_same_shape(grad_probs, "softmax_backward")?;
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = vec![0.0; p.len()];
    for bi in 0..b {
        let base = bi * c * plane;
        for i in 0..plane {
            let dot: f64 = (0..c).map(|k| p[base + k * plane + i] * g[base + k * plane + i]).sum();
            for k in 0..c {
                let j = base + k * plane + i;
                out[j] = p[j] * (g[j] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(probs: &Tensor, mask: &[u8]) -> Result<f64> {
    let (b, c, plane) = seg_dims(probs, mask)?;
    let p = probs.data();
    let mut s = 0.0;
    for bi in 0..b {
        for i in 0..plane {
            let y = usize::from(mask[bi * plane + i]);
            s -= p[(bi * c + y) * plane + i].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(s / (b * plane) as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced
/// `probs` through [`softmax`]: `(p - onehot) / pixels`.
pub fn cross_entropy_logit_grad(probs: &Tensor, mask: &[u8]) -> Result<Tensor> {
    let (b, c, plane) = seg_dims(probs, mask)?;
    let n = (b * plane) as f64;
    let mut g = probs.scale(1.0 / n);
    let gd = g.data_mut();
    for bi in 0..b {
        for i in 0..plane {
            let y = usize::from(mask[bi * plane + i]);
            gd[(bi * c + y) * plane + i] -= 1.0 / n;
        }
    }
    Ok(g)
}

/// Per-class sums `(sum p*y, sum p, sum y)` over the batch.
fn dice_terms(probs: &Tensor, mask: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (b, c, plane) = seg_dims(probs, mask)?;
    let p = probs.data();
    let mut terms = vec![(0.0, 0.0, 0.0); c];
    for bi in 0..b {
        for (k, t) in terms.iter_mut().enumerate() {
            let row = &p[(bi * c + k) * plane..][..plane];
            for (i, &pv) in row.iter().enumerate() {
                let y = (usize::from(mask[bi * plane + i]) == k) as u8 as f64;
                t.0 += pv * y;
                t.1 += pv;
                t.2 += y;
            }
        }
    }
    Ok(terms)
}

/// `1 - mean_c (2 I_c + s) / (P_c + Y_c + s)` over all classes.
pub fn soft_dice_loss(probs: &Tensor, mask: &[u8]) -> Result<f64> {
    let terms = dice_terms(probs, mask)?;
    let c = terms.len() as f64;
    let s = SOFT_DICE_SMOOTH;
    let mean: f64 = terms.iter().map(|(i, p, y)| (2.0 * i + s) / (p + y + s)).sum::<f64>() / c;
    Ok(1.0 - mean)
}

/// Gradient of [`soft_dice_loss`] with respect to `probs`.
pub fn soft_dice_grad(probs: &Tensor, mask: &[u8]) -> Result<Tensor> {
    let terms = dice_terms(probs, mask)?;
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let s = SOFT_DICE_SMOOTH;
    let mut g = Tensor::zeros(probs.shape());
    let gd = g.data_mut();
    for bi in 0..b {
        for (k, &(inter, psum, ysum)) in terms.iter().enumerate() {
            let denom = psum + ysum + s;
            let num = 2.0 * inter + s;
            for i in 0..plane {
                let y = (usize::from(mask[bi * plane + i]) == k) as u8 as f64;
                gd[(bi * c + k) * plane + i] = -(2.0 * y * denom - num) / (denom * denom) / c as f64;
            }
        }
    }
    Ok(g)
}

/// Per-pixel argmax over classes.
pub fn argmax_mask(probs: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let p = probs.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for i in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if p[(bi * c + k) * plane + i] > p[(bi * c + best) * plane + i] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
