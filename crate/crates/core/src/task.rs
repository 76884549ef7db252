//! Task-specific losses and evaluation shared by all runners.

use crate::data::TaskKind;
use crate::error::Result;
use crate::metrics;
use crate::tensor::Tensor;

/// Loss and its gradient with respect to the network output.
///
/// Restoration uses mean-squared error on the linear output. Segmentation
/// treats the output as logits and sums cross-entropy and soft Dice.
pub fn loss_and_grad(task: TaskKind, output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    match task {
        TaskKind::Restoration => Ok((metrics::mse(output, target)?, metrics::mse_grad(output, target)?)),
        TaskKind::Segmentation => {
            let classes = output.dims4()?.1;
            let mask = metrics::mask_from_tensor(target, classes)?;
            let probs = metrics::softmax(output)?;
            let loss = metrics::cross_entropy(&probs, &mask)? + metrics::soft_dice_loss(&probs, &mask)?;
            let mut grad = metrics::cross_entropy_logit_grad(&probs, &mask)?;
            let dice = metrics::softmax_backward(&probs, &metrics::soft_dice_grad(&probs, &mask)?)?;
            grad.add_assign(&dice)?;
            Ok((loss, grad))
        }
    }
}

pub fn loss(task: TaskKind, output: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(loss_and_grad(task, output, target)?.0)
}

/// Named quality metrics, averaged per sample: `psnr` for restoration,
/// `dice` and `jaccard` (foreground mean) for segmentation.
pub fn evaluate(task: TaskKind, output: &Tensor, target: &Tensor) -> Result<Vec<(&'static str, f64)>> {
    let (b, classes, h, w) = output.dims4()?;
    let mut sums = [0.0; 2];
    for i in 0..b {
        let out = output.gather_batch(&[i])?;
        let tgt = target.gather_batch(&[i])?;
        match task {
            TaskKind::Restoration => sums[0] += metrics::psnr_capped(&out, &tgt, 1.0)?,
            TaskKind::Segmentation => {
                let pred = metrics::argmax_mask(&out)?;
                let truth = metrics::mask_from_tensor(&tgt, classes)?;
                debug_assert_eq!(pred.len(), h * w);
                sums[0] += metrics::mean_foreground_dice(&pred, &truth, classes)?;
                sums[1] += metrics::mean_foreground_jaccard(&pred, &truth, classes)?;
            }
        }
    }
    let n = b as f64;
    Ok(match task {
        TaskKind::Restoration => vec![("psnr", sums[0] / n)],
        TaskKind::Segmentation => vec![("dice", sums[0] / n), ("jaccard", sums[1] / n)],
    })
}

/// Name of the headline quality metric.
pub fn primary_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Restoration => "psnr",
        TaskKind::Segmentation => "dice",
    }
}
