//! The four training objectives and their weighted sum.
//!
//! Batch-level functions return means over the batch. The `*_sample`
//! variants return one sample's loss together with its gradient with
//! respect to the network output; the trainer sums those per batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::layers::PROB_EPS;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mask: f64,
    pub w_jcoords: f64,
    pub w_bcoords: f64,
    pub w_type: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mask: 1.0,
            w_jcoords: 1.5,
            w_bcoords: 1.5,
            w_type: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mask, self.w_jcoords, self.w_bcoords, self.w_type];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Unweighted per-objective losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mask: f64,
    pub jcoords: f64,
    pub bcoords: f64,
    #[serde(rename = "type")]
    pub type_: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask: f64,
    pub jcoords: f64,
    pub bcoords: f64,
    #[serde(rename = "type")]
    pub type_: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            mask: self.mask,
            jcoords: self.jcoords,
            bcoords: self.bcoords,
            type_: self.type_,
        }
    }
}

pub fn combined_loss(c: LossComponents, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        mask: c.mask,
        jcoords: c.jcoords,
        bcoords: c.bcoords,
        type_: c.type_,
        final_: w.w_mask * c.mask + w.w_jcoords * c.jcoords + w.w_bcoords * c.bcoords + w.w_type * c.type_,
    }
}

/// Inverse class frequencies of a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgBgWeights {
    pub fg: f64,
    pub bg: f64,
}

pub fn fg_bg_weights(gt_mask: &[u8]) -> Result<FgBgWeights> {
    let n = gt_mask.len();
    let fg = gt_mask.iter().filter(|&&g| g != 0).count();
    if fg == 0 {
        return Err(Error::DegenerateMask("foreground"));
    }
    if fg == n {
        return Err(Error::DegenerateMask("background"));
    }
    Ok(FgBgWeights {
        fg: n as f64 / fg as f64,
        bg: n as f64 / (n - fg) as f64,
    })
}

/// Weighted binary cross-entropy of one pixel.
///
/// The ground truth weights the log of the estimate (the estimate is the
/// log argument); with a binary ground truth the reverse reading would take
/// `log(0)`.
#[inline]
pub fn mask_pixel_loss(p: f64, g: bool, w: FgBgWeights) -> f64 {
    if g {
        -w.fg * p.ln()
    } else {
        -w.bg * (1.0 - p).ln()
    }
}

#[inline]
fn mask_pixel_grad(p: f64, g: bool, w: FgBgWeights) -> f64 {
    if g {
        -w.fg / p
    } else {
        w.bg / (1.0 - p)
    }
}

fn check_probs(est: &[f64], gt: &[u8]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask estimate has {} pixels, ground truth {}",
            est.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean weighted cross-entropy over all pixels, weights taken from `gt_mask`.
pub fn mask_loss(est_probs: &[f64], gt_mask: &[u8]) -> Result<f64> {
    let w = fg_bg_weights(gt_mask)?;
    mask_loss_weighted(est_probs, gt_mask, w)
}

pub fn mask_loss_weighted(est_probs: &[f64], gt_mask: &[u8], w: FgBgWeights) -> Result<f64> {
    check_probs(est_probs, gt_mask)?;
    let sum: f64 = est_probs
        .iter()
        .zip(gt_mask)
        .map(|(&p, &g)| mask_pixel_loss(p, g != 0, w))
        .sum();
    Ok(sum / est_probs.len() as f64)
}

/// Sum of per-pixel losses for one image; writes `scale * dl/dp` into `grad`.
pub fn mask_loss_sample(
    est_probs: &[f64],
    gt_mask: &[u8],
    w: FgBgWeights,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_probs(est_probs, gt_mask)?;
    if grad.len() != est_probs.len() {
        return Err(Error::ShapeMismatch("mask gradient buffer size".into()));
    }
    let mut sum = 0.0;
    for ((&p, &g), d) in est_probs.iter().zip(gt_mask).zip(grad.iter_mut()) {
        sum += mask_pixel_loss(p, g != 0, w);
        *d = scale * mask_pixel_grad(p, g != 0, w);
    }
    Ok(sum)
}

fn batch_rows(est: &Tensor, gt: &Tensor, width: Option<usize>, what: &str) -> Result<(usize, usize)> {
    match (est.shape(), gt.shape()) {
        ([b, d], [gb, gd]) if b == gb && d == gd && d % 3 == 0 && width.is_none_or(|w| w == *d) => {
            Ok((*b, *d))
        }
        (e, g) => Err(Error::ShapeMismatch(format!("{what}: estimate {e:?} vs ground truth {g:?}"))),
    }
}

/// Mean Euclidean distance over the joints of one sample, with its gradient.
pub fn joint_loss_sample(est: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if est.len() != gt.len() || est.len() % 3 != 0 || est.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "joint vectors of length {} and {}",
            est.len(),
            gt.len()
        )));
    }
    let n_joints = est.len() / 3;
    let mut loss = 0.0;
    let mut grad = vec![0.0; est.len()];
    for j in 0..n_joints {
        let d = [
            est[3 * j] - gt[3 * j],
            est[3 * j + 1] - gt[3 * j + 1],
            est[3 * j + 2] - gt[3 * j + 2],
        ];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        loss += norm;
        if norm > 0.0 {
            for k in 0..3 {
                grad[3 * j + k] = d[k] / (norm * n_joints as f64);
            }
        }
    }
    Ok((loss / n_joints as f64, grad))
}

/// Batch mean of the per-sample joint loss; `est`, `gt` are `[B, 3 N_j]`.
pub fn joint_loss(est: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, _) = batch_rows(est, gt, None, "joint_loss")?;
    let mut sum = 0.0;
    for i in 0..b {
        sum += joint_loss_sample(est.outer(i), gt.outer(i))?.0;
    }
    Ok(sum / b as f64)
}

pub fn base_loss_sample(est: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if est.len() != 3 || gt.len() != 3 {
        return Err(Error::ShapeMismatch("base coordinates must have 3 values".into()));
    }
    joint_loss_sample(est, gt)
}

/// Batch mean Euclidean base error; `est`, `gt` are `[B, 3]`.
pub fn base_loss(est: &Tensor, gt: &Tensor) -> Result<f64> {
    let (b, _) = batch_rows(est, gt, Some(3), "base_loss")?;
    let mut sum = 0.0;
    for i in 0..b {
        sum += base_loss_sample(est.outer(i), gt.outer(i))?.0;
    }
    Ok(sum / b as f64)
}

/// Cross-entropy of one probability row with its gradient w.r.t. the row.
pub fn type_loss_sample(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::BadLabel {
            label,
            classes: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::ShapeMismatch(format!("probability row sums to {sum}")));
    }
    let q = probs[label];
    let mut grad = vec![0.0; probs.len()];
    if q > PROB_EPS {
        grad[label] = -1.0 / q;
    }
    Ok((-(q.max(PROB_EPS)).ln(), grad))
}

/// Batch mean of `-log q[label]`; `pred` is `[B, C]`.
pub fn type_loss(pred: &Tensor, labels: &[usize]) -> Result<f64> {
    let [b, _] = *pred.shape() else {
        return Err(Error::ShapeMismatch(format!("type predictions {:?}", pred.shape())));
    };
    if labels.len() != b || b == 0 {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    let mut sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        sum += type_loss_sample(pred.outer(i), l)?.0;
    }
    Ok(sum / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn weights_from_fractions() {
        let mut mask = vec![0u8; 100];
        mask[..10].fill(1);
        let w = fg_bg_weights(&mask).unwrap();
        assert!((w.fg - 10.0).abs() < 1e-12 && (w.bg - 10.0 / 9.0).abs() < 1e-12);
        let half: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        assert_eq!(fg_bg_weights(&half).unwrap(), FgBgWeights { fg: 2.0, bg: 2.0 });
        assert!(matches!(fg_bg_weights(&[0; 8]), Err(Error::DegenerateMask(_))));
        assert!(matches!(fg_bg_weights(&[1; 8]), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let gt = [1u8, 0, 0, 1, 0];
        let est: Vec<f64> = gt
            .iter()
            .map(|&g| if g == 1 { 1.0 - PROB_EPS } else { PROB_EPS })
            .collect();
        assert!(mask_loss(&est, &gt).unwrap() < 1e-5);
    }

    #[test]
    fn single_confident_miss() {
        let l = mask_loss_weighted(&[1e-7], &[1], FgBgWeights { fg: 10.0, bg: 1.0 }).unwrap();
        assert!((l - 161.180_956_5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn coordinate_losses() {
        let est = t(&[1, 6], &[0.03, 0.0, 0.04, 1.0, 1.0, 1.0]);
        let gt = t(&[1, 6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((joint_loss(&est, &gt).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(joint_loss(&gt, &gt).unwrap(), 0.0);
        let b = base_loss(&t(&[1, 3], &[1.0, 2.0, 2.0]), &t(&[1, 3], &[0.0; 3])).unwrap();
        assert!((b - 3.0).abs() < 1e-15);
        assert!(matches!(joint_loss(&est, &t(&[1, 3], &[0.0; 3])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn type_cases() {
        assert_eq!(type_loss(&t(&[1, 2], &[1.0, 0.0]), &[0]).unwrap(), 0.0);
        assert!((type_loss(&t(&[1, 2], &[0.5, 0.5]), &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((type_loss(&t(&[1, 4], &[0.25; 4]), &[3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(type_loss(&t(&[1, 2], &[0.5, 0.5]), &[2]), Err(Error::BadLabel { .. })));
    }

    #[test]
    fn combination() {
        let w = LossWeights::default();
        let c = LossComponents {
            mask: 0.2,
            jcoords: 0.1,
            bcoords: 0.1,
            type_: 0.5,
        };
        assert!((combined_loss(c, &w).final_ - 0.65).abs() < 1e-15);
        assert_eq!(combined_loss(LossComponents::default(), &w).final_, 0.0);
        let zero = LossWeights {
            w_mask: 0.0,
            w_jcoords: 0.0,
            w_bcoords: 0.0,
            w_type: 0.0,
        };
        assert_eq!(combined_loss(c, &zero).final_, 0.0);
    }
}
