use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::synth::mask_iou;
use crate::tensor::BinaryMask;

/// Quality gates of the automatic mask generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoMaskThresholds {
    pub pred_iou: f64,
    pub stability: f64,
    pub stability_offset: f64,
    pub nms_iou: f64,
    pub grid_stride: usize,
}

impl Default for AutoMaskThresholds {
    fn default() -> Self {
        Self {
            pred_iou: 0.88,
            stability: 0.95,
            stability_offset: 1.0,
            nms_iou: 0.7,
            grid_stride: 16,
        }
    }
}

/// Regular lattice of `(x, y)` points, spacing `stride`, offset `stride / 2`,
/// row-major.
pub fn grid_points(height: usize, width: usize, stride: usize) -> Vec<(usize, usize)> {
    if stride == 0 {
        return Vec::new();
    }
    let (rows, cols) = (height / stride, width / stride);
    let half = stride / 2;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c * stride + half, r * stride + half)))
        .collect()
}

/// IoU between the masks binarized at logit `+offset` and `-offset`.
pub fn stability_score(logits: ArrayView2<'_, f64>, offset: f64) -> f64 {
    let (mut high, mut low) = (0usize, 0usize);
    for &y in logits.iter() {
        high += (y > offset) as usize;
        low += (y > -offset) as usize;
    }
    // The high-threshold mask is contained in the low one.
    if low == 0 {
        1.0
    } else {
        high as f64 / low as f64
    }
}

/// Indices of masks passing both the predicted-IoU and stability gates.
pub fn filter_masks(
    pred_iou: &[f64],
    logits: &[ArrayView2<'_, f64>],
    thresholds: &AutoMaskThresholds,
) -> Vec<usize> {
    pred_iou
        .iter()
        .zip(logits)
        .enumerate()
        .filter(|(_, (&iou, l))| {
            iou >= thresholds.pred_iou
                && stability_score(l.view(), thresholds.stability_offset) >= thresholds.stability
        })
        .map(|(i, _)| i)
        .collect()
}

/// Greedy mask NMS. Returns kept indices in descending score order; ties keep
/// the lower index first.
pub fn nms_masks(masks: &[BinaryMask], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| mask_iou(&masks[i], &masks[k]).unwrap_or(0.0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
