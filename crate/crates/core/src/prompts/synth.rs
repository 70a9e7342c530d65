use rand::Rng;

use super::contour::{largest_component, rasterize_polygon, trace_contour};
use super::{BoxPrompt, CoarseMaskPrompt, PointPrompt, Prompt, PromptKind, PromptSet, PromptSource};
use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

/// Clicks sampled on each side of the mask boundary.
pub const POINTS_PER_SIDE: usize = 5;

/// Pixels of perimeter per polygon vertex.
const PERIMETER_PER_VERTEX: f64 = 20.0;
const MIN_VERTICES: usize = 3;

/// Minimal axis-aligned box covering every foreground pixel.
pub fn box_from_mask(mask: &BinaryMask) -> Result<BoxPrompt> {
    let mut bounds: Option<BoxPrompt> = None;
    for ((y, x), &on) in mask.0.indexed_iter() {
        if !on {
            continue;
        }
        let b = bounds.get_or_insert(BoxPrompt {
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        });
        b.x_min = b.x_min.min(x);
        b.x_max = b.x_max.max(x);
        b.y_min = b.y_min.min(y);
        b.y_max = b.y_max.max(y);
    }
    bounds.ok_or_else(|| Error::degenerate("box from empty mask"))
}

/// Five positive clicks on the mask and five negative clicks off it, drawn
/// uniformly without replacement.
pub fn sample_points<R: Rng + ?Sized>(mask: &BinaryMask, rng: &mut R) -> Result<PointPrompt> {
    let fg = mask.foreground();
    let bg = mask.background();
    if fg.len() < POINTS_PER_SIDE || bg.len() < POINTS_PER_SIDE {
        return Err(Error::degenerate(format!(
            "point sampling needs {POINTS_PER_SIDE} pixels per side, mask has {} foreground / {} background",
            fg.len(),
            bg.len()
        )));
    }
    let pick = |pool: &[(usize, usize)], rng: &mut R| -> Vec<(usize, usize)> {
        rand::seq::index::sample(rng, pool.len(), POINTS_PER_SIDE)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let positives = pick(&fg, rng);
    let negatives = pick(&bg, rng);
    Ok(PointPrompt { positives, negatives })
}

/// `max(3, round(P / 20))`.
pub fn vertex_count_for_perimeter(perimeter: usize) -> usize {
    let n = (perimeter as f64 / PERIMETER_PER_VERTEX).round() as usize;
    n.max(MIN_VERTICES)
}

/// Fits a coarse polygon to the largest component by even arc-length
/// subsampling of its traced boundary.
pub fn polygon_coarsen(mask: &BinaryMask) -> Result<CoarseMaskPrompt> {
    if mask.count() == 0 {
        return Err(Error::degenerate("polygon from empty mask"));
    }
    let component = largest_component(mask);
    let contour = trace_contour(&component);
    let perimeter = contour.len();
    let n = vertex_count_for_perimeter(perimeter);
    let vertices: Vec<(usize, usize)> = (0..n).map(|k| contour[k * perimeter / n]).collect();
    let as_f64: Vec<(f64, f64)> = vertices.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let rasterized = rasterize_polygon(&as_f64, mask.height(), mask.width(), 0.5);
    Ok(CoarseMaskPrompt { vertices, rasterized })
}

/// Builds one prompt of the requested kind from a ground-truth mask.
pub fn prompt_from_mask<R: Rng + ?Sized>(mask: &BinaryMask, kind: PromptKind, rng: &mut R) -> Result<Prompt> {
    Ok(match kind {
        PromptKind::Box => Prompt::Box(box_from_mask(mask)?),
        PromptKind::Point => Prompt::Points(sample_points(mask, rng)?),
        PromptKind::Poly => Prompt::Poly(polygon_coarsen(mask)?),
    })
}

/// Fixed prompt set for one image. Masks that cannot produce a prompt are
/// skipped and counted.
pub fn prompts_from_masks<R: Rng + ?Sized>(
    masks: &[BinaryMask],
    kind: PromptKind,
    source: PromptSource,
    rng: &mut R,
) -> Result<PromptSet> {
    if masks.is_empty() {
        return Err(Error::invalid("no masks to build prompts from"));
    }
    let mut prompts = Vec::with_capacity(masks.len());
    let mut mask_indices = Vec::with_capacity(masks.len());
    let mut skipped = 0;
    for (i, m) in masks.iter().enumerate() {
        match prompt_from_mask(m, kind, rng) {
            Ok(p) => {
                prompts.push(p);
                mask_indices.push(i);
            }
            Err(Error::Degenerate(reason)) => {
                log::debug!("skipping mask {i}: {reason}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::info!("{skipped} of {} masks skipped for {kind} prompts", masks.len());
    }
    Ok(PromptSet {
        prompts,
        source,
        mask_indices,
        skipped,
    })
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks counting as a perfect match.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.0.iter().zip(b.0.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
