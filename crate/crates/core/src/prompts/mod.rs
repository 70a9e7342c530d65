//! Prompt types, weak-supervision synthesis and automatic grid prompting.

mod automatic;
mod contour;
mod synth;
mod text;

pub use automatic::{filter_masks, grid_points, nms_masks, stability_score, AutoMaskThresholds};
pub use contour::{largest_component, rasterize_polygon, trace_contour};
pub use synth::{
    box_from_mask, mask_iou, polygon_coarsen, prompt_from_mask, prompts_from_masks, sample_points,
    vertex_count_for_perimeter, POINTS_PER_SIDE,
};
pub use text::{parse_prompt_records, write_prompt_records};

use serde::{Deserialize, Serialize};

use crate::tensor::BinaryMask;

/// Which kind of prompt a set contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Point,
    Poly,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Box, PromptKind::Point, PromptKind::Poly];

    pub fn index(self) -> usize {
        match self {
            PromptKind::Box => 0,
            PromptKind::Point => 1,
            PromptKind::Poly => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Box => "box",
            PromptKind::Point => "point",
            PromptKind::Poly => "poly",
        }
    }
}

impl std::fmt::Display for PromptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "box" => Ok(PromptKind::Box),
            "point" | "points" => Ok(PromptKind::Point),
            "poly" | "polygon" => Ok(PromptKind::Poly),
            other => Err(crate::Error::invalid(format!("unknown prompt type `{other}`"))),
        }
    }
}

/// Tight box in inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxPrompt {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Positive and negative clicks, `(x, y)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointPrompt {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Coarse polygon fitted to a mask, with its rasterization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseMaskPrompt {
    pub vertices: Vec<(usize, usize)>,
    pub rasterized: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Box(BoxPrompt),
    Points(PointPrompt),
    Poly(CoarseMaskPrompt),
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Box(_) => PromptKind::Box,
            Prompt::Points(_) => PromptKind::Point,
            Prompt::Poly(_) => PromptKind::Poly,
        }
    }

    /// Whether every coordinate lies inside a `width x height` frame.
    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        let inside = |&(x, y): &(usize, usize)| x < width && y < height;
        match self {
            Prompt::Box(b) => b.x_min <= b.x_max && b.y_min <= b.y_max && b.x_max < width && b.y_max < height,
            Prompt::Points(p) => p.positives.iter().all(inside) && p.negatives.iter().all(inside),
            Prompt::Poly(p) => p.vertices.iter().all(inside) && p.rasterized.dim() == (height, width),
        }
    }
}

/// Where a prompt set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    WeakLabel,
    Automated,
}

/// The fixed prompt set fed to every branch for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
    pub source: PromptSource,
    /// Indices of the source masks each prompt was built from.
    pub mask_indices: Vec<usize>,
    /// Masks that could not produce a prompt.
    pub skipped: usize,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}
