//! Line-oriented prompt records.
//!
//! ```text
//! box x0 y0 x1 y1
//! points px1 py1 ... px5 py5 nx1 ny1 ... nx5 ny5
//! poly v1x v1y v2x v2y ...
//! ```
//!
//! Lines starting with `#` and blank lines are ignored by the parser.

use std::fmt::Write;

use super::contour::rasterize_polygon;
use super::{BoxPrompt, CoarseMaskPrompt, PointPrompt, Prompt};
use crate::error::{Error, Result};

pub fn write_prompt_records(prompts: &[Prompt]) -> Result<String> {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&record(p)?);
        out.push('\n');
    }
    Ok(out)
}

fn record(p: &Prompt) -> Result<String> {
    let mut s = String::new();
    match p {
        Prompt::Box(b) => {
            write!(s, "box {} {} {} {}", b.x_min, b.y_min, b.x_max, b.y_max).unwrap();
        }
        Prompt::Points(pp) => {
            if pp.positives.len() != pp.negatives.len() {
                return Err(Error::invalid(
                    "point records need equal positive and negative counts",
                ));
            }
            s.push_str("points");
            for (x, y) in pp.positives.iter().chain(&pp.negatives) {
                write!(s, " {x} {y}").unwrap();
            }
        }
        Prompt::Poly(poly) => {
            s.push_str("poly");
            for (x, y) in &poly.vertices {
                write!(s, " {x} {y}").unwrap();
            }
        }
    }
    Ok(s)
}

fn pairs(values: &[usize]) -> Vec<(usize, usize)> {
    values.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Parses records back into prompts. Polygons are rasterized on a
/// `height x width` frame.
pub fn parse_prompt_records(text: &str, height: usize, width: usize) -> Result<Vec<Prompt>> {
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = fields.next().unwrap_or_default();
        let values: Vec<usize> = fields
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("prompt records", index, e.to_string()))?;
        let prompt = match tag {
            "box" => {
                if values.len() != 4 {
                    return Err(Error::parse("prompt records", index, "box needs 4 values"));
                }
                Prompt::Box(BoxPrompt {
                    x_min: values[0],
                    y_min: values[1],
                    x_max: values[2],
                    y_max: values[3],
                })
            }
            "points" => {
                if values.is_empty() || values.len() % 4 != 0 {
                    return Err(Error::parse(
                        "prompt records",
                        index,
                        "points need equal positive and negative (x, y) pairs",
                    ));
                }
                let all = pairs(&values);
                let (pos, neg) = all.split_at(all.len() / 2);
                Prompt::Points(PointPrompt {
                    positives: pos.to_vec(),
                    negatives: neg.to_vec(),
                })
            }
            "poly" => {
                if values.len() < 6 || values.len() % 2 != 0 {
                    return Err(Error::parse(
                        "prompt records",
                        index,
                        "poly needs >= 3 (x, y) vertices",
                    ));
                }
                let vertices = pairs(&values);
                let f: Vec<(f64, f64)> = vertices.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
                Prompt::Poly(CoarseMaskPrompt {
                    rasterized: rasterize_polygon(&f, height, width, 0.5),
                    vertices,
                })
            }
            other => {
                return Err(Error::parse(
                    "prompt records",
                    index,
                    format!("unknown record `{other}`"),
                ))
            }
        };
        out.push(prompt);
    }
    Ok(out)
}
