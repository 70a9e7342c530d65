use std::collections::VecDeque;

use crate::tensor::BinaryMask;

// Clockwise neighbourhood in image coordinates (y grows downward), starting west.
const DIRS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn fg(mask: &BinaryMask, x: i64, y: i64) -> bool {
    x >= 0
        && y >= 0
        && (x as usize) < mask.width()
        && (y as usize) < mask.height()
        && mask.get(x as usize, y as usize)
}

fn dir_index(dx: i64, dy: i64) -> usize {
    DIRS.iter()
        .position(|&d| d == (dx, dy))
        .expect("backtrack pixel is an 8-neighbour")
}

/// Moore-neighbour border trace of the component containing the first
/// foreground pixel in raster order.
///
/// Returns the closed boundary as a pixel sequence; its length is the
/// perimeter in pixel steps (a lone pixel has perimeter 1). Empty mask gives
/// an empty contour.
pub fn trace_contour(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let Some(&(sx, sy)) = mask.foreground().first() else {
        return Vec::new();
    };
    let start = (sx as i64, sy as i64);
    let mut contour = vec![(sx, sy)];
    let mut cur = start;
    // Raster-order start pixel always has background to the west.
    let mut back_dir = 0usize;
    let mut first_step: Option<(i64, i64)> = None;

    loop {
        let mut next = None;
        for k in 1..=8 {
            let d = (back_dir + k) % 8;
            let cand = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
            if fg(mask, cand.0, cand.1) {
                let prev = (cur.0 + DIRS[(d + 7) % 8].0, cur.1 + DIRS[(d + 7) % 8].1);
                next = Some((cand, dir_index(prev.0 - cand.0, prev.1 - cand.1)));
                break;
            }
        }
        let Some((cand, new_back)) = next else {
            // isolated pixel
            break;
        };
        if cur == start {
            match first_step {
                None => first_step = Some(cand),
                Some(f) if f == cand => {
                    // Back at the start about to repeat the first move: the
                    // last push duplicated the start pixel.
                    contour.pop();
                    break;
                }
                Some(_) => {}
            }
        }
        cur = cand;
        back_dir = new_back;
        contour.push((cur.0 as usize, cur.1 as usize));
    }
    contour
}

/// Largest 8-connected foreground component. Ties go to the component found
/// first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dim();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut next_label = 0;
    for start in 0..h * w {
        let (sx, sy) = (start % w, start / w);
        if !mask.get(sx, sy) || label[start] != usize::MAX {
            continue;
        }
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = next_label;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in DIRS {
                let (nx, ny) = (x + dx, y + dy);
                if fg(mask, nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if label[j] == usize::MAX {
                        label[j] = next_label;
                        queue.push_back(j);
                    }
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
        next_label += 1;
    }
    let mut out = BinaryMask::empty(h, w);
    for i in best {
        out.set(i % w, i / w, true);
    }
    out
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Fills a polygon on a `height x width` grid, sampling pixel `(x, y)` at the
/// point `(x, y)`. Uses the even-odd rule; pixels within `edge_tolerance` of an
/// edge are included as well.
pub fn rasterize_polygon(
    vertices: &[(f64, f64)],
    height: usize,
    width: usize,
    edge_tolerance: f64,
) -> BinaryMask {
    let n = vertices.len();
    let mut out = BinaryMask::empty(height, width);
    if n == 0 {
        return out;
    }
    for y in 0..height {
        let py = y as f64;
        for x in 0..width {
            let px = x as f64;
            let mut inside = false;
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = vertices[i];
                let (xj, yj) = vertices[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if !inside && edge_tolerance > 0.0 {
                inside = (0..n).any(|i| {
                    point_segment_distance((px, py), vertices[i], vertices[(i + 1) % n]) <= edge_tolerance
                });
            }
            if inside {
                out.set(x, y, true);
            }
        }
    }
    out
}
