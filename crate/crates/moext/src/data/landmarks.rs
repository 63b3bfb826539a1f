//! Five-point landmark detection by dark-component analysis.
//!
//! The detector thresholds dark pixels and groups them into connected
//! components: the two upper ones are the eyes, the middle one the nose,
//! the lowest the mouth (whose extreme-x pixels give the mouth corners).
//! Works on any face rendering where those four parts are the darkest
//! regions, which the synthetic generator guarantees.

use ndarray::Array3;

use crate::error::{Error, Result};

const DARK_THRESHOLD: f32 = 0.25;
const MIN_COMPONENT_PIXELS: usize = 4;

struct Component {
    pixels: Vec<(usize, usize)>, // (x, y)
    cx: f64,
    cy: f64,
}

fn connected_components(mask: &[bool], w: usize, h: usize) -> Vec<Component> {
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut queue = vec![start];
        visited[start] = true;
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x, y));
            let mut push = |nx: usize, ny: usize| {
                let n = ny * w + nx;
                if mask[n] && !visited[n] {
                    visited[n] = true;
                    queue.push(n);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        if pixels.len() >= MIN_COMPONENT_PIXELS {
            let n = pixels.len() as f64;
            let cx = pixels.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
            let cy = pixels.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
            components.push(Component { pixels, cx, cy });
        }
    }
    components
}

/// Detect (left eye, right eye, nose, left mouth corner, right mouth corner).
pub fn detect_landmarks(img: &Array3<f32>) -> Result<[(f64, f64); 5]> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let gray = (img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]]) / 3.0;
            mask[y * w + x] = gray < DARK_THRESHOLD;
        }
    }
    let mut comps = connected_components(&mask, w, h);
    if comps.len() != 4 {
        return Err(Error::Detection);
    }
    comps.sort_by(|a, b| a.cy.total_cmp(&b.cy));
    let (eyes, rest) = comps.split_at_mut(2);
    eyes.sort_by(|a, b| a.cx.total_cmp(&b.cx));
    let nose = &rest[0];
    let mouth = &rest[1];
    if eyes[1].cy >= nose.cy || nose.cy >= mouth.cy {
        return Err(Error::Detection);
    }

    let corner = |extreme_left: bool| -> (f64, f64) {
        let best = mouth
            .pixels
            .iter()
            .copied()
            .reduce(|a, b| {
                let pick_b = if extreme_left { b.0 < a.0 } else { b.0 > a.0 };
                if pick_b { b } else { a }
            })
            .unwrap();
        // Average y over all mouth pixels in the extreme column.
        let col: Vec<f64> = mouth
            .pixels
            .iter()
            .filter(|&&(x, _)| x == best.0)
            .map(|&(_, y)| y as f64)
            .collect();
        (best.0 as f64, col.iter().sum::<f64>() / col.len() as f64)
    };

    Ok([
        (eyes[0].cx, eyes[0].cy),
        (eyes[1].cx, eyes[1].cy),
        (nose.cx, nose.cy),
        corner(true),
        corner(false),
    ])
}
