//! Dense optical flow via pyramidal polynomial expansion, plus the polar
//! statistics used by the pseudo-apex analysis.
//!
//! Each frame neighborhood is fitted with a local quadratic under a Gaussian
//! applicability; displacement between two such expansions is solved per
//! pixel from the quadratic coefficients, accumulated over an integration
//! window, and refined coarse-to-fine over an image pyramid.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Gaussian applicability sigma of the polynomial expansion.
pub const POLY_SIGMA: f64 = 1.1;
/// Polynomial expansion neighborhood radius (5x5 window).
pub const POLY_RADIUS: usize = 2;
/// Flow integration window (box, 15x15).
pub const WINDOW: usize = 15;
/// Pyramid levels.
pub const LEVELS: usize = 3;
/// Displacement refinement iterations per level.
pub const ITERATIONS: usize = 3;

/// Per-pixel displacement field, in pixels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn magnitude(&self) -> Array2<f64> {
        ndarray::Zip::from(&self.u)
            .and(&self.v)
            .map_collect(|&u, &v| (u * u + v * v).sqrt())
    }

    /// Per-pixel angle in [0, 2pi).
    pub fn angle(&self) -> Array2<f64> {
        ndarray::Zip::from(&self.u)
            .and(&self.v)
            .map_collect(|&u, &v| {
                let a = v.atan2(u);
                if a < 0.0 {
                    a + std::f64::consts::TAU
                } else {
                    a
                }
            })
    }
}

/// Mean-of-channels grayscale conversion.
pub fn to_gray(img: &Array3<f32>) -> Array2<f64> {
    let (c, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| img[[ch, y, x]] as f64).sum::<f64>() / c as f64
    })
}

/// Quadratic expansion coefficients per pixel:
/// f(x) ~ c + b.x + x^T A x with b = (b1, b2), A = [[a11, a12], [a12, a22]].
struct PolyExpansion {
    b1: Array2<f64>,
    b2: Array2<f64>,
    a11: Array2<f64>,
    a12: Array2<f64>,
    a22: Array2<f64>,
}

/// 1D correlation with edge clamp: out(i) = sum_t k(t) f(i + t - r).
fn correlate_rows(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = kernel.len() / 2;
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let xx = (x + i).saturating_sub(r).min(w - 1);
                k * img[[y, xx]]
            })
            .sum()
    })
}

fn correlate_cols(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = kernel.len() / 2;
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let yy = (y + i).saturating_sub(r).min(h - 1);
                k * img[[yy, x]]
            })
            .sum()
    })
}

/// Solve a small dense linear system in place (Gaussian elimination with
/// partial pivoting).
fn solve_small(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::Numeric {
                context: "solve_small".into(),
                msg: "singular system".into(),
            });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

fn poly_expansion(img: &Array2<f64>) -> PolyExpansion {
    let r = POLY_RADIUS as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * POLY_SIGMA * POLY_SIGMA)).exp())
        .collect();
    let norm: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let gt: Vec<f64> = g.iter().zip(-r..=r).map(|(&v, t)| v * t as f64).collect();
    let gt2: Vec<f64> = g
        .iter()
        .zip(-r..=r)
        .map(|(&v, t)| v * (t * t) as f64)
        .collect();

    // Separable weighted moments sum a(x) a(y) x^p y^q f.
    let row_g = correlate_rows(img, &g);
    let row_t = correlate_rows(img, &gt);
    let row_t2 = correlate_rows(img, &gt2);
    let m00 = correlate_cols(&row_g, &g);
    let m10 = correlate_cols(&row_t, &g);
    let m01 = correlate_cols(&row_g, &gt);
    let m20 = correlate_cols(&row_t2, &g);
    let m02 = correlate_cols(&row_g, &gt2);
    let m11 = correlate_cols(&row_t, &gt);

    // Normal-equation matrix of the basis (1, x, y, x^2, y^2, xy) under the
    // separable applicability; x/y/xy rows decouple, leaving a 3x3 system
    // for (1, x^2, y^2).
    let s2: f64 = g.iter().zip(-r..=r).map(|(&v, t)| v * (t * t) as f64).sum();
    let s4: f64 = g
        .iter()
        .zip(-r..=r)
        .map(|(&v, t)| v * (t * t * t * t) as f64)
        .sum();
    // Invert the 3x3 once via solves against unit vectors.
    let mut inv = [[0.0f64; 3]; 3];
    for col in 0..3 {
        let mut a = vec![
            vec![1.0, s2, s2],
            vec![s2, s4, s2 * s2],
            vec![s2, s2 * s2, s4],
        ];
        let mut e = vec![0.0; 3];
        e[col] = 1.0;
        let x = solve_small(&mut a, &mut e).expect("fixed SPD system");
        for row in 0..3 {
            inv[row][col] = x[row];
        }
    }

    let (h, w) = img.dim();
    let mut out = PolyExpansion {
        b1: &m10 / s2,
        b2: &m01 / s2,
        a11: Array2::zeros((h, w)),
        a12: &m11 / (s2 * s2),
        a22: Array2::zeros((h, w)),
    };
    for y in 0..h {
        for x in 0..w {
            let rhs = [m00[[y, x]], m20[[y, x]], m02[[y, x]]];
            out.a11[[y, x]] = inv[1][0] * rhs[0] + inv[1][1] * rhs[1] + inv[1][2] * rhs[2];
            out.a22[[y, x]] = inv[2][0] * rhs[0] + inv[2][1] * rhs[1] + inv[2][2] * rhs[2];
        }
    }
    out
}

/// Box filter with the given radius, edge clamp, separable.
fn box_filter(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    let k = vec![1.0 / (2 * radius + 1) as f64; 2 * radius + 1];
    correlate_cols(&correlate_rows(img, &k), &k)
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (h2, w2) = (h / 2, w / 2);
    Array2::from_shape_fn((h2, w2), |(y, x)| {
        (img[[2 * y, 2 * x]]
            + img[[2 * y, 2 * x + 1]]
            + img[[2 * y + 1, 2 * x]]
            + img[[2 * y + 1, 2 * x + 1]])
            / 4.0
    })
}

fn upsample_flow(f: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (h0, w0) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        2.0 * f[[(y / 2).min(h0 - 1), (x / 2).min(w0 - 1)]]
    })
}

/// One refinement pass: given expansions of both frames and a prior flow,
/// solve the windowed least-squares displacement per pixel.
fn refine(p1: &PolyExpansion, p2: &PolyExpansion, u: &mut Array2<f64>, v: &mut Array2<f64>) {
    let (h, w) = u.dim();
    let mut g11 = Array2::zeros((h, w));
    let mut g12 = Array2::zeros((h, w));
    let mut g22 = Array2::zeros((h, w));
    let mut h1 = Array2::zeros((h, w));
    let mut h2 = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = (u[[y, x]], v[[y, x]]);
            // Sample the second expansion at the displaced position.
            let sx = ((x as f64 + du).round().clamp(0.0, (w - 1) as f64)) as usize;
            let sy = ((y as f64 + dv).round().clamp(0.0, (h - 1) as f64)) as usize;
            let a11 = 0.5 * (p1.a11[[y, x]] + p2.a11[[sy, sx]]);
            let a12 = 0.5 * (p1.a12[[y, x]] + p2.a12[[sy, sx]]);
            let a22 = 0.5 * (p1.a22[[y, x]] + p2.a22[[sy, sx]]);
            let db1 = -0.5 * (p2.b1[[sy, sx]] - p1.b1[[y, x]]) + a11 * du + a12 * dv;
            let db2 = -0.5 * (p2.b2[[sy, sx]] - p1.b2[[y, x]]) + a12 * du + a22 * dv;
            g11[[y, x]] = a11 * a11 + a12 * a12;
            g12[[y, x]] = a12 * (a11 + a22);
            g22[[y, x]] = a12 * a12 + a22 * a22;
            h1[[y, x]] = a11 * db1 + a12 * db2;
            h2[[y, x]] = a12 * db1 + a22 * db2;
        }
    }
    let radius = WINDOW / 2;
    let g11 = box_filter(&g11, radius);
    let g12 = box_filter(&g12, radius);
    let g22 = box_filter(&g22, radius);
    let h1 = box_filter(&h1, radius);
    let h2 = box_filter(&h2, radius);
    for y in 0..h {
        for x in 0..w {
            let det = g11[[y, x]] * g22[[y, x]] - g12[[y, x]] * g12[[y, x]];
            if det.abs() < 1e-12 {
                u[[y, x]] = 0.0;
                v[[y, x]] = 0.0;
            } else {
                u[[y, x]] = (g22[[y, x]] * h1[[y, x]] - g12[[y, x]] * h2[[y, x]]) / det;
                v[[y, x]] = (g11[[y, x]] * h2[[y, x]] - g12[[y, x]] * h1[[y, x]]) / det;
            }
        }
    }
}

/// Dense flow from `frame_a` to `frame_b`.
pub fn dense_flow(frame_a: &Array3<f32>, frame_b: &Array3<f32>) -> Result<FlowField> {
    if frame_a.dim() != frame_b.dim() {
        return Err(Error::Shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame_a.dim(),
            frame_b.dim()
        )));
    }
    let g_a = to_gray(frame_a);
    let g_b = to_gray(frame_b);
    let mut pyr_a = vec![g_a];
    let mut pyr_b = vec![g_b];
    for _ in 1..LEVELS {
        let next_a = downsample(pyr_a.last().unwrap());
        let next_b = downsample(pyr_b.last().unwrap());
        if next_a.dim().0 < 2 * POLY_RADIUS + 1 || next_a.dim().1 < 2 * POLY_RADIUS + 1 {
            break;
        }
        pyr_a.push(next_a);
        pyr_b.push(next_b);
    }
    let coarsest = pyr_a.last().unwrap().dim();
    let mut u = Array2::zeros(coarsest);
    let mut v = Array2::zeros(coarsest);
    for level in (0..pyr_a.len()).rev() {
        let (h, w) = pyr_a[level].dim();
        if u.dim() != (h, w) {
            u = upsample_flow(&u, h, w);
            v = upsample_flow(&v, h, w);
        }
        let p1 = poly_expansion(&pyr_a[level]);
        let p2 = poly_expansion(&pyr_b[level]);
        for _ in 0..ITERATIONS {
            refine(&p1, &p2, &mut u, &mut v);
        }
    }
    Ok(FlowField { u, v })
}

/// Mean of a field over the central half of the image (avoids border
/// effects of the expansion and integration windows).
pub fn central_mean(field: &Array2<f64>) -> f64 {
    let (h, w) = field.dim();
    let (y0, y1) = (h / 4, (3 * h) / 4);
    let (x0, x1) = (w / 4, (3 * w) / 4);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            acc += field[[y, x]];
            count += 1;
        }
    }
    acc / count as f64
}

/// Circular mean of angles (radians), normalized to [0, 2pi).
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &a| (s + a.sin(), c + a.cos()));
    let mean = s.atan2(c);
    if mean < 0.0 {
        mean + std::f64::consts::TAU
    } else {
        mean
    }
}

/// Per-frame flow statistics relative to a reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStat {
    pub frame_idx: usize,
    pub mean_magnitude: f64,
    pub mean_angle_rad: f64,
}

/// For each frame after `reference_idx`'s position in the sequence, dense
/// flow from the reference and the (mean magnitude, circular mean angle).
pub fn flow_stats(frames: &[Array3<f32>], reference_idx: usize) -> Result<Vec<FlowStat>> {
    if frames.len() < 2 {
        return Err(Error::Empty("flow_stats needs at least 2 frames".into()));
    }
    if reference_idx >= frames.len() {
        return Err(Error::Shape(format!(
            "reference_idx {reference_idx} out of range for {} frames",
            frames.len()
        )));
    }
    let mut out = Vec::new();
    for (k, frame) in frames.iter().enumerate() {
        if k == reference_idx {
            continue;
        }
        let flow = dense_flow(&frames[reference_idx], frame)?;
        let mag = flow.magnitude();
        let angles: Vec<f64> = flow.angle().iter().copied().collect();
        out.push(FlowStat {
            frame_idx: k,
            mean_magnitude: central_mean(&mag),
            mean_angle_rad: circular_mean(&angles),
        });
    }
    Ok(out)
}

/// Write flow statistics as CSV `frame_idx,mean_magnitude,mean_angle_rad`.
pub fn save_flow_csv(stats: &[FlowStat], path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame_idx", "mean_magnitude", "mean_angle_rad"])?;
    for s in stats {
        w.write_record([
            s.frame_idx.to_string(),
            format!("{:.9}", s.mean_magnitude),
            format!("{:.9}", s.mean_angle_rad),
        ])?;
    }
    w.flush()?;
    Ok(())
}
