//! Warped cloth for the try-on network: a thin-plate-spline applier, and an oracle that crops
//! the worn garment out of the ground-truth frame.

use crate::dataset::VideoSample;
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("thin-plate-spline system is singular (coincident or collinear control points)")]
    DegenerateTps,
    #[error("invalid warp parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot parse warp parameters: {0}")]
    Parse(String),
}

pub const DEFAULT_GRID: usize = 5;
const RIDGE: f64 = 1e-6;

/// Control points (normalized `[-1, 1]` coordinates, row-major G×G) and where each one maps to
/// in the source cloth image.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsParams {
    pub grid_size: usize,
    pub control_grid: Vec<(f64, f64)>,
    pub target_grid: Vec<(f64, f64)>,
}

/// Evenly spaced G×G points spanning `[-1, 1]²`, row-major (y outer).
pub fn uniform_grid(g: usize) -> Vec<(f64, f64)> {
    let step = |i: usize| if g == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (g - 1) as f64 };
    (0..g).flat_map(|r| (0..g).map(move |c| (step(c), step(r)))).collect()
}

impl TpsParams {
    pub fn identity(grid_size: usize) -> Self {
        let grid = uniform_grid(grid_size);
        Self { grid_size, control_grid: grid.clone(), target_grid: grid }
    }

    /// Uniform control grid with the given targets.
    pub fn with_targets(grid_size: usize, target_grid: Vec<(f64, f64)>) -> Result<Self, WarpError> {
        let p = Self { grid_size, control_grid: uniform_grid(grid_size), target_grid };
        p.validate()?;
        Ok(p)
    }

    /// Every target moved by the same normalized offset.
    pub fn translated(grid_size: usize, dx: f64, dy: f64) -> Self {
        let mut p = Self::identity(grid_size);
        for t in &mut p.target_grid {
            t.0 += dx;
            t.1 += dy;
        }
        p
    }

    pub fn validate(&self) -> Result<(), WarpError> {
        let n = self.grid_size * self.grid_size;
        if self.grid_size < 3 {
            return Err(WarpError::InvalidParams(format!("grid size {} < 3", self.grid_size)));
        }
        if self.control_grid.len() != n || self.target_grid.len() != n {
            return Err(WarpError::InvalidParams(format!(
                "expected {n} points, got {} control and {} target",
                self.control_grid.len(),
                self.target_grid.len()
            )));
        }
        let finite = |pts: &[(f64, f64)]| pts.iter().all(|p| p.0.is_finite() && p.1.is_finite());
        if !finite(&self.control_grid) || !finite(&self.target_grid) {
            return Err(WarpError::InvalidParams("non-finite point".into()));
        }
        Ok(())
    }

    /// Text form: a `tps <G>` header, then one `x y` target pair per line (2·G² numbers).
    /// The control grid is implied to be uniform.
    pub fn to_text(&self) -> Result<String, WarpError> {
        self.validate()?;
        if self.control_grid != uniform_grid(self.grid_size) {
            return Err(WarpError::InvalidParams("text form requires a uniform control grid".into()));
        }
        let mut s = format!("tps {}\n", self.grid_size);
        for (x, y) in &self.target_grid {
            writeln!(s, "{x:?} {y:?}").unwrap();
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self, WarpError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| WarpError::Parse("empty input".into()))?;
        let g: usize = header
            .strip_prefix("tps")
            .and_then(|g| g.trim().parse().ok())
            .ok_or_else(|| WarpError::Parse(format!("bad header `{header}`")))?;
        let numbers = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>().map_err(|e| WarpError::Parse(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if numbers.len() != 2 * g * g {
            return Err(WarpError::Parse(format!("expected {} numbers, found {}", 2 * g * g, numbers.len())));
        }
        Self::with_targets(g, numbers.chunks(2).map(|c| (c[0], c[1])).collect())
    }
}

fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Fitted spline mapping output coordinates to source coordinates.
#[derive(Clone, Debug)]
pub struct TpsMap {
    control: Vec<(f64, f64)>,
    /// Kernel weights per control point, then the affine terms (1, x, y), for x and y outputs.
    coef_x: Vec<f64>,
    coef_y: Vec<f64>,
}

impl TpsMap {
    pub fn fit(params: &TpsParams) -> Result<Self, WarpError> {
        params.validate()?;
        let c = &params.control_grid;
        let n = c.len();
        let m = n + 3;
        let mut a = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (c[i].0 - c[j].0, c[i].1 - c[j].1);
                a[i * m + j] = radial(dx * dx + dy * dy);
            }
            a[i * m + i] += RIDGE;
            for (k, v) in [1.0, c[i].0, c[i].1].into_iter().enumerate() {
                a[i * m + n + k] = v;
                a[(n + k) * m + i] = v;
            }
        }
        let mut b = vec![0.0; m * 2];
        for (i, t) in params.target_grid.iter().enumerate() {
            b[i * 2] = t.0;
            b[i * 2 + 1] = t.1;
        }
        let sol = linalg::solve(&a, &b, m, 2, 1e-10).ok_or(WarpError::DegenerateTps)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(WarpError::DegenerateTps);
        }
        Ok(Self {
            control: c.clone(),
            coef_x: sol.iter().step_by(2).copied().collect(),
            coef_y: sol.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.control.len();
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, c) in self.control.iter().enumerate() {
            let u = radial((x - c.0).powi(2) + (y - c.1).powi(2));
            sx += self.coef_x[i] * u;
            sy += self.coef_y[i] * u;
        }
        sx += self.coef_x[n] + self.coef_x[n + 1] * x + self.coef_x[n + 2] * y;
        sy += self.coef_y[n] + self.coef_y[n + 1] * x + self.coef_y[n + 2] * y;
        (sx, sy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpedCloth<T> {
    /// 3×H×W, zero wherever `mask` is zero.
    pub image: Tensor<T>,
    /// 1×H×W binary mask.
    pub mask: Tensor<T>,
}

/// Bilinear sample with zero contribution from taps outside the image.
fn sample_zero(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let tap = |yy: f64, xx: f64| {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1.0) * fx;
    let bottom = tap(y0 + 1.0, x0) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warp a cloth product image and its mask into an `out_size` frame.
pub fn tps_warp<T: Scalar>(
    cloth: &Tensor<T>,
    cloth_mask: &Tensor<T>,
    params: &TpsParams,
    (out_h, out_w): (usize, usize),
) -> Result<WarpedCloth<T>, WarpError> {
    if cloth.channels != 3 || cloth_mask.channels != 1 || !cloth.same_plane(cloth_mask) {
        return Err(WarpError::ShapeMismatch(format!(
            "cloth {}x{}x{} with mask {}x{}x{}",
            cloth.channels, cloth.height, cloth.width, cloth_mask.channels, cloth_mask.height, cloth_mask.width
        )));
    }
    let map = TpsMap::fit(params)?;
    let (in_h, in_w) = (cloth.height, cloth.width);
    // Source pixel coordinates for every output pixel (align-corners-false convention).
    let coords: Vec<(f64, f64)> = (0..out_h)
        .flat_map(|y| (0..out_w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let nx = (2 * x + 1) as f64 / out_w as f64 - 1.0;
            let ny = (2 * y + 1) as f64 / out_h as f64 - 1.0;
            let (sx, sy) = map.apply(nx, ny);
            (((sx + 1.0) * in_w as f64 - 1.0) / 2.0, ((sy + 1.0) * in_h as f64 - 1.0) / 2.0)
        })
        .collect();
    let warp_plane = |plane: &[T]| -> Vec<f64> {
        let src: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        coords.iter().map(|&(sx, sy)| sample_zero(&src, in_h, in_w, sx, sy)).collect()
    };
    let mask: Vec<T> = warp_plane(cloth_mask.plane(0)).into_iter().map(|v| if v >= 0.5 { T::one() } else { T::zero() }).collect();
    let mut image = Tensor::zeros(3, out_h, out_w);
    for c in 0..3 {
        let warped = warp_plane(cloth.plane(c));
        for ((dst, v), &m) in image.plane_mut(c).iter_mut().zip(warped).zip(&mask) {
            *dst = T::lit(v) * m;
        }
    }
    Ok(WarpedCloth { image, mask: Tensor::from_vec(1, out_h, out_w, mask) })
}

/// The ground-truth frame restricted to its garment mask.
///
/// # Panics
/// If `index` is outside the sample.
pub fn oracle_warp<T: Scalar>(sample: &VideoSample<T>, index: usize) -> WarpedCloth<T> {
    let mask = sample.garment_masks[index].clone();
    WarpedCloth { image: sample.frames[index].mul_mask(&mask), mask }
}
