//! Image quality metrics, per-video aggregation, and report files.

mod plot;

pub use plot::{bar_chart, Bar};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Serialize, Serializer};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {height}x{width} is smaller than the {window}px window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("no rows to aggregate")]
    EmptyInput,
    #[error("invalid metric parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png encoding failed: {0}")]
    Png(String),
}

/// BT.601 luma weights used before computing structural similarity on colour images.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Per-scale exponents for multiscale SSIM, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_same<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(), MetricError> {
    if x.same_shape(y) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.channels, x.height, x.width, y.channels, y.height, y.width
        )))
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64, MetricError> {
    check_same(x, y)?;
    if !(max_val > 0.0) {
        return Err(MetricError::InvalidParameter(format!("max_val {max_val}")));
    }
    let mse = x.data.iter().zip(&y.data).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, k1: 0.01, k2: 0.03, max_val: 1.0 }
    }
}

/// Single-channel image as a row-major f64 buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    /// Luma for 3-channel tensors, the plane itself for 1-channel ones.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, MetricError> {
        let data = match t.channels {
            1 => t.data.iter().map(|v| v.as_f64()).collect(),
            3 => {
                let n = t.plane_len();
                (0..n)
                    .map(|i| (0..3).map(|c| LUMA[c] * t.data[c * n + i].as_f64()).sum())
                    .collect()
            }
            c => return Err(MetricError::ShapeMismatch(format!("expected 1 or 3 channels, got {c}"))),
        };
        Ok(Self { height: t.height, width: t.width, data })
    }

    /// 2×2 mean pooling (a trailing odd row/column is dropped).
    pub fn downsample(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.data[yy * self.width + xx];
                data.push((at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0);
            }
        }
        Self { height: h, width: w, data }
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let sigma = size as f64 / 6.0;
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over valid positions only.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM and contrast-structure maps over valid window positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub ssim: Vec<f64>,
    pub cs: Vec<f64>,
}

impl SsimMap {
    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }

    pub fn mean_cs(&self) -> f64 {
        self.cs.iter().sum::<f64>() / self.cs.len() as f64
    }
}

pub fn gray_ssim_map(x: &Gray, y: &Gray, p: &SsimParams) -> Result<SsimMap, MetricError> {
    if x.height != y.height || x.width != y.width {
        return Err(MetricError::ShapeMismatch(format!("{}x{} vs {}x{}", x.height, x.width, y.height, y.width)));
    }
    if p.window == 0 || x.height < p.window || x.width < p.window {
        return Err(MetricError::ImageTooSmall { height: x.height, width: x.width, window: p.window });
    }
    let (h, w) = (x.height, x.width);
    let k = gaussian_window(p.window);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_x = filter_valid(&x.data, h, w, &k);
    let mu_y = filter_valid(&y.data, h, w, &k);
    let xx = filter_valid(&prod(&x.data, &x.data), h, w, &k);
    let yy = filter_valid(&prod(&y.data, &y.data), h, w, &k);
    let xy = filter_valid(&prod(&x.data, &y.data), h, w, &k);
    let c1 = (p.k1 * p.max_val).powi(2);
    let c2 = (p.k2 * p.max_val).powi(2);
    let n = mu_x.len();
    let (mut ssim, mut cs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs.push(c);
        ssim.push(l * c);
    }
    Ok(SsimMap { height: h - p.window + 1, width: w - p.window + 1, ssim, cs })
}

pub fn ssim_map<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<SsimMap, MetricError> {
    check_same(x, y)?;
    gray_ssim_map(&Gray::from_tensor(x)?, &Gray::from_tensor(y)?, p)
}

/// Mean structural similarity over all valid windows of the luma images.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<f64, MetricError> {
    Ok(ssim_map(x, y, p)?.mean_ssim())
}

/// Largest level count (≤ 5) whose coarsest scale still fits one window.
pub fn max_levels(height: usize, width: usize, window: usize) -> usize {
    let mut levels = 0;
    let (mut h, mut w) = (height, width);
    while levels < MS_SSIM_WEIGHTS.len() && h >= window && w >= window {
        levels += 1;
        h /= 2;
        w /= 2;
    }
    levels
}

/// Multiscale SSIM: contrast-structure terms at the finer scales and full SSIM at the coarsest,
/// combined with the standard exponents (truncated and renormalized to the levels used).
/// The level count is reduced automatically when the image is too small.
pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, levels: usize, p: &SsimParams) -> Result<f64, MetricError> {
    check_same(x, y)?;
    let levels = levels.clamp(1, MS_SSIM_WEIGHTS.len()).min(max_levels(x.height, x.width, p.window));
    if levels == 0 {
        return Err(MetricError::ImageTooSmall { height: x.height, width: x.width, window: p.window });
    }
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let total: f64 = weights.iter().sum();
    let (mut gx, mut gy) = (Gray::from_tensor(x)?, Gray::from_tensor(y)?);
    let mut result = 1.0;
    for (level, &w) in weights.iter().enumerate() {
        let map = gray_ssim_map(&gx, &gy, p)?;
        let term = if level + 1 == levels { map.mean_ssim() } else { map.mean_cs() };
        result *= term.max(0.0).powf(w / total);
        if level + 1 < levels {
            gx = gx.downsample();
            gy = gy.downsample();
        }
    }
    Ok(result)
}

/// Level count requested for reports; clamped to what the image size allows.
pub const REPORT_LEVELS: usize = 5;

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_none()
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub video_id: String,
    pub frame_idx: usize,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
}

/// Mean and population standard deviation of both metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr_mean: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr_std: f64,
    /// Infinite PSNR values left out of the PSNR statistics.
    pub psnr_inf_excluded: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoAggregate {
    pub video_id: String,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameRow>,
    /// In order of first appearance.
    pub per_video: Vec<VideoAggregate>,
    /// Statistics of the per-video means.
    pub overall: Aggregate,
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_pairs(ssim: &[f64], psnr: &[f64]) -> Aggregate {
    let finite: Vec<f64> = psnr.iter().copied().filter(|v| v.is_finite()).collect();
    let (ssim_mean, ssim_std) = mean_std(ssim);
    let (psnr_mean, psnr_std) = mean_std(&finite);
    Aggregate {
        ssim_mean,
        ssim_std,
        psnr_mean,
        psnr_std,
        psnr_inf_excluded: psnr.len() - finite.len(),
        count: ssim.len(),
    }
}

pub fn aggregate(rows: Vec<FrameRow>) -> Result<MetricReport, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in &rows {
        if !order.contains(&r.video_id.as_str()) {
            order.push(&r.video_id);
        }
    }
    let per_video: Vec<VideoAggregate> = order
        .iter()
        .map(|id| {
            let (s, p): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.video_id == *id).map(|r| (r.ssim, r.psnr)).unzip();
            VideoAggregate { video_id: id.to_string(), stats: aggregate_pairs(&s, &p) }
        })
        .collect();
    let ssim_means: Vec<f64> = per_video.iter().map(|v| v.stats.ssim_mean).collect();
    let psnr_means: Vec<f64> = per_video.iter().map(|v| v.stats.psnr_mean).filter(|v| !v.is_nan()).collect();
    let mut overall = aggregate_pairs(&ssim_means, &psnr_means);
    overall.psnr_inf_excluded = per_video.iter().map(|v| v.stats.psnr_inf_excluded).sum();
    overall.count = rows.len();
    Ok(MetricReport { per_frame: rows, per_video, overall })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MetricError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| MetricError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| MetricError::Io { path: path.display().to_string(), source })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per frame: `video_id,frame_idx,ssim,psnr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id,frame_idx,ssim,psnr\n");
        for r in &self.per_frame {
            writeln!(s, "{},{},{},{}", r.video_id, r.frame_idx, fmt_num(r.ssim), fmt_num(r.psnr)).unwrap();
        }
        s
    }

    /// `report.json`, `report.csv`, and per-video bar plots under `plots/`.
    pub fn write(&self, dir: &Path) -> Result<(), MetricError> {
        write_file(&dir.join("report.json"), self.to_json().as_bytes())?;
        write_file(&dir.join("report.csv"), self.to_csv().as_bytes())?;
        let bars = |f: fn(&Aggregate) -> (f64, f64)| -> Vec<Bar> {
            self.per_video
                .iter()
                .map(|v| {
                    let (mean, std) = f(&v.stats);
                    Bar { label: v.video_id.clone(), mean, std }
                })
                .collect()
        };
        bar_chart(&bars(|a| (a.ssim_mean, a.ssim_std)), &dir.join("plots/ssim_per_video.png"))?;
        bar_chart(&bars(|a| (a.psnr_mean, a.psnr_std)), &dir.join("plots/psnr_per_video.png"))?;
        Ok(())
    }
}
