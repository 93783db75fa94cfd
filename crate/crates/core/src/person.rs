//! Per-frame network input: the garment-free person, a blurred body shape, the head region,
//! and a pose block that is either 18 keypoint discs or a 3-channel dense-pose encoding.

use crate::dataset::{IuvMap, KeypointSet, VideoSample, HEAD_KEYPOINTS, HEAD_PARTS, NUM_BODY_PARTS, NUM_KEYPOINTS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReprError {
    #[error("{0} pose annotations are not available for this sample")]
    AnnotationUnavailable(PoseKind),
    #[error("dense-pose part index {0} exceeds {max}", max = NUM_BODY_PARTS)]
    PartIndexOutOfRange(u8),
    #[error("frame {index} out of range for a sample of {len} frames")]
    FrameOutOfRange { index: usize, len: usize },
    #[error("heatmap radius must be at least 1")]
    InvalidRadius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseKind {
    Coco,
    Dense,
}

impl PoseKind {
    pub fn pose_channels(self) -> usize {
        match self {
            Self::Coco => NUM_KEYPOINTS,
            Self::Dense => 3,
        }
    }
}

impl fmt::Display for PoseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coco => "coco",
            Self::Dense => "dense",
        })
    }
}

impl FromStr for PoseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "coco" => Ok(Self::Coco),
            "dense" => Ok(Self::Dense),
            other => Err(format!("unknown pose mode `{other}` (expected coco or dense)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseMode {
    pub kind: PoseKind,
    /// Keypoint disc radius in pixels (coco only).
    pub heatmap_radius: usize,
}

impl PoseMode {
    /// Radius 3 px at 64 px height, scaled with resolution.
    pub fn for_height(kind: PoseKind, height: usize) -> Self {
        let heatmap_radius = ((3.0 * height as f64 / 64.0).round() as usize).max(1);
        Self { kind, heatmap_radius }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub name: String,
    pub channels: usize,
}

/// Ordered description of the channels in a representation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprLayout {
    pub blocks: Vec<ChannelBlock>,
}

impl ReprLayout {
    pub fn for_kind(kind: PoseKind) -> Self {
        let block = |name: &str, channels| ChannelBlock { name: name.to_string(), channels };
        Self {
            blocks: vec![
                block("agnostic_person", 3),
                block("body_shape", 1),
                block("head_region", 3),
                block(&format!("pose_{kind}"), kind.pose_channels()),
            ],
        }
    }

    pub fn total_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.channels).sum()
    }

    /// Channel offset and size of a named block.
    pub fn block(&self, name: &str) -> Option<(usize, usize)> {
        let mut offset = 0;
        for b in &self.blocks {
            if b.name == name {
                return Some((offset, b.channels));
            }
            offset += b.channels;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonRepresentation<T> {
    pub channels: Tensor<T>,
    pub layout: ReprLayout,
}

impl<T: Scalar> PersonRepresentation<T> {
    pub fn block(&self, name: &str) -> Option<Tensor<T>> {
        self.layout.block(name).map(|(start, n)| self.channels.slice_channels(start, n))
    }
}

/// One solid disc of value 1 per keypoint; absent keypoints give all-zero channels.
pub fn rasterize_coco<T: Scalar>(keypoints: &KeypointSet, (height, width): (usize, usize), radius: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(NUM_KEYPOINTS, height, width);
    let r = radius as f64;
    for (i, k) in keypoints.present() {
        let plane = out.plane_mut(i);
        let y0 = (k.y - r).floor().max(0.0) as usize;
        let y1 = ((k.y + r).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let x0 = (k.x - r).floor().max(0.0) as usize;
        let x1 = ((k.x + r).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - k.x, y as f64 - k.y);
                if dx * dx + dy * dy <= r * r {
                    plane[y * width + x] = T::one();
                }
            }
        }
    }
    out
}

/// Part index normalized by the part count, then the U and V planes.
pub fn encode_dense<T: Scalar>(map: &IuvMap<T>) -> Result<Tensor<T>, ReprError> {
    let n = map.height * map.width;
    let mut out = Tensor::zeros(3, map.height, map.width);
    let parts = T::from_u8(NUM_BODY_PARTS).unwrap();
    for i in 0..n {
        let p = map.part_index[i];
        if p > NUM_BODY_PARTS {
            return Err(ReprError::PartIndexOutOfRange(p));
        }
        out.data[i] = T::from_u8(p).unwrap() / parts;
        out.data[n + i] = map.u[i];
        out.data[2 * n + i] = map.v[i];
    }
    Ok(out)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn keypoint_silhouette(keypoints: &KeypointSet, height: usize, width: usize, radius: usize) -> Vec<bool> {
    let pts: Vec<(f64, f64)> = keypoints.present().map(|(_, k)| (k.x, k.y)).collect();
    let hull = convex_hull(pts);
    let mut mask = vec![false; height * width];
    if hull.len() >= 3 {
        for y in 0..height {
            for x in 0..width {
                let p = (x as f64, y as f64);
                let n = hull.len();
                mask[y * width + x] = (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0.0);
            }
        }
    }
    // Degenerate hulls still mark the joints themselves.
    let discs = rasterize_coco::<f64>(keypoints, (height, width), radius);
    for c in 0..NUM_KEYPOINTS {
        for (m, &v) in mask.iter_mut().zip(discs.plane(c)) {
            *m |= v > 0.0;
        }
    }
    mask
}

/// Average over `factor`×`factor` blocks, then bilinear upsampling back to full size.
pub fn blur_shape<T: Scalar>(mask: &[bool], height: usize, width: usize, factor: usize) -> Tensor<T> {
    let (bh, bw) = (height.div_ceil(factor), width.div_ceil(factor));
    let mut coarse = vec![0.0f64; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let (mut sum, mut count) = (0usize, 0usize);
            for y in by * factor..((by + 1) * factor).min(height) {
                for x in bx * factor..((bx + 1) * factor).min(width) {
                    sum += mask[y * width + x] as usize;
                    count += 1;
                }
            }
            coarse[by * bw + bx] = sum as f64 / count as f64;
        }
    }
    let f = factor as f64;
    Tensor::from_fn(1, height, width, |_, y, x| {
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (bh - 1) as f64);
        let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (bw - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(bh - 1), (x0 + 1).min(bw - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = coarse[y0 * bw + x0] * (1.0 - fx) + coarse[y0 * bw + x1] * fx;
        let bottom = coarse[y1 * bw + x0] * (1.0 - fx) + coarse[y1 * bw + x1] * fx;
        T::lit(top * (1.0 - fy) + bottom * fy)
    })
}

fn keypoint_head_mask(keypoints: &KeypointSet, height: usize, width: usize, pad: f64) -> Vec<bool> {
    let pts: Vec<(f64, f64)> = HEAD_KEYPOINTS.iter().filter_map(|&i| keypoints.points[i].map(|k| (k.x, k.y))).collect();
    let mut mask = vec![false; height * width];
    if pts.is_empty() {
        return mask;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    // Square box around the face points.
    let half = (x1 - x0).max(y1 - y0) / 2.0 + pad;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            mask[y * width + x] = (fx - cx).abs() <= half && (fy - cy).abs() <= half;
        }
    }
    mask
}

const SHAPE_DOWNSAMPLE: usize = 8;

/// Assemble the representation of frame `index` (relative to the sample's first frame).
pub fn build_representation<T: Scalar>(
    sample: &VideoSample<T>,
    index: usize,
    mode: PoseMode,
) -> Result<PersonRepresentation<T>, ReprError> {
    if mode.heatmap_radius == 0 {
        return Err(ReprError::InvalidRadius);
    }
    if index >= sample.len() {
        return Err(ReprError::FrameOutOfRange { index, len: sample.len() });
    }
    let frame = &sample.frames[index];
    let (h, w) = (frame.height, frame.width);
    let keep = sample.garment_masks[index].map(|m| T::one() - m);
    let agnostic = frame.mul_mask(&keep);

    let (silhouette, head_mask, pose) = match mode.kind {
        PoseKind::Coco => {
            let kp = sample
                .pose_coco
                .as_ref()
                .and_then(|p| p.get(index))
                .ok_or(ReprError::AnnotationUnavailable(PoseKind::Coco))?;
            (
                keypoint_silhouette(kp, h, w, mode.heatmap_radius),
                keypoint_head_mask(kp, h, w, mode.heatmap_radius as f64),
                rasterize_coco(kp, (h, w), mode.heatmap_radius),
            )
        }
        PoseKind::Dense => {
            let map = sample
                .pose_dense
                .as_ref()
                .and_then(|p| p.get(index))
                .ok_or(ReprError::AnnotationUnavailable(PoseKind::Dense))?;
            let head = map.part_index.iter().map(|p| HEAD_PARTS.contains(p)).collect();
            (map.silhouette(), head, encode_dense(map)?)
        }
    };
    let body_shape = blur_shape(&silhouette, h, w, SHAPE_DOWNSAMPLE);
    let head_mask = Tensor::from_vec(1, h, w, head_mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect());
    let head = frame.mul_mask(&head_mask);
    let layout = ReprLayout::for_kind(mode.kind);
    let channels = Tensor::concat(&[&agnostic, &body_shape, &head, &pose]);
    debug_assert_eq!(channels.channels, layout.total_channels());
    Ok(PersonRepresentation { channels, layout })
}
