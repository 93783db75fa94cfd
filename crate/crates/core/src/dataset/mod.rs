//! Video try-on datasets in the on-disk layout
//!
//! ```text
//! <root>/<split>/<video_id>/frames/%05d.png          RGB frames, contiguous from 0
//!                          /cloth/product.png        isolated cloth product image
//!                          /cloth/product_mask.png   its binary mask
//!                          /garment_mask/%05d.png    worn-garment mask per frame
//!                          /pose_coco/%05d.json      18 keypoints, [x, y, confidence] or null
//!                          /pose_dense/%05d.png      R = part index, G = U·255, B = V·255
//!                          /flow/%05d.flo            Middlebury flow, frame t -> t+1
//! ```
//!
//! plus a procedural generator that writes the same layout.

pub mod io;
mod synth;

pub use synth::{generate_synthetic, render_video, SynthSpec, SynthVideo};

use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use io::Raster;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const NUM_KEYPOINTS: usize = 18;
/// Body parts in a dense-pose map, excluding background (index 0).
pub const NUM_BODY_PARTS: u8 = 24;
/// Dense-pose part indices that belong to the head.
pub const HEAD_PARTS: [u8; 2] = [23, 24];
/// Keypoint slots for nose, eyes and ears.
pub const HEAD_KEYPOINTS: [usize; 5] = [0, 14, 15, 16, 17];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("video `{video_id}` is missing {kind}")]
    MissingAnnotation { video_id: String, kind: AnnotationKind },
    #[error("no videos found under {0}")]
    EmptyDataset(PathBuf),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("invalid annotation {path}: {reason}")]
    InvalidAnnotation { path: PathBuf, reason: String },
    #[error("frame range {start}..{end} out of range for video `{video_id}` with {frames} frames")]
    IndexOutOfRange { video_id: String, start: usize, end: usize, frames: usize },
    #[error("unknown video `{0}`")]
    UnknownVideo(String),
    #[error("invalid generator settings: {0}")]
    InvalidSpec(String),
    #[error("I/O failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Everything a video directory can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnotationKind {
    Frames,
    ClothProduct,
    ClothMask,
    GarmentMask,
    PoseCoco,
    PoseDense,
    Flow,
}

impl AnnotationKind {
    /// Kinds whose presence is optional per split; once any video has one, all must.
    pub const OPTIONAL: [AnnotationKind; 3] = [Self::PoseCoco, Self::PoseDense, Self::Flow];

    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Frames => "frames",
            Self::ClothProduct | Self::ClothMask => "cloth",
            Self::GarmentMask => "garment_mask",
            Self::PoseCoco => "pose_coco",
            Self::PoseDense => "pose_dense",
            Self::Flow => "flow",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Self::PoseCoco => "json",
            Self::Flow => "flo",
            _ => "png",
        }
    }

    /// Path of the per-frame file at `index` inside a video directory.
    pub fn frame_path(self, video_dir: &Path, index: usize) -> PathBuf {
        video_dir.join(self.dir_name()).join(format!("{index:05}.{}", self.extension()))
    }
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frames => "frames",
            Self::ClothProduct => "cloth/product.png",
            Self::ClothMask => "cloth/product_mask.png",
            Self::GarmentMask => "garment masks",
            Self::PoseCoco => "pose_coco annotations",
            Self::PoseDense => "pose_dense annotations",
            Self::Flow => "flow fields",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub frame_size: FrameSize,
    /// Sorted by id.
    pub videos: Vec<VideoEntry>,
    /// Optional annotation kinds present for every video of the split.
    pub annotations: Vec<AnnotationKind>,
}

impl DatasetManifest {
    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.iter().map(|v| v.id.as_str())
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn video_dir(&self, id: &str) -> PathBuf {
        self.root.join(self.split.dir_name()).join(id)
    }

    pub fn has(&self, kind: AnnotationKind) -> bool {
        self.annotations.contains(&kind)
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frame_count).sum()
    }

    /// Every (video index, frame index) pair, ordered by video id then frame.
    pub fn frame_index(&self) -> Vec<(usize, usize)> {
        self.videos
            .iter()
            .enumerate()
            .flat_map(|(v, entry)| (0..entry.frame_count).map(move |f| (v, f)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// The 18 CocoPose keypoints of one frame; absent joints are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: [Option<Keypoint>; NUM_KEYPOINTS],
}

impl KeypointSet {
    pub fn absent() -> Self {
        Self { points: [None; NUM_KEYPOINTS] }
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Keypoint)> {
        self.points.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|k| (i, k)))
    }
}

/// Dense pose: a body-part index per pixel with surface coordinates in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct IuvMap<T> {
    pub height: usize,
    pub width: usize,
    pub part_index: Vec<u8>,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> IuvMap<T> {
    /// Decode from the three-channel PNG encoding.
    pub fn from_raster(r: &Raster) -> Self {
        let n = r.width * r.height;
        let scale = T::lit(255.0);
        let mut map = Self {
            height: r.height,
            width: r.width,
            part_index: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        };
        for px in r.pixels.chunks_exact(3) {
            map.part_index.push(px[0]);
            map.u.push(T::from_u8(px[1]).unwrap() / scale);
            map.v.push(T::from_u8(px[2]).unwrap() / scale);
        }
        map
    }

    /// Pixels labelled with any body part.
    pub fn silhouette(&self) -> Vec<bool> {
        self.part_index.iter().map(|&p| p > 0).collect()
    }
}

/// One video (or a contiguous range of its frames) with its annotations, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample<T> {
    pub video_id: String,
    /// Index of `frames[0]` within the full video.
    pub first_frame: usize,
    pub frames: Vec<Tensor<T>>,
    pub cloth: Tensor<T>,
    pub cloth_mask: Tensor<T>,
    pub garment_masks: Vec<Tensor<T>>,
    pub pose_coco: Option<Vec<KeypointSet>>,
    pub pose_dense: Option<Vec<IuvMap<T>>>,
}

impl<T: Scalar> VideoSample<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

fn list_indexed(dir: &Path, ext: &str) -> Vec<usize> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut indices: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(&format!(".{ext}"))?;
            (stem.len() == 5).then(|| stem.parse().ok()).flatten()
        })
        .collect();
    indices.sort_unstable();
    indices
}

fn is_contiguous(indices: &[usize], expected: usize) -> bool {
    indices.len() == expected && indices.iter().enumerate().all(|(i, &v)| i == v)
}

/// Index a split directory and verify every video's annotation coverage.
pub fn scan_manifest(root: &Path, split: Split) -> Result<DatasetManifest, DatasetError> {
    let split_dir = root.join(split.dir_name());
    let mut ids: Vec<String> = match std::fs::read_dir(&split_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect(),
        Err(_) => Vec::new(),
    };
    ids.sort();
    if ids.is_empty() {
        return Err(DatasetError::EmptyDataset(split_dir));
    }

    let annotations: Vec<AnnotationKind> = AnnotationKind::OPTIONAL
        .into_iter()
        .filter(|k| ids.iter().any(|id| split_dir.join(id).join(k.dir_name()).is_dir()))
        .collect();

    let mut videos = Vec::with_capacity(ids.len());
    let mut frame_size = None;
    for id in ids {
        let dir = split_dir.join(&id);
        let missing = |kind| DatasetError::MissingAnnotation { video_id: id.clone(), kind };
        let frames = list_indexed(&dir.join("frames"), "png");
        if frames.is_empty() || !is_contiguous(&frames, frames.len()) {
            return Err(missing(AnnotationKind::Frames));
        }
        let n = frames.len();
        if !dir.join("cloth/product.png").is_file() {
            return Err(missing(AnnotationKind::ClothProduct));
        }
        if !dir.join("cloth/product_mask.png").is_file() {
            return Err(missing(AnnotationKind::ClothMask));
        }
        if !is_contiguous(&list_indexed(&dir.join("garment_mask"), "png"), n) {
            return Err(missing(AnnotationKind::GarmentMask));
        }
        for &kind in &annotations {
            let expected = if kind == AnnotationKind::Flow { n - 1 } else { n };
            if !is_contiguous(&list_indexed(&dir.join(kind.dir_name()), kind.extension()), expected) {
                return Err(missing(kind));
            }
        }
        if frame_size.is_none() {
            let (height, width) = io::png_size(&AnnotationKind::Frames.frame_path(&dir, 0))?;
            frame_size = Some(FrameSize { height, width });
        }
        videos.push(VideoEntry { id, frame_count: n });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        frame_size: frame_size.expect("at least one video"),
        videos,
        annotations,
    })
}

pub(crate) fn raster_to_tensor<T: Scalar>(r: &Raster) -> Tensor<T> {
    let scale = T::lit(255.0);
    let (h, w, c) = (r.height, r.width, r.channels);
    Tensor::from_fn(c, h, w, |ch, y, x| T::from_u8(r.pixels[(y * w + x) * c + ch]).unwrap() / scale)
}

fn load_rgb<T: Scalar>(path: &Path, size: Option<FrameSize>) -> Result<Tensor<T>, DatasetError> {
    let r = io::read_png(path)?;
    if r.channels != 3 {
        return Err(DatasetError::CorruptImage { path: path.into(), reason: "expected an RGB image".into() });
    }
    check_size(path, &r, size)?;
    Ok(raster_to_tensor(&r))
}

fn load_mask<T: Scalar>(path: &Path, size: Option<FrameSize>) -> Result<Tensor<T>, DatasetError> {
    let r = io::read_png(path)?;
    if r.channels != 1 {
        return Err(DatasetError::CorruptImage { path: path.into(), reason: "expected a grayscale mask".into() });
    }
    check_size(path, &r, size)?;
    Ok(Tensor::from_vec(1, r.height, r.width, r.pixels.iter().map(|&p| if p >= 128 { T::one() } else { T::zero() }).collect()))
}

fn check_size(path: &Path, r: &Raster, size: Option<FrameSize>) -> Result<(), DatasetError> {
    match size {
        Some(s) if s.height != r.height || s.width != r.width => Err(DatasetError::CorruptImage {
            path: path.into(),
            reason: format!("size {}x{} differs from {}x{}", r.height, r.width, s.height, s.width),
        }),
        _ => Ok(()),
    }
}

/// Load frames `[start, end)` of one video together with its cloth and annotations.
pub fn load_sample<T: Scalar>(
    manifest: &DatasetManifest,
    video_id: &str,
    (start, end): (usize, usize),
) -> Result<VideoSample<T>, DatasetError> {
    let entry = manifest.video(video_id).ok_or_else(|| DatasetError::UnknownVideo(video_id.to_string()))?;
    if start >= end || end > entry.frame_count {
        return Err(DatasetError::IndexOutOfRange {
            video_id: video_id.to_string(),
            start,
            end,
            frames: entry.frame_count,
        });
    }
    let dir = manifest.video_dir(video_id);
    let size = Some(manifest.frame_size);
    let frames = (start..end)
        .map(|i| load_rgb(&AnnotationKind::Frames.frame_path(&dir, i), size))
        .collect::<Result<Vec<_>, _>>()?;
    let garment_masks = (start..end)
        .map(|i| load_mask(&AnnotationKind::GarmentMask.frame_path(&dir, i), size))
        .collect::<Result<Vec<_>, _>>()?;
    let pose_coco = manifest
        .has(AnnotationKind::PoseCoco)
        .then(|| (start..end).map(|i| io::read_pose(&AnnotationKind::PoseCoco.frame_path(&dir, i))).collect())
        .transpose()?;
    let pose_dense = if manifest.has(AnnotationKind::PoseDense) {
        let mut maps = Vec::with_capacity(end - start);
        for i in start..end {
            let path = AnnotationKind::PoseDense.frame_path(&dir, i);
            let r = io::read_png(&path)?;
            if r.channels != 3 {
                return Err(DatasetError::CorruptImage { path, reason: "expected a 3-channel IUV image".into() });
            }
            check_size(&path, &r, size)?;
            maps.push(IuvMap::from_raster(&r));
        }
        Some(maps)
    } else {
        None
    };
    Ok(VideoSample {
        video_id: video_id.to_string(),
        first_frame: start,
        frames,
        cloth: load_rgb(&dir.join("cloth/product.png"), size)?,
        cloth_mask: load_mask(&dir.join("cloth/product_mask.png"), size)?,
        garment_masks,
        pose_coco,
        pose_dense,
    })
}

/// Flow field carrying frame `index` onto frame `index + 1`.
pub fn load_flow<T: Scalar>(manifest: &DatasetManifest, video_id: &str, index: usize) -> Result<FlowField<T>, DatasetError> {
    let entry = manifest.video(video_id).ok_or_else(|| DatasetError::UnknownVideo(video_id.to_string()))?;
    if !manifest.has(AnnotationKind::Flow) {
        return Err(DatasetError::MissingAnnotation { video_id: video_id.to_string(), kind: AnnotationKind::Flow });
    }
    if index + 1 >= entry.frame_count {
        return Err(DatasetError::IndexOutOfRange {
            video_id: video_id.to_string(),
            start: index,
            end: index + 1,
            frames: entry.frame_count - 1,
        });
    }
    io::read_flo(&AnnotationKind::Flow.frame_path(&manifest.video_dir(video_id), index))
}
