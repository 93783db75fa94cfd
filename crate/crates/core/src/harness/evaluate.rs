use super::checkpoint::{load_checkpoint, read_header};
use super::model::{frame_input, load_split, pose_annotation, Model, SplitData};
use super::{ExperimentConfig, HarnessError};
use crate::dataset::{scan_manifest, Split};
use crate::metrics::{aggregate, ms_ssim, psnr, FrameRow, MetricReport, SsimParams, REPORT_LEVELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Score (video id, frame index, prediction, ground truth) tuples.
pub fn score_frames<'a, T: Scalar + 'a>(
    frames: impl IntoIterator<Item = (&'a str, usize, &'a Tensor<T>, &'a Tensor<T>)>,
) -> Result<MetricReport, HarnessError> {
    let p = SsimParams::default();
    let mut rows = Vec::new();
    for (video_id, frame_idx, pred, truth) in frames {
        rows.push(FrameRow {
            video_id: video_id.to_string(),
            frame_idx,
            ssim: ms_ssim(pred, truth, REPORT_LEVELS, &p)?,
            psnr: psnr(pred, truth, 1.0)?,
        });
    }
    Ok(aggregate(rows)?)
}

/// Reconstruct every frame of a split in order (feeding each output forward when the model has a
/// flow head) and score it against the ground truth.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, cfg: &ExperimentConfig, data: &SplitData<T>) -> Result<MetricReport, HarnessError> {
    let mut net = model.clone();
    net.net.half_precision = false;
    let mode = cfg.pose_mode_for(data.manifest.frame_size.height);
    let mut outputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(data.videos.len());
    for (v, video) in data.videos.iter().enumerate() {
        let mut frames: Vec<Tensor<T>> = Vec::with_capacity(video.len());
        for t in 0..video.len() {
            let (input, warped) = frame_input(video, t, mode)?;
            let prev = match (t, data.flows.get(v)) {
                (1.., Some(flows)) => Some((&frames[t - 1], &flows[t - 1])),
                _ => None,
            };
            let pass = net.forward_frame(&net.params, &input, &warped, prev)?;
            frames.push(pass.final_frame().clone());
        }
        outputs.push(frames);
    }
    score_frames(data.videos.iter().zip(&outputs).flat_map(|(video, outs)| {
        outs.iter().enumerate().map(|(t, o)| (video.video_id.as_str(), video.first_frame + t, o, &video.frames[t]))
    }))
}

/// Checkpoint in `<out_dir>/checkpoints` with the highest training step.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(out_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .filter_map(|p| read_header(&p).map(|h| (h.state.step, h.state.batch_in_epoch == 0, p)))
        .max()
        .map(|(_, _, p)| p)
}

/// Load a checkpoint, score it on a split, and write `report.json`, `report.csv` and plots into
/// `out_dir`.
pub fn evaluate<T: Scalar>(checkpoint: &Path, dataset: &Path, split: Split, out_dir: &Path) -> Result<MetricReport, HarnessError> {
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let cfg = &ckpt.header.config;
    let manifest = scan_manifest(dataset, split)?;
    let needed = pose_annotation(cfg.pose_mode);
    if !manifest.has(needed) {
        return Err(HarnessError::LayoutMismatch(format!(
            "checkpoint expects {} pose input but the {split} split has no {needed} annotations",
            cfg.pose_mode
        )));
    }
    let model = ckpt.to_model()?;
    let data = load_split::<T>(dataset, split, cfg.pose_mode, cfg.flow)?;
    let report = evaluate_model(&model, cfg, &data)?;
    report.write(out_dir)?;
    Ok(report)
}
