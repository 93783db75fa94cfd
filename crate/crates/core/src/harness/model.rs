use super::{ExperimentConfig, HarnessError};
use crate::dataset::{load_flow, load_sample, scan_manifest, AnnotationKind, DatasetManifest, Split, VideoSample};
use crate::flow::{backward_warp, blend, FlowComposeOutput, FlowField, FlowHeadCache, FlowMaskHead};
use crate::nn::ParamLayout;
use crate::person::{build_representation, PoseKind, PoseMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tryon::{network_input, TryonCache, TryonNet};
use crate::warp::{oracle_warp, WarpedCloth};
use std::path::Path;

/// The try-on network plus, when flow is enabled, the flow-mask head, over one parameter buffer.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: TryonNet,
    pub flow_head: Option<FlowMaskHead>,
    pub layout: ParamLayout,
    pub params: Vec<T>,
}

/// Everything one frame's forward pass produced, kept for the backward pass.
pub struct FramePass<T> {
    pub tryon: TryonCache<T>,
    pub flow: Option<(FlowHeadCache<T>, FlowComposeOutput<T>)>,
}

impl<T: Scalar> FramePass<T> {
    /// The frame the losses and metrics see.
    pub fn final_frame(&self) -> &Tensor<T> {
        match &self.flow {
            Some((_, out)) => &out.final_frame,
            None => &self.tryon.output.composed,
        }
    }

    pub fn flow_mask(&self) -> Option<&Tensor<T>> {
        self.flow.as_ref().map(|(_, out)| &out.flow_mask)
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let mut layout = ParamLayout::default();
        let net = TryonNet::new(cfg.tryon_config(), &mut layout)?;
        let flow_head = cfg.flow.then(|| FlowMaskHead::new(&mut layout, 3));
        let mut params = vec![T::zero(); layout.total()];
        net.init(&mut params);
        if let Some(head) = &flow_head {
            head.init(&mut params, cfg.seed);
        }
        Ok(Self { net, flow_head, layout, params })
    }

    /// Run one frame. `prev` is the previous output frame and the flow carrying it onto this one;
    /// it is ignored when the model has no flow head.
    pub fn forward_frame(
        &self,
        params: &[T],
        input: &Tensor<T>,
        warped: &WarpedCloth<T>,
        prev: Option<(&Tensor<T>, &FlowField<T>)>,
    ) -> Result<FramePass<T>, HarnessError> {
        let tryon = self.net.forward(params, input, warped)?;
        let flow = match (&self.flow_head, prev) {
            (Some(head), Some((prev_final, flow))) => {
                let composed = &tryon.output.composed;
                let warped_prev = backward_warp(prev_final, flow)?;
                let (mask, cache) = head.forward(params, composed, &warped_prev);
                let final_frame = blend(composed, &warped_prev, &mask)?;
                Some((cache, FlowComposeOutput { warped_prev, flow_mask: mask, final_frame }))
            }
            _ => None,
        };
        Ok(FramePass { tryon, flow })
    }

    /// Accumulate parameter gradients for one frame.
    pub fn backward_frame(
        &self,
        params: &[T],
        pass: &FramePass<T>,
        d_final: &Tensor<T>,
        d_mask: &Tensor<T>,
        d_flow_mask: Option<&Tensor<T>>,
        grads: &mut [T],
    ) {
        let d_composed = match (&self.flow_head, &pass.flow) {
            (Some(head), Some((cache, out))) => {
                let composed = &pass.tryon.output.composed;
                let n = out.flow_mask.plane_len();
                let mut d_fm = match d_flow_mask {
                    Some(d) => d.clone(),
                    None => Tensor::zeros(1, out.flow_mask.height, out.flow_mask.width),
                };
                let mut d_composed = d_final.clone();
                for c in 0..d_final.channels {
                    for i in 0..n {
                        let k = c * n + i;
                        let m = out.flow_mask.data[i];
                        d_fm.data[i] += d_final.data[k] * (out.warped_prev.data[k] - composed.data[k]);
                        d_composed.data[k] *= T::one() - m;
                    }
                }
                d_composed.add_assign(&head.backward(params, cache, &d_fm, grads));
                d_composed
            }
            _ => d_final.clone(),
        };
        self.net.backward(params, &pass.tryon, &d_composed, d_mask, grads);
    }
}

/// A split held in memory, with flows when requested.
pub struct SplitData<T> {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoSample<T>>,
    /// `flows[v][t]` carries frame t of video v onto frame t+1; empty unless loaded.
    pub flows: Vec<Vec<FlowField<T>>>,
}

impl<T: Scalar> SplitData<T> {
    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.len()).sum()
    }
}

pub fn pose_annotation(kind: PoseKind) -> AnnotationKind {
    match kind {
        PoseKind::Coco => AnnotationKind::PoseCoco,
        PoseKind::Dense => AnnotationKind::PoseDense,
    }
}

pub fn load_split<T: Scalar>(root: &Path, split: Split, pose: PoseKind, need_flow: bool) -> Result<SplitData<T>, HarnessError> {
    let manifest = scan_manifest(root, split)?;
    for kind in std::iter::once(pose_annotation(pose)).chain(need_flow.then_some(AnnotationKind::Flow)) {
        if !manifest.has(kind) {
            let video_id = manifest.videos.first().map(|v| v.id.clone()).unwrap_or_default();
            return Err(crate::dataset::DatasetError::MissingAnnotation { video_id, kind }.into());
        }
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut flows = Vec::new();
    for entry in &manifest.videos {
        videos.push(load_sample(&manifest, &entry.id, (0, entry.frame_count))?);
        if need_flow {
            flows.push(
                (0..entry.frame_count - 1)
                    .map(|t| load_flow(&manifest, &entry.id, t))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
    }
    Ok(SplitData { manifest, videos, flows })
}

/// Network input and oracle-warped cloth for one frame.
pub fn frame_input<T: Scalar>(
    video: &VideoSample<T>,
    index: usize,
    mode: PoseMode,
) -> Result<(Tensor<T>, WarpedCloth<T>), HarnessError> {
    let repr = build_representation(video, index, mode)?;
    let warped = oracle_warp(video, index);
    Ok((network_input(&repr, &warped), warped))
}
