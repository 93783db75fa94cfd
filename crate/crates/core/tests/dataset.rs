use tryon_core::dataset::io::{read_flo, read_png, read_pose};
use tryon_core::dataset::{
    generate_synthetic, load_flow, load_sample, render_video, scan_manifest, AnnotationKind, DatasetError, Split, SynthSpec,
};
use tryon_core::flow::backward_warp;
use tryon_core::person::{build_representation, PoseKind, PoseMode};

fn spec() -> SynthSpec {
    SynthSpec::new(2, 5, 64, 48, 17, Split::Train)
}

#[test]
fn files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(dir.path(), &spec()).unwrap();
    assert_eq!(manifest.videos.len(), 2);
    assert_eq!(manifest.total_frames(), 10);
    for kind in AnnotationKind::OPTIONAL {
        assert!(manifest.has(kind), "{kind} missing");
    }
    for (i, entry) in manifest.videos.iter().enumerate() {
        let video = render_video(&spec(), i);
        assert_eq!(video.id, entry.id);
        let vdir = manifest.video_dir(&entry.id);
        for t in 0..5 {
            assert_eq!(read_png(&AnnotationKind::Frames.frame_path(&vdir, t)).unwrap(), video.frames[t]);
            assert_eq!(read_png(&AnnotationKind::GarmentMask.frame_path(&vdir, t)).unwrap(), video.garment_masks[t]);
            assert_eq!(read_png(&AnnotationKind::PoseDense.frame_path(&vdir, t)).unwrap(), video.iuv[t]);
            assert_eq!(read_pose(&AnnotationKind::PoseCoco.frame_path(&vdir, t)).unwrap(), video.poses[t]);
        }
        for t in 0..4 {
            let flow = read_flo::<f32>(&AnnotationKind::Flow.frame_path(&vdir, t)).unwrap();
            assert_eq!(flow, video.flows[t]);
        }
    }
}

#[test]
fn loaded_sample_matches_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(dir.path(), &spec()).unwrap();
    let sample = load_sample::<f32>(&manifest, "train_001", (1, 4)).unwrap();
    let video = render_video(&spec(), 1);
    assert_eq!(sample.len(), 3);
    assert_eq!(sample.first_frame, 1);
    for (k, frame) in sample.frames.iter().enumerate() {
        let raster = &video.frames[k + 1];
        for y in 0..64 {
            for x in 0..48 {
                for c in 0..3 {
                    assert_eq!(frame.at(c, y, x), raster.pixels[(y * 48 + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
    }
    assert!(matches!(
        load_sample::<f32>(&manifest, "train_001", (3, 9)),
        Err(DatasetError::IndexOutOfRange { .. })
    ));
    assert!(matches!(load_sample::<f32>(&manifest, "nope", (0, 1)), Err(DatasetError::UnknownVideo(_))));
}

/// Warping frame t by the flow of t reproduces frame t+1 except where parts are revealed.
#[test]
fn flow_predicts_next_frame() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::new(2, 8, 64, 48, 3, Split::Train);
    let manifest = generate_synthetic(dir.path(), &spec).unwrap();
    for id in ["train_000", "train_001"] {
        let sample = load_sample::<f64>(&manifest, id, (0, 8)).unwrap();
        for t in 0..7 {
            let flow = load_flow::<f64>(&manifest, id, t).unwrap();
            let predicted = backward_warp(&sample.frames[t], &flow).unwrap();
            let mae = predicted.data.iter().zip(&sample.frames[t + 1].data).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / predicted.len() as f64;
            assert!(mae < 0.02, "{id} frame {t}: flow-warp MAE {mae}");
        }
    }
}

#[test]
fn missing_annotations_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(dir.path(), &spec()).unwrap();
    // Coverage is all-or-nothing: a partially annotated split is an error.
    std::fs::remove_dir_all(manifest.video_dir("train_000").join(AnnotationKind::PoseCoco.dir_name())).unwrap();
    assert!(matches!(
        scan_manifest(dir.path(), Split::Train),
        Err(DatasetError::MissingAnnotation { kind: AnnotationKind::PoseCoco, .. })
    ));
    std::fs::remove_dir_all(manifest.video_dir("train_001").join(AnnotationKind::PoseCoco.dir_name())).unwrap();
    let rescanned = scan_manifest(dir.path(), Split::Train).unwrap();
    assert!(!rescanned.has(AnnotationKind::PoseCoco));
    let sample = load_sample::<f32>(&rescanned, "train_001", (0, 2)).unwrap();
    let coco = PoseMode::for_height(PoseKind::Coco, 64);
    assert!(build_representation(&sample, 0, coco).is_err());
    assert!(build_representation(&sample, 0, PoseMode::for_height(PoseKind::Dense, 64)).is_ok());

    std::fs::remove_file(AnnotationKind::Frames.frame_path(&manifest.video_dir("train_001"), 2)).unwrap();
    assert!(scan_manifest(dir.path(), Split::Train).is_err());
}

#[test]
fn dense_pose_block_is_a_sixth_of_coco() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(dir.path(), &spec()).unwrap();
    let sample = load_sample::<f32>(&manifest, "train_000", (0, 1)).unwrap();
    let coco = build_representation(&sample, 0, PoseMode::for_height(PoseKind::Coco, 64)).unwrap();
    let dense = build_representation(&sample, 0, PoseMode::for_height(PoseKind::Dense, 64)).unwrap();
    let (cp, dp) = (coco.block("pose_coco").unwrap(), dense.block("pose_dense").unwrap());
    assert_eq!(cp.byte_len(), 6 * dp.byte_len());
    assert_eq!(coco.channels.channels, 25);
    assert_eq!(dense.channels.channels, 10);
    assert_eq!(coco.block("agnostic_person"), dense.block("agnostic_person"));
}
