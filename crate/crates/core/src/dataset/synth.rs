//! Procedural stand-in for a video try-on corpus: an articulated figure wearing a textured
//! garment, animated with integer part motions so ground-truth flow is exact.

use super::io::{self, Raster};
use super::{scan_manifest, AnnotationKind, DatasetError, DatasetManifest, FrameSize, Keypoint, KeypointSet, Split};
use crate::flow::FlowField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub frame_size: FrameSize,
    pub seed: u64,
    pub split: Split,
}

impl SynthSpec {
    pub fn new(num_videos: usize, frames_per_video: usize, height: usize, width: usize, seed: u64, split: Split) -> Self {
        Self { num_videos, frames_per_video, frame_size: FrameSize { height, width }, seed, split }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.num_videos == 0 {
            return bad("num_videos must be at least 1");
        }
        if self.frames_per_video < 2 {
            return bad("frames_per_video must be at least 2");
        }
        if self.frame_size.height < 8 || self.frame_size.width < 6 {
            return bad("frame size must be at least 8x6");
        }
        Ok(())
    }
}

/// In-memory rendering of one synthetic video, exactly as it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub frames: Vec<Raster>,
    pub cloth: Raster,
    pub cloth_mask: Raster,
    pub garment_masks: Vec<Raster>,
    pub poses: Vec<KeypointSet>,
    pub iuv: Vec<Raster>,
    /// `flows[t]` carries frame t onto frame t+1.
    pub flows: Vec<FlowField<f32>>,
    /// Winning part index per pixel, per frame (0 = background).
    pub part_maps: Vec<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Torso,
    Head,
    ArmLeft,
    ArmRight,
    LegLeft,
    LegRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Surface {
    Torso,
    Head,
    Skin,
    Pants,
    Shoe,
}

#[derive(Clone, Copy, Debug)]
struct PartDef {
    id: u8,
    group: Group,
    surface: Surface,
    ellipse: bool,
    /// x0, y0, x1, y1 in figure units; x relative to the figure centre line.
    bounds: [f64; 4],
}

// Back-to-front draw order.
const PARTS: [PartDef; 14] = [
    PartDef { id: 8, group: Group::LegLeft, surface: Surface::Pants, ellipse: false, bounds: [-7.0, 36.0, -1.0, 48.0] },
    PartDef { id: 12, group: Group::LegLeft, surface: Surface::Pants, ellipse: false, bounds: [-7.0, 48.0, -1.0, 59.0] },
    PartDef { id: 5, group: Group::LegLeft, surface: Surface::Shoe, ellipse: false, bounds: [-8.0, 59.0, -1.0, 62.0] },
    PartDef { id: 7, group: Group::LegRight, surface: Surface::Pants, ellipse: false, bounds: [1.0, 36.0, 7.0, 48.0] },
    PartDef { id: 11, group: Group::LegRight, surface: Surface::Pants, ellipse: false, bounds: [1.0, 48.0, 7.0, 59.0] },
    PartDef { id: 6, group: Group::LegRight, surface: Surface::Shoe, ellipse: false, bounds: [1.0, 59.0, 8.0, 62.0] },
    PartDef { id: 2, group: Group::Torso, surface: Surface::Torso, ellipse: false, bounds: [-8.0, 15.0, 8.0, 36.0] },
    PartDef { id: 16, group: Group::ArmLeft, surface: Surface::Skin, ellipse: false, bounds: [-12.0, 15.0, -8.0, 26.0] },
    PartDef { id: 20, group: Group::ArmLeft, surface: Surface::Skin, ellipse: false, bounds: [-12.0, 26.0, -8.0, 35.0] },
    PartDef { id: 3, group: Group::ArmLeft, surface: Surface::Skin, ellipse: false, bounds: [-12.0, 35.0, -8.0, 38.0] },
    PartDef { id: 15, group: Group::ArmRight, surface: Surface::Skin, ellipse: false, bounds: [8.0, 15.0, 12.0, 26.0] },
    PartDef { id: 19, group: Group::ArmRight, surface: Surface::Skin, ellipse: false, bounds: [8.0, 26.0, 12.0, 35.0] },
    PartDef { id: 4, group: Group::ArmRight, surface: Surface::Skin, ellipse: false, bounds: [8.0, 35.0, 12.0, 38.0] },
    PartDef { id: 23, group: Group::Head, surface: Surface::Head, ellipse: true, bounds: [-5.0, 3.0, 5.0, 15.0] },
];

/// Keypoint anchors: (group, x, y) in figure units, CocoPose order.
const JOINTS: [(Group, f64, f64); 18] = [
    (Group::Head, 0.0, 9.0),
    (Group::Torso, 0.0, 15.0),
    (Group::ArmLeft, -10.0, 16.0),
    (Group::ArmLeft, -10.0, 26.0),
    (Group::ArmLeft, -10.0, 35.0),
    (Group::ArmRight, 10.0, 16.0),
    (Group::ArmRight, 10.0, 26.0),
    (Group::ArmRight, 10.0, 35.0),
    (Group::LegLeft, -4.0, 36.0),
    (Group::LegLeft, -4.0, 48.0),
    (Group::LegLeft, -4.0, 59.0),
    (Group::LegRight, 4.0, 36.0),
    (Group::LegRight, 4.0, 48.0),
    (Group::LegRight, 4.0, 59.0),
    (Group::Head, -2.0, 8.0),
    (Group::Head, 2.0, 8.0),
    (Group::Head, -4.5, 9.0),
    (Group::Head, 4.5, 9.0),
];

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Stripes { period: i64, horizontal: bool },
    Checker { cell: i64 },
    Glyphs { salt: u64 },
}

/// 3×5 glyph bitmaps, one row per 3 bits.
const GLYPHS: [[u8; 5]; 8] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b110, 0b100, 0b111],
    [0b110, 0b101, 0b110, 0b101, 0b110],
    [0b111, 0b010, 0b010, 0b010, 0b010],
    [0b101, 0b111, 0b111, 0b101, 0b101],
];

struct Style {
    skin: [u8; 3],
    hair: [u8; 3],
    pants: [u8; 3],
    shoe: [u8; 3],
    garment: [[u8; 3]; 2],
    pattern: Pattern,
    bg_top: [u8; 3],
    bg_bottom: [u8; 3],
    period: f64,
    phase: f64,
}

fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

fn contrast(a: [u8; 3], b: [u8; 3]) -> i32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum()
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let skin_tone = rng.gen_range(0.0..1.0);
        let skin = [
            (120.0 + 110.0 * skin_tone) as u8,
            (85.0 + 95.0 * skin_tone) as u8,
            (60.0 + 90.0 * skin_tone) as u8,
        ];
        let first = random_color(rng, 20, 235);
        let mut second = random_color(rng, 20, 235);
        while contrast(first, second) < 240 {
            second = random_color(rng, 20, 235);
        }
        let pattern = match rng.gen_range(0..3) {
            0 => Pattern::Stripes { period: rng.gen_range(2..=4), horizontal: rng.gen_bool(0.5) },
            1 => Pattern::Checker { cell: rng.gen_range(2..=3) },
            _ => Pattern::Glyphs { salt: rng.gen() },
        };
        Self {
            skin,
            hair: random_color(rng, 10, 90),
            pants: random_color(rng, 30, 160),
            shoe: random_color(rng, 5, 60),
            garment: [first, second],
            pattern,
            bg_top: random_color(rng, 150, 250),
            bg_bottom: random_color(rng, 60, 170),
            period: rng.gen_range(10.0..18.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn garment_color(&self, lx: i64, ly: i64) -> [u8; 3] {
        let on = match self.pattern {
            Pattern::Stripes { period, horizontal } => (if horizontal { ly } else { lx }).div_euclid(period) % 2 == 1,
            Pattern::Checker { cell } => (lx.div_euclid(cell) + ly.div_euclid(cell)) % 2 == 1,
            Pattern::Glyphs { salt } => {
                let (cx, cy) = (lx.div_euclid(4), ly.div_euclid(6));
                let (gx, gy) = (lx.rem_euclid(4), ly.rem_euclid(6));
                if gx == 3 || gy == 5 {
                    false
                } else {
                    let h = (cx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
                    let glyph = GLYPHS[(h >> 29) as usize % GLYPHS.len()];
                    glyph[gy as usize] >> (2 - gx) & 1 == 1
                }
            }
        };
        self.garment[on as usize]
    }

    fn background(&self, x: usize, y: usize, h: usize) -> [u8; 3] {
        let t = y as f64 / (h - 1).max(1) as f64;
        let mut c = [0u8; 3];
        for i in 0..3 {
            let v = self.bg_top[i] as f64 * (1.0 - t) + self.bg_bottom[i] as f64 * t;
            let stripe = if (x + y) % 8 < 2 { -12.0 } else { 0.0 };
            c[i] = (v + stripe).clamp(0.0, 255.0) as u8;
        }
        c
    }
}

/// Integer pixel geometry of the figure for one video.
struct Figure {
    boxes: Vec<[i64; 4]>,
    unit: f64,
    center: f64,
}

impl Figure {
    fn new(size: FrameSize) -> Self {
        let unit = (size.height as f64 / 64.0).min(size.width as f64 / 48.0);
        let center = size.width as f64 / 2.0;
        let boxes = PARTS
            .iter()
            .map(|p| {
                let [x0, y0, x1, y1] = p.bounds;
                let px = |v: f64| (center + v * unit).round() as i64;
                let py = |v: f64| (v * unit).round() as i64;
                let (a, b, c, d) = (px(x0), py(y0), px(x1), py(y1));
                [a, b, c.max(a + 1), d.max(b + 1)]
            })
            .collect();
        Self { boxes, unit, center }
    }

    fn offsets(&self, style: &Style, t: usize) -> impl Fn(Group) -> (i64, i64) {
        let s = (2.0 * PI * t as f64 / style.period + style.phase).sin();
        let bob = (4.0 * PI * t as f64 / style.period + style.phase).sin();
        let u = self.unit;
        let amp = |a: f64| (a * u).round().max(1.0);
        let sway = (amp(3.0) * s).round() as i64;
        let head = (amp(1.0) * bob).round() as i64;
        let arm = (amp(1.5) * s).round() as i64;
        let leg_l = -(amp(2.0) * s.max(0.0)).round() as i64;
        let leg_r = -(amp(2.0) * (-s).max(0.0)).round() as i64;
        move |g| match g {
            Group::Torso => (sway, 0),
            Group::Head => (sway, head),
            Group::ArmLeft => (sway, arm),
            Group::ArmRight => (sway, -arm),
            Group::LegLeft => (sway, leg_l),
            Group::LegRight => (sway, leg_r),
        }
    }
}

fn inside(def: &PartDef, b: &[i64; 4], lx: i64, ly: i64) -> bool {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    if lx < 0 || ly < 0 || lx >= w || ly >= h {
        return false;
    }
    if !def.ellipse {
        return true;
    }
    let nx = (2.0 * lx as f64 + 1.0) / w as f64 - 1.0;
    let ny = (2.0 * ly as f64 + 1.0) / h as f64 - 1.0;
    nx * nx + ny * ny <= 1.0
}

/// Torso pixels covered by the garment (everything except a V neckline).
fn in_garment(lx: i64, ly: i64, w: i64, h: i64) -> bool {
    let depth = (h / 5).max(1);
    if ly >= depth {
        return true;
    }
    let half_width = (w / 4) as f64 * (1.0 - ly as f64 / depth as f64);
    ((2 * lx - (w - 1)).abs() as f64) / 2.0 >= half_width
}

fn shade(c: [u8; 3], delta: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + delta).clamp(0, 255) as u8)
}

fn surface_color(style: &Style, def: &PartDef, b: &[i64; 4], lx: i64, ly: i64) -> ([u8; 3], bool) {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    match def.surface {
        Surface::Torso => {
            if in_garment(lx, ly, w, h) {
                (style.garment_color(lx, ly), true)
            } else {
                (shade(style.skin, -(ly as i32) * 3), false)
            }
        }
        Surface::Head => {
            let eye_row = h * 5 / 12;
            let is_eye = ly == eye_row && (lx == w / 2 - w / 5 || lx == w / 2 + w / 5 - 1 + w % 2);
            if ly < h / 3 {
                (style.hair, false)
            } else if is_eye {
                ([20, 20, 30], false)
            } else {
                (shade(style.skin, -(ly as i32)), false)
            }
        }
        Surface::Skin => (shade(style.skin, -(ly as i32) * 2), false),
        Surface::Pants => (if lx == w / 2 { shade(style.pants, -40) } else { style.pants }, false),
        Surface::Shoe => (style.shoe, false),
    }
}

fn quantize_unit(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Render video `index` of a spec entirely in memory.
pub fn render_video(spec: &SynthSpec, index: usize) -> SynthVideo {
    let FrameSize { height, width } = spec.frame_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64 + 1));
    let style = Style::sample(&mut rng);
    let fig = Figure::new(spec.frame_size);
    let n = height * width;
    let torso_slot = PARTS.iter().position(|p| p.group == Group::Torso).unwrap();

    let mut video = SynthVideo {
        id: format!("{}_{index:03}", spec.split),
        frames: Vec::new(),
        cloth: Raster { width, height, channels: 3, pixels: vec![0; 3 * n] },
        cloth_mask: Raster { width, height, channels: 1, pixels: vec![0; n] },
        garment_masks: Vec::new(),
        poses: Vec::new(),
        iuv: Vec::new(),
        flows: Vec::new(),
        part_maps: Vec::new(),
    };

    // Cloth product: the garment laid flat at the figure's rest position.
    let tb = fig.boxes[torso_slot];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let (lx, ly) = (x - tb[0], y - tb[1]);
            if inside(&PARTS[torso_slot], &tb, lx, ly) && in_garment(lx, ly, tb[2] - tb[0], tb[3] - tb[1]) {
                let i = y as usize * width + x as usize;
                video.cloth.pixels[3 * i..3 * i + 3].copy_from_slice(&style.garment_color(lx, ly));
                video.cloth_mask.pixels[i] = 255;
            }
        }
    }

    let mut slot_maps: Vec<Vec<usize>> = Vec::new();
    for t in 0..spec.frames_per_video {
        let off = fig.offsets(&style, t);
        let mut frame = vec![0u8; 3 * n];
        let mut garment = vec![0u8; n];
        let mut iuv = vec![0u8; 3 * n];
        let mut parts = vec![0u8; n];
        let mut slots = vec![usize::MAX; n];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let mut color = style.background(x, y, height);
                for (slot, def) in PARTS.iter().enumerate() {
                    let (ox, oy) = off(def.group);
                    let b = fig.boxes[slot];
                    let (lx, ly) = (x as i64 - b[0] - ox, y as i64 - b[1] - oy);
                    if !inside(def, &b, lx, ly) {
                        continue;
                    }
                    let (c, is_garment) = surface_color(&style, def, &b, lx, ly);
                    color = c;
                    garment[i] = if is_garment { 255 } else { 0 };
                    parts[i] = def.id;
                    slots[i] = slot;
                    let (w, h) = ((b[2] - b[0]) as f64, (b[3] - b[1]) as f64);
                    iuv[3 * i] = def.id;
                    iuv[3 * i + 1] = quantize_unit((lx as f64 + 0.5) / w);
                    iuv[3 * i + 2] = quantize_unit((ly as f64 + 0.5) / h);
                }
                if slots[i] == usize::MAX {
                    iuv[3 * i..3 * i + 3].fill(0);
                }
                frame[3 * i..3 * i + 3].copy_from_slice(&color);
            }
        }

        let mut pose = KeypointSet::absent();
        for (k, &(group, fx, fy)) in JOINTS.iter().enumerate() {
            let (ox, oy) = off(group);
            let x = fig.center + fx * fig.unit + ox as f64;
            let y = fy * fig.unit + oy as f64;
            let dropped = k >= 16 && rng.gen_bool(0.15);
            let confidence = (rng.gen_range(0.6..1.0_f64) * 100.0).round() / 100.0;
            if !dropped && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
                pose.points[k] = Some(Keypoint { x, y, confidence });
            }
        }

        video.frames.push(Raster { width, height, channels: 3, pixels: frame });
        video.garment_masks.push(Raster { width, height, channels: 1, pixels: garment });
        video.iuv.push(Raster { width, height, channels: 3, pixels: iuv });
        video.poses.push(pose);
        video.part_maps.push(parts);
        slot_maps.push(slots);
    }

    for t in 0..spec.frames_per_video - 1 {
        let (now, next) = (fig.offsets(&style, t), fig.offsets(&style, t + 1));
        let mut disp = vec![0f32; 2 * n];
        for (i, &slot) in slot_maps[t + 1].iter().enumerate() {
            if slot == usize::MAX {
                continue;
            }
            let g = PARTS[slot].group;
            let ((ax, ay), (bx, by)) = (now(g), next(g));
            disp[i] = (ax - bx) as f32;
            disp[n + i] = (ay - by) as f32;
        }
        video.flows.push(FlowField::new(height, width, disp).expect("synthetic flow within bounds"));
    }
    video
}

fn write_video(dir: &Path, video: &SynthVideo) -> Result<(), DatasetError> {
    let mkdir = |d: &Path| std::fs::create_dir_all(d).map_err(|e| DatasetError::Io { path: d.to_path_buf(), source: e });
    for kind in [
        AnnotationKind::Frames,
        AnnotationKind::ClothProduct,
        AnnotationKind::GarmentMask,
        AnnotationKind::PoseCoco,
        AnnotationKind::PoseDense,
        AnnotationKind::Flow,
    ] {
        mkdir(&dir.join(kind.dir_name()))?;
    }
    io::write_png(&dir.join("cloth/product.png"), &video.cloth)?;
    io::write_png(&dir.join("cloth/product_mask.png"), &video.cloth_mask)?;
    for t in 0..video.frames.len() {
        io::write_png(&AnnotationKind::Frames.frame_path(dir, t), &video.frames[t])?;
        io::write_png(&AnnotationKind::GarmentMask.frame_path(dir, t), &video.garment_masks[t])?;
        io::write_png(&AnnotationKind::PoseDense.frame_path(dir, t), &video.iuv[t])?;
        io::write_pose(&AnnotationKind::PoseCoco.frame_path(dir, t), &video.poses[t])?;
    }
    for (t, flow) in video.flows.iter().enumerate() {
        io::write_flo(&AnnotationKind::Flow.frame_path(dir, t), flow)?;
    }
    Ok(())
}

/// Write a complete synthetic split under `root` and return its manifest.
pub fn generate_synthetic(root: &Path, spec: &SynthSpec) -> Result<DatasetManifest, DatasetError> {
    spec.validate()?;
    let split_dir = root.join(spec.split.dir_name());
    for index in 0..spec.num_videos {
        let video = render_video(spec, index);
        write_video(&split_dir.join(&video.id), &video)?;
    }
    scan_manifest(root, spec.split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::new(2, 6, 64, 48, 7, Split::Train)
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_video(&spec(), 1), render_video(&spec(), 1));
        assert_ne!(render_video(&spec(), 0).frames, render_video(&spec(), 1).frames);
    }

    #[test]
    fn iuv_is_zero_on_background() {
        let v = render_video(&spec(), 0);
        for map in &v.iuv {
            for px in map.pixels.chunks_exact(3) {
                if px[0] == 0 {
                    assert_eq!((px[1], px[2]), (0, 0));
                } else {
                    assert!(px[0] <= 24);
                }
            }
        }
    }

    #[test]
    fn garment_lies_on_the_body() {
        let v = render_video(&spec(), 1);
        for (mask, parts) in v.garment_masks.iter().zip(&v.part_maps) {
            let garment: Vec<usize> = (0..parts.len()).filter(|&i| mask.pixels[i] == 255).collect();
            assert!(!garment.is_empty());
            let off_body = garment.iter().filter(|&&i| parts[i] == 0).count();
            assert!((off_body as f64) < 0.05 * garment.len() as f64);
        }
    }

    #[test]
    fn keypoints_lie_inside_the_frame() {
        let v = render_video(&spec(), 0);
        for pose in &v.poses {
            for (_, k) in pose.present() {
                assert!(k.x >= 0.0 && k.x < 48.0 && k.y >= 0.0 && k.y < 64.0);
            }
        }
    }

    #[test]
    fn rejects_single_frame_videos() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SynthSpec::new(1, 1, 64, 48, 0, Split::Train);
        assert!(matches!(generate_synthetic(dir.path(), &bad), Err(DatasetError::InvalidSpec(_))));
    }
}
