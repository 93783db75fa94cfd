//! On-disk encodings: 8-bit PNG images, pose JSON, and Middlebury `.flo` flow files.

use super::{DatasetError, Keypoint, KeypointSet, NUM_KEYPOINTS};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FLO_MAGIC: f32 = 202_021.25;

/// Decoded 8-bit raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::CorruptImage { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn write_png(path: &Path, raster: &Raster) -> Result<(), DatasetError> {
    let color = match raster.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(corrupt(path, format!("cannot encode {n}-channel raster"))),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| corrupt(path, e))?;
    writer.write_image_data(&raster.pixels).map_err(|e| corrupt(path, e))?;
    writer.finish().map_err(|e| corrupt(path, e))
}

/// Read an 8-bit grayscale or RGB PNG. Alpha channels are rejected.
pub fn read_png(path: &Path) -> Result<Raster, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| corrupt(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(corrupt(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(corrupt(path, format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok(Raster { width: info.width as usize, height: info.height as usize, channels, pixels: buf })
}

/// Width and height from the PNG header only.
pub fn png_size(path: &Path) -> Result<(usize, usize), DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| corrupt(path, e))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// Serialize keypoints as a JSON array of 18 entries, each `[x, y, confidence]` or `null`.
pub fn write_pose(path: &Path, pose: &KeypointSet) -> Result<(), DatasetError> {
    let entries: Vec<serde_json::Value> = pose
        .points
        .iter()
        .map(|p| match p {
            Some(k) => serde_json::json!([k.x, k.y, k.confidence]),
            None => serde_json::Value::Null,
        })
        .collect();
    let text = serde_json::to_string(&entries).expect("pose serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_pose(path: &Path) -> Result<KeypointSet, DatasetError> {
    let bad = |reason: String| DatasetError::InvalidAnnotation { path: path.to_path_buf(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let entries: Vec<Option<[f64; 3]>> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if entries.len() != NUM_KEYPOINTS {
        return Err(bad(format!("expected {NUM_KEYPOINTS} keypoints, found {}", entries.len())));
    }
    let mut pose = KeypointSet::absent();
    for (slot, entry) in pose.points.iter_mut().zip(entries) {
        *slot = entry.map(|[x, y, confidence]| Keypoint { x, y, confidence });
    }
    Ok(pose)
}

pub fn write_flo<T: Scalar>(path: &Path, flow: &FlowField<T>) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(12 + 8 * flow.height * flow.width);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for y in 0..flow.height {
        for x in 0..flow.width {
            bytes.extend_from_slice(&(flow.dx(y, x).as_f64() as f32).to_le_bytes());
            bytes.extend_from_slice(&(flow.dy(y, x).as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_flo<T: Scalar>(path: &Path) -> Result<FlowField<T>, DatasetError> {
    let bad = |reason: String| DatasetError::InvalidAnnotation { path: path.to_path_buf(), reason };
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 {
        return Err(bad("truncated header".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(bad("bad magic number".into()));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(bad(format!("bad dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    if bytes.len() != 12 + 8 * n {
        return Err(bad(format!("expected {} bytes, found {}", 12 + 8 * n, bytes.len())));
    }
    let mut displacement = vec![T::zero(); 2 * n];
    for i in 0..n {
        displacement[i] = T::lit(f32::from_le_bytes(word(12 + 8 * i)) as f64);
        displacement[n + i] = T::lit(f32::from_le_bytes(word(16 + 8 * i)) as f64);
    }
    FlowField::new(height, width, displacement).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let raster = Raster { width: 5, height: 3, channels: 3, pixels: (0..45).map(|i| (i * 37 % 256) as u8).collect() };
        write_png(&path, &raster).unwrap();
        assert_eq!(read_png(&path).unwrap(), raster);
        assert_eq!(png_size(&path).unwrap(), (3, 5));
    }

    #[test]
    fn flo_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let flow = FlowField::<f32>::new(2, 3, vec![1.0, -2.0, 0.5, 0.0, 1.5, -1.0, 0.25, 0.0, -1.0, 2.0, 1.0, 0.0]).unwrap();
        write_flo(&path, &flow).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 8 * 6);
        // First pixel stores (dx, dy) interleaved.
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0.25);
        assert_eq!(read_flo::<f32>(&path).unwrap(), flow);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        std::fs::write(&path, [0u8; 20]).unwrap();
        assert!(read_flo::<f64>(&path).is_err());
    }

    #[test]
    fn pose_json_uses_null_for_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut pose = KeypointSet::absent();
        pose.points[0] = Some(Keypoint { x: 10.0, y: 12.0, confidence: 0.9 });
        write_pose(&path, &pose).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[[10.0,12.0,0.9],null,"));
        assert_eq!(read_pose(&path).unwrap(), pose);
    }
}
