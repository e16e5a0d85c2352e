use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::synth::{DriftProfile, SyntheticVideo};
use crate::error::{FearError, Result};
use crate::geometry::BBox;

/// Box annotations, one `frame_index x_min y_min x_max y_max` line per frame.
pub const ANNOTATION_FILE: &str = "groundtruth.txt";
const META_FILE: &str = "video.json";

#[derive(Serialize, Deserialize)]
struct VideoMeta {
    seed: u64,
    drift: DriftProfile,
    n_frames: usize,
    width: usize,
    height: usize,
    occluders: Vec<Option<BBox>>,
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

pub fn save_video(video: &SyntheticVideo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (width, height) = video.size();
    for (i, frame) in video.frames.iter().enumerate() {
        let (h, w, _) = frame.dim();
        let raw: Vec<u8> = frame.iter().copied().collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| FearError::DimensionMismatch(format!("frame {i} buffer size")))?;
        img.save(dir.join(frame_name(i)))?;
    }
    let mut ann = String::new();
    for (i, b) in video.boxes.iter().enumerate() {
        ann.push_str(&format!("{i} {} {} {} {}\n", b.x_min, b.y_min, b.x_max, b.y_max));
    }
    fs::write(dir.join(ANNOTATION_FILE), ann)?;
    let meta = VideoMeta {
        seed: video.seed,
        drift: video.drift.clone(),
        n_frames: video.len(),
        width,
        height,
        occluders: video.occluders.clone(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Parses an annotation file into one box per line, checking that frame
/// indices run `0, 1, 2, ...`.
pub fn read_annotations(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FearError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if vals.len() != 5 || vals[0] as usize != boxes.len() {
            return Err(FearError::Parse(format!(
                "{}:{}: expected `{} x_min y_min x_max y_max`",
                path.display(),
                n + 1,
                boxes.len()
            )));
        }
        boxes.push(BBox::new(vals[1], vals[2], vals[3], vals[4]));
    }
    Ok(boxes)
}

/// Loads a video written by [`save_video`]. Directories without the JSON
/// sidecar load with seed 0 and no drift information.
pub fn load_video(dir: &Path) -> Result<SyntheticVideo> {
    let boxes = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let mut frames = Vec::with_capacity(boxes.len());
    for i in 0..boxes.len() {
        let img = image::open(dir.join(frame_name(i)))?.to_rgb8();
        let (w, h) = img.dimensions();
        let arr = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
            .map_err(|e| FearError::DimensionMismatch(e.to_string()))?;
        frames.push(arr);
    }
    let meta: Option<VideoMeta> = match fs::read_to_string(dir.join(META_FILE)) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let n = frames.len();
    Ok(match meta {
        Some(m) => SyntheticVideo {
            frames,
            boxes,
            seed: m.seed,
            drift: m.drift,
            occluders: if m.occluders.len() == n { m.occluders } else { vec![None; n] },
        },
        None => SyntheticVideo {
            frames,
            boxes,
            seed: 0,
            drift: DriftProfile::none(),
            occluders: vec![None; n],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::generate_synthetic;

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_synthetic(8, 5, (64, 48), DriftProfile::strong());
        save_video(&v, dir.path()).unwrap();
        assert!(dir.path().join("00004.png").exists());
        let back = load_video(dir.path()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn bad_annotation_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(ANNOTATION_FILE);
        fs::write(&p, "0 1 2 3 4\n2 1 2 3 4\n").unwrap();
        let err = read_annotations(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
