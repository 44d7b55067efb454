//! Scene directories and image-folder ingestion.
//!
//! A scene directory holds `frames/NNN.png`, `poses.txt`, `intrinsics.txt`
//! and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{FrameSequence, SceneConfig, SceneError, SceneSample};
use crate::dualquat::{format_pose_file, parse_pose_file, PoseSet};
use crate::gsplat::{save_rgb, Intrinsics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: u64,
    pub seed: u64,
    pub frames: usize,
    pub indices: Vec<usize>,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDir {
    pub meta: Option<SceneMeta>,
    pub frames: FrameSequence,
    pub poses: Option<PoseSet>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ingest_err(path: &Path, msg: impl Into<String>) -> SceneError {
    SceneError::Ingest {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn format_intrinsics(k: &[Intrinsics]) -> String {
    let mut s = String::from("# fx fy cx cy width height\n");
    for k in k {
        s.push_str(&format!("{:e} {:e} {:e} {:e} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height));
    }
    s
}

fn parse_intrinsics(path: &Path, text: &str) -> Result<Vec<Intrinsics>, SceneError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || ingest_err(path, format!("line {}: expected `fx fy cx cy width height`", n + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let v: Vec<f64> = f[..4].iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let w: usize = f[4].parse().map_err(|_| bad())?;
        let h: usize = f[5].parse().map_err(|_| bad())?;
        out.push(Intrinsics {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
            width: w,
            height: h,
        });
    }
    Ok(out)
}

pub fn write_scene_dir(dir: &Path, scene: &SceneSample) -> Result<(), SceneError> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(io_err(&frames))?;
    for (i, img) in scene.frames.images.iter().enumerate() {
        let p = frames.join(format!("{i:03}.png"));
        save_rgb(&p, img, scene.frames.width, scene.frames.height).map_err(|e| ingest_err(&p, e.to_string()))?;
    }
    let p = dir.join("poses.txt");
    fs::write(&p, format_pose_file(&scene.poses)).map_err(io_err(&p))?;
    let ks = scene
        .frames
        .intrinsics
        .clone()
        .unwrap_or_else(|| vec![scene.intrinsics; scene.frames.len()]);
    let p = dir.join("intrinsics.txt");
    fs::write(&p, format_intrinsics(&ks)).map_err(io_err(&p))?;
    let meta = SceneMeta {
        scene_id: scene.scene_id,
        seed: scene.seed,
        frames: scene.frames.len(),
        indices: scene.frames.indices.clone(),
        config: scene.config.clone(),
    };
    let p = dir.join("meta.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).unwrap()).map_err(io_err(&p))?;
    Ok(())
}

/// Reads frames and whatever pose and intrinsics files are present.
pub fn read_scene_dir(dir: &Path) -> Result<SceneDir, SceneError> {
    let frames_dir = dir.join("frames");
    let ks = match fs::read_to_string(dir.join("intrinsics.txt")) {
        Ok(t) => Some(parse_intrinsics(&dir.join("intrinsics.txt"), &t)?),
        Err(_) => None,
    };
    let mut frames = ingest_files(&frames_dir, None)?;
    if let Some(ks) = ks {
        if ks.len() != frames.len() {
            return Err(ingest_err(
                &dir.join("intrinsics.txt"),
                format!("{} entries for {} frames", ks.len(), frames.len()),
            ));
        }
        frames.intrinsics = Some(ks);
    }
    let poses = match fs::read_to_string(dir.join("poses.txt")) {
        Ok(t) => Some(parse_pose_file(&t).map_err(|e| ingest_err(&dir.join("poses.txt"), e.to_string()))?),
        Err(_) => None,
    };
    let meta = match fs::read_to_string(dir.join("meta.json")) {
        Ok(t) => Some(serde_json::from_str(&t).map_err(|e| ingest_err(&dir.join("meta.json"), e.to_string()))?),
        Err(_) => None,
    };
    if let Some(m) = &meta {
        let m: &SceneMeta = m;
        if m.indices.len() == frames.len() {
            frames.indices = m.indices.clone();
        }
    }
    Ok(SceneDir { meta, frames, poses })
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
            files.push(path);
        } else {
            log::warn!("skipping non-image file {}", path.display());
        }
    }
    files.sort();
    Ok(files)
}

fn ingest_files(dir: &Path, target: Option<(usize, usize)>) -> Result<FrameSequence, SceneError> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(ingest_err(dir, "no images found"));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut size = None;
    let mut out_size = (0, 0);
    for f in &files {
        let img = image::open(f).map_err(|e| ingest_err(f, format!("unreadable image: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(ingest_err(f, format!("size {w}x{h} differs from {}x{}", s.0, s.1)));
            }
            _ => {}
        }
        let img = match target {
            Some((tw, th)) => {
                let (x0, y0, cw, ch) = center_crop(w, h, tw, th);
                let crop = img.crop_imm(x0 as u32, y0 as u32, cw as u32, ch as u32);
                crop.resize_exact(tw as u32, th as u32, FilterType::Triangle)
            }
            None => img,
        };
        out_size = (img.width() as usize, img.height() as usize);
        images.push(img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect());
    }
    Ok(FrameSequence {
        width: out_size.0,
        height: out_size.1,
        indices: (0..images.len()).collect(),
        images,
        intrinsics: None,
    })
}

/// Largest centered window of the target aspect ratio: `(x0, y0, w, h)`.
fn center_crop(w: usize, h: usize, tw: usize, th: usize) -> (usize, usize, usize, usize) {
    if w * th > h * tw {
        let cw = h * tw / th;
        ((w - cw) / 2, 0, cw, h)
    } else {
        let ch = w * th / tw;
        (0, (h - ch) / 2, w, ch)
    }
}

/// Loads a folder of equal-size images in file-name order, center-cropped
/// and resampled to `width x height`. Files without an image extension are
/// skipped with a warning. Intrinsics, if given, describe the source images
/// and are carried through the crop and resize.
pub fn ingest_image_folder(
    dir: &Path,
    width: usize,
    height: usize,
    intrinsics: Option<Intrinsics>,
) -> Result<FrameSequence, SceneError> {
    let mut seq = ingest_files(dir, Some((width, height)))?;
    if let Some(k) = intrinsics {
        let (x0, y0, cw, ch) = center_crop(k.width, k.height, width, height);
        let (sx, sy) = (width as f64 / cw as f64, height as f64 / ch as f64);
        let k = Intrinsics {
            fx: k.fx * sx,
            fy: k.fy * sy,
            cx: (k.cx - x0 as f64) * sx,
            cy: (k.cy - y0 as f64) * sy,
            width,
            height,
        };
        seq.intrinsics = Some(vec![k; seq.len()]);
    }
    Ok(seq)
}
