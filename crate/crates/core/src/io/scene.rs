//! Multi-view dataset: a `scene.json` listing per-frame pose, intrinsics,
//! and the PNG next to it.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::png;

pub const SCENE_FILE: &str = "scene.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    file: String,
    /// Camera-to-world, 16 values row-major.
    transform: Vec<f32>,
    fx: f32,
    fy: f32,
    cx: f32,
    cy: f32,
    w: u32,
    h: u32,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Grid>,
}

impl SceneDataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<Grid>) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::validation(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        for (i, (cam, img)) in cameras.iter().zip(&images).enumerate() {
            cam.validate()?;
            if img.channels() != 3
                || img.height() != cam.height as usize
                || img.width() != cam.width as usize
            {
                return Err(Error::validation(format!(
                    "frame {i}: image shape {:?} does not match camera {}x{}",
                    img.shape(),
                    cam.width,
                    cam.height
                )));
            }
        }
        Ok(SceneDataset { cameras, images })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let manifest_path = dir.join(SCENE_FILE);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let parsed: SceneFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let mut cameras = Vec::with_capacity(parsed.frames.len());
    let mut images = Vec::with_capacity(parsed.frames.len());
    for (i, frame) in parsed.frames.iter().enumerate() {
        if frame.transform.len() != 16 {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "frame {i}: transform has {} entries, expected 16",
                    frame.transform.len()
                ),
            ));
        }
        let m = Matrix4::from_row_slice(&frame.transform);
        let cam = Camera::new(m, frame.fx, frame.fy, frame.cx, frame.cy, frame.w, frame.h)
            .map_err(|e| Error::format(&manifest_path, format!("frame {i}: {e}")))?;
        let img = png::load_image(&dir.join(&frame.file))?;
        cameras.push(cam);
        images.push(img);
    }
    SceneDataset::new(cameras, images)
}

/// Writes `scene.json` plus one PNG per frame (frame_000.png, ...).
/// Matrices round-trip exactly: serde prints the shortest decimal that
/// parses back to the same f32.
pub fn save_scene(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(dataset.len());
    for (i, (cam, img)) in dataset.cameras.iter().zip(&dataset.images).enumerate() {
        let file = format!("frame_{i:03}.png");
        png::save_image(&dir.join(&file), img)?;
        let transform: Vec<f32> = cam
            .camera_to_world
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .collect();
        frames.push(FrameRecord {
            file,
            transform,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            w: cam.width,
            h: cam.height,
        });
    }
    let manifest_path = dir.join(SCENE_FILE);
    let text = serde_json::to_string_pretty(&SceneFile { frames })
        .expect("scene manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}
