//! On-disk sequence layout shared by the simulator, the SLAM runner and the
//! evaluator.
//!
//! ```text
//! intrinsics.json      {fx, fy, cx, cy, width, height}
//! poses_gt.json        [[16 row-major world-to-camera values], ...]
//! meta.json            {seed, generator_version, depth_scale, lighting, noise_cfg, ...}
//! images/NNNN.png      8-bit sRGB
//! depth_gt/NNNN.png    16-bit, millimetres = value · depth_scale
//! depth_noisy/NNNN.png 16-bit, same scale
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::maps::{ScalarMap, VectorMap};
use crate::simulator::{DepthNoiseConfig, LightingSpec, SimConfig, Simulation, GENERATOR_VERSION};

/// Which depth maps accompany the images when a sequence is consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Monocular: images only.
    None,
    #[default]
    Gt,
    Noisy,
}

impl DepthMode {
    pub fn dir_name(&self) -> Option<&'static str> {
        match self {
            DepthMode::None => None,
            DepthMode::Gt => Some("depth_gt"),
            DepthMode::Noisy => Some("depth_noisy"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub generator_version: String,
    pub depth_scale: f64,
    pub n_frames: usize,
    pub lighting: LightingSpec,
    pub noise_cfg: DepthNoiseConfig,
    /// Full generator configuration when the sequence came from the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetFrame {
    pub index: usize,
    pub image_srgb: VectorMap,
    pub depth_gt: Option<ScalarMap>,
    pub depth_noisy: Option<ScalarMap>,
}

impl DatasetFrame {
    pub fn depth(&self, mode: DepthMode) -> Option<&ScalarMap> {
        match mode {
            DepthMode::None => None,
            DepthMode::Gt => self.depth_gt.as_ref(),
            DepthMode::Noisy => self.depth_noisy.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub poses_gt: Vec<Pose>,
    pub frames: Vec<DatasetFrame>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// In-memory dataset straight from a simulation, with images quantized
    /// exactly as they would be on disk.
    pub fn from_simulation(sim: &Simulation) -> Self {
        let q = |d: &ScalarMap| {
            dequantize_depth(&quantize_depth(d, sim.cfg.depth_scale), d.width(), d.height(), sim.cfg.depth_scale)
                .expect("same shape")
        };
        Dataset {
            intrinsics: sim.intrinsics,
            poses_gt: sim.poses.clone(),
            frames: sim
                .frames
                .iter()
                .map(|f| DatasetFrame {
                    index: f.index,
                    image_srgb: quantize_image(&f.gt.image_srgb),
                    depth_gt: Some(q(&f.gt.depth)),
                    depth_noisy: Some(q(&f.depth_noisy)),
                })
                .collect(),
            meta: meta_for(&sim.cfg),
        }
    }
}

pub fn meta_for(cfg: &SimConfig) -> DatasetMeta {
    DatasetMeta {
        seed: cfg.seed,
        generator_version: GENERATOR_VERSION.to_string(),
        depth_scale: cfg.depth_scale,
        n_frames: cfg.n_frames,
        lighting: cfg.lighting.clone(),
        noise_cfg: cfg.depth_noise.clone(),
        sim: Some(cfg.clone()),
    }
}

fn frame_name(index: usize) -> String {
    format!("{index:04}.png")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds an image to the 8-bit grid it would be stored on.
pub fn quantize_image(img: &VectorMap) -> VectorMap {
    img.map(|c| c.map(|v| to_u8(v) as f64 / 255.0))
}

pub fn quantize_depth(depth: &ScalarMap, depth_scale: f64) -> Vec<u16> {
    depth
        .data()
        .iter()
        .map(|&d| (d.max(0.0) / depth_scale).round().min(u16::MAX as f64) as u16)
        .collect()
}

pub fn dequantize_depth(values: &[u16], width: usize, height: usize, depth_scale: f64) -> Result<ScalarMap> {
    ScalarMap::from_vec(width, height, values.iter().map(|&v| v as f64 * depth_scale).collect())
}

pub fn write_rgb_png(path: &Path, img: &VectorMap) -> Result<()> {
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([to_u8(c.x), to_u8(c.y), to_u8(c.z)])
    });
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<VectorMap> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(VectorMap::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

pub fn write_depth_png(path: &Path, depth: &ScalarMap, depth_scale: f64) -> Result<()> {
    let q = quantize_depth(depth, depth_scale);
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, q).expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<ScalarMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::schema(path, format!("expected 16-bit grayscale depth, found {:?}", img.color())));
    }
    let img = img.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ScalarMap::from_vec(w, h, img.into_raw().into_iter().map(|v| v as f64 * depth_scale).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::schema(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a sequence. Depth directories are created only for frames that
/// carry the corresponding map.
pub fn write_dataset(dir: &Path, frames: &[DatasetFrame], k: &Intrinsics, poses_gt: &[Pose], meta: &DatasetMeta) -> Result<()> {
    if frames.len() != poses_gt.len() {
        return Err(Error::LengthMismatch(frames.len(), poses_gt.len()));
    }
    create_dir(dir)?;
    write_json(
        &dir.join("intrinsics.json"),
        &IntrinsicsFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        },
    )?;
    let poses: Vec<[f64; 16]> = poses_gt.iter().map(|p| p.to_row_major()).collect();
    write_json(&dir.join("poses_gt.json"), &poses)?;
    write_json(&dir.join("meta.json"), meta)?;
    create_dir(&dir.join("images"))?;
    for f in frames {
        write_rgb_png(&dir.join("images").join(frame_name(f.index)), &f.image_srgb)?;
        for (sub, depth) in [("depth_gt", &f.depth_gt), ("depth_noisy", &f.depth_noisy)] {
            if let Some(d) = depth {
                let sub = dir.join(sub);
                create_dir(&sub)?;
                write_depth_png(&sub.join(frame_name(f.index)), d, meta.depth_scale)?;
            }
        }
    }
    Ok(())
}

/// Writes a simulated sequence including both depth variants.
pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<()> {
    let frames: Vec<DatasetFrame> = sim
        .frames
        .iter()
        .map(|f| DatasetFrame {
            index: f.index,
            image_srgb: f.gt.image_srgb.clone(),
            depth_gt: Some(f.gt.depth.clone()),
            depth_noisy: Some(f.depth_noisy.clone()),
        })
        .collect();
    write_dataset(dir, &frames, &sim.intrinsics, &sim.poses, &meta_for(&sim.cfg))
}

/// Reads a sequence; `mode` decides which depth directory must be present.
pub fn read_dataset(dir: &Path, mode: DepthMode) -> Result<Dataset> {
    let kf: IntrinsicsFile = read_json(&dir.join("intrinsics.json"))?;
    let k = Intrinsics::new(kf.fx, kf.fy, kf.cx, kf.cy, kf.width, kf.height)
        .map_err(|e| Error::schema(dir.join("intrinsics.json"), e.to_string()))?;
    let rows: Vec<Vec<f64>> = read_json(&dir.join("poses_gt.json"))?;
    let poses_gt = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let arr: [f64; 16] = r.as_slice().try_into().map_err(|_| {
                Error::schema(dir.join("poses_gt.json"), format!("pose {i} has {} values, expected 16", r.len()))
            })?;
            let pose = Pose::from_row_major(&arr);
            if !pose.is_valid(1e-6) {
                return Err(Error::schema(dir.join("poses_gt.json"), format!("pose {i} is not a rigid transform")));
            }
            Ok(pose)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let depth_dir = mode.dir_name().map(|d| dir.join(d));
    if let Some(d) = &depth_dir {
        if !d.is_dir() {
            return Err(Error::schema(d, format!("depth mode {mode:?} needs this directory")));
        }
    }
    let mut frames = Vec::with_capacity(poses_gt.len());
    for index in 0..poses_gt.len() {
        let img_path = dir.join("images").join(frame_name(index));
        let image_srgb = read_rgb_png(&img_path)?;
        if image_srgb.width() != k.width || image_srgb.height() != k.height {
            return Err(Error::schema(&img_path, "image size does not match intrinsics"));
        }
        let depth = match &depth_dir {
            Some(d) => {
                let map = read_depth_png(&d.join(frame_name(index)), meta.depth_scale)?;
                if !image_srgb.same_shape(&map) {
                    return Err(Error::schema(d.join(frame_name(index)), "depth size does not match image"));
                }
                Some(map)
            }
            None => None,
        };
        let (depth_gt, depth_noisy) = match mode {
            DepthMode::Gt => (depth, None),
            DepthMode::Noisy => (None, depth),
            DepthMode::None => (None, None),
        };
        frames.push(DatasetFrame {
            index,
            image_srgb,
            depth_gt,
            depth_noisy,
        });
    }
    Ok(Dataset {
        intrinsics: k,
        poses_gt,
        frames,
        meta,
    })
}

/// Lower-case hex of a SHA-256 digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over every file below `dir` (relative path and contents, sorted by path).
pub fn digest_dir(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
