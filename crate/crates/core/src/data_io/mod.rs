//! Datasets on disk, the synthetic exposure-corrupted scene and checkpoints.

mod checkpoint;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::illumination::{classify_means, estimate_prior, IcLabel};
use crate::image::Image;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use synth::{ev_level, exposure_gain, synth_dataset, synth_frames, SynthSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const GT_DIR: &str = "images_gt";

/// One observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Scene units; 0 marks invalid depth.
    pub depth: Image,
    /// 1 = tissue, 0 = tool or ignored.
    pub mask: Image,
    pub camera: Camera,
    pub time: f64,
    pub ic: IcLabel,
    pub mean_prior: f64,
    pub ev_true: Option<f64>,
    /// Uncorrupted image, when the dataset ships one.
    pub image_gt: Option<Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub depth: String,
    pub mask: String,
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<IcLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_prior: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ev_true: Option<f64>,
    pub w2c: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Generator parameters recorded by synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub ev_levels: [f64; 3],
    pub ev_jitter: f64,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Scene units per 16-bit depth count.
    pub depth_scale: f64,
    pub frames: Vec<FrameRecord>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthRecord>,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::BadManifest(format!("unsupported version {}", self.version)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::BadManifest("zero image size".into()));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::BadManifest("depth_scale must be positive".into()));
        }
        let n = self.frames.len();
        for &i in self.train_idx.iter().chain(&self.test_idx) {
            if i >= n {
                return Err(Error::BadManifest(format!("split index {i} out of range ({n} frames)")));
            }
        }
        if let Some(i) = self.train_idx.iter().find(|i| self.test_idx.contains(i)) {
            return Err(Error::BadManifest(format!("frame {i} is in both splits")));
        }
        if self.train_idx.is_empty() {
            return Err(Error::BadManifest("no training frames".into()));
        }
        for w in self.frames.windows(2) {
            if w[1].time < w[0].time {
                return Err(Error::BadManifest("frame times must be nondecreasing".into()));
            }
        }
        Ok(())
    }
}

/// A loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.manifest.train_idx.iter().map(|&i| &self.frames[i])
    }

    pub fn train_idx(&self) -> &[usize] {
        &self.manifest.train_idx
    }

    pub fn test_idx(&self) -> &[usize] {
        &self.manifest.test_idx
    }
}

/// Every `8`th frame (starting at 0) is held out; sequences of one frame
/// train on it.
pub fn default_split(frames: usize) -> (Vec<usize>, Vec<usize>) {
    if frames <= 1 {
        return ((0..frames).collect(), Vec::new());
    }
    (0..frames).partition(|i| i % 8 != 0)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    require(path)?;
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_size(path: &Path, w: u32, h: u32, m: &Manifest) -> Result<()> {
    if w as usize != m.width || h as usize != m.height {
        return Err(Error::ShapeMismatch(format!(
            "{} is {w}×{h}, manifest says {}×{}",
            path.display(),
            m.width,
            m.height
        )));
    }
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Image::from_vec(w as usize, h as usize, 3, data))
}

fn read_rgb_sized(path: &Path, m: &Manifest) -> Result<Image> {
    let img = read_rgb(path)?;
    check_size(path, img.width as u32, img.height as u32, m)?;
    Ok(img)
}

fn read_depth(path: &Path, m: &Manifest) -> Result<Image> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    check_size(path, w, h, m)?;
    let data = img.as_raw().iter().map(|&v| v as f64 * m.depth_scale).collect();
    Ok(Image::from_vec(w as usize, h as usize, 1, data))
}

fn read_mask(path: &Path, m: &Manifest) -> Result<Image> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    check_size(path, w, h, m)?;
    let data = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Image::from_vec(w as usize, h as usize, 1, data))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_png<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    ensure_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes an RGB image clamped to `[0, 1]` as 8-bit PNG. Single-channel
/// images are replicated to gray.
pub fn write_rgb(img: &Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.pixel_count() * 3);
    for p in 0..img.pixel_count() {
        for c in 0..3 {
            let ch = if img.channels == 1 { 0 } else { c };
            bytes.push(to_u8(img.data[p * img.channels + ch]));
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer size");
    save_png(buf, path)
}

/// Writes depth as 16-bit PNG, `round(z / scale)` counts.
pub fn write_depth(depth: &Image, scale: f64, path: &Path) -> Result<()> {
    let counts = depth
        .data
        .iter()
        .map(|&z| (z / scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, counts).expect("buffer size");
    save_png(buf, path)
}

pub fn write_mask(mask: &Image, path: &Path) -> Result<()> {
    let bytes = mask.data.iter().map(|&m| if m >= 0.5 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, bytes).expect("buffer size");
    save_png(buf, path)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    require(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::BadManifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(root: &Path, m: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(m).map_err(|e| Error::BadManifest(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn gt_path(root: &Path, image: &str) -> Option<PathBuf> {
    let name = Path::new(image).file_name()?;
    let p = root.join(GT_DIR).join(name);
    p.is_file().then_some(p)
}

fn load_frame(root: &Path, m: &Manifest, r: &FrameRecord) -> Result<Frame> {
    let image = read_rgb_sized(&root.join(&r.image), m)?;
    let depth = read_depth(&root.join(&r.depth), m)?;
    let mask = read_mask(&root.join(&r.mask), m)?;
    let image_gt = match gt_path(root, &r.image) {
        Some(p) => Some(read_rgb_sized(&p, m)?),
        None => None,
    };
    let mut camera = Camera::new(r.fx, r.fy, r.cx, r.cy, m.width, m.height);
    camera.set_world_to_camera_matrix(&r.w2c);
    if !camera.is_valid() {
        return Err(Error::BadManifest(format!("invalid intrinsics for {}", r.image)));
    }
    let (ic, mean_prior) = match (r.ic, r.mean_prior) {
        (Some(ic), Some(mp)) => (ic, mp),
        _ => {
            let prior = estimate_prior(&image);
            (classify_means(image.mean(), prior.mean), prior.mean)
        }
    };
    Ok(Frame {
        image,
        depth,
        mask,
        camera,
        time: r.time,
        ic,
        mean_prior,
        ev_true: r.ev_true,
        image_gt,
    })
}

/// Loads `root/manifest.json` and every referenced file. Missing IC labels
/// are computed and written back to the manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut manifest = read_manifest(root)?;
    let frames: Vec<Frame> = manifest
        .frames
        .par_iter()
        .map(|r| load_frame(root, &manifest, r))
        .collect::<Result<_>>()?;
    let mut dirty = false;
    for (r, f) in manifest.frames.iter_mut().zip(&frames) {
        if r.ic.is_none() || r.mean_prior.is_none() {
            r.ic = Some(f.ic);
            r.mean_prior = Some(f.mean_prior);
            dirty = true;
        }
    }
    if dirty {
        write_manifest(root, &manifest)?;
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        frames,
    })
}

/// Frame file names used by the writers in this crate.
pub fn frame_stem(i: usize) -> String {
    format!("{i:03}.png")
}

/// Writes `frames` under `root` with a fresh manifest.
pub fn write_dataset(
    root: &Path,
    frames: &[Frame],
    depth_scale: f64,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    synth: Option<SynthRecord>,
) -> Result<Manifest> {
    let first = frames
        .first()
        .ok_or_else(|| Error::BadManifest("dataset has no frames".into()))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = frame_stem(i);
        let rec = FrameRecord {
            image: format!("images/{name}"),
            depth: format!("depth/{name}"),
            mask: format!("masks/{name}"),
            time: f.time,
            ic: Some(f.ic),
            mean_prior: Some(f.mean_prior),
            ev_true: f.ev_true,
            w2c: f.camera.world_to_camera_matrix(),
            fx: f.camera.fx,
            fy: f.camera.fy,
            cx: f.camera.cx,
            cy: f.camera.cy,
        };
        write_rgb(&f.image, &root.join(&rec.image))?;
        write_depth(&f.depth, depth_scale, &root.join(&rec.depth))?;
        write_mask(&f.mask, &root.join(&rec.mask))?;
        if let Some(gt) = &f.image_gt {
            write_rgb(gt, &root.join(GT_DIR).join(&name))?;
        }
        records.push(rec);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width: first.image.width,
        height: first.image.height,
        depth_scale,
        frames: records,
        train_idx,
        test_idx,
        synth,
    };
    manifest.validate()?;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
