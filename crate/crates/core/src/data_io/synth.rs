//! Analytic moving-surface scene with block-cycled exposure corruption.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{default_split, write_dataset, Frame, Manifest, SynthRecord};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::illumination::{classify_means, estimate_prior};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// EV offsets of the under, normal and over blocks.
    pub ev_levels: [f64; 3],
    /// Per-frame EV jitter is drawn from `±U(0, ev_jitter)`.
    pub ev_jitter: f64,
    pub block: usize,
    /// Base depth and wave amplitude of the surface (scene units).
    pub z0: f64,
    pub amplitude: f64,
    /// Adds a moving rectangular occluder with mask 0.
    pub tool: bool,
    pub depth_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 21,
            width: 64,
            height: 64,
            ev_levels: [-2.0, 0.0, 2.0],
            ev_jitter: 0.5,
            block: 7,
            z0: 2.0,
            amplitude: 0.1,
            tool: false,
            depth_scale: 1e-4,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.into()));
        if self.frames == 0 {
            return bad("at least one frame is required");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2×2");
        }
        if self.block == 0 {
            return bad("exposure block length must be positive");
        }
        if !(self.ev_jitter >= 0.0) || !self.ev_jitter.is_finite() {
            return bad("ev jitter must be finite and nonnegative");
        }
        if !self.ev_levels.iter().all(|v| v.is_finite()) {
            return bad("ev levels must be finite");
        }
        if !(self.z0 > 0.0) || !(self.amplitude >= 0.0) || self.amplitude >= 0.5 * self.z0 {
            return bad("surface needs z0 > 0 and 0 <= amplitude < z0 / 2");
        }
        let max_depth = (self.z0 + self.amplitude) / self.depth_scale;
        if !(self.depth_scale > 0.0) || max_depth > u16::MAX as f64 {
            return bad("depth_scale cannot encode the surface depth in 16 bits");
        }
        Ok(())
    }
}

/// EV offset of frame `i` before jitter: blocks cycle under, normal, over.
pub fn ev_level(spec: &SynthSpec, i: usize) -> f64 {
    spec.ev_levels[(i / spec.block) % 3]
}

/// `clamp(v · 2^ev, 0, 1)`.
pub fn exposure_gain(v: f64, ev: f64) -> f64 {
    (v * ev.exp2()).clamp(0.0, 1.0)
}

/// Surface albedo at world `(x, y)`; mean close to 0.6.
fn texture(x: f64, y: f64) -> [f64; 3] {
    let a = (2.0 * PI * (1.3 * x + 0.2)).sin() * (2.0 * PI * 0.9 * y).cos();
    let b = (2.0 * PI * 2.1 * (x + y)).sin();
    let c = (2.0 * PI * (0.7 * x - 1.6 * y)).cos();
    [
        (0.64 + 0.18 * a + 0.07 * b).clamp(0.0, 1.0),
        (0.56 + 0.12 * c + 0.10 * a).clamp(0.0, 1.0),
        (0.60 + 0.14 * b - 0.08 * c).clamp(0.0, 1.0),
    ]
}

/// Depth along the ray `(dx, dy, 1)` to `z = z0 + a·sin(2π(x + t))`.
fn intersect(dx: f64, z0: f64, a: f64, t: f64) -> f64 {
    let mut z = z0;
    for _ in 0..50 {
        let ph = 2.0 * PI * (z * dx + t);
        let f = z - z0 - a * ph.sin();
        let fp = 1.0 - a * 2.0 * PI * dx * ph.cos();
        let step = f / fp;
        z -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    z
}

fn quantize(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn render_frame(spec: &SynthSpec, cam: &Camera, t: f64, ev: f64) -> Frame {
    let (w, h) = (spec.width, spec.height);
    let mut gt = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut mask = Image::filled(w, h, 1, 1.0);
    // occluder: quarter-width box sweeping left to right over the sequence
    let tool_w = (w / 4).max(1);
    let tool_h = (h / 3).max(1);
    let tool_x0 = ((w - tool_w) as f64 * t).round() as usize;
    let tool_y0 = h - tool_h;
    for v in 0..h {
        for u in 0..w {
            let dx = (u as f64 - cam.cx) / cam.fx;
            let dy = (v as f64 - cam.cy) / cam.fy;
            let z = intersect(dx, spec.z0, spec.amplitude, t);
            depth.set(u, v, 0, z);
            let in_tool = spec.tool && u >= tool_x0 && u < tool_x0 + tool_w && v >= tool_y0;
            let px = if in_tool {
                mask.set(u, v, 0, 0.0);
                [0.15, 0.15, 0.17]
            } else {
                texture(z * dx, z * dy)
            };
            for c in 0..3 {
                gt.set(u, v, c, px[c]);
            }
        }
    }
    let image = quantize(&gt.map(|p| exposure_gain(p, ev)));
    let gt = quantize(&gt);
    let prior = estimate_prior(&image);
    Frame {
        ic: classify_means(image.mean(), prior.mean),
        mean_prior: prior.mean,
        image,
        depth,
        mask,
        camera: cam.clone(),
        time: t,
        ev_true: Some(ev),
        image_gt: Some(gt),
    }
}

/// Generates the frames of `spec` in memory.
pub fn synth_frames(spec: &SynthSpec, seed: u64) -> Result<Vec<Frame>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(
        spec.width as f64,
        spec.width as f64,
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
        spec.width,
        spec.height,
    );
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let t = if spec.frames > 1 {
            i as f64 / (spec.frames - 1) as f64
        } else {
            0.0
        };
        let jitter = if spec.ev_jitter > 0.0 {
            rng.gen_range(0.0..spec.ev_jitter)
        } else {
            0.0
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let ev = ev_level(spec, i) + sign * jitter;
        frames.push(render_frame(spec, &cam, t, ev));
    }
    Ok(frames)
}

/// Generates and writes a synthetic dataset under `out`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Manifest> {
    let frames = synth_frames(spec, seed)?;
    let (train, test) = default_split(frames.len());
    write_dataset(
        out,
        &frames,
        spec.depth_scale,
        train,
        test,
        Some(SynthRecord {
            seed,
            ev_levels: spec.ev_levels,
            ev_jitter: spec.ev_jitter,
            block: spec.block,
        }),
    )
}
