//! PSNR, SSIM and evaluation reports.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn shape_check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}×{}×{} vs {}×{}×{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over pixels with `mask >= 0.5`, values clamped to
/// `[0, 1]`; capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    shape_check(a, b)?;
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height || m.channels != 1 {
            return Err(Error::ShapeMismatch("mask does not match image".into()));
        }
    }
    let ch = a.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| m.data[p] < 0.5) {
            continue;
        }
        for c in 0..ch {
            let d = a.data[p * ch + c].clamp(0.0, 1.0) - b.data[p * ch + c].clamp(0.0, 1.0);
            sum += d * d;
        }
        count += ch;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    shape_check(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, gy) in g.iter().enumerate() {
                    for (i, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let x = a.at(ox + i, oy + j, c);
                        let y = b.at(ox + i, oy + j, c);
                        mx += wgt * x;
                        my += wgt * y;
                        xx += wgt * x * x;
                        yy += wgt * y * y;
                        xy += wgt * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameEval {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frame_count: usize,
    pub mask_policy: String,
    pub lpips: Option<f64>,
    pub notes: String,
}

impl EvalReport {
    pub fn new(frames: Vec<FrameEval>, mask_policy: &str) -> Self {
        let n = frames.len();
        let mean = |f: fn(&FrameEval) -> f64| {
            if n == 0 {
                0.0
            } else {
                frames.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            mean_psnr: mean(|f| f.psnr),
            mean_ssim: mean(|f| f.ssim),
            frame_count: n,
            frames,
            mask_policy: mask_policy.to_string(),
            lpips: None,
            notes: "LPIPS unavailable (needs a pretrained network)".into(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("frame\tpsnr\tssim\n");
        for f in &self.frames {
            s.push_str(&format!("{}\t{:.4}\t{:.6}\n", f.name, f.psnr, f.ssim));
        }
        s.push_str(&format!("mean\t{:.4}\t{:.6}\n", self.mean_psnr, self.mean_ssim));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
