//! Training objectives with their analytic gradients.

use crate::error::{Error, Result};
use crate::image::Image;

const DEPTH_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_tv: f64,
    pub exposure_target: f64,
    pub pool_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_depth: 0.01,
            lambda_tv: 0.01,
            exposure_target: 0.6,
            pool_window: 16,
        }
    }
}

/// A loss value and its gradient with respect to the scored image.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Image,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic L1 total variation, each direction averaged over its valid
/// neighbour pairs and channels.
pub fn tv(img: &Image) -> Result<LossTerm> {
    let (w, h, ch) = (img.width, img.height, img.channels);
    if w < 2 || h < 2 {
        return Err(Error::TooSmall(format!("total variation needs 2×2, got {w}×{h}")));
    }
    let nv = ((h - 1) * w * ch) as f64;
    let nh = (h * (w - 1) * ch) as f64;
    let mut value = 0.0;
    let mut grad = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = img.at(x, y, c);
                if y + 1 < h {
                    let d = img.at(x, y + 1, c) - v;
                    value += d.abs() / nv;
                    let s = sign(d) / nv;
                    grad.data[img.index(x, y + 1, c)] += s;
                    grad.data[img.index(x, y, c)] -= s;
                }
                if x + 1 < w {
                    let d = img.at(x + 1, y, c) - v;
                    value += d.abs() / nh;
                    let s = sign(d) / nh;
                    grad.data[img.index(x + 1, y, c)] += s;
                    grad.data[img.index(x, y, c)] -= s;
                }
            }
        }
    }
    Ok(LossTerm { value, grad })
}

fn mask_count(mask: &Image) -> Result<usize> {
    let n = mask.data.iter().filter(|m| **m >= 0.5).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(n)
}

fn check_shapes(pred: &Image, gt: &Image, mask: &Image) -> Result<()> {
    if !pred.same_shape(gt) || mask.width != pred.width || mask.height != pred.height || mask.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}×{}×{}, target {}×{}×{}, mask {}×{}×{}",
            pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels, mask.width, mask.height,
            mask.channels
        )));
    }
    Ok(())
}

/// Masked mean absolute error plus weighted total variation of `pred`.
pub fn color_loss(pred: &Image, gt: &Image, mask: &Image, w: &LossWeights) -> Result<LossTerm> {
    check_shapes(pred, gt, mask)?;
    let count = mask_count(mask)?;
    let norm = (count * pred.channels) as f64;
    let mut t = tv(pred)?;
    t.value *= w.lambda_tv;
    t.grad.data.iter_mut().for_each(|g| *g *= w.lambda_tv);
    let mut l1 = 0.0;
    for p in 0..pred.pixel_count() {
        if mask.data[p] < 0.5 {
            continue;
        }
        for c in 0..pred.channels {
            let i = p * pred.channels + c;
            let d = pred.data[i] - gt.data[i];
            l1 += d.abs();
            t.grad.data[i] += sign(d) / norm;
        }
    }
    Ok(LossTerm {
        value: l1 / norm + t.value,
        grad: t.grad,
    })
}

/// First index of the maximum value.
fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in data.iter().enumerate() {
        if *v > data[best] {
            best = i;
        }
    }
    best
}

/// Masked L1 between max-normalized depths, weighted by `lambda_depth`,
/// plus weighted total variation of `pred`.
pub fn depth_loss(pred: &Image, gt: &Image, mask: &Image, w: &LossWeights) -> Result<LossTerm> {
    check_shapes(pred, gt, mask)?;
    let count = mask_count(mask)? as f64;
    let imax = argmax(&pred.data);
    let dmax = pred.data[imax];
    let gmax = gt.data[argmax(&gt.data)];
    if !(dmax > DEPTH_FLOOR) {
        return Err(Error::DegenerateDepth(dmax));
    }
    if !(gmax > DEPTH_FLOOR) {
        return Err(Error::DegenerateDepth(gmax));
    }
    let mut t = tv(pred)?;
    t.value *= w.lambda_tv;
    t.grad.data.iter_mut().for_each(|g| *g *= w.lambda_tv);
    let mut l1 = 0.0;
    let mut d_max_grad = 0.0;
    for p in 0..pred.data.len() {
        if mask.data[p] < 0.5 {
            continue;
        }
        let d = pred.data[p] / dmax - gt.data[p] / gmax;
        l1 += d.abs();
        let g = w.lambda_depth * sign(d) / count;
        t.grad.data[p] += g / dmax;
        d_max_grad -= g * pred.data[p] / (dmax * dmax);
    }
    t.grad.data[imax] += d_max_grad;
    Ok(LossTerm {
        value: w.lambda_depth * l1 / count + t.value,
        grad: t.grad,
    })
}

/// Running mean; a run of equal values averages to exactly that value.
fn stable_mean(vals: impl IntoIterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (k, v) in vals.into_iter().enumerate() {
        m += (v - m) / (k + 1) as f64;
    }
    m
}

/// Mean squared deviation from the exposure target of window averages of
/// the row-major flattened gray image.
pub fn exposure_loss(raw: &Image, w: &LossWeights) -> Result<LossTerm> {
    let n = raw.pixel_count();
    if n == 0 || raw.channels == 0 {
        return Err(Error::TooSmall("exposure loss needs a nonempty image".into()));
    }
    let win = w.pool_window.max(1);
    // deviations first, so a constant image at the target scores exactly 0
    let e = w.exposure_target;
    let dev_px: Vec<f64> = raw
        .data
        .chunks_exact(raw.channels)
        .map(|px| stable_mean(px.iter().map(|v| v - e)))
        .collect();
    let windows = n.div_ceil(win);
    let mut squares = Vec::with_capacity(windows);
    let mut grad = Image::zeros(raw.width, raw.height, raw.channels);
    let ch = raw.channels as f64;
    for k in 0..windows {
        let start = k * win;
        let end = (start + win).min(n);
        let len = (end - start) as f64;
        let dev = stable_mean(dev_px[start..end].iter().copied());
        squares.push(dev * dev);
        let g = 2.0 * dev / (windows as f64 * len * ch);
        for p in start..end {
            for c in 0..raw.channels {
                grad.data[p * raw.channels + c] = g;
            }
        }
    }
    Ok(LossTerm {
        value: stable_mean(squares),
        grad,
    })
}

/// Loss components of one training view.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub color: f64,
    pub depth: f64,
    pub exposure: f64,
    pub total: f64,
}

pub fn total_loss(color: f64, depth: f64, exposure: Option<f64>) -> LossBreakdown {
    let exposure = exposure.unwrap_or(0.0);
    LossBreakdown {
        color,
        depth,
        exposure,
        total: color + depth + exposure,
    }
}
