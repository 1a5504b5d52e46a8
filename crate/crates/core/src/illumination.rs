//! Illumination prior, IC labels, per-Gaussian region enhancement and the
//! per-view quadratic tone curve.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Activation, BatchTrace, Mlp, MlpGrads, MlpTrace};

pub const PRIOR_WINDOW: usize = 17;
const PRIOR_FLOOR: f64 = 0.05;
pub const HIDDEN_WIDTH: usize = 64;

/// Initial pre-sigmoid output bias of the concealing networks: β ≈ 0.95,
/// γ ≈ 0.05, so toned colors start close to raw colors.
pub const REGION_OUTPUT_BIAS: [f64; 2] = [3.0, -3.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcLabel {
    Bright,
    Dark,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationPrior {
    pub image: Image,
    pub mean: f64,
}

/// Mean over a `size × size` window clipped to the image, via an integral
/// image. Normalization uses the clipped window area.
fn box_filter(src: &Image, size: usize) -> Image {
    let (w, h) = (src.width, src.height);
    let r = size / 2;
    let mut integral = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src.at(x, y, 0);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Image::zeros(w, h, 1);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out.set(x, y, 0, s / ((x1 - x0) * (y1 - y0)) as f64);
        }
    }
    out
}

fn illumination_map(img: &Image) -> Image {
    let mut maxc = Image::zeros(img.width, img.height, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let m = img.pixel(x, y).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            maxc.set(x, y, 0, m);
        }
    }
    box_filter(&maxc, PRIOR_WINDOW)
}

/// Coarse forward/reverse illumination estimate of `img` (values in `[0, 1]`).
pub fn estimate_prior(img: &Image) -> IlluminationPrior {
    let lit = illumination_map(img);
    let inverted = img.map(|v| 1.0 - v);
    let lit_inv = illumination_map(&inverted);
    let mut p = Image::zeros(img.width, img.height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            let l = lit.at(x, y, 0).max(PRIOR_FLOOR);
            let li = lit_inv.at(x, y, 0).max(PRIOR_FLOOR);
            for c in 0..img.channels {
                let v = img.at(x, y, c);
                let fwd = (v / l).clamp(0.0, 1.0);
                let rev = 1.0 - ((1.0 - v) / li).clamp(0.0, 1.0);
                p.set(x, y, c, 0.5 * (fwd + rev));
            }
        }
    }
    let mean = p.mean();
    IlluminationPrior { image: p, mean }
}

/// Bright iff the image mean strictly exceeds the prior mean.
pub fn classify_ic(img: &Image, prior: &IlluminationPrior) -> IcLabel {
    classify_means(img.mean(), prior.mean)
}

pub fn classify_means(image_mean: f64, prior_mean: f64) -> IcLabel {
    if image_mean > prior_mean {
        IcLabel::Bright
    } else {
        IcLabel::Dark
    }
}

/// The two IC-specific region networks, `(c, e) -> (β, γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcealingNetworks {
    pub bright: Mlp,
    pub dark: Mlp,
}

fn region_net<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Mlp {
    let mut net = Mlp::new(
        &[3 + embed_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 2],
        Activation::Relu,
        Activation::Sigmoid,
        rng,
    );
    net.layers.last_mut().unwrap().biases.copy_from_slice(&REGION_OUTPUT_BIAS);
    net
}

impl ConcealingNetworks {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        let bright = region_net(embed_dim, rng);
        let dark = region_net(embed_dim, rng);
        Self { bright, dark }
    }

    pub fn select(&self, label: IcLabel) -> &Mlp {
        match label {
            IcLabel::Bright => &self.bright,
            IcLabel::Dark => &self.dark,
        }
    }
}

/// `e -> δ ∈ (−1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialNetwork {
    pub net: Mlp,
}

impl SpatialNetwork {
    /// Output layer starts at zero so the curve starts as the identity.
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        let mut net = Mlp::new(
            &[embed_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
            Activation::Relu,
            Activation::Tanh,
            rng,
        );
        let last = net.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases.iter_mut().for_each(|b| *b = 0.0);
        Self { net }
    }

    pub fn delta(&self, e: &[f64]) -> Result<(f64, MlpTrace)> {
        let (out, trace) = self.net.forward(e)?;
        Ok((out[0], trace))
    }
}

/// `c_tone = β·c + γ` for one color.
pub fn tone(c: [f64; 3], beta: f64, gamma: f64) -> [f64; 3] {
    [beta * c[0] + gamma, beta * c[1] + gamma, beta * c[2] + gamma]
}

/// Batched region enhancement of every Gaussian under one view.
#[derive(Clone, Debug)]
pub struct RegionPass {
    pub label: IcLabel,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub toned: Vec<[f64; 3]>,
    trace: BatchTrace,
}

pub fn region_enhance(
    colors: &[[f64; 3]],
    e: &[f64],
    label: IcLabel,
    nets: &ConcealingNetworks,
) -> Result<RegionPass> {
    let net = nets.select(label);
    let width = 3 + e.len();
    if width != net.in_dim() {
        return Err(Error::DimMismatch {
            expected: net.in_dim(),
            actual: width,
        });
    }
    let rows = colors.len();
    let mut input = Vec::with_capacity(rows * width);
    for c in colors {
        input.extend_from_slice(c);
        input.extend_from_slice(e);
    }
    let trace = net.forward_batch(&input, rows)?;
    let out = trace.output();
    let beta: Vec<f64> = (0..rows).map(|r| out[2 * r]).collect();
    let gamma: Vec<f64> = (0..rows).map(|r| out[2 * r + 1]).collect();
    let toned = (0..rows).map(|r| tone(colors[r], beta[r], gamma[r])).collect();
    Ok(RegionPass {
        label,
        beta,
        gamma,
        toned,
        trace,
    })
}

/// Reverse mode of [`region_enhance`] for upstream `d_toned`. Adds color
/// gradients (direct and through the network input) into `d_colors`,
/// returns the embedding gradient and adds network gradients into the
/// grads of the net matching `pass.label`.
pub fn region_enhance_backward(
    colors: &[[f64; 3]],
    pass: &RegionPass,
    d_toned: &[[f64; 3]],
    nets: &ConcealingNetworks,
    net_grads: &mut MlpGrads,
    d_colors: &mut [[f64; 3]],
) -> Result<Vec<f64>> {
    let net = nets.select(pass.label);
    let rows = colors.len();
    let width = net.in_dim();
    let mut upstream = Vec::with_capacity(rows * 2);
    for r in 0..rows {
        let g = d_toned[r];
        let c = colors[r];
        upstream.push(g[0] * c[0] + g[1] * c[1] + g[2] * c[2]);
        upstream.push(g[0] + g[1] + g[2]);
    }
    let dx = net.backward_batch(&pass.trace, &upstream, net_grads)?;
    let mut de = vec![0.0; width - 3];
    for r in 0..rows {
        let row = &dx[r * width..(r + 1) * width];
        for ch in 0..3 {
            d_colors[r][ch] += pass.beta[r] * d_toned[r][ch] + row[ch];
        }
        for (acc, v) in de.iter_mut().zip(&row[3..]) {
            *acc += v;
        }
    }
    Ok(de)
}

/// `C + δ·C(1 − C)` applied to every value.
pub fn spatial_curve(img: &Image, delta: f64) -> Image {
    img.map(|c| c + delta * c * (1.0 - c))
}

/// Returns `(d_input, d_delta)` for upstream `d_out` of [`spatial_curve`].
pub fn spatial_curve_backward(img: &Image, delta: f64, d_out: &Image) -> (Image, f64) {
    let mut d_in = Image::zeros(img.width, img.height, img.channels);
    let mut d_delta = 0.0;
    for ((di, &c), &g) in d_in.data.iter_mut().zip(&img.data).zip(&d_out.data) {
        *di = g * (1.0 + delta * (1.0 - 2.0 * c));
        d_delta += g * c * (1.0 - c);
    }
    (d_in, d_delta)
}

/// Full spatial adjustment: evaluates δ from `e` and applies the curve.
pub fn spatial_adjust(img: &Image, e: &[f64], net: &SpatialNetwork) -> Result<(Image, f64, MlpTrace)> {
    let (delta, trace) = net.delta(e)?;
    Ok((spatial_curve(img, delta), delta, trace))
}

/// Reverse mode of [`spatial_adjust`]: returns `(d_img, d_e)` and adds
/// network gradients into `net_grads`.
pub fn spatial_adjust_backward(
    img: &Image,
    delta: f64,
    trace: &MlpTrace,
    d_out: &Image,
    net: &SpatialNetwork,
    net_grads: &mut MlpGrads,
) -> Result<(Image, Vec<f64>)> {
    let (d_img, d_delta) = spatial_curve_backward(img, delta, d_out);
    let de = net.net.backward_accumulate(trace, &[d_delta], net_grads)?;
    Ok((d_img, de))
}
