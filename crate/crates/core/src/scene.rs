//! Optimizable Gaussian scene, its temporal deformation, depth-based
//! initialization and adaptive density control.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_io::Frame;
use crate::error::{Error, Result};
use crate::nn::{logit, sigmoid};

pub const DEFAULT_EMBEDDING_DIM: usize = 32;
pub const DEFAULT_DEFORM_ORDER: usize = 2;

const OPACITY_FLOOR: f64 = 1e-12;

/// Gaussian parameters before activation and deformation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<[f64; 3]>,
    /// Unnormalized `(w, x, y, z)` quaternions.
    pub rot_raw: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.color_logits
            .iter()
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        let s = self.log_scales[i];
        s[0].max(s[1]).max(s[2]).exp()
    }

    fn push_row_from(&mut self, src: &GaussianSet, i: usize) {
        self.means.push(src.means[i]);
        self.rot_raw.push(src.rot_raw[i]);
        self.log_scales.push(src.log_scales[i]);
        self.opacity_logits.push(src.opacity_logits[i]);
        self.color_logits.push(src.color_logits[i]);
    }

    fn empty_like() -> Self {
        Self {
            means: Vec::new(),
            rot_raw: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            color_logits: Vec::new(),
        }
    }
}

/// Per-Gaussian Fourier series (period 1 in time) added to means,
/// log-scales and opacity logits. Coefficients are interleaved
/// `[sin 1, cos 1, sin 2, cos 2, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub order: usize,
    /// `N × 3 × 2B`
    pub mean_coeffs: Vec<f64>,
    /// `N × 3 × 2B`
    pub scale_coeffs: Vec<f64>,
    /// `N × 2B`
    pub opacity_coeffs: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(n: usize, order: usize) -> Self {
        Self {
            order,
            mean_coeffs: vec![0.0; n * 6 * order],
            scale_coeffs: vec![0.0; n * 6 * order],
            opacity_coeffs: vec![0.0; n * 2 * order],
        }
    }

    pub fn basis_len(&self) -> usize {
        2 * self.order
    }

    pub fn len(&self) -> usize {
        if self.order == 0 {
            0
        } else {
            self.opacity_coeffs.len() / self.basis_len()
        }
    }

    fn push_row_from(&mut self, src: &DeformationField, i: usize) {
        let k = src.basis_len();
        self.mean_coeffs
            .extend_from_slice(&src.mean_coeffs[i * 3 * k..(i + 1) * 3 * k]);
        self.scale_coeffs
            .extend_from_slice(&src.scale_coeffs[i * 3 * k..(i + 1) * 3 * k]);
        self.opacity_coeffs
            .extend_from_slice(&src.opacity_coeffs[i * k..(i + 1) * k]);
    }
}

/// Fourier basis `[sin(2πt), cos(2πt), sin(4πt), cos(4πt), ...]`.
pub fn fourier_basis(order: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * order);
    for b in 1..=order {
        let w = 2.0 * PI * b as f64 * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

#[inline]
fn series(coeffs: &[f64], basis: &[f64]) -> f64 {
    coeffs.iter().zip(basis).map(|(a, b)| a * b).sum()
}

/// Trainable per-training-view appearance codes, one row per training frame.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationEmbeddings {
    pub dim: usize,
    pub table: Vec<f64>,
}

impl IlluminationEmbeddings {
    pub fn zeros(views: usize, dim: usize) -> Self {
        Self {
            dim,
            table: vec![0.0; views * dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(views: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = (0..views * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { dim, table }
    }

    pub fn views(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.table.len() / self.dim
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.table[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.table[r * self.dim..(r + 1) * self.dim]
    }
}

/// Activated Gaussian parameters at one query time.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGaussians {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<UnitQuaternion<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
}

impl DeformedGaussians {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Upstream gradients with respect to [`DeformedGaussians`]; `rotations` is
/// taken with respect to the unit quaternion's `(w, x, y, z)` components.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGrads {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
}

impl DeformedGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
        }
    }
}

/// Gradients shaped like a [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<[f64; 3]>,
    pub rot_raw: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![[0.0; 3]; n],
            rot_raw: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            color_logits: vec![[0.0; 3]; n],
        }
    }
}

fn normalize_quat(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn deform(set: &GaussianSet, field: &DeformationField, t: f64) -> DeformedGaussians {
    let n = set.len();
    let basis = fourier_basis(field.order, t);
    let k = basis.len();
    let mut out = DeformedGaussians {
        means: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut mu = Vector3::from(set.means[i]);
        let mut ls = Vector3::from(set.log_scales[i]);
        let mut ol = set.opacity_logits[i];
        if k > 0 {
            for a in 0..3 {
                let off = (i * 3 + a) * k;
                mu[a] += series(&field.mean_coeffs[off..off + k], &basis);
                ls[a] += series(&field.scale_coeffs[off..off + k], &basis);
            }
            ol += series(&field.opacity_coeffs[i * k..(i + 1) * k], &basis);
        }
        out.means.push(mu);
        out.rotations.push(normalize_quat(&set.rot_raw[i]));
        out.scales.push(ls.map(f64::exp));
        out.opacities
            .push(sigmoid(ol).clamp(OPACITY_FLOOR, 1.0 - OPACITY_FLOOR));
    }
    out
}

/// Reverse mode of [`deform`]. Accumulates into `set_grads` (means,
/// rotations, log-scales, opacity logits) and `field_grads`.
pub fn deform_backward(
    set: &GaussianSet,
    field: &DeformationField,
    t: f64,
    deformed: &DeformedGaussians,
    upstream: &DeformedGrads,
    set_grads: &mut GaussianGrads,
    field_grads: &mut DeformationField,
) {
    let basis = fourier_basis(field.order, t);
    let k = basis.len();
    for i in 0..set.len() {
        let dmu = upstream.means[i];
        let dls = upstream.scales[i].component_mul(&deformed.scales[i]);
        let o = deformed.opacities[i];
        let dol = upstream.opacities[i] * o * (1.0 - o);
        for a in 0..3 {
            set_grads.means[i][a] += dmu[a];
            set_grads.log_scales[i][a] += dls[a];
            let off = (i * 3 + a) * k;
            for j in 0..k {
                field_grads.mean_coeffs[off + j] += dmu[a] * basis[j];
                field_grads.scale_coeffs[off + j] += dls[a] * basis[j];
            }
        }
        set_grads.opacity_logits[i] += dol;
        for j in 0..k {
            field_grads.opacity_coeffs[i * k + j] += dol * basis[j];
        }
        // normalization backward: dr = (dq - q (q·dq)) / |r|
        let r = set.rot_raw[i];
        let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
        let q = [r[0] / norm, r[1] / norm, r[2] / norm, r[3] / norm];
        let dq = upstream.rotations[i];
        let dot: f64 = (0..4).map(|c| q[c] * dq[c]).sum();
        for c in 0..4 {
            set_grads.rot_raw[i][c] += (dq[c] - q[c] * dot) / norm;
        }
    }
}

/// Seeds one Gaussian per sampled valid pixel of `frame`.
pub fn init_from_depth(
    frame: &Frame,
    stride: usize,
    order: usize,
) -> Result<(GaussianSet, DeformationField)> {
    assert!(stride >= 1, "stride must be positive");
    let cam = &frame.camera;
    let mut set = GaussianSet::empty_like();
    for v in (0..frame.depth.height).step_by(stride) {
        for u in (0..frame.depth.width).step_by(stride) {
            let z = frame.depth.at(u, v, 0);
            if frame.mask.at(u, v, 0) < 0.5 || !(z > 0.0) {
                continue;
            }
            let p_cam = cam.unproject(u as f64, v as f64, z);
            let p = cam.to_world(&p_cam);
            set.means.push([p.x, p.y, p.z]);
            set.rot_raw.push([1.0, 0.0, 0.0, 0.0]);
            let ls = (z * stride as f64 / cam.fx).ln();
            set.log_scales.push([ls; 3]);
            set.opacity_logits.push(logit(0.1));
            let px = frame.image.pixel(u, v);
            set.color_logits.push([
                logit(px[0].clamp(1e-4, 1.0 - 1e-4)),
                logit(px[1].clamp(1e-4, 1.0 - 1e-4)),
                logit(px[2].clamp(1e-4, 1.0 - 1e-4)),
            ]);
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyInit);
    }
    let n = set.len();
    Ok((set, DeformationField::zeros(n, order)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest scale is at most this fraction of the scene
    /// extent are cloned, larger ones are split.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub split_scale_divisor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            percent_dense: 0.01,
            scene_extent: 1.0,
            split_scale_divisor: 1.6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    /// For every output row, the input row it continues (`None` for rows
    /// created by cloning or splitting).
    pub sources: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

impl DensifyOutcome {
    pub fn is_identity(&self) -> bool {
        self.sources.iter().enumerate().all(|(i, s)| *s == Some(i))
    }
}

/// Clones or splits Gaussians with large positional gradients and removes
/// nearly transparent ones. `grads[i]` is Gaussian `i`'s mean-gradient norm.
pub fn densify_and_prune<R: Rng + ?Sized>(
    set: &mut GaussianSet,
    field: &mut DeformationField,
    grads: &[f64],
    cfg: &DensifyConfig,
    rng: &mut R,
) -> DensifyOutcome {
    let n = set.len();
    assert_eq!(grads.len(), n, "one gradient norm per Gaussian");
    let dense_limit = cfg.percent_dense * cfg.scene_extent;

    let mut new_set = GaussianSet::empty_like();
    let mut new_field = DeformationField::zeros(0, field.order);
    let mut sources = Vec::new();
    let mut keep_order = Vec::new();
    let mut extras: Vec<(usize, Option<[f64; 3]>)> = Vec::new();
    let (mut cloned, mut split) = (0, 0);

    for i in 0..n {
        let hot = grads[i] > cfg.grad_threshold;
        if hot && set.max_scale(i) <= dense_limit {
            keep_order.push(i);
            extras.push((i, None));
            cloned += 1;
        } else if hot {
            let q = normalize_quat(&set.rot_raw[i]);
            let s = Vector3::from(set.log_scales[i]).map(f64::exp);
            for _ in 0..2 {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let offset = q * s.component_mul(&z);
                let m = set.means[i];
                extras.push((i, Some([m[0] + offset.x, m[1] + offset.y, m[2] + offset.z])));
            }
            split += 1;
        } else {
            keep_order.push(i);
        }
    }

    for &i in &keep_order {
        new_set.push_row_from(set, i);
        new_field.push_row_from(field, i);
        sources.push(Some(i));
    }
    let shrink = cfg.split_scale_divisor.ln();
    for &(i, mean) in &extras {
        new_set.push_row_from(set, i);
        new_field.push_row_from(field, i);
        if let Some(m) = mean {
            let last = new_set.len() - 1;
            new_set.means[last] = m;
            for a in 0..3 {
                new_set.log_scales[last][a] -= shrink;
            }
        }
        sources.push(None);
    }

    // prune, but never empty the set
    let total = new_set.len();
    let mut alive: Vec<bool> = (0..total)
        .map(|r| new_set.opacity(r) >= cfg.prune_opacity)
        .collect();
    if !alive.iter().any(|&a| a) {
        let best = (0..total)
            .max_by(|&a, &b| {
                new_set.opacity_logits[a]
                    .partial_cmp(&new_set.opacity_logits[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .expect("set is non-empty");
        alive[best] = true;
    }
    let pruned = alive.iter().filter(|a| !**a).count();
    let mut final_set = GaussianSet::empty_like();
    let mut final_field = DeformationField::zeros(0, field.order);
    let mut final_sources = Vec::new();
    for r in 0..total {
        if alive[r] {
            final_set.push_row_from(&new_set, r);
            final_field.push_row_from(&new_field, r);
            final_sources.push(sources[r]);
        }
    }
    *set = final_set;
    *field = final_field;
    DensifyOutcome {
        sources: final_sources,
        cloned,
        split,
        pruned,
    }
}

/// 3×3 rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

/// Gradient of a loss with respect to the `(w, x, y, z)` components of a
/// unit quaternion, given the gradient `g` with respect to its rotation
/// matrix.
pub fn rotation_matrix_backward(q: &UnitQuaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}
