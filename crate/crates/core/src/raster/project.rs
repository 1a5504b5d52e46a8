//! EWA projection of deformed 3D Gaussians to screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::camera::Camera;
use crate::scene::{rotation_matrix, rotation_matrix_backward, DeformedGaussians, DeformedGrads};

/// Low-pass dilation added to the diagonal of every screen covariance (px²).
pub const COV_DILATION: f64 = 0.3;
pub const DEFAULT_NEAR_CLIP: f64 = 0.01;

/// A projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the Gaussian this splat came from.
    pub source: usize,
    pub mean2d: [f64; 2],
    /// Symmetric covariance `(xx, xy, yy)` in px², dilation included.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color_raw: [f64; 3],
    pub color_toned: [f64; 3],
    pub opacity: f64,
}

fn jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz, 0.0, -cam.fx * p.x * iz2,
        0.0, cam.fy * iz, -cam.fy * p.y * iz2,
    )
}

fn world_covariance(g: &DeformedGaussians, i: usize) -> (Matrix3<f64>, Matrix3<f64>) {
    let r = rotation_matrix(&g.rotations[i]);
    let m = r * Matrix3::from_diagonal(&g.scales[i]);
    (r, m)
}

/// Projects every Gaussian in front of `near_clip`. Culled Gaussians produce
/// no splat; `Splat2D::source` maps splats back to Gaussians.
pub fn project(
    g: &DeformedGaussians,
    colors_raw: &[[f64; 3]],
    colors_toned: &[[f64; 3]],
    cam: &Camera,
    near_clip: f64,
) -> Vec<Splat2D> {
    let mut splats = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let p = cam.to_camera(&g.means[i]);
        if p.z <= near_clip {
            continue;
        }
        let (_, m) = world_covariance(g, i);
        let sigma_cam = cam.rotation * (m * m.transpose()) * cam.rotation.transpose();
        let j = jacobian(cam, &p);
        let cov: Matrix2<f64> = j * sigma_cam * j.transpose();
        let (u, v) = cam.project(&p);
        splats.push(Splat2D {
            source: i,
            mean2d: [u, v],
            cov2d: [
                cov[(0, 0)] + COV_DILATION,
                0.5 * (cov[(0, 1)] + cov[(1, 0)]),
                cov[(1, 1)] + COV_DILATION,
            ],
            depth: p.z,
            color_raw: colors_raw[i],
            color_toned: colors_toned[i],
            opacity: g.opacities[i],
        });
    }
    splats
}

/// Reverse mode of [`project`]: per-splat gradients on mean, covariance,
/// depth and opacity are pulled back to the deformed Gaussians and added
/// into `out`. Color gradients are routed by the caller.
pub fn project_backward(
    g: &DeformedGaussians,
    cam: &Camera,
    splats: &[Splat2D],
    d_mean2d: &[[f64; 2]],
    d_cov2d: &[[f64; 3]],
    d_depth: &[f64],
    d_opacity: &[f64],
    out: &mut DeformedGrads,
) {
    let w = cam.rotation;
    for (s, splat) in splats.iter().enumerate() {
        let i = splat.source;
        let p = cam.to_camera(&g.means[i]);
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let (fx, fy) = (cam.fx, cam.fy);

        let [du, dv] = d_mean2d[s];
        let mut dp = Vector3::new(
            fx * iz * du,
            fy * iz * dv,
            -fx * p.x * iz2 * du - fy * p.y * iz2 * dv + d_depth[s],
        );

        let [dxx, dxy, dyy] = d_cov2d[s];
        let gcov = Matrix2::new(dxx, 0.5 * dxy, 0.5 * dxy, dyy);
        let (r, m) = world_covariance(g, i);
        let sigma_cam = w * (m * m.transpose()) * w.transpose();
        let j = jacobian(cam, &p);
        let d_sigma_cam = j.transpose() * gcov * j;
        let dj = 2.0 * gcov * j * sigma_cam;
        dp.x += dj[(0, 2)] * (-fx * iz2);
        dp.y += dj[(1, 2)] * (-fy * iz2);
        dp.z += dj[(0, 0)] * (-fx * iz2)
            + dj[(0, 2)] * (2.0 * fx * p.x * iz3)
            + dj[(1, 1)] * (-fy * iz2)
            + dj[(1, 2)] * (2.0 * fy * p.y * iz3);

        out.means[i] += w.transpose() * dp;

        let d_sigma = w.transpose() * d_sigma_cam * w;
        let dm = 2.0 * d_sigma * m;
        let scale = g.scales[i];
        let dr = dm * Matrix3::from_diagonal(&scale);
        let dq = rotation_matrix_backward(&g.rotations[i], &dr);
        for c in 0..4 {
            out.rotations[i][c] += dq[c];
        }
        for a in 0..3 {
            let mut acc = 0.0;
            for row in 0..3 {
                acc += r[(row, a)] * dm[(row, a)];
            }
            out.scales[i][a] += acc;
        }
        out.opacities[i] += d_opacity[s];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn single(mean: Vector3<f64>, scale: f64) -> DeformedGaussians {
        DeformedGaussians {
            means: vec![mean],
            rotations: vec![UnitQuaternion::identity()],
            scales: vec![Vector3::repeat(scale)],
            opacities: vec![0.5],
        }
    }

    #[test]
    fn on_axis_mean_and_depth() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64);
        let g = single(Vector3::new(0.0, 0.0, 2.0), 0.01);
        let s = project(&g, &[[0.1; 3]], &[[0.2; 3]], &cam, DEFAULT_NEAR_CLIP);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean2d, [32.0, 32.0]);
        assert_eq!(s[0].depth, 2.0);
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64);
        let g = single(Vector3::new(0.0, 0.0, 2.0), 0.01);
        let s = project(&g, &[[0.0; 3]], &[[0.0; 3]], &cam, DEFAULT_NEAR_CLIP);
        let [xx, xy, yy] = s[0].cov2d;
        assert!((xx - COV_DILATION - 0.25).abs() < 1e-12);
        assert!((yy - COV_DILATION - 0.25).abs() < 1e-12);
        assert!(xy.abs() < 1e-15);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64);
        let g = single(Vector3::new(0.0, 0.0, 0.0), 0.01);
        assert!(project(&g, &[[0.0; 3]], &[[0.0; 3]], &cam, 0.01).is_empty());
    }
}
