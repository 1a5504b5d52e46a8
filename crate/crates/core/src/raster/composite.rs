//! Tile-binned front-to-back alpha compositing and its adjoint.

use rayon::prelude::*;

use super::project::Splat2D;
use crate::error::{Error, Result};
use crate::image::Image;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Slack (px) on splat bounding boxes; pixels inside the slack still go
/// through the exact alpha test.
const BBOX_SLACK: f64 = 1e-6;

/// Per-splat quantities shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct Prepared {
    conic: [f64; 3],
    /// `power` below this guarantees `alpha < ALPHA_MIN`.
    power_cut: f64,
    bbox: [f64; 4],
    live: bool,
}

fn prepare(s: &Splat2D) -> Prepared {
    let [xx, xy, yy] = s.cov2d;
    let det = xx * yy - xy * xy;
    let dead = Prepared {
        conic: [0.0; 3],
        power_cut: 0.0,
        bbox: [0.0; 4],
        live: false,
    };
    if !(det > 0.0) || !(s.opacity >= ALPHA_MIN) || !s.mean2d.iter().all(|v| v.is_finite()) {
        return dead;
    }
    let conic = [yy / det, -xy / det, xx / det];
    // alpha >= ALPHA_MIN  <=>  dᵀΣ⁻¹d <= 2 ln(255 o)
    let q_max = 2.0 * (s.opacity / ALPHA_MIN).ln();
    let rx = (q_max * xx).sqrt() + BBOX_SLACK;
    let ry = (q_max * yy).sqrt() + BBOX_SLACK;
    Prepared {
        conic,
        power_cut: (ALPHA_MIN / s.opacity).ln() - 1e-9,
        bbox: [s.mean2d[0] - rx, s.mean2d[1] - ry, s.mean2d[0] + rx, s.mean2d[1] + ry],
        live: true,
    }
}

#[inline]
fn power_at(p: &Prepared, dx: f64, dy: f64) -> f64 {
    let [a, b, c] = p.conic;
    -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
}

#[derive(Clone, Debug)]
struct TileRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// Contributor lists for one tile.
#[derive(Clone, Debug)]
pub struct TileWork {
    rect_x0: usize,
    rect_y0: usize,
    rect_x1: usize,
    rect_y1: usize,
    /// Splat indices overlapping the tile, front to back.
    bin: Vec<u32>,
    /// Start of each pixel's contributor run in `contribs` (`pixels + 1` long).
    offsets: Vec<u32>,
    /// `(position in bin, alpha)` per contributor.
    contribs: Vec<(u32, f64)>,
}

/// State retained by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub order: Vec<usize>,
    tiles: Vec<TileWork>,
    prepared: Vec<Prepared>,
    width: usize,
    height: usize,
}

impl Workspace {
    /// Number of contributors recorded at pixel `(x, y)`.
    pub fn contributor_count(&self, x: usize, y: usize) -> usize {
        let tx = x / TILE_SIZE;
        let ty = y / TILE_SIZE;
        let tiles_x = self.width.div_ceil(TILE_SIZE);
        let t = &self.tiles[ty * tiles_x + tx];
        let w = t.rect_x1 - t.rect_x0;
        let local = (y - t.rect_y0) * w + (x - t.rect_x0);
        (t.offsets[local + 1] - t.offsets[local]) as usize
    }
}

/// Composited images of one view.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color_raw: Image,
    pub color_toned: Image,
    pub depth: Image,
    pub alpha: Image,
    pub workspace: Option<Workspace>,
}

/// Gradients of the loss with respect to each input splat.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mean2d: Vec<[f64; 2]>,
    pub cov2d: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub color_raw: Vec<[f64; 3]>,
    pub color_toned: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean2d: vec![[0.0; 2]; n],
            cov2d: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            color_raw: vec![[0.0; 3]; n],
            color_toned: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeOptions {
    pub tile_size: usize,
    pub keep_workspace: bool,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        Self {
            tile_size: TILE_SIZE,
            keep_workspace: true,
        }
    }
}

/// Sorted splat order: ascending depth, ties by ascending source index.
pub fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source.cmp(&splats[b].source))
            .then(a.cmp(&b))
    });
    order
}

struct TileOut {
    raw: Vec<[f64; 3]>,
    toned: Vec<[f64; 3]>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    work: TileWork,
}

fn tile_rects(width: usize, height: usize, tile: usize) -> Vec<TileRect> {
    let mut rects = Vec::new();
    for y0 in (0..height).step_by(tile) {
        for x0 in (0..width).step_by(tile) {
            rects.push(TileRect {
                x0,
                y0,
                x1: (x0 + tile).min(width),
                y1: (y0 + tile).min(height),
            });
        }
    }
    rects
}

fn bin_for(rect: &TileRect, order: &[usize], prepared: &[Prepared]) -> Vec<u32> {
    let (fx0, fy0) = (rect.x0 as f64, rect.y0 as f64);
    let (fx1, fy1) = ((rect.x1 - 1) as f64, (rect.y1 - 1) as f64);
    order
        .iter()
        .copied()
        .filter(|&s| {
            let p = &prepared[s];
            p.live && p.bbox[0] <= fx1 && p.bbox[2] >= fx0 && p.bbox[1] <= fy1 && p.bbox[3] >= fy0
        })
        .map(|s| s as u32)
        .collect()
}

fn render_tile(rect: &TileRect, bin: Vec<u32>, splats: &[Splat2D], prepared: &[Prepared]) -> TileOut {
    let npx = (rect.x1 - rect.x0) * (rect.y1 - rect.y0);
    let mut out = TileOut {
        raw: Vec::with_capacity(npx),
        toned: Vec::with_capacity(npx),
        depth: Vec::with_capacity(npx),
        alpha: Vec::with_capacity(npx),
        work: TileWork {
            rect_x0: rect.x0,
            rect_y0: rect.y0,
            rect_x1: rect.x1,
            rect_y1: rect.y1,
            bin: Vec::new(),
            offsets: Vec::with_capacity(npx + 1),
            contribs: Vec::new(),
        },
    };
    out.work.offsets.push(0);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let (px, py) = (x as f64, y as f64);
            let mut t = 1.0;
            let mut raw = [0.0; 3];
            let mut toned = [0.0; 3];
            let mut depth = 0.0;
            for (pos, &si) in bin.iter().enumerate() {
                let p = &prepared[si as usize];
                if px < p.bbox[0] || px > p.bbox[2] || py < p.bbox[1] || py > p.bbox[3] {
                    continue;
                }
                let s = &splats[si as usize];
                let power = power_at(p, px - s.mean2d[0], py - s.mean2d[1]);
                if power < p.power_cut {
                    continue;
                }
                let alpha = (s.opacity * power.exp()).min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let next_t = t * (1.0 - alpha);
                if next_t < TRANSMITTANCE_MIN {
                    break;
                }
                let w = alpha * t;
                for c in 0..3 {
                    raw[c] += w * s.color_raw[c];
                    toned[c] += w * s.color_toned[c];
                }
                depth += w * s.depth;
                out.work.contribs.push((pos as u32, alpha));
                t = next_t;
            }
            out.raw.push(raw);
            out.toned.push(toned);
            out.depth.push(depth);
            out.alpha.push(1.0 - t);
            out.work.offsets.push(out.work.contribs.len() as u32);
        }
    }
    out.work.bin = bin;
    out
}

/// Composites `splats` (any order; sorted internally) into a
/// `width × height` view.
pub fn composite_forward(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    opts: CompositeOptions,
) -> RenderOutput {
    let prepared: Vec<Prepared> = splats.iter().map(prepare).collect();
    let order = depth_order(splats);
    let rects = tile_rects(width, height, opts.tile_size.max(1));
    let tiles: Vec<TileOut> = rects
        .par_iter()
        .map(|r| {
            let bin = bin_for(r, &order, &prepared);
            render_tile(r, bin, splats, &prepared)
        })
        .collect();

    let mut color_raw = Image::zeros(width, height, 3);
    let mut color_toned = Image::zeros(width, height, 3);
    let mut depth = Image::zeros(width, height, 1);
    let mut alpha = Image::zeros(width, height, 1);
    for t in &tiles {
        let w = &t.work;
        let mut k = 0;
        for y in w.rect_y0..w.rect_y1 {
            for x in w.rect_x0..w.rect_x1 {
                for c in 0..3 {
                    color_raw.set(x, y, c, t.raw[k][c]);
                    color_toned.set(x, y, c, t.toned[k][c]);
                }
                depth.set(x, y, 0, t.depth[k]);
                alpha.set(x, y, 0, t.alpha[k]);
                k += 1;
            }
        }
    }
    let workspace = opts.keep_workspace.then(|| Workspace {
        order,
        tiles: tiles.into_iter().map(|t| t.work).collect(),
        prepared,
        width,
        height,
    });
    RenderOutput {
        color_raw,
        color_toned,
        depth,
        alpha,
        workspace,
    }
}

#[derive(Clone)]
struct LocalGrads {
    mean2d: Vec<[f64; 2]>,
    conic: Vec<[f64; 3]>,
    depth: Vec<f64>,
    raw: Vec<[f64; 3]>,
    toned: Vec<[f64; 3]>,
    opacity: Vec<f64>,
}

impl LocalGrads {
    fn zeros(n: usize) -> Self {
        Self {
            mean2d: vec![[0.0; 2]; n],
            conic: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            raw: vec![[0.0; 3]; n],
            toned: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
        }
    }
}

fn backward_tile(
    work: &TileWork,
    splats: &[Splat2D],
    prepared: &[Prepared],
    d_raw: &Image,
    d_toned: &Image,
    d_depth: &Image,
) -> LocalGrads {
    let mut g = LocalGrads::zeros(work.bin.len());
    let mut trans = Vec::new();
    let mut k = 0;
    for y in work.rect_y0..work.rect_y1 {
        for x in work.rect_x0..work.rect_x1 {
            let run = &work.contribs[work.offsets[k] as usize..work.offsets[k + 1] as usize];
            k += 1;
            if run.is_empty() {
                continue;
            }
            let gc = d_raw.pixel(x, y);
            let gt = d_toned.pixel(x, y);
            let gd = d_depth.at(x, y, 0);
            if gc.iter().chain(gt).all(|v| *v == 0.0) && gd == 0.0 {
                continue;
            }
            trans.clear();
            let mut t = 1.0;
            for &(_, alpha) in run {
                trans.push(t);
                t *= 1.0 - alpha;
            }
            let (px, py) = (x as f64, y as f64);
            let mut rest_raw = [0.0; 3];
            let mut rest_toned = [0.0; 3];
            let mut rest_depth = 0.0;
            for (j, &(pos, alpha)) in run.iter().enumerate().rev() {
                let pos = pos as usize;
                let si = work.bin[pos] as usize;
                let s = &splats[si];
                let p = &prepared[si];
                let tj = trans[j];
                let w = alpha * tj;

                let mut d_alpha = 0.0;
                for c in 0..3 {
                    g.raw[pos][c] += gc[c] * w;
                    g.toned[pos][c] += gt[c] * w;
                    d_alpha += gc[c] * (s.color_raw[c] - rest_raw[c]);
                    d_alpha += gt[c] * (s.color_toned[c] - rest_toned[c]);
                    rest_raw[c] = alpha * s.color_raw[c] + (1.0 - alpha) * rest_raw[c];
                    rest_toned[c] = alpha * s.color_toned[c] + (1.0 - alpha) * rest_toned[c];
                }
                g.depth[pos] += gd * w;
                d_alpha += gd * (s.depth - rest_depth);
                rest_depth = alpha * s.depth + (1.0 - alpha) * rest_depth;
                d_alpha *= tj;

                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let gauss = power_at(p, dx, dy).exp();
                let alpha_raw = s.opacity * gauss;
                if alpha_raw > ALPHA_MAX {
                    continue;
                }
                g.opacity[pos] += d_alpha * gauss;
                let d_power = d_alpha * alpha_raw;
                let [a, b, c] = p.conic;
                g.mean2d[pos][0] += d_power * (a * dx + b * dy);
                g.mean2d[pos][1] += d_power * (b * dx + c * dy);
                g.conic[pos][0] += d_power * (-0.5 * dx * dx);
                g.conic[pos][1] += d_power * (-dx * dy);
                g.conic[pos][2] += d_power * (-0.5 * dy * dy);
            }
        }
    }
    g
}

/// Maps a gradient on the conic `(a, b, c)` of `[[a, b], [b, c]] = Σ⁻¹`
/// to the covariance parameters `(xx, xy, yy)`.
fn conic_to_cov_grad(cov: [f64; 3], dconic: [f64; 3]) -> [f64; 3] {
    let [xx, xy, yy] = cov;
    let det = xx * yy - xy * xy;
    let id = 1.0 / det;
    let id2 = id * id;
    let [ga, gb, gc] = dconic;
    let dxx = ga * (-yy * yy * id2) + gb * (xy * yy * id2) + gc * (id - xx * yy * id2);
    let dyy = ga * (id - xx * yy * id2) + gb * (xy * xx * id2) + gc * (-xx * xx * id2);
    let dxy = ga * (2.0 * xy * yy * id2) + gb * (-id - 2.0 * xy * xy * id2) + gc * (2.0 * xx * xy * id2);
    [dxx, dxy, dyy]
}

/// Exact adjoint of [`composite_forward`] for upstream image gradients.
pub fn composite_backward(
    splats: &[Splat2D],
    output: &RenderOutput,
    d_raw: &Image,
    d_toned: &Image,
    d_depth: &Image,
) -> Result<SplatGrads> {
    let ws = output.workspace.as_ref().ok_or(Error::WorkspaceMissing)?;
    if ws.prepared.len() != splats.len() {
        return Err(Error::ShapeMismatch(format!(
            "workspace holds {} splats, got {}",
            ws.prepared.len(),
            splats.len()
        )));
    }
    for (img, ch) in [(d_raw, 3), (d_toned, 3), (d_depth, 1)] {
        if img.width != ws.width || img.height != ws.height || img.channels != ch {
            return Err(Error::ShapeMismatch("upstream gradient image".into()));
        }
    }
    let locals: Vec<LocalGrads> = ws
        .tiles
        .par_iter()
        .map(|t| backward_tile(t, splats, &ws.prepared, d_raw, d_toned, d_depth))
        .collect();

    let n = splats.len();
    let mut out = SplatGrads::zeros(n);
    let mut conic = vec![[0.0; 3]; n];
    for (tile, g) in ws.tiles.iter().zip(&locals) {
        for (pos, &si) in tile.bin.iter().enumerate() {
            let si = si as usize;
            for c in 0..3 {
                out.color_raw[si][c] += g.raw[pos][c];
                out.color_toned[si][c] += g.toned[pos][c];
                conic[si][c] += g.conic[pos][c];
            }
            out.mean2d[si][0] += g.mean2d[pos][0];
            out.mean2d[si][1] += g.mean2d[pos][1];
            out.depth[si] += g.depth[pos];
            out.opacity[si] += g.opacity[pos];
        }
    }
    for si in 0..n {
        if ws.prepared[si].live {
            out.cov2d[si] = conic_to_cov_grad(splats[si].cov2d, conic[si]);
        }
    }
    Ok(out)
}
