//! Optimization loop, parameter groups and test-time embedding selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use nalgebra::Vector3;

use crate::config::TrainConfig;
use crate::data_io::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::illumination::IcLabel;
use crate::image::Image;
use crate::losses::{color_loss, depth_loss, exposure_loss, total_loss, LossBreakdown, LossTerm};
use crate::metrics::psnr;
use crate::model::{backward_view, forward_view, Model, ModelGrads, Modules, ViewForward, ViewQuery};
use crate::nn::{Mlp, MlpGrads};
use crate::optim::{AdamConfig, AdamState};
use crate::scene::{densify_and_prune, init_from_depth, DensifyConfig, DensifyOutcome};

const G_MEANS: usize = 0;
const G_ROT: usize = 1;
const G_SCALE: usize = 2;
const G_OPACITY: usize = 3;
const G_COLOR: usize = 4;
const G_MEAN_COEFFS: usize = 5;
const G_SCALE_COEFFS: usize = 6;
const G_OPACITY_COEFFS: usize = 7;
const G_EMBED: usize = 8;
const G_NETS: usize = 9;

/// Training frames whose mean is closest to `target` win; ties go to the
/// earliest frame.
fn closest_to_target(data: &Dataset, target: f64) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (row, f) in data.train_frames().enumerate() {
        let err = (f.image.mean() - target).abs();
        if err < best_err {
            best = row;
            best_err = err;
        }
    }
    best
}

/// Embedding row of the normal-exposure reference frame.
pub fn reference_row(cfg: &TrainConfig, data: &Dataset) -> Result<usize> {
    match cfg.reference_frame {
        Some(fi) => data
            .train_idx()
            .iter()
            .position(|&i| i == fi)
            .ok_or_else(|| Error::BadConfig(format!("reference_frame {fi} is not a training frame"))),
        None => Ok(closest_to_target(data, cfg.loss.exposure_target)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    Correction,
    Reconstruction,
    Zero,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correction" => Ok(Self::Correction),
            "reconstruction" => Ok(Self::Reconstruction),
            "zero" => Ok(Self::Zero),
            _ => Err(Error::BadConfig(format!("unknown embedding mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingChoice {
    /// Training row the vector came from; `None` in zero mode.
    pub row: Option<usize>,
    pub vector: Vec<f64>,
    /// IC label of the source frame, selecting the concealing network.
    pub label: IcLabel,
}

/// Picks the embedding used to render a view at `query_time`.
pub fn select_embedding(
    mode: EmbeddingMode,
    model: &Model,
    data: &Dataset,
    reference: usize,
    query_time: f64,
) -> Result<EmbeddingChoice> {
    let views = model.embeddings.views();
    if views == 0 || views != data.train_idx().len() {
        return Err(Error::NoTrainedEmbeddings);
    }
    let row = match mode {
        EmbeddingMode::Zero => {
            return Ok(EmbeddingChoice {
                row: None,
                vector: vec![0.0; model.embed_dim()],
                label: IcLabel::Dark,
            })
        }
        EmbeddingMode::Correction => reference,
        EmbeddingMode::Reconstruction => {
            let mut best = 0;
            let mut best_dt = f64::INFINITY;
            for (r, f) in data.train_frames().enumerate() {
                let dt = (f.time - query_time).abs();
                if dt < best_dt {
                    best = r;
                    best_dt = dt;
                }
            }
            best
        }
    };
    if row >= views {
        return Err(Error::NoTrainedEmbeddings);
    }
    Ok(EmbeddingChoice {
        row: Some(row),
        vector: model.embeddings.row(row).to_vec(),
        label: data.frames[data.train_idx()[row]].ic,
    })
}

/// Renders dataset frame `index` under `mode`. Zero mode returns the raw
/// color render; the other modes return the final toned image.
pub fn render_frame(
    model: &Model,
    data: &Dataset,
    modules: Modules,
    reference: usize,
    mode: EmbeddingMode,
    index: usize,
) -> Result<Image> {
    let frame = &data.frames[index];
    let choice = select_embedding(mode, model, data, reference, frame.time)?;
    let modules = if mode == EmbeddingMode::Zero { Modules::NONE } else { modules };
    let q = ViewQuery {
        camera: &frame.camera,
        time: frame.time,
        label: choice.label,
        embedding: &choice.vector,
    };
    let fwd = forward_view(model, &q, modules, false)?;
    Ok(if mode == EmbeddingMode::Zero {
        fwd.render.color_raw
    } else {
        fwd.toned
    })
}

/// Radius of the point set around its centroid.
fn point_extent(points: &[[f64; 3]]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    points
        .iter()
        .map(|p| (Vector3::from(*p) - c).norm())
        .fold(0.0, f64::max)
        .max(1e-6)
}

fn net_group_lens(net: &Mlp) -> Vec<usize> {
    net.param_slices().iter().map(|s| s.len()).collect()
}

/// Depth is supervised where the mask is on and the target depth is valid.
fn depth_mask(frame: &Frame) -> Image {
    let mut m = frame.mask.clone();
    for (mv, d) in m.data.iter_mut().zip(&frame.depth.data) {
        if !(*d > 0.0) {
            *mv = 0.0;
        }
    }
    m
}

struct ScoredView {
    fwd: ViewForward,
    color: LossTerm,
    depth: LossTerm,
    exposure: Option<LossTerm>,
    loss: LossBreakdown,
}

/// Mutable optimizer state over one dataset.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub extent: f64,
    pub iter: usize,
    pub reference: usize,
    adam: AdamState,
    rng: ChaCha8Rng,
    depth_masks: Vec<Image>,
    /// Dataset index → embedding row.
    rows: Vec<Option<usize>>,
    grad_sum: Vec<f64>,
    grad_hits: Vec<u32>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reference = reference_row(&cfg, data)?;
        let ref_frame = &data.frames[data.train_idx()[reference]];
        let (set, field) = init_from_depth(ref_frame, cfg.init_stride, cfg.deform_order)?;
        let extent = point_extent(&set.means);
        let views = data.train_idx().len();
        let model = Model::new(set, field, views, cfg.embed_dim, cfg.embed_init_std, &mut rng);
        let mut rows = vec![None; data.frames.len()];
        for (r, &i) in data.train_idx().iter().enumerate() {
            rows[i] = Some(r);
        }
        let adam = AdamState::new(
            AdamConfig {
                eps: cfg.adam_eps,
                ..AdamConfig::default()
            },
            &Self::group_lens(&model),
        );
        let n = model.gaussians.len();
        Ok(Self {
            depth_masks: data.frames.iter().map(depth_mask).collect(),
            cfg,
            data,
            model,
            extent,
            iter: 0,
            reference,
            adam,
            rng,
            rows,
            grad_sum: vec![0.0; n],
            grad_hits: vec![0; n],
        })
    }

    /// Installs `model` with fresh optimizer moments; the view count must match.
    pub fn set_model(&mut self, model: Model) -> Result<()> {
        let views = self.data.train_idx().len();
        if model.embeddings.views() != views {
            return Err(Error::DimMismatch {
                expected: views,
                actual: model.embeddings.views(),
            });
        }
        self.adam = AdamState::new(self.adam.config, &Self::group_lens(&model));
        let n = model.gaussians.len();
        self.grad_sum = vec![0.0; n];
        self.grad_hits = vec![0; n];
        self.model = model;
        Ok(())
    }

    fn group_lens(model: &Model) -> Vec<usize> {
        let g = &model.gaussians;
        let f = &model.field;
        let n = g.len();
        let mut lens = vec![
            n * 3,
            n * 4,
            n * 3,
            n,
            n * 3,
            f.mean_coeffs.len(),
            f.scale_coeffs.len(),
            f.opacity_coeffs.len(),
            model.embeddings.table.len(),
        ];
        lens.extend(net_group_lens(&model.region.bright));
        lens.extend(net_group_lens(&model.region.dark));
        lens.extend(net_group_lens(&model.spatial.net));
        lens
    }

    /// Random generator shared by shuffling and densification.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Embedding row of dataset frame `index`.
    pub fn row_of(&self, index: usize) -> Result<usize> {
        self.rows
            .get(index)
            .copied()
            .flatten()
            .ok_or_else(|| Error::BadConfig(format!("frame {index} is not a training frame")))
    }

    fn forward_losses(&self, index: usize, keep_workspace: bool) -> Result<ScoredView> {
        let frame = &self.data.frames[index];
        let row = self.row_of(index)?;
        let q = ViewQuery {
            camera: &frame.camera,
            time: frame.time,
            label: frame.ic,
            embedding: self.model.embeddings.row(row),
        };
        let fwd = forward_view(&self.model, &q, self.cfg.modules(), keep_workspace)?;
        let lw = &self.cfg.loss;
        let color = color_loss(&fwd.toned, &frame.image, &frame.mask, lw)?;
        let depth = depth_loss(&fwd.render.depth, &frame.depth, &self.depth_masks[index], lw)?;
        let exposure = if self.cfg.use_exposure_loss {
            Some(exposure_loss(&fwd.render.color_raw, lw)?)
        } else {
            None
        };
        let loss = total_loss(color.value, depth.value, exposure.as_ref().map(|t| t.value));
        Ok(ScoredView {
            fwd,
            color,
            depth,
            exposure,
            loss,
        })
    }

    /// Loss of dataset frame `index`, forward pass only.
    pub fn loss(&self, index: usize) -> Result<LossBreakdown> {
        Ok(self.forward_losses(index, false)?.loss)
    }

    /// Loss and gradients of dataset frame `index` without updating.
    pub fn evaluate(&self, index: usize) -> Result<(LossBreakdown, ModelGrads)> {
        let s = self.forward_losses(index, true)?;
        let frame = &self.data.frames[index];
        let d_raw = match s.exposure {
            Some(t) => t.grad,
            None => Image::zeros(frame.image.width, frame.image.height, 3),
        };
        let grads = backward_view(&self.model, &s.fwd, &frame.camera, &d_raw, &s.color.grad, &s.depth.grad)?;
        Ok((s.loss, grads))
    }

    /// One optimization step on dataset frame `index`.
    pub fn step(&mut self, index: usize) -> Result<LossBreakdown> {
        let (loss, grads) = self.evaluate(index)?;
        let row = self.row_of(index)?;
        for (i, g) in grads.gaussians.means.iter().enumerate() {
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if norm > 0.0 {
                self.grad_sum[i] += norm;
                self.grad_hits[i] += 1;
            }
        }
        self.apply(&grads, row)?;
        self.iter += 1;
        Ok(loss)
    }

    fn apply(&mut self, grads: &ModelGrads, row: usize) -> Result<()> {
        let cfg = &self.cfg;
        let adam = &mut self.adam;
        let m = &mut self.model;
        adam.begin_step();
        let g = &grads.gaussians;
        adam.update(
            G_MEANS,
            cfg.lr_means * self.extent,
            m.gaussians.means.as_flattened_mut(),
            g.means.as_flattened(),
        )?;
        adam.update(G_ROT, cfg.lr_rot, m.gaussians.rot_raw.as_flattened_mut(), g.rot_raw.as_flattened())?;
        adam.update(
            G_SCALE,
            cfg.lr_scale,
            m.gaussians.log_scales.as_flattened_mut(),
            g.log_scales.as_flattened(),
        )?;
        adam.update(G_OPACITY, cfg.lr_opacity, &mut m.gaussians.opacity_logits, &g.opacity_logits)?;
        adam.update(
            G_COLOR,
            cfg.lr_color,
            m.gaussians.color_logits.as_flattened_mut(),
            g.color_logits.as_flattened(),
        )?;
        if self.iter >= cfg.warmup_static_iters {
            adam.update(G_MEAN_COEFFS, cfg.lr_deform, &mut m.field.mean_coeffs, &grads.field.mean_coeffs)?;
            adam.update(G_SCALE_COEFFS, cfg.lr_deform, &mut m.field.scale_coeffs, &grads.field.scale_coeffs)?;
            adam.update(
                G_OPACITY_COEFFS,
                cfg.lr_deform,
                &mut m.field.opacity_coeffs,
                &grads.field.opacity_coeffs,
            )?;
        }
        if cfg.use_embedding && (cfg.use_region || cfg.use_spatial) {
            let mut table = vec![0.0; m.embeddings.table.len()];
            let k = m.embeddings.dim;
            table[row * k..(row + 1) * k].copy_from_slice(&grads.embedding);
            adam.update(G_EMBED, cfg.lr_embed, &mut m.embeddings.table, &table)?;
        }
        let nb = m.region.bright.layers.len() * 2;
        let nd = m.region.dark.layers.len() * 2;
        let update_net = |adam: &mut AdamState, base: usize, net: &mut Mlp, ng: &MlpGrads| -> Result<()> {
            for (j, (p, gr)) in net.param_slices_mut().into_iter().zip(ng.slices()).enumerate() {
                adam.update(base + j, cfg.lr_nets, p, gr)?;
            }
            Ok(())
        };
        match grads.region_label {
            Some(IcLabel::Bright) => update_net(adam, G_NETS, &mut m.region.bright, &grads.bright)?,
            Some(IcLabel::Dark) => update_net(adam, G_NETS + nb, &mut m.region.dark, &grads.dark)?,
            None => {}
        }
        if cfg.use_spatial {
            update_net(adam, G_NETS + nb + nd, &mut m.spatial.net, &grads.spatial)?;
        }
        Ok(())
    }

    /// Clones, splits and prunes on the accumulated mean-gradient norms.
    pub fn densify(&mut self) -> DensifyOutcome {
        let avg: Vec<f64> = self
            .grad_sum
            .iter()
            .zip(&self.grad_hits)
            .map(|(s, &h)| if h > 0 { s / h as f64 } else { 0.0 })
            .collect();
        let dcfg = DensifyConfig {
            grad_threshold: self.cfg.densify_grad_threshold,
            prune_opacity: self.cfg.prune_opacity,
            percent_dense: self.cfg.percent_dense,
            scene_extent: self.extent,
            ..DensifyConfig::default()
        };
        let out = densify_and_prune(
            &mut self.model.gaussians,
            &mut self.model.field,
            &avg,
            &dcfg,
            &mut self.rng,
        );
        let k = self.model.field.basis_len();
        let strides = [3, 4, 3, 1, 3, 3 * k, 3 * k, k];
        for (gi, stride) in strides.into_iter().enumerate() {
            self.adam.groups[gi].remap_rows(stride, &out.sources);
        }
        let n = self.model.gaussians.len();
        self.grad_sum = vec![0.0; n];
        self.grad_hits = vec![0; n];
        out
    }

    /// Mean masked PSNR over dataset frames `indices`, reconstruction mode.
    pub fn psnr_over(&self, indices: &[usize]) -> Result<f64> {
        mean_psnr(&self.model, self.data, self.cfg.modules(), self.reference, indices)
    }
}

/// Mean masked PSNR of reconstruction-mode renders against the observed
/// images of `indices`.
pub fn mean_psnr(model: &Model, data: &Dataset, modules: Modules, reference: usize, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for &i in indices {
        let img = render_frame(model, data, modules, reference, EmbeddingMode::Reconstruction, i)?;
        let f = &data.frames[i];
        acc += psnr(&img, &f.image, Some(&f.mask))?;
    }
    Ok(acc / indices.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.iter, self.loss.color, self.loss.depth, self.loss.exposure, self.loss.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reference: usize,
    pub log: Vec<LogRow>,
    /// `(iteration, held-out PSNR)`.
    pub evals: Vec<(usize, f64)>,
    pub densify: Vec<(usize, DensifyOutcome)>,
}

impl TrainOutcome {
    pub fn log_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&r.to_tsv());
            s.push('\n');
        }
        s
    }
}

/// Runs `cfg.iterations` steps cycling the training frames in one seeded
/// shuffled order.
pub fn train_loop(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_loop_with(cfg, data, |_| {})
}

/// [`train_loop`] with a callback after every logged step.
pub fn train_loop_with(cfg: &TrainConfig, data: &Dataset, mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone(), data)?;
    let mut order = data.train_idx().to_vec();
    order.shuffle(tr.rng());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();
    let mut densify = Vec::new();
    let until = (cfg.densify_until * cfg.iterations as f64).floor() as usize;
    for it in 0..cfg.iterations {
        let fi = order[it % order.len()];
        let loss = tr.step(fi)?;
        let row = LogRow { iter: it, loss };
        on_step(&row);
        log.push(row);
        let done = it + 1;
        if cfg.densify_interval > 0 && done % cfg.densify_interval == 0 && done <= until {
            densify.push((done, tr.densify()));
        }
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && !data.test_idx().is_empty() {
            evals.push((done, tr.psnr_over(data.test_idx())?));
        }
    }
    Ok(TrainOutcome {
        model: tr.model,
        reference: tr.reference,
        log,
        evals,
        densify,
    })
}
