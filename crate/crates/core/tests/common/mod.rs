#![allow(dead_code)]

use std::path::Path;

use illumsplat::config::TrainConfig;
use illumsplat::data_io::{load_dataset, synth_frames, write_dataset, Dataset, SynthSpec};
use illumsplat::gradcheck::{finite_diff_check, GradCheckReport};
use illumsplat::illumination::IcLabel;
use illumsplat::nn::{Activation, Layer};
use illumsplat::scene::{DeformationField, GaussianSet};
use illumsplat::model::Model;
use illumsplat::trainer::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a synthetic dataset with every frame in the training split.
pub fn all_train_dataset(root: &Path, spec: &SynthSpec, seed: u64) -> Dataset {
    let frames = synth_frames(spec, seed).unwrap();
    let train = (0..frames.len()).collect();
    write_dataset(root, &frames, spec.depth_scale, train, vec![], None).unwrap();
    load_dataset(root).unwrap()
}

/// Default synthetic dataset (default split) under `root`.
pub fn synth(root: &Path, spec: &SynthSpec, seed: u64) -> Dataset {
    illumsplat::data_io::synth_dataset(spec, seed, root).unwrap();
    load_dataset(root).unwrap()
}

/// Five overlapping Gaussians in front of the synthetic camera, with
/// random deformation, embeddings and networks (spatial output layer
/// included, so every group carries gradient).
pub fn gradcheck_model(views: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let mut g = GaussianSet {
        means: Vec::new(),
        rot_raw: Vec::new(),
        log_scales: Vec::new(),
        opacity_logits: Vec::new(),
        color_logits: Vec::new(),
    };
    for _ in 0..n {
        g.means.push([rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(1.8..2.3)]);
        let q: [f64; 4] = [1.0, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        g.rot_raw.push(q);
        g.log_scales.push([
            rng.gen_range(-1.4..-0.9),
            rng.gen_range(-1.4..-0.9),
            rng.gen_range(-1.4..-0.9),
        ]);
        g.opacity_logits.push(rng.gen_range(-0.8..0.8));
        g.color_logits.push([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
    }
    let mut field = DeformationField::zeros(n, 2);
    for c in field
        .mean_coeffs
        .iter_mut()
        .chain(field.scale_coeffs.iter_mut())
        .chain(field.opacity_coeffs.iter_mut())
    {
        *c = rng.gen_range(-0.05..0.05);
    }
    let mut model = Model::new(g, field, views, 32, 0.5, &mut rng);
    let last = model.spatial.net.layers.last_mut().unwrap();
    *last = Layer::random(last.in_dim, 1, Activation::Tanh, &mut rng);
    model
}

pub struct GroupCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Central-difference check of the summed total loss over every training
/// frame, per parameter group.
pub fn check_model_gradients(tr: &mut Trainer, h: f64, tol: f64) -> Vec<GroupCheck> {
    let frames: Vec<usize> = tr.data.train_idx().to_vec();
    let mut analytic = vec![0.0; tr.model.flat_params().len()];
    for &f in &frames {
        let (_, g) = tr.evaluate(f).unwrap();
        let row = tr.row_of(f).unwrap();
        for (a, b) in analytic.iter_mut().zip(g.flat(&tr.model, row)) {
            *a += b;
        }
    }
    let mut params = tr.model.flat_params();
    let ranges = tr.model.group_ranges();
    let mut out = Vec::new();
    for (name, range) in ranges {
        let idx: Vec<usize> = range.collect();
        let report = finite_diff_check(
            |p| {
                tr.model.set_flat_params(p).unwrap();
                frames.iter().map(|&f| tr.loss(f).unwrap().total).sum()
            },
            &mut params,
            &analytic,
            h,
            Some(&idx),
            tol,
        );
        out.push(GroupCheck { name, report });
    }
    tr.model.set_flat_params(&params).unwrap();
    out
}

/// Three-frame 16×16 scene whose frames use both concealing networks.
pub fn gradcheck_trainer<'a>(data: &'a mut Dataset) -> (TrainConfig, Vec<IcLabel>) {
    let labels = vec![IcLabel::Bright, IcLabel::Dark, IcLabel::Bright];
    for (f, l) in data.frames.iter_mut().zip(&labels) {
        f.ic = *l;
    }
    let cfg = TrainConfig {
        init_stride: 4,
        ..TrainConfig::default()
    };
    (cfg, labels)
}

pub fn gradcheck_spec() -> SynthSpec {
    SynthSpec {
        frames: 3,
        width: 16,
        height: 16,
        ..SynthSpec::default()
    }
}
