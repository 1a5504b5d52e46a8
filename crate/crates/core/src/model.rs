//! The trainable model and its per-view render pipeline:
//! deform, region enhancement, projection, compositing, spatial curve.

use rand::Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::illumination::{
    region_enhance, region_enhance_backward, spatial_adjust, spatial_adjust_backward, ConcealingNetworks,
    IcLabel, RegionPass, SpatialNetwork,
};
use crate::image::Image;
use crate::nn::{MlpGrads, MlpTrace};
use crate::raster::{
    composite_backward, composite_forward, project, project_backward, CompositeOptions, RenderOutput, Splat2D,
    DEFAULT_NEAR_CLIP,
};
use crate::scene::{
    deform, deform_backward, DeformationField, DeformedGaussians, DeformedGrads, GaussianGrads, GaussianSet,
    IlluminationEmbeddings,
};

/// Everything a checkpoint stores besides the config echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gaussians: GaussianSet,
    pub field: DeformationField,
    pub embeddings: IlluminationEmbeddings,
    pub region: ConcealingNetworks,
    pub spatial: SpatialNetwork,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        gaussians: GaussianSet,
        field: DeformationField,
        views: usize,
        embed_dim: usize,
        embed_std: f64,
        rng: &mut R,
    ) -> Self {
        let embeddings = IlluminationEmbeddings::random(views, embed_dim, embed_std, rng);
        let region = ConcealingNetworks::new(embed_dim, rng);
        let spatial = SpatialNetwork::new(embed_dim, rng);
        Self {
            gaussians,
            field,
            embeddings,
            region,
            spatial,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.dim
    }

    /// Every trainable array in [`PARAM_GROUPS`] order.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<&[f64]>)> {
        let g = &self.gaussians;
        let f = &self.field;
        vec![
            ("means", vec![g.means.as_flattened()]),
            ("rotations", vec![g.rot_raw.as_flattened()]),
            ("scales", vec![g.log_scales.as_flattened()]),
            ("opacity", vec![&g.opacity_logits]),
            ("color", vec![g.color_logits.as_flattened()]),
            ("deformation", vec![&f.mean_coeffs, &f.scale_coeffs, &f.opacity_coeffs]),
            ("embeddings", vec![&self.embeddings.table]),
            ("bright_net", self.region.bright.param_slices()),
            ("dark_net", self.region.dark.param_slices()),
            ("spatial_net", self.spatial.net.param_slices()),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let g = &mut self.gaussians;
        let f = &mut self.field;
        let mut out: Vec<&mut [f64]> = vec![
            g.means.as_flattened_mut(),
            g.rot_raw.as_flattened_mut(),
            g.log_scales.as_flattened_mut(),
            &mut g.opacity_logits,
            g.color_logits.as_flattened_mut(),
            &mut f.mean_coeffs,
            &mut f.scale_coeffs,
            &mut f.opacity_coeffs,
            &mut self.embeddings.table,
        ];
        out.extend(self.region.bright.param_slices_mut());
        out.extend(self.region.dark.param_slices_mut());
        out.extend(self.spatial.net.param_slices_mut());
        out
    }

    /// Concatenation of [`Model::param_groups`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_groups().into_iter().flat_map(|(_, s)| s.concat()).collect()
    }

    /// Inverse of [`Model::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut slices = self.param_slices_mut();
        let total: usize = slices.iter().map(|s| s.len()).sum();
        if total != flat.len() {
            return Err(Error::DimMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for s in slices.iter_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    /// `(name, range)` of each group inside [`Model::flat_params`].
    pub fn group_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut at = 0;
        self.param_groups()
            .into_iter()
            .map(|(name, s)| {
                let len: usize = s.iter().map(|x| x.len()).sum();
                at += len;
                (name, at - len..at)
            })
            .collect()
    }
}

/// Parameter group names, in flat order.
pub const PARAM_GROUPS: [&str; 10] = [
    "means",
    "rotations",
    "scales",
    "opacity",
    "color",
    "deformation",
    "embeddings",
    "bright_net",
    "dark_net",
    "spatial_net",
];

/// Which illumination modules take part in a render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modules {
    pub embedding: bool,
    pub region: bool,
    pub spatial: bool,
}

impl Modules {
    pub const ALL: Modules = Modules {
        embedding: true,
        region: true,
        spatial: true,
    };
    pub const NONE: Modules = Modules {
        embedding: false,
        region: false,
        spatial: false,
    };
}

/// Per-view conditioning.
#[derive(Clone, Debug)]
pub struct ViewQuery<'a> {
    pub camera: &'a Camera,
    pub time: f64,
    pub label: IcLabel,
    /// Embedding row; ignored when the embedding module is off.
    pub embedding: &'a [f64],
}

/// Forward state of one view, sufficient for [`backward_view`].
#[derive(Clone, Debug)]
pub struct ViewForward {
    pub modules: Modules,
    pub time: f64,
    pub embedding: Vec<f64>,
    pub deformed: DeformedGaussians,
    pub colors: Vec<[f64; 3]>,
    pub region: Option<RegionPass>,
    pub splats: Vec<Splat2D>,
    pub render: RenderOutput,
    pub spatial: Option<(f64, MlpTrace)>,
    /// Final toned image, after the spatial curve when enabled.
    pub toned: Image,
}

pub fn forward_view(model: &Model, q: &ViewQuery, modules: Modules, keep_workspace: bool) -> Result<ViewForward> {
    let k = model.embed_dim();
    let embedding = if modules.embedding {
        if q.embedding.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                actual: q.embedding.len(),
            });
        }
        q.embedding.to_vec()
    } else {
        vec![0.0; k]
    };
    let deformed = deform(&model.gaussians, &model.field, q.time);
    let colors = model.gaussians.colors();
    let region = if modules.region {
        Some(region_enhance(&colors, &embedding, q.label, &model.region)?)
    } else {
        None
    };
    let toned_colors = region.as_ref().map(|r| r.toned.as_slice()).unwrap_or(&colors);
    let splats = project(&deformed, &colors, toned_colors, q.camera, DEFAULT_NEAR_CLIP);
    let render = composite_forward(
        &splats,
        q.camera.width,
        q.camera.height,
        CompositeOptions {
            keep_workspace,
            ..Default::default()
        },
    );
    let (toned, spatial) = if modules.spatial {
        let (img, delta, trace) = spatial_adjust(&render.color_toned, &embedding, &model.spatial)?;
        (img, Some((delta, trace)))
    } else {
        (render.color_toned.clone(), None)
    };
    Ok(ViewForward {
        modules,
        time: q.time,
        embedding,
        deformed,
        colors,
        region,
        splats,
        render,
        spatial,
        toned,
    })
}

/// Gradients of one view's loss with respect to every model parameter.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub gaussians: GaussianGrads,
    pub field: DeformationField,
    /// Gradient for the embedding row used by the view; zero when the
    /// embedding module is off.
    pub embedding: Vec<f64>,
    pub bright: MlpGrads,
    pub dark: MlpGrads,
    pub spatial: MlpGrads,
    /// Which concealing network the view used, if any.
    pub region_label: Option<IcLabel>,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        let n = model.gaussians.len();
        Self {
            gaussians: GaussianGrads::zeros(n),
            field: DeformationField::zeros(n, model.field.order),
            embedding: vec![0.0; model.embed_dim()],
            bright: MlpGrads::zeros_like(&model.region.bright),
            dark: MlpGrads::zeros_like(&model.region.dark),
            spatial: MlpGrads::zeros_like(&model.spatial.net),
            region_label: None,
        }
    }

    /// Gradient laid out like [`Model::flat_params`], with the embedding
    /// gradient placed at table row `row`.
    pub fn flat(&self, model: &Model, row: usize) -> Vec<f64> {
        let g = &self.gaussians;
        let f = &self.field;
        let k = model.embed_dim();
        let mut table = vec![0.0; model.embeddings.table.len()];
        table[row * k..(row + 1) * k].copy_from_slice(&self.embedding);
        let mut out = Vec::new();
        out.extend_from_slice(g.means.as_flattened());
        out.extend_from_slice(g.rot_raw.as_flattened());
        out.extend_from_slice(g.log_scales.as_flattened());
        out.extend_from_slice(&g.opacity_logits);
        out.extend_from_slice(g.color_logits.as_flattened());
        out.extend_from_slice(&f.mean_coeffs);
        out.extend_from_slice(&f.scale_coeffs);
        out.extend_from_slice(&f.opacity_coeffs);
        out.extend_from_slice(&table);
        for net in [&self.bright, &self.dark, &self.spatial] {
            for s in net.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }
}

/// Reverse mode of [`forward_view`]. `d_raw` reaches only the raw-color
/// composite; `d_toned` enters after the spatial curve.
pub fn backward_view(
    model: &Model,
    fwd: &ViewForward,
    camera: &Camera,
    d_raw: &Image,
    d_toned: &Image,
    d_depth: &Image,
) -> Result<ModelGrads> {
    let mut grads = ModelGrads::zeros(model);
    let mut d_embed = vec![0.0; model.embed_dim()];

    let d_toned_img = match &fwd.spatial {
        Some((delta, trace)) => {
            let (d_img, de) = spatial_adjust_backward(
                &fwd.render.color_toned,
                *delta,
                trace,
                d_toned,
                &model.spatial,
                &mut grads.spatial,
            )?;
            for (a, b) in d_embed.iter_mut().zip(&de) {
                *a += b;
            }
            d_img
        }
        None => d_toned.clone(),
    };

    let sg = composite_backward(&fwd.splats, &fwd.render, d_raw, &d_toned_img, d_depth)?;
    let n = model.gaussians.len();
    let mut d_colors = vec![[0.0; 3]; n];
    let mut d_toned_colors = vec![[0.0; 3]; n];
    for (s, splat) in fwd.splats.iter().enumerate() {
        for c in 0..3 {
            d_colors[splat.source][c] += sg.color_raw[s][c];
            d_toned_colors[splat.source][c] += sg.color_toned[s][c];
        }
    }
    match &fwd.region {
        Some(pass) => {
            let net_grads = match pass.label {
                IcLabel::Bright => &mut grads.bright,
                IcLabel::Dark => &mut grads.dark,
            };
            let de = region_enhance_backward(
                &fwd.colors,
                pass,
                &d_toned_colors,
                &model.region,
                net_grads,
                &mut d_colors,
            )?;
            for (a, b) in d_embed.iter_mut().zip(&de) {
                *a += b;
            }
            grads.region_label = Some(pass.label);
        }
        None => {
            for (a, b) in d_colors.iter_mut().zip(&d_toned_colors) {
                for c in 0..3 {
                    a[c] += b[c];
                }
            }
        }
    }

    let mut dg = DeformedGrads::zeros(n);
    project_backward(
        &fwd.deformed,
        camera,
        &fwd.splats,
        &sg.mean2d,
        &sg.cov2d,
        &sg.depth,
        &sg.opacity,
        &mut dg,
    );
    deform_backward(
        &model.gaussians,
        &model.field,
        fwd.time,
        &fwd.deformed,
        &dg,
        &mut grads.gaussians,
        &mut grads.field,
    );
    for i in 0..n {
        for c in 0..3 {
            let v = fwd.colors[i][c];
            grads.gaussians.color_logits[i][c] += d_colors[i][c] * v * (1.0 - v);
        }
    }
    if fwd.modules.embedding {
        grads.embedding = d_embed;
    }
    Ok(grads)
}
