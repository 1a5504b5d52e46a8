//! Screen-space projection and tile-based compositing.

mod composite;
mod project;

pub use composite::{
    composite_backward, composite_forward, depth_order, CompositeOptions, RenderOutput, SplatGrads, Workspace,
    ALPHA_MAX, ALPHA_MIN, TILE_SIZE, TRANSMITTANCE_MIN,
};
pub use project::{project, project_backward, Splat2D, COV_DILATION, DEFAULT_NEAR_CLIP};
