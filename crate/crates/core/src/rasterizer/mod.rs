//! Depth-buffered triangle rasterization, visibility and per-vertex texture.

mod io;
mod raster;
mod texture;

pub use io::{read_png, write_pgm, write_png, write_ppm};
pub use raster::{
    occlusion_mask, raster_tables, rasterize, rasterize_scene, Occluder, OcclusionMask,
    ProjectedMesh, RasterBuffers, SceneBuffers, DEPTH_TIE,
};
pub use texture::{
    build_render, build_reverse_interpolate, build_texture_head, build_texture_loss,
    init_texture_head, render_colors, reverse_interpolate, texture_loss,
};
