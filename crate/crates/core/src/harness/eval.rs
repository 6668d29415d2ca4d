use std::path::Path;

use crate::autodiff::{Array, Graph};
use crate::camera::{CameraParams, CAMERA_DIM};
use crate::error::{Error, Result};
use crate::metrics::{image_metrics, MetricsAccumulator, MetricsReport};
use crate::rasterizer::{rasterize, render_colors, write_pgm, write_png, write_ppm};

use super::checkpoint::Checkpoint;
use super::model::{build_forward, build_texture_graph, ForwardNodes, TextureGraph};
use super::train::TextureInputs;
use super::{project_mesh, Dataset, SceneSample};

/// Point estimate for one image: the posterior mean and its joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub vertices: Array,
    pub joints: Array,
    pub camera: [f64; CAMERA_DIM],
    /// Texture-head colours from the ground-truth geometry, if trained.
    pub colors: Option<Array>,
    /// Texture rendering `[H, W, 3]` on the ground-truth geometry.
    pub texture_render: Option<Array>,
}

/// Inference graphs built once per checkpoint.
pub struct Predictor<'a> {
    ck: &'a Checkpoint,
    graph: Graph,
    nodes: ForwardNodes,
    tex: Option<TextureGraph>,
}

impl<'a> Predictor<'a> {
    pub fn new(ck: &'a Checkpoint) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = build_forward(&mut graph, &ck.config, &ck.template)?;
        let tex = if ck.config.texture {
            Some(build_texture_graph(&ck.config, &ck.template)?)
        } else {
            None
        };
        Ok(Self {
            ck,
            graph,
            nodes,
            tex,
        })
    }

    pub fn predict(&self, s: &SceneSample) -> Result<Prediction> {
        let img = s.image_chw();
        let mut b = self.ck.params.bindings();
        b.insert("image", &img);
        let vals = self.graph.forward(&b)?;
        let mut camera = [0.0; CAMERA_DIM];
        camera.copy_from_slice(vals.get(self.nodes.camera.mean).data());
        let (mut colors, mut texture_render) = (None, None);
        if let Some(tex) = &self.tex {
            let ti = TextureInputs::new(&self.ck.template, s)?;
            let f = vals.get(self.nodes.encoder.f).clone();
            let fmap = vals.get(self.nodes.encoder.fmap).clone();
            let mut tb = self.ck.params.bindings();
            ti.bind(&mut tb, &f, &fmap);
            let tv = tex.graph.forward(&tb)?;
            colors = Some(tv.get(tex.colors).clone());
            texture_render =
                Some(
                    tv.get(tex.rendered)
                        .clone()
                        .reshaped(&[s.size(), s.size(), 3])?,
                );
        }
        Ok(Prediction {
            vertices: vals.get(self.nodes.q.mean).clone(),
            joints: vals.get(self.nodes.joints).clone(),
            camera,
            colors,
            texture_render,
        })
    }
}

/// Fails unless `data` was rendered from the checkpoint's template at its image size.
pub fn check_compatible(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if data.template != ck.template {
        return Err(Error::Compatibility(format!(
            "dataset template ({} vertices, {} joints) differs from checkpoint template ({} vertices, {} joints)",
            data.template.vertex_count, data.template.joint_count, ck.template.vertex_count, ck.template.joint_count
        )));
    }
    if let Some(s) = data.samples.first() {
        if s.size() != ck.config.image_size {
            return Err(Error::Compatibility(format!(
                "dataset images are {}px, checkpoint expects {}px",
                s.size(),
                ck.config.image_size
            )));
        }
    }
    Ok(())
}

fn write_renders(
    dir: &Path,
    i: usize,
    ck: &Checkpoint,
    s: &SceneSample,
    p: &Prediction,
) -> Result<()> {
    let size = s.size();
    let pm = project_mesh(
        &ck.template,
        &p.vertices,
        &CameraParams::from_vector(&p.camera),
        size,
    );
    let buf = rasterize(&pm, size, size);
    let colors = p
        .colors
        .clone()
        .unwrap_or_else(|| Array::full(&[ck.template.vertex_count, 3], 0.8));
    write_ppm(
        dir.join(format!("pred_{i:04}.ppm")),
        &render_colors(&buf, &ck.template.faces, &colors)?,
    )?;
    write_pgm(
        dir.join(format!("mask_{i:04}.pgm")),
        &s.visibility.mask,
        size,
        size,
    )?;
    if let Some(r) = &p.texture_render {
        write_png(dir.join(format!("texture_{i:04}.png")), r)?;
    }
    Ok(())
}

/// Procrustes-aligned pose and mesh errors over the dataset, plus masked
/// PSNR/SSIM of the texture branch when the checkpoint has one (zero otherwise).
pub fn evaluate(
    ck: &Checkpoint,
    data: &Dataset,
    render_dir: Option<&Path>,
) -> Result<MetricsReport> {
    check_compatible(ck, data)?;
    if data.samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    if let Some(d) = render_dir {
        std::fs::create_dir_all(d)?;
    }
    let predictor = Predictor::new(ck)?;
    let mut acc = MetricsAccumulator::new();
    for (i, s) in data.samples.iter().enumerate() {
        let p = predictor.predict(s)?;
        acc.add_geometry(
            &p.joints,
            &s.target.joints3d,
            &p.vertices,
            &s.target.vertices,
            ck.config.mm_per_unit,
        )?;
        if let Some(r) = &p.texture_render {
            if s.visibility.mask.iter().any(|&m| m) {
                let (psnr, ssim) = image_metrics(r, &s.image, &s.visibility.mask)?;
                acc.add_image(psnr, ssim);
            }
        }
        if let Some(d) = render_dir {
            write_renders(d, i, ck, s, &p)?;
        }
    }
    Ok(acc.report())
}
