use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::camera::{project_weak_perspective, CameraParams, CAMERA_DIM};
use crate::error::{Error, Result};
use crate::hand_prior::{lbs_forward, HandTemplate};
use crate::problosses::SupervisedTarget;
use crate::rasterizer::{
    occlusion_mask, rasterize_scene, read_png, render_colors, write_pgm, write_png, Occluder,
    OcclusionMask, ProjectedMesh, SceneBuffers,
};

use super::RunConfig;

pub const BACKGROUND: f64 = 0.1;
const DATASET_FILE: &str = "dataset.json";
const DATASET_VERSION: u32 = 1;

/// Normalized image coordinates (`x` right, `y` up, both in `[-1, 1]`) to
/// pixel positions with `y` down.
pub fn ndc_to_pixels(points: &Array, height: usize, width: usize) -> Array {
    let mut out = points.clone();
    for i in 0..points.rows() {
        out.set(i, 0, (points.get(i, 0) + 1.0) * width as f64 / 2.0);
        out.set(i, 1, (1.0 - points.get(i, 1)) * height as f64 / 2.0);
    }
    out
}

/// Screen-space mesh of `vertices` seen through `cam`.
pub fn project_mesh(
    t: &HandTemplate,
    vertices: &Array,
    cam: &CameraParams,
    size: usize,
) -> ProjectedMesh {
    let (p2, depths) = project_weak_perspective(vertices, cam);
    ProjectedMesh {
        verts2d: ndc_to_pixels(&p2, size, size),
        depths,
        faces: t.faces.clone(),
    }
}

/// One training tuple with its rendering ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]`, quantized to 8 bits.
    pub image: Array,
    pub target: SupervisedTarget,
    /// `[V, 3]`
    pub colors: Array,
    pub occluders: Vec<Occluder>,
    pub occluder_colors: Vec<[f64; 3]>,
    pub shape: Vec<f64>,
    /// `[K, 3]`
    pub pose: Array,
    /// Visible hand pixels and vertices.
    pub visibility: OcclusionMask,
}

impl SceneSample {
    pub fn camera(&self) -> CameraParams {
        CameraParams::from_vector(&self.target.camera)
    }

    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn scene(&self, t: &HandTemplate) -> SceneBuffers {
        let pm = project_mesh(t, &self.target.vertices, &self.camera(), self.size());
        rasterize_scene(&pm, self.size(), self.size(), &self.occluders)
    }

    /// Ground-truth vertex positions in pixels, `[V, 2]`.
    pub fn vertex_pixels(&self) -> Array {
        let (p2, _) = project_weak_perspective(&self.target.vertices, &self.camera());
        ndc_to_pixels(&p2, self.size(), self.size())
    }

    /// Image as `[3, H, W]` for the encoder.
    pub fn image_chw(&self) -> Array {
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        let d = self.image.data();
        let mut out = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                out[c * h * w + i] = d[3 * i + c];
            }
        }
        Array::new(vec![3, h, w], out).expect("image shape")
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn compose(
    t: &HandTemplate,
    scene: &SceneBuffers,
    colors: &Array,
    occluders: &[Occluder],
    occ_colors: &[[f64; 3]],
) -> Result<Array> {
    let (h, w) = (scene.hand.height, scene.hand.width);
    let hand = render_colors(&scene.hand, &t.faces, colors)?;
    let mut img = hand.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb: [f64; 3] = if scene.hand.tri_id[i] >= 0 {
                [img[3 * i], img[3 * i + 1], img[3 * i + 2]]
            } else if scene.occluder[i] {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let front = occluders
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.covers(px, py))
                    .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
                    .map(|(k, _)| k)
                    .expect("occluder pixel has a covering box");
                occ_colors[front]
            } else {
                [BACKGROUND; 3]
            };
            for c in 0..3 {
                img[3 * i + c] = quantize(rgb[c]);
            }
        }
    }
    Ok(Array::new(vec![h, w, 3], img)?)
}

fn random_camera<R: Rng>(rng: &mut R, vertices: &Array) -> CameraParams {
    let tilt = Normal::new(0.0, 0.3).expect("std");
    let rotation = [
        tilt.sample(rng),
        tilt.sample(rng),
        rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
    ];
    let unit = CameraParams {
        scale: 1.0,
        rotation,
        translation: [0.0; 3],
    };
    let (p, _) = project_weak_perspective(vertices, &unit);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..p.rows() {
        for c in 0..2 {
            lo[c] = lo[c].min(p.get(i, c));
            hi[c] = hi[c].max(p.get(i, c));
        }
    }
    let half = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = rng.random_range(0.7..0.9) / half;
    let mut translation = [0.0; 3];
    for c in 0..2 {
        translation[c] = -scale * 0.5 * (lo[c] + hi[c]) + rng.random_range(-0.05..0.05);
    }
    CameraParams {
        scale,
        rotation,
        translation,
    }
}

fn random_colors<R: Rng>(rng: &mut R, rest: &Array) -> Array {
    let freq = Normal::new(0.0, 3.0).expect("std");
    let mut coeffs = [[0.0; 4]; 3];
    for c in coeffs.iter_mut() {
        *c = [
            freq.sample(rng),
            freq.sample(rng),
            freq.sample(rng),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
    }
    let mut out = Array::zeros(&[rest.rows(), 3]);
    for i in 0..rest.rows() {
        let p = rest.row(i);
        for (ch, k) in coeffs.iter().enumerate() {
            out.set(
                i,
                ch,
                0.55 + 0.35 * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + k[3]).sin(),
            );
        }
    }
    out
}

fn random_occluders<R: Rng>(
    rng: &mut R,
    max: usize,
    size: usize,
    depths: &[f64],
) -> (Vec<Occluder>, Vec<[f64; 3]>) {
    let n = rng.random_range(0..=max);
    let near = depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let s = size as f64;
    let mut boxes = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for k in 0..n {
        let (bw, bh) = (
            rng.random_range(0.15..0.35) * s,
            rng.random_range(0.15..0.35) * s,
        );
        let (x0, y0) = (rng.random_range(0.0..s - bw), rng.random_range(0.0..s - bh));
        boxes.push(Occluder {
            x0,
            y0,
            x1: x0 + bw,
            y1: y0 + bh,
            depth: near - 1.0 - k as f64,
        });
        colors.push([
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
        ]);
    }
    (boxes, colors)
}

/// Draws `n` random scenes. The same `(config, n, seed)` always yields the
/// same samples, bit for bit.
pub fn generate_synthetic(
    config: &RunConfig,
    t: &HandTemplate,
    n: usize,
    seed: u64,
) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_d = Normal::new(0.0, config.shape_std).map_err(|e| Error::Config(e.to_string()))?;
    let pose_d = Normal::new(0.0, config.pose_std).map_err(|e| Error::Config(e.to_string()))?;
    let size = config.image_size;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let shape: Vec<f64> = (0..t.shape_count())
            .map(|_| shape_d.sample(&mut rng))
            .collect();
        let mut pose = Array::zeros(&[t.joint_count, 3]);
        for k in 1..t.joint_count {
            for c in 0..3 {
                pose.set(k, c, pose_d.sample(&mut rng));
            }
        }
        let (vertices, joints3d) = lbs_forward(t, &shape, &pose)?;
        let cam = random_camera(&mut rng, &vertices);
        let colors = random_colors(&mut rng, &t.template_vertices);
        let pm = project_mesh(t, &vertices, &cam, size);
        let (occluders, occluder_colors) =
            random_occluders(&mut rng, config.max_occluders, size, &pm.depths);
        let scene = rasterize_scene(&pm, size, size, &occluders);
        let image = compose(t, &scene, &colors, &occluders, &occluder_colors)?;
        let (joints2d, _) = project_weak_perspective(&joints3d, &cam);
        let visibility = occlusion_mask(&scene.hand, &t.faces, t.vertex_count);
        out.push(SceneSample {
            image,
            target: SupervisedTarget {
                vertices,
                joints3d,
                joints2d,
                camera: cam.to_vector(),
            },
            colors,
            occluders,
            occluder_colors,
            shape,
            pose,
            visibility,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    image: String,
    vertices: Vec<f64>,
    joints3d: Vec<f64>,
    joints2d: Vec<f64>,
    camera: Vec<f64>,
    colors: Vec<f64>,
    occluders: Vec<Occluder>,
    occluder_colors: Vec<[f64; 3]>,
    shape: Vec<f64>,
    pose: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    image_size: usize,
    template: serde_json::Value,
    samples: Vec<SampleRecord>,
}

/// A generated dataset together with the template it was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub template: HandTemplate,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Writes `dataset.json`, one PNG per image and one PGM per visibility mask.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::with_capacity(self.samples.len());
        let size = self.samples.first().map_or(0, |s| s.size());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("image_{i:04}.png");
            write_png(dir.join(&name), &s.image)?;
            write_pgm(
                dir.join(format!("mask_{i:04}.pgm")),
                &s.visibility.mask,
                size,
                size,
            )?;
            records.push(SampleRecord {
                image: name,
                vertices: s.target.vertices.data().to_vec(),
                joints3d: s.target.joints3d.data().to_vec(),
                joints2d: s.target.joints2d.data().to_vec(),
                camera: s.target.camera.to_vec(),
                colors: s.colors.data().to_vec(),
                occluders: s.occluders.clone(),
                occluder_colors: s.occluder_colors.clone(),
                shape: s.shape.clone(),
                pose: s.pose.data().to_vec(),
            });
        }
        let file = DatasetFile {
            version: DATASET_VERSION,
            image_size: size,
            template: serde_json::from_str(&self.template.to_json())?,
            samples: records,
        };
        std::fs::write(dir.join(DATASET_FILE), serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file: DatasetFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_FILE))?)?;
        if file.version != DATASET_VERSION {
            return Err(Error::Compatibility(format!(
                "dataset version {}",
                file.version
            )));
        }
        let t = HandTemplate::from_json(&file.template.to_string())?;
        let (v, k) = (t.vertex_count, t.joint_count);
        let arr = |shape: Vec<usize>, data: Vec<f64>| Array::new(shape, data).map_err(Error::from);
        let mut samples = Vec::with_capacity(file.samples.len());
        for r in file.samples {
            let image = read_png(dir.join(&r.image))?;
            if image.shape() != [file.image_size, file.image_size, 3] {
                return Err(Error::Validation(format!(
                    "{} has shape {:?}",
                    r.image,
                    image.shape()
                )));
            }
            if r.camera.len() != CAMERA_DIM {
                return Err(Error::Validation(format!(
                    "camera of length {}",
                    r.camera.len()
                )));
            }
            let mut camera = [0.0; CAMERA_DIM];
            camera.copy_from_slice(&r.camera);
            let mut s = SceneSample {
                image,
                target: SupervisedTarget {
                    vertices: arr(vec![v, 3], r.vertices)?,
                    joints3d: arr(vec![k, 3], r.joints3d)?,
                    joints2d: arr(vec![k, 2], r.joints2d)?,
                    camera,
                },
                colors: arr(vec![v, 3], r.colors)?,
                occluders: r.occluders,
                occluder_colors: r.occluder_colors,
                shape: r.shape,
                pose: arr(vec![k, 3], r.pose)?,
                visibility: OcclusionMask {
                    height: 0,
                    width: 0,
                    mask: Vec::new(),
                    visible_vertices: Vec::new(),
                },
            };
            s.visibility = occlusion_mask(&s.scene(&t).hand, &t.faces, v);
            samples.push(s);
        }
        Ok(Self {
            template: t,
            samples,
        })
    }
}
