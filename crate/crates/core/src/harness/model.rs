use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::amvur::{
    amvur_head, build_tokens, cross_attention, init_attention, init_head, self_attention,
    AttentionDims, GaussianNodes,
};
use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::camera::{build_camera_head, init_camera_head, CameraNodes, CAMERA_DIM};
use crate::hand_prior::{build_prior_head, init_prior_head, rest_coords, HandTemplate};
use crate::nn::{dense, normal_array, Params};
use crate::problosses::{
    build_supervised, build_weak, CameraPair, ModelNodes, NoiseNodes, SupervisedNodes, TargetNodes,
    WeakNodes,
};
use crate::rasterizer::{
    build_render, build_reverse_interpolate, build_texture_head, build_texture_loss,
    init_texture_head,
};

use super::{Mode, RunConfig};

const CAMERA_SCALE0: f64 = 0.5;

fn attention_dims(cfg: &RunConfig, token: usize) -> AttentionDims {
    AttentionDims {
        token,
        key: cfg.attention_key,
        value: cfg.attention_value,
    }
}

fn token_width(cfg: &RunConfig) -> usize {
    cfg.feature_dim + 3
}

fn texture_dims(cfg: &RunConfig) -> AttentionDims {
    attention_dims(cfg, cfg.feature_dim + cfg.encoder_widths[0] + 3)
}

/// Length of the flattened last feature map.
fn encoder_out_dim(cfg: &RunConfig) -> usize {
    let side = cfg.image_size >> (cfg.encoder_widths.len() - 1);
    cfg.encoder_widths.last().copied().unwrap_or(0) * side * side
}

/// Draws every trainable array for `cfg` from `cfg.seed`.
pub fn init_params(cfg: &RunConfig, t: &HandTemplate) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params::new();
    let mut cin = 3;
    for (i, &c) in cfg.encoder_widths.iter().enumerate() {
        let std = 1.0 / ((cin * 9) as f64).sqrt();
        p.insert(
            format!("enc.conv{i}.w"),
            normal_array(&mut rng, &[c, cin, 3, 3], std),
        );
        p.insert(format!("enc.conv{i}.b"), Array::zeros(&[c]));
        cin = c;
    }
    p.init_dense(
        &mut rng,
        "enc.fc",
        encoder_out_dim(cfg),
        cfg.feature_dim,
        1.0,
    );
    let e = token_width(cfg);
    init_attention(&mut p, &mut rng, "amvur.cross", attention_dims(cfg, e), 0.1);
    init_attention(&mut p, &mut rng, "amvur.self", attention_dims(cfg, e), 0.1);
    init_head(
        &mut p,
        &mut rng,
        "amvur.head",
        e,
        cfg.head_hidden,
        cfg.logvar_init,
        cfg.position_gain,
    );
    init_prior_head(&mut p, &mut rng, t, cfg.feature_dim, cfg.prior_hidden);
    let weak = cfg.mode == Mode::Weak;
    init_camera_head(
        &mut p,
        &mut rng,
        "camera",
        cfg.feature_dim,
        cfg.camera_hidden,
        CAMERA_SCALE0,
        weak.then_some(cfg.logvar_init),
    );
    if weak {
        init_camera_head(
            &mut p,
            &mut rng,
            "prior_camera",
            cfg.feature_dim,
            cfg.camera_hidden,
            CAMERA_SCALE0,
            None,
        );
    }
    if cfg.texture {
        init_texture_head(
            &mut p,
            &mut rng,
            "tex",
            texture_dims(cfg),
            cfg.texture_hidden,
        );
    }
    p
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// `[1, D]`
    pub f: NodeId,
    /// First-stage map `[C0, H, W]`, same resolution as the input.
    pub fmap: NodeId,
}

/// Tanh convolution stages (stride 1, then 2) with global average pooling.
pub fn build_encoder(
    g: &mut Graph,
    cfg: &RunConfig,
    image: NodeId,
) -> Result<EncoderNodes, GraphError> {
    let mut x = image;
    let mut cin = 3;
    let mut fmap = None;
    for (i, &c) in cfg.encoder_widths.iter().enumerate() {
        let w = g.param(&format!("enc.conv{i}.w"), &[c, cin, 3, 3])?;
        let b = g.param(&format!("enc.conv{i}.b"), &[c])?;
        let stride = if i == 0 { 1 } else { 2 };
        x = g.conv2d(x, w, b, stride, 1)?;
        x = g.tanh(x)?;
        fmap.get_or_insert(x);
        cin = c;
    }
    let n = encoder_out_dim(cfg);
    let flat = g.reshape(x, &[1, n])?;
    let f = dense(g, "enc.fc", flat, n, cfg.feature_dim)?;
    let f = g.tanh(f)?;
    Ok(EncoderNodes {
        f,
        fmap: fmap.expect("at least one stage"),
    })
}

/// Forward nodes shared by training and inference.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub image: NodeId,
    pub encoder: EncoderNodes,
    pub q: GaussianNodes,
    /// `[K, 3]` joints of the posterior mean.
    pub joints: NodeId,
    pub prior: GaussianNodes,
    pub camera: CameraNodes,
    pub prior_camera: Option<CameraNodes>,
    pub regressor: NodeId,
}

impl ForwardNodes {
    pub fn model(&self) -> ModelNodes {
        ModelNodes {
            q: self.q,
            prior: self.prior,
            camera: self.camera.mean,
            regressor: self.regressor,
        }
    }
}

/// Image `[3, H, W]` input named `image` through encoder, attention
/// regressor, prior network and camera heads.
pub fn build_forward(
    g: &mut Graph,
    cfg: &RunConfig,
    t: &HandTemplate,
) -> Result<ForwardNodes, GraphError> {
    let s = cfg.image_size;
    let image = g.input("image", &[3, s, s])?;
    let encoder = build_encoder(g, cfg, image)?;
    let (v0, j0) = rest_coords(t);
    let v0 = g.constant(v0);
    let j0 = g.constant(j0);
    let vt = build_tokens(g, encoder.f, v0)?;
    let jt = build_tokens(g, encoder.f, j0)?;
    let dims = attention_dims(cfg, token_width(cfg));
    let x = cross_attention(g, "amvur.cross", vt, jt, dims)?;
    let x = self_attention(g, "amvur.self", x.out, dims)?;
    let q = amvur_head(g, "amvur.head", x.out, cfg.head_hidden)?;
    let regressor = g.constant(t.joint_regressor.clone());
    let joints = g.matmul(regressor, q.mean)?;

    let prior_nodes = build_prior_head(g, t, encoder.f, cfg.feature_dim, cfg.prior_hidden)?;
    let prior_var = g.constant(Array::full(&[t.vertex_count, 3], cfg.prior_variance));
    let prior = GaussianNodes {
        mean: prior_nodes.lbs.vertices,
        variance: prior_var,
    };
    let weak = cfg.mode == Mode::Weak;
    let camera = build_camera_head(
        g,
        "camera",
        encoder.f,
        cfg.feature_dim,
        cfg.camera_hidden,
        weak,
    )?;
    let prior_camera = if weak {
        Some(build_camera_head(
            g,
            "prior_camera",
            encoder.f,
            cfg.feature_dim,
            cfg.camera_hidden,
            false,
        )?)
    } else {
        None
    };
    Ok(ForwardNodes {
        image,
        encoder,
        q,
        joints,
        prior,
        camera,
        prior_camera,
        regressor,
    })
}

#[derive(Clone, Copy, Debug)]
pub enum LossNodes {
    Supervised(SupervisedNodes),
    Weak(WeakNodes),
}

/// Model plus the objective for `cfg.mode`; `total` is the scalar to minimize.
pub struct TrainGraph {
    pub graph: Graph,
    pub forward: ForwardNodes,
    pub loss: LossNodes,
    pub total: NodeId,
}

pub fn build_train_graph(cfg: &RunConfig, t: &HandTemplate) -> Result<TrainGraph, GraphError> {
    let mut g = Graph::new();
    let fw = build_forward(&mut g, cfg, t)?;
    let (loss, total) = match cfg.mode {
        Mode::Supervised => {
            let targets = TargetNodes::declare(&mut g, t.vertex_count, t.joint_count)?;
            let n = build_supervised(&mut g, fw.model(), targets, &cfg.loss_weights())?;
            (LossNodes::Supervised(n), n.total)
        }
        Mode::Weak => {
            let j2d = g.input("gt_joints2d", &[t.joint_count, 2])?;
            let eps = NoiseNodes::declare(&mut g, t.vertex_count)?;
            let post = fw.camera;
            let prior = fw.prior_camera.expect("weak mode builds a prior camera");
            let post_var = g.exp(post.logvar.expect("weak mode builds a camera log-variance"))?;
            let unit = g.constant(Array::ones(&[1, CAMERA_DIM]));
            let cams = CameraPair {
                posterior: GaussianNodes {
                    mean: post.mean,
                    variance: post_var,
                },
                prior: GaussianNodes {
                    mean: prior.mean,
                    variance: unit,
                },
            };
            let n = build_weak(&mut g, fw.model(), cams, j2d, eps, cfg.kl_weight)?;
            let total = g.scale(n.total, cfg.w_joint2d)?;
            (LossNodes::Weak(n), total)
        }
    };
    Ok(TrainGraph {
        graph: g,
        forward: fw,
        loss,
        total,
    })
}

/// Texture branch on its own graph so the rasterization tables can be
/// computed between the geometry pass and the colour pass.
///
/// `tex_f` and `tex_fmap` are differentiable inputs; their gradients are
/// fed back into the encoder.
pub struct TextureGraph {
    pub graph: Graph,
    pub f: NodeId,
    pub fmap: NodeId,
    pub colors: NodeId,
    pub rendered: NodeId,
    pub loss: NodeId,
}

pub fn build_texture_graph(cfg: &RunConfig, t: &HandTemplate) -> Result<TextureGraph, GraphError> {
    let mut g = Graph::new();
    let (s, v) = (cfg.image_size, t.vertex_count);
    let f = g.input_differentiable("tex_f", &[1, cfg.feature_dim])?;
    let fmap = g.input_differentiable("tex_fmap", &[cfg.encoder_widths[0], s, s])?;
    let points = g.input("tex_points", &[v, 2])?;
    let xyz = g.input("tex_xyz", &[v, 3])?;
    let h = build_reverse_interpolate(&mut g, points, f, fmap, xyz)?;
    let colors = build_texture_head(&mut g, "tex", h, texture_dims(cfg), cfg.texture_hidden)?;
    let index = g.input("tex_index", &[s * s, 3])?;
    let weight = g.input("tex_weight", &[s * s, 3])?;
    let rendered = build_render(&mut g, colors, index, weight)?;
    let image = g.input("tex_image", &[s * s, 3])?;
    let mask = g.input("tex_mask", &[s * s, 1])?;
    let l = build_texture_loss(&mut g, rendered, image, mask)?;
    let loss = g.scale(l, cfg.w_texture)?;
    Ok(TextureGraph {
        graph: g,
        f,
        fmap,
        colors,
        rendered,
        loss,
    })
}
