use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_sampled, Array, Bindings, Graph, GraphError, NodeId};
use crate::error::Result;
use crate::nn::{normal_array, Params};

use super::model::{build_texture_graph, build_train_graph, init_params};
use super::{generate_synthetic, Mode, RunConfig, TextureInputs};

pub const AUDIT_EPS: f64 = 1e-6;
pub const AUDIT_TOLERANCE: f64 = 1e-4;
pub const AUDIT_SEEDS: [u64; 3] = [1, 2, 3];
const ENTRIES_PER_PARAM: usize = 6;

#[derive(Clone, Debug, Serialize)]
pub struct AuditEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub entries_checked: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty()
            && self
                .entries
                .iter()
                .all(|e| e.max_rel_error < AUDIT_TOLERANCE)
    }
}

type OpCase = (
    &'static str,
    fn(&mut Graph, &mut ChaCha8Rng, &mut Params) -> Result<NodeId, GraphError>,
);

fn leaf(
    g: &mut Graph,
    p: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) -> Result<NodeId, GraphError> {
    p.insert(name, normal_array(rng, shape, 1.0));
    g.param(name, shape)
}

fn positive(
    g: &mut Graph,
    p: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) -> Result<NodeId, GraphError> {
    let a = normal_array(rng, shape, 0.3).map(|x| x.exp());
    p.insert(name, a);
    g.param(name, shape)
}

/// Reduces any node to a scalar through fixed random weights so every
/// output entry carries a distinct gradient.
fn readout(g: &mut Graph, rng: &mut ChaCha8Rng, x: NodeId) -> Result<NodeId, GraphError> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(normal_array(rng, &shape, 1.0));
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            let b = leaf(g, p, r, "b", &[1, 4])?;
            g.add(a, b)
        }),
        ("sub", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            let b = leaf(g, p, r, "b", &[3, 1])?;
            g.sub(a, b)
        }),
        ("mul", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            let b = leaf(g, p, r, "b", &[3, 4])?;
            g.mul(a, b)
        }),
        ("div", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            let b = positive(g, p, r, "b", &[1, 4])?;
            g.div(a, b)
        }),
        ("neg", |g, r, p| {
            let a = leaf(g, p, r, "a", &[5])?;
            g.neg(a)
        }),
        ("exp", |g, r, p| {
            let a = leaf(g, p, r, "a", &[5])?;
            g.exp(a)
        }),
        ("log", |g, r, p| {
            let a = positive(g, p, r, "a", &[5])?;
            g.log(a)
        }),
        ("sqrt", |g, r, p| {
            let a = positive(g, p, r, "a", &[5])?;
            g.sqrt(a)
        }),
        ("square", |g, r, p| {
            let a = leaf(g, p, r, "a", &[5])?;
            g.square(a)
        }),
        ("reciprocal", |g, r, p| {
            let a = positive(g, p, r, "a", &[5])?;
            g.reciprocal(a)
        }),
        ("tanh", |g, r, p| {
            let a = leaf(g, p, r, "a", &[5])?;
            g.tanh(a)
        }),
        ("sigmoid", |g, r, p| {
            let a = leaf(g, p, r, "a", &[5])?;
            g.sigmoid(a)
        }),
        ("abs", |g, r, p| {
            let a = positive(g, p, r, "a", &[5])?;
            let m =
                g.constant(Array::new(vec![5], vec![1.0, -1.0, 1.0, -1.0, -1.0]).expect("shape"));
            let a = g.mul(a, m)?;
            g.abs(a)
        }),
        ("affine", |g, r, p| {
            let a = leaf(g, p, r, "a", &[2, 3])?;
            g.affine(a, -1.7, 0.4)
        }),
        ("sum", |g, r, p| {
            let a = leaf(g, p, r, "a", &[2, 3])?;
            g.sum(a)
        }),
        ("mean", |g, r, p| {
            let a = leaf(g, p, r, "a", &[2, 3])?;
            g.mean(a)
        }),
        ("sum_axis", |g, r, p| {
            let a = leaf(g, p, r, "a", &[2, 3, 4])?;
            g.sum_axis(a, 1)
        }),
        ("matmul", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            let b = leaf(g, p, r, "b", &[4, 2])?;
            g.matmul(a, b)
        }),
        ("transpose", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            g.transpose(a)
        }),
        ("reshape", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 4])?;
            g.reshape(a, &[2, 6])
        }),
        ("concat", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 2])?;
            let b = leaf(g, p, r, "b", &[3, 4])?;
            g.concat(&[a, b], 1)
        }),
        ("slice", |g, r, p| {
            let a = leaf(g, p, r, "a", &[4, 5])?;
            g.slice(a, 1, 1, 4)
        }),
        ("softmax", |g, r, p| {
            let a = leaf(g, p, r, "a", &[3, 5])?;
            g.softmax(a)
        }),
        ("conv2d", |g, r, p| {
            let x = leaf(g, p, r, "x", &[2, 7, 6])?;
            let w = leaf(g, p, r, "w", &[3, 2, 3, 3])?;
            let b = leaf(g, p, r, "b", &[3])?;
            g.conv2d(x, w, b, 2, 1)
        }),
        ("bilinear_sample", |g, r, p| {
            let m = leaf(g, p, r, "map", &[2, 5, 6])?;
            let pts: Vec<f64> = (0..12)
                .map(|i| {
                    if i % 2 == 0 {
                        r.random_range(0.1..5.9)
                    } else {
                        r.random_range(0.1..4.9)
                    }
                })
                .collect();
            p.insert("points", Array::new(vec![6, 2], pts).expect("shape"));
            let pts = g.param("points", &[6, 2])?;
            g.bilinear_sample(m, pts)
        }),
        ("rodrigues", |g, r, p| {
            let a = leaf(g, p, r, "a", &[4, 3])?;
            g.rodrigues(a)
        }),
        ("bary_interp", |g, r, p| {
            let src = leaf(g, p, r, "src", &[5, 3])?;
            let idx = g.constant(
                Array::from_rows(&[
                    [0.0, 1.0, 2.0],
                    [4.0, 3.0, 2.0],
                    [-1.0, -1.0, -1.0],
                    [1.0, 1.0, 0.0],
                ])
                .expect("shape"),
            );
            let w = g.constant(normal_array(r, &[4, 3], 1.0));
            g.bary_interp(src, idx, w)
        }),
    ]
}

fn check(
    g: &Graph,
    out: NodeId,
    b: &Bindings,
    seed: u64,
) -> Result<crate::autodiff::GradCheckReport> {
    Ok(grad_check_sampled(
        g,
        out,
        b,
        AUDIT_EPS,
        ENTRIES_PER_PARAM,
        seed,
    )?)
}

/// Central-difference check of every differentiable operation and of the
/// supervised, weakly-supervised and texture objectives built from `cfg`.
pub fn gradient_audit(cfg: &RunConfig) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let mut push = |name: &str, seed: u64, r: crate::autodiff::GradCheckReport| {
        report.entries.push(AuditEntry {
            name: name.to_string(),
            seed,
            max_rel_error: r.max_rel_error,
            worst_param: r.worst_param,
            entries_checked: r.entries_checked,
        });
    };
    let t = cfg.load_template()?;
    for seed in AUDIT_SEEDS {
        for (name, build) in op_cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let mut p = Params::new();
            let y = build(&mut g, &mut rng, &mut p)?;
            let out = readout(&mut g, &mut rng, y)?;
            push(
                name,
                seed,
                grad_check_sampled(&g, out, &p.bindings(), AUDIT_EPS, usize::MAX, seed)?,
            );
        }

        let data_cfg = RunConfig {
            max_occluders: 0,
            ..cfg.clone()
        };
        let sample = generate_synthetic(&data_cfg, &t, 1, seed)?.remove(0);
        let image = sample.image_chw();
        let cam = Array::new(vec![1, 7], sample.target.camera.to_vec())?;
        for mode in [Mode::Supervised, Mode::Weak] {
            let mcfg = RunConfig {
                mode,
                seed,
                texture: true,
                ..cfg.clone()
            };
            let params = init_params(&mcfg, &t);
            let tg = build_train_graph(&mcfg, &t)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ev = normal_array(&mut rng, &[t.vertex_count, 3], 1.0);
            let ec = normal_array(&mut rng, &[1, 7], 1.0);
            let mut b = params.bindings();
            b.insert("image", &image);
            b.insert("gt_vertices", &sample.target.vertices);
            b.insert("gt_joints3d", &sample.target.joints3d);
            b.insert("gt_joints2d", &sample.target.joints2d);
            b.insert("gt_camera", &cam);
            b.insert("eps_vertices", &ev);
            b.insert("eps_camera", &ec);
            let name = match mode {
                Mode::Supervised => "supervised objective",
                Mode::Weak => "weak objective",
            };
            push(name, seed, check(&tg.graph, tg.total, &b, seed)?);

            if mode == Mode::Supervised {
                let vals = tg.graph.forward(&b)?;
                let f = vals.get(tg.forward.encoder.f).clone();
                let fmap = vals.get(tg.forward.encoder.fmap).clone();
                drop(vals);
                let tex = build_texture_graph(&mcfg, &t)?;
                let ti = TextureInputs::new(&t, &sample)?;
                let mut tb = params.bindings();
                ti.bind(&mut tb, &f, &fmap);
                push(
                    "texture objective",
                    seed,
                    check(&tex.graph, tex.loss, &tb, seed)?,
                );
            }
        }
    }
    Ok(report)
}
