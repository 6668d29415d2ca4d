use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Bindings, Values};
use crate::error::{Error, Result};
use crate::hand_prior::HandTemplate;
use crate::nn::{normal_array, Adam, Params};
use crate::rasterizer::raster_tables;

use super::model::{
    build_texture_graph, build_train_graph, init_params, LossNodes, TextureGraph, TrainGraph,
};
use super::{Dataset, Mode, RunConfig, SceneSample};

/// Mean loss terms over one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub struct TrainOutput {
    pub params: Params,
    pub log: Vec<StepLog>,
}

/// Arrays bound per sample, computed once.
pub(crate) struct Prepared {
    pub image: Array,
    pub gt_vertices: Array,
    pub gt_joints3d: Array,
    pub gt_joints2d: Array,
    pub gt_camera: Array,
    pub tex: Option<TextureInputs>,
}

/// Texture-branch inputs from the ground-truth geometry.
pub(crate) struct TextureInputs {
    pub points: Array,
    pub xyz: Array,
    pub index: Array,
    pub weight: Array,
    pub image: Array,
    pub mask: Array,
}

impl TextureInputs {
    pub fn new(t: &HandTemplate, s: &SceneSample) -> Result<Self> {
        let n = s.size() * s.size();
        let scene = s.scene(t);
        let (index, weight) = raster_tables(&scene.hand, &t.faces);
        Ok(Self {
            points: s.vertex_pixels(),
            xyz: s.target.vertices.clone(),
            index,
            weight,
            image: s.image.clone().reshaped(&[n, 3])?,
            mask: s.visibility.to_column(),
        })
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>, f: &'a Array, fmap: &'a Array) {
        b.insert("tex_f", f);
        b.insert("tex_fmap", fmap);
        b.insert("tex_points", &self.points);
        b.insert("tex_xyz", &self.xyz);
        b.insert("tex_index", &self.index);
        b.insert("tex_weight", &self.weight);
        b.insert("tex_image", &self.image);
        b.insert("tex_mask", &self.mask);
    }
}

impl Prepared {
    pub fn new(cfg: &RunConfig, t: &HandTemplate, s: &SceneSample) -> Result<Self> {
        Ok(Self {
            image: s.image_chw(),
            gt_vertices: s.target.vertices.clone(),
            gt_joints3d: s.target.joints3d.clone(),
            gt_joints2d: s.target.joints2d.clone(),
            gt_camera: Array::new(vec![1, s.target.camera.len()], s.target.camera.to_vec())?,
            tex: if cfg.texture {
                Some(TextureInputs::new(t, s)?)
            } else {
                None
            },
        })
    }
}

fn check_dataset(cfg: &RunConfig, t: &HandTemplate, data: &Dataset) -> Result<()> {
    if &data.template != t {
        return Err(Error::Compatibility(
            "dataset was rendered from a different template".into(),
        ));
    }
    if let Some(s) = data.samples.first() {
        if s.size() != cfg.image_size {
            return Err(Error::Compatibility(format!(
                "dataset images are {}px, config expects {}px",
                s.size(),
                cfg.image_size
            )));
        }
    }
    Ok(())
}

fn term_values(tg: &TrainGraph, vals: &Values) -> Vec<(&'static str, f64)> {
    let v = |id| vals.get(id).item();
    match tg.loss {
        LossNodes::Supervised(n) => vec![
            ("l_v", v(n.l_v)),
            ("l_j", v(n.l_j)),
            ("l_c", v(n.l_c)),
            ("l_j2d", v(n.l_j2d)),
        ],
        LossNodes::Weak(n) => vec![
            ("e_term", v(n.e_term)),
            ("kl_v", v(n.kl_v)),
            ("kl_j", v(n.kl_j)),
            ("kl_c", v(n.kl_c)),
        ],
    }
}

fn breakdown_text(terms: &[(&str, f64)], total: f64) -> String {
    let mut s: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
    s.push(format!("total={total:e}"));
    s.join(" ")
}

fn accumulate(
    acc: &mut BTreeMap<String, Array>,
    params: &Params,
    grads: impl Iterator<Item = (String, Array)>,
) {
    for (name, g) in grads {
        if !params.contains(&name) {
            continue;
        }
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    tg: TrainGraph,
    tex: Option<TextureGraph>,
    noise: ChaCha8Rng,
    vertex_count: usize,
}

impl Trainer<'_> {
    /// Loss terms and gradients of one sample (one latent draw in weak mode).
    fn sample_pass(
        &mut self,
        params: &Params,
        p: &Prepared,
        step: usize,
    ) -> Result<(Vec<(&'static str, f64)>, f64, BTreeMap<String, Array>)> {
        let eps = match self.cfg.mode {
            Mode::Weak => Some((
                normal_array(&mut self.noise, &[self.vertex_count, 3], 1.0),
                normal_array(&mut self.noise, &[1, crate::camera::CAMERA_DIM], 1.0),
            )),
            Mode::Supervised => None,
        };
        let mut b = params.bindings();
        b.insert("image", &p.image);
        b.insert("gt_joints2d", &p.gt_joints2d);
        match &eps {
            Some((ev, ec)) => {
                b.insert("eps_vertices", ev);
                b.insert("eps_camera", ec);
            }
            None => {
                b.insert("gt_vertices", &p.gt_vertices);
                b.insert("gt_joints3d", &p.gt_joints3d);
                b.insert("gt_camera", &p.gt_camera);
            }
        }
        let tg = &self.tg;
        let vals = tg.graph.forward(&b)?;
        let mut terms = term_values(tg, &vals);
        let mut total = vals.get(tg.total).item();
        let mut seeds = vec![(tg.total, Array::scalar(1.0))];
        let mut grads = BTreeMap::new();
        if let (Some(tex), Some(ti)) = (&self.tex, &p.tex) {
            let f = vals.get(tg.forward.encoder.f).clone();
            let fmap = vals.get(tg.forward.encoder.fmap).clone();
            let mut tb = params.bindings();
            ti.bind(&mut tb, &f, &fmap);
            let tv = tex.graph.forward(&tb)?;
            let l_tex = tv.get(tex.loss).item();
            terms.push(("l_tex", l_tex));
            total += l_tex;
            if l_tex.is_finite() {
                let tgr = tex.graph.backward(&tv, tex.loss)?;
                seeds.push((
                    tg.forward.encoder.f,
                    tgr.get("tex_f").expect("texture feature gradient").clone(),
                ));
                seeds.push((
                    tg.forward.encoder.fmap,
                    tgr.get("tex_fmap").expect("texture map gradient").clone(),
                ));
                accumulate(&mut grads, params, tgr.into_map().into_iter());
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown_text(&terms, total),
            });
        }
        let g = tg.graph.backward_seeded(&vals, &seeds)?;
        accumulate(&mut grads, params, g.into_map().into_iter());
        Ok((terms, total, grads))
    }
}

/// Minimizes the configured objective with Adam on fixed-order mini-batches.
///
/// Batches walk a per-epoch shuffle drawn from `cfg.seed`; gradients are
/// summed in batch order and averaged, so a run is reproducible bit for bit.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let t = cfg.load_template()?;
    check_dataset(cfg, &t, data)?;
    let mut params = init_params(cfg, &t);
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutput { params, log });
    }
    if data.samples.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let prepared: Vec<Prepared> = data
        .samples
        .iter()
        .map(|s| Prepared::new(cfg, &t, s))
        .collect::<Result<_>>()?;
    let mut trainer = Trainer {
        cfg,
        tg: build_train_graph(cfg, &t)?,
        tex: if cfg.texture {
            Some(build_texture_graph(cfg, &t)?)
        } else {
            None
        },
        noise: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9)),
        vertex_count: t.vertex_count,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7f4a_7c15));
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(cfg.learning_rate);
    let batch = cfg.batch_size.min(prepared.len());
    let draws = if cfg.mode == Mode::Weak {
        cfg.latent_samples
    } else {
        1
    };
    for step in 0..cfg.steps {
        let mut grads = BTreeMap::new();
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled");
            for _ in 0..draws {
                let (tv, tt, g) = trainer.sample_pass(&params, &prepared[idx], step)?;
                for (k, v) in tv {
                    *terms.entry(k.to_string()).or_insert(0.0) += v;
                }
                total += tt;
                accumulate(&mut grads, &params, g.into_iter());
            }
        }
        let n = (batch * draws) as f64;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x /= n;
            }
        }
        for v in terms.values_mut() {
            *v /= n;
        }
        let entry = StepLog {
            step,
            terms,
            total: total / n,
        };
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!("step {step}: total {:.6e}", entry.total);
        }
        log.push(entry);
        if cfg.cosine_decay {
            adam.lr = 0.5
                * cfg.learning_rate
                * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        adam.update(&mut params, &grads);
    }
    Ok(TrainOutput { params, log })
}

pub fn log_text(log: &[StepLog]) -> String {
    let mut s = String::new();
    for l in log {
        s.push_str(&l.to_line());
        s.push('\n');
    }
    s
}
