//! Gaussian objectives. Every `variance` here is a variance, never a standard deviation.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::amvur::{push_forward, DiagGaussian, GaussianNodes};
use crate::autodiff::{Array, Bindings, Graph, GraphError, NodeId};
use crate::camera::{build_projection, CameraGaussian, CAMERA_DIM};
use crate::error::{Error, Result};
use crate::hand_prior::PriorDistribution;

/// `sum ½(x-μ)²/var + ½ln(2π var)`
pub fn nll_node(
    g: &mut Graph,
    x: NodeId,
    mean: NodeId,
    variance: NodeId,
) -> Result<NodeId, GraphError> {
    let d = g.sub(x, mean)?;
    let d2 = g.square(d)?;
    let t = g.div(d2, variance)?;
    let lv = g.log(variance)?;
    let s = g.add(t, lv)?;
    let s = g.affine(s, 0.5, 0.5 * (2.0 * PI).ln())?;
    g.sum(s)
}

/// `½[sum ln(var_p/var_q) - d + sum (var_q + (μp-μq)²)/var_p]`
pub fn kl_node(g: &mut Graph, q: GaussianNodes, p: GaussianNodes) -> Result<NodeId, GraphError> {
    let lp = g.log(p.variance)?;
    let lq = g.log(q.variance)?;
    let ratio = g.sub(lp, lq)?;
    let ratio = g.affine(ratio, 1.0, -1.0)?;
    let d = g.sub(p.mean, q.mean)?;
    let d2 = g.square(d)?;
    let num = g.add(q.variance, d2)?;
    let frac = g.div(num, p.variance)?;
    let s = g.add(ratio, frac)?;
    let s = g.sum(s)?;
    g.scale(s, 0.5)
}

/// `μ + √var ⊙ ε`
pub fn sample_node(g: &mut Graph, q: GaussianNodes, eps: NodeId) -> Result<NodeId, GraphError> {
    let sd = g.sqrt(q.variance)?;
    let noise = g.mul(sd, eps)?;
    g.add(q.mean, noise)
}

/// Image-plane Gaussian of 3-D points `[K,3]` under camera `[1,7]`: the mean
/// is projected and each variance is `|s| · (var (R∘R))[:, :2]`.
pub fn project_gaussian(
    g: &mut Graph,
    q: GaussianNodes,
    cam: NodeId,
) -> Result<GaussianNodes, GraphError> {
    let proj = build_projection(g, q.mean, cam)?;
    let rr = g.square(proj.rotation)?;
    let spread = g.matmul(q.variance, rr)?;
    let spread = g.slice(spread, 1, 0, 2)?;
    let s = g.abs(proj.scale)?;
    let variance = g.mul(spread, s)?;
    Ok(GaussianNodes {
        mean: proj.points2d,
        variance,
    })
}

fn check_positive(what: &str, a: &Array) -> Result<()> {
    if a.data().iter().all(|&v| v > 0.0) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} variance must be positive")))
    }
}

fn check_same(a: &Array, b: &Array) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Graph(GraphError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        ))))
    }
}

/// Negative log-likelihood of `x` under a diagonal Gaussian.
pub fn gaussian_nll(x: &Array, q: &DiagGaussian) -> Result<f64> {
    check_same(x, &q.mean)?;
    check_positive("likelihood", &q.variance)?;
    let mut g = Graph::new();
    let s = x.shape();
    let (xn, m, v) = (g.input("x", s)?, g.input("m", s)?, g.input("v", s)?);
    let out = nll_node(&mut g, xn, m, v)?;
    let b = Bindings::new()
        .bind("x", x)
        .bind("m", &q.mean)
        .bind("v", &q.variance);
    Ok(g.forward(&b)?.get(out).item())
}

/// `KL(q ‖ p)` for diagonal Gaussians of equal shape.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_same(&q.mean, &p.mean)?;
    check_positive("q", &q.variance)?;
    check_positive("p", &p.variance)?;
    let mut g = Graph::new();
    let s = q.mean.shape();
    let qn = GaussianNodes {
        mean: g.input("qm", s)?,
        variance: g.input("qv", s)?,
    };
    let pn = GaussianNodes {
        mean: g.input("pm", s)?,
        variance: g.input("pv", s)?,
    };
    let out = kl_node(&mut g, qn, pn)?;
    let b = Bindings::new()
        .bind("qm", &q.mean)
        .bind("qv", &q.variance)
        .bind("pm", &p.mean)
        .bind("pv", &p.variance);
    Ok(g.forward(&b)?.get(out).item())
}

/// Reparameterized draw `μ + √var ⊙ ε`.
pub fn reparam_sample(q: &DiagGaussian, eps: &Array) -> Result<Array> {
    check_same(&q.mean, eps)?;
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.variance.data())
        .zip(eps.data())
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Ok(Array::new(q.mean.shape().to_vec(), data)?)
}

/// Multipliers applied to each term of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint: f64,
    pub camera: f64,
    pub joint2d: f64,
    pub texture: f64,
    /// Scales all three KL terms of the weakly-supervised objective.
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vertex: 1.0,
            joint: 1.0,
            camera: 1.0,
            joint2d: 1.0,
            texture: 1.0,
            kl: 1.0,
        }
    }
}

/// Scalar values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_j: f64,
    pub l_c: f64,
    pub l_j2d: f64,
    pub l_tex: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_v, self.l_j, self.l_c, self.l_j2d, self.l_tex, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.l_v += o.l_v;
        self.l_j += o.l_j;
        self.l_c += o.l_c;
        self.l_j2d += o.l_j2d;
        self.l_tex += o.l_tex;
        self.total += o.total;
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_V={:.6e} L_J={:.6e} L_C={:.6e} L_J2D={:.6e} L_tex={:.6e} total={:.6e}",
            self.l_v, self.l_j, self.l_c, self.l_j2d, self.l_tex, self.total
        )
    }
}

/// Ground truth for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedTarget {
    /// `[V, 3]`
    pub vertices: Array,
    /// `[K, 3]`
    pub joints3d: Array,
    /// `[K, 2]`
    pub joints2d: Array,
    pub camera: [f64; CAMERA_DIM],
}

/// Target leaves in a loss graph.
#[derive(Clone, Copy, Debug)]
pub struct TargetNodes {
    pub vertices: NodeId,
    pub joints3d: NodeId,
    pub joints2d: NodeId,
    /// `[1, 7]`
    pub camera: NodeId,
}

impl TargetNodes {
    /// Declares the inputs `gt_vertices`, `gt_joints3d`, `gt_joints2d`, `gt_camera`.
    pub fn declare(g: &mut Graph, v: usize, k: usize) -> Result<Self, GraphError> {
        Ok(Self {
            vertices: g.input("gt_vertices", &[v, 3])?,
            joints3d: g.input("gt_joints3d", &[k, 3])?,
            joints2d: g.input("gt_joints2d", &[k, 2])?,
            camera: g.input("gt_camera", &[1, CAMERA_DIM])?,
        })
    }
}

/// Per-term nodes of the supervised objective.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedNodes {
    pub l_v: NodeId,
    pub l_j: NodeId,
    pub l_c: NodeId,
    pub l_j2d: NodeId,
    pub total: NodeId,
}

/// Model-side nodes consumed by the loss builders.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    /// Posterior over vertices.
    pub q: GaussianNodes,
    /// Prior over vertices.
    pub prior: GaussianNodes,
    /// `[1, 7]` camera mean.
    pub camera: NodeId,
    /// `[K, V]` joint regressor.
    pub regressor: NodeId,
}

/// Vertex, joint, camera and 2-D joint losses with weighted total.
pub fn build_supervised(
    g: &mut Graph,
    m: ModelNodes,
    t: TargetNodes,
    w: &LossWeights,
) -> Result<SupervisedNodes, GraphError> {
    let nll_v = nll_node(g, t.vertices, m.q.mean, m.q.variance)?;
    let kl_v = kl_node(g, m.q, m.prior)?;
    let l_v = g.add(nll_v, kl_v)?;

    let qj = push_forward(g, m.regressor, m.q)?;
    let pj = push_forward(g, m.regressor, m.prior)?;
    let nll_j = nll_node(g, t.joints3d, qj.mean, qj.variance)?;
    let kl_j = kl_node(g, qj, pj)?;
    let l_j = g.add(nll_j, kl_j)?;

    let dc = g.sub(t.camera, m.camera)?;
    let dc = g.square(dc)?;
    let l_c = g.sum(dc)?;

    let q2 = project_gaussian(g, qj, m.camera)?;
    let l_j2d = nll_node(g, t.joints2d, q2.mean, q2.variance)?;

    let mut total = None;
    for (node, wt) in [
        (l_v, w.vertex),
        (l_j, w.joint),
        (l_c, w.camera),
        (l_j2d, w.joint2d),
    ] {
        let term = g.scale(node, wt)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(SupervisedNodes {
        l_v,
        l_j,
        l_c,
        l_j2d,
        total: total.expect("four terms"),
    })
}

/// Latent noise leaves for the weakly-supervised estimator.
#[derive(Clone, Copy, Debug)]
pub struct NoiseNodes {
    /// `[V, 3]`
    pub vertices: NodeId,
    /// `[1, 7]`
    pub camera: NodeId,
}

impl NoiseNodes {
    /// Declares the inputs `eps_vertices` and `eps_camera`.
    pub fn declare(g: &mut Graph, v: usize) -> Result<Self, GraphError> {
        Ok(Self {
            vertices: g.input("eps_vertices", &[v, 3])?,
            camera: g.input("eps_camera", &[1, CAMERA_DIM])?,
        })
    }
}

/// Camera distributions for the weak objective, each `[1, 7]`.
#[derive(Clone, Copy, Debug)]
pub struct CameraPair {
    pub posterior: GaussianNodes,
    pub prior: GaussianNodes,
}

#[derive(Clone, Copy, Debug)]
pub struct WeakNodes {
    pub e_term: NodeId,
    pub kl_v: NodeId,
    pub kl_j: NodeId,
    pub kl_c: NodeId,
    pub total: NodeId,
}

/// Single-sample evidence lower bound on the 2-D joints, negated.
///
/// Vertices and camera are drawn by reparameterization, joints follow as
/// `B V`, and the 2-D likelihood is the projected Gaussian of the sampled
/// joints with the joint-space variance. `kl_weight` scales the three KL terms.
pub fn build_weak(
    g: &mut Graph,
    m: ModelNodes,
    cams: CameraPair,
    joints2d: NodeId,
    eps: NoiseNodes,
    kl_weight: f64,
) -> Result<WeakNodes, GraphError> {
    let v_s = sample_node(g, m.q, eps.vertices)?;
    let c_s = sample_node(g, cams.posterior, eps.camera)?;
    let qj = push_forward(g, m.regressor, m.q)?;
    let j_s = g.matmul(m.regressor, v_s)?;
    let sampled = GaussianNodes {
        mean: j_s,
        variance: qj.variance,
    };
    let q2 = project_gaussian(g, sampled, c_s)?;
    let e_term = nll_node(g, joints2d, q2.mean, q2.variance)?;
    let kl_v = kl_node(g, m.q, m.prior)?;
    let pj = push_forward(g, m.regressor, m.prior)?;
    let kl_j = kl_node(g, qj, pj)?;
    let kl_c = kl_node(g, cams.posterior, cams.prior)?;
    let kl = g.add(kl_v, kl_j)?;
    let kl = g.add(kl, kl_c)?;
    let kl = g.scale(kl, kl_weight)?;
    let total = g.add(e_term, kl)?;
    Ok(WeakNodes {
        e_term,
        kl_v,
        kl_j,
        kl_c,
        total,
    })
}

struct Fixture {
    g: Graph,
    model: ModelNodes,
}

fn fixture(v: usize, k: usize) -> Result<Fixture, GraphError> {
    let mut g = Graph::new();
    let model = ModelNodes {
        q: GaussianNodes {
            mean: g.input("q_mean", &[v, 3])?,
            variance: g.input("q_var", &[v, 3])?,
        },
        prior: GaussianNodes {
            mean: g.input("p_mean", &[v, 3])?,
            variance: g.input("p_var", &[v, 3])?,
        },
        camera: g.input("q_cam", &[1, CAMERA_DIM])?,
        regressor: g.input("regressor", &[k, v])?,
    };
    Ok(Fixture { g, model })
}

fn validate(q: &DiagGaussian, prior: &PriorDistribution, regressor: &Array) -> Result<()> {
    check_same(&q.mean, &prior.mean)?;
    check_positive("posterior", &q.variance)?;
    check_positive("prior", &prior.variance)?;
    if regressor.shape().len() != 2 || regressor.cols() != q.mean.rows() {
        return Err(Error::Graph(GraphError::Shape(format!(
            "regressor {:?} for {} vertices",
            regressor.shape(),
            q.mean.rows()
        ))));
    }
    Ok(())
}

/// Evaluates [`build_supervised`] on plain arrays. `l_tex` is left at zero.
pub fn supervised_losses(
    target: &SupervisedTarget,
    q: &DiagGaussian,
    prior: &PriorDistribution,
    q_cam: &CameraGaussian,
    regressor: &Array,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    validate(q, prior, regressor)?;
    let (v, k) = (q.mean.rows(), regressor.rows());
    let Fixture { mut g, model } = fixture(v, k)?;
    let t = TargetNodes::declare(&mut g, v, k)?;
    let n = build_supervised(&mut g, model, t, weights)?;
    let cam = Array::new(vec![1, CAMERA_DIM], q_cam.mean.to_vec())?;
    let gt_cam = Array::new(vec![1, CAMERA_DIM], target.camera.to_vec())?;
    let b = Bindings::new()
        .bind("q_mean", &q.mean)
        .bind("q_var", &q.variance)
        .bind("p_mean", &prior.mean)
        .bind("p_var", &prior.variance)
        .bind("q_cam", &cam)
        .bind("regressor", regressor)
        .bind("gt_vertices", &target.vertices)
        .bind("gt_joints3d", &target.joints3d)
        .bind("gt_joints2d", &target.joints2d)
        .bind("gt_camera", &gt_cam);
    let vals = g.forward(&b)?;
    Ok(LossBreakdown {
        l_v: vals.get(n.l_v).item(),
        l_j: vals.get(n.l_j).item(),
        l_c: vals.get(n.l_c).item(),
        l_j2d: vals.get(n.l_j2d).item(),
        l_tex: 0.0,
        total: vals.get(n.total).item(),
    })
}

/// Per-term values of the weak objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakBreakdown {
    pub e_term: f64,
    pub kl_v: f64,
    pub kl_j: f64,
    pub kl_c: f64,
    pub total: f64,
}

/// Evaluates [`build_weak`] on plain arrays with fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn weak_loss(
    joints2d: &Array,
    q: &DiagGaussian,
    q_cam: &CameraGaussian,
    prior: &PriorDistribution,
    prior_cam: &CameraGaussian,
    regressor: &Array,
    eps_vertices: &Array,
    eps_camera: &[f64; CAMERA_DIM],
    kl_weight: f64,
) -> Result<WeakBreakdown> {
    validate(q, prior, regressor)?;
    check_same(eps_vertices, &q.mean)?;
    let cv = Array::new(vec![1, CAMERA_DIM], q_cam.variance.to_vec())?;
    let pcv = Array::new(vec![1, CAMERA_DIM], prior_cam.variance.to_vec())?;
    check_positive("camera", &cv)?;
    check_positive("prior camera", &pcv)?;
    let (v, k) = (q.mean.rows(), regressor.rows());
    let Fixture { mut g, model } = fixture(v, k)?;
    let cams = CameraPair {
        posterior: GaussianNodes {
            mean: model.camera,
            variance: g.input("q_cam_var", &[1, CAMERA_DIM])?,
        },
        prior: GaussianNodes {
            mean: g.input("p_cam", &[1, CAMERA_DIM])?,
            variance: g.input("p_cam_var", &[1, CAMERA_DIM])?,
        },
    };
    let j2 = g.input("gt_joints2d", &[k, 2])?;
    let eps = NoiseNodes::declare(&mut g, v)?;
    let n = build_weak(&mut g, model, cams, j2, eps, kl_weight)?;
    let qc = Array::new(vec![1, CAMERA_DIM], q_cam.mean.to_vec())?;
    let pc = Array::new(vec![1, CAMERA_DIM], prior_cam.mean.to_vec())?;
    let ec = Array::new(vec![1, CAMERA_DIM], eps_camera.to_vec())?;
    let b = Bindings::new()
        .bind("q_mean", &q.mean)
        .bind("q_var", &q.variance)
        .bind("p_mean", &prior.mean)
        .bind("p_var", &prior.variance)
        .bind("q_cam", &qc)
        .bind("q_cam_var", &cv)
        .bind("p_cam", &pc)
        .bind("p_cam_var", &pcv)
        .bind("regressor", regressor)
        .bind("gt_joints2d", joints2d)
        .bind("eps_vertices", eps_vertices)
        .bind("eps_camera", &ec);
    let vals = g.forward(&b)?;
    Ok(WeakBreakdown {
        e_term: vals.get(n.e_term).item(),
        kl_v: vals.get(n.kl_v).item(),
        kl_j: vals.get(n.kl_j).item(),
        kl_c: vals.get(n.kl_c).item(),
        total: vals.get(n.total).item(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::camera::{rodrigues, CameraParams};
    use crate::nn::normal_array;

    fn gauss(mean: Vec<f64>, var: Vec<f64>) -> DiagGaussian {
        let n = mean.len();
        DiagGaussian::new(Array::from_vec(mean), Array::new(vec![n], var).unwrap()).unwrap()
    }

    #[test]
    fn nll_reference_values() {
        let h = 0.5 * (2.0 * PI).ln();
        let g = gauss(vec![0.3], vec![1.0]);
        assert!((gaussian_nll(&Array::from_vec(vec![0.3]), &g).unwrap() - h).abs() < 1e-15);
        assert!((gaussian_nll(&Array::from_vec(vec![1.3]), &g).unwrap() - (0.5 + h)).abs() < 1e-15);
    }

    #[test]
    fn nll_monte_carlo_matches_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let q = gauss(vec![2.0; n], vec![0.5; n]);
        let x = reparam_sample(&q, &Array::from_vec(eps)).unwrap();
        let mean_nll = gaussian_nll(&x, &q).unwrap() / n as f64;
        let entropy = 0.5 * (2.0 * PI * std::f64::consts::E * 0.5).ln();
        assert!((mean_nll / entropy - 1.0).abs() < 0.01);
    }

    #[test]
    fn kl_reference_values() {
        let p = gauss(vec![0.0], vec![1.0]);
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&gauss(vec![1.0], vec![1.0]), &p).unwrap() - 0.5).abs() < 1e-15);
        let q = gauss(vec![0.0], vec![2.0]);
        let want = 0.5 * (1.0 - 2f64.ln());
        assert!((kl_diag_gaussian(&q, &p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn non_positive_variance_is_domain_error() {
        let bad = DiagGaussian {
            mean: Array::from_vec(vec![0.0]),
            variance: Array::from_vec(vec![-1.0]),
        };
        let p = gauss(vec![0.0], vec![1.0]);
        assert!(matches!(kl_diag_gaussian(&bad, &p), Err(Error::Domain(_))));
        assert!(matches!(
            gaussian_nll(&Array::from_vec(vec![0.0]), &bad),
            Err(Error::Domain(_))
        ));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            pairs in prop::collection::vec((-3.0..3.0f64, 0.05..4.0f64, -3.0..3.0f64, 0.05..4.0f64), 1..6)
        ) {
            let q = gauss(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect());
            let p = gauss(pairs.iter().map(|p| p.2).collect(), pairs.iter().map(|p| p.3).collect());
            prop_assert!(kl_diag_gaussian(&q, &p).unwrap() >= -1e-12);
            prop_assert!(kl_diag_gaussian(&q, &q).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn reparam_edge_cases_and_moments() {
        let q = gauss(vec![1.5, -2.0], vec![1e-30, 4.0]);
        assert_eq!(
            reparam_sample(&q, &Array::zeros(&[2])).unwrap().data(),
            &[1.5, -2.0]
        );
        let s = reparam_sample(&q, &Array::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.5).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = reparam_sample(&gauss(vec![3.0; n], vec![0.7; n]), &Array::from_vec(eps)).unwrap();
        let mean = x.sum() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean / 3.0 - 1.0).abs() < 0.02);
        assert!((var / 0.7 - 1.0).abs() < 0.02);
    }

    struct Toy {
        target: SupervisedTarget,
        q: DiagGaussian,
        prior: PriorDistribution,
        cam: CameraGaussian,
        b: Array,
    }

    fn toy(seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array::from_rows(&[[0.5, 0.5, 0.0, 0.0], [0.0, 0.2, 0.3, 0.5]]).unwrap();
        let qm = normal_array(&mut rng, &[4, 3], 1.0);
        let qv = normal_array(&mut rng, &[4, 3], 1.0).map(|x| 0.2 + x * x);
        let pm = normal_array(&mut rng, &[4, 3], 1.0);
        let gt = normal_array(&mut rng, &[4, 3], 1.0);
        let cam = [0.8, 0.3, -0.5, 0.2, 0.1, -0.2, 0.05];
        let target = SupervisedTarget {
            joints3d: b.matmul(&gt),
            joints2d: normal_array(&mut rng, &[2, 2], 0.5),
            vertices: gt,
            camera: [0.9, 0.2, -0.4, 0.1, 0.0, -0.1, 0.0],
        };
        Toy {
            target,
            q: DiagGaussian::new(qm, qv).unwrap(),
            prior: PriorDistribution::from_mean(pm),
            cam: CameraGaussian::unit(cam),
            b,
        }
    }

    fn nll_loop(x: &[f64], m: &[f64], v: &[f64]) -> f64 {
        (0..x.len())
            .map(|i| 0.5 * (x[i] - m[i]).powi(2) / v[i] + 0.5 * (2.0 * PI * v[i]).ln())
            .sum()
    }

    fn kl_loop(qm: &[f64], qv: &[f64], pm: &[f64], pv: &[f64]) -> f64 {
        let mut s = -(qm.len() as f64);
        for i in 0..qm.len() {
            s += (pv[i] / qv[i]).ln() + (qv[i] + (pm[i] - qm[i]).powi(2)) / pv[i];
        }
        0.5 * s
    }

    fn regress(b: &Array, x: &Array) -> Vec<f64> {
        let mut out = vec![0.0; b.rows() * 3];
        for j in 0..b.rows() {
            for c in 0..3 {
                out[3 * j + c] = (0..b.cols()).map(|i| b.get(j, i) * x.get(i, c)).sum();
            }
        }
        out
    }

    /// Image mean and spread of the joints `jm`, `jv` (flattened `[K,3]`).
    fn project_loop(jm: &[f64], jv: &[f64], cam: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = rodrigues([cam[1], cam[2], cam[3]]);
        let k = jm.len() / 3;
        let (mut m, mut v) = (vec![], vec![]);
        for j in 0..k {
            for c in 0..2 {
                let p: f64 = (0..3).map(|a| jm[3 * j + a] * r[a][c]).sum();
                m.push(cam[0] * p + cam[4 + c]);
                let s: f64 = (0..3).map(|a| jv[3 * j + a] * r[a][c] * r[a][c]).sum();
                v.push(cam[0].abs() * s);
            }
        }
        (m, v)
    }

    #[test]
    fn supervised_terms_match_expanded_formulas() {
        let t = toy(1);
        let w = LossWeights {
            vertex: 1.0,
            joint: 0.5,
            camera: 2.0,
            joint2d: 0.25,
            ..Default::default()
        };
        let got = supervised_losses(&t.target, &t.q, &t.prior, &t.cam, &t.b, &w).unwrap();
        let (qm, qv) = (t.q.mean.data(), t.q.variance.data());
        let (pm, pv) = (t.prior.mean.data(), t.prior.variance.data());
        let l_v = nll_loop(t.target.vertices.data(), qm, qv) + kl_loop(qm, qv, pm, pv);
        let (jm, jv) = (regress(&t.b, &t.q.mean), regress(&t.b, &t.q.variance));
        let (pjm, pjv) = (
            regress(&t.b, &t.prior.mean),
            regress(&t.b, &t.prior.variance),
        );
        let l_j = nll_loop(t.target.joints3d.data(), &jm, &jv) + kl_loop(&jm, &jv, &pjm, &pjv);
        let l_c: f64 = (0..7)
            .map(|i| (t.target.camera[i] - t.cam.mean[i]).powi(2))
            .sum();
        let (m2, v2) = project_loop(&jm, &jv, &t.cam.mean);
        let l_j2d = nll_loop(t.target.joints2d.data(), &m2, &v2);
        for (a, b) in [
            (got.l_v, l_v),
            (got.l_j, l_j),
            (got.l_c, l_c),
            (got.l_j2d, l_j2d),
        ] {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        let total = l_v + 0.5 * l_j + 2.0 * l_c + 0.25 * l_j2d;
        assert!((got.total - total).abs() <= 1e-12 * total.abs().max(1.0));
    }

    #[test]
    fn matched_distributions_give_entropy_floor() {
        let mut t = toy(2);
        t.q = DiagGaussian::new(t.prior.mean.clone(), Array::ones(&[4, 3])).unwrap();
        t.target.vertices = t.prior.mean.clone();
        t.target.camera = t.cam.mean;
        let got = supervised_losses(
            &t.target,
            &t.q,
            &t.prior,
            &t.cam,
            &t.b,
            &LossWeights::default(),
        )
        .unwrap();
        assert!((got.l_v - 12.0 * 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert_eq!(got.l_c, 0.0);
    }

    #[test]
    fn joint_kl_equals_kl_of_pushed_forward_distributions() {
        let t = toy(3);
        let qj = t.q.push_forward(&t.b);
        let pj =
            DiagGaussian::new(t.b.matmul(&t.prior.mean), t.b.matmul(&t.prior.variance)).unwrap();
        let direct = kl_diag_gaussian(&qj, &pj).unwrap();
        let got = supervised_losses(
            &t.target,
            &t.q,
            &t.prior,
            &t.cam,
            &t.b,
            &LossWeights::default(),
        )
        .unwrap();
        let nll = gaussian_nll(&t.target.joints3d, &qj).unwrap();
        assert_eq!(got.l_j, nll + direct);
    }

    #[test]
    fn weak_loss_matches_expanded_formula() {
        let t = toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps_v = normal_array(&mut rng, &[4, 3], 1.0);
        let eps_c = [0.1, -0.2, 0.3, 0.05, 0.4, -0.1, 0.2];
        let q_cam = CameraGaussian {
            mean: t.cam.mean,
            variance: [0.01, 0.02, 0.03, 0.01, 0.05, 0.02, 0.1],
        };
        let prior_cam = CameraGaussian::unit([0.7, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0]);
        let got = weak_loss(
            &t.target.joints2d,
            &t.q,
            &q_cam,
            &t.prior,
            &prior_cam,
            &t.b,
            &eps_v,
            &eps_c,
            0.7,
        )
        .unwrap();

        let (qm, qv) = (t.q.mean.data(), t.q.variance.data());
        let vs: Vec<f64> = (0..12)
            .map(|i| qm[i] + qv[i].sqrt() * eps_v.data()[i])
            .collect();
        let vs = Array::new(vec![4, 3], vs).unwrap();
        let cs: Vec<f64> = (0..7)
            .map(|i| q_cam.mean[i] + q_cam.variance[i].sqrt() * eps_c[i])
            .collect();
        let (js, jv) = (regress(&t.b, &vs), regress(&t.b, &t.q.variance));
        let (m2, v2) = project_loop(&js, &jv, &cs);
        let e = nll_loop(t.target.joints2d.data(), &m2, &v2);
        let (pm, pv) = (t.prior.mean.data(), t.prior.variance.data());
        let kv = kl_loop(qm, qv, pm, pv);
        let (jm, pjm, pjv) = (
            regress(&t.b, &t.q.mean),
            regress(&t.b, &t.prior.mean),
            regress(&t.b, &t.prior.variance),
        );
        let kj = kl_loop(&jm, &jv, &pjm, &pjv);
        let kc = kl_loop(
            &q_cam.mean,
            &q_cam.variance,
            &prior_cam.mean,
            &prior_cam.variance,
        );
        let total = e + 0.7 * (kv + kj + kc);
        for (a, b) in [
            (got.e_term, e),
            (got.kl_v, kv),
            (got.kl_j, kj),
            (got.kl_c, kc),
            (got.total, total),
        ] {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn weak_matched_case_hits_reprojection_floor() {
        let t = toy(6);
        let q = DiagGaussian::new(t.prior.mean.clone(), t.prior.variance.clone()).unwrap();
        let cam = CameraGaussian::unit([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let j3 = t.b.matmul(&q.mean);
        let (j2, _) =
            crate::camera::project_weak_perspective(&j3, &CameraParams::from_vector(&cam.mean));
        let eps = Array::zeros(&[4, 3]);
        let got = weak_loss(&j2, &q, &cam, &t.prior, &cam, &t.b, &eps, &[0.0; 7], 1.0).unwrap();
        assert_eq!((got.kl_v, got.kl_j, got.kl_c), (0.0, 0.0, 0.0));
        let jv = t.b.matmul(&q.variance);
        let floor: f64 = (0..2)
            .flat_map(|j| (0..2).map(move |c| (j, c)))
            .map(|(j, c)| 0.5 * (2.0 * PI * jv.get(j, c)).ln())
            .sum();
        assert!((got.total - floor).abs() < 1e-12);
    }

    #[test]
    fn vertex_kl_grows_with_mean_gap() {
        let t = toy(7);
        let cam = CameraGaussian::unit(t.cam.mean);
        let eps = Array::zeros(&[4, 3]);
        let mut last = -1.0;
        for step in 0..5 {
            let shift = t.prior.mean.map(|x| x + 0.3 * step as f64);
            let q = DiagGaussian::new(shift, t.q.variance.clone()).unwrap();
            let got = weak_loss(
                &t.target.joints2d,
                &q,
                &cam,
                &t.prior,
                &cam,
                &t.b,
                &eps,
                &[0.0; 7],
                1.0,
            )
            .unwrap();
            assert!(got.kl_v > last);
            last = got.kl_v;
        }
    }
}
