//! Attention-based regression of a per-vertex Gaussian.
//!
//! Tokens are rows: a vertex token is `[F | rest xyz]`, shape `[V, D+3]`, and
//! joint tokens are built the same way from the rest joints.

use rand::Rng;

use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::error::{Error, Result};
use crate::nn::{dense, normal_array, Params};

/// Vertex and joint tokens, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// `[V, D+3]`
    pub vertices: Array,
    /// `[K, D+3]`
    pub joints: Array,
}

/// Attaches rest coordinates to the broadcast global feature.
pub fn positional_encode(f: &[f64], verts0: &Array, joints0: &Array) -> TokenFeatures {
    let tokens = |pts: &Array| {
        let n = pts.rows();
        let mut data = Vec::with_capacity(n * (f.len() + 3));
        for i in 0..n {
            data.extend_from_slice(f);
            data.extend_from_slice(pts.row(i));
        }
        Array::new(vec![n, f.len() + 3], data).expect("token shape")
    };
    TokenFeatures {
        vertices: tokens(verts0),
        joints: tokens(joints0),
    }
}

/// Graph version of [`positional_encode`] for one point set; `f` is `[1, D]`.
pub fn build_tokens(g: &mut Graph, f: NodeId, points: NodeId) -> Result<NodeId, GraphError> {
    let n = g.shape(points)[0];
    let ones = g.constant(Array::ones(&[n, 1]));
    let fb = g.matmul(ones, f)?;
    g.concat(&[fb, points], 1)
}

/// Widths of one attention block: token width, query/key width and value width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub token: usize,
    pub key: usize,
    pub value: usize,
}

pub fn init_attention<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    name: &str,
    dims: AttentionDims,
    out_gain: f64,
) {
    let e = dims.token;
    let s = 1.0 / (e as f64).sqrt();
    params.insert(format!("{name}.wq"), normal_array(rng, &[e, dims.key], s));
    params.insert(format!("{name}.wk"), normal_array(rng, &[e, dims.key], s));
    params.insert(format!("{name}.wv"), normal_array(rng, &[e, dims.value], s));
    let so = out_gain / (dims.value as f64).sqrt();
    params.insert(
        format!("{name}.wo"),
        normal_array(rng, &[dims.value, e], so),
    );
}

/// Nodes of an attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    /// Row-stochastic `[queries, keys]`.
    pub scores: NodeId,
    pub out: NodeId,
}

fn attention(
    g: &mut Graph,
    name: &str,
    queries: NodeId,
    keys: NodeId,
    dims: AttentionDims,
) -> Result<AttentionNodes, GraphError> {
    let e = dims.token;
    for x in [queries, keys] {
        if g.shape(x).len() != 2 || g.shape(x)[1] != e {
            return Err(GraphError::Shape(format!(
                "{name}: tokens {:?} do not have width {e}",
                g.shape(x)
            )));
        }
    }
    let wq = g.param(&format!("{name}.wq"), &[e, dims.key])?;
    let wk = g.param(&format!("{name}.wk"), &[e, dims.key])?;
    let wv = g.param(&format!("{name}.wv"), &[e, dims.value])?;
    let wo = g.param(&format!("{name}.wo"), &[dims.value, e])?;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys, wk)?;
    let v = g.matmul(keys, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dims.key as f64).sqrt())?;
    let scores = g.softmax(logits)?;
    let attended = g.matmul(scores, v)?;
    let projected = g.matmul(attended, wo)?;
    let out = g.add(queries, projected)?;
    Ok(AttentionNodes { scores, out })
}

/// Vertex tokens attend to joint tokens; the result is added back to the vertex tokens.
pub fn cross_attention(
    g: &mut Graph,
    name: &str,
    vertex_tokens: NodeId,
    joint_tokens: NodeId,
    dims: AttentionDims,
) -> Result<AttentionNodes, GraphError> {
    attention(g, name, vertex_tokens, joint_tokens, dims)
}

/// Tokens attend to each other, with a residual connection.
pub fn self_attention(
    g: &mut Graph,
    name: &str,
    tokens: NodeId,
    dims: AttentionDims,
) -> Result<AttentionNodes, GraphError> {
    attention(g, name, tokens, tokens, dims)
}

/// Diagonal Gaussian over `N` points in 3-D; `variance` is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array,
    pub variance: Array,
}

impl DiagGaussian {
    pub fn new(mean: Array, variance: Array) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return Err(Error::Graph(GraphError::Shape(format!(
                "mean {:?} and variance {:?}",
                mean.shape(),
                variance.shape()
            ))));
        }
        if variance.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("variance must be positive".into()));
        }
        Ok(Self { mean, variance })
    }

    /// `(B mean, B variance)`, the joint-space distribution.
    pub fn push_forward(&self, regressor: &Array) -> DiagGaussian {
        DiagGaussian {
            mean: regressor.matmul(&self.mean),
            variance: regressor.matmul(&self.variance),
        }
    }
}

/// Graph nodes for a Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub variance: NodeId,
}

/// Applies a regressor `[K, N]` to mean and variance.
pub fn push_forward(
    g: &mut Graph,
    regressor: NodeId,
    q: GaussianNodes,
) -> Result<GaussianNodes, GraphError> {
    Ok(GaussianNodes {
        mean: g.matmul(regressor, q.mean)?,
        variance: g.matmul(regressor, q.variance)?,
    })
}

/// `position_gain` widens the init of the mean branch's rows that read the
/// rest coordinate; with gain 1 the first layer is nearly linear in position
/// and cannot tell fingers apart.
pub fn init_head<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    name: &str,
    token: usize,
    hidden: usize,
    logvar0: f64,
    position_gain: f64,
) {
    params.init_dense(rng, &format!("{name}.mu.fc0"), token, hidden, 1.0);
    if let Some(w) = params.get_mut(&format!("{name}.mu.fc0.w")) {
        let n = w.data().len();
        for x in &mut w.data_mut()[n - 3 * hidden..] {
            *x *= position_gain;
        }
    }
    params.init_dense(rng, &format!("{name}.mu.fc1"), hidden, 3, 0.1);
    params.init_dense(rng, &format!("{name}.logvar.fc0"), token, hidden, 1.0);
    params.init_dense(rng, &format!("{name}.logvar.fc1"), hidden, 3, 0.1);
    if let Some(b) = params.get_mut(&format!("{name}.logvar.fc1.b")) {
        b.data_mut().fill(logvar0);
    }
}

/// Independent two-layer heads for the mean and the log-variance.
///
/// The mean head predicts a displacement of the rest coordinate carried in
/// the last three token columns.
pub fn amvur_head(
    g: &mut Graph,
    name: &str,
    tokens: NodeId,
    hidden: usize,
) -> Result<GaussianNodes, GraphError> {
    let e = g.shape(tokens)[1];
    let h = dense(g, &format!("{name}.mu.fc0"), tokens, e, hidden)?;
    let h = g.tanh(h)?;
    let delta = dense(g, &format!("{name}.mu.fc1"), h, hidden, 3)?;
    let anchor = g.slice(tokens, 1, e - 3, e)?;
    let mean = g.add(anchor, delta)?;
    let h = dense(g, &format!("{name}.logvar.fc0"), tokens, e, hidden)?;
    let h = g.tanh(h)?;
    let logvar = dense(g, &format!("{name}.logvar.fc1"), h, hidden, 3)?;
    let variance = g.exp(logvar)?;
    Ok(GaussianNodes { mean, variance })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_sampled, Bindings};

    fn loop_attention(q_in: &Array, k_in: &Array, p: &Params, name: &str) -> (Array, Array) {
        let get = |s: &str| p.get(&format!("{name}.{s}")).unwrap();
        let (wq, wk, wv, wo) = (get("wq"), get("wk"), get("wv"), get("wo"));
        let (nq, nk, e, dk, dv) = (q_in.rows(), k_in.rows(), q_in.cols(), wq.cols(), wv.cols());
        let proj = |x: &Array, w: &Array, i: usize, c: usize| {
            (0..e).map(|m| x.get(i, m) * w.get(m, c)).sum::<f64>()
        };
        let mut scores = Array::zeros(&[nq, nk]);
        let mut out = q_in.clone();
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = (0..dk)
                    .map(|c| proj(q_in, wq, i, c) * proj(k_in, wk, j, c))
                    .sum::<f64>()
                    / (dk as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..nk {
                scores.set(i, j, (logits[j] - mx).exp() / z);
            }
            for c in 0..dv {
                let a: f64 = (0..nk)
                    .map(|j| scores.get(i, j) * proj(k_in, wv, j, c))
                    .sum();
                for m in 0..e {
                    out.set(i, m, out.get(i, m) + a * wo.get(c, m));
                }
            }
        }
        (scores, out)
    }

    fn random_block(
        seed: u64,
        nq: usize,
        nk: usize,
        dims: AttentionDims,
    ) -> (Params, Array, Array) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        init_attention(&mut p, &mut rng, "att", dims, 1.0);
        let a = normal_array(&mut rng, &[nq, dims.token], 1.0);
        let b = normal_array(&mut rng, &[nk, dims.token], 1.0);
        (p, a, b)
    }

    fn eval_cross(p: &Params, a: &Array, b: &Array, dims: AttentionDims) -> (Array, Array) {
        let mut g = Graph::new();
        let x = g.input("v", a.shape()).unwrap();
        let y = g.input("j", b.shape()).unwrap();
        let n = cross_attention(&mut g, "att", x, y, dims).unwrap();
        let mut bind = p.bindings();
        bind.insert("v", a);
        bind.insert("j", b);
        let vals = g.forward(&bind).unwrap();
        (vals.get(n.scores).clone(), vals.get(n.out).clone())
    }

    fn eval_self(p: &Params, a: &Array, dims: AttentionDims) -> (Array, Array) {
        let mut g = Graph::new();
        let x = g.input("x", a.shape()).unwrap();
        let n = self_attention(&mut g, "att", x, dims).unwrap();
        let mut bind = p.bindings();
        bind.insert("x", a);
        let vals = g.forward(&bind).unwrap();
        (vals.get(n.scores).clone(), vals.get(n.out).clone())
    }

    #[test]
    fn token_layout() {
        let f: Vec<f64> = (0..2048).map(|i| i as f64).collect();
        let v0 = Array::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]).unwrap();
        let j0 = Array::zeros(&[21, 3]);
        let t = positional_encode(&f, &v0, &j0);
        assert_eq!(t.joints.shape(), &[21, 2051]);
        assert_eq!(t.vertices.row(0), t.vertices.row(1));
        assert_eq!(&t.vertices.row(2)[..2048], &f[..]);
        let z = positional_encode(&[0.0; 4], &v0, &j0);
        assert_eq!(z.vertices.row(2), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn graph_tokens_match_plain_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = normal_array(&mut rng, &[1, 5], 1.0);
        let v0 = normal_array(&mut rng, &[4, 3], 1.0);
        let mut g = Graph::new();
        let fn_ = g.input("F", &[1, 5]).unwrap();
        let pn = g.input("p", &[4, 3]).unwrap();
        let t = build_tokens(&mut g, fn_, pn).unwrap();
        let vals = g
            .forward(&Bindings::new().bind("F", &f).bind("p", &v0))
            .unwrap();
        assert_eq!(vals.get(t), &positional_encode(f.data(), &v0, &v0).vertices);
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let dims = AttentionDims {
            token: 7,
            key: 4,
            value: 4,
        };
        let (p, a, b) = random_block(1, 5, 3, dims);
        let (s, out) = eval_cross(&p, &a, &b, dims);
        let (ws, wout) = loop_attention(&a, &b, &p, "att");
        assert!(s.max_abs_diff(&ws) <= 1e-12);
        assert!(out.max_abs_diff(&wout) <= 1e-12);
    }

    #[test]
    fn self_attention_matches_loop_oracle() {
        let dims = AttentionDims {
            token: 2,
            key: 2,
            value: 2,
        };
        let (p, a, _) = random_block(2, 4, 1, dims);
        let (s, out) = eval_self(&p, &a, dims);
        let (ws, wout) = loop_attention(&a, &a, &p, "att");
        assert!(s.max_abs_diff(&ws) <= 1e-12);
        assert!(out.max_abs_diff(&wout) <= 1e-12);
    }

    #[test]
    fn single_joint_and_equal_keys() {
        let dims = AttentionDims {
            token: 6,
            key: 3,
            value: 3,
        };
        let (p, a, b) = random_block(3, 5, 1, dims);
        let (s, out) = eval_cross(&p, &a, &b, dims);
        assert!(s.data().iter().all(|&x| x == 1.0));
        let delta: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|m| out.get(i, m) - a.get(i, m)).collect())
            .collect();
        for d in &delta[1..] {
            for m in 0..6 {
                assert!((d[m] - delta[0][m]).abs() < 1e-12);
            }
        }
        let row = b.row(0).to_vec();
        let same = Array::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (s, _) = eval_cross(&p, &a, &same, dims);
        assert!(s.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn equal_tokens_stay_equal() {
        let dims = AttentionDims {
            token: 4,
            key: 3,
            value: 3,
        };
        let (p, a, _) = random_block(4, 1, 1, dims);
        let row = a.row(0).to_vec();
        let x = Array::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (s, out) = eval_self(&p, &x, dims);
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn rows_are_stochastic_and_permutation_equivariant() {
        let dims = AttentionDims {
            token: 5,
            key: 4,
            value: 3,
        };
        let (p, a, _) = random_block(5, 6, 1, dims);
        let (s, out) = eval_self(&p, &a, dims);
        for i in 0..6 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
        let perm = [3usize, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| a.row(i).to_vec()).collect();
        let (_, pout) = eval_self(&p, &Array::from_rows(&rows).unwrap(), dims);
        for (new, &old) in perm.iter().enumerate() {
            for m in 0..5 {
                assert!((pout.get(new, m) - out.get(old, m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let dims = AttentionDims {
            token: 5,
            key: 4,
            value: 3,
        };
        let (mut p, a, b) = random_block(6, 4, 2, dims);
        p.insert("att.wv", Array::zeros(&[5, 3]));
        assert_eq!(eval_cross(&p, &a, &b, dims).1, a);
        assert_eq!(eval_self(&p, &a, dims).1, a);
        let (mut p, a, b) = random_block(7, 4, 2, dims);
        p.insert("att.wo", Array::zeros(&[3, 5]));
        assert_eq!(eval_cross(&p, &a, &b, dims).1, a);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 4]).unwrap();
        let y = g.input("y", &[2, 5]).unwrap();
        let dims = AttentionDims {
            token: 4,
            key: 2,
            value: 2,
        };
        assert!(matches!(
            cross_attention(&mut g, "a", x, y, dims),
            Err(GraphError::Shape(_))
        ));
    }

    #[test]
    fn constant_head_and_positive_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Params::new();
        init_head(&mut p, &mut rng, "head", 6, 5, -2.0, 3.0);
        p.insert("head.mu.fc1.w", Array::zeros(&[5, 3]));
        p.insert(
            "head.mu.fc1.b",
            Array::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        p.insert("head.logvar.fc1.w", Array::zeros(&[5, 3]));
        let x = normal_array(&mut rng, &[4, 6], 1.0);
        let mut g = Graph::new();
        let xn = g.input("x", &[4, 6]).unwrap();
        let h = amvur_head(&mut g, "head", xn, 5).unwrap();
        let mut b = p.bindings();
        b.insert("x", &x);
        let vals = g.forward(&b).unwrap();
        let (m, v) = (vals.get(h.mean), vals.get(h.variance));
        assert_eq!(m.shape(), &[4, 3]);
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(m.get(i, c), x.get(i, 3 + c) + [0.1, 0.2, 0.3][c]);
                assert_eq!(v.get(i, c), (-2.0f64).exp());
            }
        }
    }

    #[test]
    fn gaussian_rejects_non_positive_variance() {
        let m = Array::zeros(&[2, 3]);
        let mut v = Array::ones(&[2, 3]);
        v.set(1, 2, 0.0);
        assert!(matches!(DiagGaussian::new(m, v), Err(Error::Domain(_))));
    }

    #[test]
    fn full_block_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = AttentionDims {
            token: 7,
            key: 4,
            value: 4,
        };
        let mut p = Params::new();
        init_attention(&mut p, &mut rng, "cross", dims, 1.0);
        init_attention(&mut p, &mut rng, "self", dims, 1.0);
        init_head(&mut p, &mut rng, "head", 7, 6, 0.0, 1.0);
        let f = normal_array(&mut rng, &[1, 4], 1.0);
        let v0 = normal_array(&mut rng, &[5, 3], 1.0);
        let j0 = normal_array(&mut rng, &[2, 3], 1.0);
        let mut g = Graph::new();
        let fnode = g.param("F", &[1, 4]).unwrap();
        let vn = g.input("v0", &[5, 3]).unwrap();
        let jn = g.input("j0", &[2, 3]).unwrap();
        let xv = build_tokens(&mut g, fnode, vn).unwrap();
        let xj = build_tokens(&mut g, fnode, jn).unwrap();
        let c = cross_attention(&mut g, "cross", xv, xj, dims).unwrap();
        let s = self_attention(&mut g, "self", c.out, dims).unwrap();
        let h = amvur_head(&mut g, "head", s.out, 6).unwrap();
        let a = g.sum(h.mean).unwrap();
        let b = g.sum(h.variance).unwrap();
        let loss = g.add(a, b).unwrap();
        let mut bind = p.bindings();
        bind.insert("F", &f);
        bind.insert("v0", &v0);
        bind.insert("j0", &j0);
        let rep = grad_check_sampled(&g, loss, &bind, 1e-6, 30, 2).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
