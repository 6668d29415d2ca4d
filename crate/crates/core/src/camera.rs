//! Weak-perspective camera.
//!
//! Points are rows. A camera `(s, r, T)` maps `X` to `s (X R(r))[:, :2] + (T1, T2)`,
//! and the third column of `s X R` is the depth, smaller values nearer.

use rand::Rng;

use crate::autodiff::{rotation_matrix, Array, Graph, GraphError, NodeId};
use crate::nn::{dense, Params};

/// Number of entries in a flattened camera: scale, axis-angle, translation.
pub const CAMERA_DIM: usize = 7;

/// Rotation matrix for an axis-angle vector in radians.
pub fn rodrigues(r: [f64; 3]) -> [[f64; 3]; 3] {
    rotation_matrix(r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub scale: f64,
    pub rotation: [f64; 3],
    /// Only the first two components enter the projection.
    pub translation: [f64; 3],
}

impl CameraParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn to_vector(&self) -> [f64; CAMERA_DIM] {
        let (r, t) = (self.rotation, self.translation);
        [self.scale, r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            scale: v[0],
            rotation: [v[1], v[2], v[3]],
            translation: [v[4], v[5], v[6]],
        }
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![1, CAMERA_DIM], self.to_vector().to_vec()).expect("camera shape")
    }
}

/// Projects `[N, 3]` points, returning `[N, 2]` image coordinates and `[N]` depths.
pub fn project_weak_perspective(points: &Array, cam: &CameraParams) -> (Array, Vec<f64>) {
    let r = rodrigues(cam.rotation);
    let n = points.rows();
    let mut out = Array::zeros(&[n, 2]);
    let mut depth = Vec::with_capacity(n);
    for i in 0..n {
        let p = points.row(i);
        let mut q = [0.0; 3];
        for (c, qc) in q.iter_mut().enumerate() {
            *qc = cam.scale * (p[0] * r[0][c] + p[1] * r[1][c] + p[2] * r[2][c]);
        }
        out.set(i, 0, q[0] + cam.translation[0]);
        out.set(i, 1, q[1] + cam.translation[1]);
        depth.push(q[2]);
    }
    (out, depth)
}

/// Projection nodes from [`build_projection`].
#[derive(Clone, Copy, Debug)]
pub struct ProjectionNodes {
    /// `[N, 2]`
    pub points2d: NodeId,
    /// `[N, 1]`
    pub depth: NodeId,
    /// `[3, 3]`
    pub rotation: NodeId,
    /// `[1, 1]`
    pub scale: NodeId,
}

/// Graph version of [`project_weak_perspective`] with `cam: [1, 7]`.
pub fn build_projection(
    g: &mut Graph,
    points: NodeId,
    cam: NodeId,
) -> Result<ProjectionNodes, GraphError> {
    let scale = g.slice(cam, 1, 0, 1)?;
    let r = g.slice(cam, 1, 1, 4)?;
    let rot = g.rodrigues(r)?;
    let rotation = g.reshape(rot, &[3, 3])?;
    let xr = g.matmul(points, rotation)?;
    let scaled = g.mul(xr, scale)?;
    let t = g.slice(cam, 1, 4, 6)?;
    let xy = g.slice(scaled, 1, 0, 2)?;
    let points2d = g.add(xy, t)?;
    let depth = g.slice(scaled, 1, 2, 3)?;
    Ok(ProjectionNodes {
        points2d,
        depth,
        rotation,
        scale,
    })
}

/// Gaussian over the flattened camera vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraGaussian {
    pub mean: [f64; CAMERA_DIM],
    pub variance: [f64; CAMERA_DIM],
}

impl CameraGaussian {
    pub fn unit(mean: [f64; CAMERA_DIM]) -> Self {
        Self {
            mean,
            variance: [1.0; CAMERA_DIM],
        }
    }

    pub fn params(&self) -> CameraParams {
        CameraParams::from_vector(&self.mean)
    }
}

/// Nodes of a camera head: `mean` is `[1, 7]` with the scale already positive.
#[derive(Clone, Copy, Debug)]
pub struct CameraNodes {
    pub mean: NodeId,
    /// `[1, 7]` log-variance, present when the head was built with one.
    pub logvar: Option<NodeId>,
}

/// Initializes a camera head under `name`. The scale bias starts at
/// `ln(scale0)`; the log-variance bias, if any, at `logvar0`.
pub fn init_camera_head<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    name: &str,
    d: usize,
    hidden: usize,
    scale0: f64,
    logvar0: Option<f64>,
) {
    params.init_dense(rng, &format!("{name}.fc0"), d, hidden, 1.0);
    params.init_dense(rng, &format!("{name}.fc1"), hidden, CAMERA_DIM, 0.1);
    if let Some(b) = params.get_mut(&format!("{name}.fc1.b")) {
        b.data_mut()[0] = scale0.ln();
    }
    if let Some(lv) = logvar0 {
        params.init_dense(rng, &format!("{name}.logvar"), hidden, CAMERA_DIM, 0.0);
        if let Some(b) = params.get_mut(&format!("{name}.logvar.b")) {
            b.data_mut().fill(lv);
        }
    }
}

/// Two-layer perceptron from `f: [1, D]` to the camera mean, scale through `exp`.
pub fn build_camera_head(
    g: &mut Graph,
    name: &str,
    f: NodeId,
    d: usize,
    hidden: usize,
    with_logvar: bool,
) -> Result<CameraNodes, GraphError> {
    let h = dense(g, &format!("{name}.fc0"), f, d, hidden)?;
    let h = g.tanh(h)?;
    let raw = dense(g, &format!("{name}.fc1"), h, hidden, CAMERA_DIM)?;
    let s = g.slice(raw, 1, 0, 1)?;
    let s = g.exp(s)?;
    let rest = g.slice(raw, 1, 1, CAMERA_DIM)?;
    let mean = g.concat(&[s, rest], 1)?;
    let logvar = if with_logvar {
        Some(dense(g, &format!("{name}.logvar"), h, hidden, CAMERA_DIM)?)
    } else {
        None
    };
    Ok(CameraNodes { mean, logvar })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, Bindings};

    fn close(a: [[f64; 3]; 3], b: [[f64; 3]; 3], tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    #[test]
    fn reference_rotations() {
        let pi = std::f64::consts::PI;
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(rodrigues([0.0; 3]), eye);
        assert!(close(
            rodrigues([pi, 0.0, 0.0]),
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            1e-15
        ));
        assert!(close(
            rodrigues([0.0, 0.0, pi / 2.0]),
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            1e-15
        ));
    }

    proptest! {
        #[test]
        fn opposite_rotations_cancel(x in -4.0..4.0f64, y in -4.0..4.0f64, z in -4.0..4.0f64) {
            let a = rodrigues([x, y, z]);
            let b = rodrigues([-x, -y, -z]);
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|m| a[i][m] * b[m][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((v - want).abs() <= 1e-10);
                }
            }
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            prop_assert!((det - 1.0).abs() < 1e-10);
        }

        #[test]
        fn projection_is_linear_in_scale(
            s in 0.1..3.0f64,
            r in prop::array::uniform3(-2.0..2.0f64),
            p in prop::array::uniform3(-5.0..5.0f64),
        ) {
            let pts = Array::new(vec![1, 3], p.to_vec()).unwrap();
            let c1 = CameraParams { scale: s, rotation: r, translation: [0.0; 3] };
            let c2 = CameraParams { scale: 2.0 * s, ..c1 };
            let (a, _) = project_weak_perspective(&pts, &c1);
            let (b, _) = project_weak_perspective(&pts, &c2);
            for i in 0..2 {
                prop_assert_eq!(b.data()[i], 2.0 * a.data()[i]);
            }
        }
    }

    #[test]
    fn identity_camera_drops_depth_and_affine_case() {
        let pts = Array::from_rows(&[[1.0, 2.0, 3.0], [1.0, 1.0, 5.0]]).unwrap();
        let (p, d) = project_weak_perspective(&pts, &CameraParams::identity());
        assert_eq!(p.data(), &[1.0, 2.0, 1.0, 1.0]);
        assert_eq!(d, vec![3.0, 5.0]);
        let cam = CameraParams {
            scale: 2.0,
            rotation: [0.0; 3],
            translation: [3.0, 4.0, 9.0],
        };
        let (p, _) = project_weak_perspective(&pts, &cam);
        assert_eq!(p.row(1), &[5.0, 6.0]);
    }

    #[test]
    fn graph_projection_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = crate::nn::normal_array(&mut rng, &[6, 3], 1.0);
        let cam = CameraParams {
            scale: 0.7,
            rotation: [0.4, -1.2, 0.3],
            translation: [0.1, -0.2, 0.5],
        };
        let mut g = Graph::new();
        let x = g.input("x", &[6, 3]).unwrap();
        let c = g.input("cam", &[1, 7]).unwrap();
        let pn = build_projection(&mut g, x, c).unwrap();
        let cv = cam.to_array();
        let vals = g
            .forward(&Bindings::new().bind("x", &pts).bind("cam", &cv))
            .unwrap();
        let (want, depth) = project_weak_perspective(&pts, &cam);
        let r = rodrigues(cam.rotation);
        for i in 0..6 {
            let p = pts.row(i);
            for c in 0..2 {
                let direct =
                    cam.scale * (0..3).map(|m| p[m] * r[m][c]).sum::<f64>() + cam.translation[c];
                assert!((vals.get(pn.points2d).get(i, c) - direct).abs() <= 1e-12);
                assert!((want.get(i, c) - direct).abs() <= 1e-12);
            }
            assert!((vals.get(pn.depth).get(i, 0) - depth[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_constant_when_weights_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new();
        init_camera_head(&mut p, &mut rng, "cam", 4, 5, 0.5, Some(-3.0));
        p.insert("cam.fc1.w", Array::zeros(&[5, 7]));
        let mut g = Graph::new();
        let f = g.input("F", &[1, 4]).unwrap();
        let nodes = build_camera_head(&mut g, "cam", f, 4, 5, true).unwrap();
        let fv = crate::nn::normal_array(&mut rng, &[1, 4], 1.0);
        let mut b = p.bindings();
        b.insert("F", &fv);
        let vals = g.forward(&b).unwrap();
        let m = vals.get(nodes.mean);
        assert!((m.data()[0] - 0.5).abs() < 1e-15);
        assert!(m.data()[1..].iter().all(|&v| v == 0.0));
        assert!(vals
            .get(nodes.logvar.unwrap())
            .data()
            .iter()
            .all(|&v| v == -3.0));
    }

    #[test]
    fn camera_loss_gradient_through_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        init_camera_head(&mut p, &mut rng, "cam", 4, 6, 0.8, None);
        let mut g = Graph::new();
        let f = g.input("F", &[1, 4]).unwrap();
        let nodes = build_camera_head(&mut g, "cam", f, 4, 6, false).unwrap();
        let target = g.input("cbar", &[1, 7]).unwrap();
        let d = g.sub(target, nodes.mean).unwrap();
        let d = g.square(d).unwrap();
        let loss = g.sum(d).unwrap();
        let fv = crate::nn::normal_array(&mut rng, &[1, 4], 1.0);
        let tv = crate::nn::normal_array(&mut rng, &[1, 7], 1.0);
        let mut b = p.bindings();
        b.insert("F", &fv);
        b.insert("cbar", &tv);
        let rep = grad_check(&g, loss, &b, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
