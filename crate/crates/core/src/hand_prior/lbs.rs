use crate::autodiff::{Array, Bindings, Graph, GraphError, NodeId};
use crate::error::{Error, Result};

use super::HandTemplate;

/// Output nodes of a skinning subgraph.
#[derive(Clone, Copy, Debug)]
pub struct LbsNodes {
    /// `[V, 3]`
    pub vertices: NodeId,
    /// `[K, 3]`, always `B · vertices`.
    pub joints: NodeId,
}

/// Adds linear blend skinning to `g`.
///
/// `shape` is `[1, S]` and `pose` is `[K, 3]` axis-angle per joint. Points are
/// rows; joint `k` maps `x` to `((x - J_k) R_kᵀ + J_k) A_p + t_p` where
/// `(A_p, t_p)` is its parent's global transform.
pub fn build_lbs(
    g: &mut Graph,
    t: &HandTemplate,
    shape: NodeId,
    pose: NodeId,
) -> Result<LbsNodes, GraphError> {
    let (v, k) = (t.vertex_count, t.joint_count);
    let tv = g.constant(t.template_vertices.clone());
    let sdirs = g.constant(t.shape_blendshapes.transpose());
    let shape_off = g.matmul(shape, sdirs)?;
    let shape_off = g.reshape(shape_off, &[v, 3])?;
    let v_shaped = g.add(tv, shape_off)?;
    let breg = g.constant(t.joint_regressor.clone());
    let rest_j = g.matmul(breg, v_shaped)?;

    let rot = g.rodrigues(pose)?;
    let child_rot = g.slice(rot, 0, 1, k)?;
    let eye = g.constant(Array::new(vec![1, 9], Array::identity(3).into_data())?);
    let feat = g.sub(child_rot, eye)?;
    let feat = g.reshape(feat, &[1, 9 * (k - 1)])?;
    let pdirs = g.constant(t.pose_blendshapes.transpose());
    let pose_off = g.matmul(feat, pdirs)?;
    let pose_off = g.reshape(pose_off, &[v, 3])?;
    let v_posed = g.add(v_shaped, pose_off)?;

    let mut rots: Vec<NodeId> = Vec::with_capacity(k);
    let mut trans: Vec<NodeId> = Vec::with_capacity(k);
    for j in 0..k {
        let r = g.slice(rot, 0, j, j + 1)?;
        let r = g.reshape(r, &[3, 3])?;
        let rt = g.transpose(r)?;
        let jk = g.slice(rest_j, 0, j, j + 1)?;
        let jr = g.matmul(jk, rt)?;
        let local = g.sub(jk, jr)?;
        match t.kinematic_parents[j] {
            None => {
                rots.push(rt);
                trans.push(local);
            }
            Some(p) => {
                let a = g.matmul(rt, rots[p])?;
                let moved = g.matmul(local, rots[p])?;
                let tr = g.add(moved, trans[p])?;
                rots.push(a);
                trans.push(tr);
            }
        }
    }

    let all_rot = g.concat(&rots, 1)?;
    let rotated = g.matmul(v_posed, all_rot)?;
    let mut wexp = Array::zeros(&[v, 3 * k]);
    for i in 0..v {
        for j in 0..k {
            let w = t.skinning_weights.get(i, j);
            for c in 0..3 {
                wexp.set(i, 3 * j + c, w);
            }
        }
    }
    let wexp = g.constant(wexp);
    let weighted = g.mul(rotated, wexp)?;
    let mut fold = Array::zeros(&[3 * k, 3]);
    for j in 0..k {
        for c in 0..3 {
            fold.set(3 * j + c, c, 1.0);
        }
    }
    let fold = g.constant(fold);
    let linear = g.matmul(weighted, fold)?;
    let all_trans = g.concat(&trans, 0)?;
    let skin = g.constant(t.skinning_weights.clone());
    let offsets = g.matmul(skin, all_trans)?;
    let vertices = g.add(linear, offsets)?;
    let joints = g.matmul(breg, vertices)?;
    Ok(LbsNodes { vertices, joints })
}

/// Skinned vertices `[V, 3]` and joints `[K, 3]` for the given coefficients.
pub fn lbs_forward(t: &HandTemplate, shape_coeffs: &[f64], pose: &Array) -> Result<(Array, Array)> {
    let (k, s) = (t.joint_count, t.shape_count());
    if shape_coeffs.len() != s {
        return Err(Error::Graph(GraphError::Shape(format!(
            "expected {s} shape coefficients, got {}",
            shape_coeffs.len()
        ))));
    }
    if pose.shape() != [k, 3] {
        return Err(Error::Graph(GraphError::Shape(format!(
            "pose must be [{k}, 3], got {:?}",
            pose.shape()
        ))));
    }
    if shape_coeffs
        .iter()
        .chain(pose.data())
        .any(|x| !x.is_finite())
    {
        return Err(Error::Numeric("non-finite skinning coefficients".into()));
    }
    let mut g = Graph::new();
    let sn = g.input("shape", &[1, s])?;
    let pn = g.input("pose", &[k, 3])?;
    let out = build_lbs(&mut g, t, sn, pn)?;
    let sv = Array::new(vec![1, s], shape_coeffs.to_vec())?;
    let b = Bindings::new().bind("shape", &sv).bind("pose", pose);
    let vals = g.forward(&b)?;
    Ok((vals.get(out.vertices).clone(), vals.get(out.joints).clone()))
}

/// Rest vertices and joints: skinning with all-zero coefficients.
pub fn rest_coords(t: &HandTemplate) -> (Array, Array) {
    lbs_forward(
        t,
        &vec![0.0; t.shape_count()],
        &Array::zeros(&[t.joint_count, 3]),
    )
    .expect("valid template has well-formed rest pose")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::hand_prior::synthetic::{paddle_hand, toy_hand};

    type M3 = [[f64; 3]; 3];

    fn rot3(r: [f64; 3]) -> M3 {
        let th = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if th == 0.0 {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        }
        let a = [r[0] / th, r[1] / th, r[2] / th];
        let (s, c) = th.sin_cos();
        let mut m = [[0.0; 3]; 3];
        let kx = [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                m[i][j] = c * id + s * kx[i][j] + (1.0 - c) * a[i] * a[j];
            }
        }
        m
    }

    /// Column-convention homogeneous chain evaluated vertex by vertex.
    fn oracle(t: &HandTemplate, shape: &[f64], pose: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let (v, k) = (t.vertex_count, t.joint_count);
        let mut shaped = vec![[0.0; 3]; v];
        for i in 0..v {
            for c in 0..3 {
                let mut x = t.template_vertices.get(i, c);
                for (si, &b) in shape.iter().enumerate() {
                    x += b * t.shape_blendshapes.get(3 * i + c, si);
                }
                shaped[i][c] = x;
            }
        }
        let mut joints = vec![[0.0; 3]; k];
        for j in 0..k {
            for i in 0..v {
                for c in 0..3 {
                    joints[j][c] += t.joint_regressor.get(j, i) * shaped[i][c];
                }
            }
        }
        let rots: Vec<M3> = pose.iter().map(|&r| rot3(r)).collect();
        let mut feat = Vec::new();
        for r in &rots[1..] {
            for a in 0..3 {
                for b in 0..3 {
                    feat.push(r[a][b] - if a == b { 1.0 } else { 0.0 });
                }
            }
        }
        let mut posed = shaped.clone();
        for i in 0..v {
            for c in 0..3 {
                for (p, f) in feat.iter().enumerate() {
                    posed[i][c] += f * t.pose_blendshapes.get(3 * i + c, p);
                }
            }
        }
        // global 3x4 transforms [R | t]
        let mut glob: Vec<([[f64; 3]; 3], [f64; 3])> = Vec::new();
        for j in 0..k {
            let r = rots[j];
            let jj = joints[j];
            let mut tl = [0.0; 3];
            for a in 0..3 {
                tl[a] = jj[a] - (0..3).map(|b| r[a][b] * jj[b]).sum::<f64>();
            }
            let g = match t.kinematic_parents[j] {
                None => (r, tl),
                Some(p) => {
                    let (pr, pt) = glob[p];
                    let mut gr = [[0.0; 3]; 3];
                    let mut gt = pt;
                    for a in 0..3 {
                        for b in 0..3 {
                            gr[a][b] = (0..3).map(|m| pr[a][m] * r[m][b]).sum();
                            gt[a] += pr[a][b] * tl[b];
                        }
                    }
                    (gr, gt)
                }
            };
            glob.push(g);
        }
        (0..v)
            .map(|i| {
                let mut out = [0.0; 3];
                for j in 0..k {
                    let w = t.skinning_weights.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let (r, tr) = glob[j];
                    for a in 0..3 {
                        let x: f64 = (0..3).map(|b| r[a][b] * posed[i][b]).sum::<f64>() + tr[a];
                        out[a] += w * x;
                    }
                }
                out
            })
            .collect()
    }

    fn pose_array(p: &[[f64; 3]]) -> Array {
        Array::new(vec![p.len(), 3], p.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn rest_pose_reproduces_template() {
        for t in [paddle_hand(), toy_hand()] {
            let (v, j) = rest_coords(&t);
            assert_eq!(v, t.template_vertices);
            assert_eq!(j, t.joint_regressor.matmul(&t.template_vertices));
        }
    }

    #[test]
    fn unit_shape_coefficient_adds_first_blendshape() {
        let t = paddle_hand();
        let mut beta = vec![0.0; t.shape_count()];
        beta[0] = 1.0;
        let (v, _) = lbs_forward(&t, &beta, &Array::zeros(&[t.joint_count, 3])).unwrap();
        for i in 0..t.vertex_count {
            for c in 0..3 {
                let want = t.template_vertices.get(i, c) + t.shape_blendshapes.get(3 * i + c, 0);
                assert!((v.get(i, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_rigid_oracle() {
        let t = paddle_hand();
        let mut pose = vec![[0.0; 3]; t.joint_count];
        pose[5] = [std::f64::consts::FRAC_PI_2, 0.0, 0.0];
        let (v, _) = lbs_forward(&t, &[0.0; 4], &pose_array(&pose)).unwrap();
        let want = oracle(&t, &[0.0; 4], &pose);
        let mut checked = 0;
        for i in 0..t.vertex_count {
            if t.skinning_weights.row(i).iter().any(|&w| w == 1.0) {
                for c in 0..3 {
                    assert!((v.get(i, c) - want[i][c]).abs() <= 1e-12);
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn random_poses_match_oracle_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [paddle_hand(), toy_hand()] {
            for _ in 0..3 {
                let pose: Vec<[f64; 3]> = (0..t.joint_count)
                    .map(|_| {
                        [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]
                    })
                    .collect();
                let beta: Vec<f64> = (0..t.shape_count())
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect();
                let (v, _) = lbs_forward(&t, &beta, &pose_array(&pose)).unwrap();
                let want = oracle(&t, &beta, &pose);
                for i in 0..t.vertex_count {
                    for c in 0..3 {
                        assert!((v.get(i, c) - want[i][c]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn root_rotation_rotates_everything_about_root() {
        let t = paddle_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pose: Vec<[f64; 3]> = (0..t.joint_count)
            .map(|_| {
                [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ]
            })
            .collect();
        pose[0] = [0.0; 3];
        let (base, _) = lbs_forward(&t, &[0.0; 4], &pose_array(&pose)).unwrap();
        let r = [0.3, -1.1, 0.7];
        pose[0] = r;
        let (rotv, _) = lbs_forward(&t, &[0.0; 4], &pose_array(&pose)).unwrap();
        let q = rot3(r);
        let (_, rest_j) = rest_coords(&t);
        let root: Vec<f64> = rest_j.row(0).to_vec();
        for i in 0..t.vertex_count {
            for a in 0..3 {
                let want: f64 = (0..3)
                    .map(|b| q[a][b] * (base.get(i, b) - root[b]))
                    .sum::<f64>()
                    + root[a];
                assert!((rotv.get(i, a) - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn joints_are_regressed_from_returned_vertices() {
        let t = paddle_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = Array::new(
            vec![t.joint_count, 3],
            (0..t.joint_count * 3)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let (v, j) = lbs_forward(&t, &[0.5, -0.2, 0.1, 0.3], &pose).unwrap();
        assert_eq!(j, t.joint_regressor.matmul(&v));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let t = toy_hand();
        let mut pose = Array::zeros(&[3, 3]);
        pose.set(1, 1, f64::NAN);
        assert!(matches!(
            lbs_forward(&t, &[0.0, 0.0], &pose),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = toy_hand();
        let mut g = Graph::new();
        let s = g.param("shape", &[1, 2]).unwrap();
        let p = g.param("pose", &[3, 3]).unwrap();
        let out = build_lbs(&mut g, &t, s, p).unwrap();
        let w = g.constant(
            Array::new(
                vec![12, 3],
                (0..36).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
        );
        let prod = g.mul(out.vertices, w).unwrap();
        let a = g.sum(prod).unwrap();
        let jsq = g.square(out.joints).unwrap();
        let b = g.sum(jsq).unwrap();
        let loss = g.add(a, b).unwrap();
        let sv = Array::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let pv = Array::new(
            vec![3, 3],
            vec![0.2, -0.1, 0.4, 0.5, 0.3, -0.2, -0.6, 0.1, 0.25],
        )
        .unwrap();
        let bind = Bindings::new().bind("shape", &sv).bind("pose", &pv);
        let rep = grad_check(&g, loss, &bind, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
