use rand::Rng;

use crate::amvur::{build_tokens, init_attention, self_attention, AttentionDims};
use crate::autodiff::{Array, Bindings, Graph, GraphError, NodeId};
use crate::error::{Error, Result};
use crate::nn::{mlp2, Params};

use super::{raster_tables, RasterBuffers};

/// Per-vertex features `[F | F_map sampled at the vertex | xyz]`.
///
/// `points` are pixel positions `[V, 2]` into `fmap: [Cf, H, W]`; `f` is `[1, D]`.
pub fn build_reverse_interpolate(
    g: &mut Graph,
    points: NodeId,
    f: NodeId,
    fmap: NodeId,
    verts3d: NodeId,
) -> Result<NodeId, GraphError> {
    let sampled = g.bilinear_sample(fmap, points)?;
    let with_f = build_tokens(g, f, sampled)?;
    g.concat(&[with_f, verts3d], 1)
}

/// Plain-array version of [`build_reverse_interpolate`].
pub fn reverse_interpolate(
    points: &Array,
    f: &[f64],
    fmap: &Array,
    verts3d: &Array,
) -> Result<Array> {
    let mut g = Graph::new();
    let v = points.rows();
    let p = g.input("points", &[v, 2])?;
    let fnode = g.input("F", &[1, f.len()])?;
    let m = g.input("fmap", fmap.shape())?;
    let x = g.input("xyz", &[v, 3])?;
    let out = build_reverse_interpolate(&mut g, p, fnode, m, x)?;
    let fa = Array::new(vec![1, f.len()], f.to_vec())?;
    let b = Bindings::new()
        .bind("points", points)
        .bind("F", &fa)
        .bind("fmap", fmap)
        .bind("xyz", verts3d);
    Ok(g.forward(&b)?.get(out).clone())
}

pub fn init_texture_head<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    name: &str,
    dims: AttentionDims,
    hidden: usize,
) {
    init_attention(params, rng, &format!("{name}.attn"), dims, 1.0);
    params.init_dense(rng, &format!("{name}.rgb.fc0"), dims.token, hidden, 1.0);
    params.init_dense(rng, &format!("{name}.rgb.fc1"), hidden, 3, 0.5);
}

/// Self-attention over vertex features, then a perceptron squashed to `[0, 1]`.
pub fn build_texture_head(
    g: &mut Graph,
    name: &str,
    h: NodeId,
    dims: AttentionDims,
    hidden: usize,
) -> Result<NodeId, GraphError> {
    let att = self_attention(g, &format!("{name}.attn"), h, dims)?;
    let raw = mlp2(g, &format!("{name}.rgb"), att.out, [dims.token, hidden, 3])?;
    g.sigmoid(raw)
}

/// Barycentric colour lookup: `index` and `weight` are `[H*W, 3]` inputs
/// from [`raster_tables`]. Output `[H*W, 3]`, zero on background.
pub fn build_render(
    g: &mut Graph,
    colors: NodeId,
    index: NodeId,
    weight: NodeId,
) -> Result<NodeId, GraphError> {
    g.bary_interp(colors, index, weight)
}

/// `‖(rendered - image) ⊙ mask‖₂` with `mask: [H*W, 1]`.
pub fn build_texture_loss(
    g: &mut Graph,
    rendered: NodeId,
    image: NodeId,
    mask: NodeId,
) -> Result<NodeId, GraphError> {
    let d = g.sub(rendered, image)?;
    let d = g.mul(d, mask)?;
    let d = g.square(d)?;
    let s = g.sum(d)?;
    g.sqrt(s)
}

/// Renders per-vertex colours `[V, 3]` into an `[H, W, 3]` image.
pub fn render_colors(buf: &RasterBuffers, faces: &[[usize; 3]], colors: &Array) -> Result<Array> {
    let (idx, w) = raster_tables(buf, faces);
    let mut g = Graph::new();
    let c = g.input("colors", colors.shape())?;
    let i = g.input("index", idx.shape())?;
    let wn = g.input("weight", w.shape())?;
    let out = build_render(&mut g, c, i, wn)?;
    let b = Bindings::new()
        .bind("colors", colors)
        .bind("index", &idx)
        .bind("weight", &w);
    let img = g.forward(&b)?.get(out).clone();
    Ok(img.reshaped(&[buf.height, buf.width, 3])?)
}

/// Masked Euclidean distance between two `[H, W, 3]` images; `mask` has `H*W` entries.
pub fn texture_loss(rendered: &Array, image: &Array, mask: &[bool]) -> Result<f64> {
    if rendered.shape() != image.shape() || rendered.shape().len() != 3 || rendered.shape()[2] != 3
    {
        return Err(Error::Graph(GraphError::Shape(format!(
            "rendered {:?} vs image {:?}",
            rendered.shape(),
            image.shape()
        ))));
    }
    let n = rendered.shape()[0] * rendered.shape()[1];
    if mask.len() != n {
        return Err(Error::Graph(GraphError::Shape(format!(
            "mask of {} for {n} pixels",
            mask.len()
        ))));
    }
    let mut g = Graph::new();
    let r = g.input("r", &[n, 3])?;
    let i = g.input("i", &[n, 3])?;
    let m = g.input("m", &[n, 1])?;
    let out = build_texture_loss(&mut g, r, i, m)?;
    let ra = rendered.clone().reshaped(&[n, 3])?;
    let ia = image.clone().reshaped(&[n, 3])?;
    let ma = Array::new(
        vec![n, 1],
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let b = Bindings::new().bind("r", &ra).bind("i", &ia).bind("m", &ma);
    Ok(g.forward(&b)?.get(out).item())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::normal_array;
    use crate::rasterizer::{rasterize, ProjectedMesh};

    fn fmap() -> Array {
        // 2 channels, 3 rows, 4 cols
        Array::new(
            vec![2, 3, 4],
            (0..24).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sampling_at_centres_and_midpoints() {
        let m = fmap();
        let pts = Array::from_rows(&[[1.5, 2.5], [2.0, 0.5]]).unwrap();
        let xyz = Array::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let h = reverse_interpolate(&pts, &[9.0], &m, &xyz).unwrap();
        assert_eq!(h.shape(), &[2, 6]);
        let at = |c: usize, y: usize, x: usize| m.data()[c * 12 + y * 4 + x];
        assert_eq!(h.row(0), &[9.0, at(0, 2, 1), at(1, 2, 1), 1.0, 2.0, 3.0]);
        for c in 0..2 {
            let mid = 0.5 * (at(c, 0, 1) + at(c, 0, 2));
            assert!((h.get(1, 1 + c) - mid).abs() < 1e-15);
        }
    }

    fn scene() -> (RasterBuffers, Vec<[usize; 3]>) {
        let pm = ProjectedMesh {
            verts2d: Array::from_rows(&[[0.5, 0.5], [7.0, 1.0], [1.0, 7.5], [7.5, 7.5]]).unwrap(),
            depths: vec![1.0, 1.0, 1.0, 1.0],
            faces: vec![[0, 1, 2], [1, 3, 2]],
        };
        (rasterize(&pm, 8, 8), pm.faces)
    }

    #[test]
    fn constant_and_barycentric_colours() {
        let (buf, faces) = scene();
        let c = Array::from_rows(&[[0.2, 0.4, 0.6]; 4]).unwrap();
        let img = render_colors(&buf, &faces, &c).unwrap();
        for i in 0..64 {
            let px = &img.data()[3 * i..3 * i + 3];
            if buf.tri_id[i] >= 0 {
                for k in 0..3 {
                    assert!((px[k] - c.get(0, k)).abs() < 1e-15);
                }
            } else {
                assert_eq!(px, &[0.0, 0.0, 0.0]);
            }
        }
        let mut one = RasterBuffers::empty(1, 1);
        one.tri_id[0] = 0;
        one.bary[0] = [1.0 / 3.0; 3];
        let rgb = Array::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let img = render_colors(&one, &[[0, 1, 2]], &rgb).unwrap();
        assert!(img.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn texture_loss_examples() {
        let a = Array::full(&[2, 2, 3], 0.5);
        assert_eq!(texture_loss(&a, &a, &[true; 4]).unwrap(), 0.0);
        let b = Array::full(&[2, 2, 3], 0.1);
        assert_eq!(texture_loss(&a, &b, &[false; 4]).unwrap(), 0.0);
        let mut c = a.clone();
        c.data_mut()[3] += 0.3;
        let l = texture_loss(&c, &a, &[false, true, false, false]).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
        assert!(texture_loss(&a, &Array::zeros(&[2, 3, 3]), &[true; 4]).is_err());
    }

    #[test]
    fn zero_head_gives_logistic_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = AttentionDims {
            token: 5,
            key: 3,
            value: 3,
        };
        let mut p = Params::new();
        init_texture_head(&mut p, &mut rng, "tex", dims, 4);
        for (k, v) in p.clone().iter() {
            if !k.ends_with(".b") {
                p.insert(k.clone(), Array::zeros(v.shape()));
            }
        }
        p.insert(
            "tex.rgb.fc1.b",
            Array::new(vec![1, 3], vec![0.0, 1.0, -2.0]).unwrap(),
        );
        let mut g = Graph::new();
        let h = g.input("h", &[6, 5]).unwrap();
        let out = build_texture_head(&mut g, "tex", h, dims, 4).unwrap();
        let hv = normal_array(&mut rng, &[6, 5], 3.0);
        let mut b = p.bindings();
        b.insert("h", &hv);
        let vals = g.forward(&b).unwrap();
        let want = [0.5, 1.0 / (1.0 + (-1.0f64).exp()), 1.0 / (1.0 + 2f64.exp())];
        for i in 0..6 {
            for c in 0..3 {
                assert!((vals.get(out).get(i, c) - want[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn texture_loss_gradient_through_head() {
        let (buf, faces) = scene();
        let (idx, w) = raster_tables(&buf, &faces);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = AttentionDims {
            token: 5,
            key: 3,
            value: 3,
        };
        let mut p = Params::new();
        init_texture_head(&mut p, &mut rng, "tex", dims, 4);
        let mut g = Graph::new();
        let h = g.input("h", &[4, 5]).unwrap();
        let colors = build_texture_head(&mut g, "tex", h, dims, 4).unwrap();
        let i = g.input("index", &[64, 3]).unwrap();
        let wn = g.input("weight", &[64, 3]).unwrap();
        let r = build_render(&mut g, colors, i, wn).unwrap();
        let img = g.input("image", &[64, 3]).unwrap();
        let m = g.input("mask", &[64, 1]).unwrap();
        let loss = build_texture_loss(&mut g, r, img, m).unwrap();
        let hv = normal_array(&mut rng, &[4, 5], 1.0);
        let iv = normal_array(&mut rng, &[64, 3], 0.3).map(|x| x + 0.5);
        let mv = Array::new(
            vec![64, 1],
            buf.tri_id
                .iter()
                .map(|&t| if t >= 0 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let mut b = p.bindings();
        for (k, v) in [
            ("h", &hv),
            ("index", &idx),
            ("weight", &w),
            ("image", &iv),
            ("mask", &mv),
        ] {
            b.insert(k, v);
        }
        let rep = grad_check(&g, loss, &b, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
