//! Forward and vector-Jacobian kernels for every [`Op`].

use super::array::matmul_into;
use super::graph::{Op, Unary};
use super::Array;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat input offset for every flat output index under broadcasting.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + r - inp.len();
        strides[oi] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let n: usize = out.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

fn binary_forward(a: &Array, b: &Array, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Array {
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        let oa = broadcast_offsets(shape, a.shape());
        let ob = broadcast_offsets(shape, b.shape());
        oa.iter()
            .zip(&ob)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect()
    };
    Array::new(shape.to_vec(), data).expect("broadcast shape")
}

/// Sums `g` (shaped like the broadcast output) back onto `shape`.
fn reduce_to(
    g: &[f64],
    out_shape: &[usize],
    shape: &[usize],
    f: impl Fn(usize, f64) -> f64,
) -> Array {
    let mut acc = Array::zeros(shape);
    if out_shape == shape {
        for (i, (a, &gv)) in acc.data_mut().iter_mut().zip(g).enumerate() {
            *a = f(i, gv);
        }
    } else {
        let offs = broadcast_offsets(out_shape, shape);
        let d = acc.data_mut();
        for (i, (&o, &gv)) in offs.iter().zip(g).enumerate() {
            d[o] += f(i, gv);
        }
    }
    acc
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn forward(op: &Op, x: &[&Array], shape: &[usize]) -> Array {
    let mk = |data: Vec<f64>| Array::new(shape.to_vec(), data).expect("kernel output shape");
    match op {
        Op::Param(_) | Op::Input(_) | Op::Const(_) => unreachable!("leaves are not computed"),
        Op::Add(..) => binary_forward(x[0], x[1], shape, |a, b| a + b),
        Op::Sub(..) => binary_forward(x[0], x[1], shape, |a, b| a - b),
        Op::Mul(..) => binary_forward(x[0], x[1], shape, |a, b| a * b),
        Op::Div(..) => binary_forward(x[0], x[1], shape, |a, b| a / b),
        Op::Unary(u, _) => {
            let f: fn(f64) -> f64 = match u {
                Unary::Neg => |v| -v,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Sqrt => f64::sqrt,
                Unary::Square => |v| v * v,
                Unary::Reciprocal => |v| 1.0 / v,
                Unary::Tanh => f64::tanh,
                Unary::Sigmoid => sigmoid,
                Unary::Abs => f64::abs,
            };
            x[0].map(f)
        }
        Op::Affine { scale, shift, .. } => x[0].map(|v| scale * v + shift),
        Op::Sum(_) => Array::scalar(x[0].sum()),
        Op::Mean(_) => Array::scalar(x[0].sum() / x[0].len() as f64),
        Op::SumAxis { axis, .. } => {
            let (outer, n, inner) = outer_inner(x[0].shape(), *axis);
            let src = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += src[base + i];
                    }
                }
            }
            mk(out)
        }
        Op::MatMul(..) => {
            let (m, k, n) = (x[0].rows(), x[0].cols(), x[1].cols());
            let mut out = vec![0.0; m * n];
            matmul_into(x[0].data(), x[1].data(), &mut out, m, k, n);
            mk(out)
        }
        Op::Transpose(_) => x[0].transpose(),
        Op::Reshape(_) => mk(x[0].data().to_vec()),
        Op::Concat { axis, .. } => {
            let (outer, _, inner) = outer_inner(shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for part in x {
                    let len = part.shape()[*axis] * inner;
                    out.extend_from_slice(&part.data()[o * len..(o + 1) * len]);
                }
            }
            mk(out)
        }
        Op::Slice {
            axis, start, end, ..
        } => {
            let (outer, n, inner) = outer_inner(x[0].shape(), *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                let base = o * n * inner;
                out.extend_from_slice(&x[0].data()[base + start * inner..base + end * inner]);
            }
            mk(out)
        }
        Op::Softmax(_) => {
            let n = *shape.last().unwrap();
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(n) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            mk(out)
        }
        Op::Conv2d { stride, pad, .. } => {
            mk(conv2d_forward(x[0], x[1], x[2], *stride, *pad, shape))
        }
        Op::BilinearSample { .. } => {
            let (map, pts) = (x[0], x[1]);
            let c = map.shape()[0];
            let mut out = vec![0.0; pts.rows() * c];
            for p in 0..pts.rows() {
                let s = BilinearTap::new(map.shape(), pts.get(p, 0), pts.get(p, 1));
                for ch in 0..c {
                    out[p * c + ch] = s.sample(map.data(), ch);
                }
            }
            mk(out)
        }
        Op::Rodrigues(_) => {
            let mut out = Vec::with_capacity(x[0].rows() * 9);
            for r in 0..x[0].rows() {
                let rot = rodrigues(x[0].row(r).try_into().unwrap());
                out.extend(rot.iter().flatten());
            }
            mk(out)
        }
        Op::BaryInterp { .. } => {
            let (src, idx, w) = (x[0], x[1], x[2]);
            let c = src.cols();
            let taps = idx.cols();
            let mut out = vec![0.0; idx.rows() * c];
            for m in 0..idx.rows() {
                for t in 0..taps {
                    let v = idx.get(m, t);
                    if v < 0.0 {
                        continue;
                    }
                    let wt = w.get(m, t);
                    let row = src.row(v as usize);
                    for (o, s) in out[m * c..(m + 1) * c].iter_mut().zip(row) {
                        *o += wt * s;
                    }
                }
            }
            mk(out)
        }
    }
}

/// Returns one optional gradient per input (None where not requested).
pub(crate) fn backward(
    op: &Op,
    x: &[&Array],
    y: &Array,
    g: &Array,
    wanted: &[bool],
) -> Vec<Option<Array>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let gd = g.data();
    match op {
        Op::Param(_) | Op::Input(_) | Op::Const(_) => vec![],
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) | Op::Div(..) => {
            let (a, b) = (x[0], x[1]);
            let out_shape = g.shape();
            let oa = (a.shape() != out_shape).then(|| broadcast_offsets(out_shape, a.shape()));
            let ob = (b.shape() != out_shape).then(|| broadcast_offsets(out_shape, b.shape()));
            let av = |i: usize| a.data()[oa.as_ref().map_or(i, |o| o[i])];
            let bv = |i: usize| b.data()[ob.as_ref().map_or(i, |o| o[i])];
            let ga = want(0).then(|| match op {
                Op::Add(..) | Op::Sub(..) => reduce_to(gd, out_shape, a.shape(), |_, gv| gv),
                Op::Mul(..) => reduce_to(gd, out_shape, a.shape(), |i, gv| gv * bv(i)),
                _ => reduce_to(gd, out_shape, a.shape(), |i, gv| gv / bv(i)),
            });
            let gb = want(1).then(|| match op {
                Op::Add(..) => reduce_to(gd, out_shape, b.shape(), |_, gv| gv),
                Op::Sub(..) => reduce_to(gd, out_shape, b.shape(), |_, gv| -gv),
                Op::Mul(..) => reduce_to(gd, out_shape, b.shape(), |i, gv| gv * av(i)),
                _ => reduce_to(gd, out_shape, b.shape(), |i, gv| {
                    let q = bv(i);
                    -gv * av(i) / (q * q)
                }),
            });
            vec![ga, gb]
        }
        Op::Unary(u, _) => {
            let xs = x[0].data();
            let ys = y.data();
            let data: Vec<f64> = (0..gd.len())
                .map(|i| {
                    let (gv, xv, yv) = (gd[i], xs[i], ys[i]);
                    match u {
                        Unary::Neg => -gv,
                        Unary::Exp => gv * yv,
                        Unary::Log => gv / xv,
                        Unary::Sqrt => {
                            if yv == 0.0 {
                                0.0
                            } else {
                                0.5 * gv / yv
                            }
                        }
                        Unary::Square => 2.0 * xv * gv,
                        Unary::Reciprocal => -gv * yv * yv,
                        Unary::Tanh => gv * (1.0 - yv * yv),
                        Unary::Sigmoid => gv * yv * (1.0 - yv),
                        Unary::Abs => {
                            if xv > 0.0 {
                                gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        }
                    }
                })
                .collect();
            vec![Some(like(x[0], data))]
        }
        Op::Affine { scale, .. } => vec![Some(like(x[0], gd.iter().map(|v| v * scale).collect()))],
        Op::Sum(_) => vec![Some(Array::full(x[0].shape(), gd[0]))],
        Op::Mean(_) => vec![Some(Array::full(x[0].shape(), gd[0] / x[0].len() as f64))],
        Op::SumAxis { axis, .. } => {
            let (outer, n, inner) = outer_inner(x[0].shape(), *axis);
            let mut out = vec![0.0; x[0].len()];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    out[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(like(x[0], out))]
        }
        Op::MatMul(..) => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let ga = want(0).then(|| {
                let mut out = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data()[p * n..(p + 1) * n];
                        out[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                    }
                }
                like(a, out)
            });
            let gb = want(1).then(|| {
                let mut out = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                like(b, out)
            });
            vec![ga, gb]
        }
        Op::Transpose(_) => vec![Some(g.transpose())],
        Op::Reshape(_) => vec![Some(like(x[0], gd.to_vec()))],
        Op::Concat { axis, .. } => {
            let (outer, _, inner) = outer_inner(g.shape(), *axis);
            let total = g.shape()[*axis] * inner;
            let mut res = Vec::with_capacity(x.len());
            let mut offset = 0;
            for (pi, part) in x.iter().enumerate() {
                let len = part.shape()[*axis] * inner;
                if want(pi) {
                    let mut out = Vec::with_capacity(part.len());
                    for o in 0..outer {
                        let base = o * total + offset;
                        out.extend_from_slice(&gd[base..base + len]);
                    }
                    res.push(Some(like(part, out)));
                } else {
                    res.push(None);
                }
                offset += len;
            }
            res
        }
        Op::Slice {
            axis, start, end, ..
        } => {
            let (outer, n, inner) = outer_inner(x[0].shape(), *axis);
            let mut out = vec![0.0; x[0].len()];
            let len = (end - start) * inner;
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                out[base..base + len].copy_from_slice(&gd[o * len..(o + 1) * len]);
            }
            vec![Some(like(x[0], out))]
        }
        Op::Softmax(_) => {
            let n = *y.shape().last().unwrap();
            let mut out = vec![0.0; y.len()];
            for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = yv * (gv - dot);
                }
            }
            vec![Some(like(x[0], out))]
        }
        Op::Conv2d { stride, pad, .. } => conv2d_backward(x[0], x[1], g, *stride, *pad, wanted),
        Op::BilinearSample { .. } => {
            let (map, pts) = (x[0], x[1]);
            let c = map.shape()[0];
            let mut gmap = want(0).then(|| vec![0.0; map.len()]);
            let mut gpts = want(1).then(|| vec![0.0; pts.len()]);
            for p in 0..pts.rows() {
                let s = BilinearTap::new(map.shape(), pts.get(p, 0), pts.get(p, 1));
                let grow = &gd[p * c..(p + 1) * c];
                if let Some(gm) = gmap.as_mut() {
                    for (ch, &gv) in grow.iter().enumerate() {
                        s.scatter(gm, ch, gv);
                    }
                }
                if let Some(gp) = gpts.as_mut() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for (ch, &gv) in grow.iter().enumerate() {
                        let (sx, sy) = s.spatial_grad(map.data(), ch);
                        dx += gv * sx;
                        dy += gv * sy;
                    }
                    gp[p * 2] = dx;
                    gp[p * 2 + 1] = dy;
                }
            }
            vec![gmap.map(|d| like(map, d)), gpts.map(|d| like(pts, d))]
        }
        Op::Rodrigues(_) => {
            let mut out = Vec::with_capacity(x[0].len());
            for r in 0..x[0].rows() {
                let jac = rodrigues_jacobian(x[0].row(r).try_into().unwrap());
                let gr = &gd[r * 9..(r + 1) * 9];
                for d in jac.iter() {
                    out.push(d.iter().flatten().zip(gr).map(|(a, b)| a * b).sum());
                }
            }
            vec![Some(like(x[0], out))]
        }
        Op::BaryInterp { .. } => {
            let (src, idx, w) = (x[0], x[1], x[2]);
            let c = src.cols();
            let mut out = vec![0.0; src.len()];
            for m in 0..idx.rows() {
                for t in 0..idx.cols() {
                    let v = idx.get(m, t);
                    if v < 0.0 {
                        continue;
                    }
                    let wt = w.get(m, t);
                    let base = v as usize * c;
                    for (o, gv) in out[base..base + c].iter_mut().zip(&gd[m * c..(m + 1) * c]) {
                        *o += wt * gv;
                    }
                }
            }
            vec![Some(like(src, out)), None, None]
        }
    }
}

fn like(a: &Array, data: Vec<f64>) -> Array {
    Array::new(a.shape().to_vec(), data).expect("gradient shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(
    x: &Array,
    w: &Array,
    b: &Array,
    stride: usize,
    pad: usize,
    shape: &[usize],
) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[2];
    let (cout, ho, wo) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; cout * ho * wo];
    let (xd, wdata) = (x.data(), w.data());
    for co in 0..cout {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(b.data()[co]);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdata[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow =
                            &xd[(ci * h + iy as usize) * wd..(ci * h + iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *o += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Array,
    w: &Array,
    g: &Array,
    stride: usize,
    pad: usize,
    wanted: &[bool],
) -> Vec<Option<Array>> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[2];
    let (cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (xd, wdata, gd) = (x.data(), w.data(), g.data());
    let mut gx = wanted[0].then(|| vec![0.0; x.len()]);
    let mut gw = wanted[1].then(|| vec![0.0; w.len()]);
    let gb = wanted[2].then(|| {
        (0..cout)
            .map(|co| gd[co * ho * wo..(co + 1) * ho * wo].iter().sum())
            .collect::<Vec<f64>>()
    });
    for co in 0..cout {
        let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wdata[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = (ci * h + iy as usize) * wd;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = row_base + ix as usize;
                            acc += gv * xd[xi];
                            if let Some(gx) = gx.as_mut() {
                                gx[xi] += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    vec![
        gx.map(|d| like(x, d)),
        gw.map(|d| like(w, d)),
        gb.map(|d| Array::new(vec![cout], d).unwrap()),
    ]
}

/// Four-tap bilinear lookup into a `[C,H,W]` map with clamped borders.
pub(crate) struct BilinearTap {
    h: usize,
    w: usize,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // d(fx)/d(x), zero when clamped
    dfx: f64,
    dfy: f64,
}

impl BilinearTap {
    pub(crate) fn new(shape: &[usize], px: f64, py: f64) -> Self {
        let (h, w) = (shape[1], shape[2]);
        let axis = |p: f64, n: usize| -> (usize, usize, f64, f64) {
            let u = p - 0.5;
            let max = (n - 1) as f64;
            if u <= 0.0 {
                (0, 0, 0.0, 0.0)
            } else if u >= max {
                (n - 1, n - 1, 0.0, 0.0)
            } else {
                let f = u.floor();
                let i0 = f as usize;
                (i0, (i0 + 1).min(n - 1), u - f, 1.0)
            }
        };
        let (x0, x1, fx, dfx) = axis(px, w);
        let (y0, y1, fy, dfy) = axis(py, h);
        Self {
            h,
            w,
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            dfx,
            dfy,
        }
    }

    fn at(&self, map: &[f64], ch: usize, y: usize, x: usize) -> f64 {
        map[(ch * self.h + y) * self.w + x]
    }

    pub(crate) fn sample(&self, map: &[f64], ch: usize) -> f64 {
        let top = (1.0 - self.fx) * self.at(map, ch, self.y0, self.x0)
            + self.fx * self.at(map, ch, self.y0, self.x1);
        let bot = (1.0 - self.fx) * self.at(map, ch, self.y1, self.x0)
            + self.fx * self.at(map, ch, self.y1, self.x1);
        (1.0 - self.fy) * top + self.fy * bot
    }

    fn scatter(&self, gmap: &mut [f64], ch: usize, g: f64) {
        let mut put = |y: usize, x: usize, v: f64| gmap[(ch * self.h + y) * self.w + x] += v;
        put(self.y0, self.x0, g * (1.0 - self.fx) * (1.0 - self.fy));
        put(self.y0, self.x1, g * self.fx * (1.0 - self.fy));
        put(self.y1, self.x0, g * (1.0 - self.fx) * self.fy);
        put(self.y1, self.x1, g * self.fx * self.fy);
    }

    fn spatial_grad(&self, map: &[f64], ch: usize) -> (f64, f64) {
        let (a, b) = (
            self.at(map, ch, self.y0, self.x0),
            self.at(map, ch, self.y0, self.x1),
        );
        let (c, d) = (
            self.at(map, ch, self.y1, self.x0),
            self.at(map, ch, self.y1, self.x1),
        );
        let dx = ((1.0 - self.fy) * (b - a) + self.fy * (d - c)) * self.dfx;
        let dy =
            (((1.0 - self.fx) * c + self.fx * d) - ((1.0 - self.fx) * a + self.fx * b)) * self.dfy;
        (dx, dy)
    }
}

type Mat3 = [[f64; 3]; 3];

fn skew(r: [f64; 3]) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

// Below this angle the coefficient functions use their Taylor series.
const SERIES_ANGLE: f64 = 0.05;

/// (sin t / t, (1 - cos t) / t^2, A'(t)/t, B'(t)/t)
fn rodrigues_coeffs(theta2: f64) -> (f64, f64, f64, f64) {
    if theta2 < SERIES_ANGLE * SERIES_ANGLE {
        series_coeffs(theta2)
    } else {
        closed_coeffs(theta2)
    }
}

fn series_coeffs(t: f64) -> (f64, f64, f64, f64) {
    let a = 1.0 - t / 6.0 + t * t / 120.0 - t * t * t / 5040.0;
    let b = 0.5 - t / 24.0 + t * t / 720.0 - t * t * t / 40320.0;
    let ca = -1.0 / 3.0 + t / 30.0 - t * t / 840.0 + t * t * t / 45360.0;
    let cb = -1.0 / 12.0 + t / 180.0 - t * t / 6720.0 + t * t * t / 453600.0;
    (a, b, ca, cb)
}

fn closed_coeffs(t: f64) -> (f64, f64, f64, f64) {
    let th = t.sqrt();
    let (s, c) = th.sin_cos();
    let a = s / th;
    let b = (1.0 - c) / t;
    let ca = (th * c - s) / (t * th);
    let cb = (th * s - 2.0 * (1.0 - c)) / (t * t);
    (a, b, ca, cb)
}

/// `R = I + A K + B K^2` with `K = [r]x`.
pub(crate) fn rodrigues(r: [f64; 3]) -> Mat3 {
    let t = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, _, _) = rodrigues_coeffs(t);
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// `dR/dr_i` for i in 0..3.
fn rodrigues_jacobian(r: [f64; 3]) -> [Mat3; 3] {
    let t = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b, ca, cb) = rodrigues_coeffs(t);
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, d) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let ek = mat_mul(&ei, &k);
        let ke = mat_mul(&k, &ei);
        for p in 0..3 {
            for q in 0..3 {
                d[p][q] = ca * r[i] * k[p][q]
                    + a * ei[p][q]
                    + cb * r[i] * k2[p][q]
                    + b * (ek[p][q] + ke[p][q]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[1], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
        assert_eq!(broadcast_offsets(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn rodrigues_reference_rotations() {
        let pi = std::f64::consts::PI;
        let id = rodrigues([0.0; 3]);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let half = rodrigues([pi, 0.0, 0.0]);
        let want = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((half[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
        let q = rodrigues([0.0, 0.0, pi / 2.0]);
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let t = SERIES_ANGLE * SERIES_ANGLE;
        let (s, c) = (series_coeffs(t), closed_coeffs(t));
        assert!((s.0 - c.0).abs() < 1e-12, "{s:?} {c:?}");
        assert!((s.1 - c.1).abs() < 1e-12, "{s:?} {c:?}");
        assert!((s.2 - c.2).abs() < 1e-10, "{s:?} {c:?}");
        assert!((s.3 - c.3).abs() < 1e-10, "{s:?} {c:?}");
    }
}
