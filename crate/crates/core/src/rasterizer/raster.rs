use crate::autodiff::Array;

/// Ties in interpolated depth closer than this keep the earlier triangle.
pub const DEPTH_TIE: f64 = 1e-12;

/// Screen-space mesh: pixel coordinates with x right and y down.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedMesh {
    /// `[V, 2]`
    pub verts2d: Array,
    pub depths: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

/// Screen-aligned box occluder at constant depth, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Occluder {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub depth: f64,
}

impl Occluder {
    pub fn covers(&self, px: f64, py: f64) -> bool {
        px >= self.x0 && px < self.x1 && py >= self.y0 && py < self.y1
    }
}

/// Per-pixel winners, row-major with `index = y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterBuffers {
    pub height: usize,
    pub width: usize,
    /// `+inf` where no triangle is visible.
    pub depth: Vec<f64>,
    /// `-1` where no triangle is visible.
    pub tri_id: Vec<i64>,
    pub bary: Vec<[f64; 3]>,
}

impl RasterBuffers {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![f64::INFINITY; n],
            tri_id: vec![-1; n],
            bary: vec![[0.0; 3]; n],
        }
    }
}

/// Rasterized hand plus the pixels where an occluder is the front surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBuffers {
    pub hand: RasterBuffers,
    pub occluder: Vec<bool>,
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

#[inline]
fn owns_edge(ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    let (dx, dy) = (bx - ax, by - ay);
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

#[inline]
fn inside(w: f64, owned: bool) -> bool {
    w > 0.0 || (w == 0.0 && owned)
}

/// Rasterizes with no occluders.
pub fn rasterize(pm: &ProjectedMesh, height: usize, width: usize) -> RasterBuffers {
    rasterize_scene(pm, height, width, &[]).hand
}

/// Depth-tested rasterization at pixel centres `(x + 0.5, y + 0.5)`.
///
/// Occluders are drawn first; a triangle replaces the current surface only
/// when it is nearer by more than [`DEPTH_TIE`]. Zero-area and non-finite
/// triangles are skipped.
pub fn rasterize_scene(
    pm: &ProjectedMesh,
    height: usize,
    width: usize,
    occluders: &[Occluder],
) -> SceneBuffers {
    let mut buf = RasterBuffers::empty(height, width);
    let mut occ = vec![false; height * width];
    for o in occluders {
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if o.covers(x as f64 + 0.5, y as f64 + 0.5) && o.depth < buf.depth[i] {
                    buf.depth[i] = o.depth;
                    occ[i] = true;
                }
            }
        }
    }
    let p = &pm.verts2d;
    for (f, face) in pm.faces.iter().enumerate() {
        let [a, mut b, mut c] = *face;
        let mut area = edge(
            p.get(a, 0),
            p.get(a, 1),
            p.get(b, 0),
            p.get(b, 1),
            p.get(c, 0),
            p.get(c, 1),
        );
        if !area.is_finite() || area == 0.0 {
            continue;
        }
        let swapped = area < 0.0;
        if swapped {
            std::mem::swap(&mut b, &mut c);
            area = -area;
        }
        let (ax, ay, bx, by, cx, cy) = (
            p.get(a, 0),
            p.get(a, 1),
            p.get(b, 0),
            p.get(b, 1),
            p.get(c, 0),
            p.get(c, 1),
        );
        let (za, zb, zc) = (pm.depths[a], pm.depths[b], pm.depths[c]);
        let own = [
            owns_edge(bx, by, cx, cy),
            owns_edge(cx, cy, ax, ay),
            owns_edge(ax, ay, bx, by),
        ];
        let lo = |m: f64| ((m - 0.5).ceil().max(0.0)) as usize;
        let hi = |m: f64, n: usize| ((m - 0.5).floor()).min(n as f64 - 1.0);
        let (x_hi, y_hi) = (
            hi(ax.max(bx).max(cx), width),
            hi(ay.max(by).max(cy), height),
        );
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        let (x0, y0) = (lo(ax.min(bx).min(cx)), lo(ay.min(by).min(cy)));
        for y in y0..=y_hi as usize {
            let py = y as f64 + 0.5;
            for x in x0..=x_hi as usize {
                let px = x as f64 + 0.5;
                let w0 = edge(bx, by, cx, cy, px, py);
                let w1 = edge(cx, cy, ax, ay, px, py);
                let w2 = edge(ax, ay, bx, by, px, py);
                if !(inside(w0, own[0]) && inside(w1, own[1]) && inside(w2, own[2])) {
                    continue;
                }
                let l = [w0 / area, w1 / area, w2 / area];
                let z = l[0] * za + l[1] * zb + l[2] * zc;
                let i = y * width + x;
                if z < buf.depth[i] - DEPTH_TIE {
                    buf.depth[i] = z;
                    buf.tri_id[i] = f as i64;
                    buf.bary[i] = if swapped { [l[0], l[2], l[1]] } else { l };
                    occ[i] = false;
                }
            }
        }
    }
    for i in 0..height * width {
        if buf.tri_id[i] < 0 {
            buf.depth[i] = f64::INFINITY;
        }
    }
    SceneBuffers {
        hand: buf,
        occluder: occ,
    }
}

/// Visible hand pixels and the vertices of the visible triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub visible_vertices: Vec<bool>,
}

impl OcclusionMask {
    /// Mask as a `[H*W, 1]` array of zeros and ones.
    pub fn to_column(&self) -> Array {
        let data = self
            .mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Array::new(vec![self.mask.len(), 1], data).expect("mask shape")
    }
}

pub fn occlusion_mask(
    buf: &RasterBuffers,
    faces: &[[usize; 3]],
    vertex_count: usize,
) -> OcclusionMask {
    let mut visible = vec![false; vertex_count];
    let mut seen = vec![false; faces.len()];
    let mask = buf.tri_id.iter().map(|&t| t >= 0).collect();
    for &t in &buf.tri_id {
        if t >= 0 && !seen[t as usize] {
            seen[t as usize] = true;
            for &v in &faces[t as usize] {
                visible[v] = true;
            }
        }
    }
    OcclusionMask {
        height: buf.height,
        width: buf.width,
        mask,
        visible_vertices: visible,
    }
}

/// Per-pixel vertex indices and weights `[H*W, 3]`; background rows hold `-1`.
pub fn raster_tables(buf: &RasterBuffers, faces: &[[usize; 3]]) -> (Array, Array) {
    let n = buf.height * buf.width;
    let mut idx = Array::full(&[n, 3], -1.0);
    let mut w = Array::zeros(&[n, 3]);
    for i in 0..n {
        let t = buf.tri_id[i];
        if t < 0 {
            continue;
        }
        for k in 0..3 {
            idx.set(i, k, faces[t as usize][k] as f64);
            w.set(i, k, buf.bary[i][k]);
        }
    }
    (idx, w)
}
