//! Procedurally generated hand templates, so nothing licensed is needed.
//!
//! Units are decimetres: the paddle hand is roughly 1.7 units from wrist
//! to middle fingertip. The palm lies in the xy-plane with fingers along
//! +y and thickness along z.

use crate::autodiff::Array;

use super::HandTemplate;

struct Builder {
    verts: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl Builder {
    fn quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.faces.push([a, b, c]);
        self.faces.push([a, c, d]);
    }
}

const FINGER_RINGS: usize = 6;
const RING: usize = 4;

/// Wrist, then MCP/PIP/DIP for each of five fingers: 16 joints, 162 vertices.
pub fn paddle_hand() -> HandTemplate {
    let mut b = Builder {
        verts: Vec::new(),
        faces: Vec::new(),
    };
    let (cols, rows) = (6usize, 3usize);
    let half_thick = 0.125;
    let palm_len = 0.9;
    let palm_top = palm_len - 0.35;
    let palm_bottom = -0.35;
    // front (z < 0) then back grid
    for z in [-half_thick, half_thick] {
        for r in 0..rows {
            for c in 0..cols {
                let x = -0.4 + 0.8 * c as f64 / (cols - 1) as f64;
                let y = palm_bottom + palm_len * r as f64 / (rows - 1) as f64;
                b.verts.push([x, y, z]);
            }
        }
    }
    let front = |r: usize, c: usize| r * cols + c;
    let back = |r: usize, c: usize| rows * cols + r * cols + c;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            b.quad(
                front(r, c),
                front(r, c + 1),
                front(r + 1, c + 1),
                front(r + 1, c),
            );
            b.quad(
                back(r, c),
                back(r + 1, c),
                back(r + 1, c + 1),
                back(r, c + 1),
            );
        }
    }
    for r in 0..rows - 1 {
        b.quad(front(r, 0), back(r, 0), back(r + 1, 0), front(r + 1, 0));
        let c = cols - 1;
        b.quad(front(r, c), front(r + 1, c), back(r + 1, c), back(r, c));
    }
    for c in 0..cols - 1 {
        let r = rows - 1;
        b.quad(front(r, c), back(r, c), back(r, c + 1), front(r, c + 1));
    }
    let wrist = b.verts.len();
    b.verts.push([0.0, palm_bottom - 0.12, 0.0]);
    let mut rim: Vec<usize> = (0..cols).map(|c| front(0, c)).collect();
    rim.extend((0..cols).rev().map(|c| back(0, c)));
    for i in 0..rim.len() {
        b.faces.push([rim[i], rim[(i + 1) % rim.len()], wrist]);
    }
    let palm_count = b.verts.len();

    // (base x, base y, direction angle from +y toward +x, length)
    let fingers = [
        (0.42, palm_bottom + 0.25, 0.85, 0.55),
        (0.3, palm_top, 0.05, 0.7),
        (0.1, palm_top, 0.0, 0.78),
        (-0.1, palm_top, -0.03, 0.72),
        (-0.3, palm_top, -0.08, 0.58),
    ];
    let (half_w, half_t) = (0.075, 0.07);
    let mut finger_base = Vec::new();
    for &(bx, by, ang, len) in &fingers {
        let d = [f64::sin(ang), f64::cos(ang), 0.0];
        let l = [d[1], -d[0], 0.0];
        let start = b.verts.len();
        finger_base.push(start);
        for j in 0..FINGER_RINGS {
            let t = len * j as f64 / FINGER_RINGS as f64;
            let c = [bx + t * d[0], by + t * d[1], 0.0];
            for (sl, sn) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                b.verts.push([
                    c[0] + sl * half_w * l[0],
                    c[1] + sl * half_w * l[1],
                    sn * half_t,
                ]);
            }
        }
        b.verts.push([bx + len * d[0], by + len * d[1], 0.0]);
        let ring = |j: usize, q: usize| start + j * RING + q % RING;
        for j in 0..FINGER_RINGS - 1 {
            for q in 0..RING {
                b.quad(
                    ring(j, q),
                    ring(j, q + 1),
                    ring(j + 1, q + 1),
                    ring(j + 1, q),
                );
            }
        }
        let tip = start + FINGER_RINGS * RING;
        for q in 0..RING {
            b.faces.push([
                ring(FINGER_RINGS - 1, q),
                ring(FINGER_RINGS - 1, q + 1),
                tip,
            ]);
        }
        b.quad(ring(0, 3), ring(0, 2), ring(0, 1), ring(0, 0));
    }
    let v = b.verts.len();
    let k = 1 + 3 * fingers.len();
    debug_assert_eq!(v, 162);

    let mut skin = Array::zeros(&[v, k]);
    for i in 0..palm_count {
        skin.set(i, 0, 1.0);
    }
    let mut reg = Array::zeros(&[k, v]);
    for &i in &rim {
        reg.set(0, i, 1.0 / rim.len() as f64);
    }
    for (f, &start) in finger_base.iter().enumerate() {
        let joint = |seg: usize| 1 + 3 * f + seg;
        for j in 0..FINGER_RINGS {
            let seg = j / 2;
            for q in 0..RING {
                let vi = start + j * RING + q;
                if j % 2 == 0 {
                    let parent = if seg == 0 { 0 } else { joint(seg - 1) };
                    skin.set(vi, parent, 0.5);
                    skin.set(vi, joint(seg), 0.5);
                    reg.set(joint(seg), vi, 0.25);
                } else {
                    skin.set(vi, joint(seg), 1.0);
                }
            }
        }
        skin.set(start + FINGER_RINGS * RING, joint(2), 1.0);
    }
    let parents: Vec<Option<usize>> = (0..k)
        .map(|j| match j {
            0 => None,
            j if (j - 1) % 3 == 0 => Some(0),
            j => Some(j - 1),
        })
        .collect();

    let centroid = centroid(&b.verts);
    let mut shape = Array::zeros(&[v * 3, 4]);
    for (i, p) in b.verts.iter().enumerate() {
        for c in 0..3 {
            shape.set(3 * i + c, 0, 0.1 * (p[c] - centroid[c]));
        }
        shape.set(3 * i, 2, 0.1 * p[0]);
        shape.set(3 * i + 2, 3, 0.2 * p[2]);
    }
    for (f, &start) in finger_base.iter().enumerate() {
        let (_, _, ang, len) = fingers[f];
        let d = [f64::sin(ang), f64::cos(ang)];
        for j in 0..=FINGER_RINGS {
            let t = len * j as f64 / FINGER_RINGS as f64;
            let count = if j == FINGER_RINGS { 1 } else { RING };
            for q in 0..count {
                let vi = start + j * RING + q;
                shape.set(3 * vi, 1, 0.1 * t * d[0]);
                shape.set(3 * vi + 1, 1, 0.1 * t * d[1]);
            }
        }
    }

    finish(b, skin, reg, parents, shape)
}

/// A three-joint, 12-vertex bar with one-hot skinning, for fast checks.
pub fn toy_hand() -> HandTemplate {
    let mut b = Builder {
        verts: Vec::new(),
        faces: Vec::new(),
    };
    for j in 0..3 {
        let y = 0.5 * j as f64;
        for (x, z) in [(-0.1, -0.08), (0.1, -0.08), (0.1, 0.08), (-0.1, 0.08)] {
            b.verts.push([x, y, z]);
        }
    }
    let ring = |j: usize, q: usize| j * RING + q % RING;
    for j in 0..2 {
        for q in 0..RING {
            b.quad(
                ring(j, q),
                ring(j, q + 1),
                ring(j + 1, q + 1),
                ring(j + 1, q),
            );
        }
    }
    b.quad(ring(0, 3), ring(0, 2), ring(0, 1), ring(0, 0));
    b.quad(ring(2, 0), ring(2, 1), ring(2, 2), ring(2, 3));
    let (v, k) = (12, 3);
    let mut skin = Array::zeros(&[v, k]);
    let mut reg = Array::zeros(&[k, v]);
    for i in 0..v {
        skin.set(i, i / RING, 1.0);
        reg.set(i / RING, i, 0.25);
    }
    let c = centroid(&b.verts);
    let mut shape = Array::zeros(&[v * 3, 2]);
    for (i, p) in b.verts.iter().enumerate() {
        for a in 0..3 {
            shape.set(3 * i + a, 0, 0.1 * (p[a] - c[a]));
        }
        shape.set(3 * i + 2, 1, 0.3 * p[2]);
    }
    finish(b, skin, reg, vec![None, Some(0), Some(1)], shape)
}

fn centroid(verts: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in verts {
        for a in 0..3 {
            c[a] += p[a] / verts.len() as f64;
        }
    }
    c
}

fn finish(
    b: Builder,
    skin: Array,
    reg: Array,
    parents: Vec<Option<usize>>,
    shape: Array,
) -> HandTemplate {
    let v = b.verts.len();
    let k = parents.len();
    // Small deterministic correctives on the vertices each joint drives.
    let p = 9 * (k - 1);
    let mut pose = Array::zeros(&[v * 3, p]);
    for vi in 0..v {
        for j in 1..k {
            if skin.get(vi, j) == 0.0 {
                continue;
            }
            for c in 0..3 {
                for e in 0..9 {
                    let phase = 1.3 * vi as f64 + 0.7 * c as f64 + 0.37 * e as f64 + j as f64;
                    pose.set(3 * vi + c, 9 * (j - 1) + e, 0.002 * phase.sin());
                }
            }
        }
    }
    let tv = Array::new(vec![v, 3], b.verts.iter().flatten().copied().collect()).unwrap();
    HandTemplate {
        vertex_count: v,
        joint_count: k,
        template_vertices: tv,
        faces: b.faces,
        shape_blendshapes: shape,
        pose_blendshapes: pose,
        skinning_weights: skin,
        kinematic_parents: parents,
        joint_regressor: reg,
    }
}
