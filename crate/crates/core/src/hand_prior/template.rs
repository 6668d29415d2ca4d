use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Parametric hand model: rest mesh, blendshapes, skinning and joint regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct HandTemplate {
    pub vertex_count: usize,
    pub joint_count: usize,
    /// `[V, 3]`
    pub template_vertices: Array,
    pub faces: Vec<[usize; 3]>,
    /// `[V*3, S]`, row `3v + c` holds coordinate `c` of vertex `v`.
    pub shape_blendshapes: Array,
    /// `[V*3, 9(K-1)]`
    pub pose_blendshapes: Array,
    /// `[V, K]`
    pub skinning_weights: Array,
    /// Parent of each joint; the root has `None` and parents precede children.
    pub kinematic_parents: Vec<Option<usize>>,
    /// `[K, V]`
    pub joint_regressor: Array,
}

/// On-disk layout: every array flattened row-major.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    vertex_count: usize,
    joint_count: usize,
    template_vertices: Vec<f64>,
    faces: Vec<usize>,
    shape_blendshapes: Vec<f64>,
    pose_blendshapes: Vec<f64>,
    skinning_weights: Vec<f64>,
    kinematic_parents: Vec<i64>,
    joint_regressor: Vec<f64>,
}

fn sized(field: &str, data: Vec<f64>, shape: Vec<usize>) -> Result<Array> {
    Array::new(shape.clone(), data).map_err(|_| {
        Error::parse(
            field,
            format!(
                "expected {} values for shape {shape:?}",
                shape.iter().product::<usize>()
            ),
        )
    })
}

impl HandTemplate {
    pub fn shape_count(&self) -> usize {
        self.shape_blendshapes.cols()
    }

    pub fn pose_feature_count(&self) -> usize {
        self.pose_blendshapes.cols()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TemplateFile = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "document".into());
            Error::parse(field, msg)
        })?;
        let (v, k) = (raw.vertex_count, raw.joint_count);
        if v == 0 {
            return Err(Error::parse("vertex_count", "must be positive"));
        }
        if k < 2 {
            return Err(Error::parse(
                "joint_count",
                "need a root and at least one child joint",
            ));
        }
        let template_vertices = sized("template_vertices", raw.template_vertices, vec![v, 3])?;
        if raw.faces.len() % 3 != 0 || raw.faces.is_empty() {
            return Err(Error::parse(
                "faces",
                "length must be a positive multiple of 3",
            ));
        }
        let faces = raw.faces.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let s_len = raw.shape_blendshapes.len();
        if s_len == 0 || s_len % (v * 3) != 0 {
            return Err(Error::parse(
                "shape_blendshapes",
                format!("length {s_len} is not a positive multiple of {}", v * 3),
            ));
        }
        let shape_blendshapes = sized(
            "shape_blendshapes",
            raw.shape_blendshapes,
            vec![v * 3, s_len / (v * 3)],
        )?;
        let pose_cols = 9 * (k - 1);
        let pose_blendshapes = sized(
            "pose_blendshapes",
            raw.pose_blendshapes,
            vec![v * 3, pose_cols],
        )?;
        let skinning_weights = sized("skinning_weights", raw.skinning_weights, vec![v, k])?;
        let joint_regressor = sized("joint_regressor", raw.joint_regressor, vec![k, v])?;
        if raw.kinematic_parents.len() != k {
            return Err(Error::parse(
                "kinematic_parents",
                format!("expected {k} entries, got {}", raw.kinematic_parents.len()),
            ));
        }
        let kinematic_parents = raw
            .kinematic_parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let t = Self {
            vertex_count: v,
            joint_count: k,
            template_vertices,
            faces,
            shape_blendshapes,
            pose_blendshapes,
            skinning_weights,
            kinematic_parents,
            joint_regressor,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        let raw = TemplateFile {
            vertex_count: self.vertex_count,
            joint_count: self.joint_count,
            template_vertices: self.template_vertices.data().to_vec(),
            faces: self.faces.iter().flatten().copied().collect(),
            shape_blendshapes: self.shape_blendshapes.data().to_vec(),
            pose_blendshapes: self.pose_blendshapes.data().to_vec(),
            skinning_weights: self.skinning_weights.data().to_vec(),
            kinematic_parents: self
                .kinematic_parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            joint_regressor: self.joint_regressor.data().to_vec(),
        };
        serde_json::to_string(&raw).expect("template serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let (v, k) = (self.vertex_count, self.joint_count);
        let bad = |m: String| Err(Error::Validation(m));
        if self.template_vertices.shape() != [v, 3] {
            return bad("template_vertices shape".into());
        }
        if !self.template_vertices.is_finite()
            || !self.shape_blendshapes.is_finite()
            || !self.pose_blendshapes.is_finite()
        {
            return bad("non-finite template coordinates".into());
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&idx| idx >= v) {
                return bad(format!("face {i} references a vertex outside 0..{v}"));
            }
        }
        if k < 2 || self.pose_blendshapes.cols() != 9 * (k - 1) {
            return bad("pose_blendshapes must have 9(K-1) columns".into());
        }
        let roots = self
            .kinematic_parents
            .iter()
            .filter(|p| p.is_none())
            .count();
        if self.kinematic_parents.first() != Some(&None) || roots != 1 {
            return bad("kinematic_parents must have exactly one root at index 0".into());
        }
        for (j, p) in self.kinematic_parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} must have a parent with a smaller index")),
            }
        }
        for r in 0..v {
            let row = self.skinning_weights.row(r);
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return bad(format!(
                    "skinning weights of vertex {r} must be finite and non-negative"
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("skinning weights of vertex {r} sum to {s}"));
            }
        }
        for r in 0..k {
            let s: f64 = self.joint_regressor.row(r).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || !s.is_finite() {
                return bad(format!("joint regressor row {r} sums to {s}"));
            }
        }
        Ok(())
    }

    /// Bounding-box diagonal of the rest mesh, in model units.
    pub fn rest_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for r in 0..self.vertex_count {
            for c in 0..3 {
                let x = self.template_vertices.get(r, c);
                lo[c] = lo[c].min(x);
                hi[c] = hi[c].max(x);
            }
        }
        (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
    }
}
