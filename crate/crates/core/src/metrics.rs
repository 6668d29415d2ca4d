//! Pose, mesh and image metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, GraphError};
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn check_points(pred: &Array, gt: &Array) -> Result<()> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() != 3 {
        return Err(Error::Graph(GraphError::Shape(format!(
            "point sets {:?} and {:?}",
            pred.shape(),
            gt.shape()
        ))));
    }
    Ok(())
}

fn rows3(a: &Array) -> Vec<Vector3<f64>> {
    (0..a.rows())
        .map(|i| Vector3::from_row_slice(a.row(i)))
        .collect()
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity transform `(scale, rotation, translation)` with `x ↦ s R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, pts: &Array) -> Array {
        let mut out = pts.clone();
        for i in 0..pts.rows() {
            let x =
                self.rotation * Vector3::from_row_slice(pts.row(i)) * self.scale + self.translation;
            for c in 0..3 {
                out.set(i, c, x[c]);
            }
        }
        out
    }
}

/// Least-squares similarity taking `pred` onto `gt`, reflections excluded.
pub fn procrustes_fit(pred: &Array, gt: &Array) -> Result<Similarity> {
    check_points(pred, gt)?;
    if pred.rows() < 3 {
        return Err(Error::DegenerateGeometry("need at least 3 points".into()));
    }
    let (p, g) = (rows3(pred), rows3(gt));
    let (mp, mg) = (centroid(&p), centroid(&g));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (a, b) in p.iter().zip(&g) {
        let (da, db) = (a - mp, b - mg);
        cov += db * da.transpose();
        var_p += da.norm_squared();
        var_g += db.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(var_p > 0.0 && var_g > 0.0) || sv[1] <= 1e-12 * sv[0] || !sv[0].is_finite() {
        return Err(Error::DegenerateGeometry(
            "point configuration has rank below 2".into(),
        ));
    }
    let d = if (u * vt).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * fix[(i, i)]).sum();
    let scale = trace / var_p;
    let translation = mg - rotation * mp * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// `pred` after the best similarity transform onto `gt`.
pub fn procrustes_align(pred: &Array, gt: &Array) -> Result<Array> {
    Ok(procrustes_fit(pred, gt)?.apply(pred))
}

/// Euclidean distance of each row pair.
pub fn point_errors(pred: &Array, gt: &Array) -> Result<Vec<f64>> {
    check_points(pred, gt)?;
    Ok((0..pred.rows())
        .map(|i| {
            let (a, b) = (pred.row(i), gt.row(i));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect())
}

pub fn mean_point_error(pred: &Array, gt: &Array) -> Result<f64> {
    let e = point_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of errors at or below `t`.
pub fn pck(errors: &[f64], t: f64) -> f64 {
    errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
}

/// Normalized area under the PCK curve on `[0, t_max]`.
///
/// The curve is a step function, so the area is integrated exactly: each
/// error `e` contributes `max(0, t_max - e) / t_max`.
pub fn pck_auc(errors: &[f64], t_max: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors
        .iter()
        .map(|&e| (t_max - e).max(0.0) / t_max)
        .sum::<f64>()
        / errors.len() as f64
}

/// Trapezoidal estimate of [`pck_auc`] over `steps` uniform intervals.
pub fn pck_auc_trapezoid(errors: &[f64], t_max: f64, steps: usize) -> f64 {
    let h = t_max / steps as f64;
    let ys: Vec<f64> = (0..=steps).map(|i| pck(errors, i as f64 * h)).collect();
    ys.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / steps as f64
}

fn nearest(p: &[f64], cloud: &Array) -> f64 {
    (0..cloud.rows())
        .map(|j| {
            let q = cloud.row(j);
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Harmonic mean of nearest-neighbour precision and recall at threshold `tau`.
pub fn f_score(pred: &Array, gt: &Array, tau: f64) -> Result<f64> {
    if pred.len() == 0 || gt.len() == 0 || pred.cols() != 3 || gt.cols() != 3 {
        return Err(Error::Domain(
            "f-score needs two non-empty 3-D point sets".into(),
        ));
    }
    let within = |a: &Array, b: &Array| {
        (0..a.rows())
            .filter(|&i| nearest(a.row(i), b) <= tau)
            .count() as f64
            / a.rows() as f64
    };
    let p = within(pred, gt);
    let r = within(gt, pred);
    Ok(if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    })
}

fn gaussian_window() -> [[f64; 11]; 11] {
    let mut w = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (y, row) in w.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dx, dy) = (x as f64 - 5.0, y as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w
}

/// Masked PSNR (peak 1, capped) and SSIM averaged over masked pixels.
///
/// Images are `[H, W, 3]`; `mask` has `H*W` entries. SSIM statistics come
/// from an 11x11 Gaussian window (σ 1.5) over the masked images, truncated
/// and renormalized at the border.
pub fn image_metrics(a: &Array, b: &Array, mask: &[bool]) -> Result<(f64, f64)> {
    let s = a.shape();
    if s != b.shape() || s.len() != 3 || s[2] != 3 || mask.len() != s[0] * s[1] {
        return Err(Error::Graph(GraphError::Shape(format!(
            "images {:?}, {:?} with mask of {}",
            s,
            b.shape(),
            mask.len()
        ))));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Domain("empty mask".into()));
    }
    let (h, w) = (s[0], s[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut se = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                se += (ad[3 * i + c] - bd[3 * i + c]).powi(2);
            }
        }
    }
    let mse = se / (3 * count) as f64;
    let psnr = if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    };

    let win = gaussian_window();
    let ma = |d: &[f64], i: usize, c: usize| if mask[i] { d[3 * i + c] } else { 0.0 };
    let mut ssim_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for c in 0..3 {
                let (mut wsum, mut mx, mut my, mut xx, mut yy, mut xy) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for (wy, row) in win.iter().enumerate() {
                    let Some(yy_) = (y + wy).checked_sub(5).filter(|&v| v < h) else {
                        continue;
                    };
                    for (wx, &k) in row.iter().enumerate() {
                        let Some(xx_) = (x + wx).checked_sub(5).filter(|&v| v < w) else {
                            continue;
                        };
                        let i = yy_ * w + xx_;
                        let (u, v) = (ma(ad, i, c), ma(bd, i, c));
                        wsum += k;
                        mx += k * u;
                        my += k * v;
                        xx += k * u * u;
                        yy += k * v * v;
                        xy += k * u * v;
                    }
                }
                let (mx, my) = (mx / wsum, my / wsum);
                let vx = xx / wsum - mx * mx;
                let vy = yy / wsum - my * my;
                let cxy = xy / wsum - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                ssim_sum += num / den;
            }
        }
    }
    let ssim = (ssim_sum / (3 * count) as f64).clamp(0.0, 1.0);
    Ok((psnr, ssim))
}

/// Aggregate evaluation results. Distances are in millimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub mpvpe_mm: f64,
    pub auc_j: f64,
    pub auc_v: f64,
    pub f5: f64,
    pub f15: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricsReport {
    pub fn within_ranges(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        self.mpjpe_mm >= 0.0
            && self.mpvpe_mm >= 0.0
            && unit(self.auc_j)
            && unit(self.auc_v)
            && unit(self.f5)
            && unit(self.f15)
            && unit(self.ssim)
            && self.psnr_db.is_finite()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Collects per-sample results in submission order.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    joint_errors: Vec<f64>,
    vertex_errors: Vec<f64>,
    f5: Vec<f64>,
    f15: Vec<f64>,
    psnr: Vec<f64>,
    ssim: Vec<f64>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample; coordinates are scaled by `mm_per_unit` after
    /// Procrustes alignment of each point set.
    pub fn add_geometry(
        &mut self,
        pred_j: &Array,
        gt_j: &Array,
        pred_v: &Array,
        gt_v: &Array,
        mm_per_unit: f64,
    ) -> Result<()> {
        let to_mm = |a: Array| a.map(|x| x * mm_per_unit);
        let aj = to_mm(procrustes_align(pred_j, gt_j)?);
        let av = to_mm(procrustes_align(pred_v, gt_v)?);
        let (gj, gv) = (to_mm(gt_j.clone()), to_mm(gt_v.clone()));
        self.joint_errors.extend(point_errors(&aj, &gj)?);
        self.vertex_errors.extend(point_errors(&av, &gv)?);
        self.f5.push(f_score(&av, &gv, 5.0)?);
        self.f15.push(f_score(&av, &gv, 15.0)?);
        Ok(())
    }

    pub fn add_image(&mut self, psnr: f64, ssim: f64) {
        self.psnr.push(psnr);
        self.ssim.push(ssim);
    }

    pub fn report(&self) -> MetricsReport {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        MetricsReport {
            mpjpe_mm: mean(&self.joint_errors),
            mpvpe_mm: mean(&self.vertex_errors),
            auc_j: pck_auc(&self.joint_errors, 50.0),
            auc_v: pck_auc(&self.vertex_errors, 50.0),
            f5: mean(&self.f5),
            f15: mean(&self.f15),
            psnr_db: mean(&self.psnr),
            ssim: mean(&self.ssim),
        }
    }
}
