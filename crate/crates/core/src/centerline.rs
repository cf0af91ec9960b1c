//! Cord centerline as a cubic smoothing spline, Frenet frames along it, and
//! per-level alignment of principal diffusion directions with the tangent.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EigenField;
use crate::volume::{level_name, LevelLabels, Mask};

/// Barycenter of each axial slice holding mask voxels, as `(slice index, world mm)`.
pub fn slice_barycenters(mask: &Mask) -> Result<Vec<(f64, [f64; 3])>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let grid = mask.grid();
    let nz = grid.dims[2];
    let mut sums = vec![([0.0; 3], 0usize); nz];
    for idx in mask.indices() {
        let k = grid.coords(idx)[2];
        let w = grid.voxel_to_world(idx);
        let s = &mut sums[k];
        for a in 0..3 {
            s.0[a] += w[a];
        }
        s.1 += 1;
    }
    Ok(sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(k, (p, n))| (k as f64, p.map(|x| x / *n as f64)))
        .collect())
}

/// How the smoothing weight of [`fit_centerline`] is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Fixed weight of the curvature penalty.
    Lambda(f64),
    /// Pick the weight whose residual sum of squares over all axes is `m * variance`.
    ResidualVariance(f64),
}

/// Per-point variance of slice barycenters due to voxel quantisation: the median over
/// axes of `spacing^2 / 12`.
pub fn quantisation_variance(spacing: [f64; 3]) -> f64 {
    let mut v = spacing.map(|s| s * s / 12.0);
    v.sort_by(f64::total_cmp);
    v[1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AxisSpline {
    values: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    second: Vec<f64>,
}

/// Natural cubic smoothing spline through `(t_i, c_i)` in each world axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    knots: Vec<f64>,
    axes: [AxisSpline; 3],
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetFrame {
    pub t: [f64; 3],
    pub n: [f64; 3],
    pub b: [f64; 3],
    pub degenerate: bool,
}

/// Symmetric positive-definite band matrix with two off-diagonals.
struct Penta {
    d: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
}

impl Penta {
    /// Solves `A x = rhs` by a banded Cholesky factorisation.
    fn solve(&self, mut rhs: Vec<f64>) -> Vec<f64> {
        let m = self.d.len();
        // L[i][i], L[i][i-1], L[i][i-2]
        let (mut l0, mut l1, mut l2) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 0..m {
            if i >= 2 {
                l2[i] = self.e2[i - 2] / l0[i - 2];
            }
            if i >= 1 {
                let cross = if i >= 2 { l2[i] * l1[i - 1] } else { 0.0 };
                l1[i] = (self.e1[i - 1] - cross) / l0[i - 1];
            }
            l0[i] = (self.d[i] - l1[i] * l1[i] - l2[i] * l2[i]).max(f64::MIN_POSITIVE).sqrt();
        }
        for i in 0..m {
            let mut v = rhs[i];
            if i >= 1 {
                v -= l1[i] * rhs[i - 1];
            }
            if i >= 2 {
                v -= l2[i] * rhs[i - 2];
            }
            rhs[i] = v / l0[i];
        }
        for i in (0..m).rev() {
            let mut v = rhs[i];
            if i + 1 < m {
                v -= l1[i + 1] * rhs[i + 1];
            }
            if i + 2 < m {
                v -= l2[i + 2] * rhs[i + 2];
            }
            rhs[i] = v / l0[i];
        }
        rhs
    }
}

fn fit_axis(t: &[f64], y: &[f64], lambda: f64) -> AxisSpline {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    // interior knot c (1..n-1) maps to unknown c - 1
    let q = |i: usize, c: usize| -> f64 {
        if i + 1 == c {
            1.0 / h[c - 1]
        } else if i == c {
            -1.0 / h[c - 1] - 1.0 / h[c]
        } else if i == c + 1 {
            1.0 / h[c]
        } else {
            0.0
        }
    };
    let mut a = Penta {
        d: vec![0.0; m],
        e1: vec![0.0; m.saturating_sub(1)],
        e2: vec![0.0; m.saturating_sub(2)],
    };
    for c in 1..n - 1 {
        a.d[c - 1] += (h[c - 1] + h[c]) / 3.0;
        if c + 1 < n - 1 {
            a.e1[c - 1] += h[c] / 6.0;
        }
    }
    for i in 0..n {
        let cols: Vec<usize> = (i.saturating_sub(1)..=i + 1).filter(|&c| c >= 1 && c + 1 < n).collect();
        for &c in &cols {
            for &c2 in &cols {
                if c2 < c {
                    continue;
                }
                let v = lambda * q(i, c) * q(i, c2);
                match c2 - c {
                    0 => a.d[c - 1] += v,
                    1 => a.e1[c - 1] += v,
                    _ => a.e2[c - 1] += v,
                }
            }
        }
    }
    let rhs: Vec<f64> = (1..n - 1)
        .map(|c| (y[c + 1] - y[c]) / h[c] - (y[c] - y[c - 1]) / h[c - 1])
        .collect();
    let gamma = a.solve(rhs);
    let mut second = vec![0.0; n];
    second[1..n - 1].copy_from_slice(&gamma);
    let values = (0..n)
        .map(|i| {
            let qg: f64 = (i.saturating_sub(1)..=i + 1)
                .filter(|&c| c >= 1 && c + 1 < n)
                .map(|c| q(i, c) * second[c])
                .sum();
            y[i] - lambda * qg
        })
        .collect();
    AxisSpline { values, second }
}

/// Fits the three coordinate splines to points ordered by strictly increasing slice index.
pub fn fit_centerline(points: &[(f64, [f64; 3])], smoothing: Smoothing) -> Result<Centerline> {
    if points.len() < 4 {
        return Err(Error::TooFewSlices(points.len()));
    }
    for w in points.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::DuplicateParameter(w[1].0));
        }
    }
    let knots: Vec<f64> = points.iter().map(|p| p.0).collect();
    let fit = |lambda: f64| {
        let axes = [0, 1, 2].map(|a| {
            let y: Vec<f64> = points.iter().map(|p| p.1[a]).collect();
            fit_axis(&knots, &y, lambda)
        });
        Centerline {
            knots: knots.clone(),
            axes,
            lambda,
        }
    };
    let rss = |c: &Centerline| -> f64 {
        (0..3)
            .map(|a| points.iter().zip(&c.axes[a].values).map(|(p, g)| (p.1[a] - g).powi(2)).sum::<f64>())
            .sum()
    };
    match smoothing {
        Smoothing::Lambda(l) => {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidSpec(format!("smoothing weight {l}")));
            }
            Ok(fit(l))
        }
        Smoothing::ResidualVariance(var) => {
            let target = points.len() as f64 * var;
            let (mut lo, mut hi) = (-8.0f64, 10.0f64);
            if rss(&fit(10f64.powf(hi))) <= target {
                return Ok(fit(10f64.powf(hi)));
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if rss(&fit(10f64.powf(mid))) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(fit(10f64.powf(lo)))
        }
    }
}

impl Centerline {
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Smoothed positions at the knots.
    pub fn fitted(&self) -> Vec<[f64; 3]> {
        (0..self.knots.len()).map(|i| [0, 1, 2].map(|a| self.axes[a].values[i])).collect()
    }

    /// Position, first and second derivative at `t`.
    pub fn evaluate(&self, t: f64) -> Result<[[f64; 3]; 3]> {
        let (min, max) = self.domain();
        if !(t >= min && t <= max) {
            return Err(Error::OutOfDomain { t, min, max });
        }
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> [[f64; 3]; 3] {
        let k = &self.knots;
        let i = k.partition_point(|&x| x <= t).clamp(1, k.len() - 1) - 1;
        let h = k[i + 1] - k[i];
        let a = (k[i + 1] - t) / h;
        let b = (t - k[i]) / h;
        let mut out = [[0.0; 3]; 3];
        for ax in 0..3 {
            let s = &self.axes[ax];
            let (g0, g1, c0, c1) = (s.values[i], s.values[i + 1], s.second[i], s.second[i + 1]);
            out[0][ax] = a * g0 + b * g1 + ((a * a * a - a) * c0 + (b * b * b - b) * c1) * h * h / 6.0;
            out[1][ax] = (g1 - g0) / h - (3.0 * a * a - 1.0) / 6.0 * h * c0 + (3.0 * b * b - 1.0) / 6.0 * h * c1;
            out[2][ax] = a * c0 + b * c1;
        }
        out
    }

    pub fn point(&self, t: f64) -> Result<[f64; 3]> {
        Ok(self.evaluate(t)?[0])
    }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|x| x * s)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Threshold on `|dT/dt|` below which the curve is treated as locally straight.
pub const STRAIGHT_THRESHOLD: f64 = 1e-8;

/// Tangent, normal and binormal at `t`. On straight stretches the normal is the
/// world x axis projected off the tangent (y when x is parallel to it).
pub fn frenet(c: &Centerline, t: f64) -> Result<FrenetFrame> {
    let [_, d1, d2] = c.evaluate(t)?;
    let speed = norm3(d1);
    if speed == 0.0 {
        return Err(Error::InvalidSpec(format!("centerline has zero speed at t={t}")));
    }
    let tan = scale3(d1, 1.0 / speed);
    let dt = scale3(sub3(d2, scale3(tan, dot3(d2, tan))), 1.0 / speed);
    let curvature = norm3(dt);
    let (n, degenerate) = if curvature < STRAIGHT_THRESHOLD {
        let mut n = [0.0; 3];
        for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            let p = sub3(axis, scale3(tan, dot3(axis, tan)));
            let len = norm3(p);
            if len > 1e-6 {
                n = scale3(p, 1.0 / len);
                break;
            }
        }
        (n, true)
    } else {
        (scale3(dt, 1.0 / curvature), false)
    };
    let b = cross3(tan, n);
    let b = scale3(b, 1.0 / norm3(b));
    Ok(FrenetFrame { t: tan, n, b, degenerate })
}

/// Relative tolerance under which two grid distances count as a tie.
const TIE_TOLERANCE: f64 = 1e-12;

/// Parameter of the curve point closest to `p`: exhaustive search on a uniform grid
/// (default step `domain / 1000`), ties going to the smallest `t`, then golden-section
/// refinement over the cells adjacent to the winner.
pub fn nearest_parameter(c: &Centerline, p: [f64; 3], grid_step: Option<f64>) -> f64 {
    let (min, max) = c.domain();
    let step = grid_step.filter(|s| *s > 0.0).unwrap_or((max - min) / 1000.0);
    let count = ((max - min) / step).ceil() as usize;
    let dist2 = |t: f64| {
        let q = c.eval_unchecked(t)[0];
        let d = sub3(q, p);
        dot3(d, d)
    };
    let mut best_t = min;
    let mut best = dist2(min);
    for k in 1..=count {
        let t = (min + k as f64 * step).min(max);
        let d = dist2(t);
        if d < best - TIE_TOLERANCE * best.max(f64::MIN_POSITIVE) {
            best = d;
            best_t = t;
        }
    }
    let (mut a, mut b) = ((best_t - step).max(min), (best_t + step).min(max));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (dist2(x1), dist2(x2));
    while b - a > 1e-10 * (1.0 + (max - min)) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = dist2(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = dist2(x2);
        }
    }
    let refined = 0.5 * (a + b);
    if dist2(refined) <= best {
        refined
    } else {
        best_t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionCovariance {
    pub m: [[f64; 3]; 3],
    pub voxels: usize,
    pub label: Option<u16>,
}

/// Mean outer product of the principal directions expressed in the local Frenet frame.
/// Invalid and degenerate tensor voxels are skipped.
pub fn direction_covariance(
    e: &EigenField,
    region: &Mask,
    c: &Centerline,
    grid_step: Option<f64>,
) -> Result<DirectionCovariance> {
    e.grid.ensure_matches(region.grid(), "eigen field vs region")?;
    let mut m = [[0.0; 3]; 3];
    let mut count = 0usize;
    for idx in region.indices() {
        if !e.usable(idx) {
            continue;
        }
        let r = e.grid.voxel_to_world(idx);
        let t0 = nearest_parameter(c, r, grid_step);
        let f = frenet(c, t0)?;
        let v = e.e1[idx];
        let u = [dot3(v, f.t), dot3(v, f.n), dot3(v, f.b)];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += u[i] * u[j];
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    let inv = 1.0 / count as f64;
    Ok(DirectionCovariance {
        m: m.map(|row| row.map(|x| x * inv)),
        voxels: count,
        label: None,
    })
}

/// `(MAD in degrees, ACD)`: angle between the principal eigenvector of `M` and the
/// tangent axis, and the largest eigenvalue of `M`.
pub fn mad_acd(m: &DirectionCovariance) -> (f64, f64) {
    let mat = Matrix3::from_fn(|i, j| m.m[i][j]);
    let eig = SymmetricEigen::new(mat);
    let (k, &l1) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("three eigenvalues");
    let u = eig.eigenvectors.column(k);
    let cos = (u[0].abs() / u.norm()).min(1.0);
    (cos.acos().to_degrees(), l1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAlignment {
    pub level: u16,
    pub label: String,
    pub mad_deg: Option<f64>,
    pub acd: Option<f64>,
    /// Mask voxels in the level, including ones excluded from the statistics.
    pub voxels: usize,
    pub volume_mm3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub levels: Vec<LevelAlignment>,
}

pub fn level_report(
    e: &EigenField,
    mask: &Mask,
    labels: &LevelLabels,
    c: &Centerline,
    grid_step: Option<f64>,
) -> Result<AlignmentReport> {
    e.grid.ensure_matches(mask.grid(), "eigen field vs mask")?;
    e.grid.ensure_matches(labels.grid(), "eigen field vs levels")?;
    let vv = e.grid.voxel_volume();
    let mut levels = Vec::new();
    for label in 1..=labels.max_label() {
        let region = mask.and(&labels.region(label))?;
        let voxels = region.count();
        let (mad_deg, acd) = match direction_covariance(e, &region, c, grid_step) {
            Ok(m) => {
                let (mad, acd) = mad_acd(&m);
                (Some(mad), Some(acd))
            }
            Err(Error::EmptyRegion) => (None, None),
            Err(err) => return Err(err),
        };
        levels.push(LevelAlignment {
            level: label,
            label: level_name(label),
            mad_deg,
            acd,
            voxels,
            volume_mm3: voxels as f64 * vv,
        });
    }
    Ok(AlignmentReport { levels })
}

impl AlignmentReport {
    pub fn get(&self, level: u16) -> Option<&LevelAlignment> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("level,label,mad_deg,acd,voxels,volume_mm3\n");
        for l in &self.levels {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                l.level,
                l.label,
                opt(l.mad_deg),
                opt(l.acd),
                l.voxels,
                l.volume_mm3
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn line_points(n: usize) -> Vec<(f64, [f64; 3])> {
        (0..n).map(|k| (k as f64, [1.0 + 0.5 * k as f64, -2.0 + 0.25 * k as f64, 5.0 * k as f64])).collect()
    }

    #[test]
    fn barycenters() {
        let g = Grid::new([20, 8, 3], [2.0, 1.0, 5.0]).unwrap();
        let mut data = vec![false; g.len()];
        data[g.index(10, 3, 1)] = true;
        data[g.index(14, 3, 1)] = true;
        data[g.index(4, 5, 2)] = true;
        let m = Mask::new(g.clone(), data).unwrap();
        let b = slice_barycenters(&m).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].0, 1.0);
        assert_eq!(b[0].1, g.to_world([12.0, 3.0, 1.0]));
        assert_eq!(b[1].1, g.voxel_to_world(g.index(4, 5, 2)));
        assert!(matches!(slice_barycenters(&Mask::new(g.clone(), vec![false; g.len()]).unwrap()), Err(Error::EmptyMask)));
    }

    #[test]
    fn disk_barycenter_at_center() {
        let g = Grid::new([21, 21, 1], [1.0; 3]).unwrap();
        let data = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let (x, y) = (c[0] as f64 - 10.0, c[1] as f64 - 10.0);
                x * x + y * y <= 36.0
            })
            .collect();
        let b = slice_barycenters(&Mask::new(g.clone(), data).unwrap()).unwrap();
        let w = g.to_world([10.0, 10.0, 0.0]);
        for a in 0..3 {
            assert!((b[0].1[a] - w[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_points_reproduced() {
        for lambda in [0.0, 0.3, 50.0, 1e6] {
            let c = fit_centerline(&line_points(9), Smoothing::Lambda(lambda)).unwrap();
            for t in [0.0, 1.3, 4.5, 8.0] {
                let [p, _, d2] = c.evaluate(t).unwrap();
                assert!((p[0] - (1.0 + 0.5 * t)).abs() < 1e-8);
                assert!((p[2] - 5.0 * t).abs() < 1e-8);
                assert!(d2.iter().all(|x| x.abs() < 1e-8));
            }
        }
    }

    fn noisy_sine() -> Vec<(f64, [f64; 3])> {
        let noise = [0.3, -0.2, 0.5, -0.4, 0.1, 0.35, -0.25, 0.05, -0.45, 0.2, 0.15, -0.3];
        (0..12)
            .map(|k| {
                let t = k as f64;
                (t, [(0.6 * t).sin() * 2.0 + noise[k], 0.0, 5.0 * t])
            })
            .collect()
    }

    #[test]
    fn interpolates_without_smoothing() {
        let pts = noisy_sine();
        let c = fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap();
        for (t, p) in &pts {
            let q = c.point(*t).unwrap();
            for a in 0..3 {
                assert!((q[a] - p[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smoothing_residual_between_limits() {
        let pts = noisy_sine();
        let c = fit_centerline(&pts, Smoothing::Lambda(10.0)).unwrap();
        let rss: f64 = pts.iter().map(|(t, p)| (c.point(*t).unwrap()[0] - p[0]).powi(2)).sum();
        // least-squares line by the normal equations
        let n = pts.len() as f64;
        let (st, sy) = pts.iter().fold((0.0, 0.0), |a, (t, p)| (a.0 + t, a.1 + p[0]));
        let (stt, sty) = pts.iter().fold((0.0, 0.0), |a, (t, p)| (a.0 + t * t, a.1 + t * p[0]));
        let slope = (n * sty - st * sy) / (n * stt - st * st);
        let icpt = (sy - slope * st) / n;
        let line_rss: f64 = pts.iter().map(|(t, p)| (icpt + slope * t - p[0]).powi(2)).sum();
        assert!(rss > 1e-6 && rss < line_rss, "{rss} {line_rss}");
        let huge = fit_centerline(&pts, Smoothing::Lambda(1e9)).unwrap();
        let hr: f64 = pts.iter().map(|(t, p)| (huge.point(*t).unwrap()[0] - p[0]).powi(2)).sum();
        assert!((hr - line_rss).abs() < 1e-3 * line_rss);
    }

    #[test]
    fn residual_target_is_met() {
        let pts = noisy_sine();
        let c = fit_centerline(&pts, Smoothing::ResidualVariance(0.05)).unwrap();
        let rss: f64 = pts
            .iter()
            .map(|(t, p)| {
                let q = c.point(*t).unwrap();
                (0..3).map(|a| (q[a] - p[a]).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((rss - 12.0 * 0.05).abs() < 1e-6, "{rss}");
        assert!((quantisation_variance([1.0, 1.0, 5.0]) - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(fit_centerline(&line_points(3), Smoothing::Lambda(1.0)), Err(Error::TooFewSlices(3))));
        let mut p = line_points(5);
        p[3].0 = p[2].0;
        assert!(matches!(fit_centerline(&p, Smoothing::Lambda(1.0)), Err(Error::DuplicateParameter(_))));
        let c = fit_centerline(&line_points(5), Smoothing::Lambda(1.0)).unwrap();
        assert!(matches!(frenet(&c, 4.5), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn straight_z_line_frame() {
        let pts: Vec<_> = (0..6).map(|k| (k as f64, [3.0, 4.0, 5.0 * k as f64])).collect();
        let c = fit_centerline(&pts, Smoothing::Lambda(1.0)).unwrap();
        let f = frenet(&c, 2.5).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.t, [0.0, 0.0, 1.0]);
        assert_eq!(f.n, [1.0, 0.0, 0.0]);
        assert_eq!(f.b, [0.0, 1.0, 0.0]);
        // straight along x falls back to y
        let pts: Vec<_> = (0..6).map(|k| (k as f64, [2.0 * k as f64, 0.0, 0.0])).collect();
        let f = frenet(&fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap(), 1.0).unwrap();
        assert_eq!(f.n, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn circle_normal_points_to_center() {
        let r = 10.0;
        let pts: Vec<_> = (0..80)
            .map(|k| {
                let a = k as f64 * 0.05;
                (k as f64, [r * a.cos(), r * a.sin(), 0.0])
            })
            .collect();
        let c = fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap();
        for t in [20.0, 40.5, 60.0] {
            let f = frenet(&c, t).unwrap();
            let p = c.point(t).unwrap();
            let inward = scale3(p, -1.0 / norm3(p));
            assert!(dot3(f.n, inward) > 1.0 - 1e-4);
            for v in [f.t, f.n, f.b] {
                assert!((norm3(v) - 1.0).abs() < 1e-12);
            }
            assert!(dot3(f.t, f.n).abs() + dot3(f.t, f.b).abs() + dot3(f.n, f.b).abs() < 3e-6);
            let tn = cross3(f.t, f.n);
            assert!(norm3(sub3(tn, f.b)) < 1e-9);
        }
    }

    #[test]
    fn nearest_on_curve_and_perpendicular_foot() {
        let pts: Vec<_> = (0..11).map(|k| (k as f64, [0.0, 0.0, 2.0 * k as f64])).collect();
        let c = fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap();
        assert!((nearest_parameter(&c, [0.0, 0.0, 10.0], None) - 5.0).abs() < 1e-2);
        // foot of the perpendicular from (3, -1, 7.3) is z = 7.3, i.e. t = 3.65
        assert!((nearest_parameter(&c, [3.0, -1.0, 7.3], None) - 3.65).abs() < 1e-3);
    }

    #[test]
    fn nearest_tie_prefers_smallest_t() {
        let pts: Vec<_> = (0..11)
            .map(|k| {
                let t = k as f64;
                (t, [(t - 5.0).powi(2), 0.0, 0.0])
            })
            .collect();
        let c = fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap();
        let t0 = nearest_parameter(&c, [9.0, 100.0, 0.0], None);
        assert!((t0 - 2.0).abs() < 1e-2, "{t0}");
    }

    fn tilted_field(grid: &Grid, angles: impl Fn(usize) -> f64) -> EigenField {
        let n = grid.len();
        let e1 = (0..n)
            .map(|i| {
                let a = angles(i).to_radians();
                // straight z curve: t = z, n = x
                [a.sin(), 0.0, a.cos()]
            })
            .collect();
        EigenField {
            grid: grid.clone(),
            e1,
            eigenvalues: vec![[3.0, 1.0, 1.0]; n],
            md: vec![1.0; n],
            valid: vec![true; n],
            degenerate: vec![false; n],
        }
    }

    fn z_centerline(grid: &Grid) -> Centerline {
        let pts: Vec<_> = (0..grid.dims[2]).map(|k| (k as f64, grid.to_world([2.0, 2.0, k as f64]))).collect();
        fit_centerline(&pts, Smoothing::Lambda(0.0)).unwrap()
    }

    #[test]
    fn covariance_closed_forms() {
        let g = Grid::new([5, 5, 6], [1.0, 1.0, 2.0]).unwrap();
        let c = z_centerline(&g);
        let all = Mask::full(g.clone());

        let m = direction_covariance(&tilted_field(&g, |_| 0.0), &all, &c, None).unwrap();
        let (mad, acd) = mad_acd(&m);
        assert!(mad < 1e-3 && (acd - 1.0).abs() < 1e-6);

        let m = direction_covariance(&tilted_field(&g, |_| 10.0), &all, &c, None).unwrap();
        let (mad, acd) = mad_acd(&m);
        assert!((mad - 10.0).abs() < 0.05 && (acd - 1.0).abs() < 1e-6, "{mad} {acd}");

        let m = direction_covariance(&tilted_field(&g, |i| if i % 2 == 0 { 10.0 } else { -10.0 }), &all, &c, None).unwrap();
        let (mad, acd) = mad_acd(&m);
        let c10 = 10f64.to_radians().cos();
        assert!(mad < 0.05 && (acd - c10 * c10).abs() < 1e-4, "{mad} {acd}");
        let trace = m.m[0][0] + m.m[1][1] + m.m[2][2];
        assert!((trace - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sign_flips_do_not_change_covariance() {
        let g = Grid::new([4, 4, 5], [1.0; 3]).unwrap();
        let c = z_centerline(&g);
        let all = Mask::full(g.clone());
        let e = tilted_field(&g, |i| (i % 7) as f64 * 4.0);
        let mut flipped = e.clone();
        for (i, v) in flipped.e1.iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = v.map(|x| -x);
            }
        }
        let a = direction_covariance(&e, &all, &c, None).unwrap();
        let b = direction_covariance(&flipped, &all, &c, None).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(mad_acd(&a), mad_acd(&b));
    }

    #[test]
    fn report_handles_empty_and_single_voxel_levels() {
        let g = Grid::new([4, 4, 6], [1.0, 2.0, 3.0]).unwrap();
        let c = z_centerline(&g);
        let e = tilted_field(&g, |_| 0.0);
        let labels = LevelLabels::new(g.clone(), (0..g.len()).map(|i| if g.coords(i)[2] < 3 { 1 } else { 2 }).collect()).unwrap();
        let mut mdata = vec![false; g.len()];
        mdata[g.index(1, 1, 4)] = true;
        let mask = Mask::new(g.clone(), mdata).unwrap();
        let r = level_report(&e, &mask, &labels, &c, None).unwrap();
        assert_eq!(r.levels[0].voxels, 0);
        assert!(r.levels[0].mad_deg.is_none());
        let last = r.levels.last().unwrap();
        assert_eq!(last.voxels, 1);
        assert_eq!(last.volume_mm3, g.voxel_volume());
        assert!(r.to_csv().starts_with("level,label,mad_deg,acd,voxels,volume_mm3\n1,BS,,,0,"));
    }
}
