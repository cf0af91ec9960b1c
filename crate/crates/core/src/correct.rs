//! Field estimation from a reversed-polarity pair and midway reconstruction.
//!
//! Two estimators are provided: a variational one minimising the symmetric
//! intensity-modulated distance plus a diffusion regulariser, and a per-line
//! alignment of cumulative intensity profiles followed by Gaussian smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{line_starts, ped_derivative, warp_ped, DisplacementField};
use crate::volume::{gaussian_smooth, Grid, PedSign, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalOptions {
    /// Weight of the smoothness term.
    pub alpha: f64,
    /// Pyramid depth; 1 solves on the input grid only.
    pub levels: usize,
    pub max_iters: usize,
    /// Stop once the RMS update of an accepted step falls below this (voxels).
    pub step_tolerance: f64,
    /// Keeps `1 +/- db/dy >= jacobian_floor` everywhere.
    pub jacobian_floor: f64,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        VariationalOptions {
            alpha: 50.0,
            levels: 3,
            max_iters: 50,
            step_tolerance: 1e-3,
            jacobian_floor: 0.1,
        }
    }
}

impl VariationalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || self.levels == 0 || !(self.jacobian_floor > 0.0 && self.jacobian_floor < 1.0) {
            return Err(Error::InvalidSpec(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    /// Pyramid level, 0 being the input resolution.
    pub level: usize,
    pub value: f64,
    /// RMS of the accepted update, 0 for the first entry of a level.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionResult {
    pub field: DisplacementField,
    /// Midway reconstruction `I_C`.
    pub corrected: Volume,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    /// `(line position a, line position b)` of lines skipped because one profile was empty.
    pub flagged_lines: Vec<[usize; 2]>,
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("iter,level,value,step\n");
    for t in trace {
        s.push_str(&format!("{},{},{:.10e},{:.10e}\n", t.iter, t.level, t.value, t.step));
    }
    s
}

/// Value of the distance plus regularisation and its gradient with respect to `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub distance: f64,
    pub smoothness: f64,
    pub gradient: Vec<f64>,
}

/// Residual of the symmetric model and its partial derivatives at one voxel.
struct Linearization {
    residual: Vec<f64>,
    /// d residual / d b through the sampling positions.
    d_shift: Vec<f64>,
    /// d residual / d (db/dy), i.e. `F + B`.
    d_slope: Vec<f64>,
}

/// Cubic B-spline coefficients of every line along `axis` (mirror boundaries).
fn spline_coefficients(data: &[f64], grid: &Grid, axis: usize) -> Vec<f64> {
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let mut out = data.to_vec();
    if n < 2 {
        return out;
    }
    let z = 3f64.sqrt() - 2.0;
    let mut c = vec![0.0; n];
    for base in line_starts(grid, axis) {
        let s = |k: usize| data[base + k * stride];
        // causal initialisation over the mirrored signal of period 2n - 2
        let mut zk = z;
        let mut z2n = z.powi(2 * n as i32 - 3);
        let mut init = s(0) + z.powi(n as i32 - 1) * s(n - 1);
        for k in 1..n - 1 {
            init += (zk + z2n) * s(k);
            zk *= z;
            z2n /= z;
        }
        c[0] = init / (1.0 - z.powi(2 * n as i32 - 2));
        for k in 1..n {
            c[k] = s(k) + z * c[k - 1];
        }
        c[n - 1] = z / (z * z - 1.0) * (c[n - 1] + z * c[n - 2]);
        for k in (0..n - 1).rev() {
            c[k] = z * (c[k + 1] - c[k]);
        }
        for k in 0..n {
            out[base + k * stride] = 6.0 * c[k];
        }
    }
    out
}

/// Cubic B-spline value and derivative at `pos` along one line; positions
/// outside `[0, n - 1]` are clamped, with zero derivative.
fn spline_sample(coef: &[f64], base: usize, stride: usize, n: usize, pos: f64) -> (f64, f64) {
    if n == 1 {
        return (coef[base], 0.0);
    }
    let last = (n - 1) as f64;
    let (p, inside) = if pos < 0.0 {
        (0.0, false)
    } else if pos > last {
        (last, false)
    } else {
        (pos, true)
    };
    let i = (p.floor() as usize).min(n - 2);
    let t = p - i as f64;
    let mirror = |k: isize| -> usize {
        let period = 2 * (n as isize - 1);
        let m = k.rem_euclid(period);
        (if m >= n as isize { period - m } else { m }) as usize
    };
    let u = 1.0 - t;
    let w = [u * u * u / 6.0, (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0, (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0, t * t * t / 6.0];
    let dw = [-u * u / 2.0, (3.0 * t * t - 4.0 * t) / 2.0, (-3.0 * t * t + 2.0 * t + 1.0) / 2.0, t * t / 2.0];
    let (mut v, mut d) = (0.0, 0.0);
    for k in 0..4 {
        let c = coef[base + mirror(i as isize - 1 + k as isize) * stride];
        v += w[k] * c;
        d += dw[k] * c;
    }
    (v, if inside { d } else { 0.0 })
}

struct Problem<'a> {
    forward: &'a [f64],
    backward: &'a [f64],
    grid: &'a Grid,
    axis: usize,
    alpha: f64,
}

impl Problem<'_> {
    fn voxvol(&self) -> f64 {
        self.grid.voxel_volume()
    }

    fn linearize(&self, b: &[f64]) -> Linearization {
        let grid = self.grid;
        let n = grid.dims[self.axis];
        let stride = grid.stride(self.axis);
        let deriv = ped_derivative(b, grid, self.axis);
        let len = grid.len();
        let mut lin = Linearization {
            residual: vec![0.0; len],
            d_shift: vec![0.0; len],
            d_slope: vec![0.0; len],
        };
        for base in line_starts(grid, self.axis) {
            for j in 0..n {
                let idx = base + j * stride;
                let (f, df) = spline_sample(self.forward, base, stride, n, j as f64 + b[idx]);
                let (g, dg) = spline_sample(self.backward, base, stride, n, j as f64 - b[idx]);
                let d = deriv[idx];
                lin.residual[idx] = f * (1.0 + d) - g * (1.0 - d);
                lin.d_shift[idx] = df * (1.0 + d) + dg * (1.0 - d);
                lin.d_slope[idx] = f + g;
            }
        }
        lin
    }

    fn distance(&self, lin: &Linearization) -> f64 {
        0.5 * self.voxvol() * lin.residual.iter().map(|r| r * r).sum::<f64>()
    }

    fn smoothness(&self, b: &[f64]) -> f64 {
        let grid = self.grid;
        let mut acc = 0.0;
        for axis in 0..3 {
            let n = grid.dims[axis];
            if n < 2 {
                continue;
            }
            let stride = grid.stride(axis);
            let w = 1.0 / (grid.spacing[axis] * grid.spacing[axis]);
            for base in line_starts(grid, axis) {
                for j in 0..n - 1 {
                    let d = b[base + (j + 1) * stride] - b[base + j * stride];
                    acc += w * d * d;
                }
            }
        }
        0.5 * self.voxvol() * acc
    }

    /// `L b` for the anisotropic graph Laplacian with Neumann ends.
    fn laplacian(&self, b: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let mut out = vec![0.0; b.len()];
        for axis in 0..3 {
            let n = grid.dims[axis];
            if n < 2 {
                continue;
            }
            let stride = grid.stride(axis);
            let w = 1.0 / (grid.spacing[axis] * grid.spacing[axis]);
            for base in line_starts(grid, axis) {
                for j in 0..n - 1 {
                    let (p, q) = (base + j * stride, base + (j + 1) * stride);
                    let d = w * (b[p] - b[q]);
                    out[p] += d;
                    out[q] -= d;
                }
            }
        }
        out
    }

    fn laplacian_diagonal(&self) -> Vec<f64> {
        let grid = self.grid;
        let mut out = vec![0.0; grid.len()];
        for axis in 0..3 {
            let n = grid.dims[axis];
            if n < 2 {
                continue;
            }
            let stride = grid.stride(axis);
            let w = 1.0 / (grid.spacing[axis] * grid.spacing[axis]);
            for base in line_starts(grid, axis) {
                for j in 0..n {
                    let neighbours = if j == 0 || j == n - 1 { 1.0 } else { 2.0 };
                    out[base + j * stride] += w * neighbours;
                }
            }
        }
        out
    }

    /// Transpose of the phase-encode derivative operator.
    fn derivative_transpose(&self, w: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let n = grid.dims[self.axis];
        let stride = grid.stride(self.axis);
        let mut out = vec![0.0; w.len()];
        if n < 2 {
            return out;
        }
        for base in line_starts(grid, self.axis) {
            let at = |j: usize| base + j * stride;
            out[at(1)] += w[at(0)];
            out[at(0)] -= w[at(0)];
            for j in 1..n - 1 {
                out[at(j + 1)] += 0.5 * w[at(j)];
                out[at(j - 1)] -= 0.5 * w[at(j)];
            }
            out[at(n - 1)] += w[at(n - 1)];
            out[at(n - 2)] -= w[at(n - 1)];
        }
        out
    }

    fn value(&self, b: &[f64]) -> f64 {
        let lin = self.linearize(b);
        self.distance(&lin) + self.alpha * self.smoothness(b)
    }

    fn evaluate(&self, b: &[f64]) -> (ObjectiveValue, Linearization) {
        let lin = self.linearize(b);
        let distance = self.distance(&lin);
        let smoothness = self.smoothness(b);
        let vv = self.voxvol();
        let weighted: Vec<f64> = lin.residual.iter().zip(&lin.d_slope).map(|(r, s)| r * s).collect();
        let through_slope = self.derivative_transpose(&weighted);
        let lap = self.laplacian(b);
        let gradient = (0..b.len())
            .map(|i| vv * (lin.d_shift[i] * lin.residual[i] + through_slope[i]) + self.alpha * vv * lap[i])
            .collect();
        (
            ObjectiveValue {
                value: distance + self.alpha * smoothness,
                distance,
                smoothness,
                gradient,
            },
            lin,
        )
    }

    /// Gauss-Newton operator `vv (J^T J + alpha L) v + damping v`.
    fn apply_hessian(&self, lin: &Linearization, v: &[f64], damping: f64) -> Vec<f64> {
        let dv = ped_derivative(v, self.grid, self.axis);
        let jv: Vec<f64> = (0..v.len()).map(|i| lin.d_shift[i] * v[i] + lin.d_slope[i] * dv[i]).collect();
        let sj: Vec<f64> = jv.iter().zip(&lin.d_slope).map(|(a, s)| a * s).collect();
        let back = self.derivative_transpose(&sj);
        let lap = self.laplacian(v);
        let vv = self.voxvol();
        (0..v.len())
            .map(|i| vv * (lin.d_shift[i] * jv[i] + back[i] + self.alpha * lap[i]) + damping * v[i])
            .collect()
    }

    fn hessian_diagonal(&self, lin: &Linearization) -> Vec<f64> {
        let grid = self.grid;
        let n = grid.dims[self.axis];
        let stride = grid.stride(self.axis);
        let mut diag = vec![0.0; grid.len()];
        for base in line_starts(grid, self.axis) {
            for j in 0..n {
                let x = base + j * stride;
                let (a, s) = (lin.d_shift[x], lin.d_slope[x]);
                // row x of J: a at x plus s times row x of the derivative operator
                let mut entries: [(usize, f64); 3] = [(x, a), (x, 0.0), (x, 0.0)];
                if n >= 2 {
                    if j == 0 {
                        entries[0].1 -= s;
                        entries[1] = (x + stride, s);
                    } else if j == n - 1 {
                        entries[0].1 += s;
                        entries[1] = (x - stride, -s);
                    } else {
                        entries[1] = (x + stride, 0.5 * s);
                        entries[2] = (x - stride, -0.5 * s);
                    }
                }
                for (m, c) in entries {
                    diag[m] += c * c;
                }
            }
        }
        let lap = self.laplacian_diagonal();
        let vv = self.voxvol();
        diag.iter().zip(&lap).map(|(d, l)| vv * (d + self.alpha * l)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients for `H x = rhs`.
fn pcg(apply: impl Fn(&[f64]) -> Vec<f64>, diag: &[f64], rhs: &[f64], max_iter: usize, rel_tol: f64) -> Vec<f64> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let inv: Vec<f64> = diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let r0 = dot(&r, &r).sqrt();
    if r0 == 0.0 {
        return x;
    }
    for _ in 0..max_iter {
        let hp = apply(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            break;
        }
        let step = rz / php;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * hp[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * r0 {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Limits every forward difference along the phase-encode axis to `1 - floor` in
/// magnitude, re-integrating from the first sample and restoring the line mean.
/// Lines already within bounds are left untouched.
pub fn project_diffeomorphic(b: &mut [f64], grid: &Grid, axis: usize, floor: f64) {
    let n = grid.dims[axis];
    if n < 2 {
        return;
    }
    let limit = 1.0 - floor;
    let stride = grid.stride(axis);
    let mut line = vec![0.0; n];
    for base in line_starts(grid, axis) {
        let ok = (0..n - 1).all(|j| (b[base + (j + 1) * stride] - b[base + j * stride]).abs() <= limit);
        if ok {
            continue;
        }
        for (j, l) in line.iter_mut().enumerate() {
            *l = b[base + j * stride];
        }
        let mean_before = line.iter().sum::<f64>() / n as f64;
        let mut acc = line[0];
        let mut rebuilt = vec![acc; n];
        for j in 1..n {
            acc += (line[j] - line[j - 1]).clamp(-limit, limit);
            rebuilt[j] = acc;
        }
        let shift = mean_before - rebuilt.iter().sum::<f64>() / n as f64;
        for (j, r) in rebuilt.iter().enumerate() {
            b[base + j * stride] = r + shift;
        }
    }
}

fn check_pair(forward: &Volume, backward: &Volume) -> Result<usize> {
    forward.grid().ensure_matches(backward.grid(), "forward vs backward image")?;
    if forward.ped_axis != backward.ped_axis {
        return Err(Error::GridMismatch(format!(
            "phase-encode axes differ: {} vs {}",
            forward.ped_axis, backward.ped_axis
        )));
    }
    Ok(forward.ped_axis)
}

/// Distance plus `alpha` times smoothness, with its exact gradient.
///
/// Discretisation: `D = 1/2 vv sum (F(x + b)(1 + db/dy) - B(x - b)(1 - db/dy))^2` with
/// cubic B-spline sampling along the phase-encode line and central differences for `db/dy`;
/// `S = 1/2 vv sum |grad b|^2` with forward differences in mm and Neumann boundaries.
pub fn objective(f: &DisplacementField, forward: &Volume, backward: &Volume, alpha: f64) -> Result<ObjectiveValue> {
    check_pair(forward, backward)?;
    forward.grid().ensure_matches(f.grid(), "images vs field")?;
    f.ensure_diffeomorphic()?;
    let fc = spline_coefficients(forward.volume_data(0), forward.grid(), f.ped_axis);
    let bc = spline_coefficients(backward.volume_data(0), forward.grid(), f.ped_axis);
    let problem = Problem {
        forward: &fc,
        backward: &bc,
        grid: forward.grid(),
        axis: f.ped_axis,
        alpha,
    };
    Ok(problem.evaluate(f.data()).0)
}

/// `I_C(x) = (F(x + b)(1 + db/dy) + B(x - b)(1 - db/dy)) / 2`.
pub fn reconstruct_midway(forward: &Volume, backward: &Volume, f: &DisplacementField) -> Result<Volume> {
    check_pair(forward, backward)?;
    forward.grid().ensure_matches(f.grid(), "images vs field")?;
    f.ensure_diffeomorphic()?;
    let grid = forward.grid();
    let axis = f.ped_axis;
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let deriv = f.ped_derivative();
    let fc = spline_coefficients(forward.volume_data(0), grid, axis);
    let bc = spline_coefficients(backward.volume_data(0), grid, axis);
    let mut out = vec![0.0; grid.len()];
    for base in line_starts(grid, axis) {
        for j in 0..n {
            let idx = base + j * stride;
            let b = f.data()[idx];
            let d = deriv[idx];
            let (fv, _) = spline_sample(&fc, base, stride, n, j as f64 + b);
            let (bv, _) = spline_sample(&bc, base, stride, n, j as f64 - b);
            out[idx] = 0.5 * (fv * (1.0 + d) + bv * (1.0 - d));
        }
    }
    let mut v = Volume::new(grid.clone(), out)?;
    v.ped_axis = axis;
    v.ped_sign = PedSign::Forward;
    Ok(v)
}

/// Undoes the distortion of every volume of a series acquired with polarity `dwi.ped_sign`.
pub fn apply_to_series(dwi: &Volume, f: &DisplacementField) -> Result<Volume> {
    warp_ped(dwi, f, dwi.ped_sign, true)
}

struct Level {
    forward: Vec<f64>,
    backward: Vec<f64>,
    grid: Grid,
    /// Axes halved relative to the next finer level.
    halved: [bool; 3],
}

const MIN_COARSE_DIM: usize = 4;
const PCG_MAX_ITERS: usize = 200;
const PCG_TOLERANCE: f64 = 1e-4;
const ARMIJO_HALVINGS: usize = 12;
const MAX_LAMBDA: f64 = 1e4;

fn downsample(data: &[f64], grid: &Grid, halved: [bool; 3]) -> (Vec<f64>, Grid) {
    let mut dims = grid.dims;
    let mut spacing = grid.spacing;
    let mut affine = grid.affine;
    for a in 0..3 {
        if halved[a] {
            dims[a] = grid.dims[a].div_ceil(2);
            spacing[a] *= 2.0;
            for r in 0..3 {
                affine[r][3] += 0.5 * affine[r][a];
                affine[r][a] *= 2.0;
            }
        }
    }
    let coarse = Grid::with_affine(dims, spacing, affine).expect("coarsened grid is valid");
    let mut sum = vec![0.0; coarse.len()];
    let mut count = vec![0.0; coarse.len()];
    for (idx, v) in data.iter().enumerate() {
        let c = grid.coords(idx);
        let cc: Vec<usize> = (0..3).map(|a| if halved[a] { c[a] / 2 } else { c[a] }).collect();
        let t = coarse.index(cc[0], cc[1], cc[2]);
        sum[t] += v;
        count[t] += 1.0;
    }
    (sum.iter().zip(&count).map(|(s, c)| s / c).collect(), coarse)
}

fn build_pyramid(forward: &Volume, backward: &Volume, levels: usize) -> Vec<Level> {
    let mut out = vec![Level {
        forward: forward.volume_data(0).to_vec(),
        backward: backward.volume_data(0).to_vec(),
        grid: forward.grid().clone(),
        halved: [false; 3],
    }];
    while out.len() < levels {
        let last = out.last().unwrap();
        // thick axes stay at full resolution until the others catch up with them
        let thickest = last.grid.spacing.iter().cloned().fold(0.0, f64::max);
        let halved = [0, 1, 2].map(|a| last.grid.dims[a] >= 2 * MIN_COARSE_DIM && 2.0 * last.grid.spacing[a] <= thickest * (1.0 + 1e-9));
        if !halved.iter().any(|&h| h) {
            break;
        }
        // anti-aliasing before block averaging widens the capture range of coarse levels
        let sigma = [0, 1, 2].map(|a| if halved[a] { last.grid.spacing[a] } else { 0.0 });
        let blur = |d: &[f64]| {
            let v = Volume::new(last.grid.clone(), d.to_vec()).expect("level shape");
            gaussian_smooth(&v, sigma).into_data()
        };
        let (f, g) = downsample(&blur(&last.forward), &last.grid, halved);
        let (b, _) = downsample(&blur(&last.backward), &last.grid, halved);
        out.push(Level {
            forward: f,
            backward: b,
            grid: g,
            halved,
        });
    }
    out
}

/// Trilinear prolongation of a coarse field onto the next finer grid, rescaled to
/// fine voxel units along the phase-encode axis.
fn prolong(coarse: &[f64], coarse_grid: &Grid, fine_grid: &Grid, halved: [bool; 3], axis: usize) -> Vec<f64> {
    let cv = Volume::new(coarse_grid.clone(), coarse.to_vec()).expect("coarse field shape");
    let scale = if halved[axis] { 2.0 } else { 1.0 };
    (0..fine_grid.len())
        .map(|idx| {
            let c = fine_grid.coords(idx);
            let p = [0, 1, 2].map(|a| {
                if halved[a] {
                    (c[a] as f64 - 0.5) / 2.0
                } else {
                    c[a] as f64
                }
            });
            scale * cv.sample_linear(p)
        })
        .collect()
}

/// Gauss-Newton with Armijo backtracking over a coarse-to-fine pyramid.
///
/// The first image is treated as the forward acquisition. Each accepted step
/// strictly decreases the objective at its level; `converged` is false when the
/// finest level exhausted `max_iters` without the update falling below tolerance.
pub fn estimate_field_variational(
    forward: &Volume,
    backward: &Volume,
    opts: &VariationalOptions,
) -> Result<CorrectionResult> {
    opts.validate()?;
    let axis = check_pair(forward, backward)?;
    let pyramid = build_pyramid(forward, backward, opts.levels);
    let mut trace = Vec::new();
    let mut iter = 0usize;
    let mut b: Vec<f64> = vec![0.0; pyramid.last().unwrap().grid.len()];
    let mut converged = false;

    for level in (0..pyramid.len()).rev() {
        let lv = &pyramid[level];
        if level + 1 < pyramid.len() {
            let coarse = &pyramid[level + 1];
            b = prolong(&b, &coarse.grid, &lv.grid, coarse.halved, axis);
            project_diffeomorphic(&mut b, &lv.grid, axis, opts.jacobian_floor);
        }
        let fc = spline_coefficients(&lv.forward, &lv.grid, axis);
        let bc = spline_coefficients(&lv.backward, &lv.grid, axis);
        let problem = Problem {
            forward: &fc,
            backward: &bc,
            grid: &lv.grid,
            axis,
            alpha: opts.alpha,
        };
        let (mut current, mut lin) = problem.evaluate(&b);
        trace.push(TraceEntry {
            iter,
            level,
            value: current.value,
            step: 0.0,
        });
        converged = false;
        // Levenberg-Marquardt weight relative to the mean Gauss-Newton diagonal
        let mut lambda = 1e-3;
        for _ in 0..opts.max_iters {
            let gnorm = dot(&current.gradient, &current.gradient).sqrt();
            if gnorm == 0.0 {
                converged = true;
                break;
            }
            let base_diag = problem.hessian_diagonal(&lin);
            let mean_diag = (base_diag.iter().sum::<f64>() / base_diag.len() as f64).max(f64::MIN_POSITIVE);
            let rhs: Vec<f64> = current.gradient.iter().map(|g| -g).collect();
            let mut accepted = None;
            while accepted.is_none() && lambda <= MAX_LAMBDA {
                let damping = lambda * mean_diag;
                let diag: Vec<f64> = base_diag.iter().map(|d| d + damping).collect();
                let dir = pcg(|v| problem.apply_hessian(&lin, v, damping), &diag, &rhs, PCG_MAX_ITERS, PCG_TOLERANCE);
                let mut t = 1.0;
                for _ in 0..ARMIJO_HALVINGS {
                    let mut trial: Vec<f64> = b.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
                    project_diffeomorphic(&mut trial, &lv.grid, axis, opts.jacobian_floor);
                    let value = problem.value(&trial);
                    let delta: Vec<f64> = trial.iter().zip(&b).map(|(a, c)| a - c).collect();
                    let slope = dot(&current.gradient, &delta);
                    if value < current.value && value <= current.value + 1e-4 * slope.min(0.0) {
                        accepted = Some((trial, delta));
                        break;
                    }
                    t *= 0.5;
                }
                // full steps relax the damping, backtracked or failed ones tighten it
                lambda = if accepted.is_some() && t == 1.0 { (lambda / 3.0).max(1e-6) } else { lambda * 4.0 };
            }
            let Some((trial, delta)) = accepted else {
                // no admissible descent even along a heavily damped direction
                converged = true;
                break;
            };
            let step = (dot(&delta, &delta) / delta.len() as f64).sqrt();
            b = trial;
            (current, lin) = problem.evaluate(&b);
            iter += 1;
            trace.push(TraceEntry {
                iter,
                level,
                value: current.value,
                step,
            });
            if step < opts.step_tolerance {
                converged = true;
                break;
            }
        }
    }

    let field = DisplacementField::new(forward.grid().clone(), b, axis)?;
    let corrected = reconstruct_midway(forward, backward, &field)?;
    Ok(CorrectionResult {
        field,
        corrected,
        trace,
        converged,
        flagged_lines: Vec::new(),
    })
}

/// Number of quantiles sampled per line by [`estimate_field_line_align`].
pub const LINE_QUANTILES: usize = 256;

/// Cumulative mass of a line profile at the `n + 1` cell borders, normalised to end at 1.
fn cumulative(profile: &[f64]) -> Vec<f64> {
    let max = profile.iter().cloned().fold(0.0, f64::max);
    let eps = 1e-6 * max;
    let mut c = Vec::with_capacity(profile.len() + 1);
    let mut acc = 0.0;
    c.push(0.0);
    for p in profile {
        acc += p.max(0.0) + eps;
        c.push(acc);
    }
    c.iter_mut().for_each(|x| *x /= acc);
    c
}

/// Position `y` in `[-0.5, n - 0.5]` where the cumulative profile reaches `q`.
fn inverse_cumulative(c: &[f64], q: f64) -> f64 {
    let hi = c.partition_point(|&x| x < q).clamp(1, c.len() - 1);
    let lo = hi - 1;
    let span = c[hi] - c[lo];
    let frac = if span > 0.0 { (q - c[lo]) / span } else { 0.0 };
    lo as f64 - 0.5 + frac
}

/// Displacements along one line from its forward and backward profiles, or `None`
/// when either profile carries no intensity.
fn align_line(forward: &[f64], backward: &[f64]) -> Option<Vec<f64>> {
    let n = forward.len();
    if !forward.iter().any(|&x| x > 0.0) || !backward.iter().any(|&x| x > 0.0) {
        return None;
    }
    let cf = cumulative(forward);
    let cb = cumulative(backward);
    let mut mid = Vec::with_capacity(LINE_QUANTILES);
    let mut disp = Vec::with_capacity(LINE_QUANTILES);
    for k in 0..LINE_QUANTILES {
        let q = (k as f64 + 0.5) / LINE_QUANTILES as f64;
        let yf = inverse_cumulative(&cf, q);
        let yb = inverse_cumulative(&cb, q);
        mid.push((yf + yb) / 2.0);
        disp.push((yf - yb) / 2.0);
    }
    let mut out = vec![0.0; n];
    for (y, o) in out.iter_mut().enumerate() {
        let y = y as f64;
        *o = if y <= mid[0] {
            disp[0]
        } else if y >= mid[LINE_QUANTILES - 1] {
            disp[LINE_QUANTILES - 1]
        } else {
            let hi = mid.partition_point(|&m| m <= y).min(LINE_QUANTILES - 1);
            let lo = hi - 1;
            let span = mid[hi] - mid[lo];
            if span > 0.0 {
                let w = (y - mid[lo]) / span;
                disp[lo] + w * (disp[hi] - disp[lo])
            } else {
                disp[lo]
            }
        };
    }
    Some(out)
}

/// Per-line alignment of cumulative intensity profiles, smoothed with an isotropic
/// Gaussian of `sigma_smooth` mm.
///
/// The resulting field is projected onto `|db/dy| <= 0.9` when smoothing leaves
/// folds, so the midway reconstruction stays defined.
pub fn estimate_field_line_align(forward: &Volume, backward: &Volume, sigma_smooth: f64) -> Result<CorrectionResult> {
    let axis = check_pair(forward, backward)?;
    let grid = forward.grid();
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let (fd, bd) = (forward.volume_data(0), backward.volume_data(0));
    let mut raw = vec![0.0; grid.len()];
    let mut flagged = Vec::new();
    let mut fl = vec![0.0; n];
    let mut bl = vec![0.0; n];
    for base in line_starts(grid, axis) {
        for j in 0..n {
            fl[j] = fd[base + j * stride];
            bl[j] = bd[base + j * stride];
        }
        match align_line(&fl, &bl) {
            Some(d) => {
                for (j, v) in d.iter().enumerate() {
                    raw[base + j * stride] = *v;
                }
            }
            None => {
                let c = grid.coords(base);
                let others: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| c[a]).collect();
                flagged.push([others[0], others[1]]);
            }
        }
    }
    let raw = DisplacementField::new(grid.clone(), raw, axis)?;
    let smoothed = gaussian_smooth(&raw.to_volume(), [sigma_smooth; 3]);
    let mut data = smoothed.into_data();
    project_diffeomorphic(&mut data, grid, axis, 0.1);
    let field = DisplacementField::new(grid.clone(), data, axis)?;
    let corrected = reconstruct_midway(forward, backward, &field)?;
    Ok(CorrectionResult {
        field,
        corrected,
        trace: Vec::new(),
        converged: true,
        flagged_lines: flagged,
    })
}

/// Field estimated by line alignment before smoothing; exposed for inspection.
pub fn line_align_raw(forward: &[f64], backward: &[f64]) -> Option<Vec<f64>> {
    align_line(forward, backward)
}
