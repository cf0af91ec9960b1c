//! Log-linear diffusion tensor estimation and eigen-analysis.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::volume::{AcquisitionScheme, Grid, Mask, Volume};

/// Unique components in the order `Dxx, Dxy, Dxz, Dyy, Dyz, Dzz` (mm^2/s).
pub type Tensor6 = [f64; 6];

pub fn tensor_matrix(d: &Tensor6) -> Matrix3<f64> {
    Matrix3::new(d[0], d[1], d[2], d[1], d[3], d[4], d[2], d[4], d[5])
}

pub fn tensor_from_matrix(m: &Matrix3<f64>) -> Tensor6 {
    [
        m[(0, 0)],
        0.5 * (m[(0, 1)] + m[(1, 0)]),
        0.5 * (m[(0, 2)] + m[(2, 0)]),
        m[(1, 1)],
        0.5 * (m[(1, 2)] + m[(2, 1)]),
        m[(2, 2)],
    ]
}

/// Builds `sum_i lambda_i e_i e_i^T` from eigenvalues and (not necessarily unit) axes.
pub fn tensor_from_eigen(values: [f64; 3], axes: [[f64; 3]; 3]) -> Tensor6 {
    let mut m = Matrix3::zeros();
    for (l, a) in values.iter().zip(&axes) {
        let v = nalgebra::Vector3::from(*a).normalize();
        m += *l * v * v.transpose();
    }
    tensor_from_matrix(&m)
}

/// Apparent diffusion along unit direction `g`: `g^T D g`.
pub fn directional_diffusivity(d: &Tensor6, g: [f64; 3]) -> f64 {
    d[0] * g[0] * g[0]
        + d[3] * g[1] * g[1]
        + d[5] * g[2] * g[2]
        + 2.0 * (d[1] * g[0] * g[1] + d[2] * g[0] * g[2] + d[4] * g[1] * g[2])
}

/// Per-voxel tensors with fitted `ln S0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    pub tensors: Vec<Tensor6>,
    pub ln_s0: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TensorField {
    pub fn new_invalid(grid: Grid) -> Self {
        let n = grid.len();
        TensorField {
            grid,
            tensors: vec![[0.0; 6]; n],
            ln_s0: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Six-volume 4D image of the tensor components (`Dxx, Dxy, Dxz, Dyy, Dyz, Dzz`).
    pub fn to_volume(&self) -> Volume {
        let n = self.grid.len();
        let mut data = vec![0.0; 6 * n];
        for (idx, t) in self.tensors.iter().enumerate() {
            if self.valid[idx] {
                for c in 0..6 {
                    data[c * n + idx] = t[c];
                }
            }
        }
        Volume::new_4d(self.grid.clone(), 6, data).expect("tensor volume shape")
    }
}

/// Eigen-decomposition of one symmetric tensor, eigenvalues descending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorEigen {
    pub values: [f64; 3],
    /// Unit eigenvectors matching `values`; each has its largest-magnitude component positive.
    pub vectors: [[f64; 3]; 3],
}

/// Flips `v` so its component of largest magnitude is positive (first index wins ties).
pub fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let mut k = 0;
    for i in 1..3 {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

pub fn eigen_tensor(d: &Tensor6) -> TensorEigen {
    let eig = SymmetricEigen::new(tensor_matrix(d));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (slot, &o) in order.iter().enumerate() {
        values[slot] = eig.eigenvalues[o];
        let col = eig.eigenvectors.column(o);
        let n = col.norm();
        vectors[slot] = canonical_sign([col[0] / n, col[1] / n, col[2] / n]);
    }
    TensorEigen { values, vectors }
}

/// Relative gap `(l1 - l2) / l1` under which the principal direction is considered undefined.
pub const DEGENERACY_THRESHOLD: f64 = 1e-3;

/// Principal direction (world frame), sorted eigenvalues and mean diffusivity per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenField {
    pub grid: Grid,
    pub e1: Vec<[f64; 3]>,
    pub eigenvalues: Vec<[f64; 3]>,
    pub md: Vec<f64>,
    pub valid: Vec<bool>,
    pub degenerate: Vec<bool>,
}

impl EigenField {
    /// Voxels whose principal direction can enter alignment statistics.
    #[inline]
    pub fn usable(&self, idx: usize) -> bool {
        self.valid[idx] && !self.degenerate[idx]
    }

    pub fn md_volume(&self) -> Volume {
        let data = self
            .md
            .iter()
            .zip(&self.valid)
            .map(|(&m, &v)| if v { m } else { 0.0 })
            .collect();
        Volume::new(self.grid.clone(), data).expect("md volume shape")
    }

    /// Three-volume 4D image of the principal eigenvector components.
    pub fn e1_volume(&self) -> Volume {
        let n = self.grid.len();
        let mut data = vec![0.0; 3 * n];
        for (idx, e) in self.e1.iter().enumerate() {
            if self.valid[idx] {
                for c in 0..3 {
                    data[c * n + idx] = e[c];
                }
            }
        }
        Volume::new_4d(self.grid.clone(), 3, data).expect("e1 volume shape")
    }
}

/// Rotation taking voxel-axis directions to world directions: the affine's linear
/// part with unit-length columns.
fn voxel_to_world_rotation(grid: &Grid) -> Matrix3<f64> {
    let rs = grid.rotation_scale();
    let mut m = Matrix3::from_fn(|r, c| rs[r][c]);
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    m
}

/// Row `[1, -b gx^2, -b gy^2, -b gz^2, -2b gxgy, -2b gxgz, -2b gygz]` in the
/// parameter order `ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz`.
fn design_row(b: f64, g: [f64; 3]) -> [f64; 7] {
    [
        1.0,
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
    ]
}

/// Unweighted log-linear least squares tensor fit over the masked voxels.
///
/// Signals at or below zero are floored at `1e-6` times the voxel's mean b=0 signal
/// before the logarithm; voxels whose mean b=0 signal is not positive are invalid.
/// Gradient directions are taken in the voxel-axis frame.
pub fn fit_dti(dwi: &Volume, scheme: &AcquisitionScheme, mask: &Mask) -> Result<TensorField> {
    if scheme.len() != dwi.nvol() {
        return Err(Error::InvalidSpec(format!(
            "scheme has {} entries, series has {} volumes",
            scheme.len(),
            dwi.nvol()
        )));
    }
    dwi.grid().ensure_matches(mask.grid(), "DWI vs mask")?;
    let found = scheme.noncollinear_directions();
    if found < 6 {
        return Err(Error::InsufficientDirections { found });
    }
    let b0 = scheme.b0_indices();
    if b0.is_empty() {
        return Err(Error::InvalidSpec("scheme has no b=0 volume".into()));
    }
    let m = scheme.len();
    let design = DMatrix::from_fn(m, 7, |r, c| design_row(scheme.bvalues[r], scheme.directions[r])[c]);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::SingularDesign);
    }
    let pinv = svd.pseudo_inverse(0.0).map_err(|_| Error::SingularDesign)?;

    let grid = dwi.grid().clone();
    let nvox = grid.len();
    let mut out = TensorField::new_invalid(grid);
    let mut y = DVector::zeros(m);
    for idx in mask.indices() {
        let s0 = b0.iter().map(|&v| dwi.data()[v * nvox + idx]).sum::<f64>() / b0.len() as f64;
        if !(s0 > 0.0) || !s0.is_finite() {
            continue;
        }
        let floor = 1e-6 * s0;
        for v in 0..m {
            let s = dwi.data()[v * nvox + idx];
            y[v] = if s > floor && s.is_finite() { s.ln() } else { floor.ln() };
        }
        let p = &pinv * &y;
        let t = [p[1], p[4], p[5], p[2], p[6], p[3]];
        if p.iter().all(|x| x.is_finite()) {
            out.tensors[idx] = t;
            out.ln_s0[idx] = p[0];
            out.valid[idx] = true;
        }
    }
    Ok(out)
}

/// Principal eigenvector (rotated to world coordinates), eigenvalues and MD per voxel.
pub fn eigen_decompose(t: &TensorField) -> EigenField {
    let n = t.grid.len();
    let rot = voxel_to_world_rotation(&t.grid);
    let mut out = EigenField {
        grid: t.grid.clone(),
        e1: vec![[0.0; 3]; n],
        eigenvalues: vec![[0.0; 3]; n],
        md: vec![0.0; n],
        valid: t.valid.clone(),
        degenerate: vec![false; n],
    };
    for idx in (0..n).filter(|&i| t.valid[i]) {
        let eig = eigen_tensor(&t.tensors[idx]);
        let v = rot * nalgebra::Vector3::from(eig.vectors[0]);
        out.e1[idx] = canonical_sign([v[0], v[1], v[2]]);
        out.eigenvalues[idx] = eig.values;
        out.md[idx] = eig.values.iter().sum::<f64>() / 3.0;
        let l1 = eig.values[0];
        out.degenerate[idx] = !(l1 > 0.0) || (l1 - eig.values[1]) / l1 < DEGENERACY_THRESHOLD;
    }
    out
}
