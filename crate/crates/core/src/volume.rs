//! Image grids, scalar volumes, masks and label maps.
//!
//! Samples are stored x-fastest (NIfTI order). 4D series are volume-major:
//! each 3D volume occupies one contiguous block of `nx * ny * nz` samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (axis, s) in spacing.iter().enumerate() {
        a[axis][axis] = *s;
    }
    a[3][3] = 1.0;
    a
}

fn det3(a: &Affine) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Voxel lattice shared by volumes, masks, label maps and fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel along each axis.
    pub spacing: [f64; 3],
    /// Voxel index to world (mm) map.
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_affine(dims, spacing, diagonal_affine(spacing))
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("zero-sized dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec(format!("non-positive spacing {spacing:?}")));
        }
        let det = det3(&affine);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::InvalidSpec("affine is singular".into()));
        }
        Ok(Grid { dims, spacing, affine })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Distance in the flat buffer between neighbours along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3];
        }
        out
    }

    pub fn voxel_to_world(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        self.to_world([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Upper-left 3x3 block of the affine, i.e. the linear part of the voxel to world map.
    pub fn rotation_scale(&self) -> [[f64; 3]; 3] {
        let a = &self.affine;
        [
            [a[0][0], a[0][1], a[0][2]],
            [a[1][0], a[1][1], a[1][2]],
            [a[2][0], a[2][1], a[2][2]],
        ]
    }

    pub fn matches(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0))
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= 1e-5 * a.abs().max(1.0))
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Phase-encode traversal direction of an EPI acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PedSign {
    /// Head-feet traversal, the `I_F` image.
    #[default]
    Forward,
    /// Feet-head traversal, the `I_B` image.
    Backward,
}

impl PedSign {
    pub fn value(self) -> f64 {
        match self {
            PedSign::Forward => 1.0,
            PedSign::Backward => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PedSign::Forward => PedSign::Backward,
            PedSign::Backward => PedSign::Forward,
        }
    }
}

/// 3D or 4D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    nvol: usize,
    data: Vec<f64>,
    pub ped_axis: usize,
    pub ped_sign: PedSign,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        Self::new_4d(grid, 1, data)
    }

    pub fn new_4d(grid: Grid, nvol: usize, data: Vec<f64>) -> Result<Self> {
        if nvol == 0 {
            return Err(Error::InvalidSpec("4D series with zero volumes".into()));
        }
        if data.len() != grid.len() * nvol {
            return Err(Error::InvalidSpec(format!(
                "data length {} does not match dims {:?} x {nvol}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume {
            grid,
            nvol,
            data,
            ped_axis: 1,
            ped_sign: PedSign::Forward,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Volume {
            grid,
            nvol: 1,
            data: vec![0.0; n],
            ped_axis: 1,
            ped_sign: PedSign::Forward,
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume {
            grid,
            nvol: 1,
            data,
            ped_axis: 1,
            ped_sign: PedSign::Forward,
        }
    }

    /// Stacks equally gridded 3D volumes into a 4D series. Phase-encode tags come from the first.
    pub fn stack(volumes: &[Volume]) -> Result<Self> {
        let first = volumes.first().ok_or_else(|| Error::InvalidSpec("empty volume list".into()))?;
        let mut data = Vec::with_capacity(first.grid.len() * volumes.len());
        for v in volumes {
            first.grid.ensure_matches(&v.grid, "stack")?;
            if v.nvol != 1 {
                return Err(Error::InvalidSpec("can only stack 3D volumes".into()));
            }
            data.extend_from_slice(&v.data);
        }
        let mut out = Volume::new_4d(first.grid.clone(), volumes.len(), data)?;
        out.ped_axis = first.ped_axis;
        out.ped_sign = first.ped_sign;
        Ok(out)
    }

    pub fn with_ped(mut self, axis: usize, sign: PedSign) -> Self {
        assert!(axis < 3, "phase-encode axis must be 0, 1 or 2");
        self.ped_axis = axis;
        self.ped_sign = sign;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn nvol(&self) -> usize {
        self.nvol
    }

    pub fn is_4d(&self) -> bool {
        self.nvol > 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn volume_data(&self, v: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn subvolume(&self, v: usize) -> Volume {
        Volume {
            grid: self.grid.clone(),
            nvol: 1,
            data: self.volume_data(v).to_vec(),
            ped_axis: self.ped_axis,
            ped_sign: self.ped_sign,
        }
    }

    /// Same grid and phase-encode tags, new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Volume> {
        let nvol = data.len() / self.grid.len().max(1);
        let mut out = Volume::new_4d(self.grid.clone(), nvol, data)?;
        out.ped_axis = self.ped_axis;
        out.ped_sign = self.ped_sign;
        Ok(out)
    }

    /// Voxelwise mean across the 4D series.
    pub fn mean_over_volumes(&self, select: impl Fn(usize) -> bool) -> Volume {
        let n = self.grid.len();
        let mut acc = vec![0.0; n];
        let mut count = 0usize;
        for v in (0..self.nvol).filter(|&v| select(v)) {
            for (a, x) in acc.iter_mut().zip(self.volume_data(v)) {
                *a += x;
            }
            count += 1;
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        let mut out = Volume::zeros(self.grid.clone());
        out.data = acc;
        out.ped_axis = self.ped_axis;
        out.ped_sign = self.ped_sign;
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Trilinear interpolation at a continuous voxel coordinate (first volume of a series).
    pub fn sample_linear(&self, p: [f64; 3]) -> f64 {
        sample_linear(self, p)
    }
}

/// Trilinear interpolation; coordinates outside `[0, dim - 1]` clamp to the boundary.
pub fn sample_linear(v: &Volume, p: [f64; 3]) -> f64 {
    let dims = v.grid.dims;
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for axis in 0..3 {
        let (l, f) = clamp_cell(p[axis], dims[axis]);
        lo[axis] = l;
        frac[axis] = f;
    }
    let data = v.volume_data(0);
    let mut acc = 0.0;
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let hi = (corner >> axis) & 1 == 1;
            if hi {
                if frac[axis] == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= frac[axis];
                idx[axis] = lo[axis] + 1;
            } else {
                w *= 1.0 - frac[axis];
                idx[axis] = lo[axis];
            }
        }
        if w != 0.0 {
            acc += w * data[v.grid.index(idx[0], idx[1], idx[2])];
        }
    }
    acc
}

/// Lower cell index and fractional offset after clamping to `[0, n - 1]`.
#[inline]
pub(crate) fn clamp_cell(p: f64, n: usize) -> (usize, f64) {
    if n == 1 || p.is_nan() || p <= 0.0 {
        return (0, 0.0);
    }
    let max = (n - 1) as f64;
    if p >= max {
        return (n - 1, 0.0);
    }
    let l = p.floor();
    (l as usize, p - l)
}

/// Linear interpolation along one grid line, returning the value and its derivative
/// with respect to the position. Outside the line the value clamps and the derivative is 0.
#[inline]
pub(crate) fn line_sample(data: &[f64], base: usize, stride: usize, n: usize, pos: f64) -> (f64, f64) {
    if n == 1 {
        return (data[base], 0.0);
    }
    let max = (n - 1) as f64;
    if pos < 0.0 {
        return (data[base], 0.0);
    }
    if pos > max {
        return (data[base + (n - 1) * stride], 0.0);
    }
    let mut l = pos.floor() as usize;
    if l >= n - 1 {
        l = n - 2;
    }
    let f = pos - l as f64;
    let a = data[base + l * stride];
    let b = data[base + (l + 1) * stride];
    (a + f * (b - a), b - a)
}

/// Index of the voxel mirrored into `[0, n)` with half-sample symmetric reflection.
#[inline]
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

fn convolve_axis(data: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let radius = (kernel.len() / 2) as isize;
    let mut line = vec![0.0; n];
    let (outer_a, outer_b) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    for b in 0..outer_b {
        for a in 0..outer_a {
            let base = match axis {
                0 => dims[0] * (a + dims[1] * b),
                1 => a + dims[0] * dims[1] * b,
                _ => a + dims[0] * b,
            };
            for (t, l) in line.iter_mut().enumerate() {
                *l = data[base + t * stride];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let src = reflect(t as isize + ki as isize - radius, n);
                    acc += w * line[src];
                }
                data[base + t * stride] = acc;
            }
        }
    }
}

/// Separable Gaussian smoothing, `sigma` in mm per axis. Kernel radius is `ceil(3 sigma / spacing)`
/// voxels and borders reflect. Each volume of a 4D series is smoothed independently.
pub fn gaussian_smooth(v: &Volume, sigma: [f64; 3]) -> Volume {
    let mut out = v.clone();
    let dims = v.grid.dims;
    let n = v.grid.len();
    for axis in 0..3 {
        assert!(sigma[axis] >= 0.0, "negative smoothing sigma");
        if sigma[axis] == 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma[axis] / v.grid.spacing[axis]);
        for vol in 0..v.nvol {
            convolve_axis(&mut out.data[vol * n..(vol + 1) * n], dims, axis, &kernel);
        }
    }
    out
}

/// Binary mask on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidSpec("mask length does not match grid".into()));
        }
        Ok(Mask { grid, data })
    }

    pub fn full(grid: Grid) -> Self {
        let n = grid.len();
        Mask { grid, data: vec![true; n] }
    }

    /// Voxels with value strictly above `threshold`.
    pub fn from_threshold(v: &Volume, threshold: f64) -> Self {
        Mask {
            grid: v.grid.clone(),
            data: v.volume_data(0).iter().map(|&x| x > threshold).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.data[idx]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_volume(&self) -> Volume {
        let mut v = Volume::zeros(self.grid.clone());
        for (o, &b) in v.data.iter_mut().zip(&self.data) {
            *o = if b { 1.0 } else { 0.0 };
        }
        v
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_matches(&other.grid, "mask intersection")?;
        Ok(Mask {
            grid: self.grid.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// Dilation by a cube of half-width `radius` voxels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let dims = self.grid.dims;
        let r = radius as isize;
        let mut out = vec![false; self.data.len()];
        for idx in self.indices() {
            let c = self.grid.coords(idx);
            for dk in -r..=r {
                for dj in -r..=r {
                    for di in -r..=r {
                        let (i, j, k) = (c[0] as isize + di, c[1] as isize + dj, c[2] as isize + dk);
                        if i < 0 || j < 0 || k < 0 {
                            continue;
                        }
                        let (i, j, k) = (i as usize, j as usize, k as usize);
                        if i < dims[0] && j < dims[1] && k < dims[2] {
                            out[self.grid.index(i, j, k)] = true;
                        }
                    }
                }
            }
        }
        Mask { grid: self.grid.clone(), data: out }
    }
}

/// Vertebral level label map: 0 background, 1..=K levels.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLabels {
    grid: Grid,
    data: Vec<u16>,
    max_label: u16,
}

impl LevelLabels {
    /// Rejects label sets that skip a value between 1 and the maximum.
    pub fn new(grid: Grid, data: Vec<u16>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidSpec("label map length does not match grid".into()));
        }
        let max_label = data.iter().copied().max().unwrap_or(0);
        let mut present = vec![false; max_label as usize + 1];
        for &l in &data {
            present[l as usize] = true;
        }
        if let Some(missing) = (1..=max_label as usize).find(|&l| !present[l]) {
            return Err(Error::InvalidSpec(format!(
                "level labels are not contiguous: label {missing} missing below max {max_label}"
            )));
        }
        Ok(LevelLabels { grid, data, max_label })
    }

    /// Rounds a float volume (as loaded from NIfTI) to integer labels.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .volume_data(0)
            .iter()
            .map(|&x| {
                let r = x.round();
                if !(0.0..=u16::MAX as f64).contains(&r) {
                    Err(Error::InvalidSpec(format!("label value {x} out of range")))
                } else {
                    Ok(r as u16)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.grid.clone(), data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn max_label(&self) -> u16 {
        self.max_label
    }

    pub fn region(&self, label: u16) -> Mask {
        Mask {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        let mut v = Volume::zeros(self.grid.clone());
        for (o, &l) in v.data.iter_mut().zip(&self.data) {
            *o = l as f64;
        }
        v
    }
}

/// Conventional name of a vertebral level label: brain stem, C1..C7, T1, T2, then generic.
pub fn level_name(label: u16) -> String {
    match label {
        0 => "background".into(),
        1 => "BS".into(),
        2..=8 => format!("C{}", label - 1),
        9 | 10 => format!("T{}", label - 8),
        _ => format!("L{label}"),
    }
}

/// Diffusion weighting per volume of a DWI series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScheme {
    /// s/mm^2
    pub bvalues: Vec<f64>,
    pub directions: Vec<[f64; 3]>,
}

impl AcquisitionScheme {
    pub fn new(bvalues: Vec<f64>, directions: Vec<[f64; 3]>) -> Result<Self> {
        if bvalues.len() != directions.len() {
            return Err(Error::InvalidSpec(format!(
                "{} b-values but {} directions",
                bvalues.len(),
                directions.len()
            )));
        }
        for (i, (b, g)) in bvalues.iter().zip(&directions).enumerate() {
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::InvalidSpec(format!("b-value {b} at volume {i}")));
            }
            if norm > 0.0 && (norm - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidSpec(format!("direction {i} has norm {norm}")));
            }
            if *b > 0.0 && norm == 0.0 {
                return Err(Error::InvalidSpec(format!("diffusion-weighted volume {i} has zero direction")));
            }
        }
        Ok(AcquisitionScheme { bvalues, directions })
    }

    pub fn len(&self) -> usize {
        self.bvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvalues.is_empty()
    }

    /// Volumes treated as non diffusion-weighted.
    pub fn is_b0(&self, v: usize) -> bool {
        self.bvalues[v] <= 1e-6
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.is_b0(v)).collect()
    }

    /// Number of pairwise non-collinear diffusion-weighted directions.
    pub fn noncollinear_directions(&self) -> usize {
        let mut axes: Vec<[f64; 3]> = Vec::new();
        for v in (0..self.len()).filter(|&v| !self.is_b0(v)) {
            let g = self.directions[v];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let u = [g[0] / norm, g[1] / norm, g[2] / norm];
            if axes
                .iter()
                .all(|a| (a[0] * u[0] + a[1] * u[1] + a[2] * u[2]).abs() < 1.0 - 1e-6)
            {
                axes.push(u);
            }
        }
        axes.len()
    }
}
