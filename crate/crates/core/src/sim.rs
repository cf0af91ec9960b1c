//! Susceptibility distortion along the phase-encode direction.
//!
//! Fields hold `b(x)`, the displacement in voxels along the phase-encode axis,
//! defined on the undistorted grid. A forward acquisition maps the point `x`
//! to `x + b(x) v` and a backward one to `x - b(x) v`, with intensities scaled
//! by the inverse Jacobian so that line integrals are conserved.

use crate::error::{Error, Result};
use crate::volume::{line_sample, Grid, PedSign, Volume};

/// Smallest and largest Jacobian factor applied by [`warp_ped`].
pub const MODULATION_RANGE: (f64, f64) = (0.01, 100.0);

/// Per-voxel displacement along the phase-encode axis, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    data: Vec<f64>,
    pub ped_axis: usize,
}

impl DisplacementField {
    pub fn new(grid: Grid, data: Vec<f64>, ped_axis: usize) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidSpec("field length does not match grid".into()));
        }
        if ped_axis > 2 {
            return Err(Error::InvalidSpec(format!("phase-encode axis {ped_axis}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::RejectNonFinite);
        }
        Ok(DisplacementField { grid, data, ped_axis })
    }

    pub fn zeros(grid: Grid, ped_axis: usize) -> Self {
        let n = grid.len();
        DisplacementField {
            grid,
            data: vec![0.0; n],
            ped_axis,
        }
    }

    pub fn constant(grid: Grid, ped_axis: usize, value: f64) -> Self {
        let n = grid.len();
        DisplacementField {
            grid,
            data: vec![value; n],
            ped_axis,
        }
    }

    pub fn from_fn(grid: Grid, ped_axis: usize, f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let v = Volume::from_fn(grid, f);
        DisplacementField {
            grid: v.grid().clone(),
            data: v.into_data(),
            ped_axis,
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        Self::new(v.grid().clone(), v.volume_data(0).to_vec(), v.ped_axis)
    }

    pub fn to_volume(&self) -> Volume {
        let mut v = Volume::new(self.grid.clone(), self.data.clone()).expect("field matches its grid");
        v.ped_axis = self.ped_axis;
        v
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
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

    pub fn negated(&self) -> Self {
        DisplacementField {
            grid: self.grid.clone(),
            data: self.data.iter().map(|x| -x).collect(),
            ped_axis: self.ped_axis,
        }
    }

    /// Derivative along the phase-encode axis: central differences inside,
    /// one-sided at the two ends of each line.
    pub fn ped_derivative(&self) -> Vec<f64> {
        ped_derivative(&self.data, &self.grid, self.ped_axis)
    }

    /// Largest `|db/dy|` over voxels that are interior along the phase-encode axis.
    pub fn max_interior_derivative(&self) -> (f64, [usize; 3]) {
        let d = self.ped_derivative();
        let n = self.grid.dims[self.ped_axis];
        let mut best = (0.0, [0, 0, 0]);
        for (idx, v) in d.iter().enumerate() {
            let c = self.grid.coords(idx);
            if n > 2 && (c[self.ped_axis] == 0 || c[self.ped_axis] == n - 1) {
                continue;
            }
            if v.abs() > best.0 {
                best = (v.abs(), c);
            }
        }
        best
    }

    /// Fails unless `|db/dy| < 1` at every interior voxel.
    pub fn ensure_diffeomorphic(&self) -> Result<()> {
        let (max_derivative, voxel) = self.max_interior_derivative();
        if max_derivative >= 1.0 {
            Err(Error::NonDiffeomorphicField { max_derivative, voxel })
        } else {
            Ok(())
        }
    }

    /// Root mean square difference over the voxels where `mask` is set.
    pub fn rms_difference(&self, other: &DisplacementField, mask: Option<&crate::volume::Mask>) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (idx, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if mask.is_none_or(|m| m.contains(idx)) {
                acc += (a - b) * (a - b);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (acc / n as f64).sqrt()
        }
    }
}

/// Iterates over the start index of every line along `axis`.
pub(crate) fn line_starts(grid: &Grid, axis: usize) -> impl Iterator<Item = usize> + '_ {
    let dims = grid.dims;
    let (a_axis, b_axis) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (0..dims[b_axis]).flat_map(move |b| {
        (0..dims[a_axis]).map(move |a| {
            let mut c = [0usize; 3];
            c[a_axis] = a;
            c[b_axis] = b;
            grid.index(c[0], c[1], c[2])
        })
    })
}

pub(crate) fn ped_derivative(data: &[f64], grid: &Grid, axis: usize) -> Vec<f64> {
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let mut out = vec![0.0; data.len()];
    if n < 2 {
        return out;
    }
    for base in line_starts(grid, axis) {
        out[base] = data[base + stride] - data[base];
        for j in 1..n - 1 {
            out[base + j * stride] = (data[base + (j + 1) * stride] - data[base + (j - 1) * stride]) / 2.0;
        }
        out[base + (n - 1) * stride] = data[base + (n - 1) * stride] - data[base + (n - 2) * stride];
    }
    out
}

fn check_field(v: &Volume, f: &DisplacementField) -> Result<()> {
    v.grid().ensure_matches(f.grid(), "volume vs displacement field")?;
    f.ensure_diffeomorphic()
}

/// Pull-back resampling along the phase-encode axis:
/// `out(x) = v(x + s b(x) e) * (1 + s db/dy)` with `s` the sign of `sign`.
///
/// Applied to a distorted acquisition with its own polarity this undoes the
/// distortion. The Jacobian factor is clamped to [`MODULATION_RANGE`]. Every
/// volume of a 4D input is warped the same way.
pub fn warp_ped(v: &Volume, f: &DisplacementField, sign: PedSign, modulate: bool) -> Result<Volume> {
    check_field(v, f)?;
    let s = sign.value();
    let grid = v.grid();
    let axis = f.ped_axis;
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let deriv = f.ped_derivative();
    let nvox = grid.len();
    let mut out = vec![0.0; nvox * v.nvol()];
    for vol in 0..v.nvol() {
        let src = v.volume_data(vol);
        let dst = &mut out[vol * nvox..(vol + 1) * nvox];
        for base in line_starts(grid, axis) {
            for j in 0..n {
                let idx = base + j * stride;
                let pos = j as f64 + s * f.data[idx];
                let (val, _) = line_sample(src, base, stride, n, pos);
                dst[idx] = if modulate {
                    val * (1.0 + s * deriv[idx]).clamp(MODULATION_RANGE.0, MODULATION_RANGE.1)
                } else {
                    val
                };
            }
        }
    }
    v.with_data(out)
}

/// Push-forward along the phase-encode axis: the image an EPI acquisition with
/// polarity `sign` records when the undistorted object is `truth`.
///
/// Solves `out(x + s b(x)) (1 + s db/dy(x)) = truth(x)` line by line by
/// inverting the monotone map `x -> x + s b(x)`, so [`warp_ped`] with the same
/// field and sign recovers `truth` up to interpolation error.
pub fn distort_ped(truth: &Volume, f: &DisplacementField, sign: PedSign) -> Result<Volume> {
    check_field(truth, f)?;
    let s = sign.value();
    let grid = truth.grid();
    let axis = f.ped_axis;
    let n = grid.dims[axis];
    let stride = grid.stride(axis);
    let deriv = f.ped_derivative();
    let nvox = grid.len();
    let mut out = vec![0.0; nvox * truth.nvol()];
    let mut mapped = vec![0.0; n];
    let mut jac = vec![0.0; n];
    let mut source = vec![0.0; n];
    for base in line_starts(grid, axis) {
        for j in 0..n {
            let idx = base + j * stride;
            mapped[j] = j as f64 + s * f.data[idx];
            jac[j] = 1.0 + s * deriv[idx];
        }
        for (y, src_pos) in source.iter_mut().enumerate() {
            *src_pos = invert_monotone(&mapped, y as f64);
        }
        for vol in 0..truth.nvol() {
            let src = truth.volume_data(vol);
            let dst = &mut out[vol * nvox..(vol + 1) * nvox];
            for (y, &x) in source.iter().enumerate() {
                let (val, _) = line_sample(src, base, stride, n, x);
                let (j, _) = line_sample(&jac, 0, 1, n, x);
                dst[base + y * stride] = val / j.clamp(MODULATION_RANGE.0, MODULATION_RANGE.1);
            }
        }
    }
    let mut v = truth.with_data(out)?;
    v.ped_axis = axis;
    v.ped_sign = sign;
    Ok(v)
}

/// Position `x` with `mapped(x) = y` for a strictly increasing sequence sampled at
/// integer `x`; extended with unit slope beyond both ends.
fn invert_monotone(mapped: &[f64], y: f64) -> f64 {
    let n = mapped.len();
    if n == 1 {
        return y - (mapped[0] - 0.0);
    }
    if y <= mapped[0] {
        return y - mapped[0];
    }
    if y >= mapped[n - 1] {
        return (n - 1) as f64 + (y - mapped[n - 1]);
    }
    // first index with mapped[i] > y
    let hi = mapped.partition_point(|&m| m <= y);
    let lo = hi - 1;
    let span = mapped[hi] - mapped[lo];
    lo as f64 + (y - mapped[lo]) / span
}

/// Forward (`I_F`) and backward (`I_B`) acquisitions of `truth` under field `f`,
/// both Jacobian-modulated and tagged with their polarity.
pub fn simulate_rgp_pair(truth: &Volume, f: &DisplacementField) -> Result<(Volume, Volume)> {
    let forward = distort_ped(truth, f, PedSign::Forward)?;
    let backward = distort_ped(truth, f, PedSign::Backward)?;
    Ok((forward, backward))
}

/// Gyromagnetic ratio of hydrogen over 2 pi, in MHz/T.
pub const GAMMA_BAR_MHZ_PER_T: f64 = 42.577;

/// Geometric shift (mm) along the phase-encode direction caused by an off-resonance
/// of `off_res_ppm` at field strength `field_t`.
///
/// The off-resonance frequency is `ppm * 1e-6 * 42.577 MHz/T * B0`; the pixel
/// bandwidth along the phase-encode axis is `1 / (echo_spacing * matrix)`, so the
/// shift is `df * echo_spacing * matrix` pixels of size `fov / matrix`.
pub fn displacement_magnitude(
    off_res_ppm: f64,
    field_t: f64,
    fov_ped_mm: f64,
    echo_spacing_ms: f64,
    matrix_ped: usize,
) -> f64 {
    let delta_f_hz = off_res_ppm * 1e-6 * GAMMA_BAR_MHZ_PER_T * 1e6 * field_t;
    let shift_pixels = delta_f_hz * echo_spacing_ms * 1e-3 * matrix_ped as f64;
    shift_pixels * fov_ped_mm / matrix_ped as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::new(dims, [1.0; 3]).unwrap()
    }

    fn smooth_image(g: &Grid) -> Volume {
        Volume::from_fn(g.clone(), |i, j, k| {
            let y = j as f64;
            10.0 + 5.0 * (-(y - 14.0).powi(2) / 18.0).exp() + 0.1 * i as f64 + 0.2 * k as f64
        })
    }

    #[test]
    fn zero_field_is_identity() {
        let g = grid([3, 20, 2]);
        let v = smooth_image(&g);
        let f = DisplacementField::zeros(g, 1);
        assert_eq!(warp_ped(&v, &f, PedSign::Forward, true).unwrap(), v);
        let (a, b) = simulate_rgp_pair(&v, &f).unwrap();
        assert_eq!(a.data(), v.data());
        assert_eq!(b.data(), v.data());
    }

    #[test]
    fn constant_field_is_pure_shift() {
        let g = grid([1, 20, 1]);
        let v = Volume::from_fn(g.clone(), |_, j, _| j as f64 * j as f64);
        let f = DisplacementField::constant(g, 1, 2.0);
        let w = warp_ped(&v, &f, PedSign::Forward, true).unwrap();
        for j in 0..18 {
            assert_eq!(w.get(0, j, 0), v.get(0, j + 2, 0));
        }
    }

    #[test]
    fn linear_ramp_jacobian() {
        let g = grid([1, 30, 1]);
        let v = Volume::from_fn(g.clone(), |_, _, _| 1.0);
        let f = DisplacementField::from_fn(g, 1, |_, j, _| 0.1 * j as f64);
        let w = warp_ped(&v, &f, PedSign::Forward, true).unwrap();
        // discrete oracle: central difference of 0.1 j is 0.1
        for j in 1..20 {
            assert!((w.get(0, j, 0) - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_moves_with_polarity() {
        let g = grid([1, 40, 1]);
        let mut v = Volume::zeros(g.clone());
        v.data_mut()[20] = 1.0;
        let f = DisplacementField::constant(g, 1, 3.0);
        let (fw, bw) = simulate_rgp_pair(&v, &f).unwrap();
        let argmax = |x: &Volume| {
            x.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&fw), 23);
        assert_eq!(argmax(&bw), 17);
        assert_eq!(fw.ped_sign, PedSign::Forward);
        assert_eq!(bw.ped_sign, PedSign::Backward);
    }

    #[test]
    fn distort_then_warp_recovers_truth() {
        let g = grid([2, 48, 2]);
        let v = smooth_image(&g);
        let f = DisplacementField::from_fn(g, 1, |_, j, _| 2.5 * (-(j as f64 - 24.0).powi(2) / 60.0).exp());
        for sign in [PedSign::Forward, PedSign::Backward] {
            let d = distort_ped(&v, &f, sign).unwrap();
            let back = warp_ped(&d, &f, sign, true).unwrap();
            let rms = v
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                / v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(rms < 5e-3, "{rms}");
        }
    }

    #[test]
    fn rejects_folding_field() {
        let g = grid([1, 10, 1]);
        let v = Volume::zeros(g.clone());
        let f = DisplacementField::from_fn(g, 1, |_, j, _| 1.5 * j as f64);
        assert!(matches!(
            warp_ped(&v, &f, PedSign::Forward, false),
            Err(Error::NonDiffeomorphicField { .. })
        ));
    }

    #[test]
    fn rejects_grid_mismatch() {
        let v = Volume::zeros(grid([2, 10, 1]));
        let f = DisplacementField::zeros(grid([1, 10, 1]), 1);
        assert!(matches!(warp_ped(&v, &f, PedSign::Forward, false), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn displacement_magnitude_spinal_cord_case() {
        let mm = displacement_magnitude(6.0, 3.0, 180.0, 0.5, 128);
        assert!((55.0..=75.0).contains(&mm), "{mm}");
        // hand arithmetic: 6e-6 * 42.577e6 * 3 Hz * 0.5e-3 s * 180 mm
        assert!((mm - 68.9747).abs() < 1e-3);
        assert_eq!(displacement_magnitude(0.0, 3.0, 180.0, 0.5, 128), 0.0);
        let twice = displacement_magnitude(6.0, 3.0, 180.0, 1.0, 128);
        assert!((twice - 2.0 * mm).abs() < 1e-9);
    }

    #[test]
    fn derivative_edges_are_one_sided() {
        let g = grid([1, 4, 1]);
        let f = DisplacementField::new(g, vec![0.0, 1.0, 4.0, 9.0], 1).unwrap();
        assert_eq!(f.ped_derivative(), vec![1.0, 2.0, 4.0, 5.0]);
    }
}
