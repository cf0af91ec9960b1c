//! Synthetic spinal cord phantom with known field, tensors and centerline.
//!
//! The cord is a tube bowing sinusoidally in the x-z plane, wrapped in a CSF
//! sheath, with smooth (tanh) compartment boundaries. Cord tensors are prolate
//! and aligned with the analytic tangent at the nearest curve point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{distort_ped, DisplacementField};
use crate::tensor::{directional_diffusivity, Tensor6, TensorField};
use crate::volume::{AcquisitionScheme, Grid, LevelLabels, Mask, PedSign, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm per voxel.
    pub spacing: [f64; 3],
    pub cord_radius_mm: f64,
    pub csf_radius_mm: f64,
    /// Width of the tanh transition between compartments.
    pub edge_width_mm: f64,
    /// Bow of the centerline along x.
    pub amplitude_mm: f64,
    pub wavelength_mm: f64,
    /// Number of vertebral level bands along z.
    pub levels: usize,
    /// Maximum displacement in voxels along the phase-encode axis (y).
    pub field_peak: f64,
    /// Width, in slices, of the two field lobes centred just outside both z ends.
    pub field_sigma_z: f64,
    /// In-plane width, in voxels, of the field lobes.
    pub field_sigma_inplane: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub s0_cord: f64,
    pub s0_csf: f64,
    pub s0_background: f64,
    pub bvalue: f64,
    pub n_b0: usize,
    pub n_directions: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [80, 80, 16],
            spacing: [1.0, 1.0, 5.0],
            cord_radius_mm: 3.5,
            csf_radius_mm: 6.5,
            edge_width_mm: 1.5,
            amplitude_mm: 4.0,
            wavelength_mm: 120.0,
            levels: 5,
            field_peak: 6.0,
            field_sigma_z: 1.25,
            field_sigma_inplane: 25.0,
            noise_sigma: 2.0,
            seed: 0,
            s0_cord: 500.0,
            s0_csf: 900.0,
            s0_background: 40.0,
            bvalue: 900.0,
            n_b0: 7,
            n_directions: 30,
        }
    }
}

pub const CORD_DIFFUSIVITIES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const CSF_DIFFUSIVITY: f64 = 3.0e-3;
pub const BACKGROUND_DIFFUSIVITY: f64 = 1.0e-3;

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing)
    }

    fn center_mm(&self) -> [f64; 2] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0] / 2.0,
            (self.dims[1] - 1) as f64 * self.spacing[1] / 2.0,
        ]
    }

    fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength_mm
    }

    /// Point of the analytic centerline at height `z_mm`.
    pub fn curve_point(&self, z_mm: f64) -> [f64; 3] {
        let c = self.center_mm();
        [c[0] + self.amplitude_mm * (self.omega() * z_mm).sin(), c[1], z_mm]
    }

    pub fn curve_tangent(&self, z_mm: f64) -> [f64; 3] {
        let dx = self.amplitude_mm * self.omega() * (self.omega() * z_mm).cos();
        let n = (dx * dx + 1.0).sqrt();
        [dx / n, 0.0, 1.0 / n]
    }

    /// Height of the curve point closest to `r` (Newton on the stationarity condition).
    pub fn nearest_curve_z(&self, r: [f64; 3]) -> f64 {
        let c = self.center_mm();
        let (a, w) = (self.amplitude_mm, self.omega());
        let mut z = r[2];
        for _ in 0..50 {
            let x = c[0] + a * (w * z).sin() - r[0];
            let dx = a * w * (w * z).cos();
            let ddx = -a * w * w * (w * z).sin();
            let g = x * dx + (z - r[2]);
            let h = dx * dx + x * ddx + 1.0;
            let step = g / h;
            z -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.dims.iter().any(|&d| d < 2) {
            return fail("every phantom dimension needs at least 2 voxels");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return fail("spacing must be positive");
        }
        let half_fov = [0, 1]
            .iter()
            .map(|&a| (self.dims[a] - 1) as f64 * self.spacing[a] / 2.0)
            .fold(f64::INFINITY, f64::min);
        if !(self.cord_radius_mm > 0.0) || self.cord_radius_mm >= self.csf_radius_mm {
            return fail("need 0 < cord radius < CSF radius");
        }
        if self.csf_radius_mm + self.amplitude_mm.abs() >= half_fov {
            return fail("tube does not fit inside half the in-plane field of view");
        }
        if !(self.wavelength_mm > 0.0) || !(self.edge_width_mm > 0.0) {
            return fail("wavelength and edge width must be positive");
        }
        if self.levels == 0 || self.levels > self.dims[2] {
            return fail("level count must be between 1 and the number of slices");
        }
        if !(self.field_peak >= 0.0) || !(self.field_sigma_z > 0.0) || !(self.field_sigma_inplane > 0.0) {
            return fail("field parameters must be non-negative with positive widths");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise sigma must be non-negative");
        }
        if self.n_b0 == 0 || self.n_directions < 6 {
            return fail("need at least one b=0 volume and six directions");
        }
        if !(self.bvalue > 0.0) {
            return fail("b-value must be positive");
        }
        Ok(())
    }

    /// `n_b0` unweighted volumes followed by `n_directions` spiral directions on the half sphere.
    pub fn scheme(&self) -> AcquisitionScheme {
        let mut b = vec![0.0; self.n_b0];
        let mut g = vec![[0.0; 3]; self.n_b0];
        let n = self.n_directions;
        for i in 0..n {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * 2.399_963_229_728_653;
            b.push(self.bvalue);
            g.push([r * phi.cos(), r * phi.sin(), z]);
        }
        AcquisitionScheme::new(b, g).expect("spiral scheme is valid")
    }

    /// Level label (1-based) of slice `k`.
    pub fn level_of_slice(&self, k: usize) -> u16 {
        (k * self.levels / self.dims[2]) as u16 + 1
    }

    /// Field lobes centred one slice beyond each z end, scaled so the maximum equals `field_peak`.
    pub fn field(&self) -> Result<DisplacementField> {
        let grid = self.grid()?;
        let [nx, ny, nz] = self.dims;
        let (cx, cy) = ((nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0);
        let (lo, hi) = (-1.0, nz as f64);
        let sz2 = 2.0 * self.field_sigma_z * self.field_sigma_z;
        let sp2 = 2.0 * self.field_sigma_inplane * self.field_sigma_inplane;
        let raw = |i: usize, j: usize, k: usize| {
            let z = k as f64;
            let axial = (-(z - lo).powi(2) / sz2).exp() + (-(z - hi).powi(2) / sz2).exp();
            let dx = i as f64 - cx;
            let dy = j as f64 - cy;
            axial * (-(dx * dx + dy * dy) / sp2).exp()
        };
        let mut f = DisplacementField::from_fn(grid, 1, raw);
        let max = f.data().iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            let scale = self.field_peak / max;
            f.data_mut().iter_mut().for_each(|b| *b *= scale);
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineSample {
    pub z_index: usize,
    pub point_mm: [f64; 3],
}

/// Ground truth and simulated acquisitions for one phantom subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    /// Undistorted b=0 image `I_C`.
    pub clean: Volume,
    pub field: DisplacementField,
    pub tensors: TensorField,
    /// Voxels within the cord radius of the analytic centerline.
    pub mask: Mask,
    pub levels: LevelLabels,
    pub true_centerline: Vec<CenterlineSample>,
    pub scheme: AcquisitionScheme,
    /// Undistorted, noiseless DWI series.
    pub dwi_clean: Volume,
    /// Forward-polarity DWI series: distorted, then noise added.
    pub dwi_forward: Volume,
    /// First b=0 volume of `dwi_forward`.
    pub b0_forward: Volume,
    /// Backward-polarity b=0 acquisition.
    pub b0_backward: Volume,
}

fn smooth_step(d: f64, radius: f64, width: f64) -> f64 {
    0.5 * (1.0 - ((d - radius) / width).tanh())
}

fn add_noise(v: &mut Volume, sigma: f64, seed: u64, stream: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for x in v.data_mut() {
        *x += normal.sample(&mut rng);
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let grid = spec.grid()?;
    let field = spec.field()?;
    let (max_derivative, voxel) = field.max_interior_derivative();
    if max_derivative >= 0.9 {
        return Err(Error::InvalidSpec(format!(
            "field peak {} gives |db/dy| = {max_derivative:.3} at {voxel:?}",
            spec.field_peak
        )));
    }
    let scheme = spec.scheme();
    let nvox = grid.len();
    let nvol = scheme.len();

    let mut clean = vec![0.0; nvox];
    let mut dwi = vec![0.0; nvox * nvol];
    let mut tensors = TensorField::new_invalid(grid.clone());
    let mut mask = vec![false; nvox];
    let mut labels = vec![0u16; nvox];
    let [l_par, l_perp, _] = CORD_DIFFUSIVITIES;
    let w = spec.edge_width_mm;

    for idx in 0..nvox {
        let c = grid.coords(idx);
        let r = grid.voxel_to_world(idx);
        let zc = spec.nearest_curve_z(r);
        let p = spec.curve_point(zc);
        let d = ((r[0] - p[0]).powi(2) + (r[1] - p[1]).powi(2) + (r[2] - p[2]).powi(2)).sqrt();
        let t = spec.curve_tangent(zc);

        let inner = smooth_step(d, spec.cord_radius_mm, w);
        let outer = smooth_step(d, spec.csf_radius_mm, w);
        let (f_cord, f_csf, f_bg) = (inner, outer - inner, 1.0 - outer);

        let mut cord: Tensor6 = [l_perp, 0.0, 0.0, l_perp, 0.0, l_perp];
        let dl = l_par - l_perp;
        cord[0] += dl * t[0] * t[0];
        cord[1] += dl * t[0] * t[1];
        cord[2] += dl * t[0] * t[2];
        cord[3] += dl * t[1] * t[1];
        cord[4] += dl * t[1] * t[2];
        cord[5] += dl * t[2] * t[2];

        clean[idx] = f_cord * spec.s0_cord + f_csf * spec.s0_csf + f_bg * spec.s0_background;
        for v in 0..nvol {
            let b = scheme.bvalues[v];
            let g = scheme.directions[v];
            dwi[v * nvox + idx] = f_cord * spec.s0_cord * (-b * directional_diffusivity(&cord, g)).exp()
                + f_csf * spec.s0_csf * (-b * CSF_DIFFUSIVITY).exp()
                + f_bg * spec.s0_background * (-b * BACKGROUND_DIFFUSIVITY).exp();
        }

        let in_cord = d <= spec.cord_radius_mm;
        mask[idx] = in_cord;
        tensors.tensors[idx] = if in_cord {
            cord
        } else if d <= spec.csf_radius_mm {
            [CSF_DIFFUSIVITY, 0.0, 0.0, CSF_DIFFUSIVITY, 0.0, CSF_DIFFUSIVITY]
        } else {
            [BACKGROUND_DIFFUSIVITY, 0.0, 0.0, BACKGROUND_DIFFUSIVITY, 0.0, BACKGROUND_DIFFUSIVITY]
        };
        tensors.ln_s0[idx] = if in_cord { spec.s0_cord.ln() } else { clean[idx].ln() };
        tensors.valid[idx] = true;
        labels[idx] = spec.level_of_slice(c[2]);
    }

    let clean = Volume::new(grid.clone(), clean)?;
    let dwi_clean = Volume::new_4d(grid.clone(), nvol, dwi)?;
    let mut dwi_forward = distort_ped(&dwi_clean, &field, PedSign::Forward)?;
    add_noise(&mut dwi_forward, spec.noise_sigma, spec.seed, 1);
    let b0_forward = dwi_forward.subvolume(scheme.b0_indices()[0]);
    let mut b0_backward = distort_ped(&clean, &field, PedSign::Backward)?;
    add_noise(&mut b0_backward, spec.noise_sigma, spec.seed, 2);

    let true_centerline = (0..spec.dims[2])
        .map(|k| CenterlineSample {
            z_index: k,
            point_mm: spec.curve_point(grid.to_world([0.0, 0.0, k as f64])[2]),
        })
        .collect();

    Ok(PhantomTruth {
        spec: spec.clone(),
        clean,
        field,
        tensors,
        mask: Mask::new(grid.clone(), mask)?,
        levels: LevelLabels::new(grid, labels)?,
        true_centerline,
        scheme,
        dwi_clean,
        dwi_forward,
        b0_forward,
        b0_backward,
    })
}
