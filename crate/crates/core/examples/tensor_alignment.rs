//! DTI fit, cord centerline and per-level alignment (MAD/ACD) on the clean phantom.

use cordwarp::centerline::{fit_centerline, level_report, quantisation_variance, slice_barycenters, Smoothing};
use cordwarp::phantom::{make_phantom, PhantomSpec};
use cordwarp::tensor::{eigen_decompose, fit_dti};

fn main() -> cordwarp::Result<()> {
    let t = make_phantom(&PhantomSpec { dims: [48, 48, 16], ..Default::default() })?;
    let e = eigen_decompose(&fit_dti(&t.dwi_clean, &t.scheme, &t.mask)?);
    let points = slice_barycenters(&t.mask)?;
    let c = fit_centerline(&points, Smoothing::ResidualVariance(quantisation_variance(t.mask.grid().spacing)))?;
    let report = level_report(&e, &t.mask, &t.levels, &c, None)?;
    print!("{}", report.to_csv());
    Ok(())
}
