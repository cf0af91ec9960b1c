//! Builds a synthetic cord phantom and writes its forward/backward b=0 pair.
//!
//! cargo run --release --example phantom -- /tmp/phantom

use cordwarp::nifti::save_volume;
use cordwarp::phantom::{make_phantom, PhantomSpec};

fn main() -> cordwarp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantom-example".into());
    std::fs::create_dir_all(&out).map_err(|e| cordwarp::Error::io(&out, e))?;
    let t = make_phantom(&PhantomSpec::default())?;
    let peak = t.field.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    println!("grid {:?}, {} cord voxels, peak displacement {peak:.2} voxels", t.clean.grid().dims, t.mask.count());
    save_volume(&t.b0_forward, format!("{out}/b0_forward.nii.gz"))?;
    save_volume(&t.b0_backward, format!("{out}/b0_backward.nii.gz"))?;
    save_volume(&t.field.to_volume(), format!("{out}/field_true.nii.gz"))?;
    println!("wrote {out}/");
    Ok(())
}
