//! Cross-correlation and mutual information of each b=0 against the clean image.

use cordwarp::phantom::{make_phantom, PhantomSpec};
use cordwarp::similarity::{cross_correlation, mutual_information};

fn main() -> cordwarp::Result<()> {
    let t = make_phantom(&PhantomSpec { dims: [48, 48, 16], ..Default::default() })?;
    let region = t.mask.dilate(2);
    for (name, v) in [("clean", &t.clean), ("forward", &t.b0_forward), ("backward", &t.b0_backward)] {
        println!(
            "{name:>8}: cc {:.4}  mi {:.4}",
            cross_correlation(v, &t.clean, &region)?,
            mutual_information(v, &t.clean, &region, 32)?
        );
    }
    Ok(())
}
