//! Renders a labelled mid-sagittal panel strip to a PNG.
//!
//! cargo run --release --example montage -- /tmp/montage.png

use cordwarp::phantom::{make_phantom, PhantomSpec};
use cordwarp::pipeline::montage::{panel_label, render_panel, shuffled, tile};

fn main() -> cordwarp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "montage-example.png".into());
    let t = make_phantom(&PhantomSpec { dims: [48, 48, 16], ..Default::default() })?;
    let order = shuffled(&["forward".into(), "backward".into()], 7, 0);
    let mut panels = vec![render_panel(&t.clean, &t.mask, "Reference")?];
    for (i, name) in order.iter().enumerate() {
        let v = if name == "forward" { &t.b0_forward } else { &t.b0_backward };
        panels.push(render_panel(v, &t.mask, &panel_label(i))?);
        println!("{} = {name}", panel_label(i));
    }
    let img = tile(&panels);
    std::fs::write(&out, img.to_png()?).map_err(|e| cordwarp::Error::io(&out, e))?;
    println!("{}x{} -> {out}", img.width, img.height);
    Ok(())
}
