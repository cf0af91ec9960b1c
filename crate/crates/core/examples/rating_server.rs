//! Runs the whole pipeline on a small two-subject phantom and serves the rating API.
//!
//! cargo run --release --example rating_server -- /tmp/rating 8080

use cordwarp::phantom::PhantomSpec;
use cordwarp::pipeline::{self, PipelineConfig};

fn main() -> cordwarp::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "rating-example".into());
    let port = args.next().and_then(|p| p.parse().ok()).unwrap_or(8080);
    let spec = PhantomSpec { dims: [40, 40, 16], ..Default::default() };
    let cfg = PipelineConfig::load(pipeline::cmd_phantom(&spec, 2, dir.as_ref())?)?;
    pipeline::cmd_correct(&cfg)?;
    pipeline::cmd_evaluate(&cfg)?;
    let session = pipeline::cmd_montage(&cfg)?;
    println!("{} cases; try http://127.0.0.1:{port}/api/session", session.cases.len());
    pipeline::cmd_serve(&cfg, port)
}
