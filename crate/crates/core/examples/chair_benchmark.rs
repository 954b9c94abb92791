//! The CHAIR benchmark over a small testbed corpus, every method and three
//! seeds, printed as the report CSV.
//!
//! Pass a config file to change anything, e.g.
//! `cargo run --release --example chair_benchmark -- configs/testbed.json`.

use std::path::PathBuf;

use convis::app::{run_benchmark, RunConfig};

fn main() -> convis::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let cfg = RunConfig::load(path.as_deref(), &["corpus.n_images=40".to_string()])?;
    let report = run_benchmark(&cfg, cfg.open_backend()?, None)?;
    print!("{}", report.to_csv()?);
    Ok(())
}
