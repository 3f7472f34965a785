//! How well a random k = 1 sine generator wraps a line around S²,
//! as the input range L grows.
//!
//! cargo run --release --example sphere_coverage [cloud.csv]

use std::fs::File;

use mcnc::coverage::{coverage_report, generator_cloud, write_point_cloud_csv};
use mcnc::generator::normalize_rows;
use mcnc::{Generator, GeneratorConfig, Result};

fn main() -> Result<()> {
    let config = GeneratorConfig::new(0, 1, 3)
        .with_hidden(vec![1024, 1024])
        .with_frequency(1.0);
    let gen = Generator::build(&config)?;
    for bound in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let r = coverage_report(&gen, bound, 10_000, 128, 0, 10.0)?;
        println!(
            "L = {bound:>4}: sliced W2 = {:.4}, uniformity = {:.3}",
            r.swd, r.uniformity_score
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        let cloud = normalize_rows(&generator_cloud(&gen, 32.0, 10_000, 0)?)?;
        let file = File::create(&path).map_err(|e| mcnc::Error::Config(format!("{path}: {e}")))?;
        write_point_cloud_csv(&cloud, file)?;
        println!("wrote {path}");
    }
    Ok(())
}
