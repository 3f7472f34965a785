//! Improves a generator's coverage of the sphere by minimizing the sliced
//! Wasserstein distance to uniform samples.
//!
//! cargo run --release --example train_generator

use mcnc::coverage::{coverage_report, train_generator_sw, SwTrainOptions};
use mcnc::{Generator, GeneratorConfig, Result};

fn main() -> Result<()> {
    let gen = Generator::build(&GeneratorConfig::new(4, 2, 3).with_hidden(vec![64, 64]))?;
    let opts = SwTrainOptions {
        steps: 300,
        batch: 256,
        lr: 0.05,
        ..SwTrainOptions::default()
    };
    let before = coverage_report(&gen, opts.input_bound, 4000, 64, 1, 10.0)?;
    let trained = train_generator_sw(&gen, &opts)?;
    let after = coverage_report(&trained, opts.input_bound, 4000, 64, 1, 10.0)?;
    println!(
        "uniformity before {:.3}, after {:.3}",
        before.uniformity_score, after.uniformity_score
    );
    println!("original generator untouched: {}", gen.weights() != trained.weights());
    Ok(())
}
