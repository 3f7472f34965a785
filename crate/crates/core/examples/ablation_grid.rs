//! A small activation ablation on synthetic data, written as CSV to stdout.
//! The same runner drives the MNIST tables via `mcnc ablate`.
//!
//! cargo run --release --example ablation_grid

use mcnc::harness::{
    run_ablation, synthetic_splits, write_ablation_csv, AblationAxis, AblationSpec, AxisValue, MlpSpec,
};
use mcnc::{GeneratorConfig, Result};

fn main() -> Result<()> {
    let data = synthetic_splits(1500, 500, 32, 8, 2)?;
    let axis = AblationAxis::Activation;
    let mut spec = AblationSpec::mnist(axis, AxisValue::parse_list(axis, "sine,sigmoid,relu,identity")?);
    spec.mlp = MlpSpec::new(vec![32, 64, 8])?;
    spec.generator = GeneratorConfig::new(0, 9, 256).with_hidden(vec![64, 64]);
    spec.base.epochs = 6;
    spec.repeats = 2;
    let table = run_ablation(&spec, &data)?;
    write_ablation_csv(&table, std::io::stdout())?;
    Ok(())
}
