//! Reconstruction cost of LLaMA-2 LoRA adapters, for an MCNC generator
//! versus a NOLA-style linear basis.
//!
//! cargo run --example flops_llama

use mcnc::reparam::{format_centi, llama2_adapter_matrices, LlamaShape};
use mcnc::{reconstruction_flops, FlopsMethod, GeneratorConfig, Result};

fn main() -> Result<()> {
    let gen = GeneratorConfig::new(0, 5, 5000).with_hidden(vec![32, 32]);
    println!("{:<6} {:>10} {:>10}", "model", "MCNC", "NOLA");
    for name in ["7b", "13b"] {
        let shape = LlamaShape::preset(name)?;
        let groups = llama2_adapter_matrices(&shape)?;
        let mcnc = reconstruction_flops(&gen, &groups, FlopsMethod::Mcnc)?;
        let nola = reconstruction_flops(
            &gen,
            &groups,
            FlopsMethod::Nola {
                n_bases: shape.nola_bases,
            },
        )?;
        println!(
            "{name:<6} {:>10} {:>10}  GFLOPs",
            format_centi(mcnc.tabulated_centi_gflops()),
            format_centi(nola.tabulated_centi_gflops())
        );
        for g in &mcnc.groups {
            println!(
                "  {} x {} x{}: {} FLOPs each",
                g.group.rows, g.group.cols, g.group.count, g.per_matrix
            );
        }
    }
    Ok(())
}
