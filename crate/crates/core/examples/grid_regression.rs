//! A toy experiment grid followed by the regression of validation accuracy
//! on the design factors.
//!
//! `cargo run --release --example grid_regression`

use cubescore::analysis::ols::format_fit;
use cubescore::analysis::{ols_fits, run_grid, GridSpec};
use cubescore::nn::Architecture;
use cubescore::synth::{generate_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_dataset(&DatasetConfig { n: 240, input_size: 16, seed: 2, ..Default::default() })?;
    let spec = GridSpec {
        epoch_arms: [2, 6],
        input_size: 16,
        ..GridSpec::desk(vec![Architecture::BaselineMini, Architecture::DeepMini], vec![1, 2])
    };
    println!("{} cells", spec.cells().len());
    let run = run_grid(&data, &spec, &[], 1, |r| println!("  {:<60} {:.3}", r.cell().to_string(), r.val_accuracy))?;
    for fit in ols_fits(&run.records)? {
        println!("\n{}", format_fit(&fit));
    }
    Ok(())
}
