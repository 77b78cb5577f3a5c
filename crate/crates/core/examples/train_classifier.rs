//! Trains dwblock-mini on synthetic drawings and reports validation
//! accuracy per epoch plus the final confusion matrix.
//!
//! `cargo run --release --example train_classifier -- [epochs]`

use cubescore::analysis::confusion_matrix;
use cubescore::nn::Architecture;
use cubescore::score::Score;
use cubescore::synth::{generate_dataset, DatasetConfig};
use cubescore::train::{split, train, SplitSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let data = generate_dataset(&DatasetConfig { n: 800, input_size: 64, seed: 1, ..Default::default() })?;
    let gold: Vec<Score> = data.iter().map(|d| d.gold).collect();
    let s = split(&gold, &SplitSpec::default())?;
    println!("{} training and {} validation drawings", s.train.len(), s.val.len());

    let cfg = TrainConfig { arch: Architecture::DwblockMini, epochs, ..Default::default() };
    let run = train(&data, &s, &cfg)?;
    for (e, (loss, acc)) in run.result.train_loss.iter().zip(&run.result.val_accuracy_by_epoch).enumerate() {
        println!("epoch {:>3}  loss {loss:.4}  val accuracy {:.1}%", e + 1, 100.0 * acc);
    }
    let v = run.result.validation.as_ref().expect("validation split is non-empty");
    let truth: Vec<Score> = s.val.iter().map(|&i| data[i].gold).collect();
    println!("{}", confusion_matrix(&v.predictions, &truth)?.display());
    println!("checkpoint sha256 {} ({:.0}s)", run.result.checkpoint_sha256, run.result.seconds);
    Ok(())
}
