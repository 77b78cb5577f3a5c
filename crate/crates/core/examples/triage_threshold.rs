//! Picks the auto-scoring confidence threshold for a target accuracy from
//! a trained model's validation predictions.
//!
//! `cargo run --release --example triage_threshold`

use cubescore::analysis::{threshold_for_accuracy, top_confident_errors, triage_curve};
use cubescore::nn::Architecture;
use cubescore::score::Score;
use cubescore::synth::{generate_dataset, DatasetConfig};
use cubescore::train::{split, train, SplitSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_dataset(&DatasetConfig { n: 800, input_size: 32, seed: 5, ..Default::default() })?;
    let gold: Vec<Score> = data.iter().map(|d| d.gold).collect();
    let s = split(&gold, &SplitSpec::default())?;
    let cfg = TrainConfig { arch: Architecture::BaselineMini, input_size: 32, epochs: 12, ..Default::default() };
    let run = train(&data, &s, &cfg)?;
    let v = run.result.validation.expect("validation split is non-empty");
    let truth: Vec<Score> = s.val.iter().map(|&i| gold[i]).collect();

    let curve = triage_curve(&v.probabilities, &truth)?;
    println!("overall validation accuracy {:.1}%", 100.0 * curve.overall_accuracy());
    for target in [0.8, 0.9, 0.95, 0.99] {
        let c = threshold_for_accuracy(&curve, target)?;
        match c.confidence {
            Some(t) => println!("target {:>4.0}%: threshold {t:.3}, auto-scores {:.1}% of drawings", 100.0 * target, 100.0 * c.coverage),
            None => println!("target {:>4.0}%: unreachable", 100.0 * target),
        }
    }

    let ids: Vec<u64> = s.val.iter().map(|&i| data[i].id).collect();
    println!("most confident mistakes:");
    for e in top_confident_errors(&ids, &v.probabilities, &truth, 5)? {
        println!("  drawing {:>4}: predicted {} at {:.3}, truth {}", e.id, e.predicted, e.confidence, e.truth);
    }
    Ok(())
}
