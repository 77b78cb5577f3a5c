//! Generates a small synthetic cohort and compares the interviewer labels
//! it drew against the configured noise channel.
//!
//! `cargo run --example synthetic_dataset -- [out_dir]`

use std::path::PathBuf;

use cubescore::analysis::confusion_matrix;
use cubescore::cli::montage;
use cubescore::image::encode_png;
use cubescore::score::Score;
use cubescore::synth::{class_counts, generate_dataset, write_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target/example-out/dataset"));
    let cfg = DatasetConfig { n: 600, input_size: 64, seed: 7, ..Default::default() };
    let data = generate_dataset(&cfg)?;

    let [c, p, i] = class_counts(cfg.n, &cfg.shares);
    println!("{} drawings: {c} correct, {p} partially correct, {i} incorrect", data.len());

    let gold: Vec<Score> = data.iter().map(|d| d.gold).collect();
    let interviewer: Vec<Score> = data.iter().map(|d| d.interviewer).collect();
    let m = confusion_matrix(&interviewer, &gold)?;
    println!("interviewer vs gold (row %):\n{}", m.display());
    println!("agreement {:.1}% (channel expects {:.1}%)", 100.0 * m.accuracy(), 100.0 * cfg.channel.agreement(&cfg.shares));

    std::fs::create_dir_all(&out)?;
    let manifest = write_dataset(&out, &cfg, &data)?;
    let firsts: Vec<_> = Score::ALL.iter().filter_map(|&s| data.iter().find(|d| d.gold == s)).map(|d| &d.tensor).collect();
    if let Some(strip) = montage(&firsts) {
        std::fs::write(out.join("one_per_class.png"), encode_png(&strip)?)?;
    }
    println!("wrote {}", manifest.display());
    Ok(())
}
