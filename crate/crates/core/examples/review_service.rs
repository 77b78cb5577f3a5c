//! Drives the review service in memory: auto-scoring, blinded votes,
//! arbitration and the resulting statistics. With `--serve ADDR` it starts
//! the HTTP API instead, backed by an untrained model.
//!
//! `cargo run --example review_service [-- --serve 127.0.0.1:8080]`

use cubescore::nn::{Architecture, ModelConfig};
use cubescore::rng::{self, Purpose};
use cubescore::score::Score;
use cubescore::service::{http, Service, ServiceConfig, Status};
use cubescore::synth::{apply_label_noise, class_sequence, NoiseChannel, DEFAULT_SHARES};
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    if let Some(addr) = args.iter().position(|a| a == "--serve").and_then(|i| args.get(i + 1)) {
        let model = ModelConfig::new(Architecture::BaselineMini, 64, 0).build()?;
        let svc = Service::open(ServiceConfig::default(), Some(model))?;
        println!("listening on {addr}");
        tokio::runtime::Runtime::new()?.block_on(http::serve(svc, addr.parse()?))?;
        return Ok(());
    }

    let mut svc = Service::in_memory(None);
    let channel = NoiseChannel::interviewer_default();
    let golds = class_sequence(200, &DEFAULT_SHARES, 9);
    for (i, &g) in golds.iter().enumerate() {
        let mut r = rng::stream(9, Purpose::Votes, i as u64);
        // a model that is right 85% of the time with varying confidence
        let top = if r.random_bool(0.85) { g.index() } else { (g.index() + 1) % 3 };
        let peak = r.random_range(0.4..1.0);
        let mut probs = [(1.0 - peak) / 2.0; 3];
        probs[top] = peak;
        let rec = svc.submit_prediction(format!("drawing-{i}"), probs, false, None, Some(g))?;
        if rec.status == Status::PendingReview {
            for scorer in ["ana", "ben", "chloe"] {
                svc.add_vote(rec.id, scorer, apply_label_noise(g, &channel, &mut r))?;
            }
        }
    }

    let open: Vec<(u64, Option<Score>)> = svc.store().open_cases().map(|c| (c.id, c.majority())).collect();
    println!("{} cases need arbitration", open.len());
    for (case, majority) in open {
        svc.resolve_arbitration(case, majority.unwrap_or(Score::PartiallyCorrect), &["lead".into(), "second".into()])?;
    }
    println!("{}", serde_json::to_string_pretty(&svc.stats())?);
    Ok(())
}
