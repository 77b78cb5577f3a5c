//! Draws random augmentations of one drawing under each policy and writes
//! them side by side.
//!
//! `cargo run --example augmentation -- [out.png]`

use cubescore::augment::{apply_params, AugmentPolicy};
use cubescore::cli::montage;
use cubescore::image::{encode_png, GrayTensor};
use cubescore::nn::Tensor4;
use cubescore::rng::{self, Purpose};
use cubescore::synth::{generate_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-out/augmentation.png".into());
    let drawing = generate_dataset(&DatasetConfig { n: 3, input_size: 64, seed: 3, ..Default::default() })?.remove(0);
    let batch = Tensor4::from_grays([&drawing.tensor]);

    let mut tiles = vec![drawing.tensor.clone()];
    for policy in [AugmentPolicy::transform(), AugmentPolicy::transform_resize()] {
        let mut r = rng::stream(11, Purpose::Augment, 0);
        for _ in 0..5 {
            let params = policy.sample(&mut r);
            println!(
                "{:<17} rotate {:+5.1}°  shift ({:+.2}, {:+.2})  scale {:.2}  crop {}",
                policy.arm.as_str(),
                params.rotation_deg,
                params.translation.0,
                params.translation.1,
                params.scale,
                params.crop.map(|c| format!("{:.0}% of area", 100.0 * c.area)).unwrap_or_else(|| "-".into()),
            );
            let out = apply_params(&batch, &[params]);
            tiles.push(GrayTensor::from_values(64, 64, out.sample(0).iter().map(|&v| v as f32).collect()));
        }
    }
    let strip = montage(&tiles.iter().collect::<Vec<_>>()).expect("non-empty");
    if let Some(dir) = std::path::Path::new(&out).parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, encode_png(&strip)?)?;
    println!("wrote {out}");
    Ok(())
}
