//! Runs a drawing through the same preprocessing an uploaded scan gets:
//! greyscale, auto-crop to the ink and a bilinear resize to the model input.
//!
//! `cargo run --example scan_pipeline -- [image.png]`

use cubescore::image::{decode_image, ink_bbox, preprocess, CropConfig, GrayTensor, RawImage};
use cubescore::rng::{self, Purpose};
use cubescore::score::Score;
use cubescore::synth::{render, sample_spec, GeneratorConfig};

/// A rendered cube placed off-centre on a larger white page.
fn fake_scan() -> RawImage {
    let spec = sample_spec(Score::Correct, &GeneratorConfig::default(), &mut rng::stream(1, Purpose::Spec, 0)).expect("valid spec");
    let cube = render(&spec, 128, 128).to_raw();
    let (w, h) = (400, 300);
    let mut page = RawImage::blank(w, h);
    for y in 0..128 {
        for x in 0..128 {
            page.pixels_mut()[(y + 40) * w + x + 220] = cube.pixels()[y * 128 + x];
        }
    }
    page
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = match std::env::args().nth(1) {
        Some(path) => decode_image(&std::fs::read(path)?)?,
        None => fake_scan(),
    };
    let crop = CropConfig::default();
    println!("page {}x{} with {} channel(s)", raw.width(), raw.height(), raw.channels());
    match ink_bbox(&raw, crop.ink_threshold) {
        Some(b) => println!("ink box x {}..{}, y {}..{}", b.x0, b.x1, b.y0, b.y1),
        None => println!("no ink found"),
    }

    let p = preprocess(&raw, &crop, 64, 64);
    let t = &p.tensor;
    println!("tensor {}x{}, ink mass {:.1}, empty page: {}", t.height(), t.width(), t.ink_mass(), p.empty);

    // the binary tensor format round-trips exactly
    let bytes = t.to_binary();
    let back = GrayTensor::read_binary(&bytes[..])?;
    assert_eq!(&back, t);
    println!("{} bytes on disk", bytes.len());

    for y in (0..64).step_by(4) {
        let row: String = (0..64).step_by(2).map(|x| if t.get(y, x) > 0.3 { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
