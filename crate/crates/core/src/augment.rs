//! Label-preserving random affine augmentation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor4;
use crate::rng::{self, Purpose, StreamRng};

/// The three augmentation arms of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentArm {
    None,
    Transform,
    TransformResize,
}

impl AugmentArm {
    pub const ALL: [AugmentArm; 3] = [AugmentArm::None, AugmentArm::Transform, AugmentArm::TransformResize];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentArm::None => "none",
            AugmentArm::Transform => "transform",
            AugmentArm::TransformResize => "transform_resize",
        }
    }
}

impl std::fmt::Display for AugmentArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AugmentArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AugmentArm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown augmentation arm '{s}' (expected none, transform or transform_resize)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub arm: AugmentArm,
    pub max_rotation_deg: f64,
    /// Maximum shift per axis as a fraction of the side.
    pub max_translation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Area fraction range of the random crop (resize arm only).
    pub crop_area_min: f64,
    pub crop_area_max: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::for_arm(AugmentArm::None)
    }
}

impl AugmentPolicy {
    pub fn for_arm(arm: AugmentArm) -> Self {
        AugmentPolicy {
            arm,
            max_rotation_deg: 10.0,
            max_translation: 0.08,
            scale_min: 0.9,
            scale_max: 1.1,
            crop_area_min: 0.8,
            crop_area_max: 1.0,
        }
    }

    pub fn none() -> Self {
        Self::for_arm(AugmentArm::None)
    }

    pub fn transform() -> Self {
        Self::for_arm(AugmentArm::Transform)
    }

    pub fn transform_resize() -> Self {
        Self::for_arm(AugmentArm::TransformResize)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        if self.arm == AugmentArm::None {
            return AugmentParams::identity();
        }
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, self.max_rotation_deg);
        let tx = sym(rng, self.max_translation);
        let ty = sym(rng, self.max_translation);
        let scale = if self.scale_max > self.scale_min { rng.random_range(self.scale_min..=self.scale_max) } else { self.scale_min };
        let crop = (self.arm == AugmentArm::TransformResize).then(|| {
            let area = if self.crop_area_max > self.crop_area_min {
                rng.random_range(self.crop_area_min..=self.crop_area_max)
            } else {
                self.crop_area_max
            };
            Crop { area, x: rng.random(), y: rng.random() }
        });
        AugmentParams { rotation_deg, translation: (tx, ty), scale, crop }
    }
}

/// Square crop of `area` times the image, placed at fractions `x`, `y` of
/// the free room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub area: f64,
    pub x: f64,
    pub y: f64,
}

/// One drawn transform: rotation and scale about the centre, then a shift,
/// then an optional crop resized back to full size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub translation: (f64, f64),
    pub scale: f64,
    pub crop: Option<Crop>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { rotation_deg: 0.0, translation: (0.0, 0.0), scale: 1.0, crop: None }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Forward map in pixel coordinates (pixel `i` covers `[i, i+1)`).
    pub fn affine(&self, h: usize, w: usize) -> Affine {
        let (w, h) = (w as f64, h as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        let a = [k * c, -k * s, k * s, k * c];
        let t = [cx - (a[0] * cx + a[1] * cy) + self.translation.0 * w, cy - (a[2] * cx + a[3] * cy) + self.translation.1 * h];
        let base = Affine { a, t };
        match self.crop {
            None => base,
            Some(crop) => {
                let f = crop.area.sqrt();
                let (ox, oy) = (crop.x * (1.0 - f) * w, crop.y * (1.0 - f) * h);
                let zoom = Affine { a: [1.0 / f, 0.0, 0.0, 1.0 / f], t: [-ox / f, -oy / f] };
                zoom.compose(&base)
            }
        }
    }
}

/// `p -> A p + t` with `A` row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: [f64; 4],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Affine { a: [1.0, 0.0, 0.0, 1.0], t: [0.0, 0.0] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a[0] * x + self.a[1] * y + self.t[0], self.a[2] * x + self.a[3] * y + self.t[1])
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Affine) -> Affine {
        let [p, q, r, s] = self.a;
        let [e, f, g, h] = inner.a;
        let a = [p * e + q * g, p * f + q * h, r * e + s * g, r * f + s * h];
        let (tx, ty) = self.apply(inner.t[0], inner.t[1]);
        Affine { a, t: [tx, ty] }
    }

    pub fn inverse(&self) -> Affine {
        let [p, q, r, s] = self.a;
        let det = p * s - q * r;
        let a = [s / det, -q / det, -r / det, p / det];
        let t = [-(a[0] * self.t[0] + a[1] * self.t[1]), -(a[2] * self.t[0] + a[3] * self.t[1])];
        Affine { a, t }
    }
}

/// Resamples one plane under the forward map `fwd`: each output pixel
/// centre is pulled back to the source and read bilinearly, zero outside.
pub fn warp(src: &[f64], h: usize, w: usize, fwd: &Affine) -> Vec<f64> {
    let inv = fwd.inverse();
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (dx, dy) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1) * dx;
            let bottom = at(y0 + 1, x0) * (1.0 - dx) + at(y0 + 1, x0 + 1) * dx;
            out[oy * w + ox] = top * (1.0 - dy) + bottom * dy;
        }
    }
    out
}

pub fn apply_params(batch: &Tensor4, params: &[AugmentParams]) -> Tensor4 {
    assert_eq!(params.len(), batch.n, "one parameter set per image");
    let (c, h, w) = (batch.shape.c, batch.shape.h, batch.shape.w);
    let mut out = batch.clone();
    out.data.par_chunks_mut(batch.shape.len()).zip(params.par_iter()).enumerate().for_each(|(i, (dst, p))| {
        if p.is_identity() {
            return;
        }
        let fwd = p.affine(h, w);
        let src = batch.sample(i);
        for ch in 0..c {
            let plane = warp(&src[ch * h * w..(ch + 1) * h * w], h, w, &fwd);
            dst[ch * h * w..(ch + 1) * h * w].copy_from_slice(&plane);
        }
    });
    out
}

/// Draws one transform per image from a stream derived from `rng`, so the
/// result does not depend on thread scheduling.
pub fn augment_batch(batch: &Tensor4, policy: &AugmentPolicy, rng: &mut StreamRng) -> Tensor4 {
    if policy.arm == AugmentArm::None {
        return batch.clone();
    }
    let base: u64 = rng.random();
    let params: Vec<AugmentParams> = (0..batch.n).map(|i| policy.sample(&mut rng::stream(base, Purpose::Augment, i as u64))).collect();
    apply_params(batch, &params)
}
