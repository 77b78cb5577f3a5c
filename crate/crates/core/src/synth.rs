//! Synthetic cube-copy drawings with rule-derived gold labels and simulated
//! interviewer labels.
//!
//! Geometry lives on a 128×128 reference canvas. A cube is a front square
//! (vertices 0..4) plus a depth-shifted back square (4..8), joined by the
//! twelve edges in [`EDGES`]. The shape metric compares the distorted
//! vertices against the best-fitting oblique cube and drives [`rule_label`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{self, CropConfig, GrayTensor};
use crate::rng::{self, Purpose, StreamRng};
use crate::score::Score;

pub const REFERENCE_CANVAS: f64 = 128.0;

/// Vertex pairs; 0..4 front face, 4..8 back face, 8..12 depth edges.
pub const EDGES: [(usize, usize); 12] = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)];

pub const FRONT_FACE_EDGES: [usize; 4] = [0, 1, 2, 3];

/// Unit-square coordinates of the front vertices in `(u, Ru)` terms.
const FRONT_TEMPLATE: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("could not satisfy {class} constraints after {attempts} attempts")]
    ConstraintUnsatisfiable { class: Score, attempts: usize },
    #[error("invalid noise channel: {0}")]
    InvalidChannel(String),
    #[error("invalid dataset request: {0}")]
    InvalidRequest(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Quarter turn; in image coordinates (y down) this maps right to down.
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }
}

/// Global affine about the vertex centroid plus per-vertex offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    /// Row-major 2×2 matrix.
    pub affine: [f64; 4],
    pub translation: Point,
    pub displacement: [Point; 8],
}

impl Default for Distortion {
    fn default() -> Self {
        Distortion { affine: [1.0, 0.0, 0.0, 1.0], translation: Point::default(), displacement: [Point::default(); 8] }
    }
}

/// Parametric cube drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeSpec {
    pub base_vertices: [Point; 8],
    pub present: [bool; 12],
    /// Per-point perpendicular stroke noise, reference pixels.
    pub jitter_amplitude: f64,
    /// Per-edge sinusoidal amplitude as a fraction of edge length.
    pub waviness: [f64; 12],
    /// Reference pixels.
    pub stroke_width: f64,
    pub distortion: Distortion,
    /// Free-hand polylines drawn over the figure.
    pub scribbles: Vec<Vec<Point>>,
    /// Seeds the stroke noise so rendering is a pure function of the spec.
    pub render_seed: u64,
}

impl CubeSpec {
    /// Undistorted cube with all edges present.
    pub fn ideal(origin: Point, side: Point, depth: Point) -> Self {
        let down = side.perp();
        let front = [origin, origin.add(side), origin.add(side).add(down), origin.add(down)];
        let mut base_vertices = [Point::default(); 8];
        for k in 0..4 {
            base_vertices[k] = front[k];
            base_vertices[k + 4] = front[k].add(depth);
        }
        CubeSpec {
            base_vertices,
            present: [true; 12],
            jitter_amplitude: 0.0,
            waviness: [0.0; 12],
            stroke_width: 2.0,
            distortion: Distortion::default(),
            scribbles: Vec::new(),
            render_seed: 0,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn front_face_intact(&self) -> bool {
        FRONT_FACE_EDGES.iter().all(|&e| self.present[e])
    }

    /// Vertices after global affine (about the centroid), translation and
    /// per-vertex displacement.
    pub fn distorted_vertices(&self) -> [Point; 8] {
        let c = centroid(&self.base_vertices);
        let [a, b, cc, d] = self.distortion.affine;
        let mut out = [Point::default(); 8];
        for (i, v) in self.base_vertices.iter().enumerate() {
            let r = v.sub(c);
            let mapped = Point::new(a * r.x + b * r.y, cc * r.x + d * r.y);
            out[i] = c.add(mapped).add(self.distortion.translation).add(self.distortion.displacement[i]);
        }
        out
    }

    /// Applies a similarity-plus-translation map to the geometry in place.
    pub fn transform(&mut self, f: impl Fn(Point) -> Point) {
        for v in &mut self.base_vertices {
            *v = f(*v);
        }
        let lin0 = f(Point::default());
        let map_vec = |p: Point| f(p).sub(lin0);
        self.distortion.translation = map_vec(self.distortion.translation);
        for d in &mut self.distortion.displacement {
            *d = map_vec(*d);
        }
        for line in &mut self.scribbles {
            for p in line.iter_mut() {
                *p = f(*p);
            }
        }
    }

    /// Bounding box of the distorted vertices and scribbles (reference px).
    pub fn extent(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let verts = self.distorted_vertices();
        let pts = verts.iter().chain(self.scribbles.iter().flatten());
        for p in pts {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }
}

fn centroid(pts: &[Point]) -> Point {
    let s = pts.iter().fold(Point::default(), |a, p| a.add(*p));
    s.scale(1.0 / pts.len() as f64)
}

/// Thresholds of the labeling rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    /// Minimum shape metric for "shape maintained".
    pub tau_shape: f64,
    /// Admissible depth length relative to the front side.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Fewest edges that can still count as partially correct.
    pub min_edges_partial: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig { tau_shape: 0.75, depth_min: 0.6, depth_max: 1.2, min_edges_partial: 9 }
    }
}

/// Best-fitting oblique cube for a vertex set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeFit {
    pub origin: Point,
    pub side: Point,
    pub depth: Point,
    pub fitted: [Point; 8],
    pub mean_deviation: f64,
    /// `1 - mean_deviation / |side|`.
    pub metric: f64,
}

/// Fits a square front face by least squares, takes the mean back-face
/// offset as depth (clamped to the admissible length band) and scores the
/// mean vertex deviation relative to the side length.
pub fn fit_cube(v: &[Point; 8], cfg: &ShapeConfig) -> CubeFit {
    let m = centroid(&v[..4]);
    let (mut ux, mut uy) = (0.0, 0.0);
    for (k, &(a, b)) in FRONT_TEMPLATE.iter().enumerate() {
        let (a, b) = (a - 0.5, b - 0.5);
        let p = v[k].sub(m);
        ux += a * p.x + b * p.y;
        uy += -b * p.x + a * p.y;
    }
    // sum of |c|^2 over the centered template is 2
    let side = Point::new(ux / 2.0, uy / 2.0);
    let down = side.perp();
    let origin = m.sub(side.scale(0.5)).sub(down.scale(0.5));
    let mut fitted = [Point::default(); 8];
    for (k, &(a, b)) in FRONT_TEMPLATE.iter().enumerate() {
        fitted[k] = origin.add(side.scale(a)).add(down.scale(b));
    }
    let raw_depth = (0..4).fold(Point::default(), |acc, k| acc.add(v[k + 4].sub(fitted[k]))).scale(0.25);
    let len = side.norm();
    let depth = clamp_depth(raw_depth, len, cfg);
    for k in 0..4 {
        fitted[k + 4] = fitted[k].add(depth);
    }
    let mean_deviation = v.iter().zip(&fitted).map(|(p, f)| p.sub(*f).norm()).sum::<f64>() / 8.0;
    let metric = if len > 1e-12 { 1.0 - mean_deviation / len } else { f64::NEG_INFINITY };
    CubeFit { origin, side, depth, fitted, mean_deviation, metric }
}

fn clamp_depth(raw: Point, side_len: f64, cfg: &ShapeConfig) -> Point {
    let n = raw.norm();
    let (lo, hi) = (cfg.depth_min * side_len, cfg.depth_max * side_len);
    if n < 1e-12 {
        return Point::new(lo / 2f64.sqrt(), -lo / 2f64.sqrt());
    }
    let target = n.clamp(lo, hi);
    raw.scale(target / n)
}

pub fn shape_metric(spec: &CubeSpec, cfg: &ShapeConfig) -> f64 {
    fit_cube(&spec.distorted_vertices(), cfg).metric
}

/// Scoring rule: twelve edges with the cube shape kept is correct; a few
/// missing edges with the shape and front face kept is partially correct;
/// anything else, including an over-scribbled figure, is incorrect.
pub fn rule_label(spec: &CubeSpec, cfg: &ShapeConfig) -> Score {
    if !spec.scribbles.is_empty() {
        return Score::Incorrect;
    }
    let shape_ok = shape_metric(spec, cfg) >= cfg.tau_shape;
    let n = spec.edge_count();
    if n == 12 && shape_ok {
        Score::Correct
    } else if n < 12 && n >= cfg.min_edges_partial && shape_ok && spec.front_face_intact() {
        Score::PartiallyCorrect
    } else {
        Score::Incorrect
    }
}

/// How an incorrect drawing fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureMode {
    MissingEdges,
    SevereDistortion,
    FlatSquare,
    Scribble,
}

/// Ranges for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub shape: ShapeConfig,
    /// Generated valid cubes keep their metric at least this far above
    /// `tau_shape`, severe distortions this far below it.
    pub guard: f64,
    pub side_range: (f64, f64),
    pub depth_ratio_range: (f64, f64),
    pub rotation_deg: f64,
    pub mild_jitter: f64,
    pub mild_waviness: f64,
    pub mild_affine: f64,
    pub mild_displacement: f64,
    pub severe_displacement: f64,
    pub stroke_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            shape: ShapeConfig::default(),
            guard: 0.05,
            side_range: (38.0, 56.0),
            depth_ratio_range: (0.65, 0.95),
            rotation_deg: 8.0,
            mild_jitter: 1.0,
            mild_waviness: 0.015,
            mild_affine: 0.06,
            mild_displacement: 0.025,
            severe_displacement: 0.28,
            stroke_range: (1.6, 3.0),
            max_attempts: 1000,
        }
    }
}

/// Draws a spec whose rule label is `class`.
pub fn sample_spec(class: Score, cfg: &GeneratorConfig, rng: &mut StreamRng) -> Result<CubeSpec, SynthError> {
    for _ in 0..cfg.max_attempts {
        let spec = match class {
            Score::Correct => sample_valid(cfg, rng, 0),
            Score::PartiallyCorrect => {
                let missing = rng.random_range(1..=12 - cfg.shape.min_edges_partial.min(11));
                sample_valid(cfg, rng, missing)
            }
            Score::Incorrect => {
                let mode = match rng.random_range(0..4) {
                    0 => FailureMode::MissingEdges,
                    1 => FailureMode::SevereDistortion,
                    2 => FailureMode::FlatSquare,
                    _ => FailureMode::Scribble,
                };
                sample_incorrect(mode, cfg, rng)
            }
        };
        if !inside_canvas(&spec) {
            continue;
        }
        if rule_label(&spec, &cfg.shape) != class {
            continue;
        }
        let metric = shape_metric(&spec, &cfg.shape);
        let guarded = match class {
            Score::Correct | Score::PartiallyCorrect => metric >= cfg.shape.tau_shape + cfg.guard,
            Score::Incorrect => {
                // only severe distortion lives near the threshold
                spec.edge_count() < 12 || !spec.scribbles.is_empty() || metric <= cfg.shape.tau_shape - cfg.guard
            }
        };
        if guarded {
            return Ok(spec);
        }
    }
    Err(SynthError::ConstraintUnsatisfiable { class, attempts: cfg.max_attempts })
}

fn inside_canvas(spec: &CubeSpec) -> bool {
    let (lo, hi) = spec.extent();
    let pad = 2.0 + spec.stroke_width;
    lo.x >= pad && lo.y >= pad && hi.x <= REFERENCE_CANVAS - pad && hi.y <= REFERENCE_CANVAS - pad
}

fn base_cube(cfg: &GeneratorConfig, depth_ratio: f64, rng: &mut StreamRng) -> CubeSpec {
    let side_len = rng.random_range(cfg.side_range.0..=cfg.side_range.1);
    let theta = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    let side = Point::new(theta.cos(), theta.sin()).scale(side_len);
    // depth goes up-right or up-left
    let mut phi = rng.random_range(25f64..=60.0).to_radians();
    if rng.random_bool(0.5) {
        phi = std::f64::consts::PI - phi;
    }
    let depth = Point::new(phi.cos(), -phi.sin()).scale(depth_ratio * side_len);
    let mut spec = CubeSpec::ideal(Point::default(), side, depth);
    let (lo, hi) = spec.extent();
    let slack_x = (REFERENCE_CANVAS - (hi.x - lo.x) - 16.0).max(0.0);
    let slack_y = (REFERENCE_CANVAS - (hi.y - lo.y) - 16.0).max(0.0);
    let shift = Point::new(8.0 - lo.x + rng.random_range(0.0..=slack_x), 8.0 - lo.y + rng.random_range(0.0..=slack_y));
    spec.transform(|p| p.add(shift));
    spec.stroke_width = rng.random_range(cfg.stroke_range.0..=cfg.stroke_range.1);
    spec.render_seed = rng.random();
    spec
}

fn mild_style(spec: &mut CubeSpec, cfg: &GeneratorConfig, rng: &mut StreamRng) {
    spec.jitter_amplitude = rng.random_range(0.0..=cfg.mild_jitter);
    for w in &mut spec.waviness {
        *w = rng.random_range(0.0..=cfg.mild_waviness);
    }
}

fn distort(spec: &mut CubeSpec, affine_amp: f64, displacement_frac: f64, rng: &mut StreamRng) {
    let side = spec.base_vertices[1].sub(spec.base_vertices[0]).norm();
    let mut a = [1.0, 0.0, 0.0, 1.0];
    for e in &mut a {
        *e += rng.random_range(-affine_amp..=affine_amp);
    }
    let normal = Normal::new(0.0, displacement_frac * side).expect("finite sigma");
    let mut displacement = [Point::default(); 8];
    for d in &mut displacement {
        *d = Point::new(normal.sample(rng), normal.sample(rng));
    }
    spec.distortion = Distortion { affine: a, translation: Point::default(), displacement };
}

fn remove_edges(spec: &mut CubeSpec, candidates: &[usize], count: usize, rng: &mut StreamRng) {
    let mut pool = candidates.to_vec();
    pool.shuffle(rng);
    for &e in pool.iter().take(count) {
        spec.present[e] = false;
    }
}

const NON_FRONT_EDGES: [usize; 8] = [4, 5, 6, 7, 8, 9, 10, 11];
const ALL_EDGES: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

fn sample_valid(cfg: &GeneratorConfig, rng: &mut StreamRng, missing: usize) -> CubeSpec {
    let ratio = rng.random_range(cfg.depth_ratio_range.0..=cfg.depth_ratio_range.1);
    let mut spec = base_cube(cfg, ratio, rng);
    mild_style(&mut spec, cfg, rng);
    distort(&mut spec, cfg.mild_affine, cfg.mild_displacement, rng);
    remove_edges(&mut spec, &NON_FRONT_EDGES, missing, rng);
    spec
}

fn sample_incorrect(mode: FailureMode, cfg: &GeneratorConfig, rng: &mut StreamRng) -> CubeSpec {
    let ratio = rng.random_range(cfg.depth_ratio_range.0..=cfg.depth_ratio_range.1);
    match mode {
        FailureMode::MissingEdges => {
            let mut spec = base_cube(cfg, ratio, rng);
            mild_style(&mut spec, cfg, rng);
            distort(&mut spec, cfg.mild_affine, cfg.mild_displacement, rng);
            let max_missing = 8;
            let count = rng.random_range((12 - cfg.shape.min_edges_partial + 1)..=max_missing);
            remove_edges(&mut spec, &ALL_EDGES, count, rng);
            spec
        }
        FailureMode::SevereDistortion => {
            let mut spec = base_cube(cfg, ratio, rng);
            mild_style(&mut spec, cfg, rng);
            distort(&mut spec, 2.0 * cfg.mild_affine, cfg.severe_displacement, rng);
            if rng.random_bool(0.3) {
                remove_edges(&mut spec, &NON_FRONT_EDGES, rng.random_range(1..=2), rng);
            }
            spec
        }
        FailureMode::FlatSquare => {
            let flat = rng.random_range(0.0..=0.06);
            let mut spec = base_cube(cfg, flat, rng);
            mild_style(&mut spec, cfg, rng);
            distort(&mut spec, cfg.mild_affine, cfg.mild_displacement * 0.5, rng);
            spec
        }
        FailureMode::Scribble => {
            let mut spec = base_cube(cfg, ratio, rng);
            mild_style(&mut spec, cfg, rng);
            distort(&mut spec, 2.0 * cfg.mild_affine, 2.0 * cfg.mild_displacement, rng);
            remove_edges(&mut spec, &ALL_EDGES, rng.random_range(0..=3), rng);
            let (lo, hi) = spec.extent();
            let lines = rng.random_range(2..=4);
            for _ in 0..lines {
                let points = rng.random_range(5..=10);
                let line = (0..points).map(|_| Point::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y))).collect();
                spec.scribbles.push(line);
            }
            spec
        }
    }
}

/// Anti-aliased stroke coverage; strokes combine by maximum.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn segment(&mut self, a: Point, b: Point, half_width: f64) {
        let reach = half_width + 1.0;
        let x0 = (a.x.min(b.x) - reach).floor().max(0.0) as usize;
        let y0 = (a.y.min(b.y) - reach).floor().max(0.0) as usize;
        let x1 = ((a.x.max(b.x) + reach).ceil().max(0.0) as usize).min(self.w);
        let y1 = ((a.y.max(b.y) + reach).ceil().max(0.0) as usize).min(self.h);
        let ab = b.sub(a);
        let len2 = ab.x * ab.x + ab.y * ab.y;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                let ap = p.sub(a);
                let t = if len2 > 0.0 { ((ap.x * ab.x + ap.y * ab.y) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = p.sub(a.add(ab.scale(t))).norm();
                let cov = (half_width + 0.5 - d).clamp(0.0, 1.0) as f32;
                let cell = &mut self.data[y * self.w + x];
                if cov > *cell {
                    *cell = cov;
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[Point], half_width: f64) {
        for pair in pts.windows(2) {
            self.segment(pair[0], pair[1], half_width);
        }
    }
}

/// Points along one hand-drawn edge, in reference coordinates.
fn stroke_points(a: Point, b: Point, jitter: f64, waviness: f64, rng: &mut StreamRng) -> Vec<Point> {
    let len = b.sub(a).norm();
    let n = ((len / 2.0).ceil() as usize).max(16);
    let normal = if len > 0.0 { b.sub(a).perp().scale(1.0 / len) } else { Point::default() };
    let cycles = rng.random_range(0.5..=2.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let wave = waviness * len * (std::f64::consts::TAU * cycles * t + phase).sin();
            let noise: f64 = if jitter > 0.0 { jitter * gauss.sample(rng) } else { 0.0 };
            a.add(b.sub(a).scale(t)).add(normal.scale(wave + noise))
        })
        .collect()
}

/// Rasterizes the present edges and any scribbles into an `out_h × out_w`
/// tensor. Pure function of the spec.
pub fn render(spec: &CubeSpec, out_h: usize, out_w: usize) -> GrayTensor {
    assert!(out_h >= 32 && out_w >= 32, "canvas must be at least 32x32");
    let sx = out_w as f64 / REFERENCE_CANVAS;
    let sy = out_h as f64 / REFERENCE_CANVAS;
    let to_px = |p: Point| Point::new(p.x * sx, p.y * sy);
    let half_width = 0.5 * spec.stroke_width * (sx * sy).sqrt();
    let mut canvas = Canvas { h: out_h, w: out_w, data: vec![0.0; out_h * out_w] };
    let verts = spec.distorted_vertices();
    let mut rng = rng::stream(spec.render_seed, Purpose::Render, 0);
    for (e, &(i, j)) in EDGES.iter().enumerate() {
        // consume the edge's noise even when absent so edges stay independent
        let pts = stroke_points(verts[i], verts[j], spec.jitter_amplitude, spec.waviness[e], &mut rng);
        if spec.present[e] {
            let px: Vec<Point> = pts.into_iter().map(to_px).collect();
            canvas.polyline(&px, half_width);
        }
    }
    for line in &spec.scribbles {
        let px: Vec<Point> = line.iter().copied().map(to_px).collect();
        canvas.polyline(&px, half_width);
    }
    GrayTensor::from_values(out_h, out_w, canvas.data)
}

/// Row-stochastic channel; entry `[g][i]` is P(assigned i | gold g).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    matrix: [[f64; 3]; 3],
}

impl NoiseChannel {
    pub fn new(matrix: [[f64; 3]; 3]) -> Result<Self, SynthError> {
        for (g, row) in matrix.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(SynthError::InvalidChannel(format!("row {g} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SynthError::InvalidChannel(format!("row {g} sums to {s}")));
            }
        }
        Ok(NoiseChannel { matrix })
    }

    /// Scales each row to sum to one.
    pub fn normalized(raw: [[f64; 3]; 3]) -> Result<Self, SynthError> {
        let mut m = raw;
        for row in &mut m {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(SynthError::InvalidChannel("row with zero mass".into()));
            }
            for p in row.iter_mut() {
                *p /= s;
            }
        }
        NoiseChannel::new(m)
    }

    /// Interviewer-vs-gold row shares of the field data: diagonals 91/50/75%.
    pub fn interviewer_default() -> Self {
        NoiseChannel::normalized([[0.91, 0.07, 0.02], [0.27, 0.50, 0.23], [0.07, 0.18, 0.75]]).expect("default channel is valid")
    }

    pub fn identity() -> Self {
        NoiseChannel { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    /// Expected agreement with gold under class shares.
    pub fn agreement(&self, shares: &[f64; 3]) -> f64 {
        (0..3).map(|g| shares[g] * self.matrix[g][g]).sum()
    }
}

pub fn apply_label_noise<R: Rng + ?Sized>(gold: Score, channel: &NoiseChannel, rng: &mut R) -> Score {
    let row = &channel.matrix[gold.index()];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Score::ALL[i];
        }
    }
    // rounding slack: last class with mass
    let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(gold.index());
    Score::ALL[last]
}

/// Gold class shares of the field data.
pub const DEFAULT_SHARES: [f64; 3] = [0.6165, 0.1991, 0.1844];
pub const DEFAULT_DATASET_SIZE: usize = 1776;

/// Per-class counts by largest-remainder rounding; ties go to the lower
/// class index.
pub fn class_counts(n: usize, shares: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub shares: [f64; 3],
    pub seed: u64,
    /// Model input side; drawings are rendered on the reference canvas and
    /// then cropped and resized to this.
    pub input_size: usize,
    pub channel: NoiseChannel,
    pub generator: GeneratorConfig,
    pub crop: CropConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: DEFAULT_DATASET_SIZE,
            shares: DEFAULT_SHARES,
            seed: 0,
            input_size: 64,
            channel: NoiseChannel::interviewer_default(),
            generator: GeneratorConfig::default(),
            crop: CropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDrawing {
    pub id: u64,
    pub tensor: GrayTensor,
    pub gold: Score,
    pub interviewer: Score,
    pub spec: CubeSpec,
}

/// Renders a spec on the reference canvas and runs it through the scan
/// pipeline, so synthetic tensors match what the service sees for uploads.
pub fn render_scan(spec: &CubeSpec, input_size: usize, crop: &CropConfig) -> GrayTensor {
    let side = REFERENCE_CANVAS as usize;
    let page = render(spec, side, side).to_raw();
    image::preprocess(&page, crop, input_size, input_size).tensor
}

/// Class sequence for a dataset: exact counts, seeded shuffle.
pub fn class_sequence(n: usize, shares: &[f64; 3], seed: u64) -> Vec<Score> {
    let counts = class_counts(n, shares);
    let mut classes: Vec<Score> = Score::ALL.iter().zip(counts).flat_map(|(&s, c)| std::iter::repeat_n(s, c)).collect();
    classes.shuffle(&mut rng::stream(seed, Purpose::Shuffle, 0));
    classes
}

pub fn generate_drawing(id: u64, gold: Score, cfg: &DatasetConfig) -> Result<LabeledDrawing, SynthError> {
    let mut spec_rng = rng::stream(cfg.seed, Purpose::Spec, id);
    let spec = sample_spec(gold, &cfg.generator, &mut spec_rng)?;
    let mut noise_rng = rng::stream(cfg.seed, Purpose::Noise, id);
    let interviewer = apply_label_noise(gold, &cfg.channel, &mut noise_rng);
    let tensor = render_scan(&spec, cfg.input_size, &cfg.crop);
    Ok(LabeledDrawing { id, tensor, gold, interviewer, spec })
}

/// Generates `cfg.n` drawings. Each drawing uses streams keyed by
/// `(seed, id)`, so the parallel result equals the serial one.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<LabeledDrawing>, SynthError> {
    if cfg.n < 3 {
        return Err(SynthError::InvalidRequest("n must be at least 3".into()));
    }
    let total: f64 = cfg.shares.iter().sum();
    if (total - 1.0).abs() > 1e-6 || cfg.shares.iter().any(|&s| s < 0.0) {
        return Err(SynthError::InvalidRequest(format!("shares must be non-negative and sum to 1, got {total}")));
    }
    let classes = class_sequence(cfg.n, &cfg.shares, cfg.seed);
    classes.par_iter().enumerate().map(|(i, &gold)| generate_drawing(i as u64, gold, cfg)).collect()
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub gold: Score,
    pub interviewer: Score,
    pub spec: CubeSpec,
    pub tensor: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_CONFIG_FILE: &str = "dataset.json";

/// Writes `manifest.jsonl`, `dataset.json` and `tensors/<id>.bin`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, drawings: &[LabeledDrawing]) -> Result<PathBuf, SynthError> {
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = BufWriter::new(fs::File::create(&manifest_path)?);
    for d in drawings {
        let rel = format!("tensors/{:06}.bin", d.id);
        fs::write(dir.join(&rel), d.tensor.to_binary())?;
        let rec = ManifestRecord { id: d.id, gold: d.gold, interviewer: d.interviewer, spec: d.spec.clone(), tensor: rel };
        serde_json::to_writer(&mut manifest, &rec).map_err(|e| SynthError::Manifest(e.to_string()))?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    let cfg_json = serde_json::to_string_pretty(cfg).map_err(|e| SynthError::Manifest(e.to_string()))?;
    fs::write(dir.join(DATASET_CONFIG_FILE), cfg_json + "\n")?;
    Ok(manifest_path)
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledDrawing>, SynthError> {
    let file = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| SynthError::Manifest(e.to_string()))?;
        let bytes = fs::read(dir.join(&rec.tensor))?;
        let tensor = GrayTensor::read_binary(&bytes[..])?;
        out.push(LabeledDrawing { id: rec.id, tensor, gold: rec.gold, interviewer: rec.interviewer, spec: rec.spec });
    }
    Ok(out)
}

pub fn load_dataset_config(dir: &Path) -> Result<DatasetConfig, SynthError> {
    let text = fs::read_to_string(dir.join(DATASET_CONFIG_FILE))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal() -> CubeSpec {
        CubeSpec::ideal(Point::new(30.0, 50.0), Point::new(45.0, 0.0), Point::new(25.0, -25.0))
    }

    #[test]
    fn ideal_cube_is_correct() {
        let spec = ideal();
        let fit = fit_cube(&spec.distorted_vertices(), &ShapeConfig::default());
        assert!(fit.mean_deviation < 1e-9);
        assert!((fit.metric - 1.0).abs() < 1e-9);
        assert_eq!(rule_label(&spec, &ShapeConfig::default()), Score::Correct);
    }

    #[test]
    fn flat_square_is_incorrect() {
        let spec = CubeSpec::ideal(Point::new(30.0, 30.0), Point::new(50.0, 0.0), Point::default());
        let cfg = ShapeConfig::default();
        let m = shape_metric(&spec, &cfg);
        // back face sits depth_min * side away from the admissible fit
        assert!((m - (1.0 - cfg.depth_min / 2.0)).abs() < 1e-9, "{m}");
        assert_eq!(rule_label(&spec, &cfg), Score::Incorrect);
    }

    #[test]
    fn partial_rules() {
        let cfg = ShapeConfig::default();
        let mut spec = ideal();
        spec.present[9] = false;
        assert_eq!(rule_label(&spec, &cfg), Score::PartiallyCorrect);
        spec.present[0] = false;
        assert_eq!(rule_label(&spec, &cfg), Score::Incorrect, "front face broken");
        let mut sparse = ideal();
        for e in [4, 5, 6, 7] {
            sparse.present[e] = false;
        }
        assert_eq!(rule_label(&sparse, &cfg), Score::Incorrect, "too few edges");
        let mut scribbled = ideal();
        scribbled.scribbles.push(vec![Point::new(40.0, 40.0), Point::new(60.0, 70.0)]);
        assert_eq!(rule_label(&scribbled, &cfg), Score::Incorrect);
    }

    #[test]
    fn sampled_specs_match_requested_class() {
        let cfg = GeneratorConfig::default();
        for class in Score::ALL {
            for i in 0..200 {
                let mut rng = rng::stream(3, Purpose::Spec, i);
                let spec = sample_spec(class, &cfg, &mut rng).unwrap();
                assert_eq!(rule_label(&spec, &cfg.shape), class);
                match class {
                    Score::Correct => assert_eq!(spec.edge_count(), 12),
                    Score::PartiallyCorrect => {
                        assert!((9..=11).contains(&spec.edge_count()));
                        assert!(shape_metric(&spec, &cfg.shape) >= cfg.shape.tau_shape);
                    }
                    Score::Incorrect => {}
                }
                assert!(inside_canvas(&spec));
            }
        }
    }

    #[test]
    fn render_empty_spec_is_blank() {
        let mut spec = ideal();
        spec.present = [false; 12];
        let t = render(&spec, 64, 64);
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_horizontal_edge_row_band() {
        let mut spec = CubeSpec::ideal(Point::new(20.0, 10.5), Point::new(80.0, 0.0), Point::new(20.0, -5.0));
        spec.present = [false; 12];
        spec.present[0] = true;
        spec.stroke_width = 1.0;
        let t = render(&spec, 128, 128);
        for y in 0..128 {
            let row: f64 = (0..128).map(|x| t.get(y, x) as f64).sum();
            if y == 10 {
                // 80 px body plus at most half a pixel of cap at each end
                assert!((row - 80.0).abs() <= 1.0, "row sum {row}");
            } else {
                assert_eq!(row, 0.0, "ink outside the band at row {y}");
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = rng::stream(9, Purpose::Spec, 0);
        let spec = sample_spec(Score::Correct, &GeneratorConfig::default(), &mut rng).unwrap();
        assert_eq!(render(&spec, 64, 64), render(&spec, 64, 64));
    }

    #[test]
    fn channel_validation() {
        assert!(NoiseChannel::new([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.1]]).is_err());
        assert!(NoiseChannel::new([[1.5, -0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        let d = NoiseChannel::interviewer_default();
        for row in d.matrix() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((d.agreement(&DEFAULT_SHARES) - 0.798).abs() < 0.015);
    }

    #[test]
    fn identity_channel_keeps_labels() {
        let ch = NoiseChannel::identity();
        let mut rng = rng::stream(1, Purpose::Noise, 0);
        for _ in 0..1000 {
            for g in Score::ALL {
                assert_eq!(apply_label_noise(g, &ch, &mut rng), g);
            }
        }
    }

    #[test]
    fn default_channel_diagonals() {
        let ch = NoiseChannel::interviewer_default();
        let mut rng = rng::stream(2, Purpose::Noise, 0);
        let n = 100_000;
        for (gold, expected) in [(Score::Correct, 0.91), (Score::PartiallyCorrect, 0.50), (Score::Incorrect, 0.75)] {
            let hits = (0..n).filter(|_| apply_label_noise(gold, &ch, &mut rng) == gold).count();
            let frac = hits as f64 / n as f64;
            assert!((frac - expected).abs() < 0.01, "{gold}: {frac}");
        }
    }

    #[test]
    fn counts_by_largest_remainder() {
        assert_eq!(class_counts(1776, &DEFAULT_SHARES), [1095, 354, 327]);
        assert_eq!(class_counts(3, &[1.0 / 3.0; 3]), [1, 1, 1]);
        for n in 3..300 {
            let c = class_counts(n, &DEFAULT_SHARES);
            assert_eq!(c.iter().sum::<usize>(), n);
            for i in 0..3 {
                assert!((c[i] as f64 - n as f64 * DEFAULT_SHARES[i]).abs() < 1.0);
            }
        }
    }

    #[test]
    fn tiny_dataset_one_per_class() {
        let cfg = DatasetConfig { n: 3, shares: [1.0 / 3.0; 3], seed: 5, ..Default::default() };
        let ds = generate_dataset(&cfg).unwrap();
        let mut golds: Vec<Score> = ds.iter().map(|d| d.gold).collect();
        golds.sort();
        assert_eq!(golds, Score::ALL.to_vec());
        assert!(generate_dataset(&DatasetConfig { n: 2, ..cfg.clone() }).is_err());
    }
}
