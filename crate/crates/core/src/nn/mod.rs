//! Compact convolutional networks with exact backpropagation.
//!
//! A [`Model`] is a sequential list of [`LayerSpec`]s (residual blocks nest
//! a body) over one flat parameter vector. `forward` returns logits plus a
//! cache; `backward` turns the cache and the logit gradient into gradients
//! for every parameter and for the input.

mod checkpoint;
mod layers;
mod loss;
mod optim;
mod registry;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use layers::LayerSpec;
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use registry::{Architecture, ModelConfig};
pub use tensor::{Shape, Tensor4};

use crate::rng::{self, Purpose, StreamRng};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache does not belong to the current model parameters")]
    StaleCache,
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct Node {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    offset: usize,
    children: Vec<Node>,
}

fn compile(layers: &[LayerSpec], mut shape: Shape, offset: &mut usize) -> Result<Vec<Node>, NnError> {
    let mut nodes = Vec::with_capacity(layers.len());
    for spec in layers {
        let output = spec.output_shape(shape)?;
        let own = *offset;
        *offset += spec.own_params();
        let children = match spec {
            LayerSpec::Residual { body } => compile(body, shape, offset)?,
            _ => Vec::new(),
        };
        nodes.push(Node { spec: spec.clone(), input: shape, output, offset: own, children });
        shape = output;
    }
    Ok(nodes)
}

enum Entry {
    Conv { input: Tensor4 },
    Dense { input: Tensor4 },
    Relu { input: Tensor4 },
    Gelu { input: Tensor4 },
    MaxPool { argmax: Vec<u32> },
    Reshape,
    Dropout { mask: Option<Vec<f64>> },
    Residual { entries: Vec<Entry> },
}

/// Activations kept by [`Model::forward`] for the matching backward call.
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    batch: usize,
    entries: Vec<Entry>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Hash of the piecewise-linear regime: ReLU signs and max-pool
    /// winners. Two passes with equal patterns lie on the same smooth piece,
    /// which is what finite-difference checks need.
    pub fn activation_pattern(&self) -> u64 {
        fn feed(h: &mut u64, v: u64) {
            *h ^= v;
            *h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        fn walk(entries: &[Entry], h: &mut u64) {
            for e in entries {
                match e {
                    Entry::Relu { input } => {
                        for chunk in input.data.chunks(64) {
                            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i));
                            feed(h, bits);
                        }
                    }
                    Entry::MaxPool { argmax } => argmax.iter().for_each(|&i| feed(h, i as u64)),
                    Entry::Residual { entries } => walk(entries, h),
                    _ => {}
                }
            }
        }
        let mut h = 0xCBF2_9CE4_8422_2325;
        walk(&self.entries, &mut h);
        h
    }
}

/// Parameter and input gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Tensor4,
}

pub struct Model {
    name: String,
    input: Shape,
    layers: Vec<LayerSpec>,
    nodes: Vec<Node>,
    params: Vec<f64>,
    id: u64,
    generation: u64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let mut offset = 0;
        let nodes = compile(&self.layers, self.input, &mut offset).expect("layers compiled before");
        Model {
            name: self.name.clone(),
            input: self.input,
            layers: self.layers.clone(),
            nodes,
            params: self.params.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("name", &self.name).field("input", &self.input).field("params", &self.params.len()).finish()
    }
}

impl Model {
    /// Builds a model with He-uniform weights and zero biases.
    pub fn new(name: impl Into<String>, input: Shape, layers: Vec<LayerSpec>, init_seed: u64) -> Result<Self, NnError> {
        let mut offset = 0;
        let nodes = compile(&layers, input, &mut offset)?;
        let out = nodes.last().map(|n| n.output).unwrap_or(input);
        if out != Shape::new(NUM_CLASSES, 1, 1) {
            return Err(NnError::ShapeMismatch(format!("model must end in {NUM_CLASSES} logits, ends in {out:?}")));
        }
        let mut params = vec![0.0; offset];
        let mut init = rng::stream(init_seed, Purpose::Init, 0);
        he_init(&nodes, &mut params, &mut init);
        Ok(Model { name: name.into(), input, layers, nodes, params, id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed), generation: 0 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ShapeMismatch(format!("expected {} params, got {}", self.params.len(), params.len())));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// Runs the network. Dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, x: &Tensor4, mut dropout_rng: Option<&mut StreamRng>) -> Result<(Tensor4, ForwardCache), NnError> {
        if x.shape != self.input {
            return Err(NnError::ShapeMismatch(format!("model expects {:?}, batch is {:?}", self.input, x.shape)));
        }
        let mut entries = Vec::with_capacity(self.nodes.len());
        let out = forward_nodes(&self.nodes, &self.params, x.clone(), &mut dropout_rng, &mut entries);
        let cache = ForwardCache { model_id: self.id, generation: self.generation, batch: x.n, entries };
        Ok((out, cache))
    }

    /// Exact gradients of a loss whose gradient w.r.t. the logits is
    /// `dlogits`.
    pub fn backward(&self, cache: ForwardCache, dlogits: &Tensor4) -> Result<Gradients, NnError> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(NnError::StaleCache);
        }
        if dlogits.n != cache.batch || dlogits.shape != Shape::new(NUM_CLASSES, 1, 1) {
            return Err(NnError::ShapeMismatch("logit gradient does not match the cached batch".into()));
        }
        let mut grads = vec![0.0; self.params.len()];
        let input = backward_nodes(&self.nodes, &self.params, cache.entries, dlogits.clone(), &mut grads);
        Ok(Gradients { params: grads, input })
    }

    /// Eval-mode logits; large batches are processed in chunks.
    pub fn logits(&self, x: &Tensor4) -> Result<Tensor4, NnError> {
        const CHUNK: usize = 128;
        if x.n <= CHUNK {
            return Ok(self.forward(x, None)?.0);
        }
        let mut out = Tensor4::zeros(0, Shape::new(NUM_CLASSES, 1, 1));
        for start in (0..x.n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(x.n)).collect();
            let (part, _) = self.forward(&x.select(&idx), None)?;
            out.data.extend_from_slice(&part.data);
            out.n += part.n;
        }
        Ok(out)
    }

    /// Softmax probabilities per sample (eval mode).
    pub fn predict_proba(&self, x: &Tensor4) -> Result<Vec<[f64; NUM_CLASSES]>, NnError> {
        let logits = self.logits(x)?;
        Ok((0..logits.n).map(|i| softmax(logits.sample(i))).collect())
    }
}

fn he_init(nodes: &[Node], params: &mut [f64], rng: &mut StreamRng) {
    for node in nodes {
        let fan_in = node.spec.fan_in();
        let own = node.spec.own_params();
        if own > 0 {
            let bias_len = match node.spec {
                LayerSpec::Conv2d { out_c, .. } => out_c,
                LayerSpec::Dense { out_f, .. } => out_f,
                _ => 0,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = &mut params[node.offset..node.offset + own - bias_len];
            for w in weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        he_init(&node.children, params, rng);
    }
}

fn forward_nodes(nodes: &[Node], params: &[f64], mut x: Tensor4, rng: &mut Option<&mut StreamRng>, entries: &mut Vec<Entry>) -> Tensor4 {
    for node in nodes {
        let own = &params[node.offset..node.offset + node.spec.own_params()];
        let mut out = Tensor4::zeros(x.n, node.output);
        let entry = match &node.spec {
            &LayerSpec::Conv2d { groups, .. } => {
                let g = layers::conv_geom(&node.spec, node.input, node.output);
                if groups == 1 {
                    layers::conv_forward(&x, own, &g, &mut out);
                } else {
                    layers::depthwise_forward(&x, own, &g, &mut out);
                }
                Entry::Conv { input: x }
            }
            &LayerSpec::Dense { in_f, out_f } => {
                layers::dense_forward(&x, own, in_f, out_f, &mut out);
                Entry::Dense { input: x }
            }
            LayerSpec::Relu => {
                for (o, &v) in out.data.iter_mut().zip(&x.data) {
                    *o = v.max(0.0);
                }
                Entry::Relu { input: x }
            }
            LayerSpec::Gelu => {
                for (o, &v) in out.data.iter_mut().zip(&x.data) {
                    *o = layers::gelu(v);
                }
                Entry::Gelu { input: x }
            }
            &LayerSpec::MaxPool { kernel, stride } => {
                let mut argmax = Vec::new();
                layers::maxpool_forward(&x, kernel, stride, &mut out, &mut argmax);
                Entry::MaxPool { argmax }
            }
            LayerSpec::GlobalAvgPool => {
                layers::global_avg_forward(&x, &mut out);
                Entry::Reshape
            }
            LayerSpec::Flatten => {
                out.data = x.data;
                Entry::Reshape
            }
            &LayerSpec::Dropout { rate } => match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => {
                    let mask = layers::dropout_mask(x.data.len(), rate, r);
                    for ((o, &v), m) in out.data.iter_mut().zip(&x.data).zip(&mask) {
                        *o = v * m;
                    }
                    Entry::Dropout { mask: Some(mask) }
                }
                _ => {
                    out.data = x.data;
                    Entry::Dropout { mask: None }
                }
            },
            LayerSpec::Residual { .. } => {
                let mut inner = Vec::with_capacity(node.children.len());
                let body = forward_nodes(&node.children, params, x.clone(), rng, &mut inner);
                for ((o, a), b) in out.data.iter_mut().zip(&x.data).zip(&body.data) {
                    *o = a + b;
                }
                Entry::Residual { entries: inner }
            }
        };
        entries.push(entry);
        x = out;
    }
    x
}

fn backward_nodes(nodes: &[Node], params: &[f64], entries: Vec<Entry>, mut dy: Tensor4, grads: &mut [f64]) -> Tensor4 {
    for (node, entry) in nodes.iter().zip(entries).rev() {
        let own_len = node.spec.own_params();
        let own = &params[node.offset..node.offset + own_len];
        let mut dx = Tensor4::zeros(dy.n, node.input);
        match (&node.spec, entry) {
            (&LayerSpec::Conv2d { groups, .. }, Entry::Conv { input }) => {
                let g = layers::conv_geom(&node.spec, node.input, node.output);
                let gslice = &mut grads[node.offset..node.offset + own_len];
                if groups == 1 {
                    layers::conv_backward(&input, &dy, own, &g, gslice, &mut dx);
                } else {
                    layers::depthwise_backward(&input, &dy, own, &g, gslice, &mut dx);
                }
            }
            (&LayerSpec::Dense { in_f, out_f }, Entry::Dense { input }) => {
                let gslice = &mut grads[node.offset..node.offset + own_len];
                layers::dense_backward(&input, &dy, own, in_f, out_f, gslice, &mut dx);
            }
            (LayerSpec::Relu, Entry::Relu { input }) => {
                for ((d, &g), &v) in dx.data.iter_mut().zip(&dy.data).zip(&input.data) {
                    *d = if v > 0.0 { g } else { 0.0 };
                }
            }
            (LayerSpec::Gelu, Entry::Gelu { input }) => {
                for ((d, &g), &v) in dx.data.iter_mut().zip(&dy.data).zip(&input.data) {
                    *d = g * layers::gelu_grad(v);
                }
            }
            (LayerSpec::MaxPool { .. }, Entry::MaxPool { argmax }) => {
                layers::maxpool_backward(&dy, &argmax, &mut dx);
            }
            (LayerSpec::GlobalAvgPool, Entry::Reshape) => layers::global_avg_backward(&dy, &mut dx),
            (LayerSpec::Flatten, Entry::Reshape) => dx.data = dy.data,
            (LayerSpec::Dropout { .. }, Entry::Dropout { mask }) => match mask {
                Some(mask) => {
                    for ((d, &g), m) in dx.data.iter_mut().zip(&dy.data).zip(&mask) {
                        *d = g * m;
                    }
                }
                None => dx.data = dy.data,
            },
            (LayerSpec::Residual { .. }, Entry::Residual { entries }) => {
                let dbody = backward_nodes(&node.children, params, entries, dy.clone(), grads);
                for ((d, a), b) in dx.data.iter_mut().zip(&dy.data).zip(&dbody.data) {
                    *d = a + b;
                }
            }
            _ => unreachable!("cache entry does not match layer"),
        }
        dy = dx;
    }
    dy
}
