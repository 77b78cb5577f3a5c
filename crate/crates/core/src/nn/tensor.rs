use serde::{Deserialize, Serialize};

use crate::image::GrayTensor;

/// Channel/height/width of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense batch in `(n, c, h, w)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, shape: Shape) -> Self {
        Tensor4 { n, shape, data: vec![0.0; n * shape.len()] }
    }

    pub fn from_vec(n: usize, shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * shape.len(), "tensor data length mismatch");
        Tensor4 { n, shape, data }
    }

    /// Stacks grey tensors into a single-channel batch.
    pub fn from_grays<'a>(images: impl IntoIterator<Item = &'a GrayTensor>) -> Self {
        let mut data = Vec::new();
        let mut n = 0;
        let mut dims = None;
        for img in images {
            let d = (img.height(), img.width());
            assert!(dims.is_none_or(|prev| prev == d), "images in a batch must share dimensions");
            dims = Some(d);
            data.extend(img.values().iter().map(|&v| v as f64));
            n += 1;
        }
        let (h, w) = dims.unwrap_or((0, 0));
        Tensor4 { n, shape: Shape::new(1, h, w), data }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.shape.len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the samples at `indices`.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 { n: indices.len(), shape: self.shape, data }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `a` is
/// `m × k`, `b` is `k × n`; the transpose flags reinterpret the stored
/// matrices (stored as `k × m` / `n × k` respectively).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: operand lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
