//! Minimal dense tensor: a shape plus row-major flat storage.

use super::NnError;
use num_traits::Float;

/// Row-major n-dimensional array. `TensorF` (`f32`) is the working
/// precision; `Tensor<f64>` is used by the gradient-check shadow mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub type TensorF = Tensor<f32>;

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Same data viewed under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another float width.
    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from(*v).expect("float widening"))
                .collect(),
        }
    }
}

/// Dot product split over eight independent accumulator lanes; keeps strict
/// IEEE semantics per lane while letting the compiler vectorize.
pub(crate) fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (a8, b8) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + a8[l] * b8[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for i in chunks * 8..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// `out[i] += c * x[i]`; element-independent, so it vectorizes freely.
pub(crate) fn axpy<F: Float>(out: &mut [F], c: F, x: &[F]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + c * *v;
    }
}
