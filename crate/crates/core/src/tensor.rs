use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
///
/// Invariant: `shape.iter().product() == data.len()` and every dimension
/// is at least 1. Constructors enforce this; shape errors surface as
/// `Error::Shape` instead of panics so callers can report context.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must all be >= 1, got {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expect} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-filled tensor. Panics on an invalid shape; use only with shapes
    /// derived from already-validated tensors.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d >= 1), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// True when every element is finite (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing values `==` cannot (NaN, -0.0).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-wise argmax of a [N, C] tensor; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let [n, c] = two_d(logits, "argmax_rows")?;
    let mut out = Vec::with_capacity(n);
    for row in logits.data().chunks_exact(c) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Row-wise softmax of a [N, C] tensor, with max subtraction for stability.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = two_d(logits, "softmax_rows")?;
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Tensor::new(logits.shape().to_vec(), data)
}

fn two_d(t: &Tensor, op: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, c] => Ok([n, c]),
        _ => Err(Error::Shape(format!("{op} expects a [N, C] tensor, got {:?}", t.shape()))),
    }
}
