//! Dense row-major tensors in 64-bit floats.
//!
//! Everything in the training path computes in f64; 32-bit storage exists
//! only as a checkpoint option (see `checkpoint`).

use crate::{Error, Result};

/// Dense tensor: a shape and a row-major data buffer.
///
/// Constructors enforce `data.len() == shape.iter().product()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Batch size under the `[n, ...]` convention.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch entry.
    pub fn per_sample(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string(), step: None })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// self + scale * other, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Row `i` of a `[n, m]` tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.per_sample();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let m = self.per_sample();
        &mut self.data[i * m..(i + 1) * m]
    }

    /// Concatenate along the channel axis (dim 1). Shapes must agree elsewhere.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != other.shape.len()
            || self.shape.len() < 2
            || self.shape[0] != other.shape[0]
            || self.shape[2..] != other.shape[2..]
        {
            return Err(Error::ShapeMismatch {
                context: "concat_channels".into(),
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let n = self.shape[0];
        let (ca, cb) = (self.shape[1], other.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut shape = self.shape.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(n * (ca + cb) * inner);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&other.data[i * cb * inner..(i + 1) * cb * inner]);
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of `concat_channels`: split off the first `c_front` channels.
    pub fn split_channels(&self, c_front: usize) -> Result<(Tensor, Tensor)> {
        if self.shape.len() < 2 || self.shape[1] < c_front {
            return Err(Error::ShapeMismatch {
                context: "split_channels".into(),
                detail: format!("cannot split {} channels off {:?}", c_front, self.shape),
            });
        }
        let n = self.shape[0];
        let c = self.shape[1];
        let c_back = c - c_front;
        let inner: usize = self.shape[2..].iter().product();
        let mut front = Vec::with_capacity(n * c_front * inner);
        let mut back = Vec::with_capacity(n * c_back * inner);
        for i in 0..n {
            let base = i * c * inner;
            front.extend_from_slice(&self.data[base..base + c_front * inner]);
            back.extend_from_slice(&self.data[base + c_front * inner..base + c * inner]);
        }
        let mut fs = self.shape.clone();
        fs[1] = c_front;
        let mut bs = self.shape.clone();
        bs[1] = c_back;
        Ok((Tensor { shape: fs, data: front }, Tensor { shape: bs, data: back }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.batch(), 2);
        assert_eq!(t.per_sample(), 3);
    }

    #[test]
    #[should_panic]
    fn constructor_rejects_bad_length() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::new(vec![2, 1, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = Tensor::new(vec![2, 2, 2, 2], (8..24).map(|v| v as f64).collect());
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape, vec![2, 3, 2, 2]);
        let (fa, fb) = cat.split_channels(1).unwrap();
        assert_eq!(fa, a);
        assert_eq!(fb, b);
    }

    #[test]
    fn finite_check_reports_context() {
        let mut t = Tensor::zeros(&[2]);
        t.data[1] = f64::NAN;
        let err = t.check_finite("unit").unwrap_err();
        assert!(err.to_string().contains("unit"));
    }
}
