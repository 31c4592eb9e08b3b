use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Dense row-major array of f64 values. The plain value type flowing through
/// the pipeline; gradient tracking lives in [`crate::tensor::Tape`] and
/// parameter storage in [`crate::tensor::Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "array shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    /// Seeded Gaussian init with the given mean and standard deviation.
    pub fn randn(shape: &[usize], mean: f64, std: f64, r: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * rng::normal(r)).collect();
        Array { shape: shape.to_vec(), data }
    }

    /// Seeded uniform init on [-limit, limit].
    pub fn rand_uniform(shape: &[usize], limit: f64, r: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-limit..=limit)).collect();
        Array { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank-2 array, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::Shape(format!("expected rank-3 array, got {:?}", self.shape))),
        }
    }

    /// Value at (row, col) of a rank-2 array. Test convenience, not a hot path.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
