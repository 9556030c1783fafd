//! Core domain types: dense feature grids, pooled feature vectors and
//! ordered feature blocks. All constructors validate finiteness and shape
//! consistency.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense `channels × height × width` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let tensor = Tensor::new(&[channels, height, width], data)?;
        tensor.ensure_finite("FeatureGrid")?;
        Ok(Self { tensor })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "FeatureGrid::from_tensor",
                expected: vec![0, 0, 0],
                got: tensor.shape().to_vec(),
            });
        }
        tensor.ensure_finite("FeatureGrid")?;
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }
    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }
    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Feature vector at one pixel, over all channels.
    pub fn pixel_vector(&self, y: usize, x: usize) -> Vec<T> {
        let hw = self.pixels();
        let p = y * self.width() + x;
        (0..self.channels()).map(|c| self.tensor.data()[c * hw + p]).collect()
    }

    /// One channel as a `1×H×W` grid.
    pub fn channel(&self, c: usize) -> FeatureGrid<T> {
        let hw = self.pixels();
        let data = self.tensor.data()[c * hw..(c + 1) * hw].to_vec();
        FeatureGrid {
            tensor: Tensor::new(&[1, self.height(), self.width()], data).unwrap(),
        }
    }
}

/// Pooled feature vector of dimension `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T: Scalar> {
    data: Vec<T>,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureVector"));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Ordered set of `K` feature vectors of dimension `C`, stored as `K × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureBlock<T> {
    pub fn new(count: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if count == 0 {
            return Err(Error::EmptySet("FeatureBlock"));
        }
        let tensor = Tensor::new(&[count, dim], data)?;
        tensor.ensure_finite("FeatureBlock")?;
        Ok(Self { tensor })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 2 || tensor.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                context: "FeatureBlock::from_tensor",
                expected: vec![1, 0],
                got: tensor.shape().to_vec(),
            });
        }
        tensor.ensure_finite("FeatureBlock")?;
        Ok(Self { tensor })
    }

    pub fn from_rows(rows: &[FeatureVector<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySet("FeatureBlock::from_rows"));
        }
        let dim = rows[0].dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(Error::ShapeMismatch {
                    context: "FeatureBlock::from_rows",
                    expected: vec![dim],
                    got: vec![r.dim()],
                });
            }
            data.extend_from_slice(r.data());
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn count(&self) -> usize {
        self.tensor.shape()[0]
    }
    pub fn dim(&self) -> usize {
        self.tensor.shape()[1]
    }
    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.dim();
        &self.tensor.data()[i * c..(i + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_non_finite() {
        assert!(FeatureGrid::new(1, 1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn block_requires_at_least_one_row() {
        assert!(FeatureBlock::<f64>::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn pixel_vector_reads_across_channels() {
        let g = FeatureGrid::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.pixel_vector(0, 1), vec![2.0, 4.0]);
    }
}
