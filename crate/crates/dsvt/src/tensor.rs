//! Dense row-major float tensor, the carrier for features and attention
//! intermediates.

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FeatureTensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Wrap an existing buffer. Fails if the buffer length does not match
    /// the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Contract(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Length of the last axis (the innermost contiguous run).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Contiguous row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Contiguous innermost row `(b, t)` of a rank-3 tensor.
    pub fn row3(&self, b: usize, t: usize) -> &[f32] {
        debug_assert_eq!(self.shape.len(), 3);
        let (tt, c) = (self.shape[1], self.shape[2]);
        let base = (b * tt + t) * c;
        &self.data[base..base + c]
    }

    pub fn row3_mut(&mut self, b: usize, t: usize) -> &mut [f32] {
        debug_assert_eq!(self.shape.len(), 3);
        let (tt, c) = (self.shape[1], self.shape[2]);
        let base = (b * tt + t) * c;
        &mut self.data[base..base + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_buffer() {
        assert!(FeatureTensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(FeatureTensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_views_are_contiguous() {
        let t = FeatureTensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        let t3 = FeatureTensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t3.row3(1, 0), &[4.0, 5.0]);
    }
}
