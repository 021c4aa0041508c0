//! Dense row-major tensor of `f32` values.

use super::NnError;

/// A dense tensor with row-major (last dimension fastest) storage.
///
/// The network code uses rank-4 tensors in N,C,H,W order for activations,
/// rank-4 K,C,Kh,Kw for convolution weights and rank-1 for biases and
/// batch-norm parameters, but the type itself is rank-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// A tensor of the given shape filled with zeros.
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// Builds a tensor from existing data; the element count must match.
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Tensor, NnError> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(NnError::Shape(format!(
                "{} elements do not fill shape {:?} ({} expected)",
                data.len(),
                dims,
                expect
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Shape as a slice, outermost dimension first.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat read-only view of the data.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Flat mutable view of the data.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the tensor and returns its backing storage.
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, dims: &[usize]) -> Result<(), NnError> {
        let expect: usize = dims.iter().product();
        if self.data.len() != expect {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.dims,
                self.data.len(),
                dims,
                expect
            )));
        }
        self.dims = dims.to_vec();
        Ok(())
    }

    /// Convenience accessor for rank-4 tensors.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), NnError> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(NnError::Shape(format!("expected rank 4, got {other:?}"))),
        }
    }

    /// Elementwise `self += other`. Shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NnError> {
        if self.dims != other.dims {
            return Err(NnError::Shape(format!(
                "add of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Returns true when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_has_right_size() {
        let t = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.dims(), &[2, 3, 4, 5]);
        assert_eq!(t.len(), 120);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
        let err = Tensor::from_vec(&[2, 2], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
    }

    #[test]
    fn reshape_preserves_data() {
        let mut t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        t.reshape(&[3, 2]).unwrap();
        assert_eq!(t.dims(), &[3, 2]);
        assert_eq!(t.data()[3], 3.0);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn add_assign_requires_same_shape() {
        let mut a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        a.add_assign(&b).unwrap();
        assert_eq!(a.data(), &[11.0, 22.0]);
        let c = Tensor::zeros(&[3]);
        assert!(a.add_assign(&c).is_err());
    }

    #[test]
    fn empty_tensor() {
        let t = Tensor::zeros(&[0, 4]);
        assert!(t.is_empty());
        assert_eq!(t.len(), 0);
    }
}
