use super::{NnError, Scalar};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::shape("tensor", format!("{len} values for {shape:?}"), data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Rows of a 2-d tensor (the leading dimension for higher ranks).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<(), NnError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(NnError::shape(op, format!("{shape:?}"), format!("{:?}", self.shape)))
        }
    }
}

/// Order-dependent 64-bit FNV-1a digest over the `f64` bit patterns of a
/// parameter list. Used to prove that frozen models are never mutated.
pub fn checksum<'a, T: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            hash = fnv_mix(hash, d as u64);
        }
        for &x in t.data() {
            hash = fnv_mix(hash, x.as_f64().to_bits());
        }
    }
    hash
}

pub(crate) fn fnv_mix(mut hash: u64, word: u64) -> u64 {
    for byte in word.to_le_bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
