use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of named tensors. Model weights, gradients, LoRA
/// adapters and optimizer moments all use this representation, so every
/// vector-space operation is defined once here.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradients share the layout of the parameter set they were taken against.
pub type GradientVec = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch("parameter names differ".into()));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Global L2 norm across all arrays.
    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += factor * y);
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_congruent(other)?;
        let mut out = self.clone();
        for (a, b) in out.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
        }
        Ok(out)
    }

    /// Maximum absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Order-sensitive FNV-1a digest over the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for x in &t.data {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Mutable views of two distinct arrays, `i < j`.
    pub(crate) fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert!(i < j);
        let (lo, hi) = self.tensors.split_at_mut(j);
        (lo[i].data_mut(), hi[0].data_mut())
    }

    /// Flat index over all entries, in array order.
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.len() {
                return t.data[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for t in &mut self.tensors {
            if index < t.len() {
                t.data[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (ParamSet, ParamSet) {
        let mut a = ParamSet::new();
        a.push("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        a.push("b", Tensor::from_vec(&[1], vec![-1.0]).unwrap());
        let mut b = a.zeros_like();
        b.tensor_mut(0).data_mut()[3] = 2.0;
        b.tensor_mut(1).data_mut()[0] = 1.0;
        (a, b)
    }

    #[test]
    fn vector_ops() {
        let (a, b) = pair();
        assert_eq!(a.dot(&b).unwrap(), 7.0);
        assert_eq!(a.sq_norm(), 31.0);
        let d = a.sub(&b).unwrap();
        assert_eq!(d.flat_get(3), 2.0);
        assert_eq!(d.flat_get(4), -2.0);
        assert_eq!(a.numel(), 5);
    }

    #[test]
    fn incongruent_sets_are_rejected() {
        let (a, _) = pair();
        let mut c = ParamSet::new();
        c.push("w", Tensor::zeros(&[4]));
        c.push("b", Tensor::zeros(&[1]));
        assert!(matches!(a.dot(&c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn checksum_tracks_bits() {
        let (a, _) = pair();
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.flat_set(0, 1.0 + f64::EPSILON);
        assert_ne!(a.checksum(), b.checksum());
    }
}
