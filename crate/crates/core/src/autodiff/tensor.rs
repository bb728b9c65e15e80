use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// A learnable parameter: a tensor value plus the gradient populated by the
/// most recent backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grad
            .as_ref()
            .map(|g| g.iter().map(|v| v * v).sum())
            .unwrap_or(0.0)
    }
}

/// An ordered, named collection of parameters.
///
/// Names are fully qualified (`perception.conv1.weight`) so that several sets
/// can share one checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<DiffTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(DiffTensor::new(value));
        self.tensors.len() - 1
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

    pub fn get(&self, idx: usize) -> &DiffTensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut DiffTensor {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&DiffTensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut DiffTensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[DiffTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DiffTensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DiffTensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Order-sensitive 64-bit FNV-1a digest over the exact bit patterns of
    /// every value.
    pub fn checksum(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for t in &self.tensors {
            for v in t.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(PRIME);
                }
            }
        }
        h
    }
}
