//! Dense row-major tensors and the scalar trait shared by the whole crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::TensorError;

/// Storage precision tag, also written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar the engine is generic over. Training runs at `f32`; gradient
/// checks run the identical code at `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;
    fn to_f64_lossless(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size_in_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp` for bulk elementwise use; may trade the last ulp for speed.
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    /// `tanh` for bulk elementwise use; may trade the last ulp for speed.
    #[inline]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    #[inline]
    fn fast_exp(self) -> Self {
        crate::kernels::exp_f32(self)
    }
    #[inline]
    fn fast_tanh(self) -> Self {
        crate::kernels::tanh_f32(self)
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const MAX: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= MAX {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}.. ({} values)", &self.data[..MAX], self.data.len())
        }
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Shape { op: "tensor", msg: format!("extents must be positive, got {shape:?}") });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive: {shape:?}");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossless()).collect()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect() }
    }

    /// Copies the leading sub-block `block` of this tensor, interpreting its
    /// storage as `view` (same element count, e.g. `[E, 3, E]` for a fused
    /// QKV matrix). The result has shape `out_shape`.
    pub fn prefix_block(&self, view: &[usize], block: &[usize], out_shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        check_block(&self.shape, view, block)?;
        let mut out = Vec::with_capacity(block.iter().product());
        for_each_run(view, block, |offset, len| {
            out.extend_from_slice(&self.data[offset..offset + len]);
        });
        Tensor::new(out_shape.to_vec(), out)
    }

    /// Overwrites the leading sub-block `block` (under `view`) with `src`,
    /// which must hold exactly `product(block)` values in row-major order.
    pub fn write_prefix_block(&mut self, view: &[usize], block: &[usize], src: &[T]) -> Result<(), TensorError> {
        check_block(&self.shape, view, block)?;
        if src.len() != block.iter().product::<usize>() {
            return Err(TensorError::Shape {
                op: "write_prefix_block",
                msg: format!("block {block:?} needs {} values, got {}", block.iter().product::<usize>(), src.len()),
            });
        }
        let mut cursor = 0;
        let data = &mut self.data;
        for_each_run(view, block, |offset, len| {
            data[offset..offset + len].copy_from_slice(&src[cursor..cursor + len]);
            cursor += len;
        });
        Ok(())
    }
}

fn check_block(shape: &[usize], view: &[usize], block: &[usize]) -> Result<(), TensorError> {
    let numel: usize = shape.iter().product();
    if view.iter().product::<usize>() != numel
        || view.len() != block.len()
        || view.iter().zip(block).any(|(&v, &b)| b == 0 || b > v)
    {
        return Err(TensorError::Range {
            op: "prefix_block",
            msg: format!("block {block:?} is not a prefix of view {view:?} over shape {shape:?}"),
        });
    }
    Ok(())
}

/// Visits the contiguous innermost runs of a prefix block, in row-major order,
/// as `(flat_offset, run_length)`.
pub(crate) fn for_each_run(view: &[usize], block: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = view.len();
    if rank == 0 {
        f(0, 1);
        return;
    }
    let mut strides = vec![1usize; rank];
    for axis in (0..rank - 1).rev() {
        strides[axis] = strides[axis + 1] * view[axis + 1];
    }
    let run = block[rank - 1];
    let outer = &block[..rank - 1];
    let count: usize = outer.iter().product();
    let mut index = vec![0usize; rank - 1];
    for _ in 0..count {
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(offset, run);
        for axis in (0..rank - 1).rev() {
            index[axis] += 1;
            if index[axis] < outer[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
}
