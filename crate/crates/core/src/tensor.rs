//! Dense row-major tensors and their on-disk encoding.
//!
//! A [`Tensor`] is an immutable value: every operation returns a fresh tensor.
//! Storage precision is a type parameter; `f32` is the working precision and
//! `f64` is used where finite-difference checks need the headroom.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?} ...", &self.data[..16])
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Row-major matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("from_rows", "ragged rows"));
        }
        Self::new(
            [r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                "dims2",
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            assert!(i < e, "index {idx:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        crate::kernels::transpose(&self.data, r, c, &mut out);
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        crate::kernels::gemm_nn(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of range for {r}", start + len),
            ));
        }
        Ok(Tensor::from_parts(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    /// Sub-tensor `index` along the leading axis (drops that axis).
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 || index >= self.shape[0] {
            return Err(Error::invalid(
                "index_outer",
                format!("index {index} invalid for shape {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Writes the tensor in the binary interchange format.
    ///
    /// Layout: 8-byte magic `LANOTNSR`, version byte, dtype byte, rank as
    /// u64 LE, each extent as u64 LE, then the values in little-endian order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(18 + 8 * self.rank() + self.numel() * T::DTYPE.size());
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(TENSOR_VERSION);
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(self.rank() as u64).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut buf);
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one tensor; values stored at the other precision are converted.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 18];
        read_exact(r, &mut head, "tensor header")?;
        if &head[..8] != TENSOR_MAGIC {
            return Err(Error::invalid("tensor decode", "bad magic"));
        }
        if head[8] != TENSOR_VERSION {
            return Err(Error::invalid(
                "tensor decode",
                format!("unsupported version {}", head[8]),
            ));
        }
        let dtype = DType::from_code(head[9])
            .ok_or_else(|| Error::invalid("tensor decode", format!("unknown dtype {}", head[9])))?;
        let rank = u64::from_le_bytes(head[10..18].try_into().unwrap()) as usize;
        if rank > 16 {
            return Err(Error::invalid(
                "tensor decode",
                format!("implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(r, &mut b, "tensor extent")?;
            let e = u64::from_le_bytes(b) as usize;
            numel = numel
                .checked_mul(e)
                .filter(|&n| n < (1 << 40))
                .ok_or_else(|| Error::invalid("tensor decode", "extent overflow"))?;
            shape.push(e);
        }
        // grow with the input rather than trusting the header's extents
        let want = (numel * dtype.size()) as u64;
        let mut raw = Vec::new();
        r.by_ref().take(want).read_to_end(&mut raw)?;
        if raw.len() as u64 != want {
            return Err(Error::invalid(
                "tensor decode",
                format!(
                    "truncated tensor values: expected {want} bytes, found {}",
                    raw.len()
                ),
            ));
        }
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }
}

pub const TENSOR_MAGIC: &[u8; 8] = b"LANOTNSR";
pub const TENSOR_VERSION: u8 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::invalid("tensor decode", format!("truncated {what}"))
        } else {
            Error::Io(e)
        }
    })
}
