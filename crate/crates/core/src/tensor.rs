//! Dense tensors, tensor maps and the map arithmetic every fusion algorithm
//! is built from.
//!
//! Storage is a contiguous little-endian byte buffer tagged with a [`DType`].
//! All arithmetic widens to `f64`, accumulates there, and narrows back to the
//! dtype of the first operand on store (round-to-nearest-even for floats).

use std::borrow::Borrow;
use std::collections::btree_map;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use half::{bf16, f16};
use thiserror::Error;

use crate::linalg::{self, Matrix};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("key sets differ: only in left {only_left:?}, only in right {only_right:?}")]
    KeyMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },
    #[error("shape mismatch for `{key}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        key: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("scalar {0} is not finite")]
    NonFiniteScalar(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("operand has zero norm")]
    ZeroNorm,
    #[error("expected a rank-2 tensor, got shape {0:?}")]
    NotRank2(Vec<usize>),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("SVD did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("buffer of {found} bytes does not match shape {shape:?} with dtype {dtype}")]
    BufferSize {
        dtype: DType,
        shape: Vec<usize>,
        found: usize,
    },
}

/// Element type tag of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    U8,
    I64,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::F64,
        DType::F32,
        DType::F16,
        DType::BF16,
        DType::U8,
        DType::I64,
    ];

    pub fn byte_width(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
            DType::U8 => 1,
        }
    }

    /// Name used in safetensors headers.
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::U8 => "U8",
            DType::I64 => "I64",
        }
    }

    pub fn parse(name: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.as_str() == name)
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::U8 | DType::I64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    /// Wraps a raw little-endian buffer, checking its length against the shape.
    pub fn from_raw(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        let expected = numel_of(&shape).and_then(|n| n.checked_mul(dtype.byte_width()));
        if expected != Some(data.len()) {
            return Err(TensorError::BufferSize {
                dtype,
                shape,
                found: data.len(),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Encodes `values` into `dtype`. Floats round to nearest-even; integer
    /// dtypes round to nearest and saturate.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        let n = numel_of(&shape).unwrap_or(usize::MAX);
        if n != values.len() {
            return Err(TensorError::LengthMismatch {
                expected: n,
                found: values.len(),
            });
        }
        let mut data = Vec::with_capacity(n * dtype.byte_width());
        for &v in values {
            encode_into(dtype, v, &mut data);
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self, TensorError> {
        let n = numel_of(&shape).unwrap_or(usize::MAX);
        if n != values.len() {
            return Err(TensorError::LengthMismatch {
                expected: n,
                found: values.len(),
            });
        }
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Tensor {
            dtype: DType::F32,
            shape,
            data,
        })
    }

    pub fn from_i64(shape: Vec<usize>, values: &[i64]) -> Result<Self, TensorError> {
        let n = numel_of(&shape).unwrap_or(usize::MAX);
        if n != values.len() {
            return Err(TensorError::LengthMismatch {
                expected: n,
                found: values.len(),
            });
        }
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Tensor {
            dtype: DType::I64,
            shape,
            data,
        })
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = numel_of(&shape).expect("shape overflows usize");
        Tensor {
            dtype,
            data: vec![0u8; n * dtype.byte_width()],
            shape,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.dtype, self.shape.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.byte_width()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    /// Widens every element to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let w = self.dtype.byte_width();
        self.data
            .chunks_exact(w)
            .map(|c| decode(self.dtype, c))
            .collect()
    }

    pub fn to_i64_vec(&self) -> Vec<i64> {
        match self.dtype {
            DType::I64 => self
                .data
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            _ => self.to_f64_vec().into_iter().map(|v| v as i64).collect(),
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Tensor::from_f64(dtype, self.shape.clone(), &self.to_f64_vec())
            .expect("same element count")
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.to_f64_vec().into_iter().map(f).collect();
        Tensor::from_f64(self.dtype, self.shape.clone(), &out).expect("same element count")
    }

    /// Views a rank-2 tensor as an `f64` matrix.
    pub fn to_matrix(&self) -> Result<Matrix, TensorError> {
        match self.shape.as_slice() {
            &[rows, cols] => Ok(Matrix::from_vec(rows, cols, self.to_f64_vec())),
            other => Err(TensorError::NotRank2(other.to_vec())),
        }
    }

    pub fn from_matrix(dtype: DType, m: &Matrix) -> Tensor {
        Tensor::from_f64(dtype, vec![m.rows(), m.cols()], m.as_slice()).expect("matrix size")
    }
}

fn decode(dtype: DType, c: &[u8]) -> f64 {
    match dtype {
        DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
        DType::F16 => f16::from_le_bytes(c.try_into().unwrap()).to_f64(),
        DType::BF16 => bf16::from_le_bytes(c.try_into().unwrap()).to_f64(),
        DType::U8 => c[0] as f64,
        DType::I64 => i64::from_le_bytes(c.try_into().unwrap()) as f64,
    }
}

fn encode_into(dtype: DType, v: f64, out: &mut Vec<u8>) {
    match dtype {
        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        DType::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
        DType::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
        // `as` saturates and maps NaN to zero
        DType::U8 => out.push(v.round() as u8),
        DType::I64 => out.extend_from_slice(&(v.round() as i64).to_le_bytes()),
    }
}

/// Named tensors with lexicographic key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(key.into(), tensor)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor> {
        self.entries.remove(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Keeps only the listed keys.
    pub fn select<'a>(&self, keys: impl IntoIterator<Item = &'a str>) -> TensorMap {
        keys.into_iter()
            .filter_map(|k| self.entries.get(k).map(|t| (k.to_string(), t.clone())))
            .collect()
    }

    pub fn zeros_like(&self) -> TensorMap {
        self.iter().map(|(k, t)| (k.clone(), t.zeros_like())).collect()
    }

    /// Concatenates every tensor, in key order, into one `f64` vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend(t.to_f64_vec());
        }
        out
    }

    /// Inverse of [`TensorMap::flatten`] using `self` as the layout template.
    pub fn unflatten_like(&self, values: &[f64]) -> Result<TensorMap, TensorError> {
        if values.len() != self.numel() {
            return Err(TensorError::LengthMismatch {
                expected: self.numel(),
                found: values.len(),
            });
        }
        let mut out = TensorMap::new();
        let mut offset = 0;
        for (k, t) in self.iter() {
            let n = t.numel();
            out.insert(
                k.clone(),
                Tensor::from_f64(t.dtype(), t.shape().to_vec(), &values[offset..offset + n])?,
            );
            offset += n;
        }
        Ok(out)
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap {
            entries: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Tensor);
    type IntoIter = btree_map::IntoIter<String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}

impl<'a> IntoIterator for &'a TensorMap {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Checks that two maps share keys and per-key shapes.
pub fn check_compatible(a: &TensorMap, b: &TensorMap) -> Result<(), TensorError> {
    let ka: BTreeSet<&str> = a.keys().collect();
    let kb: BTreeSet<&str> = b.keys().collect();
    if ka != kb {
        return Err(TensorError::KeyMismatch {
            only_left: ka.difference(&kb).map(|s| s.to_string()).collect(),
            only_right: kb.difference(&ka).map(|s| s.to_string()).collect(),
        });
    }
    for (k, ta) in a.iter() {
        let tb = &b.entries[k];
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                key: k.clone(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn zip_map(
    a: &TensorMap,
    b: &TensorMap,
    f: impl Fn(f64, f64) -> f64,
) -> Result<TensorMap, TensorError> {
    check_compatible(a, b)?;
    let mut out = TensorMap::new();
    for (k, ta) in a.iter() {
        let va = ta.to_f64_vec();
        let vb = b.entries[k].to_f64_vec();
        let v: Vec<f64> = va.iter().zip(&vb).map(|(&x, &y)| f(x, y)).collect();
        out.insert(k.clone(), Tensor::from_f64(ta.dtype(), ta.shape().to_vec(), &v)?);
    }
    Ok(out)
}

pub fn map_add(a: &TensorMap, b: &TensorMap) -> Result<TensorMap, TensorError> {
    zip_map(a, b, |x, y| x + y)
}

pub fn map_sub(a: &TensorMap, b: &TensorMap) -> Result<TensorMap, TensorError> {
    zip_map(a, b, |x, y| x - y)
}

pub fn map_scale(a: &TensorMap, c: f64) -> Result<TensorMap, TensorError> {
    if !c.is_finite() {
        return Err(TensorError::NonFiniteScalar(c));
    }
    Ok(a.iter().map(|(k, t)| (k.clone(), t.map_values(|v| v * c))).collect())
}

/// Divides every element by `n` directly rather than multiplying by `1/n`.
pub fn map_div_scalar(a: &TensorMap, n: f64) -> Result<TensorMap, TensorError> {
    if n == 0.0 {
        return Err(TensorError::DivisionByZero);
    }
    if !n.is_finite() {
        return Err(TensorError::NonFiniteScalar(n));
    }
    Ok(a.iter().map(|(k, t)| (k.clone(), t.map_values(|v| v / n))).collect())
}

/// `Σ coeffs[i] · maps[i]`, accumulated in `f64` in list order and stored in
/// the dtype of `maps[0]`.
pub fn map_linear_combination<M: Borrow<TensorMap>>(
    maps: &[M],
    coeffs: &[f64],
) -> Result<TensorMap, TensorError> {
    if maps.len() != coeffs.len() {
        return Err(TensorError::LengthMismatch {
            expected: maps.len(),
            found: coeffs.len(),
        });
    }
    let Some(first) = maps.first() else {
        return Err(TensorError::LengthMismatch {
            expected: 1,
            found: 0,
        });
    };
    let first = first.borrow();
    for m in &maps[1..] {
        check_compatible(first, m.borrow())?;
    }
    if let Some(&c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(TensorError::NonFiniteScalar(c));
    }
    let mut out = TensorMap::new();
    for (k, t0) in first.iter() {
        let mut acc = vec![0.0f64; t0.numel()];
        for (m, &c) in maps.iter().zip(coeffs) {
            let vals = m.borrow().entries[k].to_f64_vec();
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += c * v;
            }
        }
        out.insert(k.clone(), Tensor::from_f64(t0.dtype(), t0.shape().to_vec(), &acc)?);
    }
    Ok(out)
}

/// Sum of elementwise products over all keys.
pub fn flat_dot(a: &TensorMap, b: &TensorMap) -> Result<f64, TensorError> {
    check_compatible(a, b)?;
    let mut acc = 0.0f64;
    for (k, ta) in a.iter() {
        let vb = b.entries[k].to_f64_vec();
        for (x, y) in ta.to_f64_vec().into_iter().zip(vb) {
            acc += x * y;
        }
    }
    Ok(acc)
}

pub fn flat_norm(a: &TensorMap) -> f64 {
    a.iter()
        .flat_map(|(_, t)| t.to_f64_vec())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn cosine_similarity(a: &TensorMap, b: &TensorMap) -> Result<f64, TensorError> {
    let dot = flat_dot(a, b)?;
    let (na, nb) = (flat_norm(a), flat_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

/// Thin singular value decomposition `m = U · diag(S) · Vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

/// Thin SVD of a rank-2 tensor; factors are returned as `F64` tensors.
pub fn svd_2d(m: &Tensor) -> Result<Svd, TensorError> {
    let mat = m.to_matrix()?;
    if mat.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteInput);
    }
    let dec = linalg::svd(&mat).map_err(|linalg::NoConvergence(sweeps)| TensorError::NoConvergence(sweeps))?;
    Ok(Svd {
        u: Tensor::from_matrix(DType::F64, &dec.u),
        s: dec.s,
        vt: Tensor::from_matrix(DType::F64, &dec.vt),
    })
}
