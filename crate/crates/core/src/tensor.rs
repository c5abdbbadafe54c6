//! Dense row-major arrays and the handful of operations the attention code
//! is built from.

use std::fmt;

use crate::error::{shape_err, Result};
use crate::ledger::Charge;
use crate::rng::Rng;
use crate::Scalar;

/// Contiguous row-major array. Buffers allocated while a ledger is active
/// are charged to it for their whole lifetime.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    _charge: Option<Charge>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let charge = Charge::acquire(data.len() * T::PRECISION.bytes());
        Self {
            shape,
            data,
            _charge: charge,
        }
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |k| if k / n == k % n { T::one() } else { T::zero() },
        )
    }

    /// Standard normal entries.
    pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Self {
        Self::from_fn(shape, |_| rng.normal_as())
    }

    /// Normal entries with standard deviation `std`.
    pub fn gaussian_scaled(rng: &mut Rng, shape: &[usize], std: f64) -> Self {
        Self::from_fn(shape, |_| T::of(rng.normal() * std))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Size of the final axis (1 for a scalar tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
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

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        let mut this = self;
        std::mem::take(&mut this.data)
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * T::PRECISION.bytes()
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for axis of size {n}");
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// Contiguous slice of the final axis at the given leading index.
    pub fn lane(&self, leading: &[usize]) -> &[T] {
        assert_eq!(leading.len() + 1, self.shape.len(), "lane rank");
        let w = self.last_dim();
        let start = leading.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for axis of size {n}");
            acc * n + i
        }) * w;
        &self.data[start..start + w]
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        let mut this = self;
        this.shape = shape.to_vec();
        Ok(this)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err!("compare: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Moves axis 0 and axis 1 past each other: `[a, b, rest..] -> [b, a, rest..]`.
    pub fn swap_leading(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(shape_err!(
                "swap_leading needs rank >= 2, got {:?}",
                self.shape
            ));
        }
        let (a, b) = (self.shape[0], self.shape[1]);
        let w: usize = self.shape[2..].iter().product();
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..b {
            for i in 0..a {
                let start = (i * b + j) * w;
                out.extend_from_slice(&self.data[start..start + w]);
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(0, 1);
        Ok(Self::from_parts(shape, out))
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        )
    }
}

/// Standard matrix product of `[m, k] x [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err!("matmul: {:?} x {:?}", a.shape, b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.data[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with per-row max subtraction. Works on the last axis
/// of a tensor of any rank.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.last_dim();
    let mut out = x.data.clone();
    if w > 0 {
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Affine map over the last axis: `x[.., in] · w[in, out] + bias[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || bias.rank() != 1 {
        return Err(shape_err!(
            "linear: weight {:?} must be 2-D and bias {:?} 1-D",
            w.shape,
            bias.shape
        ));
    }
    let (din, dout) = (w.shape[0], w.shape[1]);
    if x.rank() == 0 || x.last_dim() != din || bias.shape[0] != dout {
        return Err(shape_err!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape,
            w.shape,
            bias.shape
        ));
    }
    let rows: usize = x.shape[..x.rank() - 1].iter().product();
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        out.extend_from_slice(&bias.data);
        let orow = &mut out[r * dout..(r + 1) * dout];
        for (p, &xp) in x.data[r * din..(r + 1) * din].iter().enumerate() {
            if xp == T::zero() {
                continue;
            }
            for (o, &wpj) in orow.iter_mut().zip(&w.data[p * dout..(p + 1) * dout]) {
                *o += xp * wpj;
            }
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("rank >= 1") = dout;
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenates along the final axis; all leading dimensions must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat_last: no inputs"))?;
    let lead = &first.shape[..first.rank().saturating_sub(1)];
    for p in parts {
        if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
            return Err(shape_err!(
                "concat_last: {:?} vs {:?}",
                first.shape,
                p.shape
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Splits the final axis into consecutive pieces of the given sizes.
pub fn split_last<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let w = x.last_dim();
    if x.rank() == 0 || sizes.iter().sum::<usize>() != w {
        return Err(shape_err!(
            "split_last: sizes {sizes:?} do not sum to last axis of {:?}",
            x.shape
        ));
    }
    let lead = &x.shape[..x.rank() - 1];
    let rows: usize = lead.iter().product();
    let mut bufs: Vec<Vec<T>> = sizes
        .iter()
        .map(|&s| Vec::with_capacity(rows * s))
        .collect();
    for r in 0..rows {
        let mut start = r * w;
        for (buf, &s) in bufs.iter_mut().zip(sizes) {
            buf.extend_from_slice(&x.data[start..start + s]);
            start += s;
        }
    }
    Ok(bufs
        .into_iter()
        .zip(sizes)
        .map(|(buf, &s)| {
            let mut shape = lead.to_vec();
            shape.push(s);
            Tensor::from_parts(shape, buf)
        })
        .collect())
}
