use rand::Rng;

use super::Element;
use crate::error::{contract_err, dim_err, Error, Result};

/// Dense row-major n-dimensional array.
///
/// Constructors that take external data reject NaN/Inf; values produced by the
/// crate's own kernels are trusted and checked at public operation boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            );
        }
        let t = Self { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Builds from `f64` literals, converting to `F`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::of(v)).collect())
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.gen_range(lo..hi))).collect();
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of dimension `axis`, counting from the back when negative.
    pub fn dim(&self, axis: isize) -> usize {
        let r = self.shape.len() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        self.shape[a as usize]
    }

    /// The only scalar value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return contract_err("Tensor::item", format!("shape {:?} is not a scalar", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for dimension {d}");
                acc * d + i
            })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    /// `max |self - other|`; panics if the shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Swaps the trailing two dimensions.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return dim_err("transpose", format!("rank {r} < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} is not a permutation of rank {r}"));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&out_shape, &src_strides, |o| data.push(self.data[o]));
        Ok(Self { shape: out_shape, data })
    }

    /// Rows `start..end` of the second-to-last dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (batch, rows, cols) = self.as_matrices("slice_rows")?;
        if start > end || end > rows {
            return dim_err("slice_rows", format!("range {start}..{end} outside {rows} rows"));
        }
        let mut data = Vec::with_capacity(batch * (end - start) * cols);
        for b in 0..batch {
            let base = b * rows * cols;
            data.extend_from_slice(&self.data[base + start * cols..base + end * cols]);
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = end - start;
        Ok(Self { shape, data })
    }

    /// Selected rows (second-to-last dimension), in the given order.
    pub fn gather_rows(&self, rows_idx: &[usize]) -> Result<Self> {
        let (batch, rows, cols) = self.as_matrices("gather_rows")?;
        if let Some(&bad) = rows_idx.iter().find(|&&i| i >= rows) {
            return dim_err("gather_rows", format!("row {bad} outside {rows} rows"));
        }
        let mut data = Vec::with_capacity(batch * rows_idx.len() * cols);
        for b in 0..batch {
            let base = b * rows * cols;
            for &i in rows_idx {
                data.extend_from_slice(&self.data[base + i * cols..base + (i + 1) * cols]);
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = rows_idx.len();
        Ok(Self { shape, data })
    }

    /// Concatenation along the second-to-last dimension.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return contract_err("concat_rows", "no tensors");
        };
        let r = first.rank();
        if r < 2 {
            return dim_err("concat_rows", "rank < 2");
        }
        let cols = first.shape[r - 1];
        let lead = &first.shape[..r - 2];
        let mut total_rows = 0;
        for p in parts {
            if p.rank() != r || &p.shape[..r - 2] != lead || p.shape[r - 1] != cols {
                return dim_err(
                    "concat_rows",
                    format!("{:?} incompatible with {:?}", p.shape, first.shape),
                );
            }
            total_rows += p.shape[r - 2];
        }
        let batch: usize = lead.iter().product();
        let mut data = Vec::with_capacity(batch * total_rows * cols);
        for b in 0..batch {
            for p in parts {
                let n = p.shape[r - 2] * cols;
                data.extend_from_slice(&p.data[b * n..(b + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[r - 2] = total_rows;
        Ok(Self { shape, data })
    }

    /// (batch, rows, cols) view over the trailing two dimensions.
    pub(crate) fn as_matrices(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return dim_err(op, format!("expected rank >= 2, got {:?}", self.shape));
        }
        let batch = self.shape[..r - 2].iter().product();
        Ok((batch, self.shape[r - 2], self.shape[r - 1]))
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Visits, in row-major order of `shape`, the offset `Σ idx[i]·strides[i]`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let r = shape.len();
    if r == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let inner = shape[r - 1];
    let inner_stride = strides[r - 1];
    loop {
        for j in 0..inner {
            f(off + j * inner_stride);
        }
        // advance the outer index
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}
