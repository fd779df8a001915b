//! Dense row-major `f64` arrays and the handful of kernels the rest of the
//! crate is built on.
//!
//! Every parallel kernel here splits work into fixed-size blocks whose
//! boundaries do not depend on the number of worker threads, and every output
//! element is accumulated in a fixed order. Results are therefore bit-identical
//! whether the surrounding rayon pool has one thread or many.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{HebbError, Result};

/// Output rows handled by one parallel matmul task.
const ROW_BLOCK: usize = 16;
/// Output columns kept hot in cache by the matmul kernel.
const COL_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HebbError::dim(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HebbError::dim("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing axes, i.e. the width of the tensor viewed as a matrix.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// View as `[rows × row_len]`.
    pub fn flatten_rows(self) -> Self {
        let shape = vec![self.rows(), self.row_len()];
        Tensor {
            shape,
            data: self.data,
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Rows `start..end` of the leading axis, copied.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.rows() {
            return Err(HebbError::dim(
                "slice_rows",
                format!("range {start}..{end} outside {} rows", self.rows()),
            ));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * w..end * w].to_vec())
    }

    /// Gathers the listed rows of the leading axis, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(HebbError::dim(
                    "select_rows",
                    format!("row {i} outside {} rows", self.rows()),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub(crate) fn dims2(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(HebbError::dim(context, format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(HebbError::dim(
            "tensor shape",
            format!("extents must be >= 1 with rank >= 1, got {shape:?}"),
        ));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
///
/// Each output element is summed over the inner axis in ascending order, so
/// the result matches a plain triple loop bit for bit and does not depend on
/// the thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(HebbError::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, c)| {
            let r0 = blk * ROW_BLOCK;
            let rows = c.len() / n;
            matmul_block(&ad[r0 * k..(r0 + rows) * k], bd, c, rows, k, n);
        });
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the shape the layers and the learning rule use most.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2("matmul_nt lhs")?;
    let (_, k2) = b.dims2("matmul_nt rhs")?;
    if k != k2 {
        return Err(HebbError::dim(
            "matmul_nt",
            format!("inner extents differ: {:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    matmul(a, &b.transpose()?)
}

/// Serial `c += a[rows×k] · b[k×n]` on raw row-major slices, with the same
/// summation order as [`matmul`].
pub(crate) fn matmul_block(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= rows {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for l in 0..k {
                let x0 = a[i * k + l];
                let x1 = a[(i + 1) * k + l];
                let x2 = a[(i + 2) * k + l];
                let x3 = a[(i + 3) * k + l];
                let brow = &b[l * n + j0..l * n + j1];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += x0 * bv;
                    c1[j] += x1 * bv;
                    c2[j] += x2 * bv;
                    c3[j] += x3 * bv;
                }
            }
            i += 4;
        }
        while i < rows {
            let crow = &mut c[i * n + j0..i * n + j1];
            for l in 0..k {
                let x = a[i * k + l];
                let brow = &b[l * n + j0..l * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += x * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// Winner and k-th ranked index of one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRank {
    pub winner: usize,
    pub kth: usize,
}

/// Ranks every row of a `[batch × units]` tensor.
///
/// Ties are broken toward the lowest index at every rank. `k = 1` makes
/// `winner == kth`.
pub fn rank_rows(values: &Tensor, k: usize) -> Result<Vec<RowRank>> {
    let (_, units) = values.dims2("rank_rows")?;
    if k == 0 || k > units {
        return Err(HebbError::Config(format!(
            "rank k = {k} must satisfy 1 <= k <= units ({units})"
        )));
    }
    Ok(values
        .data()
        .par_chunks(units)
        .map(|row| rank_one(row, k))
        .collect())
}

fn rank_one(row: &[f64], k: usize) -> RowRank {
    // Top-k kept sorted best-first. Scanning in index order means an equal
    // value never displaces an earlier one.
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (idx, &v) in row.iter().enumerate() {
        if top.len() == k && !(v > top[k - 1].0) {
            continue;
        }
        let pos = top.iter().position(|&(tv, _)| v > tv).unwrap_or(top.len());
        top.insert(pos, (v, idx));
        top.truncate(k);
    }
    RowRank {
        winner: top[0].1,
        kth: top[k - 1].1,
    }
}

/// Seeded random stream.
///
/// The generator is ChaCha8 (`rand_chacha`) seeded through `seed_from_u64`;
/// its output is specified independently of platform and word size.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this one's seed and a label.
    pub fn fork(&self, stream: u64) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        RngState {
            seed: self.seed,
            rng,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// I.i.d. standard normal samples; advances `rng`.
pub fn seeded_normal(shape: &[usize], rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2("").unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn identity_and_hand_products() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = RngState::new(7);
        let a = seeded_normal(&[7, 5], &mut rng);
        let b = seeded_normal(&[5, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        // crosses the row and column block edges
        let a = seeded_normal(&[37, 11], &mut rng);
        let b = seeded_normal(&[11, 300], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b));
        assert_eq!(matmul_nt(&a, &b.transpose().unwrap()).unwrap(), naive(&a, &b));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn rank_examples() {
        let t = Tensor::from_rows(&[vec![0.5, 2.0, 1.0, -0.3]]).unwrap();
        assert_eq!(rank_rows(&t, 2).unwrap()[0], RowRank { winner: 1, kth: 2 });
        let t = Tensor::from_rows(&[vec![7.0, 7.0, 1.0]]).unwrap();
        assert_eq!(rank_rows(&t, 2).unwrap()[0], RowRank { winner: 0, kth: 1 });
        let r = rank_rows(&t, 1).unwrap()[0];
        assert_eq!(r.winner, r.kth);
        assert!(matches!(rank_rows(&t, 4), Err(HebbError::Config(_))));
        assert!(matches!(rank_rows(&t, 0), Err(HebbError::Config(_))));
    }

    #[test]
    fn normal_is_seeded() {
        let a = seeded_normal(&[4, 4], &mut RngState::new(1));
        let b = seeded_normal(&[4, 4], &mut RngState::new(1));
        let c = seeded_normal(&[4, 4], &mut RngState::new(2));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn normal_moments() {
        // standard errors for n = 1e5: mean 0.0032, variance ~0.0045
        let t = seeded_normal(&[100_000], &mut RngState::new(42));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
