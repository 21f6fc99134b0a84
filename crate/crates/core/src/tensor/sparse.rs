use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Matrix;

/// Compressed-sparse-row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            offsets: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::dim(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(Error::contract(format!("non-finite value at ({r}, {c})")));
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            offsets[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..rows {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[s..e], &self.values[s..e])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.rows)
            .flat_map(|r| {
                let (idx, vals) = self.row(r);
                idx.iter().zip(vals).map(move |(&c, &v)| (c, r, v)).collect::<Vec<_>>()
            })
            .collect();
        Self::from_triplets(self.cols, self.rows, triplets).expect("transpose of valid matrix")
    }

    /// Restriction to `rows`, with columns remapped through `col_map`
    /// (`col_map[c] = Some(new_c)` keeps column `c`).
    pub fn submatrix(&self, rows: &[usize], col_map: &[Option<usize>], new_cols: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let (idx, vals) = self.row(r);
            let mut entries: Vec<(usize, f64)> = idx
                .iter()
                .zip(vals)
                .filter_map(|(&c, &v)| col_map[c].map(|nc| (nc, v)))
                .collect();
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                indices.push(c);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols: new_cols,
            offsets,
            indices,
            values,
        }
    }

    /// Sparse-dense product.
    pub fn spmm(&self, d: &Matrix) -> Result<Matrix> {
        if self.cols != d.rows() {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} sparse times {}x{}", self.rows, self.cols, d.rows(), d.cols()),
            ));
        }
        Ok(self.spmm_unchecked(d))
    }

    pub(crate) fn spmm_unchecked(&self, d: &Matrix) -> Matrix {
        let m = d.cols();
        let mut out = Matrix::zeros(self.rows, m);
        if m == 0 {
            return out;
        }
        par::for_each_chunk(out.data_mut(), m, self.nnz() * m, |r, orow| {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, &x) in orow.iter_mut().zip(d.row(c)) {
                    *o += v * x;
                }
            }
        });
        out
    }

    /// `selfᵀ * d`, used to push gradients back through a sparse product.
    pub(crate) fn t_spmm(&self, d: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, d.rows());
        let m = d.cols();
        let mut out = Matrix::zeros(self.cols, m);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let drow = d.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(drow) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// Checks the CSR layout invariants.
    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.rows + 1 || self.offsets[0] != 0 {
            return Err(Error::contract("bad offsets length"));
        }
        for r in 0..self.rows {
            if self.offsets[r] > self.offsets[r + 1] {
                return Err(Error::contract("offsets decrease"));
            }
            let (idx, vals) = self.row(r);
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!("row {r} indices not increasing")));
            }
            if idx.iter().any(|&c| c >= self.cols) || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("row {r} has invalid entries")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_annihilates() {
        let s = SparseMatrix::empty(3, 2);
        let d = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(s.spmm(&d).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn path_adjacency_product() {
        let s = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]).unwrap();
        let d = Matrix::column(vec![1.0, 3.0]);
        assert_eq!(s.spmm(&d).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn duplicates_are_summed() {
        let s = SparseMatrix::from_triplets(1, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).unwrap();
        assert_eq!(s.nnz(), 1);
        assert_eq!(s.get(0, 1), 3.0);
        s.validate().unwrap();
    }

    #[test]
    fn mismatch_is_error() {
        let s = SparseMatrix::empty(2, 3);
        assert!(s.spmm(&Matrix::zeros(2, 1)).is_err());
    }

    fn arb_sparse(max: usize) -> impl Strategy<Value = (SparseMatrix, Matrix)> {
        (1..=max, 1..=max, 1..=4usize).prop_flat_map(|(r, c, m)| {
            (
                proptest::collection::vec((0..r, 0..c, -2.0..2.0f64), 0..(r * c + 1)),
                proptest::collection::vec(-3.0..3.0f64, c * m),
            )
                .prop_map(move |(trip, dense)| {
                    (
                        SparseMatrix::from_triplets(r, c, trip).unwrap(),
                        Matrix::from_vec(c, m, dense).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn spmm_matches_dense((s, d) in arb_sparse(64)) {
            s.validate().unwrap();
            let fast = s.spmm(&d).unwrap();
            let slow = s.to_dense().matmul(&d).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn transposed_spmm_matches_dense((s, d) in arb_sparse(16)) {
            let g = Matrix::filled(s.rows(), d.cols(), 0.5);
            let fast = s.t_spmm(&g);
            let slow = s.to_dense().t_matmul(&g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
