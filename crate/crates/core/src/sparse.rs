//! Constant sparse operands for the autodiff engine.

use crate::par;
use crate::tensor::Tensor;

/// Ragged row → column-id lists in compressed form.
///
/// Used as the gather pattern for attention over attribute sets (`row` = node,
/// `col` = attribute id) and over closed neighbourhoods (`col` = neighbour).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    num_cols: usize,
}

impl Segments {
    pub fn from_lists(lists: &[Vec<usize>], num_cols: usize) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        for l in lists {
            debug_assert!(l.iter().all(|&c| c < num_cols));
            cols.extend_from_slice(l);
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            num_cols,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    /// Total number of (row, col) entries.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn row(&self, row: usize) -> &[usize] {
        &self.cols[self.range(row)]
    }

    pub fn col_at(&self, entry: usize) -> usize {
        self.cols[entry]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Row id of every entry, in entry order.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.num_rows() {
            out.extend(std::iter::repeat_n(r, self.range(r).len()));
        }
        out
    }
}

/// Weighted CSR matrix used as a constant left operand (`A · X`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(col, value)` lists. Entries keep the given order.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            for &(c, v) in r {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            offsets,
            indices,
            values,
        }
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

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut buckets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                buckets[c].push((r, v));
            }
        }
        SparseMatrix::from_rows(self.rows, &buckets)
    }

    /// `self · x` for a dense `x` with `self.cols()` rows.
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        debug_assert_eq!(x.rows(), self.cols);
        let xs = x.data();
        let mut out = vec![0.0; self.rows * d];
        par::for_each_row(&mut out, d, |r, row| {
            for (c, v) in self.row_entries(r) {
                let src = &xs[c * d..(c + 1) * d];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        });
        Tensor::from_vec(self.rows, d, out)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row_entries(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let cur = t.get(r, c);
                t.set(r, c, cur + v);
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_roundtrip_dense() {
        let m = SparseMatrix::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn mul_dense_matches_dense() {
        let m = SparseMatrix::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let want = m.to_dense().matmul(&x).unwrap();
        assert_eq!(m.mul_dense(&x), want);
    }

    #[test]
    fn segments_entry_rows() {
        let s = Segments::from_lists(&[vec![1, 2], vec![], vec![0]], 3);
        assert_eq!(s.entry_rows(), vec![0, 0, 2]);
        assert_eq!(s.row(2), &[0]);
        assert_eq!(s.nnz(), 3);
    }
}
