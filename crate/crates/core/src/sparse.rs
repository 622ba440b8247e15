//! Compressed sparse row storage with a shared pattern, so that several
//! value arrays (per-subdomain blocks, combined operators) can live on one
//! sparsity structure.

use std::sync::Arc;

use rayon::prelude::*;

/// Rows shorter than this are multiplied sequentially.
const PAR_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
}

impl CsrPattern {
    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    /// Position of `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col[s..e].binary_search(&j).ok().map(|k| s + k)
    }

    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: Arc<CsrPattern>, values: Vec<f64>) -> Self {
        assert_eq!(pattern.nnz(), values.len());
        Self { pattern, values }
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// `y = A x`; row results are independent so the output does not depend
    /// on the thread count.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &*self.pattern;
        debug_assert_eq!(x.len(), p.ncols);
        debug_assert_eq!(y.len(), p.nrows);
        let row = |i: usize| -> f64 {
            let mut s = 0.0;
            for k in p.row(i) {
                s += self.values[k] * x[p.col[k]];
            }
            s
        };
        if p.nrows >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = row(i);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.pattern.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    /// `xᵀ A y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.matvec(y))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let p = &*self.pattern;
        let mut d = nalgebra::DMatrix::zeros(p.nrows, p.ncols);
        for i in 0..p.nrows {
            for k in p.row(i) {
                d[(i, p.col[k])] += self.values[k];
            }
        }
        d
    }
}

/// Sub-block of a square pattern selected by row and column index lists,
/// with a gather map back into the parent value array.
#[derive(Debug, Clone)]
pub struct Submatrix {
    pub pattern: Arc<CsrPattern>,
    pub source: Vec<usize>,
}

impl Submatrix {
    /// `col_index[j]` is the local column of parent column `j`, if kept.
    pub fn extract(parent: &CsrPattern, rows: &[usize], col_index: &[Option<usize>], ncols: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col = Vec::new();
        let mut source = Vec::new();
        row_ptr.push(0);
        for &i in rows {
            let mut entries: Vec<(usize, usize)> = parent
                .row(i)
                .filter_map(|k| col_index[parent.col[k]].map(|c| (c, k)))
                .collect();
            entries.sort_unstable();
            for (c, k) in entries {
                col.push(c);
                source.push(k);
            }
            row_ptr.push(col.len());
        }
        Self {
            pattern: Arc::new(CsrPattern { nrows: rows.len(), ncols, row_ptr, col }),
            source,
        }
    }

    pub fn gather(&self, parent_values: &[f64]) -> CsrMatrix {
        CsrMatrix::new(self.pattern.clone(), self.source.iter().map(|&k| parent_values[k]).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
