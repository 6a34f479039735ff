//! Compressed sparse row matrices for constant operands (normalized
//! adjacency, one-hot features).

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    pub fn from_dense(m: &Array2<f64>) -> Csr {
        let mut b = CsrBuilder::new(m.ncols());
        for row in m.outer_iter() {
            b.push_row(row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j, v)));
        }
        b.finish()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] = self.data[k];
            }
        }
        out
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.ncols, b.nrows(), "csr matmul: inner dimensions differ");
        let mut out = Array2::zeros((self.nrows, b.ncols()));
        for r in 0..self.nrows {
            let mut dst = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                dst.scaled_add(self.data[k], &b.row(self.indices[k]));
            }
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn transpose_matmul(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.nrows, g.nrows(), "csr transpose matmul: inner dimensions differ");
        let mut out = Array2::zeros((self.ncols, g.ncols()));
        for r in 0..self.nrows {
            let src = g.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[k]).scaled_add(self.data[k], &src);
            }
        }
        out
    }
}

/// Row-by-row construction, used to assemble block-diagonal matrices.
#[derive(Debug)]
pub struct CsrBuilder {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(ncols: usize) -> Self {
        CsrBuilder {
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, v) in entries {
            debug_assert!(j < self.ncols);
            self.indices.push(j);
            self.data.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn finish(self) -> Csr {
        Csr {
            nrows: self.indptr.len() - 1,
            ncols: self.ncols,
            indptr: self.indptr,
            indices: self.indices,
            data: self.data,
        }
    }
}
