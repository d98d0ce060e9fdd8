//! Compressed sparse row matrices with deterministic triplet assembly.
//!
//! Determinism matters here: report bytes must reproduce across runs and
//! thread counts, so duplicate triplets are combined in insertion order
//! (stable sort by coordinates) and reductions never depend on scheduling.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

/// Triplet accumulator. `push` order is preserved within each (row, col)
/// group, so entry sums are bitwise reproducible.
#[derive(Debug, Default, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    pub fn build(mut self) -> Csr {
        // Stable: preserves push order inside each coordinate group.
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut it = self.entries.iter().peekable();
        while let Some(&(r, c, v)) = it.next() {
            let mut sum = v;
            while let Some(&&(r2, c2, v2)) = it.peek() {
                if r2 == r && c2 == c {
                    sum += v2;
                    it.next();
                } else {
                    break;
                }
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(sum);
        }
        for r in 0..self.nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, vals }
    }
}

impl Csr {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// y = A·x. Row-parallel; each row's dot product is sequential, so the
    /// result is independent of the worker count.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        let row_ptr = &self.row_ptr;
        let col_idx = &self.col_idx;
        let vals = &self.vals;
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut acc = 0.0;
            for k in row_ptr[r]..row_ptr[r + 1] {
                acc += vals[k] * x[col_idx[k]];
            }
            *yr = acc;
        });
    }

    pub fn mul_vec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec(x, &mut y);
        y
    }

    /// Exact structural transpose (entry values copied bitwise).
    pub fn transpose(&self) -> Csr {
        let mut b = TripletBuilder::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                b.push(c, r, v);
            }
        }
        b.build()
    }

    /// max |A − Aᵀ| over all entries.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            let (ca, va) = self.row(r);
            let (cb, vb) = t.row(r);
            // Merge the two sorted rows.
            let (mut i, mut j) = (0, 0);
            while i < ca.len() || j < cb.len() {
                if j >= cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                    worst = worst.max(va[i].abs());
                    i += 1;
                } else if i >= ca.len() || cb[j] < ca[i] {
                    worst = worst.max(vb[j].abs());
                    j += 1;
                } else {
                    worst = worst.max((va[i] - vb[j]).abs());
                    i += 1;
                    j += 1;
                }
            }
        }
        worst
    }

    /// (A + Aᵀ)/2 for a square matrix.
    pub fn symmetric_part(&self) -> Csr {
        assert_eq!(self.nrows, self.ncols);
        let mut b = TripletBuilder::new(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                b.push(r, c, 0.5 * v);
                b.push(c, r, 0.5 * v);
            }
        }
        b.build()
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|r| self.get(r, r)).collect()
    }

    /// Coordinate text export: one `row col value` line per stored entry.
    pub fn write_coo_text<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.17e}", r, c, v)?;
            }
        }
        Ok(())
    }
}

/// Deterministic dot product: fixed-size chunks reduced in index order, so
/// the value does not depend on the rayon worker count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    const CHUNK: usize = 4096;
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_dedups_and_orders() {
        let mut b = TripletBuilder::new(3, 3);
        b.push(2, 1, 1.0);
        b.push(0, 0, 2.0);
        b.push(2, 1, 0.5);
        b.push(0, 2, -1.0);
        let m = b.build();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(0, 2), -1.0);
        assert_eq!(m.get(2, 1), 1.5);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn matvec_matches_dense() {
        let mut b = TripletBuilder::new(2, 3);
        b.push(0, 0, 1.0);
        b.push(0, 2, 3.0);
        b.push(1, 1, -2.0);
        let m = b.build();
        let y = m.mul_vec_alloc(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![10.0, -4.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut b = TripletBuilder::new(3, 2);
        b.push(0, 1, 4.0);
        b.push(2, 0, -1.5);
        let m = b.build();
        let t = m.transpose();
        assert_eq!(t.get(1, 0), 4.0);
        assert_eq!(t.get(0, 2), -1.5);
        let back = t.transpose();
        assert_eq!(back.get(0, 1), 4.0);
        assert_eq!(back.get(2, 0), -1.5);
    }

    #[test]
    fn asymmetry_detects_and_clears() {
        let mut b = TripletBuilder::new(2, 2);
        b.push(0, 1, 1.0);
        b.push(1, 0, 1.0);
        assert_eq!(b.clone().build().asymmetry(), 0.0);
        b.push(1, 0, 0.25);
        assert_eq!(b.build().asymmetry(), 0.25);
    }

    #[test]
    fn dot_deterministic_across_sizes() {
        let a: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..10_000).map(|i| (i as f64).cos()).collect();
        let d1 = dot(&a, &b);
        let d2 = dot(&a, &b);
        assert_eq!(d1, d2);
    }
}
