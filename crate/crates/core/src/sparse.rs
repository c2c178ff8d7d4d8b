//! Compressed sparse row storage for cell-by-gene matrices, plus
//! MatrixMarket coordinate text I/O.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const MTX_HEADER: &str = "%%MatrixMarket matrix coordinate real general";

/// Row-major sparse matrix. Column indices within a row are strictly increasing
/// and explicit zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Builds a matrix from dense rows, dropping zeros.
    pub fn from_dense_rows(rows: &[Vec<f64>], n_cols: usize) -> Result<Self> {
        let mut b = CsrBuilder::new(n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch(format!(
                    "dense row has {} entries, expected {n_cols}",
                    row.len()
                )));
            }
            b.push_dense_row(row);
        }
        Ok(b.finish())
    }

    /// Builds a matrix from (row, col, value) triplets in any order.
    /// Duplicate coordinates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::DimensionMismatch(format!(
                    "entry ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::InvalidData(format!(
                    "duplicate entry at row {}, column {}",
                    r + 1,
                    c + 1
                )));
            }
            prev = Some((r, c));
            if v != 0.0 {
                indptr[r + 1] += 1;
                indices.push(c);
                data.push(v);
            }
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[s..e], &self.data[s..e])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    pub fn dense_row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        self.add_row_into(r, &mut out);
        out
    }

    /// Adds row `r` into `acc` in column order.
    pub fn add_row_into(&self, r: usize, acc: &mut [f64]) {
        let (idx, vals) = self.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            acc[c] += v;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Applies `f(row, value)` to every stored value. Results equal to zero
    /// are dropped so the no-explicit-zero invariant holds.
    pub fn map_rows<F>(&self, mut f: F) -> Self
    where
        F: FnMut(usize, f64) -> f64,
    {
        let mut b = CsrBuilder::new(self.n_cols);
        for r in 0..self.n_rows {
            let (idx, vals) = self.row(r);
            b.push_sparse_row(idx.iter().zip(vals).map(|(&c, &v)| (c, f(r, v))));
        }
        b.finish()
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut b = CsrBuilder::new(self.n_cols);
        for &r in rows {
            let (idx, vals) = self.row(r);
            b.push_sparse_row(idx.iter().copied().zip(vals.iter().copied()));
        }
        b.finish()
    }

    /// New matrix restricted to `cols`, which must be strictly increasing.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            remap[old] = new;
        }
        let mut b = CsrBuilder::new(cols.len());
        for r in 0..self.n_rows {
            let (idx, vals) = self.row(r);
            b.push_sparse_row(
                idx.iter()
                    .zip(vals)
                    .filter(|(&c, _)| remap[c] != usize::MAX)
                    .map(|(&c, &v)| (remap[c], v)),
            );
        }
        b.finish()
    }

    /// Writes MatrixMarket coordinate text: header, size line, then 1-indexed
    /// `row col value` triplets in row-major order. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_mtx<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MTX_HEADER}")?;
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        let mut line = String::new();
        for r in 0..self.n_rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                line.clear();
                let _ = writeln!(line, "{} {} {}", r + 1, c + 1, v);
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses MatrixMarket coordinate text. `%` lines after the header are
    /// treated as comments.
    pub fn read_mtx<R: BufRead>(r: R, file: &str) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::io(file, e))?,
            None => return Err(Error::format(file, 1, "empty file")),
        };
        if header.trim_end() != MTX_HEADER {
            return Err(Error::format(
                file,
                1,
                format!("expected header `{MTX_HEADER}`"),
            ));
        }
        let mut size: Option<(usize, usize, usize)> = None;
        let mut triplets = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(file, e))?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::format(file, lineno, "expected three fields"));
            }
            match size {
                None => {
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::format(file, lineno, format!("bad size `{s}`")))
                    };
                    size = Some((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
                    triplets.reserve(size.unwrap().2);
                }
                Some((nr, nc, _)) => {
                    let idx = |s: &str, bound: usize| -> Result<usize> {
                        let v = s
                            .parse::<usize>()
                            .map_err(|_| Error::format(file, lineno, format!("bad index `{s}`")))?;
                        if v == 0 || v > bound {
                            return Err(Error::format(
                                file,
                                lineno,
                                format!("index {v} outside 1..={bound}"),
                            ));
                        }
                        Ok(v - 1)
                    };
                    let r = idx(fields[0], nr)?;
                    let c = idx(fields[1], nc)?;
                    let v = fields[2].parse::<f64>().map_err(|_| {
                        Error::format(file, lineno, format!("bad value `{}`", fields[2]))
                    })?;
                    triplets.push((r, c, v));
                }
            }
        }
        let (nr, nc, nnz) = size.ok_or_else(|| Error::format(file, 2, "missing size line"))?;
        if triplets.len() != nnz {
            return Err(Error::format(
                file,
                2,
                format!("size line declares {nnz} entries, found {}", triplets.len()),
            ));
        }
        CsrMatrix::from_triplets(nr, nc, triplets)
    }
}

/// Appends rows one at a time.
pub struct CsrBuilder {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(n_cols: usize) -> Self {
        CsrBuilder {
            n_cols,
            indptr: vec![0],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push_dense_row(&mut self, row: &[f64]) {
        self.push_sparse_row(row.iter().copied().enumerate());
    }

    /// Entries must arrive in increasing column order.
    pub fn push_sparse_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (c, v) in entries {
            debug_assert!(c < self.n_cols);
            if v != 0.0 {
                self.indices.push(c);
                self.data.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn finish(self) -> CsrMatrix {
        CsrMatrix {
            n_rows: self.indptr.len() - 1,
            n_cols: self.n_cols,
            indptr: self.indptr,
            indices: self.indices,
            data: self.data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrMatrix {
        CsrMatrix::from_dense_rows(
            &[
                vec![0.0, 1.5, 0.0],
                vec![2.0, 0.0, 3.25],
                vec![0.0, 0.0, 0.0],
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn dense_roundtrip_and_access() {
        let m = sample();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.dense_row(1), vec![2.0, 0.0, 3.25]);
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.row_sum(1), 5.25);
    }

    #[test]
    fn mtx_text_is_exact() {
        let m = sample();
        let mut buf = Vec::new();
        m.write_mtx(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "%%MatrixMarket matrix coordinate real general\n3 3 3\n1 2 1.5\n2 1 2\n2 3 3.25\n"
        );
        let back = CsrMatrix::read_mtx(&buf[..], "m.mtx").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mtx_rejects_bad_input() {
        let bad_header = "%%MatrixMarket matrix array real general\n1 1 0\n";
        assert!(CsrMatrix::read_mtx(bad_header.as_bytes(), "x").is_err());
        let out_of_range = format!("{MTX_HEADER}\n2 2 1\n3 1 1.0\n");
        assert!(CsrMatrix::read_mtx(out_of_range.as_bytes(), "x").is_err());
        let dup = format!("{MTX_HEADER}\n2 2 2\n1 1 1.0\n1 1 2.0\n");
        assert!(CsrMatrix::read_mtx(dup.as_bytes(), "x").is_err());
        let short = format!("{MTX_HEADER}\n2 2 2\n1 1 1.0\n");
        assert!(CsrMatrix::read_mtx(short.as_bytes(), "x").is_err());
    }

    #[test]
    fn select_rows_and_cols() {
        let m = sample();
        let r = m.select_rows(&[1, 0]);
        assert_eq!(r.dense_row(0), vec![2.0, 0.0, 3.25]);
        let c = m.select_cols(&[0, 2]);
        assert_eq!(c.dense_row(1), vec![2.0, 3.25]);
        assert_eq!(c.dense_row(0), vec![0.0, 0.0]);
    }

    #[test]
    fn map_drops_new_zeros() {
        let m = sample().map_rows(|_, v| if v > 2.0 { v } else { 0.0 });
        assert_eq!(m.nnz(), 1);
    }
}
