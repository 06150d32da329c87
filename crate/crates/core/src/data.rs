//! Sparse column storage and the two ways of splitting it across workers.
//!
//! Column `i` of the matrix is instance `x_i`; rows are features. Splitting by
//! rows gives every worker a slice of every instance ([`FeatureShard`]),
//! splitting by columns gives every worker whole instances
//! ([`InstanceShard`]). Both splits are contiguous and balanced to within one.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::DataError;

/// Compressed sparse column matrix with `d` rows and `n` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumnMatrix {
    d: usize,
    col_ptr: Vec<usize>,
    rows: Vec<usize>,
    values: Vec<f64>,
}

/// Borrowed view of one column.
#[derive(Debug, Clone, Copy)]
pub struct Column<'a> {
    pub rows: &'a [usize],
    pub values: &'a [f64],
}

impl<'a> Column<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.rows.iter().copied().zip(self.values.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    /// Inner product with a dense vector, accumulated in ascending row order
    /// starting from zero.
    pub fn dot(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&r, &v) in self.rows.iter().zip(self.values) {
            acc += w[r] * v;
        }
        acc
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Entries whose row falls in `lo..hi`.
    pub fn restrict(&self, rows: Range<usize>) -> Column<'a> {
        let start = self.rows.partition_point(|&r| r < rows.start);
        let end = self.rows.partition_point(|&r| r < rows.end);
        Column {
            rows: &self.rows[start..end],
            values: &self.values[start..end],
        }
    }
}

impl SparseColumnMatrix {
    /// An empty `d x 0` matrix.
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            col_ptr: alloc::vec![0],
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from per-column `(row, value)` lists.
    pub fn from_columns<I, C>(d: usize, columns: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = (usize, f64)>,
    {
        let mut m = Self::empty(d);
        for col in columns {
            m.push_column(col)?;
        }
        Ok(m)
    }

    /// Appends one column; row indices must be strictly increasing and `< d`.
    pub fn push_column<C>(&mut self, column: C) -> Result<(), DataError>
    where
        C: IntoIterator<Item = (usize, f64)>,
    {
        let col_index = self.n();
        let start = self.rows.len();
        for (r, v) in column {
            if r >= self.d {
                self.rows.truncate(start);
                self.values.truncate(start);
                return Err(DataError::RowOutOfRange { row: r, d: self.d });
            }
            if self.rows.len() > start && self.rows[self.rows.len() - 1] >= r {
                self.rows.truncate(start);
                self.values.truncate(start);
                return Err(DataError::UnsortedColumn { column: col_index });
            }
            self.rows.push(r);
            self.values.push(v);
        }
        self.col_ptr.push(self.rows.len());
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    /// Overrides the row count. Fails if a stored index would fall outside.
    pub fn set_d(&mut self, d: usize) -> Result<(), DataError> {
        if let Some(&max) = self.rows.iter().max() {
            if max >= d {
                return Err(DataError::RowOutOfRange { row: max, d });
            }
        }
        self.d = d;
        Ok(())
    }

    pub fn column(&self, i: usize) -> Column<'_> {
        let (s, e) = (self.col_ptr[i], self.col_ptr[i + 1]);
        Column {
            rows: &self.rows[s..e],
            values: &self.values[s..e],
        }
    }

    pub fn columns(&self) -> impl Iterator<Item = Column<'_>> + '_ {
        (0..self.n()).map(move |i| self.column(i))
    }

    /// Rows `lo..hi`, re-indexed to start at zero.
    pub fn row_block(&self, rows: Range<usize>) -> Self {
        let mut out = Self::empty(rows.end - rows.start);
        for col in self.columns() {
            let part = col.restrict(rows.clone());
            out.rows.extend(part.rows.iter().map(|r| r - rows.start));
            out.values.extend_from_slice(part.values);
            out.col_ptr.push(out.rows.len());
        }
        out
    }

    /// Columns `lo..hi`.
    pub fn column_block(&self, cols: Range<usize>) -> Self {
        let (s, e) = (self.col_ptr[cols.start], self.col_ptr[cols.end]);
        let col_ptr = self.col_ptr[cols.start..=cols.end].iter().map(|p| p - s).collect();
        Self {
            d: self.d,
            col_ptr,
            rows: self.rows[s..e].to_vec(),
            values: self.values[s..e].to_vec(),
        }
    }

    /// Stacks row blocks on top of each other. All blocks need the same
    /// column count.
    pub fn vstack(blocks: &[&Self]) -> Result<Self, DataError> {
        let n = blocks.first().map_or(0, |b| b.n());
        if blocks.iter().any(|b| b.n() != n) {
            return Err(DataError::BadShards);
        }
        let d = blocks.iter().map(|b| b.d).sum();
        let mut out = Self::empty(d);
        for i in 0..n {
            let mut offset = 0;
            for b in blocks {
                let col = b.column(i);
                out.rows.extend(col.rows.iter().map(|r| r + offset));
                out.values.extend_from_slice(col.values);
                offset += b.d;
            }
            out.col_ptr.push(out.rows.len());
        }
        Ok(out)
    }

    /// Concatenates column blocks left to right. All blocks need the same `d`.
    pub fn hstack(blocks: &[&Self]) -> Result<Self, DataError> {
        let d = blocks.first().map_or(0, |b| b.d);
        if blocks.iter().any(|b| b.d != d) {
            return Err(DataError::BadShards);
        }
        let mut out = Self::empty(d);
        for b in blocks {
            for col in b.columns() {
                out.rows.extend_from_slice(col.rows);
                out.values.extend_from_slice(col.values);
                out.col_ptr.push(out.rows.len());
            }
        }
        Ok(out)
    }
}

/// Features plus `{-1, +1}` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: SparseColumnMatrix,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(features: SparseColumnMatrix, labels: Vec<f64>) -> Result<Self, DataError> {
        if labels.len() != features.n() {
            return Err(DataError::LabelCount {
                labels: labels.len(),
                columns: features.n(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(DataError::BadLabel(bad));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &SparseColumnMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn d(&self) -> usize {
        self.features.d()
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn set_d(&mut self, d: usize) -> Result<(), DataError> {
        self.features.set_d(d)
    }

    pub fn instance(&self, i: usize) -> (Column<'_>, f64) {
        (self.features.column(i), self.labels[i])
    }

    /// Largest squared instance norm, `max_i ||x_i||^2`.
    pub fn max_squared_norm(&self) -> f64 {
        self.features.columns().map(|c| c.squared_norm()).fold(0.0, f64::max)
    }
}

/// Boundaries of `parts` contiguous blocks over `0..total`, earlier blocks
/// taking the remainder. Returns `parts + 1` offsets.
pub fn block_bounds(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    let mut bounds = Vec::with_capacity(parts + 1);
    let mut at = 0;
    bounds.push(0);
    for l in 0..parts {
        at += base + usize::from(l < extra);
        bounds.push(at);
    }
    bounds
}

/// One worker's horizontal slice of the data and the matching parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureShard {
    /// 1-based worker index.
    pub id: usize,
    pub rows: Range<usize>,
    /// `d_l x N`, rows re-indexed from zero.
    pub matrix: SparseColumnMatrix,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FeatureShard {
    pub fn len(&self) -> usize {
        self.rows.end - self.rows.start
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reassembles the full matrix from shards in worker order.
    pub fn assemble(shards: &[FeatureShard]) -> Result<SparseColumnMatrix, DataError> {
        let mut expected = 0;
        for s in shards {
            if s.rows.start != expected || s.matrix.d() != s.len() {
                return Err(DataError::BadShards);
            }
            expected = s.rows.end;
        }
        let blocks: Vec<&SparseColumnMatrix> = shards.iter().map(|s| &s.matrix).collect();
        SparseColumnMatrix::vstack(&blocks)
    }

    /// Concatenates the parameter slices in worker order.
    pub fn assemble_weights(shards: &[FeatureShard]) -> Vec<f64> {
        shards.iter().flat_map(|s| s.weights.iter().copied()).collect()
    }
}

/// One worker's vertical slice: whole instances in a contiguous column range.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceShard {
    /// 1-based worker index.
    pub id: usize,
    pub columns: Range<usize>,
    pub data: LabeledDataset,
}

impl InstanceShard {
    pub fn len(&self) -> usize {
        self.data.n()
    }

    pub fn is_empty(&self) -> bool {
        self.data.n() == 0
    }

    pub fn assemble(shards: &[InstanceShard]) -> Result<LabeledDataset, DataError> {
        let mut expected = 0;
        for s in shards {
            if s.columns.start != expected || s.data.n() != s.columns.len() {
                return Err(DataError::BadShards);
            }
            expected = s.columns.end;
        }
        let blocks: Vec<&SparseColumnMatrix> = shards.iter().map(|s| s.data.features()).collect();
        let features = SparseColumnMatrix::hstack(&blocks)?;
        let labels = shards.iter().flat_map(|s| s.data.labels().iter().copied()).collect();
        LabeledDataset::new(features, labels)
    }
}

/// Splits features into `q` contiguous row blocks, sizes within one of each
/// other, remainder going to the earlier shards.
pub fn partition_by_feature(data: &LabeledDataset, q: usize) -> Result<Vec<FeatureShard>, DataError> {
    if q == 0 {
        return Err(DataError::ZeroParts);
    }
    if q > data.d() {
        return Err(DataError::TooManyParts {
            what: "features",
            parts: q,
            available: data.d(),
        });
    }
    let bounds = block_bounds(data.d(), q);
    Ok(bounds
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let rows = w[0]..w[1];
            FeatureShard {
                id: l + 1,
                matrix: data.features().row_block(rows.clone()),
                labels: data.labels().to_vec(),
                weights: alloc::vec![0.0; rows.len()],
                rows,
            }
        })
        .collect())
}

/// Splits instances into `q` contiguous column blocks balanced within one.
pub fn partition_by_instance(data: &LabeledDataset, q: usize) -> Result<Vec<InstanceShard>, DataError> {
    if q == 0 {
        return Err(DataError::ZeroParts);
    }
    if q > data.n() {
        return Err(DataError::TooManyParts {
            what: "instances",
            parts: q,
            available: data.n(),
        });
    }
    let bounds = block_bounds(data.n(), q);
    bounds
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let columns = w[0]..w[1];
            let features = data.features().column_block(columns.clone());
            let labels = data.labels()[columns.clone()].to_vec();
            Ok(InstanceShard {
                id: k + 1,
                columns,
                data: LabeledDataset::new(features, labels)?,
            })
        })
        .collect()
}
