//! LIBSVM ingestion and instance/feature partitioning.
//!
//! The data matrix `X` is `d × n` with one column per instance. In memory each
//! instance's nonzeros are stored contiguously (compressed columns of `X`), so
//! a worker's block `X_k` is a contiguous run of instances.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::dd::Dd;
use crate::error::DataError;

/// Maps raw label values onto `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub negative: Vec<f64>,
    pub positive: Vec<f64>,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            negative: vec![0.0, -1.0],
            positive: vec![1.0, 2.0],
        }
    }
}

impl LabelMap {
    pub fn map(&self, raw: f64) -> Option<f64> {
        if self.negative.contains(&raw) {
            Some(-1.0)
        } else if self.positive.contains(&raw) {
            Some(1.0)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub labels: LabelMap,
    /// Forces the feature dimension; must be at least the largest index seen.
    pub n_features: Option<usize>,
}

/// Sparse `d × n` matrix stored one instance (column) at a time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceMatrix {
    n_features: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl InstanceMatrix {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends one instance; `entries` must have strictly increasing zero-based indices.
    pub fn push_instance(&mut self, entries: &[(usize, f64)]) {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        for &(j, v) in entries {
            debug_assert!(j < self.n_features);
            self.indices.push(j as u32);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn n_instances(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Zero-based feature indices and values of instance `i`.
    pub fn instance(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    fn slice_instances(&self, range: Range<usize>) -> Self {
        let lo = self.indptr[range.start];
        let hi = self.indptr[range.end];
        Self {
            n_features: self.n_features,
            indptr: self.indptr[range.start..=range.end].iter().map(|p| p - lo).collect(),
            indices: self.indices[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
        }
    }

    /// `out[i] = x_iᵀ w` for every instance.
    pub fn dot_instances(&self, w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_instances());
        for (i, o) in out.iter_mut().enumerate() {
            let (idx, val) = self.instance(i);
            *o = idx.iter().zip(val).map(|(&j, &v)| v * w[j as usize]).sum();
        }
    }

    /// `out += Σ_i coef[i] x_i`, accumulated in instance order.
    pub fn accumulate_weighted(&self, coef: &[f64], out: &mut [Dd]) {
        debug_assert_eq!(coef.len(), self.n_instances());
        for (i, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (idx, val) = self.instance(i);
            for (&j, &v) in idx.iter().zip(val) {
                out[j as usize].add(c * v);
            }
        }
    }
}

/// Parsed dataset with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: InstanceMatrix,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(x: InstanceMatrix, labels: Vec<f64>) -> Self {
        assert_eq!(x.n_instances(), labels.len());
        assert!(labels.iter().all(|&y| y == 1.0 || y == -1.0));
        Self { x, labels }
    }

    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.n_features()
    }

    pub fn nnz(&self) -> usize {
        self.x.nnz()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn matrix(&self) -> &InstanceMatrix {
        &self.x
    }

    /// Writes the dataset back in LIBSVM text form (one-based indices).
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_instances() {
            out.push_str(if self.labels[i] > 0.0 { "+1" } else { "-1" });
            let (idx, val) = self.x.instance(i);
            for (&j, &v) in idx.iter().zip(val) {
                let _ = write!(out, " {}:{}", j as usize + 1, v);
            }
            out.push('\n');
        }
        out
    }
}

/// One worker's block of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledShard {
    pub worker: usize,
    /// Global index of the first instance held by this shard.
    pub first_instance: usize,
    x: InstanceMatrix,
    labels: Vec<f64>,
}

impl LabeledShard {
    /// Labels must be ±1 and match the instance count.
    pub fn new(worker: usize, first_instance: usize, x: InstanceMatrix, labels: Vec<f64>) -> Self {
        assert_eq!(x.n_instances(), labels.len());
        assert!(labels.iter().all(|&y| y == 1.0 || y == -1.0));
        Self {
            worker,
            first_instance,
            x,
            labels,
        }
    }

    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.n_features()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn matrix(&self) -> &InstanceMatrix {
        &self.x
    }

    pub fn instance_range(&self) -> Range<usize> {
        self.first_instance..self.first_instance + self.n_instances()
    }
}

/// Disjoint contiguous feature blocks `J_1..J_K` covering `0..d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePartition {
    ranges: Vec<Range<usize>>,
}

impl FeaturePartition {
    pub fn block(&self, k: usize) -> Range<usize> {
        self.ranges[k].clone()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses LIBSVM text: `<label> <idx>:<val> ...` with one-based, strictly
/// increasing indices. Blank lines and `#` comments are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<LabeledDataset, DataError> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_ascii_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let raw: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label `{label_tok}`")))?;
        let label = opts.labels.map(raw).ok_or(DataError::UnmappedLabel {
            line: lineno,
            label: raw,
        })?;

        let mut entries = Vec::new();
        let mut previous = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("expected idx:val, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad index `{idx}`")))?;
            if idx == 0 {
                return Err(parse_err(lineno, "feature indices are one-based"));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad value `{val}`")))?;
            if idx <= previous {
                return Err(DataError::NonIncreasingIndex {
                    line: lineno,
                    index: idx,
                    previous,
                });
            }
            previous = idx;
            entries.push((idx - 1, val));
        }
        max_index = max_index.max(previous);
        rows.push(entries);
        labels.push(label);
    }

    let d = match opts.n_features {
        Some(d) if d < max_index => {
            return Err(DataError::DimensionTooSmall {
                index: max_index,
                dim: d,
            })
        }
        Some(d) => d,
        None => max_index,
    };
    let mut x = InstanceMatrix::new(d);
    for row in &rows {
        x.push_instance(row);
    }
    Ok(LabeledDataset::new(x, labels))
}

/// Reads a LIBSVM file, decompressing when the name ends in `.gz`.
pub fn read_libsvm_file(path: &Path, opts: &ParseOptions) -> Result<LabeledDataset, DataError> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_libsvm(BufReader::new(reader), opts)
}

/// First instance owned by worker `k`: `⌊k·n/K⌋`.
fn instance_boundary(k: usize, n: usize, workers: usize) -> usize {
    k * n / workers
}

/// Splits instances into `workers` contiguous shards of near-equal size.
pub fn partition_instances(dataset: &LabeledDataset, workers: usize) -> Result<Vec<LabeledShard>, DataError> {
    let n = dataset.n_instances();
    if workers == 0 {
        return Err(DataError::NoWorkers);
    }
    if workers > n {
        return Err(DataError::TooManyWorkers { instances: n, workers });
    }
    Ok((0..workers)
        .map(|k| {
            let r = instance_boundary(k, n, workers)..instance_boundary(k + 1, n, workers);
            LabeledShard {
                worker: k,
                first_instance: r.start,
                x: dataset.x.slice_instances(r.clone()),
                labels: dataset.labels[r].to_vec(),
            }
        })
        .collect())
}

/// Balanced contiguous ranges; the first `d mod K` blocks get one extra feature.
pub fn partition_features(d: usize, workers: usize) -> FeaturePartition {
    assert!(workers >= 1);
    let base = d / workers;
    let extra = d % workers;
    let start = |k: usize| k * base + k.min(extra);
    FeaturePartition {
        ranges: (0..workers).map(|k| start(k)..start(k + 1)).collect(),
    }
}
