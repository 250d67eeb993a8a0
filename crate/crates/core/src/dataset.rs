//! Feature matrices: fvecs/CSV I/O, preprocessing, synthetic data and splits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Rounds of center/normalize alternation before preprocessing gives up.
const PREPROCESS_MAX_ROUNDS: usize = 10_000;
/// Target for the largest per-dimension mean after preprocessing.
const PREPROCESS_MEAN_TOL: f64 = 1e-12;
/// Hard acceptance bound on the residual mean.
const PREPROCESS_MEAN_LIMIT: f64 = 1e-6;

/// `n` feature vectors of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
    preprocessed: bool,
}

impl DataMatrix {
    /// Builds a matrix from a row-major buffer. All values must be finite.
    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::arg(format!(
                "buffer of length {} does not hold {n}x{d} values",
                data.len()
            )));
        }
        if n > 0 && d == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite value in row {} column {}",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(Self {
            data,
            n,
            d,
            preprocessed: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::arg(format!(
                "row {i} has dimension {} but row 0 has {d}",
                rows[i].len()
            )));
        }
        Self::from_flat(rows.len(), d, rows.concat())
    }

    pub fn empty() -> Self {
        Self {
            data: Vec::new(),
            n: 0,
            d: 0,
            preprocessed: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_preprocessed(&self) -> bool {
        self.preprocessed
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copies the given rows, in order, into a new raw matrix.
    pub fn select(&self, indices: &[usize]) -> DataMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DataMatrix {
            data,
            n: indices.len(),
            d: self.d,
            preprocessed: false,
        }
    }

    /// Per-dimension mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for row in self.rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        let n = self.n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Reads an fvecs file: repeated `[i32 LE d][d × f32 LE]` records.
pub fn load_fvecs(path: impl AsRef<Path>) -> Result<DataMatrix> {
    let bytes = fs::read(path.as_ref())?;
    parse_fvecs(&bytes)
}

pub fn parse_fvecs(bytes: &[u8]) -> Result<DataMatrix> {
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    let mut n = 0usize;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format(format!("record {n}: truncated dimension header")))?;
        let declared = i32::from_le_bytes(header.try_into().unwrap());
        if declared <= 0 {
            return Err(Error::format(format!(
                "record {n}: non-positive dimension {declared}"
            )));
        }
        let rd = declared as usize;
        match dim {
            None => dim = Some(rd),
            Some(d) if d != rd => {
                return Err(Error::format(format!(
                    "record {n}: dimension {rd} differs from earlier dimension {d}"
                )))
            }
            _ => {}
        }
        pos += 4;
        let body = bytes
            .get(pos..pos + 4 * rd)
            .ok_or_else(|| Error::format(format!("record {n}: truncated payload")))?;
        for chunk in body.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!("record {n}: non-finite component")));
            }
            data.push(v as f64);
        }
        pos += 4 * rd;
        n += 1;
    }
    Ok(DataMatrix {
        data,
        n,
        d: dim.unwrap_or(0),
        preprocessed: false,
    })
}

/// Writes `data` as fvecs. Components are rounded to `f32`.
pub fn write_fvecs(path: impl AsRef<Path>, data: &DataMatrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    let header = i32::try_from(data.d())
        .map_err(|_| Error::arg("dimension does not fit an i32 header"))?
        .to_le_bytes();
    for row in data.rows() {
        w.write_all(&header)?;
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads headerless CSV, one vector per line. Blank lines are skipped.
pub fn load_csv(path: impl AsRef<Path>) -> Result<DataMatrix> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<DataMatrix> {
    let mut data = Vec::new();
    let mut d: Option<usize> = None;
    let mut n = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(format!(
                    "line {}: cannot parse {:?} as a float",
                    lineno + 1,
                    field
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "line {}: non-finite value",
                    lineno + 1
                )));
            }
            data.push(v);
            count += 1;
        }
        match d {
            None => d = Some(count),
            Some(expected) if expected != count => {
                return Err(Error::format(format!(
                    "line {}: {count} fields, expected {expected}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        n += 1;
    }
    Ok(DataMatrix {
        data,
        n,
        d: d.unwrap_or(0),
        preprocessed: false,
    })
}

/// Loads fvecs or CSV depending on the file extension.
pub fn load_auto(path: impl AsRef<Path>) -> Result<DataMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_fvecs(path),
    }
}

/// Mean-centers every dimension, then scales every vector to unit L2 norm.
///
/// Normalizing moves the mean again, so the two steps alternate until the
/// residual mean is negligible. The last step is always a normalization.
pub fn preprocess(data: &DataMatrix) -> Result<DataMatrix> {
    if data.n == 0 {
        return Err(Error::arg("cannot preprocess an empty matrix"));
    }
    let d = data.d;
    let mut out = data.data.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..PREPROCESS_MAX_ROUNDS {
        let mut mean = vec![0.0; d];
        for row in out.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= data.n as f64);
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x -= m;
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector { index: i });
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        residual = max_abs_mean(&out, data.n, d);
        if residual < PREPROCESS_MEAN_TOL {
            break;
        }
    }
    if residual >= PREPROCESS_MEAN_LIMIT {
        return Err(Error::arg(format!(
            "no mean-centered unit-norm configuration reached (residual mean {residual:e})"
        )));
    }
    Ok(DataMatrix {
        data: out,
        n: data.n,
        d,
        preprocessed: true,
    })
}

fn max_abs_mean(flat: &[f64], n: usize, d: usize) -> f64 {
    let mut mean = vec![0.0; d];
    for row in flat.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter()
        .fold(0.0_f64, |acc, m| acc.max((m / n as f64).abs()))
}

/// Synthetic data together with the cluster means it was drawn around.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: DataMatrix,
    pub means: Vec<Vec<f64>>,
    /// Cluster of each point; point `i` belongs to cluster `i % num_clusters`.
    pub labels: Vec<usize>,
}

/// Mixture of isotropic Gaussians with means uniform in `[-1, 1]^d`.
pub fn gen_synthetic(
    num_clusters: usize,
    n: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<DataMatrix> {
    gen_synthetic_labeled(num_clusters, n, d, spread, seed).map(|s| s.data)
}

pub fn gen_synthetic_labeled(
    num_clusters: usize,
    n: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Synthetic> {
    if num_clusters == 0 {
        return Err(Error::arg("need at least one cluster"));
    }
    if n < num_clusters {
        return Err(Error::arg(format!(
            "n = {n} is smaller than the number of clusters {num_clusters}"
        )));
    }
    if d == 0 {
        return Err(Error::arg("dimension must be positive"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::arg(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_clusters)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_clusters;
        labels.push(c);
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + spread * z);
        }
    }
    Ok(Synthetic {
        data: DataMatrix::from_flat(n, d, data)?,
        means,
        labels,
    })
}

/// Query/base/train partition of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub queries: DataMatrix,
    pub base: DataMatrix,
    pub train: DataMatrix,
    /// Row indices into the source matrix, each list ascending.
    pub query_indices: Vec<usize>,
    pub base_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub seed: u64,
}

/// Draws `n_query` queries without replacement; the rest form the base, and
/// `n_train` base points are drawn for training.
pub fn split(data: &DataMatrix, n_query: usize, n_train: usize, seed: u64) -> Result<DataSplit> {
    let n = data.n();
    if n_query + 1 > n {
        return Err(Error::arg(format!(
            "{n_query} queries leave no base points out of {n}"
        )));
    }
    if n_train > n - n_query {
        return Err(Error::arg(format!(
            "n_train = {n_train} exceeds the {} base points",
            n - n_query
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut query_indices = perm[..n_query].to_vec();
    let mut base_indices = perm[n_query..].to_vec();
    query_indices.sort_unstable();
    base_indices.sort_unstable();

    let mut train_indices: Vec<usize> = base_indices
        .choose_multiple(&mut rng, n_train)
        .copied()
        .collect();
    train_indices.sort_unstable();

    Ok(DataSplit {
        queries: data.select(&query_indices),
        base: data.select(&base_indices),
        train: data.select(&train_indices),
        query_indices,
        base_indices,
        train_indices,
        seed,
    })
}
