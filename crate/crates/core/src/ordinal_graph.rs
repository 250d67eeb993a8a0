//! Affinity and dissimilarity graphs over centers, the tensor ordinal graph
//! `G = S ⊗ DS` as an entry oracle, and triplet extraction.
//!
//! `G(ij, kl) = S(i,j) · DS(k,l) = S(i,j) / S(k,l)`, which exceeds one exactly
//! when pair `(i,j)` is closer than pair `(k,l)`. At `L` centers `G` would be
//! `L² × L²`, so only individual entries are ever computed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::squared_distance;

/// Gaussian affinities `S(i,j) = exp(-‖x_i − x_j‖² / 2σ²)` with a zero diagonal.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub s: DMatrix<f64>,
    pub sigma: f64,
}

/// Entrywise reciprocal of the affinities, zero on the diagonal.
#[derive(Debug, Clone)]
pub struct DissimilarityGraph {
    pub ds: DMatrix<f64>,
}

impl AffinityGraph {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }
}

/// Outcome of comparing two dissimilarities through the tensor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordinal {
    /// `δ_ij < δ_kl`
    Less,
    /// `δ_ij ≥ δ_kl`, including exact ties.
    GreaterOrEqual,
}

/// Center `near` is closer to `anchor` than center `far` is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: u32,
    pub near: u32,
    pub far: u32,
}

impl Triplet {
    pub fn new(anchor: usize, near: usize, far: usize) -> Self {
        Self {
            anchor: anchor as u32,
            near: near as u32,
            far: far as u32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn as_slice(&self) -> &[Triplet] {
        &self.triplets
    }
}

/// Median pairwise Euclidean distance.
///
/// When duplicates push the median to zero while some points still differ,
/// the median of the non-zero distances is used instead.
pub fn select_sigma(points: &DataMatrix) -> Result<f64> {
    let l = points.n();
    if l < 2 {
        return Err(Error::arg("bandwidth selection needs at least two points"));
    }
    let mut dists: Vec<f64> = (0..l)
        .flat_map(|i| (i + 1..l).map(move |j| (i, j)))
        .map(|(i, j)| squared_distance(points.row(i), points.row(j)).sqrt())
        .collect();
    dists.sort_by(f64::total_cmp);
    let mut sigma = median_sorted(&dists);
    if sigma == 0.0 {
        let first_nonzero = dists.partition_point(|&x| x == 0.0);
        if first_nonzero == dists.len() {
            return Err(Error::ZeroBandwidth);
        }
        sigma = median_sorted(&dists[first_nonzero..]);
    }
    Ok(sigma)
}

fn median_sorted(xs: &[f64]) -> f64 {
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        0.5 * (xs[m / 2 - 1] + xs[m / 2])
    }
}

pub fn build_affinity(points: &DataMatrix, sigma: f64) -> Result<AffinityGraph> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!(
            "sigma must be finite and > 0, got {sigma}"
        )));
    }
    let l = points.n();
    let denom = 2.0 * sigma * sigma;
    let mut s = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in i + 1..l {
            let v = (-squared_distance(points.row(i), points.row(j)) / denom).exp();
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(AffinityGraph { s, sigma })
}

pub fn build_dissimilarity(affinity: &AffinityGraph) -> Result<DissimilarityGraph> {
    let l = affinity.len();
    let mut ds = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let s = affinity.s[(i, j)];
            if s == 0.0 {
                return Err(Error::NumericUnderflow { i, j });
            }
            ds[(i, j)] = 1.0 / s;
        }
    }
    Ok(DissimilarityGraph { ds })
}

/// Entry `G(ij, kl) = S(i,j) · DS(k,l)`. Panics on out-of-range indices.
#[inline]
pub fn tog_entry(
    s: &AffinityGraph,
    ds: &DissimilarityGraph,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
) -> f64 {
    s.s[(i, j)] * ds.ds[(k, l)]
}

/// Compares `δ_ij` with `δ_kl`: `Less` iff `G(ij, kl) > 1`.
pub fn ordinal_compare(
    s: &AffinityGraph,
    ds: &DissimilarityGraph,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
) -> Result<Ordinal> {
    if i == j || k == l {
        return Err(Error::arg(format!(
            "self-pair in comparison ({i},{j}) vs ({k},{l})"
        )));
    }
    let size = s.len();
    if [i, j, k, l].iter().any(|&x| x >= size) {
        return Err(Error::arg(format!("index out of range for {size} centers")));
    }
    Ok(if tog_entry(s, ds, i, j, k, l) > 1.0 {
        Ordinal::Less
    } else {
        Ordinal::GreaterOrEqual
    })
}

/// Every `(i; j, k)` with pairwise distinct indices and `G(ij, ik) > 1`,
/// sorted by `(i, j, k)`.
pub fn extract_triplets(s: &AffinityGraph, ds: &DissimilarityGraph) -> TripletSet {
    let l = s.len();
    let per_anchor: Vec<Vec<Triplet>> = (0..l)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in (0..l).filter(|&j| j != i) {
                for k in (0..l).filter(|&k| k != i && k != j) {
                    if tog_entry(s, ds, i, j, i, k) > 1.0 {
                        out.push(Triplet::new(i, j, k));
                    }
                }
            }
            out
        })
        .collect();
    TripletSet {
        triplets: per_anchor.concat(),
    }
}

/// Dumps triplets as consecutive little-endian `u32` triples.
pub fn write_triplets(path: impl AsRef<Path>, set: &TripletSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    for t in &set.triplets {
        for v in [t.anchor, t.near, t.far] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<TripletSet> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() % 12 != 0 {
        return Err(Error::format(format!(
            "triplet file length {} is not a multiple of 12",
            bytes.len()
        )));
    }
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let triplets = bytes
        .chunks_exact(12)
        .map(|c| Triplet {
            anchor: word(&c[0..4]),
            near: word(&c[4..8]),
            far: word(&c[8..12]),
        })
        .collect();
    Ok(TripletSet { triplets })
}
