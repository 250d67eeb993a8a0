//! Lloyd's K-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::squared_distance;

pub const DEFAULT_CENTERS: usize = 300;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct CenterSet {
    pub centers: DataMatrix,
    /// Center index of every input point.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from points to their assigned centers.
    pub inertia: f64,
    /// Inertia after every assignment step, plus the final value.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl CenterSet {
    pub fn len(&self) -> usize {
        self.centers.n()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.n() == 0
    }
}

pub fn kmeans(data: &DataMatrix, l: usize, max_iters: usize, seed: u64) -> Result<CenterSet> {
    let n = data.n();
    let d = data.d();
    if l == 0 {
        return Err(Error::arg("number of centers must be positive"));
    }
    if l > n {
        return Err(Error::arg(format!("{l} centers requested for {n} points")));
    }
    if max_iters == 0 {
        return Err(Error::arg("max_iters must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(data, l, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let (next, inertia) = assign(data, &centers, l);
        history.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
        update(data, &assignments, &mut centers, l, d);
    }

    let inertia: f64 = (0..n)
        .map(|i| squared_distance(data.row(i), center(&centers, assignments[i], d)))
        .sum();
    history.push(inertia);

    Ok(CenterSet {
        centers: DataMatrix::from_flat(l, d, centers)?,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}

#[inline]
fn center(centers: &[f64], c: usize, d: usize) -> &[f64] {
    &centers[c * d..(c + 1) * d]
}

fn plus_plus_init(data: &DataMatrix, l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.n();
    let d = data.d();
    let mut centers = Vec::with_capacity(l * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(data.row(first));
    let mut nearest: Vec<f64> = data
        .rows()
        .map(|x| squared_distance(x, data.row(first)))
        .collect();

    for _ in 1..l {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(pick).to_vec();
        nearest
            .par_iter_mut()
            .zip(data.as_slice().par_chunks_exact(d))
            .for_each(|(w, x)| *w = w.min(squared_distance(x, &c)));
        centers.extend_from_slice(&c);
    }
    centers
}

/// Nearest center per point (ties to the lower index) and total cost.
fn assign(data: &DataMatrix, centers: &[f64], l: usize) -> (Vec<usize>, f64) {
    let d = data.d();
    let pairs: Vec<(usize, f64)> = data
        .as_slice()
        .par_chunks_exact(d)
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..l {
                let dist = squared_distance(x, center(centers, c, d));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best
        })
        .collect();
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

/// Moves each center to the mean of its points. An emptied center is
/// re-seeded at the point farthest from its own (updated) center.
fn update(data: &DataMatrix, assignments: &[usize], centers: &mut [f64], l: usize, d: usize) {
    let mut sums = vec![0.0; l * d];
    let mut counts = vec![0usize; l];
    for (x, &c) in data.rows().zip(assignments) {
        counts[c] += 1;
        // offsets from the current center, so a center already at the mean stays put exactly
        for ((s, v), m) in sums[c * d..(c + 1) * d]
            .iter_mut()
            .zip(x)
            .zip(&centers[c * d..(c + 1) * d])
        {
            *s += v - m;
        }
    }
    for c in 0..l {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers[c * d..(c + 1) * d]
                .iter_mut()
                .zip(&sums[c * d..(c + 1) * d])
            {
                *dst += s * inv;
            }
        }
    }
    let mut taken = vec![false; data.n()];
    for e in (0..l).filter(|&c| counts[c] == 0) {
        let far = (0..data.n())
            .filter(|&i| !taken[i])
            .map(|i| {
                (
                    i,
                    squared_distance(data.row(i), center(centers, assignments[i], d)),
                )
            })
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((i, dist)) = far {
            if dist > 0.0 {
                taken[i] = true;
                centers[e * d..(e + 1) * d].copy_from_slice(data.row(i));
            }
        }
    }
}
