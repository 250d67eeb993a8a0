//! Stochastic gradient descent on the Stiefel manifold `{V : V Vᵀ = I}`.
//!
//! The discrete triplet objective is relaxed in three steps: `sgn` becomes
//! `tanh`, so the relaxed code of an embedded center `a` is
//! `Ĥ(a) = tanh(Vᵀ a)`; Hamming distance becomes `½ (r − Ĥ(a_i)ᵀ Ĥ(a_j))`;
//! and the violation indicator of a triplet `(i; j, k)` becomes
//! `p = 1 / (1 + exp(D(i,k) − D(i,j)))`. Each iteration draws a batch of
//! triplets, takes the ambient gradient of `Σ p`, projects it onto the
//! tangent space at `V` and retracts `V − η·P(∇F)` back onto the manifold.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{polar_rows, row_orthonormality_error};
use crate::ocp::EmbeddedPoints;
use crate::ordinal_graph::Triplet;

/// Tolerance on `‖V Vᵀ − I‖_∞` for a matrix to count as a manifold point.
pub const MANIFOLD_TOL: f64 = 1e-8;
/// Step halvings attempted when a retraction loses rank.
const MAX_STEP_HALVINGS: usize = 10;

/// A `d_svd × r` matrix with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    v: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `v` after checking `‖V Vᵀ − I‖_∞ < tol`.
    pub fn with_tolerance(v: DMatrix<f64>, tol: f64) -> Result<Self> {
        if v.nrows() > v.ncols() {
            return Err(Error::arg(format!(
                "a {}x{} matrix cannot have orthonormal rows",
                v.nrows(),
                v.ncols()
            )));
        }
        let err = row_orthonormality_error(&v);
        if !(err < tol) {
            return Err(Error::Model(format!(
                "V is off the manifold: ‖VVᵀ − I‖∞ = {err:e}"
            )));
        }
        Ok(Self { v })
    }

    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(v, MANIFOLD_TOL)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.v
    }

    pub fn d_svd(&self) -> usize {
        self.v.nrows()
    }

    pub fn r(&self) -> usize {
        self.v.ncols()
    }

    pub fn feasibility_error(&self) -> f64 {
        row_orthonormality_error(&self.v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Triplets per iteration.
    pub batch_size: usize,
    /// Relative change of the windowed batch objective that stops training.
    pub tol: f64,
    pub seed: u64,
    /// Evaluate the objective over the whole triplet set every this many
    /// iterations; 0 evaluates only at the start and the end.
    pub eval_every: usize,
    /// Moving-average window for the stopping rule.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            max_iters: 500,
            batch_size: 2000,
            tol: 1e-4,
            seed: 0,
            eval_every: 0,
            window: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::arg(format!(
                "eta must be finite and > 0, got {}",
                self.eta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.tol) {
            return Err(Error::arg(format!(
                "tol must lie in [0, 1), got {}",
                self.tol
            )));
        }
        if self.window == 0 {
            return Err(Error::arg("window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Mean sigmoid objective over the batch drawn at this iteration.
    pub objective: f64,
    /// Summed objective over every triplet, when evaluated.
    pub full_objective: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub iterations: usize,
    pub stopped_early: bool,
    /// Largest `‖V Vᵀ − I‖_∞` observed after any update.
    pub max_feasibility_error: f64,
    pub initial_full_objective: f64,
    pub final_full_objective: f64,
}

impl TrainTrace {
    /// CSV with header `iteration,objective,seconds,full_objective`; the last
    /// column is empty where the full objective was not evaluated.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        writeln!(w, "iteration,objective,seconds,full_objective")?;
        for r in &self.records {
            let full = r.full_objective.map(|f| f.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.iteration, r.objective, r.seconds, full)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn init_stiefel(d_svd: usize, r: usize, seed: u64) -> Result<StiefelPoint> {
    if d_svd == 0 {
        return Err(Error::arg("d_svd must be at least 1"));
    }
    if r < d_svd {
        return Err(Error::arg(format!(
            "code length r = {r} is below d_svd = {d_svd}; V Vᵀ = I needs r >= d_svd"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d_svd, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Gaussian matrices are full rank with probability one; redraw otherwise.
    match polar_rows(&g) {
        Ok(v) => Ok(StiefelPoint { v }),
        Err(_) => init_stiefel(d_svd, r, seed.wrapping_add(0x9E37_79B9_7F4A_7C15)),
    }
}

fn check_dims(v: &DMatrix<f64>, a: &[f64]) {
    assert_eq!(
        v.nrows(),
        a.len(),
        "embedded vector has dimension {} but V has {} rows",
        a.len(),
        v.nrows()
    );
}

/// `tanh(Vᵀ a)`.
pub fn relaxed_hash(v: &DMatrix<f64>, a: &[f64]) -> Vec<f64> {
    check_dims(v, a);
    v.column_iter()
        .map(|col| col.iter().zip(a).map(|(x, y)| x * y).sum::<f64>().tanh())
        .collect()
}

/// `½ (r − Ĥ(a_i)ᵀ Ĥ(a_j))`.
pub fn relaxed_hamming(v: &DMatrix<f64>, a_i: &[f64], a_j: &[f64]) -> f64 {
    let hi = relaxed_hash(v, a_i);
    let hj = relaxed_hash(v, a_j);
    hamming_from_codes(&hi, &hj)
}

#[inline]
fn hamming_from_codes(hi: &[f64], hj: &[f64]) -> f64 {
    let inner: f64 = hi.iter().zip(hj).map(|(x, y)| x * y).sum();
    0.5 * (hi.len() as f64 - inner)
}

/// `1 / (1 + exp(gap))`, evaluated without overflow.
#[inline]
pub fn sigmoid_of_gap(gap: f64) -> f64 {
    if gap >= 0.0 {
        let e = (-gap).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + gap.exp())
    }
}

/// Relaxed violation of one triplet: below ½ exactly when the near center is
/// closer to the anchor than the far one in relaxed Hamming distance.
pub fn sigmoid_p(v: &DMatrix<f64>, t: Triplet, centers: &EmbeddedPoints) -> f64 {
    let a_i = centers.column(t.anchor as usize);
    let a_j = centers.column(t.near as usize);
    let a_k = centers.column(t.far as usize);
    let gap = relaxed_hamming(v, &a_i, &a_k) - relaxed_hamming(v, &a_i, &a_j);
    sigmoid_of_gap(gap)
}

/// Relaxed codes of every center, one column per center (`r × L`).
fn relaxed_codes(v: &DMatrix<f64>, centers: &EmbeddedPoints) -> DMatrix<f64> {
    assert_eq!(v.nrows(), centers.dim(), "V and centers disagree on d_svd");
    (v.transpose() * &centers.vectors).map(f64::tanh)
}

#[inline]
fn code_hamming(h: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (h.nrows() as f64 - h.column(i).dot(&h.column(j)))
}

/// Sum of `sigmoid_p` over the batch.
pub fn objective(v: &DMatrix<f64>, batch: &[Triplet], centers: &EmbeddedPoints) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("objective over an empty batch"));
    }
    let h = relaxed_codes(v, centers);
    Ok(batch.iter().map(|t| triplet_p(&h, *t)).sum())
}

#[inline]
fn triplet_p(h: &DMatrix<f64>, t: Triplet) -> f64 {
    let (i, j, k) = (t.anchor as usize, t.near as usize, t.far as usize);
    sigmoid_of_gap(code_hamming(h, i, k) - code_hamming(h, i, j))
}

/// Objective summed over the whole triplet set.
pub fn full_objective(v: &DMatrix<f64>, triplets: &[Triplet], centers: &EmbeddedPoints) -> f64 {
    let h = relaxed_codes(v, centers);
    let r = h.nrows() as f64;
    let dist = (h.transpose() * &h).map(|x| 0.5 * (r - x));
    let partial: Vec<f64> = triplets
        .par_chunks(1 << 16)
        .map(|chunk| {
            chunk
                .iter()
                .map(|t| {
                    let (i, j, k) = (t.anchor as usize, t.near as usize, t.far as usize);
                    sigmoid_of_gap(dist[(i, k)] - dist[(i, j)])
                })
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// `∂D(a_i, a_j)/∂V = −½ { a_i [(1 − Ĥ(a_i)²) ⊙ Ĥ(a_j)]ᵀ + a_j [(1 − Ĥ(a_j)²) ⊙ Ĥ(a_i)]ᵀ }`.
pub fn grad_hamming(v: &DMatrix<f64>, a_i: &[f64], a_j: &[f64]) -> DMatrix<f64> {
    let hi = relaxed_hash(v, a_i);
    let hj = relaxed_hash(v, a_j);
    DMatrix::from_fn(v.nrows(), v.ncols(), |row, col| {
        let left = a_i[row] * (1.0 - hi[col] * hi[col]) * hj[col];
        let right = a_j[row] * (1.0 - hj[col] * hj[col]) * hi[col];
        -0.5 * (left + right)
    })
}

/// Ambient gradient of [`objective`] with respect to `V`.
///
/// With `p = σ(D_ij − D_ik)`, `∂p/∂V = p (1 − p) (∂D_ij/∂V − ∂D_ik/∂V)`.
pub fn grad_objective(
    v: &DMatrix<f64>,
    batch: &[Triplet],
    centers: &EmbeddedPoints,
) -> Result<DMatrix<f64>> {
    objective_and_grad(v, batch, centers).map(|(_, g)| g)
}

/// Batch objective sum and its gradient in one pass.
///
/// The per-triplet outer products all have an embedded center on the left,
/// so they are accumulated as `A · C` with `C` holding one `r`-vector of
/// coefficients per center.
pub fn objective_and_grad(
    v: &DMatrix<f64>,
    batch: &[Triplet],
    centers: &EmbeddedPoints,
) -> Result<(f64, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::arg("gradient over an empty batch"));
    }
    let h = relaxed_codes(v, centers);
    let r = h.nrows();
    let mut coeff = DMatrix::<f64>::zeros(r, centers.len());
    let mut total = 0.0;
    for t in batch {
        let (i, j, k) = (t.anchor as usize, t.near as usize, t.far as usize);
        let p = sigmoid_of_gap(code_hamming(&h, i, k) - code_hamming(&h, i, j));
        total += p;
        let w = 0.5 * p * (1.0 - p);
        if w == 0.0 {
            continue;
        }
        for b in 0..r {
            let (hi, hj, hk) = (h[(b, i)], h[(b, j)], h[(b, k)]);
            coeff[(b, i)] += w * (1.0 - hi * hi) * (hk - hj);
            coeff[(b, j)] -= w * (1.0 - hj * hj) * hi;
            coeff[(b, k)] += w * (1.0 - hk * hk) * hi;
        }
    }
    Ok((total, &centers.vectors * coeff.transpose()))
}

/// Projection onto the tangent space at `V`: `G − sym(G Vᵀ) V`.
pub fn tangent_project(v: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(v.shape(), g.shape(), "gradient shape differs from V");
    let gv = g * v.transpose();
    let sym = (&gv + gv.transpose()) * 0.5;
    g - sym * v
}

/// Polar retraction: the row-orthonormal factor of `V + δ`.
pub fn retract(v: &StiefelPoint, delta: &DMatrix<f64>) -> Result<StiefelPoint> {
    if v.v.shape() != delta.shape() {
        return Err(Error::arg("step shape differs from V"));
    }
    if delta.iter().all(|&x| x == 0.0) {
        return Ok(v.clone());
    }
    Ok(StiefelPoint {
        v: polar_rows(&(&v.v + delta))?,
    })
}

/// Draws batches uniformly without replacement, reshuffling once the current
/// permutation cannot fill another batch.
pub struct BatchSampler {
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(
            len <= u32::MAX as usize,
            "triplet set too large for u32 indices"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<u32> = (0..len as u32).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            batch_size: batch_size.min(len).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[u32] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

pub fn train(
    centers: &EmbeddedPoints,
    triplets: &[Triplet],
    r: usize,
    config: &TrainConfig,
) -> Result<(StiefelPoint, TrainTrace)> {
    let v0 = init_stiefel(centers.dim(), r, config.seed)?;
    train_from(v0, centers, triplets, config)
}

/// Runs the SGD loop from a given starting point.
pub fn train_from(
    v0: StiefelPoint,
    centers: &EmbeddedPoints,
    triplets: &[Triplet],
    config: &TrainConfig,
) -> Result<(StiefelPoint, TrainTrace)> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::arg("no triplet constraints to train on"));
    }
    if v0.d_svd() != centers.dim() {
        return Err(Error::arg(format!(
            "V has {} rows but centers are embedded in {} dimensions",
            v0.d_svd(),
            centers.dim()
        )));
    }
    let l = centers.len();
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor as usize >= l || t.near as usize >= l || t.far as usize >= l)
    {
        return Err(Error::arg(format!(
            "triplet {t:?} references a missing center"
        )));
    }

    let start = Instant::now();
    let mut v = v0;
    let mut trace = TrainTrace {
        max_feasibility_error: v.feasibility_error(),
        ..TrainTrace::default()
    };
    trace.initial_full_objective = full_objective(&v.v, triplets, centers);

    let mut sampler = BatchSampler::new(triplets.len(), config.batch_size, config.seed ^ 0x5EED);
    let mut batch: Vec<Triplet> = Vec::with_capacity(config.batch_size.min(triplets.len()));
    let mut history: Vec<f64> = Vec::with_capacity(config.max_iters);
    let w = config.window;

    for it in 0..config.max_iters {
        batch.clear();
        batch.extend(
            sampler
                .next_batch()
                .iter()
                .map(|&idx| triplets[idx as usize]),
        );

        let (sum, grad) = objective_and_grad(&v.v, &batch, centers)?;
        let mean = sum / batch.len() as f64;
        let direction = tangent_project(&v.v, &(-grad));

        let mut eta = config.eta;
        let mut attempt = 0;
        v = loop {
            match retract(&v, &(&direction * eta)) {
                Ok(next) => break next,
                Err(Error::DegenerateStep { .. }) if attempt < MAX_STEP_HALVINGS => {
                    attempt += 1;
                    eta *= 0.5;
                    log::warn!("degenerate retraction at iteration {it}; halving step to {eta:e}");
                }
                Err(e) => return Err(e),
            }
        };
        let feas = v.feasibility_error();
        debug_assert!(feas < MANIFOLD_TOL, "left the manifold: {feas:e}");
        trace.max_feasibility_error = trace.max_feasibility_error.max(feas);

        let full = (config.eval_every > 0 && (it + 1) % config.eval_every == 0)
            .then(|| full_objective(&v.v, triplets, centers));
        trace.records.push(TraceRecord {
            iteration: it,
            objective: mean,
            full_objective: full,
            seconds: start.elapsed().as_secs_f64(),
        });
        trace.iterations = it + 1;

        history.push(mean);
        if history.len() >= 2 * w {
            let n = history.len();
            let prev = history[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
            let cur = history[n - w..].iter().sum::<f64>() / w as f64;
            let change = (cur - prev).abs();
            if change == 0.0 || change < config.tol * prev.abs() {
                trace.stopped_early = true;
                break;
            }
        }
    }

    trace.final_full_objective = full_objective(&v.v, triplets, centers);
    if let Some(last) = trace.records.last_mut() {
        last.full_objective = Some(trace.final_full_objective);
    }
    Ok((v, trace))
}
