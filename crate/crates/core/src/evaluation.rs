//! Hamming-ranking retrieval evaluation against Euclidean ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess, split, DataMatrix};
use crate::encoder::{build_lsh_model, encode, hamming_words, BinaryCodes, HashModel, ModelKind};
use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::pipeline::{train_och, OchParams};

/// Relevant base indices per query, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub relevant: Vec<Vec<u32>>,
    pub fraction: f64,
}

/// `ceil(fraction · base_len)`, never below one.
pub fn relevant_count(fraction: f64, base_len: usize) -> usize {
    // the epsilon absorbs products like 0.02 · 5000 landing just above 100
    let raw = (fraction * base_len as f64 - 1e-9).ceil();
    (raw as usize).clamp(1, base_len)
}

/// The `ceil(fraction · |base|)` exact Euclidean nearest neighbours of every
/// query, ties broken by lower base index.
pub fn build_groundtruth(
    queries: &DataMatrix,
    base: &DataMatrix,
    fraction: f64,
) -> Result<GroundTruth> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if base.is_empty() {
        return Err(Error::arg("ground truth needs a non-empty base"));
    }
    if queries.d() != base.d() && !queries.is_empty() {
        return Err(Error::arg("queries and base differ in dimension"));
    }
    let k = relevant_count(fraction, base.n());
    let relevant = (0..queries.n())
        .into_par_iter()
        .map(|q| {
            let x = queries.row(q);
            let mut scored: Vec<(f64, u32)> = base
                .rows()
                .enumerate()
                .map(|(i, b)| (squared_distance(x, b), i as u32))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, cmp);
            }
            let mut top: Vec<u32> = scored[..k].iter().map(|p| p.1).collect();
            top.sort_unstable();
            top
        })
        .collect();
    Ok(GroundTruth { relevant, fraction })
}

/// Base indices by ascending Hamming distance to `query`, ties by index.
pub fn hamming_rank(query: &[u64], base: &BinaryCodes) -> Vec<u32> {
    assert_eq!(query.len(), base.words_per_code(), "code lengths differ");
    let r = base.r();
    let dists: Vec<u32> = (0..base.n())
        .map(|i| hamming_words(query, base.code(i)))
        .collect();
    // counting sort over the r + 1 possible distances keeps index order stable
    let mut starts = vec![0usize; r + 2];
    for &d in &dists {
        starts[d as usize + 1] += 1;
    }
    for b in 1..starts.len() {
        starts[b] += starts[b - 1];
    }
    let mut ranking = vec![0u32; dists.len()];
    for (i, &d) in dists.iter().enumerate() {
        ranking[starts[d as usize]] = i as u32;
        starts[d as usize] += 1;
    }
    ranking
}

fn relevance_mask(ranking: &[u32], relevant: &[u32]) -> Vec<bool> {
    let size = ranking
        .iter()
        .chain(relevant)
        .map(|&i| i as usize + 1)
        .max()
        .unwrap_or(0);
    let mut mask = vec![false; size];
    for &i in relevant {
        mask[i as usize] = true;
    }
    mask
}

/// `(1/|relevant|) · Σ_hits precision@rank(hit)`.
pub fn average_precision(ranking: &[u32], relevant: &[u32]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric(
            "average precision with no relevant items".into(),
        ));
    }
    let mask = relevance_mask(ranking, relevant);
    Ok(ap_with_mask(ranking, &mask, relevant.len()))
}

fn ap_with_mask(ranking: &[u32], mask: &[bool], n_relevant: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &i) in ranking.iter().enumerate() {
        if mask[i as usize] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
            if hits == n_relevant {
                break;
            }
        }
    }
    sum / n_relevant as f64
}

fn hits_at(ranking: &[u32], relevant: &[u32], k: usize) -> Result<usize> {
    if k == 0 || k > ranking.len() {
        return Err(Error::arg(format!("K = {k} outside 1..={}", ranking.len())));
    }
    let mask = relevance_mask(ranking, relevant);
    Ok(ranking[..k].iter().filter(|&&i| mask[i as usize]).count())
}

pub fn precision_at(ranking: &[u32], relevant: &[u32], k: usize) -> Result<f64> {
    Ok(hits_at(ranking, relevant, k)? as f64 / k as f64)
}

pub fn recall_at(ranking: &[u32], relevant: &[u32], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric(
            "recall with no relevant items".into(),
        ));
    }
    Ok(hits_at(ranking, relevant, k)? as f64 / relevant.len() as f64)
}

/// `1, 2, 5, 10, 20, 50, …` below `base_len`, then `base_len` itself.
pub fn recall_grid(base_len: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut scale = 1usize;
    'outer: loop {
        for m in [1, 2, 5] {
            let k = m * scale;
            if k >= base_len {
                break 'outer;
            }
            grid.push(k);
        }
        scale *= 10;
    }
    if base_len > 0 {
        grid.push(base_len);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub v: f64,
}

/// Query-averaged metrics of one encoded query/base pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub pre100: f64,
    pub recall_curve: Vec<RecallPoint>,
    pub per_query_ap: Vec<f64>,
}

/// mAP, precision@100 (K capped at the base size) and the recall curve.
pub fn evaluate_codes(
    query_codes: &BinaryCodes,
    base_codes: &BinaryCodes,
    truth: &GroundTruth,
) -> Result<RetrievalMetrics> {
    if query_codes.r() != base_codes.r() {
        return Err(Error::arg(format!(
            "query codes have {} bits, base codes {}",
            query_codes.r(),
            base_codes.r()
        )));
    }
    if truth.relevant.len() != query_codes.n() {
        return Err(Error::arg("ground truth and query counts differ"));
    }
    if query_codes.n() == 0 || base_codes.n() == 0 {
        return Err(Error::UndefinedMetric("no queries or empty base".into()));
    }
    let grid = recall_grid(base_codes.n());
    let pre_k = 100.min(base_codes.n());
    let per_query: Vec<(f64, f64, Vec<f64>)> = (0..query_codes.n())
        .into_par_iter()
        .map(|q| {
            let ranking = hamming_rank(query_codes.code(q), base_codes);
            let relevant = &truth.relevant[q];
            if relevant.is_empty() {
                return Err(Error::UndefinedMetric(format!(
                    "query {q} has no relevant items"
                )));
            }
            let mask = relevance_mask(&ranking, relevant);
            let ap = ap_with_mask(&ranking, &mask, relevant.len());
            let mut hits = 0usize;
            let mut curve = Vec::with_capacity(grid.len());
            let mut next = 0;
            let mut pre = 0.0;
            for (pos, &i) in ranking.iter().enumerate() {
                if mask[i as usize] {
                    hits += 1;
                }
                if pos + 1 == pre_k {
                    pre = hits as f64 / pre_k as f64;
                }
                while next < grid.len() && grid[next] == pos + 1 {
                    curve.push(hits as f64 / relevant.len() as f64);
                    next += 1;
                }
            }
            Ok((ap, pre, curve))
        })
        .collect::<Result<_>>()?;
    let nq = per_query.len() as f64;
    let map = per_query.iter().map(|p| p.0).sum::<f64>() / nq;
    let pre100 = per_query.iter().map(|p| p.1).sum::<f64>() / nq;
    let recall_curve = grid
        .iter()
        .enumerate()
        .map(|(g, &k)| RecallPoint {
            k,
            v: per_query.iter().map(|p| p.2[g]).sum::<f64>() / nq,
        })
        .collect();
    Ok(RetrievalMetrics {
        map,
        pre100,
        recall_curve,
        per_query_ap: per_query.into_iter().map(|p| p.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub n_query: usize,
    pub n_train: usize,
    /// Share of the base counted relevant per query.
    pub fraction: f64,
    pub repetitions: usize,
    /// Repetition `i` uses seed `seed + i` for its split and models.
    pub seed: u64,
    /// Mean-center and normalize the whole dataset before splitting.
    pub preprocess: bool,
    pub och: OchParams,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_query: 2000,
            n_train: 10_000,
            fraction: 0.02,
            repetitions: 10,
            seed: 0,
            preprocess: true,
            och: OchParams::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(
        &self,
        n: usize,
        d: usize,
        methods: &[ModelKind],
        bits: &[usize],
    ) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::arg("repetitions must be at least 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::arg(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.n_query == 0 || self.n_query + 1 > n {
            return Err(Error::arg(format!(
                "n_query = {} must lie in 1..{n}",
                self.n_query
            )));
        }
        if self.n_train > n - self.n_query {
            return Err(Error::arg(format!(
                "n_train = {} exceeds the {} base points",
                self.n_train,
                n - self.n_query
            )));
        }
        if methods.is_empty() || bits.is_empty() {
            return Err(Error::arg("need at least one method and one bit length"));
        }
        if bits.iter().any(|&b| b == 0 || b > u32::MAX as usize) {
            return Err(Error::arg("bit lengths must be positive"));
        }
        if methods.contains(&ModelKind::Och) {
            for &r in bits {
                self.och.validate(self.n_train, d, r)?;
            }
        }
        Ok(())
    }
}

/// Averages of one method at one code length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub map: f64,
    pub pre100: f64,
    pub recall_curve: Vec<RecallPoint>,
    pub train_s: f64,
    pub encode_s: f64,
    pub map_std: f64,
    pub pre100_std: f64,
    pub train_s_std: f64,
    pub encode_s_std: f64,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    /// Per-repetition mAP values, in seed order.
    pub map_runs: Vec<f64>,
}

/// JSON shape: `method → bits → cell`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BenchmarkReport {
    pub cells: BTreeMap<String, BTreeMap<u32, CellReport>>,
}

impl BenchmarkReport {
    pub fn cell(&self, method: ModelKind, bits: usize) -> Option<&CellReport> {
        self.cells.get(method.name())?.get(&(bits as u32))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Rows of `method,bits,k,recall`.
    pub fn write_recall_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        writeln!(w, "method,bits,k,recall")?;
        for (method, by_bits) in &self.cells {
            for (bits, cell) in by_bits {
                for p in &cell.recall_curve {
                    writeln!(w, "{method},{bits},{},{}", p.k, p.v)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Default)]
struct CellRuns {
    map: Vec<f64>,
    pre100: Vec<f64>,
    curves: Vec<Vec<RecallPoint>>,
    train_s: Vec<f64>,
    encode_s: Vec<f64>,
}

/// Builds the model for one method, code length and repetition seed.
pub fn fit_model(
    method: ModelKind,
    train: &DataMatrix,
    r: usize,
    och: &OchParams,
    seed: u64,
) -> Result<HashModel> {
    match method {
        ModelKind::Lsh => build_lsh_model(train.d(), r, seed),
        ModelKind::Och => {
            let mut params = och.clone();
            params.train.seed = seed;
            train_och(train, r, &params).map(|t| t.model)
        }
    }
}

/// Repeats split → train → encode → score for every method and code length.
pub fn run_benchmark(
    data: &DataMatrix,
    methods: &[ModelKind],
    bit_lengths: &[usize],
    protocol: &ProtocolConfig,
) -> Result<BenchmarkReport> {
    protocol.validate(data.n(), data.d(), methods, bit_lengths)?;
    let prepared;
    let data = if protocol.preprocess {
        prepared = preprocess(data).map_err(Error::in_stage("preprocessing"))?;
        &prepared
    } else {
        data
    };

    let seeds: Vec<u64> = (0..protocol.repetitions as u64)
        .map(|i| protocol.seed.wrapping_add(i))
        .collect();
    let mut runs: BTreeMap<(ModelKind, usize), CellRuns> = BTreeMap::new();

    for &seed in &seeds {
        let parts = split(data, protocol.n_query, protocol.n_train, seed)?;
        let truth = build_groundtruth(&parts.queries, &parts.base, protocol.fraction)?;
        for &method in methods {
            for &r in bit_lengths {
                let t = Instant::now();
                let model = fit_model(method, &parts.train, r, &protocol.och, seed)?;
                let train_s = t.elapsed().as_secs_f64();

                let t = Instant::now();
                let base_codes = encode(&model, &parts.base)?;
                let query_codes = encode(&model, &parts.queries)?;
                let encode_s = t.elapsed().as_secs_f64();

                let m = evaluate_codes(&query_codes, &base_codes, &truth)?;
                log::info!(
                    "seed {seed} {method} {r} bits: mAP {:.4} pre@100 {:.4}",
                    m.map,
                    m.pre100
                );
                let cell = runs.entry((method, r)).or_default();
                cell.map.push(m.map);
                cell.pre100.push(m.pre100);
                cell.curves.push(m.recall_curve);
                cell.train_s.push(train_s);
                cell.encode_s.push(encode_s);
            }
        }
    }

    let mut report = BenchmarkReport::default();
    for ((method, r), c) in runs {
        let (map, map_std) = mean_std(&c.map);
        let (pre100, pre100_std) = mean_std(&c.pre100);
        let (train_s, train_s_std) = mean_std(&c.train_s);
        let (encode_s, encode_s_std) = mean_std(&c.encode_s);
        let recall_curve = c.curves[0]
            .iter()
            .enumerate()
            .map(|(g, p)| RecallPoint {
                k: p.k,
                v: c.curves.iter().map(|curve| curve[g].v).sum::<f64>() / c.curves.len() as f64,
            })
            .collect();
        report
            .cells
            .entry(method.name().to_string())
            .or_default()
            .insert(
                r as u32,
                CellReport {
                    map,
                    pre100,
                    recall_curve,
                    train_s,
                    encode_s,
                    map_std,
                    pre100_std,
                    train_s_std,
                    encode_s_std,
                    repetitions: seeds.len(),
                    seeds: seeds.clone(),
                    map_runs: c.map,
                },
            );
    }
    Ok(report)
}
