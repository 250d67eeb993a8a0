//! One PASS/FAIL line per acceptance criterion, written past the test
//! harness capture. The test fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use och::dataset::{gen_synthetic, load_auto, preprocess, DataMatrix};
use och::encoder::{BinaryCodes, ModelKind};
use och::evaluation::{
    average_precision, build_groundtruth, precision_at, recall_at, run_benchmark, ProtocolConfig,
};
use och::ocp::{embed, EmbeddedPoints};
use och::optimizer::{grad_objective, init_stiefel, train, TrainConfig};
use och::ordinal_graph::{
    build_affinity, build_dissimilarity, extract_triplets, ordinal_compare, select_sigma, Ordinal,
    Triplet,
};
use och::pipeline::{train_och, OchParams};

/// Standard deviation equal to that of a mean coordinate drawn from U(-1, 1).
const SYNTH_SPREAD: f64 = 0.577_350_269_189_625_8;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(limit: Duration, elapsed: Duration, outcome: Outcome) -> Outcome {
    match outcome {
        Outcome::Pass(d) if elapsed > limit => Outcome::Fail(format!(
            "{d}; took {:.1}s, limit {:.0}s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        )),
        Outcome::Pass(d) => Outcome::Pass(format!("{d}; {:.2}s", elapsed.as_secs_f64())),
        other => other,
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn manifold_feasibility() -> Outcome {
    let data = preprocess(&gen_synthetic(10, 5000, 64, SYNTH_SPREAD, 7).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    let mut iters = Vec::new();
    for r in [32, 64] {
        let params = OchParams {
            train: TrainConfig {
                max_iters: 500,
                tol: 0.0,
                seed: 1,
                ..TrainConfig::default()
            },
            ..OchParams::default()
        };
        let out = train_och(&data, r, &params).unwrap();
        worst = worst.max(out.trace.max_feasibility_error);
        iters.push(out.trace.iterations);
    }
    pass_if(
        worst < 1e-8 && iters.iter().all(|&i| i == 500),
        format!("max ‖VVᵀ−I‖∞ = {worst:.2e} over {iters:?} iterations (r = 32, 64)"),
    )
}

/// Objective recomputed from scratch on plain vectors.
fn reference_objective(
    v: &[Vec<f64>],
    centers: &[Vec<f64>],
    triplets: &[(usize, usize, usize)],
) -> f64 {
    let r = v[0].len();
    let codes: Vec<Vec<f64>> = centers
        .iter()
        .map(|a| {
            (0..r)
                .map(|k| {
                    a.iter()
                        .zip(v)
                        .map(|(ai, row)| ai * row[k])
                        .sum::<f64>()
                        .tanh()
                })
                .collect()
        })
        .collect();
    let dist = |i: usize, j: usize| {
        0.5 * (r as f64
            - codes[i]
                .iter()
                .zip(&codes[j])
                .map(|(x, y)| x * y)
                .sum::<f64>())
    };
    triplets
        .iter()
        .map(|&(i, j, k)| 1.0 / (1.0 + (dist(i, k) - dist(i, j)).exp()))
        .sum()
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for inst in 0..100u64 {
        let d_svd = rng.random_range(1..=8usize);
        let r = rng.random_range(d_svd..=8usize);
        let l = rng.random_range(3..=8usize);
        let m = rng.random_range(1..=10usize);
        let centers: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                (0..d_svd)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        // distinct triplets, never both (i; j, k) and (i; k, j): a strict
        // ordering cannot produce both, and together their terms sum to 1
        let m = m.min(l * (l - 1) * (l - 2) / 2);
        let mut triplets: Vec<(usize, usize, usize)> = Vec::new();
        while triplets.len() < m {
            let (i, j, k) = (
                rng.random_range(0..l),
                rng.random_range(0..l),
                rng.random_range(0..l),
            );
            if i != j
                && j != k
                && i != k
                && !triplets
                    .iter()
                    .any(|&(a, b, c)| a == i && b.min(c) == j.min(k) && b.max(c) == j.max(k))
            {
                triplets.push((i, j, k));
            }
        }
        let v = init_stiefel(d_svd, r, inst).unwrap().into_matrix();
        let batch: Vec<Triplet> = triplets
            .iter()
            .map(|&(i, j, k)| Triplet::new(i, j, k))
            .collect();
        let emb = EmbeddedPoints::from_vectors(&centers).unwrap();
        let g = grad_objective(&v, &batch, &emb).unwrap();

        let base: Vec<Vec<f64>> = (0..d_svd)
            .map(|a| (0..r).map(|b| v[(a, b)]).collect())
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..d_svd {
            for b in 0..r {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[a][b] += h;
                minus[a][b] -= h;
                let fd = (reference_objective(&plus, &centers, &triplets)
                    - reference_objective(&minus, &centers, &triplets))
                    / (2.0 * h);
                num += (g[(a, b)] - fd).powi(2);
                den += fd * fd;
            }
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        worst = worst.max(rel);
    }
    pass_if(
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 100 instances"),
    )
}

fn tog_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pts = DataMatrix::from_rows(&rows).unwrap();
    let s = build_affinity(&pts, select_sigma(&pts).unwrap()).unwrap();
    let ds = build_dissimilarity(&s).unwrap();
    let (mut checked, mut agree) = (0usize, 0usize);
    for i in 0..20 {
        for j in 0..20 {
            for k in 0..20 {
                for l in 0..20 {
                    if i == j || k == l {
                        continue;
                    }
                    let gap = sq(&rows[i], &rows[j]).sqrt() - sq(&rows[k], &rows[l]).sqrt();
                    if gap.abs() < 1e-9 {
                        continue;
                    }
                    checked += 1;
                    let expect = if gap < 0.0 {
                        Ordinal::Less
                    } else {
                        Ordinal::GreaterOrEqual
                    };
                    if ordinal_compare(&s, &ds, i, j, k, l).unwrap() == expect {
                        agree += 1;
                    }
                }
            }
        }
    }
    pass_if(
        agree == checked,
        format!("{agree}/{checked} quadruples agree"),
    )
}

fn ocp_isometry() -> Outcome {
    let d = 12;
    let data = preprocess(&gen_synthetic(3, 60, d, 0.5, 5).unwrap()).unwrap();
    let proj = och::ocp::svd_project(&och::ocp::compute_gram(&data).unwrap(), d).unwrap();
    let emb = embed(&proj, &data).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..data.n() {
        for j in (i + 1)..data.n() {
            let orig = sq(data.row(i), data.row(j)).sqrt();
            let got = sq(&emb.column(i), &emb.column(j)).sqrt();
            worst = worst.max((orig - got).abs());
        }
    }
    pass_if(
        worst < 1e-6,
        format!("max pairwise distance change {worst:.2e} at d_svd = d = {d}"),
    )
}

fn hamming_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0usize;
    for r in [32usize, 37, 64, 128] {
        for _ in 0..1000 {
            let rows: Vec<Vec<bool>> = (0..2)
                .map(|_| (0..r).map(|_| rng.random()).collect())
                .collect();
            let codes = BinaryCodes::from_bits(&rows).unwrap();
            let (a, b) = (codes.signs(0), codes.signs(1));
            let inner: i64 = a.iter().zip(&b).map(|(&x, &y)| x as i64 * y as i64).sum();
            if 2 * codes.hamming(0, 1) as i64 != r as i64 - inner {
                mismatches += 1;
            }
        }
    }
    pass_if(
        mismatches == 0,
        format!("{mismatches} mismatches in 4000 pairs"),
    )
}

fn retrieval_metric_oracles() -> Outcome {
    let ap = average_precision(&[10, 11, 12, 13], &[10, 12]).unwrap();
    let ap_exact = ap == (1.0 + 2.0 / 3.0) / 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut monotone = true;
    for _ in 0..50 {
        let n = rng.random_range(2..200u32);
        let mut ranking: Vec<u32> = (0..n).collect();
        for i in (1..ranking.len()).rev() {
            ranking.swap(i, rng.random_range(0..=i));
        }
        let mut relevant: Vec<u32> = (0..n).filter(|_| rng.random::<f64>() < 0.2).collect();
        if relevant.is_empty() {
            relevant.push(0);
        }
        let mut prev = 0.0;
        for k in 1..=n as usize {
            let rc = recall_at(&ranking, &relevant, k).unwrap();
            monotone &= rc >= prev;
            prev = rc;
        }
        monotone &= prev == 1.0;
    }

    // rank the base by true distance; relevance is a prefix of that ranking
    let base = gen_synthetic(4, 400, 6, 0.4, 8).unwrap();
    let queries = gen_synthetic(4, 20, 6, 0.4, 9).unwrap();
    let truth = build_groundtruth(&queries, &base, 0.05).unwrap();
    let mut map = 0.0;
    for q in 0..queries.n() {
        let mut ranking: Vec<u32> = (0..base.n() as u32).collect();
        ranking.sort_by(|&a, &b| {
            sq(queries.row(q), base.row(a as usize))
                .total_cmp(&sq(queries.row(q), base.row(b as usize)))
                .then(a.cmp(&b))
        });
        map += average_precision(&ranking, &truth.relevant[q]).unwrap();
    }
    map /= queries.n() as f64;
    let p = precision_at(&[0, 1, 2, 3], &[1, 3], 4).unwrap();

    pass_if(
        ap_exact && monotone && map == 1.0 && p == 0.5,
        format!("AP = {ap} (5/6 exact: {ap_exact}), recall monotone: {monotone}, self mAP = {map}"),
    )
}

fn end_to_end_ordering() -> Outcome {
    let data = gen_synthetic(10, 5000, 64, SYNTH_SPREAD, 42).unwrap();
    let protocol = ProtocolConfig {
        n_query: 500,
        n_train: 2000,
        fraction: 0.02,
        repetitions: 5,
        seed: 0,
        ..ProtocolConfig::default()
    };
    let report = run_benchmark(&data, &[ModelKind::Och, ModelKind::Lsh], &[32], &protocol).unwrap();
    let o = report.cell(ModelKind::Och, 32).unwrap();
    let l = report.cell(ModelKind::Lsh, 32).unwrap();
    pass_if(
        o.map > l.map,
        format!(
            "mAP OCH {:.4} ± {:.4} vs LSH {:.4} ± {:.4} (32 bits, 5 seeds)",
            o.map, o.map_std, l.map, l.map_std
        ),
    )
}

fn descent_behavior() -> Outcome {
    let rows = vec![vec![0.0], vec![1.0], vec![3.0]];
    let pts = DataMatrix::from_rows(&rows).unwrap();
    let s = build_affinity(&pts, select_sigma(&pts).unwrap()).unwrap();
    let triplets = extract_triplets(&s, &build_dissimilarity(&s).unwrap());
    let centers = EmbeddedPoints::from_vectors(&rows).unwrap();
    let mut toy_ok = 0;
    let mut toy = Vec::new();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&centers, triplets.as_slice(), 8, &config).unwrap();
        if trace.final_full_objective <= trace.initial_full_objective {
            toy_ok += 1;
        }
        toy.push(format!(
            "{:.4}→{:.4}",
            trace.initial_full_objective, trace.final_full_objective
        ));
    }

    // on the toy the center at 0 hashes to zero and the two other triplets
    // are mirror images, so the objective is 1.5 for every V; this instance
    // has a V-dependent objective
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let x: Vec<f64> = (0..8)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let pts = DataMatrix::from_rows(&rows).unwrap();
    let s = build_affinity(&pts, select_sigma(&pts).unwrap()).unwrap();
    let triplets = extract_triplets(&s, &build_dissimilarity(&s).unwrap());
    let centers = EmbeddedPoints::from_vectors(&rows).unwrap();
    let mut random_ok = 0;
    let mut drops = Vec::new();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            eta: 1e-3,
            max_iters: 100,
            tol: 0.0,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&centers, triplets.as_slice(), 16, &config).unwrap();
        if trace.final_full_objective <= trace.initial_full_objective {
            random_ok += 1;
        }
        drops.push(format!(
            "{:.3e}",
            trace.initial_full_objective - trace.final_full_objective
        ));
    }
    pass_if(
        toy_ok >= 4 && random_ok >= 4,
        format!(
            "toy {{0,1,3}}: {toy_ok}/5 seeds without increase [{}]; 30 unit-norm centers, eta 1e-3, 100 iterations: {random_ok}/5, decreases [{}]",
            toy.join(", "),
            drops.join(", ")
        ),
    )
}

fn complexity_trend() -> Outcome {
    let full = preprocess(&gen_synthetic(10, 20_000, 64, SYNTH_SPREAD, 11).unwrap()).unwrap();
    let half = preprocess(&full.select(&(0..10_000).collect::<Vec<_>>())).unwrap();
    let params = OchParams {
        centers: 100,
        kmeans_iters: 20,
        train: TrainConfig {
            max_iters: 200,
            tol: 0.0,
            ..TrainConfig::default()
        },
        ..OchParams::default()
    };
    let time = |data: &DataMatrix| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                train_och(data, 32, &params).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (t10, t20) = (time(&half), time(&full));
    let ratio = t20 / t10;
    pass_if(
        ratio < 2.5,
        format!("train time {t10:.3}s at n = 10000, {t20:.3}s at n = 20000, ratio {ratio:.2}"),
    )
}

fn labelme_reproduction() -> Outcome {
    let Ok(path) = std::env::var("OCH_LABELME_FVECS") else {
        return Outcome::Skip("set OCH_LABELME_FVECS to a LabelMe GIST fvecs file".into());
    };
    let reps = std::env::var("OCH_LABELME_REPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let data = load_auto(&path).unwrap();
    let protocol = ProtocolConfig {
        repetitions: reps,
        ..ProtocolConfig::default()
    };
    let report = run_benchmark(&data, &[ModelKind::Och, ModelKind::Lsh], &[32], &protocol).unwrap();
    let o = report.cell(ModelKind::Och, 32).unwrap().map;
    let l = report.cell(ModelKind::Lsh, 32).unwrap().map;
    pass_if(
        (o - 0.3140).abs() <= 0.05 && o > l,
        format!("OCH mAP {o:.4} (target 0.3140 ± 0.05), LSH mAP {l:.4}, {reps} repetitions"),
    )
}

fn report(line: &str) {
    // direct handle writes are not captured by the test harness
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: Vec<Criterion> = vec![
        (
            "manifold feasibility",
            Some(Duration::from_secs(60)),
            manifold_feasibility,
        ),
        (
            "gradient oracle",
            Some(Duration::from_secs(10)),
            gradient_oracle,
        ),
        (
            "TOG correctness",
            Some(Duration::from_secs(5)),
            tog_correctness,
        ),
        ("OCP isometry at full rank", None, ocp_isometry),
        ("Hamming identity", None, hamming_identity),
        ("retrieval-metric oracles", None, retrieval_metric_oracles),
        (
            "end-to-end ordering",
            Some(Duration::from_secs(300)),
            end_to_end_ordering,
        ),
        ("descent behavior", None, descent_behavior),
        ("complexity trend", None, complexity_trend),
        (
            "LabelMe reproduction (optional)",
            None,
            labelme_reproduction,
        ),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let outcome = match limit {
            Some(l) => within(l, start.elapsed(), outcome),
            None => outcome,
        };
        match outcome {
            Outcome::Pass(d) => report(&format!("PASS  {name}: {d}")),
            Outcome::Skip(d) => report(&format!("SKIP  {name}: {d}")),
            Outcome::Fail(d) => {
                report(&format!("FAIL  {name}: {d}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
