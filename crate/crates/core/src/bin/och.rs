use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use och::dataset::{gen_synthetic, load_auto, preprocess, write_fvecs, DataMatrix};
use och::encoder::{encode, BinaryCodes, HashModel, ModelKind};
use och::evaluation::{
    build_groundtruth, evaluate_codes, fit_model, run_benchmark, ProtocolConfig, RecallPoint,
};
use och::optimizer::TrainConfig;
use och::pipeline::{train_och, OchParams};
use och::{Error, Result};

#[derive(Parser)]
#[command(name = "och", version, about = "Ordinal constraint hashing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a Gaussian-mixture dataset as fvecs.
    Synth(SynthArgs),
    /// Learn a hash model from a dataset.
    Train(TrainArgs),
    /// Encode a dataset into packed binary codes.
    Encode(EncodeArgs),
    /// Score Hamming ranking against Euclidean ground truth.
    Eval(EvalArgs),
    /// Repeated split/train/encode/score over methods and code lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Standard deviation of every cluster; the default matches the spread
    /// of the cluster means.
    #[arg(long, default_value_t = 0.577)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Flags shared by `train` and `bench`; each one overrides the config file.
#[derive(Args, Default)]
struct CommonArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset (.fvecs or .csv).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated code lengths.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<usize>>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    dsvd: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Use the data as loaded instead of mean-centering and normalizing it.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// OCH or LSH.
    #[arg(long)]
    method: Option<String>,
    /// Model file to write.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Per-iteration objective trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    raw: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model used to encode both sides; alternative to the code files.
    #[arg(long, conflicts_with_all = ["base_codes", "query_codes"])]
    model: Option<PathBuf>,
    #[arg(long, requires = "query_codes")]
    base_codes: Option<PathBuf>,
    #[arg(long, requires = "base_codes")]
    query_codes: Option<PathBuf>,
    /// Base vectors, used for ground truth.
    #[arg(long)]
    base: PathBuf,
    /// Query vectors; defaults to the base itself.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    fraction: f64,
    #[arg(long)]
    raw: bool,
    /// JSON metrics file; printed to stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated methods (OCH, LSH).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Output directory for report.json and recall.csv.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Flat run configuration. Unset keys keep their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    synth_clusters: usize,
    synth_n: usize,
    synth_d: usize,
    synth_spread: f64,
    synth_seed: u64,
    preprocess: bool,
    n_query: usize,
    n_train: usize,
    fraction: f64,
    centers: usize,
    d_svd: usize,
    kmeans_iters: usize,
    bits: Vec<usize>,
    methods: Vec<String>,
    eta: f64,
    max_iters: usize,
    batch_size: usize,
    tol: f64,
    window: usize,
    repetitions: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let och = OchParams::default();
        let protocol = ProtocolConfig::default();
        Self {
            data: None,
            synth_clusters: 10,
            synth_n: 0,
            synth_d: 0,
            synth_spread: 0.577,
            synth_seed: 0,
            preprocess: true,
            n_query: protocol.n_query,
            n_train: protocol.n_train,
            fraction: protocol.fraction,
            centers: och.centers,
            d_svd: och.d_svd,
            kmeans_iters: och.kmeans_iters,
            bits: vec![32],
            methods: vec!["OCH".into(), "LSH".into()],
            eta: och.train.eta,
            max_iters: och.train.max_iters,
            batch_size: och.train.batch_size,
            tol: och.train.tol,
            window: och.train.window,
            repetitions: protocol.repetitions,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Argument(format!("config {}: {e}", p.display())))
            }
        }
    }

    fn apply(&mut self, a: &CommonArgs) {
        if let Some(v) = &a.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = &a.bits {
            self.bits = v.clone();
        }
        if let Some(v) = a.centers {
            self.centers = v;
        }
        if let Some(v) = a.dsvd {
            self.d_svd = v;
        }
        if let Some(v) = a.eta {
            self.eta = v;
        }
        if let Some(v) = a.iters {
            self.max_iters = v;
        }
        if let Some(v) = a.batch {
            self.batch_size = v;
        }
        if let Some(v) = a.tol {
            self.tol = v;
        }
        if a.raw {
            self.preprocess = false;
        }
    }

    fn och_params(&self) -> OchParams {
        OchParams {
            centers: self.centers,
            d_svd: self.d_svd,
            kmeans_iters: self.kmeans_iters,
            train: TrainConfig {
                eta: self.eta,
                max_iters: self.max_iters,
                batch_size: self.batch_size,
                tol: self.tol,
                seed: self.seed,
                window: self.window,
                ..TrainConfig::default()
            },
        }
    }

    fn methods(&self) -> Result<Vec<ModelKind>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    /// Loads `data`, or synthesizes one when only `synth_*` keys are set.
    fn dataset(&self) -> Result<DataMatrix> {
        match &self.data {
            Some(p) => load_auto(p),
            None if self.synth_n > 0 && self.synth_d > 0 => gen_synthetic(
                self.synth_clusters,
                self.synth_n,
                self.synth_d,
                self.synth_spread,
                self.synth_seed,
            ),
            None => Err(Error::Argument(
                "no dataset: pass --data or set synth_n and synth_d in the config".into(),
            )),
        }
    }
}

fn prepared(data: DataMatrix, preprocess_it: bool) -> Result<DataMatrix> {
    if preprocess_it {
        preprocess(&data)
    } else {
        Ok(data)
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let data = gen_synthetic(a.clusters, a.n, a.d, a.spread, a.seed)?;
    write_fvecs(&a.out, &data)?;
    log::info!(
        "wrote {} vectors of dimension {} to {}",
        data.n(),
        data.d(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply(&a.common);
    let method: ModelKind = a.method.as_deref().unwrap_or("OCH").parse()?;
    let out = a
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Argument("missing --out model path".into()))?;
    let &[r] = cfg.bits.as_slice() else {
        return Err(Error::Argument(format!(
            "train takes exactly one code length, got {:?}",
            cfg.bits
        )));
    };
    let params = cfg.och_params();
    if r == 0 {
        return Err(Error::Argument("code length must be positive".into()));
    }
    if method == ModelKind::Och {
        // shape-independent checks first, so a bad r fails before any loading
        params.train.validate()?;
        if r < params.d_svd {
            return Err(Error::Argument(format!(
                "code length r = {r} is below d_svd = {}; V Vᵀ = I needs r >= d_svd",
                params.d_svd
            )));
        }
    }

    let data = prepared(cfg.dataset()?, cfg.preprocess)?;
    let model = match method {
        ModelKind::Och => {
            params.validate(data.n(), data.d(), r)?;
            let trained = train_och(&data, r, &params)?;
            log::info!(
                "{} triplets, {} iterations, final objective {:.6}, {:.2}s",
                trained.triplet_count,
                trained.trace.iterations,
                trained.trace.final_full_objective,
                trained.timings.total_s
            );
            if let Some(p) = &a.trace {
                trained.trace.write_csv(p)?;
            }
            trained.model
        }
        ModelKind::Lsh => fit_model(ModelKind::Lsh, &data, r, &params, cfg.seed)?,
    };
    model.save(&out)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let model = HashModel::load(&a.model)?;
    let data = prepared(load_auto(&a.data)?, !a.raw)?;
    let codes = encode(&model, &data)?;
    codes.save(&a.out)
}

#[derive(Serialize)]
struct EvalReport {
    map: f64,
    pre100: f64,
    recall_curve: Vec<RecallPoint>,
    n_queries: usize,
    n_base: usize,
    bits: usize,
    fraction: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let base = prepared(load_auto(&a.base)?, !a.raw)?;
    let queries = match &a.queries {
        Some(p) => prepared(load_auto(p)?, !a.raw)?,
        None => base.clone(),
    };
    let (base_codes, query_codes) = match (&a.model, &a.base_codes, &a.query_codes) {
        (Some(m), _, _) => {
            let model = HashModel::load(m)?;
            (encode(&model, &base)?, encode(&model, &queries)?)
        }
        (None, Some(b), Some(q)) => (BinaryCodes::load(b)?, BinaryCodes::load(q)?),
        _ => {
            return Err(Error::Argument(
                "pass --model, or both --base-codes and --query-codes".into(),
            ))
        }
    };
    if base_codes.n() != base.n() || query_codes.n() != queries.n() {
        return Err(Error::Argument(format!(
            "code counts ({} base, {} query) do not match the vectors ({} base, {} query)",
            base_codes.n(),
            query_codes.n(),
            base.n(),
            queries.n()
        )));
    }
    let truth = build_groundtruth(&queries, &base, a.fraction)?;
    let m = evaluate_codes(&query_codes, &base_codes, &truth)?;
    let report = EvalReport {
        map: m.map,
        pre100: m.pre100,
        recall_curve: m.recall_curve,
        n_queries: queries.n(),
        n_base: base.n(),
        bits: base_codes.r(),
        fraction: a.fraction,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.apply(&a.common);
    if let Some(v) = &a.methods {
        cfg.methods = v.clone();
    }
    if let Some(v) = a.reps {
        cfg.repetitions = v;
    }
    if let Some(v) = a.n_query {
        cfg.n_query = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.fraction {
        cfg.fraction = v;
    }
    let out = a
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Argument("missing --out directory".into()))?;
    let methods = cfg.methods()?;
    let protocol = ProtocolConfig {
        n_query: cfg.n_query,
        n_train: cfg.n_train,
        fraction: cfg.fraction,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
        preprocess: cfg.preprocess,
        och: cfg.och_params(),
    };

    let data = cfg.dataset()?;
    protocol.validate(data.n(), data.d(), &methods, &cfg.bits)?;
    let report = run_benchmark(&data, &methods, &cfg.bits, &protocol)?;
    fs::create_dir_all(&out)?;
    report.write_json(out.join("report.json"))?;
    report.write_recall_csv(out.join("recall.csv"))?;
    for (method, by_bits) in &report.cells {
        for (bits, cell) in by_bits {
            println!(
                "{method:>4} {bits:>4} bits  mAP {:.4} ± {:.4}  pre@100 {:.4}  train {:.2}s",
                cell.map, cell.map_std, cell.pre100, cell.train_s
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
