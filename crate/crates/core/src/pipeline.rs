//! End-to-end training: K-means → projection → triplets → manifold SGD.

use std::time::Instant;

use crate::clustering::{kmeans, DEFAULT_CENTERS, DEFAULT_KMEANS_ITERS};
use crate::dataset::DataMatrix;
use crate::encoder::{build_och_model, HashModel};
use crate::error::{Error, Result};
use crate::ocp::{
    compute_gram, embed, svd_project, EmbeddedPoints, OrdinalProjection, DEFAULT_D_SVD,
};
use crate::optimizer::{train, TrainConfig, TrainTrace};
use crate::ordinal_graph::{build_affinity, build_dissimilarity, extract_triplets, select_sigma};

#[derive(Debug, Clone, PartialEq)]
pub struct OchParams {
    /// Number of K-means centers `L`.
    pub centers: usize,
    pub d_svd: usize,
    pub kmeans_iters: usize,
    /// SGD settings; `train.seed` also seeds K-means.
    pub train: TrainConfig,
}

impl Default for OchParams {
    fn default() -> Self {
        Self {
            centers: DEFAULT_CENTERS,
            d_svd: DEFAULT_D_SVD,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            train: TrainConfig::default(),
        }
    }
}

impl OchParams {
    /// Checks every downstream precondition that is known before training.
    pub fn validate(&self, n_train: usize, d: usize, r: usize) -> Result<()> {
        if self.d_svd == 0 || self.d_svd > d {
            return Err(Error::arg(format!(
                "d_svd = {} must lie in 1..={d}",
                self.d_svd
            )));
        }
        if r < self.d_svd {
            return Err(Error::arg(format!(
                "code length r = {r} is below d_svd = {}; V Vᵀ = I needs r >= d_svd",
                self.d_svd
            )));
        }
        if self.centers < 3 {
            return Err(Error::arg("at least 3 centers are needed to form triplets"));
        }
        if self.centers > n_train {
            return Err(Error::arg(format!(
                "{} centers exceed the {n_train} training points",
                self.centers
            )));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::arg("kmeans_iters must be at least 1"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub kmeans_s: f64,
    pub projection_s: f64,
    pub triplets_s: f64,
    pub sgd_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedOch {
    pub model: HashModel,
    pub trace: TrainTrace,
    pub projection: OrdinalProjection,
    pub embedded_centers: EmbeddedPoints,
    pub triplet_count: usize,
    pub sigma: f64,
    pub timings: StageTimings,
}

/// Learns an `r`-bit OCH model from (preprocessed) training data.
pub fn train_och(train_data: &DataMatrix, r: usize, params: &OchParams) -> Result<TrainedOch> {
    params.validate(train_data.n(), train_data.d(), r)?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let centers = kmeans(
        train_data,
        params.centers,
        params.kmeans_iters,
        params.train.seed,
    )
    .map_err(Error::in_stage("k-means"))?;
    timings.kmeans_s = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let projection = compute_gram(train_data)
        .and_then(|g| svd_project(&g, params.d_svd))
        .map_err(Error::in_stage("ordinal constraint projection"))?;
    let embedded =
        embed(&projection, &centers.centers).map_err(Error::in_stage("center embedding"))?;
    timings.projection_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let embedded_rows = embedded_as_rows(&embedded)?;
    let sigma = select_sigma(&embedded_rows).map_err(Error::in_stage("bandwidth selection"))?;
    let affinity =
        build_affinity(&embedded_rows, sigma).map_err(Error::in_stage("affinity graph"))?;
    let dissimilarity =
        build_dissimilarity(&affinity).map_err(Error::in_stage("dissimilarity graph"))?;
    let triplets = extract_triplets(&affinity, &dissimilarity);
    timings.triplets_s = t.elapsed().as_secs_f64();
    log::info!(
        "{} centers, sigma {sigma:.4}, {} triplets",
        params.centers,
        triplets.len()
    );

    let t = Instant::now();
    let (v, trace) = train(&embedded, triplets.as_slice(), r, &params.train)
        .map_err(Error::in_stage("manifold SGD"))?;
    timings.sgd_s = t.elapsed().as_secs_f64();

    let model = build_och_model(&projection, &v, r).map_err(Error::in_stage("model assembly"))?;
    timings.total_s = start.elapsed().as_secs_f64();

    Ok(TrainedOch {
        model,
        trace,
        projection,
        embedded_centers: embedded,
        triplet_count: triplets.len(),
        sigma,
        timings,
    })
}

/// Embedded points as a row-major matrix (one row per point).
pub fn embedded_as_rows(points: &EmbeddedPoints) -> Result<DataMatrix> {
    let t = points.vectors.transpose();
    let mut flat = Vec::with_capacity(t.len());
    for row in t.row_iter() {
        flat.extend(row.iter());
    }
    DataMatrix::from_flat(points.len(), points.dim(), flat)
}
