//! Weight-space principal components and feature-space projections.
//!
//! The principal components of a weight matrix are its left singular vectors.

use crate::data::Sample;
use crate::error::{PegoError, Result};
use crate::numerics::{cosine_similarity, explained_variance_ratio, svd, Matrix};
use crate::vit::{ProjKind, VitModel};

/// Singular values at or below this fraction of the largest do not count
/// towards the numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PcReport {
    /// Explained variance ratio of the top components of the update.
    pub evr_top_k: Vec<f64>,
    /// `|cos|` between the top PCs of the weight (rows) and of the update
    /// (columns).
    pub pc_cosine: Matrix,
    pub numerical_rank: usize,
    pub rank_threshold: f64,
}

impl PcReport {
    pub fn mean_abs_cosine(&self) -> f64 {
        self.pc_cosine.sum() / self.pc_cosine.len() as f64
    }
}

pub fn weight_pc_report(w_pre: &Matrix, delta_w: &Matrix, k: usize) -> Result<PcReport> {
    if w_pre.shape() != delta_w.shape() {
        return Err(PegoError::Shape {
            op: "weight_pc_report",
            left: w_pre.shape(),
            right: delta_w.shape(),
        });
    }
    let p = w_pre.rows().min(w_pre.cols());
    if k == 0 || k > p {
        return Err(PegoError::Input(format!("k must lie in 1..={p}, got {k}")));
    }
    if delta_w.max_abs() == 0.0 {
        return Err(PegoError::Degenerate("weight update is identically zero".into()));
    }
    let sw = svd(w_pre)?;
    let sd = svd(delta_w)?;
    let evr_top_k = explained_variance_ratio(&sd, k)?;
    let mut pc_cosine = Matrix::zeros(k, k);
    for i in 0..k {
        let u = sw.left_vector(i);
        for j in 0..k {
            pc_cosine[(i, j)] = cosine_similarity(&u, &sd.left_vector(j))?.abs();
        }
    }
    Ok(PcReport {
        evr_top_k,
        pc_cosine,
        numerical_rank: sd.numerical_rank(RANK_THRESHOLD),
        rank_threshold: RANK_THRESHOLD,
    })
}

/// Frozen weight and summed adapter update of one adapted projection.
pub fn layer_weights(model: &VitModel, block: usize, kind: ProjKind) -> Result<(Matrix, Matrix)> {
    let proj = model
        .projection(block, kind)
        .ok_or_else(|| PegoError::Input(format!("no block {block}")))?;
    let layer = proj
        .as_adapted()
        .ok_or_else(|| PegoError::Input(format!("blocks.{block}.attn.{} carries no adapters", kind.name())))?;
    Ok((layer.base.weight.clone(), layer.group.delta()))
}

/// Parses `BLOCK.PROJ`, e.g. `1.wv`.
pub fn parse_layer(spec: &str) -> Result<(usize, ProjKind)> {
    let bad = || PegoError::Config(format!("layer must look like `1.wv`, got `{spec}`"));
    let (b, p) = spec.split_once('.').ok_or_else(bad)?;
    let block = b.parse().map_err(|_| bad())?;
    let kind = match p {
        "wq" => ProjKind::Query,
        "wv" => ProjKind::Value,
        _ => return Err(bad()),
    };
    Ok((block, kind))
}

/// The value projection of the last block.
pub fn default_layer(model: &VitModel) -> (usize, ProjKind) {
    (model.blocks.len().saturating_sub(1), ProjKind::Value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub model_tag: String,
    pub label: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjection {
    pub points: Vec<ProjectedPoint>,
    /// Variance captured by each of the two axes.
    pub axis_variance: [f64; 2],
}

/// Projects the features of every (model, sample) pair onto the top two
/// principal axes of the pooled, mean-centered feature set.
pub fn feature_projection(models: &[(String, &VitModel)], samples: &[Sample]) -> Result<FeatureProjection> {
    if samples.len() < 2 {
        return Err(PegoError::Input("feature projection needs at least 2 samples".into()));
    }
    if models.is_empty() {
        return Err(PegoError::Input("no models to project".into()));
    }
    let images: Vec<&Matrix> = samples.iter().map(|s| &s.image).collect();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = None;
    for (_, m) in models {
        let f = m.features_batch(&images)?.transpose();
        if *dim.get_or_insert(f.cols()) != f.cols() {
            return Err(PegoError::Input("models disagree on feature width".into()));
        }
        rows.extend_from_slice(f.as_slice());
    }
    let d = dim.expect("at least one model");
    let n = rows.len() / d;
    let mut x = Matrix::from_vec(n, d, rows)?;
    for j in 0..d {
        let mean = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[(i, j)] -= mean;
        }
    }
    let s = svd(&x)?;
    if s.singular_values.len() < 2 || s.singular_values[1] <= 1e-12 * s.singular_values[0].max(1e-300) {
        return Err(PegoError::Degenerate("feature covariance has rank below 2".into()));
    }
    let v = &s.right_vectors;
    let mut points = Vec::with_capacity(n);
    for (mi, (tag, _)) in models.iter().enumerate() {
        for (si, sample) in samples.iter().enumerate() {
            let i = mi * samples.len() + si;
            let proj = |axis: usize| (0..d).map(|j| x[(i, j)] * v[(j, axis)]).sum::<f64>();
            points.push(ProjectedPoint {
                model_tag: tag.clone(),
                label: sample.label,
                x: proj(0),
                y: proj(1),
            });
        }
    }
    let var = |k: usize| s.singular_values[k].powi(2) / (n - 1) as f64;
    Ok(FeatureProjection {
        points,
        axis_variance: [var(0), var(1)],
    })
}
