//! End-to-end estimator: smoothing, standardization, sparse discriminants
//! and nearest-centroid classification.

use serde::{Deserialize, Serialize};

use crate::classify::{nearest_centroid, project, Centroids, DiscriminantScores, Prediction, TimeMode};
use crate::error::{MfldaError, Result};
use crate::fd_model::{
    integer_grid, smooth_dataset, standardize, Exclusion, FunctionalDataSet, SplineBasis, SplineModel,
    Standardization,
};
use crate::sparse::{sparse_from_problem, DiscriminantProblem, SparseConfig, SparseFit};
use crate::tensor::Tensor;

/// B-spline smoothing settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub degree: usize,
    pub n_interior: usize,
    pub min_timepoints: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            n_interior: 4,
            min_timepoints: 8,
        }
    }
}

/// Basis and integer evaluation grid shared by training and test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoother {
    pub basis: SplineBasis,
    pub grid: Vec<f64>,
    pub min_timepoints: usize,
}

impl Smoother {
    /// Uniform knots over the pooled observed time range of `data`.
    pub fn for_data(data: &FunctionalDataSet, cfg: &SmoothingConfig) -> Result<Self> {
        let basis = SplineBasis::uniform(cfg.degree, cfg.n_interior, data.time_domain)?;
        let grid = integer_grid(data.time_domain);
        if grid.len() < 2 {
            return Err(MfldaError::Data(format!(
                "time domain [{}, {}] holds fewer than 2 integer grid points",
                data.time_domain.0, data.time_domain.1
            )));
        }
        Ok(Self {
            basis,
            grid,
            min_timepoints: cfg.min_timepoints,
        })
    }

    pub fn smooth(&self, data: &FunctionalDataSet) -> Result<(SplineModel, Vec<Exclusion>)> {
        smooth_dataset(data, &self.basis, self.min_timepoints, &self.grid)
    }
}

/// Everything needed to fit a classifier on a smoothed tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub sparse: SparseConfig,
    pub time_mode: TimeMode,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            sparse: SparseConfig::default(),
            time_mode: TimeMode::Overall,
        }
    }
}

/// A fitted classifier operating on smoothed, unstandardized tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub n_classes: usize,
    pub settings: FitSettings,
    pub standardization: Standardization,
    pub fit: SparseFit,
    pub centroids: Centroids,
}

impl FittedModel {
    pub fn fit(x: &Tensor, labels: &[usize], n_classes: usize, settings: &FitSettings) -> Result<Self> {
        let (z, std) = standardize(x)?;
        let problem = DiscriminantProblem::new(
            &z,
            labels,
            n_classes,
            settings.sparse.mode,
            settings.sparse.ridge,
            settings.sparse.dense_cap,
        )?;
        Self::from_problem(&problem, &z, std, labels, settings)
    }

    /// Fits from an already standardized tensor and its prepared problem.
    pub fn from_problem(
        problem: &DiscriminantProblem,
        z: &Tensor,
        standardization: Standardization,
        labels: &[usize],
        settings: &FitSettings,
    ) -> Result<Self> {
        let fit = sparse_from_problem(problem, z, labels, &settings.sparse)?;
        let scores = project(z, &fit.gammas())?;
        let centroids = Centroids::from_scores(&scores, labels, problem.n_classes)?;
        Ok(Self {
            n_classes: problem.n_classes,
            settings: settings.clone(),
            standardization,
            fit,
            centroids,
        })
    }

    pub fn scores(&self, x: &Tensor) -> Result<DiscriminantScores> {
        let z = self.standardization.apply(x)?;
        project(&z, &self.fit.gammas())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let scores = self.scores(x)?;
        nearest_centroid(&scores, &self.centroids, self.settings.time_mode)
    }
}
