//! Ridge-regression training of the NGRC readout and autonomous prediction.

mod normal;
mod predict;

pub use normal::{
    accumulate_normal_equations, accumulate_prefixes, accumulate_prefixes_with, NormalEquations,
};
pub use predict::{predict, predict_basin_grid, Prediction, Predictor, Runner};

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::features::{FeatureSpec, InputNoise};
use crate::par::Execution;
use crate::{Error, Result};

/// How the ridge coefficient is chosen for a training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizationPolicy {
    Fixed {
        lambda: f64,
    },
    /// `lambda = lambda_base * n_traj`.
    Scaled {
        lambda_base: f64,
    },
    /// Exact least squares through the pseudo-inverse.
    None,
}

impl RegularizationPolicy {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            RegularizationPolicy::Fixed { lambda } => lambda,
            RegularizationPolicy::Scaled { lambda_base } => lambda_base,
            RegularizationPolicy::None => 0.0,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "regularization must be non-negative, got {v}"
            )))
        }
    }

    pub fn effective_lambda(&self, n_traj: usize) -> f64 {
        match *self {
            RegularizationPolicy::Fixed { lambda } => lambda,
            RegularizationPolicy::Scaled { lambda_base } => lambda_base * n_traj as f64,
            RegularizationPolicy::None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    /// `n × m` readout.
    pub weights: DMatrix<f64>,
    pub lambda: f64,
    /// Number of retained directions; equals `m` whenever `lambda > 0`.
    pub effective_rank: usize,
}

/// Relative singular-value cutoff used by the `lambda = 0` path when none is
/// given: `eps * max(rows, cols)`.
pub fn default_rcond(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols) as f64
}

/// `W = Y G^T (G G^T + lambda I)^{-1}` for dense `G` (`m × T`) and `Y` (`n × T`).
pub fn solve_ridge(g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    Ok(solve_ridge_with(g, y, lambda, None)?.weights)
}

/// As [`solve_ridge`], reporting the effective rank. With `lambda = 0` the
/// solution is `Y G^+`, where singular values below `rcond * sigma_max` are
/// discarded.
pub fn solve_ridge_with(
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    rcond: Option<f64>,
) -> Result<RidgeSolution> {
    if g.ncols() == 0 || g.ncols() != y.ncols() {
        return Err(Error::InvalidParameter(format!(
            "G has {} columns and Y has {}; need matching, non-zero counts",
            g.ncols(),
            y.ncols()
        )));
    }
    check_lambda(lambda)?;
    if lambda > 0.0 {
        return Ok(RidgeSolution {
            weights: augmented_qr_solve(g, y, lambda),
            lambda,
            effective_rank: g.nrows(),
        });
    }
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = rcond.unwrap_or_else(|| default_rcond(g.nrows(), g.ncols())) * smax;
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    // G = U S V^T, so Y G^+ = (Y V) S^+ U^T.
    let mut yv = y * vt.transpose();
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let scale = if s > cut && s > 0.0 {
            rank += 1;
            1.0 / s
        } else {
            0.0
        };
        yv.column_mut(i).scale_mut(scale);
    }
    Ok(RidgeSolution {
        weights: yv * u.transpose(),
        lambda,
        effective_rank: rank,
    })
}

/// Least squares on `[G^T; sqrt(lambda) I] W^T = [Y^T; 0]`, which avoids
/// squaring the condition number of `G`.
fn augmented_qr_solve(g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let (m, t) = g.shape();
    let mut a = DMatrix::zeros(t + m, m);
    a.rows_mut(0, t).copy_from(&g.transpose());
    a.view_mut((t, 0), (m, m)).fill_diagonal(lambda.sqrt());
    let mut b = DMatrix::zeros(t + m, y.nrows());
    b.rows_mut(0, t).copy_from(&y.transpose());
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let rhs = b.rows(0, m).into_owned();
    qr.r()
        .solve_upper_triangular(&rhs)
        .expect("R is non-singular when lambda > 0")
        .transpose()
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "lambda must be non-negative, got {lambda}"
        )))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub n_traj_used: usize,
    /// Usable training steps per trajectory.
    pub n_train_used: usize,
    pub columns: usize,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
    pub effective_rank: usize,
}

/// A trained readout together with everything needed to iterate it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    weights: DMatrix<f64>,
    pub spec: FeatureSpec,
    pub dt: f64,
    pub policy: RegularizationPolicy,
    pub lambda: f64,
    pub provenance: Provenance,
}

const ARTIFACT_FORMAT: &str = "ngrc-model";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Artifact {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    /// Row-major readout entries.
    weights: Vec<f64>,
    spec: FeatureSpec,
    dt: f64,
    policy: RegularizationPolicy,
    lambda: f64,
    provenance: Provenance,
}

impl TrainedModel {
    /// Wraps an existing readout (`n × m`).
    pub fn from_weights(weights: DMatrix<f64>, spec: FeatureSpec, dt: f64) -> Result<Self> {
        let model = TrainedModel {
            weights,
            spec,
            dt,
            policy: RegularizationPolicy::None,
            lambda: 0.0,
            provenance: Provenance::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.weights.nrows() != FeatureSpec::STATE_DIM
            || self.weights.ncols() != self.spec.feature_count()
        {
            return Err(Error::SpecMismatch(format!(
                "readout is {}x{}, spec needs {}x{}",
                self.weights.nrows(),
                self.weights.ncols(),
                FeatureSpec::STATE_DIM,
                self.spec.feature_count()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "readout has non-finite entries".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Readout divided by `dt`, the normalisation used for weight tables.
    pub fn weights_per_dt(&self) -> DMatrix<f64> {
        &self.weights / self.dt
    }

    pub fn to_json(&self) -> Result<String> {
        let art = Artifact {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            rows: self.weights.nrows(),
            cols: self.weights.ncols(),
            weights: self.weights.transpose().as_slice().to_vec(),
            spec: self.spec.clone(),
            dt: self.dt,
            policy: self.policy,
            lambda: self.lambda,
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&art)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let art: Artifact = serde_json::from_str(text)?;
        if art.format != ARTIFACT_FORMAT || art.version != ARTIFACT_VERSION {
            return Err(Error::SpecMismatch(format!(
                "unsupported artifact {} v{}",
                art.format, art.version
            )));
        }
        if art.weights.len() != art.rows * art.cols {
            return Err(Error::SpecMismatch(format!(
                "artifact holds {} weights for a {}x{} readout",
                art.weights.len(),
                art.rows,
                art.cols
            )));
        }
        let model = TrainedModel {
            weights: DMatrix::from_row_slice(art.rows, art.cols, &art.weights),
            spec: art.spec,
            dt: art.dt,
            policy: art.policy,
            lambda: art.lambda,
            provenance: art.provenance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Training options beyond the data and policy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    pub noise_sigma: f64,
    pub seed: u64,
    pub rcond: Option<f64>,
    pub exec: Execution,
}

/// Assembles features (optionally with input noise), resolves the ridge
/// coefficient and solves for `W`.
pub fn train(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    policy: RegularizationPolicy,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<TrainedModel> {
    let opts = TrainOptions {
        noise_sigma,
        seed: rng_seed,
        ..TrainOptions::default()
    };
    train_with(spec, trajectories, policy, &opts)
}

pub fn train_with(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    policy: RegularizationPolicy,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    spec.validate()?;
    policy.validate()?;
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidParameter("no training trajectories".into()))?;
    let noise = InputNoise::new(opts.noise_sigma, opts.seed)?;
    let ne = accumulate_normal_equations(spec, trajectories, noise.as_ref(), opts.exec)?;
    model_from_normal(&ne, spec, first.dt, policy, opts)
}

/// Solves accumulated normal equations into a model, filling provenance.
pub fn model_from_normal(
    ne: &NormalEquations,
    spec: &FeatureSpec,
    dt: f64,
    policy: RegularizationPolicy,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    let lambda = policy.effective_lambda(ne.n_traj);
    let sol = ne.solve(lambda, opts.rcond)?;
    let model = TrainedModel {
        weights: sol.weights,
        spec: spec.clone(),
        dt,
        policy,
        lambda,
        provenance: Provenance {
            n_traj_used: ne.n_traj,
            n_train_used: ne.columns / ne.n_traj.max(1),
            columns: ne.columns,
            noise_sigma: opts.noise_sigma,
            seed: (opts.noise_sigma > 0.0).then_some(opts.seed),
            effective_rank: sol.effective_rank,
        },
    };
    model.validate()?;
    Ok(model)
}
