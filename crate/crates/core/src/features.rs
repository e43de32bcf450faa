//! NGRC feature libraries and design-matrix assembly.
//!
//! A feature vector stacks one *block* per input state. Each block holds the
//! four linear terms `x, y, vx, vy` followed by the library's nonlinear terms.
//! Layout: `[block(x_t) | bias | block(x_{t-s}) | block(x_{t-2s}) | ...]`.
//! The diagnostics split `G^T = [A, B]` relies on this order: `A` is the
//! current-state block, `B` is everything after it.

use std::ops::{Deref, Range};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{PendulumParams, State, Trajectory};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    /// The six magnet force components `F_{i,x}, F_{i,y}` of the true system.
    PendulumForces { params: PendulumParams },
    /// Gaussian bumps on the position, `exp(-|(x,y) - c|^2 / (2 w^2))`.
    RadialBasis { centers: Vec<[f64; 2]>, width: f64 },
}

impl Nonlinearity {
    pub fn len(&self) -> usize {
        match self {
            Nonlinearity::PendulumForces { .. } => 6,
            Nonlinearity::RadialBasis { centers, .. } => centers.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Number of input states `k` (current plus `k - 1` delayed).
    pub delays: usize,
    /// Step spacing `s` between consecutive input states.
    pub skip: usize,
    pub include_bias: bool,
    pub nonlinearity: Nonlinearity,
}

impl FeatureSpec {
    pub const STATE_DIM: usize = State::DIM;

    pub fn pendulum(params: PendulumParams, delays: usize) -> Self {
        FeatureSpec {
            delays,
            skip: 1,
            include_bias: true,
            nonlinearity: Nonlinearity::PendulumForces { params },
        }
    }

    pub fn radial_basis(centers: Vec<[f64; 2]>, width: f64, delays: usize) -> Self {
        FeatureSpec {
            delays,
            skip: 1,
            include_bias: true,
            nonlinearity: Nonlinearity::RadialBasis { centers, width },
        }
    }

    pub fn with_skip(mut self, skip: usize) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_bias(mut self, include_bias: bool) -> Self {
        self.include_bias = include_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays == 0 {
            return Err(Error::InvalidParameter("delay count k must be >= 1".into()));
        }
        if self.skip == 0 {
            return Err(Error::InvalidParameter("time skip s must be >= 1".into()));
        }
        match &self.nonlinearity {
            Nonlinearity::PendulumForces { params } => params.validate(),
            Nonlinearity::RadialBasis { width, centers } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "RBF width must be positive, got {width}"
                    )));
                }
                if centers.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidParameter("RBF centers must be finite".into()));
                }
                Ok(())
            }
        }
    }

    pub fn block_len(&self) -> usize {
        Self::STATE_DIM + self.nonlinearity.len()
    }

    /// `m = bias + k (n + n_nl)`.
    pub fn feature_count(&self) -> usize {
        self.include_bias as usize + self.delays * self.block_len()
    }

    /// Steps of history behind the current state, `(k - 1) s`.
    pub fn lookback(&self) -> usize {
        (self.delays - 1) * self.skip
    }

    pub fn current_range(&self) -> Range<usize> {
        0..self.block_len()
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.include_bias.then(|| self.block_len())
    }

    /// Columns of delayed block `j` (`1 <= j < k`), i.e. the state `x_{t - j s}`.
    pub fn delayed_range(&self, j: usize) -> Range<usize> {
        assert!(j >= 1 && j < self.delays, "delay index {j} out of range");
        let b = self.block_len();
        let start = b + self.include_bias as usize + (j - 1) * b;
        start..start + b
    }

    /// Offset of the block for window position `j` (0 = current).
    #[inline]
    pub(crate) fn block_offset(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.block_len() * j + self.include_bias as usize
        }
    }

    /// Evaluates the per-state block `[x, y, vx, vy, nonlinear...]` into `out`.
    #[inline]
    pub fn eval_block(&self, s: &State, out: &mut [f64]) {
        out[0] = s.x;
        out[1] = s.y;
        out[2] = s.vx;
        out[3] = s.vy;
        match &self.nonlinearity {
            Nonlinearity::PendulumForces { params } => {
                let f = params.magnet_forces(s.x, s.y);
                for (i, fi) in f.iter().enumerate() {
                    out[4 + 2 * i] = fi[0];
                    out[5 + 2 * i] = fi[1];
                }
            }
            Nonlinearity::RadialBasis { centers, width } => {
                let scale = -0.5 / (width * width);
                for (o, c) in out[4..].iter_mut().zip(centers) {
                    let dx = s.x - c[0];
                    let dy = s.y - c[1];
                    *o = (scale * (dx * dx + dy * dy)).exp();
                }
            }
        }
    }

    /// Evaluates `g` on a window of `k` states, newest first, spaced `s` steps.
    pub fn eval(&self, window: &[State]) -> Result<FeatureVector> {
        let mut out = vec![0.0; self.feature_count()];
        self.eval_into(window, &mut out)?;
        Ok(FeatureVector(out))
    }

    pub fn eval_into(&self, window: &[State], out: &mut [f64]) -> Result<()> {
        if window.len() != self.delays {
            return Err(Error::WindowLengthMismatch {
                expected: self.delays,
                got: window.len(),
            });
        }
        let b = self.block_len();
        for (j, s) in window.iter().enumerate() {
            let off = self.block_offset(j);
            self.eval_block(s, &mut out[off..off + b]);
        }
        if let Some(i) = self.bias_index() {
            out[i] = 1.0;
        }
        Ok(())
    }

    /// Human-readable names in feature order. Delayed terms carry `[t-j]`.
    pub fn feature_names(&self) -> Vec<String> {
        let base: Vec<String> = {
            let mut v: Vec<String> = ["x", "y", "vx", "vy"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            match &self.nonlinearity {
                Nonlinearity::PendulumForces { .. } => {
                    for i in 1..=3 {
                        v.push(format!("F{i}x"));
                        v.push(format!("F{i}y"));
                    }
                }
                Nonlinearity::RadialBasis { centers, .. } => {
                    v.extend((0..centers.len()).map(|j| format!("rbf{j}")));
                }
            }
            v
        };
        let mut names = base.clone();
        if self.include_bias {
            names.push("1".into());
        }
        for j in 1..self.delays {
            names.extend(base.iter().map(|n| format!("{n}[t-{}]", j * self.skip)));
        }
        names
    }
}

/// A single evaluated feature vector in the documented layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Seeded uniform RBF centers on `[-half, half]^2`.
pub fn random_rbf_centers(count: usize, half: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| {
            [
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            ]
        })
        .collect()
}

/// i.i.d. `Uniform[-sigma, sigma]` perturbation of the regressor inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNoise {
    pub sigma: f64,
    pub seed: u64,
}

impl InputNoise {
    pub fn new(sigma: f64, seed: u64) -> Result<Option<Self>> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be non-negative, got {sigma}"
            )));
        }
        Ok((sigma > 0.0).then_some(InputNoise { sigma, seed }))
    }

    /// Stream used for trajectory `index`; independent of other trajectories so
    /// that prefixes of a training set see identical noise.
    pub(crate) fn stream(&self, index: usize) -> rand_chacha::ChaCha8Rng {
        seed::rng(seed::derive(self.seed, &[index as u64]))
    }
}

/// Regressor and target columns of one trajectory, stored sample-major:
/// `gt` is `q × m` (rows are `g_t^T`) and `yt` is `q × n`.
#[derive(Clone, Debug)]
pub struct TrajectoryChunk {
    pub gt: DMatrix<f64>,
    pub yt: DMatrix<f64>,
}

impl TrajectoryChunk {
    pub fn columns(&self) -> usize {
        self.gt.nrows()
    }
}

pub(crate) fn check_length(spec: &FeatureSpec, traj: &Trajectory, index: usize) -> Result<()> {
    let needed = spec.lookback() + 2;
    if traj.len() < needed {
        return Err(Error::TrajectoryTooShort {
            index,
            len: traj.len(),
            needed,
        });
    }
    Ok(())
}

/// Builds the regressor/target rows of trajectory `index`. Usable steps are
/// `len - 1 - (k - 1) s`.
pub fn trajectory_chunk(
    spec: &FeatureSpec,
    traj: &Trajectory,
    index: usize,
    noise: Option<&InputNoise>,
) -> Result<TrajectoryChunk> {
    check_length(spec, traj, index)?;
    let states = &traj.states;
    let look = spec.lookback();
    let q = states.len() - 1 - look;
    let m = spec.feature_count();
    let b = spec.block_len();
    let n = State::DIM;

    let mut gt = DMatrix::<f64>::zeros(q, m);
    let mut yt = DMatrix::<f64>::zeros(q, n);
    let mut row = vec![0.0; m];
    if let Some(i) = spec.bias_index() {
        row[i] = 1.0;
    }

    match noise {
        None => {
            // Each state's block is shared by up to k windows.
            let mut blocks = vec![0.0; states.len() * b];
            for (s, out) in states.iter().zip(blocks.chunks_exact_mut(b)) {
                spec.eval_block(s, out);
            }
            for r in 0..q {
                let t = r + look;
                for j in 0..spec.delays {
                    let src = (t - j * spec.skip) * b;
                    let off = spec.block_offset(j);
                    row[off..off + b].copy_from_slice(&blocks[src..src + b]);
                }
                fill_row(&mut gt, &mut yt, r, &row, states[t + 1] - states[t]);
            }
        }
        Some(noise) => {
            let mut rng = noise.stream(index);
            let sigma = noise.sigma;
            for r in 0..q {
                let t = r + look;
                for j in 0..spec.delays {
                    let s = states[t - j * spec.skip];
                    let perturbed = State::new(
                        s.x + rng.random_range(-sigma..=sigma),
                        s.y + rng.random_range(-sigma..=sigma),
                        s.vx + rng.random_range(-sigma..=sigma),
                        s.vy + rng.random_range(-sigma..=sigma),
                    );
                    let off = spec.block_offset(j);
                    spec.eval_block(&perturbed, &mut row[off..off + b]);
                }
                fill_row(&mut gt, &mut yt, r, &row, states[t + 1] - states[t]);
            }
        }
    }
    Ok(TrajectoryChunk { gt, yt })
}

#[inline]
fn fill_row(gt: &mut DMatrix<f64>, yt: &mut DMatrix<f64>, r: usize, row: &[f64], y: State) {
    for (c, v) in row.iter().enumerate() {
        gt[(r, c)] = *v;
    }
    for (c, v) in y.to_array().into_iter().enumerate() {
        yt[(r, c)] = v;
    }
}

/// Dense regressor matrix `G` (`m × T`) and target matrix `Y` (`n × T`),
/// trajectories concatenated in order.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrices {
    pub g: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub columns_per_trajectory: Vec<usize>,
}

impl DesignMatrices {
    pub fn n_traj(&self) -> usize {
        self.columns_per_trajectory.len()
    }

    pub fn columns(&self) -> usize {
        self.g.ncols()
    }

    /// Column range belonging to trajectory `i`.
    pub fn trajectory_columns(&self, i: usize) -> Range<usize> {
        let start: usize = self.columns_per_trajectory[..i].iter().sum();
        start..start + self.columns_per_trajectory[i]
    }
}

fn assemble(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    noise: Option<&InputNoise>,
) -> Result<DesignMatrices> {
    spec.validate()?;
    let chunks = trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| trajectory_chunk(spec, tr, i, noise))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = chunks.iter().map(TrajectoryChunk::columns).sum();
    let m = spec.feature_count();
    let mut g = DMatrix::<f64>::zeros(m, total);
    let mut y = DMatrix::<f64>::zeros(State::DIM, total);
    let mut col = 0;
    for c in &chunks {
        let q = c.columns();
        g.columns_mut(col, q).copy_from(&c.gt.transpose());
        y.columns_mut(col, q).copy_from(&c.yt.transpose());
        col += q;
    }
    Ok(DesignMatrices {
        g,
        y,
        columns_per_trajectory: chunks.iter().map(TrajectoryChunk::columns).collect(),
    })
}

/// Noise-free design matrices.
pub fn build_design_matrices(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
) -> Result<DesignMatrices> {
    assemble(spec, trajectories, None)
}

/// Design matrices with `Uniform[-sigma, sigma]` noise on every input component
/// of every window. Targets stay noise-free; `sigma = 0` matches
/// [`build_design_matrices`] exactly.
pub fn apply_input_noise(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    sigma: f64,
    rng_seed: u64,
) -> Result<DesignMatrices> {
    let noise = InputNoise::new(sigma, rng_seed)?;
    assemble(spec, trajectories, noise.as_ref())
}
