//! Streaming accumulation of `G G^T` and `Y G^T`.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use super::{check_lambda, RidgeSolution};
use crate::dynamics::{State, Trajectory};
use crate::features::{trajectory_chunk, FeatureSpec, InputNoise, TrajectoryChunk};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Sufficient statistics of a ridge problem: `gram = G G^T` (`m × m`) and
/// `cross = Y G^T` (`n × m`).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub columns: usize,
    pub n_traj: usize,
}

impl NormalEquations {
    pub fn zeros(m: usize, n: usize) -> Self {
        NormalEquations {
            gram: DMatrix::zeros(m, m),
            cross: DMatrix::zeros(n, m),
            columns: 0,
            n_traj: 0,
        }
    }

    pub fn from_chunk(chunk: &TrajectoryChunk) -> Self {
        NormalEquations {
            gram: chunk.gt.tr_mul(&chunk.gt),
            cross: chunk.yt.tr_mul(&chunk.gt),
            columns: chunk.columns(),
            n_traj: 1,
        }
    }

    /// Statistics of a dense problem, counted as one trajectory.
    pub fn from_dense(g: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        NormalEquations {
            gram: g * g.transpose(),
            cross: y * g.transpose(),
            columns: g.ncols(),
            n_traj: 1,
        }
    }

    pub fn add(&mut self, other: &NormalEquations) {
        self.gram += &other.gram;
        self.cross += &other.cross;
        self.columns += other.columns;
        self.n_traj += other.n_traj;
    }

    /// Solves `W (gram + lambda I) = cross`. `lambda > 0` uses Cholesky;
    /// `lambda = 0` uses an eigen-decomposition pseudo-inverse that drops
    /// eigenvalues below `rcond * e_max` (default `rcond = m * eps`).
    pub fn solve(&self, lambda: f64, rcond: Option<f64>) -> Result<RidgeSolution> {
        check_lambda(lambda)?;
        let m = self.gram.nrows();
        if self.columns == 0 {
            return Err(Error::InvalidParameter("no training columns".into()));
        }
        if lambda > 0.0 {
            let mut a = self.gram.clone();
            for i in 0..m {
                a[(i, i)] += lambda;
            }
            let chol = Cholesky::new(a).ok_or(Error::SingularNormalMatrix { lambda })?;
            let wt = chol.solve(&self.cross.transpose());
            if wt.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularNormalMatrix { lambda });
            }
            return Ok(RidgeSolution {
                weights: wt.transpose(),
                lambda,
                effective_rank: m,
            });
        }
        let eig = SymmetricEigen::new(self.gram.clone());
        let emax = eig.eigenvalues.amax();
        let cut = rcond.unwrap_or(f64::EPSILON * m as f64) * emax;
        let mut rank = 0;
        let mut inv = DMatrix::<f64>::zeros(m, m);
        for (i, &e) in eig.eigenvalues.iter().enumerate() {
            if e > cut && e > 0.0 {
                rank += 1;
                let v = eig.eigenvectors.column(i);
                inv.ger(1.0 / e, &v, &v, 1.0);
            }
        }
        Ok(RidgeSolution {
            weights: &self.cross * inv,
            lambda,
            effective_rank: rank,
        })
    }
}

/// Trajectories handed to the pool at once; bounds memory held in partials.
fn window_len(exec: Execution) -> usize {
    if exec.is_parallel() {
        4 * par::worker_count().max(1)
    } else {
        1
    }
}

/// Accumulates over `count` trajectories produced on demand by `source`,
/// returning snapshots after each prefix length listed in `checkpoints`
/// (ascending). Partials are summed in trajectory order so the result does not
/// depend on `exec`.
pub fn accumulate_prefixes_with<F>(
    spec: &FeatureSpec,
    count: usize,
    source: F,
    noise: Option<&InputNoise>,
    exec: Execution,
    checkpoints: &[usize],
) -> Result<Vec<NormalEquations>>
where
    F: Fn(usize) -> Result<Trajectory> + Sync + Send,
{
    spec.validate()?;
    if checkpoints.windows(2).any(|w| w[0] > w[1]) || checkpoints.iter().any(|&c| c > count) {
        return Err(Error::InvalidParameter(format!(
            "checkpoints {checkpoints:?} must be ascending and at most {count}"
        )));
    }
    let mut acc = NormalEquations::zeros(spec.feature_count(), State::DIM);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    while next < checkpoints.len() && checkpoints[next] == 0 {
        out.push(acc.clone());
        next += 1;
    }
    let win = window_len(exec);
    let mut start = 0;
    while start < count && next < checkpoints.len() {
        let end = (start + win)
            .min(count)
            .min(checkpoints[checkpoints.len() - 1]);
        let partials = par::map_range(exec, end - start, |j| {
            let i = start + j;
            let tr = source(i)?;
            trajectory_chunk(spec, &tr, i, noise).map(|c| NormalEquations::from_chunk(&c))
        });
        for (j, p) in partials.into_iter().enumerate() {
            acc.add(&p?);
            while next < checkpoints.len() && checkpoints[next] == start + j + 1 {
                out.push(acc.clone());
                next += 1;
            }
        }
        start = end;
    }
    Ok(out)
}

pub fn accumulate_prefixes(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    noise: Option<&InputNoise>,
    exec: Execution,
    checkpoints: &[usize],
) -> Result<Vec<NormalEquations>> {
    accumulate_prefixes_with(
        spec,
        trajectories.len(),
        |i| Ok(trajectories[i].clone()),
        noise,
        exec,
        checkpoints,
    )
}

pub fn accumulate_normal_equations(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    noise: Option<&InputNoise>,
    exec: Execution,
) -> Result<NormalEquations> {
    let n = trajectories.len();
    Ok(accumulate_prefixes(spec, trajectories, noise, exec, &[n])?
        .pop()
        .expect("one checkpoint requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_rk4, PendulumParams};

    fn data(n: usize) -> (FeatureSpec, Vec<Trajectory>) {
        let p = PendulumParams::default();
        let trs = (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                integrate_rk4(&p, State::at_rest(a.cos(), a.sin()), 0.01, 120).unwrap()
            })
            .collect();
        (FeatureSpec::pendulum(p, 2), trs)
    }

    #[test]
    fn prefixes_equal_fresh_accumulations() {
        let (spec, trs) = data(9);
        let snaps =
            accumulate_prefixes(&spec, &trs, None, Execution::Parallel, &[0, 2, 2, 5, 9]).unwrap();
        assert_eq!(snaps.len(), 5);
        assert_eq!(snaps[0].n_traj, 0);
        for (s, n) in snaps.iter().zip([0, 2, 2, 5, 9]) {
            let fresh =
                accumulate_normal_equations(&spec, &trs[..n], None, Execution::Sequential).unwrap();
            assert_eq!(s, &fresh);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (spec, trs) = data(13);
        let noise = InputNoise::new(1e-4, 3).unwrap();
        let a =
            accumulate_normal_equations(&spec, &trs, noise.as_ref(), Execution::Parallel).unwrap();
        let b = accumulate_normal_equations(&spec, &trs, noise.as_ref(), Execution::Sequential)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.columns, 13 * 119);
    }

    #[test]
    fn bad_checkpoints_rejected() {
        let (spec, trs) = data(3);
        assert!(accumulate_prefixes(&spec, &trs, None, Execution::Sequential, &[2, 1]).is_err());
        assert!(accumulate_prefixes(&spec, &trs, None, Execution::Sequential, &[4]).is_err());
    }

    #[test]
    fn errors_propagate_from_short_trajectories() {
        let (spec, mut trs) = data(3);
        trs[1].states.truncate(2);
        let err = accumulate_normal_equations(&spec, &trs, None, Execution::Parallel).unwrap_err();
        assert!(matches!(err, Error::TrajectoryTooShort { index: 1, .. }));
    }
}
