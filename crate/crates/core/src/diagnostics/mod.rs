//! Instability diagnostics: conditioning, principal angles, flow-surface fit,
//! transverse distance and the Adams–Bashforth reference readout.

mod flow;
mod reference;

pub use flow::{
    fitting_states, flow_fitting_error, flow_fitting_error_at, transverse_distance, FitPlane,
    FitSelector,
};
pub use reference::{
    adams_bashforth_readout, adams_bashforth_reference, block_weight_norms, ode_coefficients,
    pair_sums, table1_columns, table1_headers, BlockWeightNorms,
};

use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::features::{trajectory_chunk, FeatureSpec};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// `sigma_max / sigma_min`, or `+inf` when `sigma_min <= eps * sigma_max`.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() || m.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let sv = m.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin <= smax * f64::EPSILON {
        Ok(f64::INFINITY)
    } else {
        Ok(smax / smin)
    }
}

/// Orthonormal basis of the column space, rank decided on the pivoted `R`.
fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let d0 = r[(0, 0)].abs();
    let tol = d0 * f64::EPSILON * m.nrows().max(m.ncols()) as f64;
    let rank = (0..r.nrows().min(r.ncols()))
        .take_while(|&i| r[(i, i)].abs() > tol && d0 > 0.0)
        .count();
    qr.q().columns(0, rank).into_owned()
}

/// Principal angles between the column spaces of `a` and `b`, ascending in
/// `[0, pi/2]`. Small angles come from the sines of the projected residual,
/// large ones from the cosines, so both ends stay accurate.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::SpecMismatch(format!(
            "subspaces live in R^{} and R^{}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::RankZero);
    }
    let mut qa = orthonormal_basis(a);
    let mut qb = orthonormal_basis(b);
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Err(Error::RankZero);
    }
    if qa.ncols() < qb.ncols() {
        std::mem::swap(&mut qa, &mut qb);
    }
    let c = qa.tr_mul(&qb);
    let mut cosines: Vec<f64> = c
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let resid = &qb - &qa * &c;
    let mut sines: Vec<f64> = resid
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sines.sort_by(f64::total_cmp);
    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&co, &si)| {
            let t = co.acos();
            if t < std::f64::consts::FRAC_PI_4 {
                si.asin()
            } else {
                t
            }
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Column ranges of the `G^T = [A, B]` split: `A` is the current-state block,
/// `B` the bias followed by all delayed blocks.
pub fn partition_ranges(spec: &FeatureSpec) -> Result<(Range<usize>, Range<usize>)> {
    let a = spec.current_range();
    let b = a.end..spec.feature_count();
    if b.is_empty() {
        return Err(Error::SpecMismatch(
            "partition needs a bias or a delayed block".into(),
        ));
    }
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspacePartition {
    /// `T × l`.
    pub a: DMatrix<f64>,
    /// `T × m_B`.
    pub b: DMatrix<f64>,
}

impl SubspacePartition {
    /// `[A, B]`, i.e. `G^T`.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let t = self.a.nrows();
        let mut out = DMatrix::zeros(t, self.a.ncols() + self.b.ncols());
        out.columns_mut(0, self.a.ncols()).copy_from(&self.a);
        out.columns_mut(self.a.ncols(), self.b.ncols())
            .copy_from(&self.b);
        out
    }
}

/// Splits `G` (`m × T`) into `A` and `B` by feature index.
pub fn partition_design(g: &DMatrix<f64>, spec: &FeatureSpec) -> Result<SubspacePartition> {
    if g.nrows() != spec.feature_count() {
        return Err(Error::SpecMismatch(format!(
            "G has {} rows, spec has {} features",
            g.nrows(),
            spec.feature_count()
        )));
    }
    let (ra, rb) = partition_ranges(spec)?;
    Ok(SubspacePartition {
        a: g.rows(ra.start, ra.len()).transpose(),
        b: g.rows(rb.start, rb.len()).transpose(),
    })
}

/// Triangular factor of a tall matrix built from row blocks (TSQR). Condition
/// numbers and principal angles of column blocks only depend on `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamingQr {
    r: DMatrix<f64>,
    rows: usize,
}

impl StreamingQr {
    pub fn new(cols: usize) -> Self {
        StreamingQr {
            r: DMatrix::zeros(0, cols),
            rows: 0,
        }
    }

    fn stack_and_factor(&mut self, block: &DMatrix<f64>) {
        let n = self.r.ncols();
        let mut stacked = DMatrix::zeros(self.r.nrows() + block.nrows(), n);
        stacked.rows_mut(0, self.r.nrows()).copy_from(&self.r);
        stacked
            .rows_mut(self.r.nrows(), block.nrows())
            .copy_from(block);
        self.r = stacked.qr().r();
    }

    /// Appends rows (`q × cols`).
    pub fn push_rows(&mut self, block: &DMatrix<f64>) {
        assert_eq!(block.ncols(), self.r.ncols(), "column count mismatch");
        if block.nrows() == 0 {
            return;
        }
        self.rows += block.nrows();
        self.stack_and_factor(block);
    }

    pub fn merge(&mut self, other: &StreamingQr) {
        if other.rows == 0 {
            return;
        }
        self.rows += other.rows;
        let r = other.r.clone();
        self.stack_and_factor(&r);
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Per-trajectory `R` factors of `G_i^T`, in trajectory order.
pub fn trajectory_r_factors(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    exec: Execution,
) -> Result<Vec<StreamingQr>> {
    par::map_range(exec, trajectories.len(), |i| {
        let chunk = trajectory_chunk(spec, &trajectories[i], i, None)?;
        let mut q = StreamingQr::new(spec.feature_count());
        q.push_rows(&chunk.gt);
        Ok(q)
    })
    .into_iter()
    .collect()
}

/// Pooled `R` factor of `G^T` over all trajectories (merged in order).
pub fn pooled_r_factor(
    spec: &FeatureSpec,
    trajectories: &[Trajectory],
    exec: Execution,
) -> Result<StreamingQr> {
    let parts = trajectory_r_factors(spec, trajectories, exec)?;
    let mut acc = StreamingQr::new(spec.feature_count());
    for p in &parts {
        acc.merge(p);
    }
    Ok(acc)
}

/// Conditioning of `G^T = [A, B]` and the principal angles between `R(A)` and
/// `R(B)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conditioning {
    pub kappa_g: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub principal_angles: Vec<f64>,
}

impl Conditioning {
    pub fn min_angle(&self) -> f64 {
        self.principal_angles.first().copied().unwrap_or(f64::NAN)
    }

    /// `kappa(G^T) / max(kappa(A), kappa(B))`.
    pub fn amplification(&self) -> f64 {
        self.kappa_g / self.kappa_a.max(self.kappa_b)
    }
}

/// Computes [`Conditioning`] from the `R` factor of `G^T`, splitting after
/// `split` columns.
pub fn conditioning_from_r(r: &DMatrix<f64>, split: usize) -> Result<Conditioning> {
    let n = r.ncols();
    if split == 0 || split >= n {
        return Err(Error::SpecMismatch(format!("split {split} outside 1..{n}")));
    }
    let ra = r.columns(0, split).into_owned();
    let rb = r.columns(split, n - split).into_owned();
    let kappa_a = condition_number(&r.view((0, 0), (split.min(r.nrows()), split)).into_owned())?;
    Ok(Conditioning {
        kappa_g: condition_number(r)?,
        kappa_a,
        kappa_b: condition_number(&rb)?,
        principal_angles: principal_angles(&ra, &rb)?,
    })
}

pub fn design_conditioning(q: &StreamingQr, spec: &FeatureSpec) -> Result<Conditioning> {
    let (ra, _) = partition_ranges(spec)?;
    conditioning_from_r(q.r(), ra.end)
}

/// Flat summary of one trained configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub label: String,
    pub kappa_g: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub kappa_w: f64,
    pub principal_angles: Vec<f64>,
    pub fitting_error_e: f64,
    pub transverse_d: f64,
    pub error_rate_p: f64,
    pub block_weight_norms: Option<BlockWeightNorms>,
}

impl DiagnosticsReport {
    pub const CSV_HEADER: &'static str =
        "label,kappa_G,kappa_A,kappa_B,kappa_W,min_angle,e,d,p,w_a_dev,w_b_norm";

    pub fn csv_row(&self) -> String {
        let (a, b) = self
            .block_weight_norms
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |n| (n.a_total, n.b_total));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.kappa_g,
            self.kappa_a,
            self.kappa_b,
            self.kappa_w,
            self.principal_angles.first().copied().unwrap_or(f64::NAN),
            self.fitting_error_e,
            self.transverse_d,
            self.error_rate_p,
            a,
            b
        )
    }

    /// Structured sidecar with the full angle list. Non-finite values become
    /// `null`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_rk4, PendulumParams, State};
    use crate::features::build_design_matrices;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::seed::rng(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn condition_number_basics() {
        assert_eq!(condition_number(&DMatrix::identity(4, 4)).unwrap(), 1.0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 1.0]));
        assert!((condition_number(&d).unwrap() - 10.0).abs() < 1e-14);
        assert!(matches!(
            condition_number(&DMatrix::zeros(2, 3)),
            Err(Error::ZeroMatrix)
        ));
        let mut sing = DMatrix::identity(3, 3);
        sing[(2, 2)] = 0.0;
        assert_eq!(condition_number(&sing).unwrap(), f64::INFINITY);
    }

    #[test]
    fn condition_number_matches_eigen_oracle() {
        // Singular values of M are square roots of the eigenvalues of M^T M,
        // computed here through the symmetric eigen-solver.
        let m = random_matrix(6, 4, 11);
        let e = nalgebra::SymmetricEigen::new(m.transpose() * &m).eigenvalues;
        let want = (e.max() / e.min()).sqrt();
        let got = condition_number(&m).unwrap();
        assert!(((got - want) / want).abs() < 1e-10, "{got} vs {want}");
    }

    fn e(i: usize, n: usize) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(n, 1);
        v[(i, 0)] = 1.0;
        v
    }

    #[test]
    fn principal_angle_analytic_cases() {
        let a = principal_angles(&e(0, 3), &e(1, 3)).unwrap();
        assert!((a[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let m = random_matrix(8, 3, 2);
        assert!(principal_angles(&m, &m)
            .unwrap()
            .iter()
            .all(|t| t.abs() < 1e-14));
        for theta in [0.3f64, 1e-6, 1e-11] {
            let b = e(0, 3) * theta.cos() + e(1, 3) * theta.sin();
            let t = principal_angles(&e(0, 3), &b).unwrap();
            assert!(((t[0] - theta) / theta).abs() < 1e-6, "{theta}: {}", t[0]);
        }
        assert!(matches!(
            principal_angles(&DMatrix::zeros(3, 1), &e(0, 3)),
            Err(Error::RankZero)
        ));
    }

    #[test]
    fn angle_count_is_min_rank() {
        let a = random_matrix(10, 2, 3);
        let mut b = random_matrix(10, 4, 4);
        let c0 = b.column(0).into_owned();
        b.column_mut(3).copy_from(&c0);
        assert_eq!(principal_angles(&a, &b).unwrap().len(), 2);
        assert_eq!(principal_angles(&b, &b).unwrap().len(), 3);
    }

    fn pend_data(n: usize, skip: usize) -> (FeatureSpec, Vec<Trajectory>) {
        let p = PendulumParams::default();
        let spec = FeatureSpec::pendulum(p.clone(), 2).with_skip(skip);
        let trs = (0..n)
            .map(|i| {
                let a = 1.0 + i as f64;
                integrate_rk4(&p, State::at_rest(a.sin(), a.cos()), 0.01, 300 + skip).unwrap()
            })
            .collect();
        (spec, trs)
    }

    #[test]
    fn partition_sizes_and_reassembly() {
        let (spec, trs) = pend_data(2, 1);
        let d = build_design_matrices(&spec, &trs).unwrap();
        let part = partition_design(&d.g, &spec).unwrap();
        assert_eq!(part.a.ncols(), 10);
        assert_eq!(part.b.ncols(), 11);
        assert_eq!(part.reassemble(), d.g.transpose());
        let k1 = FeatureSpec::pendulum(PendulumParams::default(), 1);
        let d1 = build_design_matrices(&k1, &trs).unwrap();
        let p1 = partition_design(&d1.g, &k1).unwrap();
        assert_eq!(p1.b.ncols(), 1);
        assert!(p1.b.iter().all(|v| *v == 1.0));
        assert!(partition_design(&d1.g, &spec).is_err());
        assert!(partition_ranges(&k1.clone().with_bias(false)).is_err());
    }

    #[test]
    fn streaming_r_matches_dense_conditioning() {
        let (spec, trs) = pend_data(3, 1);
        let d = build_design_matrices(&spec, &trs).unwrap();
        let gt = d.g.transpose();
        let part = partition_design(&d.g, &spec).unwrap();
        let q = pooled_r_factor(&spec, &trs, Execution::Parallel).unwrap();
        assert_eq!(q.rows(), gt.nrows());
        let c = design_conditioning(&q, &spec).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(c.kappa_a, condition_number(&part.a).unwrap()) < 1e-6);
        assert!(rel(c.kappa_b, condition_number(&part.b).unwrap()) < 1e-6);
        assert!(rel(c.kappa_g, condition_number(&gt).unwrap()) < 1e-3);
        let dense = principal_angles(&part.a, &part.b).unwrap();
        for (x, y) in c.principal_angles.iter().zip(&dense) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn report_serialises() {
        let r = DiagnosticsReport {
            label: "x".into(),
            transverse_d: f64::INFINITY,
            principal_angles: vec![1e-4, 0.2],
            ..Default::default()
        };
        assert_eq!(
            r.csv_row().split(',').count(),
            DiagnosticsReport::CSV_HEADER.split(',').count()
        );
        assert!(r.csv_row().contains("inf"));
        assert!(r.to_json().unwrap().contains("null"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn principal_angles_are_symmetric(seed in 0u64..10_000, ca in 1usize..4, cb in 1usize..4) {
            let a = random_matrix(7, ca, seed);
            let b = random_matrix(7, cb, seed + 1);
            let ab = principal_angles(&a, &b).unwrap();
            let ba = principal_angles(&b, &a).unwrap();
            prop_assert_eq!(ab.len(), ca.min(cb));
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            prop_assert!(ab.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(ab.iter().all(|t| (0.0..=std::f64::consts::FRAC_PI_2).contains(t)));
        }

        #[test]
        fn rotation_angle_recovered(theta in 0.01f64..1.5) {
            let b = e(0, 4) * theta.cos() + e(2, 4) * theta.sin();
            let t = principal_angles(&e(0, 4), &b).unwrap();
            prop_assert!((t[0] - theta).abs() < 1e-9);
        }
    }
}
