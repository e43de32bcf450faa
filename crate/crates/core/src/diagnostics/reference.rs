//! Two-step Adams–Bashforth reference readout and weight-block statistics.

use nalgebra::DMatrix;
use serde::Serialize;

use super::partition_ranges;
use crate::features::{FeatureSpec, Nonlinearity};
use crate::{Error, Result};

/// Linear map from one feature block `[x, y, vx, vy, F1x, F1y, ..., F3y]` to
/// the pendulum right-hand side (`n × block_len`).
pub fn ode_coefficients(spec: &FeatureSpec) -> Result<DMatrix<f64>> {
    let Nonlinearity::PendulumForces { params } = &spec.nonlinearity else {
        return Err(Error::SpecMismatch(
            "reference needs the pendulum force library".into(),
        ));
    };
    let w2 = params.omega0 * params.omega0;
    let mut c = DMatrix::zeros(4, spec.block_len());
    c[(0, 2)] = 1.0;
    c[(1, 3)] = 1.0;
    for axis in 0..2 {
        let row = 2 + axis;
        c[(row, axis)] = -w2;
        c[(row, 2 + axis)] = -params.damping;
        for i in 0..3 {
            c[(row, 4 + 2 * i + axis)] = 1.0;
        }
    }
    Ok(c)
}

fn check_two_step(spec: &FeatureSpec) -> Result<()> {
    if spec.delays != 2 || spec.skip != 1 {
        return Err(Error::SpecMismatch(format!(
            "two-step reference needs k = 2, s = 1 (got k = {}, s = {})",
            spec.delays, spec.skip
        )));
    }
    Ok(())
}

/// Readout implied by `x_{t+1} = x_t + dt (3/2 f(x_t) - 1/2 f(x_{t-1}))`,
/// divided by `dt` (`n × m`, bias column zero).
pub fn adams_bashforth_reference(spec: &FeatureSpec) -> Result<DMatrix<f64>> {
    check_two_step(spec)?;
    let c = ode_coefficients(spec)?;
    let b = spec.block_len();
    let mut w = DMatrix::zeros(4, spec.feature_count());
    w.columns_mut(0, b).copy_from(&(&c * 1.5));
    w.columns_mut(spec.delayed_range(1).start, b)
        .copy_from(&(&c * -0.5));
    Ok(w)
}

/// The reference scaled by `dt`, usable directly as a model readout.
pub fn adams_bashforth_readout(spec: &FeatureSpec, dt: f64) -> Result<DMatrix<f64>> {
    Ok(adams_bashforth_reference(spec)? * dt)
}

/// Feature indices in weight-table column order: current linear terms,
/// delayed linear terms, current forces, delayed forces.
pub fn table1_columns(spec: &FeatureSpec) -> Result<Vec<usize>> {
    check_two_step(spec)?;
    ode_coefficients(spec)?;
    let cur = spec.current_range().start;
    let del = spec.delayed_range(1).start;
    Ok((0..4)
        .map(|i| cur + i)
        .chain((0..4).map(|i| del + i))
        .chain((4..10).map(|i| cur + i))
        .chain((4..10).map(|i| del + i))
        .collect())
}

pub fn table1_headers() -> Vec<String> {
    let lin = ["x", "y", "vx", "vy"];
    let f: Vec<String> = (1..=3)
        .flat_map(|i| [format!("F{i}x"), format!("F{i}y")])
        .collect();
    lin.iter()
        .map(|s| s.to_string())
        .chain(lin.iter().map(|s| format!("{s}^")))
        .chain(f.iter().cloned())
        .chain(f.iter().map(|s| format!("{s}^")))
        .collect()
}

/// `W[:, current_j] + W[:, delayed_j]` for each block position `j`.
pub fn pair_sums(w: &DMatrix<f64>, spec: &FeatureSpec) -> Result<DMatrix<f64>> {
    if spec.delays != 2 || w.ncols() != spec.feature_count() {
        return Err(Error::SpecMismatch(
            "pair sums need k = 2 and a matching readout".into(),
        ));
    }
    let b = spec.block_len();
    Ok(w.columns(0, b) + w.columns(spec.delayed_range(1).start, b))
}

/// Deviation of the current-state block from a reference, and the size of the
/// bias/delayed block, per output row and in total (Frobenius).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockWeightNorms {
    pub a_rows: [f64; 4],
    pub b_rows: [f64; 4],
    pub a_total: f64,
    pub b_total: f64,
}

pub fn block_weight_norms(
    w: &DMatrix<f64>,
    spec: &FeatureSpec,
    reference: &DMatrix<f64>,
) -> Result<BlockWeightNorms> {
    if w.shape() != reference.shape() || w.ncols() != spec.feature_count() || w.nrows() != 4 {
        return Err(Error::SpecMismatch(format!(
            "readout {:?} and reference {:?} do not match the spec",
            w.shape(),
            reference.shape()
        )));
    }
    let (ra, rb) = partition_ranges(spec)?;
    let dev = w.columns(ra.start, ra.len()) - reference.columns(ra.start, ra.len());
    let wb = w.columns(rb.start, rb.len());
    let mut out = BlockWeightNorms {
        a_rows: [0.0; 4],
        b_rows: [0.0; 4],
        a_total: dev.norm(),
        b_total: wb.norm(),
    };
    for r in 0..4 {
        out.a_rows[r] = dev.row(r).norm();
        out.b_rows[r] = wb.row(r).norm();
    }
    Ok(out)
}
