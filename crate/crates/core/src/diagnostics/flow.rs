//! Flow-surface fitting error and transverse distance.

use serde::{Deserialize, Serialize};

use crate::dynamics::{GridSpec, PendulumParams, Rk4, State, VectorField};
use crate::model::{Predictor, TrainedModel};
use crate::{Error, Result};

/// Two-dimensional slice of state space on which the flow surface is compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitPlane {
    /// `(x, y, 0, 0)`.
    #[default]
    Position,
    /// `(0, 0, vx, vy)`.
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSelector {
    pub plane: FitPlane,
    /// Index into `(x, y, vx, vy)` of the compared increment.
    pub component: usize,
}

impl Default for FitSelector {
    fn default() -> Self {
        FitSelector {
            plane: FitPlane::Position,
            component: 2,
        }
    }
}

pub fn fitting_states(grid: &GridSpec, plane: FitPlane) -> Vec<State> {
    grid.points()
        .map(|(u, v)| match plane {
            FitPlane::Position => State::at_rest(u, v),
            FitPlane::Velocity => State::new(0.0, 0.0, u, v),
        })
        .collect()
}

/// RMS of `(Phi_dt(s) - s)_c - (W g(s))_c` over `states`. Delayed inputs come
/// from the true backward flow. Residuals are summed in sorted order, so the
/// value does not depend on the order of `states`.
pub fn flow_fitting_error_at<F: VectorField + ?Sized>(
    model: &TrainedModel,
    params: &F,
    states: &[State],
    component: usize,
    rk: &Rk4,
) -> Result<f64> {
    if component >= State::DIM {
        return Err(Error::InvalidParameter(format!(
            "component {component} out of range"
        )));
    }
    if states.is_empty() {
        return Err(Error::InvalidParameter("no evaluation states".into()));
    }
    let spec = &model.spec;
    let dt = model.dt;
    let w = model.weights();
    let mut g = vec![0.0; spec.feature_count()];
    let mut window = vec![State::default(); spec.delays];
    let mut sq = Vec::with_capacity(states.len());
    for s in states {
        let hist = rk.history(params, *s, dt, spec.lookback() + 1);
        let last = hist.len() - 1;
        for (j, slot) in window.iter_mut().enumerate() {
            *slot = hist[last - j * spec.skip];
        }
        spec.eval_into(&window, &mut g)?;
        let fitted: f64 = w.row(component).iter().zip(&g).map(|(a, b)| a * b).sum();
        let real = (rk.advance(params, *s, dt) - *s).to_array()[component];
        sq.push((real - fitted).powi(2));
    }
    sq.sort_by(f64::total_cmp);
    Ok((sq.iter().sum::<f64>() / sq.len() as f64).sqrt())
}

pub fn flow_fitting_error(
    model: &TrainedModel,
    params: &PendulumParams,
    grid: &GridSpec,
    selector: FitSelector,
    rk: &Rk4,
) -> Result<f64> {
    grid.validate()?;
    flow_fitting_error_at(
        model,
        params,
        &fitting_states(grid, selector.plane),
        selector.component,
        rk,
    )
}

/// Mean one-step mismatch `|x_t - Phi_{s dt}(x_{t-s})|` between the model's
/// newest state and the true flow of the delayed state it holds, over
/// `horizon` time units. `+inf` if the run leaves `escape_radius`.
pub fn transverse_distance<F: VectorField + ?Sized>(
    model: &TrainedModel,
    params: &F,
    warmup: &[State],
    horizon: f64,
    escape_radius: f64,
    rk: &Rk4,
) -> Result<f64> {
    let spec = &model.spec;
    if spec.delays < 2 {
        return Err(Error::SpecMismatch(
            "transverse distance needs k >= 2".into(),
        ));
    }
    let steps = (horizon / model.dt).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} shorter than dt"
        )));
    }
    let pred = Predictor::new(model);
    let mut run = pred.runner(warmup)?;
    let mut total = 0.0;
    for _ in 0..steps {
        let cur = run.step();
        if !cur.is_finite() || cur.norm() > escape_radius {
            return Ok(f64::INFINITY);
        }
        let mut z = run.delayed(spec.skip);
        for _ in 0..spec.skip {
            z = rk.advance(params, z, model.dt);
        }
        total += (cur - z).norm();
    }
    Ok(total / steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_rk4, VectorField};
    use crate::features::{FeatureSpec, Nonlinearity};
    use crate::model::{train, RegularizationPolicy};
    use nalgebra::DMatrix;
    use rand::seq::SliceRandom;

    fn trained(n: usize) -> (PendulumParams, TrainedModel) {
        let p = PendulumParams::default();
        let spec = FeatureSpec::pendulum(p.clone(), 2);
        let trs: Vec<_> = (0..n)
            .map(|i| {
                let a = 0.3 + 1.7 * i as f64;
                integrate_rk4(&p, State::at_rest(1.2 * a.sin(), 1.2 * a.cos()), 0.01, 1500).unwrap()
            })
            .collect();
        let m = train(
            &spec,
            &trs,
            RegularizationPolicy::Fixed { lambda: 0.01 },
            0.0,
            0,
        )
        .unwrap();
        (p, m)
    }

    #[test]
    fn matches_naive_reevaluation() {
        let (p, model) = trained(3);
        let grid = GridSpec::square(1.5, 7);
        let rk = Rk4::default();
        let e = flow_fitting_error(&model, &p, &grid, FitSelector::default(), &rk).unwrap();
        let mut sum = 0.0;
        for k in 0..grid.len() {
            let (x, y) = grid.point(k);
            let s = State::at_rest(x, y);
            let prev = rk.advance(&p, s, -0.01);
            let g = model.spec.eval(&[s, prev]).unwrap();
            let mut fit = 0.0;
            for (j, gj) in g.iter().enumerate() {
                fit += model.weights()[(2, j)] * gj;
            }
            let real = rk.advance(&p, s, 0.01).vx - s.vx;
            sum += (real - fit) * (real - fit);
        }
        let want = (sum / grid.len() as f64).sqrt();
        assert!(((e - want) / want).abs() < 1e-12, "{e} vs {want}");
    }

    #[test]
    fn order_invariant_exactly() {
        let (p, model) = trained(2);
        let rk = Rk4::default();
        let mut states = fitting_states(&GridSpec::square(1.5, 9), FitPlane::Velocity);
        let a = flow_fitting_error_at(&model, &p, &states, 1, &rk).unwrap();
        states.shuffle(&mut crate::seed::rng(1));
        let b = flow_fitting_error_at(&model, &p, &states, 1, &rk).unwrap();
        assert_eq!(a, b);
        assert!(flow_fitting_error_at(&model, &p, &states, 4, &rk).is_err());
    }

    /// Harmonic oscillator `x'' = -x` has an exact linear one-step map, which
    /// a k = 1 readout on the linear terms represents.
    struct Linear;
    impl VectorField for Linear {
        fn rhs(&self, s: State) -> State {
            State::new(s.vx, s.vy, -s.x, -s.y)
        }
    }

    fn exact_linear_readout(dt: f64, spec: &FeatureSpec) -> DMatrix<f64> {
        let rk = Rk4::default();
        let mut w = DMatrix::zeros(4, spec.feature_count());
        for c in 0..4 {
            let mut e = [0.0; 4];
            e[c] = 1.0;
            let d = rk.advance(&Linear, State::from_array(e), dt) - State::from_array(e);
            for (r, v) in d.to_array().into_iter().enumerate() {
                w[(r, c)] = v;
            }
        }
        w
    }

    #[test]
    fn exact_map_on_linear_system_has_zero_error() {
        let dt = 0.01;
        let spec = FeatureSpec {
            delays: 1,
            skip: 1,
            include_bias: true,
            nonlinearity: Nonlinearity::RadialBasis {
                centers: vec![],
                width: 1.0,
            },
        };
        let model = TrainedModel::from_weights(exact_linear_readout(dt, &spec), spec, dt).unwrap();
        let rk = Rk4::default();
        let grid = GridSpec::square(1.5, 11);
        for plane in [FitPlane::Position, FitPlane::Velocity] {
            let states = fitting_states(&grid, plane);
            for c in 0..4 {
                let e = flow_fitting_error_at(&model, &Linear, &states, c, &rk).unwrap();
                assert!(e < 1e-15, "{plane:?} component {c}: {e}");
            }
        }
    }

    #[test]
    fn transverse_distance_tiny_on_manifold_and_matches_unrolled() {
        let (p, model) = trained(4);
        let rk = Rk4::default();
        let warm = rk.history(&p, State::at_rest(0.9, 0.5), 0.01, 2);
        let d = transverse_distance(&model, &p, &warm, 0.1, 100.0, &rk).unwrap();
        // Hand-unrolled 10 steps.
        let w = model.weights();
        let mut hist = warm.clone();
        let mut total = 0.0;
        for _ in 0..10 {
            let t = hist.len() - 1;
            let g = model.spec.eval(&[hist[t], hist[t - 1]]).unwrap();
            let inc = w * nalgebra::DVector::from_vec(g.0);
            let next = hist[t] + State::from_slice(inc.as_slice());
            total += (next - rk.advance(&p, hist[t], 0.01)).norm();
            hist.push(next);
        }
        let want = total / 10.0;
        assert!(((d - want) / want).abs() < 1e-12, "{d} vs {want}");
        assert!(d < 1e-3);
    }

    #[test]
    fn transverse_distance_infinite_on_blow_up() {
        let p = PendulumParams::default();
        let spec = FeatureSpec::pendulum(p.clone(), 2);
        let mut w = DMatrix::zeros(4, 21);
        w[(0, 0)] = 1.0;
        let model = TrainedModel::from_weights(w, spec, 0.01).unwrap();
        let rk = Rk4::default();
        let warm = rk.history(&p, State::at_rest(0.9, 0.5), 0.01, 2);
        let d = transverse_distance(&model, &p, &warm, 100.0, 100.0, &rk).unwrap();
        assert_eq!(d, f64::INFINITY);
        let k1 = TrainedModel::from_weights(
            DMatrix::zeros(4, 11),
            FeatureSpec::pendulum(p.clone(), 1),
            0.01,
        )
        .unwrap();
        assert!(transverse_distance(&k1, &p, &warm[1..], 1.0, 100.0, &rk).is_err());
    }
}
