//! Ground-truth magnetic pendulum: vector field, RK4 integration and flow maps.

mod basins;

pub use basins::{
    classify_attractor, classify_states, error_rate, ground_truth_basins, AttractorLabel,
    BasinGrid, ClassifyParams, GridSpec, Settler,
};

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default magnet coordinates: vertices of a unit-side equilateral triangle
/// centred on the origin.
pub fn default_magnets() -> [[f64; 2]; 3] {
    let r3 = 3f64.sqrt();
    [
        [1.0 / r3, 0.0],
        [-1.0 / (2.0 * r3), -0.5],
        [-1.0 / (2.0 * r3), 0.5],
    ]
}

/// Physical constants of the pendulum and the planar magnet positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub omega0: f64,
    pub damping: f64,
    pub height: f64,
    pub magnets: [[f64; 2]; 3],
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            omega0: 0.5,
            damping: 0.2,
            height: 0.2,
            magnets: default_magnets(),
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "omega0 must be positive, got {}",
                self.omega0
            )));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damping must be non-negative, got {}",
                self.damping
            )));
        }
        if !(self.height > 0.0 && self.height.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "height must be positive, got {}",
                self.height
            )));
        }
        if self.magnets.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(
                "magnet coordinates must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Per-magnet force components `(F_{i,x}, F_{i,y})` at position `(x, y)`,
    /// with `F_{i,x} = -(x - x_i) / D_i^{3/2}` and
    /// `D_i = (x - x_i)^2 + (y - y_i)^2 + h^2`.
    #[inline]
    pub fn magnet_forces(&self, x: f64, y: f64) -> [[f64; 2]; 3] {
        let h2 = self.height * self.height;
        let mut out = [[0.0; 2]; 3];
        for (f, m) in out.iter_mut().zip(&self.magnets) {
            let dx = x - m[0];
            let dy = y - m[1];
            let d = dx * dx + dy * dy + h2;
            let inv = 1.0 / (d * d.sqrt());
            *f = [-dx * inv, -dy * inv];
        }
        out
    }

    /// Total mechanical energy: kinetic plus harmonic plus magnetic potential
    /// `-sum_i D_i^{-1/2}`. Non-increasing along trajectories when damping > 0.
    pub fn energy(&self, s: &State) -> f64 {
        let h2 = self.height * self.height;
        let magnetic: f64 = self
            .magnets
            .iter()
            .map(|m| {
                let d = (s.x - m[0]).powi(2) + (s.y - m[1]).powi(2) + h2;
                -1.0 / d.sqrt()
            })
            .sum();
        0.5 * (s.vx * s.vx + s.vy * s.vy)
            + 0.5 * self.omega0 * self.omega0 * (s.x * s.x + s.y * s.y)
            + magnetic
    }
}

/// Pendulum state `(x, y, vx, vy)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl State {
    pub const DIM: usize = 4;

    pub const fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        State { x, y, vx, vy }
    }

    /// Bob at rest at `(x, y)`.
    pub const fn at_rest(x: f64, y: f64) -> Self {
        State::new(x, y, 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        State::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        State::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.vx * self.vx + self.vy * self.vy).sqrt()
    }

    pub fn position_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

impl Add for State {
    type Output = State;
    #[inline]
    fn add(self, o: State) -> State {
        State::new(self.x + o.x, self.y + o.y, self.vx + o.vx, self.vy + o.vy)
    }
}

impl Sub for State {
    type Output = State;
    #[inline]
    fn sub(self, o: State) -> State {
        State::new(self.x - o.x, self.y - o.y, self.vx - o.vx, self.vy - o.vy)
    }
}

impl Mul<State> for f64 {
    type Output = State;
    #[inline]
    fn mul(self, s: State) -> State {
        State::new(self * s.x, self * s.y, self * s.vx, self * s.vy)
    }
}

/// An autonomous vector field on the 4-dimensional state space.
pub trait VectorField {
    fn rhs(&self, s: State) -> State;
}

impl VectorField for PendulumParams {
    #[inline]
    fn rhs(&self, s: State) -> State {
        pendulum_rhs(self, s)
    }
}

/// Time derivative of the pendulum state.
#[inline]
pub fn pendulum_rhs(params: &PendulumParams, s: State) -> State {
    let w2 = params.omega0 * params.omega0;
    let f = params.magnet_forces(s.x, s.y);
    let fx = f[0][0] + f[1][0] + f[2][0];
    let fy = f[0][1] + f[1][1] + f[2][1];
    State::new(
        s.vx,
        s.vy,
        -w2 * s.x - params.damping * s.vx + fx,
        -w2 * s.y - params.damping * s.vy + fy,
    )
}

#[inline]
fn rk4_step<F: VectorField + ?Sized>(field: &F, s: State, h: f64) -> State {
    let k1 = field.rhs(s);
    let k2 = field.rhs(s + (0.5 * h) * k1);
    let k3 = field.rhs(s + (0.5 * h) * k2);
    let k4 = field.rhs(s + h * k3);
    s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Classical fixed-step fourth-order Runge–Kutta.
///
/// One call to [`Rk4::advance`] covers `dt` time units using `substeps` equal
/// RK4 steps. Negative `dt` integrates backwards in time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rk4 {
    pub substeps: u32,
}

impl Default for Rk4 {
    /// Two substeps per sample keep the one-step round trip
    /// `Phi_{-dt}(Phi_dt(s))` within `1e-8` of `s` next to the magnets.
    fn default() -> Self {
        Rk4 { substeps: 2 }
    }
}

impl Rk4 {
    pub fn new(substeps: u32) -> Self {
        Rk4 {
            substeps: substeps.max(1),
        }
    }

    #[inline]
    pub fn advance<F: VectorField + ?Sized>(&self, field: &F, s: State, dt: f64) -> State {
        let n = self.substeps.max(1);
        let h = dt / n as f64;
        (0..n).fold(s, |acc, _| rk4_step(field, acc, h))
    }

    pub fn integrate<F: VectorField + ?Sized>(
        &self,
        field: &F,
        s0: State,
        dt: f64,
        n_steps: usize,
    ) -> Result<Trajectory> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {dt}"
            )));
        }
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(s0);
        let mut s = s0;
        for step in 1..=n_steps {
            s = self.advance(field, s, dt);
            if !s.is_finite() {
                return Err(Error::NonFiniteState { step });
            }
            states.push(s);
        }
        Ok(Trajectory { dt, states })
    }

    /// States `Φ_{-j·dt}(s)` for `j = len-1, ..., 0`, oldest first, ending at `s`.
    pub fn history<F: VectorField + ?Sized>(
        &self,
        field: &F,
        s: State,
        dt: f64,
        len: usize,
    ) -> Vec<State> {
        let mut out = Vec::with_capacity(len);
        let mut cur = s;
        out.push(cur);
        for _ in 1..len {
            cur = self.advance(field, cur, -dt);
            out.push(cur);
        }
        out.reverse();
        out
    }
}

/// Uniformly sampled trajectory; `states[0]` is the initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn initial_condition(&self) -> State {
        self.states[0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> State {
        *self
            .states
            .last()
            .expect("trajectory holds at least one state")
    }
}

/// RK4 trajectory of `n_steps` samples spaced `dt`, using the default
/// substeps.
pub fn integrate_rk4(
    params: &PendulumParams,
    s0: State,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    Rk4::default().integrate(params, s0, dt, n_steps)
}

/// Flow map `Φ_dt(s)`; negative `dt` flows backwards.
pub fn flow_map(params: &PendulumParams, s: State, dt: f64) -> Result<State> {
    flow_map_with(&Rk4::default(), params, s, dt)
}

pub fn flow_map_with(rk: &Rk4, params: &PendulumParams, s: State, dt: f64) -> Result<State> {
    if dt == 0.0 {
        return Ok(s);
    }
    let out = rk.advance(params, s, dt);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFiniteState { step: 1 })
    }
}

/// Flow surface `φ_dt(s) = Φ_dt(s) - s`.
pub fn flow_surface(params: &PendulumParams, s: State, dt: f64) -> Result<State> {
    Ok(flow_map(params, s, dt)? - s)
}
