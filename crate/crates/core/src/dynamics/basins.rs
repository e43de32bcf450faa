//! Attractor classification and basin grids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PendulumParams, Rk4, State};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Final fate of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttractorLabel {
    Magnet1,
    Magnet2,
    Magnet3,
    Diverged,
    Unresolved,
}

impl AttractorLabel {
    /// CSV code: 1..=3 for magnets, -1 for diverged, 0 for unresolved.
    pub fn code(self) -> i8 {
        match self {
            AttractorLabel::Magnet1 => 1,
            AttractorLabel::Magnet2 => 2,
            AttractorLabel::Magnet3 => 3,
            AttractorLabel::Diverged => -1,
            AttractorLabel::Unresolved => 0,
        }
    }

    pub fn from_code(code: i8) -> Option<Self> {
        Some(match code {
            1 => AttractorLabel::Magnet1,
            2 => AttractorLabel::Magnet2,
            3 => AttractorLabel::Magnet3,
            -1 => AttractorLabel::Diverged,
            0 => AttractorLabel::Unresolved,
            _ => return None,
        })
    }

    pub fn magnet(index: usize) -> Self {
        match index {
            0 => AttractorLabel::Magnet1,
            1 => AttractorLabel::Magnet2,
            2 => AttractorLabel::Magnet3,
            _ => panic!("magnet index {index} out of range"),
        }
    }

    pub fn is_magnet(self) -> bool {
        matches!(
            self,
            AttractorLabel::Magnet1 | AttractorLabel::Magnet2 | AttractorLabel::Magnet3
        )
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            AttractorLabel::Magnet1 => [255, 0, 0],
            AttractorLabel::Magnet2 => [0, 255, 0],
            AttractorLabel::Magnet3 => [0, 0, 255],
            AttractorLabel::Diverged => [0, 0, 0],
            AttractorLabel::Unresolved => [255, 255, 255],
        }
    }
}

/// Settling rule shared by ground truth and model predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyParams {
    pub t_max: f64,
    pub settle_radius: f64,
    pub speed_tol: f64,
    pub escape_radius: f64,
    /// Settling is only accepted from this time on, so a run started inside a
    /// settle zone must still be there after the transient. Zero accepts the
    /// initial state.
    pub min_time: f64,
    /// Label timeouts by the nearest magnet instead of `Unresolved`.
    pub nearest_fallback: bool,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams {
            t_max: 200.0,
            settle_radius: 0.1,
            speed_tol: 1e-3,
            escape_radius: 100.0,
            min_time: 10.0,
            nearest_fallback: true,
        }
    }
}

impl ClassifyParams {
    /// Defaults with the nearest-magnet fallback disabled.
    pub fn strict() -> Self {
        ClassifyParams {
            nearest_fallback: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_max", self.t_max),
            ("settle_radius", self.settle_radius),
            ("speed_tol", self.speed_tol),
            ("escape_radius", self.escape_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.min_time >= 0.0 && self.min_time < self.t_max) {
            return Err(Error::InvalidParameter(format!(
                "min_time must lie in [0, t_max), got {}",
                self.min_time
            )));
        }
        Ok(())
    }

    /// Number of `dt` steps covering `t_max`.
    pub fn max_steps(&self, dt: f64) -> usize {
        (self.t_max / dt).ceil() as usize
    }

    pub fn min_steps(&self, dt: f64) -> usize {
        (self.min_time / dt).ceil() as usize
    }
}

/// Streaming form of the settling rule.
#[derive(Clone, Copy, Debug)]
pub struct Settler<'a> {
    magnets: &'a [[f64; 2]; 3],
    cfg: &'a ClassifyParams,
    r2: f64,
    v2: f64,
}

impl<'a> Settler<'a> {
    pub fn new(magnets: &'a [[f64; 2]; 3], cfg: &'a ClassifyParams) -> Self {
        Settler {
            magnets,
            cfg,
            r2: cfg.settle_radius * cfg.settle_radius,
            v2: cfg.speed_tol * cfg.speed_tol,
        }
    }

    /// Instantaneous test: `Diverged` if `s` escaped, `Magnet_i` if `s` lies in
    /// the settle zone of magnet `i`.
    #[inline]
    pub fn check(&self, s: &State) -> Option<AttractorLabel> {
        if !s.is_finite() || s.position_norm() > self.cfg.escape_radius {
            return Some(AttractorLabel::Diverged);
        }
        if s.vx * s.vx + s.vy * s.vy >= self.v2 {
            return None;
        }
        self.magnets
            .iter()
            .position(|m| {
                let dx = s.x - m[0];
                let dy = s.y - m[1];
                dx * dx + dy * dy < self.r2
            })
            .map(AttractorLabel::magnet)
    }

    /// Label assigned when `t_max` elapses without settling.
    pub fn timeout(&self, last: &State) -> AttractorLabel {
        if !self.cfg.nearest_fallback {
            return AttractorLabel::Unresolved;
        }
        let d2 = |m: &[f64; 2]| (last.x - m[0]).powi(2) + (last.y - m[1]).powi(2);
        let (best, _) =
            self.magnets
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bd), (i, m)| {
                    let d = d2(m);
                    if d < bd {
                        (i, d)
                    } else {
                        (bi, bd)
                    }
                });
        AttractorLabel::magnet(best)
    }
}

/// Classifies a sampled trajectory; `states` yields the initial state first and
/// is consumed for at most `t_max / dt` steps.
pub fn classify_states<I>(
    states: I,
    magnets: &[[f64; 2]; 3],
    cfg: &ClassifyParams,
    dt: f64,
) -> AttractorLabel
where
    I: IntoIterator<Item = State>,
{
    let settler = Settler::new(magnets, cfg);
    let first = cfg.min_steps(dt);
    let mut last = None;
    for (i, s) in states.into_iter().take(cfg.max_steps(dt) + 1).enumerate() {
        match settler.check(&s) {
            Some(AttractorLabel::Diverged) => return AttractorLabel::Diverged,
            Some(label) if i >= first => return label,
            _ => {}
        }
        last = Some(s);
    }
    match last {
        Some(s) => settler.timeout(&s),
        None => AttractorLabel::Unresolved,
    }
}

/// Integrates the true dynamics from `s0` and applies the settling rule.
pub fn classify_attractor(
    params: &PendulumParams,
    s0: State,
    dt: f64,
    cfg: &ClassifyParams,
) -> AttractorLabel {
    classify_attractor_with(&Rk4::default(), params, s0, dt, cfg)
}

pub(crate) fn classify_attractor_with(
    rk: &Rk4,
    params: &PendulumParams,
    s0: State,
    dt: f64,
    cfg: &ClassifyParams,
) -> AttractorLabel {
    let states = std::iter::successors(Some(s0), |s| Some(rk.advance(params, *s, dt)));
    classify_states(states, &params.magnets, cfg, dt)
}

/// Rectangular grid of initial positions, traversed row-major with `y` outer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(1.5, 100)
    }
}

impl GridSpec {
    /// `n × n` grid over `[-half, half]²`.
    pub fn square(half: f64, n: usize) -> Self {
        GridSpec {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidParameter(
                "grid must have at least one point".into(),
            ));
        }
        if !(self.x_max >= self.x_min && self.y_max >= self.y_min) {
            return Err(Error::InvalidParameter("grid bounds are inverted".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis(min: f64, max: f64, n: usize, i: usize) -> f64 {
        if n == 1 {
            min
        } else {
            min + (max - min) * i as f64 / (n - 1) as f64
        }
    }

    /// Coordinates of point `index` (row-major, `y` outer).
    pub fn point(&self, index: usize) -> (f64, f64) {
        let (j, i) = (index / self.nx, index % self.nx);
        (
            Self::axis(self.x_min, self.x_max, self.nx, i),
            Self::axis(self.y_min, self.y_max, self.ny, j),
        )
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.len()).map(move |k| self.point(k))
    }
}

/// Attractor labels on a [`GridSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinGrid {
    pub grid: GridSpec,
    pub labels: Vec<AttractorLabel>,
}

impl BasinGrid {
    pub fn count(&self, label: AttractorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn fraction(&self, label: AttractorLabel) -> f64 {
        self.count(label) as f64 / self.labels.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x0", "y0", "label"])?;
        for (k, label) in self.labels.iter().enumerate() {
            let (x, y) = self.grid.point(k);
            w.write_record([x.to_string(), y.to_string(), label.code().to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads labels back from a CSV written by [`BasinGrid::write_csv`]. Row
    /// order must match `grid`.
    pub fn read_csv(path: &Path, grid: GridSpec) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut labels = Vec::with_capacity(grid.len());
        for rec in r.records() {
            let rec = rec?;
            let code: i8 = rec
                .get(2)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::InvalidParameter(format!("bad label row {rec:?}")))?;
            labels.push(
                AttractorLabel::from_code(code)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown label {code}")))?,
            );
        }
        if labels.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "{} labels for a grid of {}",
                labels.len(),
                grid.len()
            )));
        }
        Ok(BasinGrid { grid, labels })
    }

    /// Binary PPM (P6), top row at `y_max`.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut buf = Vec::with_capacity(3 * nx * ny + 32);
        write!(buf, "P6\n{nx} {ny}\n255\n").expect("write to Vec");
        for row in (0..ny).rev() {
            for col in 0..nx {
                buf.extend_from_slice(&self.labels[row * nx + col].rgb());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fraction of points whose predicted label differs from the truth. A diverged
/// prediction is always wrong.
pub fn error_rate(truth: &BasinGrid, predicted: &BasinGrid) -> Result<f64> {
    if truth.labels.len() != predicted.labels.len() {
        return Err(Error::InvalidParameter(format!(
            "grid sizes differ: {} vs {}",
            truth.labels.len(),
            predicted.labels.len()
        )));
    }
    let wrong = truth
        .labels
        .iter()
        .zip(&predicted.labels)
        .filter(|(t, p)| **p == AttractorLabel::Diverged || t != p)
        .count();
    Ok(wrong as f64 / truth.labels.len().max(1) as f64)
}

/// Ground-truth basins for zero-velocity initial conditions on `grid`.
pub fn ground_truth_basins(
    params: &PendulumParams,
    grid: &GridSpec,
    dt: f64,
    rk: &Rk4,
    cfg: &ClassifyParams,
    exec: Execution,
) -> BasinGrid {
    let labels = par::map_range(exec, grid.len(), |k| {
        let (x, y) = grid.point(k);
        classify_attractor_with(rk, params, State::at_rest(x, y), dt, cfg)
    });
    BasinGrid {
        grid: grid.clone(),
        labels,
    }
}
