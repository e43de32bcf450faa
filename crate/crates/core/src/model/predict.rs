//! Autonomous iteration `x_{t+1} = x_t + W g_t`.

use super::TrainedModel;
use crate::dynamics::{
    classify_states, BasinGrid, ClassifyParams, GridSpec, PendulumParams, Rk4, State, Trajectory,
};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Read-only view of a model laid out for fast stepping. Cheap to share
/// between workers; each worker drives its own [`Runner`].
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    model: &'a TrainedModel,
    /// Row-major `n × m` readout.
    w: Vec<f64>,
    m: usize,
    block: usize,
    cap: usize,
    offsets: Vec<usize>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a TrainedModel) -> Self {
        let spec = &model.spec;
        Predictor {
            model,
            w: model.weights().transpose().as_slice().to_vec(),
            m: spec.feature_count(),
            block: spec.block_len(),
            cap: spec.lookback() + 1,
            offsets: (0..spec.delays).map(|j| spec.block_offset(j)).collect(),
        }
    }

    pub fn model(&self) -> &TrainedModel {
        self.model
    }

    /// Consecutive states needed to start: `(k - 1) s + 1`.
    pub fn warmup_len(&self) -> usize {
        self.cap
    }

    /// Starts a run from `warmup` (consecutive states, oldest first).
    pub fn runner(&self, warmup: &[State]) -> Result<Runner<'_>> {
        if warmup.len() != self.cap {
            return Err(Error::WindowLengthMismatch {
                expected: self.cap,
                got: warmup.len(),
            });
        }
        let mut blocks = vec![0.0; self.cap * self.block];
        for (s, out) in warmup.iter().zip(blocks.chunks_exact_mut(self.block)) {
            self.model.spec.eval_block(s, out);
        }
        Ok(Runner {
            p: self,
            blocks,
            states: warmup.to_vec(),
            head: self.cap - 1,
            steps: 0,
        })
    }
}

/// One autonomous run. Keeps the last `(k - 1) s + 1` states and their feature
/// blocks in a ring buffer, so each step evaluates features once.
#[derive(Clone, Debug)]
pub struct Runner<'p> {
    p: &'p Predictor<'p>,
    blocks: Vec<f64>,
    states: Vec<State>,
    head: usize,
    steps: usize,
}

impl Runner<'_> {
    pub fn current(&self) -> State {
        self.states[self.head]
    }

    /// State `lag` steps back, `lag <= (k - 1) s`.
    pub fn delayed(&self, lag: usize) -> State {
        assert!(lag < self.p.cap, "lag {lag} exceeds the delay line");
        self.states[(self.head + self.p.cap - lag) % self.p.cap]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advances one step and returns the new state (which may be non-finite).
    pub fn step(&mut self) -> State {
        let p = self.p;
        let spec = &p.model.spec;
        let b = p.block;
        let mut inc = [0.0f64; 4];
        for (j, &off) in p.offsets.iter().enumerate() {
            let slot = (self.head + p.cap - j * spec.skip) % p.cap;
            let blk = &self.blocks[slot * b..slot * b + b];
            for (i, acc) in inc.iter_mut().enumerate() {
                let row = &p.w[i * p.m + off..i * p.m + off + b];
                *acc += row.iter().zip(blk).map(|(w, g)| w * g).sum::<f64>();
            }
        }
        if let Some(bi) = spec.bias_index() {
            for (i, acc) in inc.iter_mut().enumerate() {
                *acc += p.w[i * p.m + bi];
            }
        }
        let next = self.current() + State::from_array(inc);
        self.head = (self.head + 1) % p.cap;
        self.states[self.head] = next;
        spec.eval_block(&next, &mut self.blocks[self.head * b..self.head * b + b]);
        self.steps += 1;
        next
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Starts at the newest warmup state; holds every accepted step.
    pub trajectory: Trajectory,
    pub diverged: bool,
    pub steps_taken: usize,
}

/// Iterates the model for up to `n_steps`, stopping early once the state norm
/// exceeds `escape_radius` or becomes non-finite. The offending state is not
/// stored.
pub fn predict(
    model: &TrainedModel,
    warmup: &[State],
    n_steps: usize,
    escape_radius: f64,
) -> Result<Prediction> {
    let pred = Predictor::new(model);
    let mut run = pred.runner(warmup)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(run.current());
    let mut diverged = false;
    for _ in 0..n_steps {
        let s = run.step();
        if !s.is_finite() || s.norm() > escape_radius {
            diverged = true;
            break;
        }
        states.push(s);
    }
    Ok(Prediction {
        steps_taken: states.len() - 1,
        trajectory: Trajectory {
            dt: model.dt,
            states,
        },
        diverged,
    })
}

/// Predicted basin labels for rest initial conditions on `grid`. Each run is
/// warmed up with the true backward flow of `params` and classified by the same
/// settling rule as the ground truth.
pub fn predict_basin_grid(
    model: &TrainedModel,
    params: &PendulumParams,
    grid: &GridSpec,
    rk: &Rk4,
    cfg: &ClassifyParams,
    exec: Execution,
) -> Result<BasinGrid> {
    model.validate()?;
    grid.validate()?;
    cfg.validate()?;
    let pred = Predictor::new(model);
    let dt = model.dt;
    let labels = par::map_range(exec, grid.len(), |k| {
        let (x, y) = grid.point(k);
        let warm = rk.history(params, State::at_rest(x, y), dt, pred.warmup_len());
        let mut run = pred.runner(&warm).expect("warmup sized by predictor");
        let first = run.current();
        let states = std::iter::once(first).chain(std::iter::from_fn(move || Some(run.step())));
        classify_states(states, &params.magnets, cfg, dt)
    });
    Ok(BasinGrid {
        grid: grid.clone(),
        labels,
    })
}
