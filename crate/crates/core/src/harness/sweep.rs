//! Seeded training sets and the (lambda, N_traj, sigma, trial) sweep.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::diagnostics::trajectory_r_factors;
use crate::diagnostics::{
    condition_number, flow_fitting_error, transverse_distance, FitSelector, StreamingQr,
};
use crate::dynamics::{
    error_rate, ground_truth_basins, AttractorLabel, BasinGrid, GridSpec, State, Trajectory,
};
use crate::features::{FeatureSpec, InputNoise};
use crate::model::{
    accumulate_prefixes, model_from_normal, predict_basin_grid, NormalEquations, TrainOptions,
    TrainedModel,
};
use crate::par;
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Initial condition of training trajectory `index` in `trial`: uniform
/// position on the configured square, at rest.
pub fn training_initial_condition(config: &ExperimentConfig, trial: usize, index: usize) -> State {
    let h = config.data.ic_half_width;
    let mut rng = seed::rng(seed::derive(
        config.seed,
        &[stream::INITIAL_CONDITIONS, trial as u64, index as u64],
    ));
    let x = rng.random_range(-h..=h);
    let y = rng.random_range(-h..=h);
    State::at_rest(x, y)
}

/// Trajectory `index` of `trial` for `spec`, long enough for `n_train`
/// training pairs after warmup.
pub fn training_trajectory(
    config: &ExperimentConfig,
    spec: &FeatureSpec,
    trial: usize,
    index: usize,
) -> Result<Trajectory> {
    let s0 = training_initial_condition(config, trial, index);
    config.rk().integrate(
        &config.pendulum,
        s0,
        config.data.dt,
        config.data.n_train + spec.lookback(),
    )
}

/// The first `n_traj` trajectories of `trial`. Sets for different `n_traj`
/// are nested prefixes of each other.
pub fn generate_training_set(
    config: &ExperimentConfig,
    n_traj: usize,
    trial: usize,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(Error::InvalidParameter("n_traj must be >= 1".into()));
    }
    let spec = config.feature_spec();
    par::map_range(config.execution, n_traj, |i| {
        training_trajectory(config, &spec, trial, i)
    })
    .into_iter()
    .collect()
}

/// Rest state used to measure the transverse distance in `trial`.
pub fn probe_initial_condition(config: &ExperimentConfig, trial: usize) -> State {
    let h = config.data.ic_half_width;
    let mut rng = seed::rng(seed::derive(config.seed, &[stream::PROBE, trial as u64]));
    State::at_rest(rng.random_range(-h..=h), rng.random_range(-h..=h))
}

/// Noise seed for sigma index `sigma_index` of `trial`.
pub fn noise_seed(config: &ExperimentConfig, trial: usize, sigma_index: usize) -> u64 {
    seed::derive(
        config.seed,
        &[stream::INPUT_NOISE, trial as u64, sigma_index as u64],
    )
}

pub fn ground_truth(config: &ExperimentConfig) -> BasinGrid {
    ground_truth_basins(
        &config.pendulum,
        &config.grid,
        config.data.dt,
        &config.rk(),
        &config.classify,
        config.execution,
    )
}

/// One trained and scored configuration.
#[derive(Clone, Debug, Serialize)]
pub struct CellRecord {
    pub lambda_index: usize,
    pub n_index: usize,
    pub sigma_index: usize,
    /// Value on the lambda axis (the base for scaled regularization).
    pub lambda: f64,
    pub effective_lambda: f64,
    pub n_traj: usize,
    pub sigma: f64,
    pub trial: usize,
    pub p: f64,
    /// Fraction of grid points whose prediction left the escape radius.
    pub diverged_fraction: f64,
    pub kappa_w: f64,
    pub kappa_g: f64,
    pub e: f64,
    pub d: f64,
    pub stable: bool,
    pub wall_seconds: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub model: Option<TrainedModel>,
    #[serde(skip)]
    pub basins: Option<BasinGrid>,
}

impl CellRecord {
    fn empty(config: &ExperimentConfig, li: usize, ni: usize, si: usize, trial: usize) -> Self {
        let lambda = config.sweep.lambda_axis()[li];
        let n_traj = config.sweep.n_traj[ni];
        CellRecord {
            lambda_index: li,
            n_index: ni,
            sigma_index: si,
            lambda,
            effective_lambda: config.sweep.policy(lambda).effective_lambda(n_traj),
            n_traj,
            sigma: config.sweep.sigma[si],
            trial,
            p: f64::NAN,
            diverged_fraction: f64::NAN,
            kappa_w: f64::NAN,
            kappa_g: f64::NAN,
            e: f64::NAN,
            d: f64::NAN,
            stable: false,
            wall_seconds: 0.0,
            error: None,
            model: None,
            basins: None,
        }
    }

    /// Model artifact / basin file stem for this cell.
    pub fn stem(&self) -> String {
        format!(
            "l{}_n{}_s{}_t{}",
            self.lambda_index, self.n_traj, self.sigma_index, self.trial
        )
    }
}

/// All cells of a sweep in canonical order: lambda, then N_traj, sigma, trial.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub records: Vec<CellRecord>,
    pub truth: BasinGrid,
}

pub const RAW_HEADER: &str = "lambda,n_traj,sigma,trial,p,kappa_W,kappa_G,e,d,stable";
pub const MEAN_HEADER: &str =
    "lambda,n_traj,sigma,trials,p_mean,p_std,diverged_trials,kappa_W_mean,kappa_G_mean,e_mean,d_mean,d_finite,stable_trials";
pub const TIMING_HEADER: &str = "lambda,n_traj,sigma,trial,wall_seconds";

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl SweepResult {
    pub fn cell(&self, li: usize, ni: usize, si: usize, trial: usize) -> Option<&CellRecord> {
        self.records.iter().find(|r| {
            r.lambda_index == li && r.n_index == ni && r.sigma_index == si && r.trial == trial
        })
    }

    /// Records sharing `(li, ni, si)`, in trial order.
    pub fn trials(&self, li: usize, ni: usize, si: usize) -> Vec<&CellRecord> {
        self.records
            .iter()
            .filter(|r| r.lambda_index == li && r.n_index == ni && r.sigma_index == si)
            .collect()
    }

    pub fn raw_csv(&self) -> String {
        let mut out = String::from(RAW_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.lambda, r.n_traj, r.sigma, r.trial, r.p, r.kappa_w, r.kappa_g, r.e, r.d, r.stable
            );
        }
        out
    }

    pub fn mean_csv(&self) -> String {
        let mut out = String::from(MEAN_HEADER);
        out.push('\n');
        let mut keys: Vec<(usize, usize, usize)> = self
            .records
            .iter()
            .map(|r| (r.lambda_index, r.n_index, r.sigma_index))
            .collect();
        keys.dedup();
        for (li, ni, si) in keys {
            let cells = self.trials(li, ni, si);
            let first = cells[0];
            let p_mean = mean(cells.iter().map(|r| r.p));
            let p_var = mean(cells.iter().map(|r| (r.p - p_mean).powi(2)));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                first.lambda,
                first.n_traj,
                first.sigma,
                cells.len(),
                p_mean,
                p_var.sqrt(),
                cells.iter().filter(|r| r.diverged_fraction == 1.0).count(),
                mean(cells.iter().map(|r| r.kappa_w)),
                mean(cells.iter().map(|r| r.kappa_g)),
                mean(cells.iter().map(|r| r.e)),
                mean(cells.iter().map(|r| r.d)),
                cells.iter().filter(|r| r.d.is_finite()).count(),
                cells.iter().filter(|r| r.stable).count(),
            );
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from(TIMING_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.lambda, r.n_traj, r.sigma, r.trial, r.wall_seconds
            );
        }
        out
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from("lambda,n_traj,sigma,trial,error\n");
        for r in &self.records {
            if let Some(e) = &r.error {
                let _ = writeln!(
                    out,
                    "{},{},{},{},\"{}\"",
                    r.lambda,
                    r.n_traj,
                    r.sigma,
                    r.trial,
                    e.replace('"', "'")
                );
            }
        }
        out
    }

    /// Writes `config.snapshot`, `raw.csv`, `mean.csv`, `timing.csv`,
    /// `errors.csv` and, when requested, per-cell models and basin grids.
    pub fn write(&self, config: &ExperimentConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        put("config.snapshot", config.to_toml()?)?;
        put("raw.csv", self.raw_csv())?;
        put("mean.csv", self.mean_csv())?;
        put("timing.csv", self.timing_csv())?;
        put("errors.csv", self.errors_csv())?;
        if config.output.save_models {
            let md = dir.join("models");
            std::fs::create_dir_all(&md).map_err(|e| Error::io(&md, e))?;
            for r in &self.records {
                if let Some(m) = &r.model {
                    m.save(&md.join(format!("{}.json", r.stem())))?;
                }
            }
        }
        if config.output.save_basins {
            let bd = dir.join("basins");
            std::fs::create_dir_all(&bd).map_err(|e| Error::io(&bd, e))?;
            self.truth.write_csv(&bd.join("truth.csv"))?;
            for r in &self.records {
                if let Some(b) = &r.basins {
                    b.write_csv(&bd.join(format!("{}.csv", r.stem())))?;
                }
            }
        }
        Ok(())
    }
}

/// Pooled `R` factors after each prefix length in `checkpoints`.
fn pooled_prefixes(parts: &[StreamingQr], cols: usize, checkpoints: &[usize]) -> Vec<StreamingQr> {
    let mut acc = StreamingQr::new(cols);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut done = 0;
    for &c in checkpoints {
        for p in &parts[done..c] {
            acc.merge(p);
        }
        done = c;
        out.push(acc.clone());
    }
    out
}

struct CellInputs<'a> {
    config: &'a ExperimentConfig,
    spec: &'a FeatureSpec,
    truth: &'a BasinGrid,
    probe: State,
    fit_grid: GridSpec,
}

fn score_cell(
    inp: &CellInputs<'_>,
    ne: &NormalEquations,
    opts: &TrainOptions,
    rec: &mut CellRecord,
) -> Result<()> {
    let cfg = inp.config;
    let rk = cfg.rk();
    let policy = cfg.sweep.policy(rec.lambda);
    let model = model_from_normal(ne, inp.spec, cfg.data.dt, policy, opts)?;
    rec.kappa_w = condition_number(model.weights()).unwrap_or(f64::NAN);
    let diag = &cfg.diagnostics;
    let mut any_diverged = false;
    if diag.basins {
        let grid = predict_basin_grid(
            &model,
            &cfg.pendulum,
            &cfg.grid,
            &rk,
            &cfg.classify,
            cfg.execution,
        )?;
        rec.p = error_rate(inp.truth, &grid)?;
        rec.diverged_fraction = grid.fraction(AttractorLabel::Diverged);
        any_diverged = grid.count(AttractorLabel::Diverged) > 0;
        if cfg.output.save_basins {
            rec.basins = Some(grid);
        }
    }
    if diag.fit_error {
        let sel = FitSelector {
            plane: diag.fit_plane,
            component: diag.fit_component,
        };
        rec.e = flow_fitting_error(&model, &cfg.pendulum, &inp.fit_grid, sel, &rk)?;
    }
    if diag.transverse && inp.spec.delays >= 2 {
        let warm = rk.history(
            &cfg.pendulum,
            inp.probe,
            cfg.data.dt,
            inp.spec.lookback() + 1,
        );
        rec.d = transverse_distance(
            &model,
            &cfg.pendulum,
            &warm,
            diag.horizon,
            cfg.classify.escape_radius,
            &rk,
        )?;
    }
    rec.stable = !any_diverged && rec.d != f64::INFINITY;
    rec.model = Some(model);
    Ok(())
}

fn fail(rec: &mut CellRecord, e: Error) {
    rec.error = Some(e.to_string());
    rec.stable = false;
}

pub fn run_instability_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let truth = ground_truth(config);
    run_instability_sweep_with(config, &truth)
}

/// Runs the sweep against a precomputed ground-truth grid. Failures inside a
/// cell are stored in its record; only invalid configuration aborts.
pub fn run_instability_sweep_with(
    config: &ExperimentConfig,
    truth: &BasinGrid,
) -> Result<SweepResult> {
    config.validate()?;
    if truth.grid != config.grid || truth.labels.len() != config.grid.len() {
        return Err(Error::SpecMismatch(
            "ground truth was computed on a different grid".into(),
        ));
    }
    let spec = config.feature_spec();
    let sw = &config.sweep;
    let lambdas = sw.lambda_axis();
    let mut checkpoints: Vec<usize> = sw.n_traj.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let n_max = *checkpoints.last().expect("validated non-empty");
    let fit_grid = GridSpec::square(config.data.ic_half_width, config.diagnostics.fit_grid);

    let mut records = Vec::new();
    for trial in 0..config.trials {
        let inp = CellInputs {
            config,
            spec: &spec,
            truth,
            probe: probe_initial_condition(config, trial),
            fit_grid: fit_grid.clone(),
        };
        let set = generate_training_set(config, n_max, trial);
        let trajs = match set {
            Ok(t) => t,
            Err(e) => {
                for li in 0..lambdas.len() {
                    for ni in 0..sw.n_traj.len() {
                        for si in 0..sw.sigma.len() {
                            let mut rec = CellRecord::empty(config, li, ni, si, trial);
                            fail(
                                &mut rec,
                                Error::InvalidParameter(format!("training set: {e}")),
                            );
                            records.push(rec);
                        }
                    }
                }
                continue;
            }
        };
        let kappa_g: Vec<f64> = if config.diagnostics.kappa_g {
            match trajectory_r_factors(&spec, &trajs, config.execution) {
                Ok(parts) => pooled_prefixes(&parts, spec.feature_count(), &checkpoints)
                    .iter()
                    .map(|q| condition_number(q.r()).unwrap_or(f64::NAN))
                    .collect(),
                Err(_) => vec![f64::NAN; checkpoints.len()],
            }
        } else {
            vec![f64::NAN; checkpoints.len()]
        };
        for (si, &sigma) in sw.sigma.iter().enumerate() {
            let opts = TrainOptions {
                noise_sigma: sigma,
                seed: noise_seed(config, trial, si),
                rcond: None,
                exec: config.execution,
            };
            let prefixes = InputNoise::new(sigma, opts.seed).and_then(|noise| {
                accumulate_prefixes(
                    &spec,
                    &trajs,
                    noise.as_ref(),
                    config.execution,
                    &checkpoints,
                )
            });
            for li in 0..lambdas.len() {
                for (ni, &n) in sw.n_traj.iter().enumerate() {
                    let started = Instant::now();
                    let mut rec = CellRecord::empty(config, li, ni, si, trial);
                    let ci = checkpoints.binary_search(&n).expect("checkpoint present");
                    rec.kappa_g = kappa_g[ci];
                    match &prefixes {
                        Ok(ne) => {
                            if let Err(e) = score_cell(&inp, &ne[ci], &opts, &mut rec) {
                                fail(&mut rec, e);
                            }
                        }
                        Err(e) => fail(
                            &mut rec,
                            Error::InvalidParameter(format!("accumulation: {e}")),
                        ),
                    }
                    rec.wall_seconds = started.elapsed().as_secs_f64();
                    records.push(rec);
                }
            }
        }
    }
    records.sort_by_key(|r| (r.lambda_index, r.n_index, r.sigma_index, r.trial));
    Ok(SweepResult {
        records,
        truth: truth.clone(),
    })
}
