//! Diagnostic suite: conditioning per training-set size, per-trajectory
//! histograms, angles versus time skip and weight-table dumps.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::sweep::{
    generate_training_set, noise_seed, probe_initial_condition, training_trajectory,
};
use crate::diagnostics::{
    adams_bashforth_reference, block_weight_norms, condition_number, conditioning_from_r,
    design_conditioning, flow_fitting_error, partition_ranges, table1_columns, table1_headers,
    trajectory_r_factors, transverse_distance, Conditioning, DiagnosticsReport, FitSelector,
    StreamingQr,
};
use crate::dynamics::{error_rate, BasinGrid, GridSpec, Trajectory};
use crate::features::{FeatureSpec, InputNoise};
use crate::model::{
    accumulate_prefixes, model_from_normal, predict_basin_grid, TrainOptions, TrainedModel,
};
use crate::par;
use crate::{Error, Result};

/// Readout entries in weight-table column order, followed by the bias column
/// when present. Entries are per unit time (`W / dt`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Dump {
    pub label: String,
    pub n_traj: usize,
    pub lambda: f64,
    pub kappa_w: f64,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table1Dump {
    fn from_matrix(
        label: &str,
        n_traj: usize,
        lambda: f64,
        w: &nalgebra::DMatrix<f64>,
        spec: &FeatureSpec,
    ) -> Result<Self> {
        let mut cols = table1_columns(spec)?;
        let mut headers = table1_headers();
        if let Some(b) = spec.bias_index() {
            cols.push(b);
            headers.push("1".into());
        }
        let rows = (0..w.nrows())
            .map(|r| cols.iter().map(|&c| w[(r, c)]).collect())
            .collect();
        Ok(Table1Dump {
            label: label.to_string(),
            n_traj,
            lambda,
            kappa_w: condition_number(w).unwrap_or(f64::NAN),
            headers,
            rows,
        })
    }

    pub fn from_model(model: &TrainedModel, label: &str) -> Result<Self> {
        let mut d = Self::from_matrix(
            label,
            model.provenance.n_traj_used,
            model.lambda,
            &model.weights_per_dt(),
            &model.spec,
        )?;
        d.kappa_w = condition_number(model.weights()).unwrap_or(f64::NAN);
        Ok(d)
    }

    /// The two-step Adams–Bashforth table.
    pub fn reference(spec: &FeatureSpec) -> Result<Self> {
        Self::from_matrix(
            "adams_bashforth",
            0,
            0.0,
            &adams_bashforth_reference(spec)?,
            spec,
        )
    }

    pub const ROW_NAMES: [&'static str; 4] = ["x", "y", "vx", "vy"];

    /// CSV block: `label,n_traj,lambda,kappa_W,output,<headers...>`.
    pub fn csv(dumps: &[Table1Dump]) -> String {
        let mut out = String::new();
        if let Some(first) = dumps.first() {
            let _ = writeln!(
                out,
                "label,n_traj,lambda,kappa_W,output,{}",
                first.headers.join(",")
            );
        }
        for d in dumps {
            for (name, row) in Self::ROW_NAMES.iter().zip(&d.rows) {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    d.label,
                    d.n_traj,
                    d.lambda,
                    d.kappa_w,
                    name,
                    vals.join(",")
                );
            }
        }
        out
    }
}

/// Conditioning of one trajectory's design matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryConditioning {
    pub index: usize,
    pub kappa_g: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    pub min_angle: f64,
}

impl TrajectoryConditioning {
    pub fn amplification(&self) -> f64 {
        self.kappa_g / self.kappa_a.max(self.kappa_b)
    }
}

/// Histogram of `log10(kappa)` on shared bin edges.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogHistogram {
    pub family: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values that were infinite or NaN.
    pub non_finite: usize,
}

fn log_histograms(families: &[(&str, Vec<f64>)], bins: usize) -> Vec<LogHistogram> {
    let logs: Vec<Vec<f64>> = families
        .iter()
        .map(|(_, v)| {
            v.iter()
                .filter(|x| x.is_finite() && **x > 0.0)
                .map(|x| x.log10())
                .collect()
        })
        .collect();
    let all = logs.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let (lo, hi) = if lo.is_finite() {
        (lo, hi.max(lo + 1.0))
    } else {
        (0.0, 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    families
        .iter()
        .zip(&logs)
        .map(|((name, raw), l)| {
            let mut counts = vec![0; bins];
            for x in l {
                counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            LogHistogram {
                family: name.to_string(),
                edges: edges.clone(),
                counts,
                non_finite: raw.len() - l.len(),
            }
        })
        .collect()
}

/// Pooled conditioning for one time skip.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipConditioning {
    pub skip: usize,
    pub n_traj: usize,
    pub conditioning: Conditioning,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticSuite {
    /// One report per entry of `sweep.n_traj`.
    pub reports: Vec<DiagnosticsReport>,
    pub per_trajectory: Vec<TrajectoryConditioning>,
    pub histograms: Vec<LogHistogram>,
    pub skips: Vec<SkipConditioning>,
    pub table1: Vec<Table1Dump>,
    #[serde(skip)]
    pub models: Vec<TrainedModel>,
}

fn pooled(parts: &[StreamingQr], cols: usize) -> StreamingQr {
    let mut acc = StreamingQr::new(cols);
    for p in parts {
        acc.merge(p);
    }
    acc
}

fn per_trajectory(
    spec: &FeatureSpec,
    trajs: &[Trajectory],
    config: &ExperimentConfig,
) -> Result<Vec<TrajectoryConditioning>> {
    let (ra, _) = partition_ranges(spec)?;
    let parts = trajectory_r_factors(spec, trajs, config.execution)?;
    par::map_slice(config.execution, &parts, |q| {
        conditioning_from_r(q.r(), ra.end)
    })
    .into_iter()
    .enumerate()
    .map(|(index, c)| {
        c.map(|c| TrajectoryConditioning {
            index,
            kappa_g: c.kappa_g,
            kappa_a: c.kappa_a,
            kappa_b: c.kappa_b,
            min_angle: c.min_angle(),
        })
    })
    .collect()
}

/// Pooled conditioning over the first `histogram_traj` trajectories of
/// `trial` for each configured time skip. Initial conditions are shared across
/// skips.
pub fn skip_conditioning(config: &ExperimentConfig, trial: usize) -> Result<Vec<SkipConditioning>> {
    let n = config.diagnostics.histogram_traj.max(1);
    config
        .diagnostics
        .skips
        .iter()
        .map(|&skip| {
            let spec = config.feature_spec().with_skip(skip);
            spec.validate()?;
            let trajs: Vec<Trajectory> = par::map_range(config.execution, n, |i| {
                training_trajectory(config, &spec, trial, i)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let parts = trajectory_r_factors(&spec, &trajs, config.execution)?;
            Ok(SkipConditioning {
                skip,
                n_traj: n,
                conditioning: design_conditioning(&pooled(&parts, spec.feature_count()), &spec)?,
            })
        })
        .collect()
}

/// Models for each `sweep.n_traj` entry of `trial`, at the first lambda-axis
/// value and the first sigma.
pub fn train_suite_models(config: &ExperimentConfig, trial: usize) -> Result<Vec<TrainedModel>> {
    let spec = config.feature_spec();
    let n_max = *config.sweep.n_traj.iter().max().expect("validated");
    let trajs = generate_training_set(config, n_max, trial)?;
    train_on(config, &spec, &trajs, trial)
}

fn train_on(
    config: &ExperimentConfig,
    spec: &FeatureSpec,
    trajs: &[Trajectory],
    trial: usize,
) -> Result<Vec<TrainedModel>> {
    let sigma = config.sweep.sigma[0];
    let opts = TrainOptions {
        noise_sigma: sigma,
        seed: noise_seed(config, trial, 0),
        rcond: None,
        exec: config.execution,
    };
    let noise = InputNoise::new(sigma, opts.seed)?;
    let ne = accumulate_prefixes(
        spec,
        &trajs[..*config.sweep.n_traj.iter().max().expect("validated")],
        noise.as_ref(),
        config.execution,
        &sorted(&config.sweep.n_traj),
    )?;
    let policy = config.sweep.policy(config.sweep.lambda_axis()[0]);
    let order = sorted(&config.sweep.n_traj);
    config
        .sweep
        .n_traj
        .iter()
        .map(|n| {
            let ci = order.binary_search(n).expect("present");
            model_from_normal(&ne[ci], spec, config.data.dt, policy, &opts)
        })
        .collect()
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Weight tables for each `sweep.n_traj` entry, preceded by the reference.
pub fn table1_dumps(config: &ExperimentConfig, trial: usize) -> Result<Vec<Table1Dump>> {
    let spec = config.feature_spec();
    let mut out = vec![Table1Dump::reference(&spec)?];
    for m in train_suite_models(config, trial)? {
        out.push(Table1Dump::from_model(
            &m,
            &format!("n{}", m.provenance.n_traj_used),
        )?);
    }
    Ok(out)
}

/// Runs every diagnostic on trial `trial`. Error rates are filled in only when
/// a ground-truth grid is supplied and basin scoring is enabled.
pub fn run_diagnostic_suite(
    config: &ExperimentConfig,
    trial: usize,
    truth: Option<&BasinGrid>,
) -> Result<DiagnosticSuite> {
    config.validate()?;
    let spec = config.feature_spec();
    let diag = &config.diagnostics;
    let rk = config.rk();
    let n_max = *config.sweep.n_traj.iter().max().expect("validated");
    let trajs = generate_training_set(config, n_max.max(diag.histogram_traj), trial)?;
    let models = train_on(config, &spec, &trajs, trial)?;

    let (ra, _) = partition_ranges(&spec)?;
    let parts = trajectory_r_factors(&spec, &trajs[..n_max], config.execution)?;
    let reference = adams_bashforth_reference(&spec).ok();
    let fit_grid = GridSpec::square(config.data.ic_half_width, diag.fit_grid);
    let probe = probe_initial_condition(config, trial);
    let mut reports = Vec::with_capacity(models.len());
    for (model, &n) in models.iter().zip(&config.sweep.n_traj) {
        let cond = conditioning_from_r(pooled(&parts[..n], spec.feature_count()).r(), ra.end)?;
        let e = flow_fitting_error(
            model,
            &config.pendulum,
            &fit_grid,
            FitSelector {
                plane: diag.fit_plane,
                component: diag.fit_component,
            },
            &rk,
        )?;
        let d = if spec.delays >= 2 {
            let warm = rk.history(&config.pendulum, probe, config.data.dt, spec.lookback() + 1);
            transverse_distance(
                model,
                &config.pendulum,
                &warm,
                diag.horizon,
                config.classify.escape_radius,
                &rk,
            )?
        } else {
            f64::NAN
        };
        let p = match truth {
            Some(t) if diag.basins => {
                let grid = predict_basin_grid(
                    model,
                    &config.pendulum,
                    &config.grid,
                    &rk,
                    &config.classify,
                    config.execution,
                )?;
                error_rate(t, &grid)?
            }
            _ => f64::NAN,
        };
        let norms = match &reference {
            Some(r) => Some(block_weight_norms(&model.weights_per_dt(), &spec, r)?),
            None => None,
        };
        reports.push(DiagnosticsReport {
            label: format!("n{n}"),
            kappa_g: cond.kappa_g,
            kappa_a: cond.kappa_a,
            kappa_b: cond.kappa_b,
            kappa_w: condition_number(model.weights()).unwrap_or(f64::NAN),
            principal_angles: cond.principal_angles,
            fitting_error_e: e,
            transverse_d: d,
            error_rate_p: p,
            block_weight_norms: norms,
        });
    }

    let per_traj = per_trajectory(&spec, &trajs[..diag.histogram_traj.max(1)], config)?;
    let histograms = log_histograms(
        &[
            ("kappa_G", per_traj.iter().map(|c| c.kappa_g).collect()),
            ("kappa_A", per_traj.iter().map(|c| c.kappa_a).collect()),
            ("kappa_B", per_traj.iter().map(|c| c.kappa_b).collect()),
        ],
        diag.histogram_bins,
    );
    let skips = skip_conditioning(config, trial)?;
    let mut table1 = Vec::new();
    if table1_columns(&spec).is_ok() {
        table1.push(Table1Dump::reference(&spec)?);
        for m in &models {
            table1.push(Table1Dump::from_model(
                m,
                &format!("n{}", m.provenance.n_traj_used),
            )?);
        }
    }
    Ok(DiagnosticSuite {
        reports,
        per_trajectory: per_traj,
        histograms,
        skips,
        table1,
        models,
    })
}

impl DiagnosticSuite {
    /// Writes `reports.csv`, `reports.json`, `trajectories.csv`,
    /// `histograms.csv`, `skips.csv` and (pendulum, k = 2) `table1.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        let mut csv = format!("{}\n", DiagnosticsReport::CSV_HEADER);
        for r in &self.reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        put("reports.csv", csv)?;
        put("reports.json", serde_json::to_string_pretty(&self.reports)?)?;

        let mut t = String::from("index,kappa_G,kappa_A,kappa_B,min_angle,amplification\n");
        for c in &self.per_trajectory {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{}",
                c.index,
                c.kappa_g,
                c.kappa_a,
                c.kappa_b,
                c.min_angle,
                c.amplification()
            );
        }
        put("trajectories.csv", t)?;

        let mut h = String::from("family,log10_lo,log10_hi,count\n");
        for hist in &self.histograms {
            for (i, c) in hist.counts.iter().enumerate() {
                let _ = writeln!(
                    h,
                    "{},{},{},{}",
                    hist.family,
                    hist.edges[i],
                    hist.edges[i + 1],
                    c
                );
            }
            let _ = writeln!(h, "{},inf,inf,{}", hist.family, hist.non_finite);
        }
        put("histograms.csv", h)?;

        let mut s = String::from("skip,n_traj,kappa_G,kappa_A,kappa_B,min_angle,angles\n");
        for k in &self.skips {
            let c = &k.conditioning;
            let angles: Vec<String> = c.principal_angles.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                k.skip,
                k.n_traj,
                c.kappa_g,
                c.kappa_a,
                c.kappa_b,
                c.min_angle(),
                angles.join(";")
            );
        }
        put("skips.csv", s)?;
        if !self.table1.is_empty() {
            put("table1.csv", Table1Dump::csv(&self.table1))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{adams_bashforth_readout, pooled_r_factor};
    use crate::dynamics::GridSpec;
    use crate::model::{train_with, RegularizationPolicy};

    fn toy() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.n_train = 300;
        c.grid = GridSpec::square(1.5, 3);
        c.classify.t_max = 20.0;
        c.diagnostics.fit_grid = 4;
        c.diagnostics.horizon = 2.0;
        c.diagnostics.histogram_traj = 2;
        c.diagnostics.histogram_bins = 5;
        c.sweep.lambda = vec![1e-2];
        c.sweep.n_traj = vec![1, 2];
        c
    }

    #[test]
    fn suite_matches_hand_invoked_modules() {
        let c = toy();
        let truth = super::super::ground_truth(&c);
        let suite = run_diagnostic_suite(&c, 0, Some(&truth)).unwrap();
        let spec = c.feature_spec();
        let trajs = generate_training_set(&c, 2, 0).unwrap();
        let model = train_with(
            &spec,
            &trajs,
            RegularizationPolicy::Fixed { lambda: 1e-2 },
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(suite.models[1].weights(), model.weights());
        let r = &suite.reports[1];
        assert_eq!(r.label, "n2");
        let q = pooled_r_factor(&spec, &trajs, c.execution).unwrap();
        let cond = design_conditioning(&q, &spec).unwrap();
        assert_eq!(r.kappa_g, cond.kappa_g);
        assert_eq!(r.principal_angles, cond.principal_angles);
        assert_eq!(r.kappa_w, condition_number(model.weights()).unwrap());
        let rk = c.rk();
        let sel = FitSelector::default();
        let fit = GridSpec::square(1.5, 4);
        assert_eq!(
            r.fitting_error_e,
            flow_fitting_error(&model, &c.pendulum, &fit, sel, &rk).unwrap()
        );
        let grid = predict_basin_grid(&model, &c.pendulum, &c.grid, &rk, &c.classify, c.execution)
            .unwrap();
        assert_eq!(r.error_rate_p, error_rate(&truth, &grid).unwrap());
        let norms = r.block_weight_norms.as_ref().unwrap();
        let reference = adams_bashforth_reference(&spec).unwrap();
        assert_eq!(
            *norms,
            block_weight_norms(&model.weights_per_dt(), &spec, &reference).unwrap()
        );

        assert_eq!(suite.per_trajectory.len(), 2);
        for h in &suite.histograms {
            assert_eq!(h.counts.iter().sum::<usize>() + h.non_finite, 2);
        }
        assert_eq!(
            suite.skips.iter().map(|s| s.skip).collect::<Vec<_>>(),
            vec![1, 5, 10]
        );
        assert_eq!(suite.table1.len(), 3);
        assert_eq!(suite.table1[1].rows[2].len(), 21);

        let dir = tempfile::tempdir().unwrap();
        suite.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("reports.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let t1 = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1.lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn reference_dump_is_scaled_back() {
        let spec = ExperimentConfig::default().feature_spec();
        let d = Table1Dump::reference(&spec).unwrap();
        let m = TrainedModel::from_weights(
            adams_bashforth_readout(&spec, 0.01).unwrap(),
            spec.clone(),
            0.01,
        )
        .unwrap();
        let from_model = Table1Dump::from_model(&m, "x").unwrap();
        for (a, b) in d
            .rows
            .iter()
            .flatten()
            .zip(from_model.rows.iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
        // vx row: 1.5 * (-omega0^2) on x, then the delayed -0.5 multiple.
        assert_eq!(d.rows[2][0], -0.375);
        assert_eq!(d.rows[2][4], 0.125);
        assert_eq!(d.headers.last().unwrap(), "1");
    }

    #[test]
    fn histogram_edges_cover_values() {
        let h = log_histograms(
            &[("a", vec![10.0, 1e3, f64::INFINITY]), ("b", vec![1e5])],
            4,
        );
        assert_eq!(h[0].edges.first(), Some(&1.0));
        assert_eq!(h[0].edges.last(), Some(&5.0));
        assert_eq!(h[0].counts, vec![1, 0, 1, 0]);
        assert_eq!(h[0].non_finite, 1);
        assert_eq!(h[1].counts, vec![0, 0, 0, 1]);
    }
}
