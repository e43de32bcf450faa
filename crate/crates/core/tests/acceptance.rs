//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Set `NGRC_ACCEPTANCE_TRIALS` to run fewer trials while iterating locally;
//! the thresholds below assume the default of 10.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use ngrc::diagnostics::{ode_coefficients, pair_sums, principal_angles};
use ngrc::dynamics::{pendulum_rhs, BasinGrid, PendulumParams, Rk4, State};
use ngrc::features::{build_design_matrices, FeatureSpec};
use ngrc::harness::{
    generate_training_set, ground_truth, run_diagnostic_suite, run_instability_sweep_with,
    CellRecord, ExperimentConfig, Regularization, SweepResult, Table1Dump,
};
use ngrc::model::{accumulate_normal_equations, solve_ridge};
use ngrc::par::Execution;
use ngrc::seed;

struct Outcome {
    results: Vec<(u32, bool, String)>,
}

impl Outcome {
    fn record(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        println!(
            "{} criterion {id:>2} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        self.results.push((id, ok, detail));
    }
}

fn trials() -> usize {
    std::env::var("NGRC_ACCEPTANCE_TRIALS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(10)
}

const N_SWEEP: [usize; 5] = [10, 30, 100, 300, 1000];

fn base() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.trials = trials();
    c.sweep.n_traj = N_SWEEP.to_vec();
    c.sweep.sigma = vec![0.0];
    c
}

fn sweep(label: &str, c: &ExperimentConfig, truth: &BasinGrid) -> SweepResult {
    let t = Instant::now();
    let r = run_instability_sweep_with(c, truth).expect("valid sweep config");
    println!(
        "# {label}: {} cells in {:.1}s",
        r.records.len(),
        t.elapsed().as_secs_f64()
    );
    for x in r.records.iter().filter(|x| x.error.is_some()) {
        println!(
            "#   cell error lambda={} n={} sigma={} trial={}: {:?}",
            x.lambda, x.n_traj, x.sigma, x.trial, x.error
        );
    }
    for line in r.mean_csv().lines() {
        println!("#   {line}");
    }
    r
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn by_n(r: &SweepResult, li: usize, si: usize, trial: usize) -> Vec<&CellRecord> {
    (0..N_SWEEP.len())
        .map(|ni| r.cell(li, ni, si, trial).expect("cell"))
        .collect()
}

fn criterion_1_2(out: &mut Outcome, e1: &SweepResult, n_trials: usize) {
    let li = 1;
    let p10 = mean(e1.trials(li, 0, 0).iter().map(|r| r.p));
    let p100 = mean(e1.trials(li, 2, 0).iter().map(|r| r.p));
    let all_div = e1
        .trials(li, 4, 0)
        .iter()
        .filter(|r| r.diverged_fraction == 1.0)
        .count();
    let need = (9 * n_trials).div_ceil(10);
    out.record(
        1,
        "instability transition",
        (0.10..=0.35).contains(&p10) && (0.10..=0.35).contains(&p100) && all_div >= need,
        format!("mean p(N=10)={p10:.3}, p(N=100)={p100:.3}, all-diverged at N=1000 in {all_div}/{n_trials} trials"),
    );

    let target = [5.0, 27.0, 215.0];
    let mut ok = true;
    let mut worst: f64 = 1.0;
    for t in 0..n_trials {
        let k: Vec<f64> = [0, 2, 4]
            .iter()
            .map(|&ni| e1.cell(li, ni, 0, t).unwrap().kappa_w)
            .collect();
        ok &= k[0] < k[1] && k[1] < k[2];
        for (a, b) in k.iter().zip(target) {
            let f = (a / b).max(b / a);
            worst = worst.max(f);
            ok &= f <= 3.0;
        }
    }
    let means: Vec<String> = [0, 2, 4]
        .iter()
        .map(|&ni| {
            format!(
                "{:.1}",
                mean(e1.trials(li, ni, 0).iter().map(|r| r.kappa_w))
            )
        })
        .collect();
    out.record(
        2,
        "condition-number growth",
        ok,
        format!("mean kappa(W) at N=10,100,1000: {} (target 5, 27, 215); worst per-trial factor {worst:.2}", means.join(", ")),
    );
}

fn criterion_3(out: &mut Outcome, e1: &SweepResult) {
    let mut ok = true;
    let mut parts = vec![];
    for (li, lambda) in e1
        .records
        .iter()
        .map(|r| (r.lambda_index, r.lambda))
        .collect::<std::collections::BTreeMap<_, _>>()
    {
        let e: Vec<f64> = (0..N_SWEEP.len())
            .map(|ni| mean(e1.trials(li, ni, 0).iter().map(|r| r.e)))
            .collect();
        let non_inc = e.windows(2).all(|w| w[1] <= w[0]);
        let strict = e.windows(2).filter(|w| w[1] < w[0]).count();
        ok &= non_inc && strict >= 4;
        parts.push(format!(
            "lambda={lambda:e}: [{}] strict {strict}/4",
            e.iter()
                .map(|v| format!("{v:.3e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    out.record(3, "no flow-map overfitting", ok, parts.join("; "));
}

fn first_index(cells: &[&CellRecord], f: impl Fn(&CellRecord) -> bool) -> Option<usize> {
    cells.iter().position(|c| f(c))
}

fn criterion_4(out: &mut Outcome, e1: &SweepResult, n_trials: usize) {
    let mut mismatches = vec![];
    let n_lambda = e1.records.iter().map(|r| r.lambda_index).max().unwrap() + 1;
    for li in 0..n_lambda {
        for t in 0..n_trials {
            let cells = by_n(e1, li, 0, t);
            let d_onset = first_index(&cells, |c| !c.d.is_finite());
            let p_onset = first_index(&cells, |c| c.p == 1.0);
            if d_onset != p_onset || cells.iter().any(|c| c.error.is_some()) {
                mismatches.push(format!(
                    "lambda={:e} trial {t}: d at {:?}, p=1 at {:?}",
                    cells[0].lambda,
                    d_onset.map(|i| N_SWEEP[i]),
                    p_onset.map(|i| N_SWEEP[i])
                ));
            }
        }
    }
    let onsets: Vec<String> = (0..n_lambda)
        .map(|li| {
            let o: Vec<String> = (0..n_trials)
                .map(|t| {
                    first_index(&by_n(e1, li, 0, t), |c| c.p == 1.0)
                        .map_or("-".into(), |i| N_SWEEP[i].to_string())
                })
                .collect();
            format!(
                "lambda={:e}: [{}]",
                e1.cell(li, 0, 0, 0).unwrap().lambda,
                o.join(" ")
            )
        })
        .collect();
    out.record(
        4,
        "transverse onset coincidence",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("onsets per trial {}", onsets.join("; "))
        } else {
            mismatches.join("; ")
        },
    );
}

fn criterion_5(out: &mut Outcome, e2: &SweepResult, n_trials: usize) {
    let mut ok = true;
    let mut parts = vec![];
    let n_lambda = e2.records.iter().map(|r| r.lambda_index).max().unwrap() + 1;
    for li in 0..n_lambda {
        let mut worst_ratio: f64 = 1.0;
        let mut stable = true;
        for t in 0..n_trials {
            let cells = by_n(e2, li, 0, t);
            stable &= cells
                .iter()
                .all(|c| c.error.is_none() && c.p < 1.0 && c.d.is_finite());
            let k: Vec<f64> = cells.iter().map(|c| c.kappa_w).collect();
            let hi = k.iter().cloned().fold(f64::MIN, f64::max);
            let lo = k.iter().cloned().fold(f64::MAX, f64::min);
            worst_ratio = worst_ratio.max(hi / lo);
        }
        let e300 = mean(e2.trials(li, 3, 0).iter().map(|r| r.e));
        let e1000 = mean(e2.trials(li, 4, 0).iter().map(|r| r.e));
        let sat = ((e1000 - e300) / e300).abs();
        ok &= stable && worst_ratio < 3.0 && sat < 0.2;
        parts.push(format!(
            "base={:e}: stable={stable} kappa max/min {worst_ratio:.2} e(300->1000) change {:.1}%",
            e2.cell(li, 0, 0, 0).unwrap().lambda,
            100.0 * sat
        ));
    }
    out.record(5, "scaled regularization", ok, parts.join("; "));
}

fn criterion_6(out: &mut Outcome, e3: &SweepResult, n_trials: usize) {
    // sigma index 0 is 8e-5, index 1 is 1e-4.
    let mut good = 0;
    let mut onsets = vec![];
    for t in 0..n_trials {
        let low = by_n(e3, 0, 0, t);
        let high = by_n(e3, 0, 1, t);
        let high_ok = high.iter().all(|c| c.error.is_none() && c.p < 1.0);
        let onset = first_index(&low, |c| c.p == 1.0);
        let low_ok = onset.is_some_and(|i| low[i..].iter().all(|c| c.p == 1.0));
        onsets.push(onset.map_or("-".into(), |i| N_SWEEP[i].to_string()));
        if high_ok && low_ok {
            good += 1;
        }
    }
    let need = (8 * n_trials).div_ceil(10);
    out.record(
        6,
        "noise regularization",
        good >= need,
        format!(
            "{good}/{n_trials} trials reproduce; sigma=8e-5 onset N per trial [{}]",
            onsets.join(" ")
        ),
    );
}

fn criterion_7_table(out: &mut Outcome, c: &ExperimentConfig) {
    let mut cfg = c.clone();
    cfg.sweep.n_traj = vec![10, 100, 1000];
    cfg.sweep.lambda = vec![1e-2];
    cfg.diagnostics.basins = false;
    let suite = run_diagnostic_suite(&cfg, 0, None).expect("suite");
    let mut amp: Vec<f64> = suite
        .per_trajectory
        .iter()
        .map(|t| t.amplification())
        .collect();
    amp.sort_by(f64::total_cmp);
    let median = amp[amp.len() / 2];
    let kg: Vec<f64> = suite
        .per_trajectory
        .iter()
        .map(|t| t.kappa_g.log10())
        .collect();
    let s1 = &suite.skips[0];
    let angles: Vec<f64> = suite
        .skips
        .iter()
        .map(|s| s.conditioning.min_angle())
        .collect();
    let monotone = angles.windows(2).all(|w| w[1] >= w[0]);
    out.record(
        7,
        "conditioning signature",
        s1.skip == 1 && s1.conditioning.min_angle() < 1e-3 && median > 1e3 && monotone,
        format!(
            "s=1 pooled min angle {:.3e}; median per-trajectory kappa(G)/max(kappa A, kappa B) {median:.3e} (median log10 kappa(G) {:.2}); min angle over s={:?}: {:?}",
            s1.conditioning.min_angle(),
            { let mut k = kg.clone(); k.sort_by(f64::total_cmp); k[k.len() / 2] },
            suite.skips.iter().map(|s| s.skip).collect::<Vec<_>>(),
            angles.iter().map(|a| format!("{a:.3e}")).collect::<Vec<_>>()
        ),
    );
    for d in &suite.table1 {
        println!("# table dump {} kappa(W)={:.2}", d.label, d.kappa_w);
    }
}

/// The top (Adams–Bashforth) weight table as printed, rows dx, dy, dvx, dvy.
const PRINTED: [[&str; 20]; 4] = [
    [
        "0.00", "0.00", "1.50", "0.00", "0.00", "0.00", "-0.50", "0.00", "0.00", "0.00", "0.00",
        "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00",
    ],
    [
        "0.00", "0.00", "0.00", "1.50", "0.00", "0.00", "0.00", "-0.50", "0.00", "0.00", "0.00",
        "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00",
    ],
    [
        "-0.375", "0.00", "-0.30", "0.00", "0.125", "0.00", "0.10", "0.00", "1.50", "0.00", "1.50",
        "0.00", "1.50", "0.00", "-0.50", "0.00", "-0.50", "0.00", "-0.50", "0.00",
    ],
    [
        "0.00", "-0.375", "0.00", "-0.30", "0.00", "0.125", "0.00", "0.10", "0.00", "1.50", "0.00",
        "1.50", "0.00", "1.50", "0.00", "-0.50", "0.00", "-0.50", "0.00", "-0.50",
    ],
];

fn at_precision(v: f64, printed: &str) -> String {
    let decimals = printed.split('.').nth(1).map_or(0, str::len);
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-')
        .chars()
        .all(|c| c == '0' || c == '.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn criterion_8(out: &mut Outcome, c: &ExperimentConfig, e1: &SweepResult, n_trials: usize) {
    let spec = c.feature_spec();
    let table = Table1Dump::reference(&spec).expect("reference");
    let mut matched = 0;
    for (r, row) in PRINTED.iter().enumerate() {
        for (j, printed) in row.iter().enumerate() {
            matched += usize::from(at_precision(table.rows[r][j], printed) == *printed);
        }
        matched += usize::from(at_precision(table.rows[r][20], "0.00") == "0.00");
    }
    let coeffs = ode_coefficients(&spec).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut stable_models = 0;
    for ni in [0, 2] {
        for t in 0..n_trials {
            let cell = e1.cell(1, ni, 0, t).unwrap();
            let Some(m) = cell.model.as_ref().filter(|_| cell.stable) else {
                continue;
            };
            stable_models += 1;
            let sums = pair_sums(&m.weights_per_dt(), &spec).unwrap();
            for r in 0..4 {
                for j in 0..spec.block_len() {
                    let err = (sums[(r, j)] - coeffs[(r, j)]).abs();
                    if err > worst {
                        worst = err;
                        worst_at = format!(
                            "N={} trial {t} row {r} column {j}: sum {:.3} vs {:.3}",
                            cell.n_traj,
                            sums[(r, j)],
                            coeffs[(r, j)]
                        );
                    }
                }
            }
        }
    }
    out.record(
        8,
        "Adams-Bashforth reference",
        matched == 84 && stable_models > 0 && worst < 0.1,
        format!("{matched}/84 reference entries match; worst pair-sum error over {stable_models} stable models {worst:.3} ({worst_at})"),
    );
}

fn criterion_9(out: &mut Outcome, e4: &SweepResult) {
    let diverging: Vec<String> = e4
        .records
        .iter()
        .filter(|r| r.error.is_some() || r.diverged_fraction > 0.0)
        .map(|r| format!("N={} trial {}", r.n_traj, r.trial))
        .collect();
    let p = mean(e4.records.iter().map(|r| r.p));
    out.record(
        9,
        "k=1 stability",
        diverging.is_empty(),
        if diverging.is_empty() {
            format!(
                "no diverged predictions in {} cells; mean p {p:.3}",
                e4.records.len()
            )
        } else {
            format!("diverged: {}", diverging.join(", "))
        },
    );
}

fn random(rows: usize, cols: usize, seed_value: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed_value);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Ridge solution from the SVD of `G`: `W = Y V diag(s / (s^2 + lambda)) U^T`.
fn svd_ridge(g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let svd = g.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut yv = y * vt.transpose();
    for (i, s) in svd.singular_values.iter().enumerate() {
        yv.column_mut(i).scale_mut(s / (s * s + lambda));
    }
    yv * u.transpose()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn ridge_oracle() -> f64 {
    let lambda = 1e-2;
    let g = random(21, 600, 1);
    let y = random(4, 600, 2);
    let random_case = rel(
        &solve_ridge(&g, &y, lambda).unwrap(),
        &svd_ridge(&g, &y, lambda),
    );

    let spec = FeatureSpec::pendulum(PendulumParams::default(), 2);
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 400;
    let trajs = generate_training_set(&cfg, 5, 0).unwrap();
    let d = build_design_matrices(&spec, &trajs).unwrap();
    let oracle = svd_ridge(&d.g, &d.y, lambda);
    let dense = rel(&solve_ridge(&d.g, &d.y, lambda).unwrap(), &oracle);
    let streamed = accumulate_normal_equations(&spec, &trajs, None, Execution::Parallel)
        .unwrap()
        .solve(lambda, None)
        .unwrap()
        .weights;
    random_case.max(dense).max(rel(&streamed, &oracle))
}

fn pabs_analytic() -> f64 {
    let mut worst: f64 = 0.0;
    for (k, (t1, t2)) in [(0.3, 1.1), (1e-6, 0.7), (0.0, std::f64::consts::FRAC_PI_2)]
        .iter()
        .enumerate()
    {
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let mut b = DMatrix::zeros(6, 2);
        b[(0, 0)] = f64::cos(*t1);
        b[(2, 0)] = f64::sin(*t1);
        b[(1, 1)] = f64::cos(*t2);
        b[(3, 1)] = f64::sin(*t2);
        // Random rotation and column mixing leave the angles unchanged.
        let q = random(6, 6, 10 + k as u64).qr().q();
        let mix = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 3.0]);
        let got = principal_angles(&(&q * &a * &mix), &(&q * &b * &mix.transpose())).unwrap();
        let mut want = vec![*t1, *t2];
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

fn symmetry_and_energy() -> (f64, f64) {
    let p = PendulumParams::default();
    let (s, c) = (2.0 * std::f64::consts::PI / 3.0).sin_cos();
    let rot = |v: State| {
        State::new(
            c * v.x - s * v.y,
            s * v.x + c * v.y,
            c * v.vx - s * v.vy,
            s * v.vx + c * v.vy,
        )
    };
    let flip = |v: State| State::new(v.x, -v.y, v.vx, -v.vy);
    let mut sym: f64 = 0.0;
    let mut rng = seed::rng(99);
    for _ in 0..1000 {
        let st = State::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let f = pendulum_rhs(&p, st);
        sym = sym
            .max((pendulum_rhs(&p, rot(st)) - rot(f)).norm())
            .max((pendulum_rhs(&p, flip(st)) - flip(f)).norm());
    }
    let rk = Rk4::default();
    let mut rise: f64 = 0.0;
    for k in 0..20 {
        let (x, y) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let _ = k;
        let tr = rk.integrate(&p, State::at_rest(x, y), 0.01, 5000).unwrap();
        for w in tr.states.windows(2) {
            rise = rise.max(p.energy(&w[1]) - p.energy(&w[0]));
        }
    }
    (sym, rise)
}

fn determinism(dir: &Path) -> bool {
    let mut c = ExperimentConfig::default();
    c.trials = 2;
    c.data.n_train = 300;
    c.grid = ngrc::dynamics::GridSpec::square(1.5, 10);
    c.sweep.lambda = vec![1e-4, 1e-2];
    c.sweep.n_traj = vec![2, 6];
    c.sweep.sigma = vec![0.0, 1e-4];
    c.diagnostics.horizon = 10.0;
    let mut files = vec![];
    for (k, exec) in [
        Execution::Parallel,
        Execution::Parallel,
        Execution::Sequential,
    ]
    .into_iter()
    .enumerate()
    {
        c.execution = exec;
        let truth = ground_truth(&c);
        let r = run_instability_sweep_with(&c, &truth).unwrap();
        let out = dir.join(format!("run{k}"));
        c.output.dir = out.clone();
        r.write(&c, &out).unwrap();
        files.push((
            std::fs::read(out.join("raw.csv")).unwrap(),
            std::fs::read(out.join("mean.csv")).unwrap(),
        ));
    }
    files.windows(2).all(|w| w[0] == w[1])
}

fn criterion_10(out: &mut Outcome, elapsed: f64) {
    let ridge = ridge_oracle();
    let pabs = pabs_analytic();
    let (sym, rise) = symmetry_and_energy();
    let dir = tempfile::tempdir().unwrap();
    let det = determinism(dir.path());
    out.record(
        10,
        "property suites",
        ridge < 1e-10 && pabs < 1e-9 && sym < 1e-8 && rise < 1e-8 && det,
        format!(
            "ridge rel err {ridge:.2e}; PABS abs err {pabs:.2e}; symmetry err {sym:.2e}; max energy rise per step {rise:.2e}; byte-identical outputs {det}; sweep time {elapsed:.0}s"
        ),
    );
}

fn main() {
    // `cargo test` passes filter arguments; this target always runs in full.
    let started = Instant::now();
    let n_trials = trials();
    let mut out = Outcome { results: vec![] };
    let c = base();
    let t = Instant::now();
    let truth = ground_truth(&c);
    println!(
        "# ground truth {}x{} in {:.1}s",
        c.grid.nx,
        c.grid.ny,
        t.elapsed().as_secs_f64()
    );

    let mut e1 = c.clone();
    e1.sweep.lambda = vec![1e-4, 1e-2, 1.0];
    let e1 = sweep("fixed lambda", &e1, &truth);
    criterion_1_2(&mut out, &e1, n_trials);
    criterion_3(&mut out, &e1);
    criterion_4(&mut out, &e1, n_trials);

    let mut e2 = c.clone();
    e2.sweep.regularization = Regularization::Scaled;
    e2.sweep.lambda = vec![1e-4, 1e-3, 1e-2, 1e-1];
    let e2 = sweep("scaled lambda", &e2, &truth);
    criterion_5(&mut out, &e2, n_trials);

    let mut e3 = c.clone();
    e3.sweep.lambda = vec![1e-4];
    e3.sweep.sigma = vec![8e-5, 1e-4];
    let e3 = sweep("input noise", &e3, &truth);
    criterion_6(&mut out, &e3, n_trials);

    criterion_7_table(&mut out, &c);
    criterion_8(&mut out, &c, &e1, n_trials);

    let mut e4 = c.clone();
    e4.features.delays = 1;
    e4.sweep.lambda = vec![1e-2];
    let e4 = sweep("k=1", &e4, &truth);
    criterion_9(&mut out, &e4);

    criterion_10(&mut out, started.elapsed().as_secs_f64());

    let failed: Vec<u32> = out.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "# {} of {} criteria passed in {:.0}s",
        out.results.len() - failed.len(),
        out.results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("# failed: {failed:?}");
        std::process::exit(1);
    }
}
