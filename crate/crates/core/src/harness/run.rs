//! Experiment execution and artifact emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::config::{DriftMatrix, ExperimentConfig, ExperimentId};
use super::oracles::run_oracle_suite;
use crate::error::{Error, Result};
use crate::pi_lambda::{errors_csv, initial_model, run_pi_convergence_study, ConvergenceReport, SliceReport};
use crate::problem::{ControlProblem, InitialCost};
use crate::splitting::{
    rate_csv, rate_fits_csv, rate_svg, split_solve, splitting_rate_study, HjBackend, RateReport, Representation, SplitRunConfig, SplitState,
};

/// Tag of the float formatting used in emitted CSVs; part of the
/// determinism contract.
pub const FLOAT_FORMAT: &str = "csv-floats-v1: residuals {:.6e}, other columns shortest round-trip";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub plots: bool,
    /// Worker threads for sweep cells; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AcceptanceReport {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub float_format: &'static str,
    pub runtime_s: f64,
    pub runtime_budget_s: f64,
    pub within_budget: bool,
    pub criteria: Vec<CriterionResult>,
    pub passed: bool,
    pub notes: Vec<String>,
    pub files: Vec<String>,
}

impl AcceptanceReport {
    /// One `PASS`/`FAIL` line per criterion, then the runtime line.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .criteria
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect();
        out.push(format!(
            "{} {} runtime: {:.1} s (budget {:.0} s)",
            if self.within_budget { "OK  " } else { "SLOW" },
            self.experiment,
            self.runtime_s,
            self.runtime_budget_s
        ));
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellOutcome {
    pub drift: DriftMatrix,
    pub mu: f64,
    pub n: usize,
    /// Mean over slices of the window-averaged residual; `None` on failure.
    pub residual: Option<f64>,
    pub slices: Vec<SliceReport>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TableRun {
    pub mu: Vec<f64>,
    pub n: Vec<usize>,
    pub cells: Vec<CellOutcome>,
}

impl TableRun {
    pub fn cell(&self, drift: DriftMatrix, mu: f64, n: usize) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.drift == drift && c.mu == mu && c.n == n)
    }

    pub fn drifts(&self) -> Vec<DriftMatrix> {
        let mut out: Vec<DriftMatrix> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.drift) {
                out.push(c.drift);
            }
        }
        out
    }
}

fn format_residual(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v:.6e}"),
        None => "nan".to_string(),
    }
}

/// The table layout: one row per μ in decreasing order, one column per N.
pub fn table_csv(run: &TableRun, drift: DriftMatrix) -> String {
    let mut mus = run.mu.clone();
    mus.sort_by(|a, b| b.total_cmp(a));
    let mut s = String::from("mu");
    for n in &run.n {
        let _ = write!(s, ",N={n}");
    }
    s.push('\n');
    for mu in mus {
        let _ = write!(s, "{mu}");
        for &n in &run.n {
            let _ = write!(s, ",{}", format_residual(run.cell(drift, mu, n).and_then(|c| c.residual)));
        }
        s.push('\n');
    }
    s
}

/// One row per (cell, slice) naming everything that produced the residual.
fn cells_csv(run: &TableRun, seed: u64, window: (usize, usize)) -> String {
    let mut s = String::from(
        "case,mu,n,seed,slice,window_first,window_last,slice_residual,cell_residual,base_projection_rms,initial_states_hash\n",
    );
    for c in &run.cells {
        for r in &c.slices {
            let _ = writeln!(
                s,
                "{},{},{},{seed},{},{},{},{},{},{},{:016x}",
                c.drift.label(),
                c.mu,
                c.n,
                r.index,
                window.0,
                window.1,
                format_residual(r.window_mean()),
                format_residual(c.residual),
                r.base_projection_rms.map_or(String::new(), |v| v.to_string()),
                r.initial_states_hash
            );
        }
    }
    s
}

fn run_cell(cfg: &ExperimentConfig, drift: DriftMatrix, mu: f64, n: usize) -> CellOutcome {
    let mut outcome = CellOutcome {
        drift,
        mu,
        n,
        residual: None,
        slices: Vec::new(),
        failure: None,
    };
    let result = (|| -> Result<()> {
        let problem = drift.problem(cfg.problem.dim, cfg.problem.gram_seed)?;
        let run = SplitRunConfig {
            eps: cfg.problem.eps,
            horizon: cfg.problem.horizon,
            n_steps: cfg.problem.n_steps()?,
            hj_backend: HjBackend::PiLambda,
            heat: cfg.heat.clone(),
            representation: Representation::Approximator,
            order: cfg.splitting.order,
            fd: cfg.splitting.fd,
            pi_lambda: crate::pi_lambda::PiLambdaConfig {
                mu,
                n_trajectories: n,
                ..cfg.pi_lambda.clone()
            },
            trace: false,
        };
        let res = split_solve(&problem, SplitState::Model(initial_model(&problem)), &run)?;
        outcome.slices = res.slice_reports;
        if let Some(f) = res.failure {
            return Err(Error::numerical(format!("slice {}: {}", f.step, f.message), vec![]));
        }
        let per_slice: Option<Vec<f64>> = outcome.slices.iter().map(|r| r.window_mean()).collect();
        match per_slice {
            Some(v) if !v.is_empty() => {
                outcome.residual = Some(v.iter().sum::<f64>() / v.len() as f64);
                Ok(())
            }
            _ => Err(Error::Config(
                "no residuals were recorded; residual_points and residual_window must be positive".into(),
            )),
        }
    })();
    if let Err(e) = result {
        outcome.failure = Some(e.to_string());
    }
    outcome
}

/// Runs closures over a fixed pool of threads and returns results in job order.
fn parallel_map<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn run_table(cfg: &ExperimentConfig, workers: usize) -> TableRun {
    let mut jobs = Vec::new();
    for &drift in &cfg.sweep.drift {
        for &mu in &cfg.sweep.mu {
            for &n in &cfg.sweep.n {
                jobs.push((drift, mu, n));
            }
        }
    }
    let cells = parallel_map(&jobs, workers, |&(drift, mu, n)| run_cell(cfg, drift, mu, n));
    TableRun {
        mu: cfg.sweep.mu.clone(),
        n: cfg.sweep.n.clone(),
        cells,
    }
}

struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Writes through a temporary file and a rename, so readers never see
    /// a partial artifact.
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, &path)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn criterion(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CriterionResult {
    CriterionResult {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn table_criteria(cfg: &ExperimentConfig, run: &TableRun) -> Vec<CriterionResult> {
    let acc = &cfg.acceptance;
    let checked = |c: &&CellOutcome| acc.rows.is_empty() || acc.rows.contains(&c.mu);
    let mut parts = Vec::new();
    let mut all_ok = true;
    let mut total = 0;
    for drift in run.drifts() {
        let cells: Vec<&CellOutcome> = run.cells.iter().filter(|c| c.drift == drift).filter(checked).collect();
        let failed = cells.iter().filter(|c| c.residual.is_none()).count();
        let above = cells
            .iter()
            .filter(|c| matches!(c.residual, Some(r) if r > acc.residual_max))
            .count();
        let worst = cells.iter().filter_map(|c| c.residual).fold(f64::NAN, f64::max);
        all_ok &= failed == 0 && above == 0;
        total += cells.len();
        let mut part = format!("{} max {worst:.4}", drift.label());
        if above > 0 {
            let _ = write!(part, ", {above} above");
        }
        if failed > 0 {
            let _ = write!(part, ", {failed} failed");
        }
        parts.push(part);
    }
    let rows = if acc.rows.is_empty() {
        "all rows".to_string()
    } else {
        format!("rows mu in {:?}", acc.rows)
    };
    let mut out = vec![criterion(
        format!("{}-band", cfg.experiment),
        all_ok && total > 0,
        format!("{total} cells ({rows}) against {}: {}", acc.residual_max, parts.join("; ")),
    )];

    // the same initial states for every μ at fixed (drift, N)
    let mut hashes: BTreeMap<(String, usize), Vec<Vec<u64>>> = BTreeMap::new();
    for c in &run.cells {
        hashes
            .entry((c.drift.label().to_string(), c.n))
            .or_default()
            .push(c.slices.iter().map(|r| r.initial_states_hash).collect());
    }
    let isolated = hashes.values().all(|v| v.windows(2).all(|w| w[0] == w[1]));
    out.push(criterion(
        "sweep-isolation",
        isolated,
        format!("initial-state hashes agree across mu for {} (case, N) groups", hashes.len()),
    ));
    out
}

fn convergence_criteria(cfg: &ExperimentConfig, r: &ConvergenceReport) -> CriterionResult {
    let acc = &cfg.acceptance;
    let last = r.errors.len().min(8);
    criterion(
        "pi-contraction",
        r.median_ratio <= acc.ratio_max && r.decay <= acc.decay_max,
        format!(
            "median e_(k+1)/e_k over k = 2..8 is {:.3e} (<= {}), e_{last}/e_1 = {:.3e} (<= {})",
            r.median_ratio, acc.ratio_max, r.decay, acc.decay_max
        ),
    )
}

pub fn rate_linf_criterion(cfg: &ExperimentConfig, r: &RateReport) -> CriterionResult {
    let acc = &cfg.acceptance;
    let upper = r.fit_upper.map(|f| f.slope);
    let upper_ok = matches!(upper, Some(s) if (acc.upper_slope_min..=acc.upper_slope_max).contains(&s));
    let lower_fit = r.fit_lower.map(|f| f.slope);
    let (lower_ok, lower_detail) = match lower_fit {
        Some(s) => (
            s >= acc.lower_slope_min,
            format!("max(v-u) slope {s:.3} (>= {})", acc.lower_slope_min),
        ),
        None if r.lower_side_nonpositive => (
            true,
            format!(
                "max(v-u) <= 0 at every h, so the lower bound holds with C = 0 (gap min(u-v) slope {})",
                r.fit_lower_gap.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope))
            ),
        ),
        None => (false, "max(v-u) changes sign across h; no slope".to_string()),
    };
    criterion(
        "splitting-rate-linf",
        upper_ok && lower_ok,
        format!(
            "max(u-v) slope {} (in [{}, {}]); {lower_detail}",
            upper.map_or("n/a".to_string(), |s| format!("{s:.3}")),
            acc.upper_slope_min,
            acc.upper_slope_max
        ),
    )
}

pub fn rate_l1_criterion(cfg: &ExperimentConfig, r: &RateReport) -> CriterionResult {
    let slope = r.fit_l1.map(|f| f.slope);
    criterion(
        "splitting-rate-l1",
        matches!(slope, Some(s) if s >= cfg.acceptance.l1_slope_min) && r.l1_monotone,
        format!(
            "L1 slope {} (>= {}), monotone in h: {}",
            slope.map_or("n/a".to_string(), |s| format!("{s:.3}")),
            cfg.acceptance.l1_slope_min,
            r.l1_monotone
        ),
    )
}

fn errors_svg(r: &ConvergenceReport) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let pts: Vec<(f64, f64)> = r
        .errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0)
        .map(|(k, e)| ((k + 1) as f64, e.log10()))
        .collect();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
        let (y0, y1) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let sx = |x: f64| m + (x - first.0) / (last.0 - first.0).max(1.0) * (w - 2.0 * m);
        let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
        let line: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"#1f77b4\" points=\"{}\"/>", line.join(" "));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"12\">k</text>", w / 2.0, h - 15.0);
        let _ = writeln!(svg, "<text x=\"5\" y=\"{}\" font-size=\"12\">log10 e_k</text>", m - 10.0);
    }
    svg.push_str("</svg>\n");
    svg
}

fn diagnostic_bundle(c: &CellOutcome) -> String {
    let mut s = format!(
        "case {} mu {} N {}\nfailure: {}\n",
        c.drift.label(),
        c.mu,
        c.n,
        c.failure.as_deref().unwrap_or("none")
    );
    for r in &c.slices {
        let _ = writeln!(
            s,
            "slice {}: losses {:?} residuals {:?} snapshots {:?}",
            r.index, r.losses, r.residuals, r.snapshots
        );
    }
    s
}

/// Runs the configured experiment, writes its artifacts under
/// `opts.out_dir` (`config.snapshot`, CSV tables or reports, optional SVG
/// plots, `acceptance.json`) and returns the acceptance report. Threshold
/// misses are reported in the result; `Err` means the run itself could not
/// proceed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AcceptanceReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Emitter::new(&opts.out_dir)?;
    out.write("config.snapshot", &cfg.snapshot()?)?;
    let workers = opts
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut criteria = Vec::new();
    let mut notes = Vec::new();
    match cfg.experiment {
        id if id.is_table() => {
            let run = run_table(cfg, workers);
            for drift in run.drifts() {
                out.write(&format!("table_{}.csv", drift.label()), &table_csv(&run, drift))?;
            }
            let p = &cfg.pi_lambda;
            let window = (
                p.policy_iterations - p.residual_window.min(p.policy_iterations) + 1,
                p.policy_iterations,
            );
            out.write("cells.csv", &cells_csv(&run, cfg.seed, window))?;
            for c in run.cells.iter().filter(|c| c.failure.is_some()) {
                let name = format!("diagnostics/{}_mu{}_n{}.txt", c.drift.label(), c.mu, c.n);
                out.write(&name, &diagnostic_bundle(c))?;
            }
            criteria.extend(table_criteria(cfg, &run));
            notes.push(
                "Cells are checked against magnitude bands, not against reference digits: the reference seed and approximator are unknown."
                    .to_string(),
            );
        }
        ExperimentId::PiConvergence => {
            let problem = cfg.sweep.drift[0].problem(cfg.problem.dim, cfg.problem.gram_seed)?;
            let report = run_pi_convergence_study(&problem, &cfg.convergence_study()?, &cfg.pi_lambda)?;
            out.write("errors.csv", &errors_csv(&report))?;
            if opts.plots {
                out.write("errors.svg", &errors_svg(&report))?;
            }
            criteria.push(convergence_criteria(cfg, &report));
        }
        id if id.is_rate_study() => {
            let problem = ControlProblem::kinetic(1, InitialCost::Gaussian)?;
            let report = splitting_rate_study(&problem, &cfg.rate_study())?;
            out.write("rate.csv", &rate_csv(&report))?;
            out.write("rate_fits.csv", &rate_fits_csv(&report))?;
            if let Some(t) = &report.trace {
                out.write("regularity.csv", &t.to_csv())?;
            }
            if opts.plots {
                out.write("rate.svg", &rate_svg(&report))?;
            }
            notes.push(format!(
                "reference level differences {:?}; Cole–Hopf gap {:?}",
                report.reference_level_differences, report.cole_hopf_gap
            ));
            criteria.push(if id == ExperimentId::SplittingRate1d {
                rate_linf_criterion(cfg, &report)
            } else {
                rate_l1_criterion(cfg, &report)
            });
        }
        ExperimentId::OracleSuite => {
            let checks = run_oracle_suite(cfg.seed);
            let mut csv = String::from("check,value,lo,hi,passed,detail\n");
            for c in &checks {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},\"{}\"",
                    c.name,
                    c.value,
                    c.lo,
                    c.hi,
                    c.passed,
                    c.detail.replace('"', "'")
                );
                criteria.push(criterion(
                    format!("oracle-{}", c.name),
                    c.passed,
                    format!("{:.3e} in [{}, {}]; {}", c.value, c.lo, c.hi, c.detail),
                ));
            }
            out.write("oracles.csv", &csv)?;
        }
        _ => unreachable!("every experiment id is handled above"),
    }
    let runtime_s = start.elapsed().as_secs_f64();
    let mut report = AcceptanceReport {
        experiment: cfg.experiment,
        seed: cfg.seed,
        float_format: FLOAT_FORMAT,
        runtime_s,
        runtime_budget_s: cfg.acceptance.runtime_budget_s,
        within_budget: runtime_s <= cfg.acceptance.runtime_budget_s,
        passed: criteria.iter().all(|c| c.passed),
        criteria,
        notes,
        files: Vec::new(),
    };
    out.files.push("acceptance.json".into());
    report.files = out.files.clone();
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(format!("acceptance.json: {e}")))?;
    out.write("acceptance.json", &json)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(drift: DriftMatrix, mu: f64, n: usize, residual: Option<f64>, hash: u64) -> CellOutcome {
        CellOutcome {
            drift,
            mu,
            n,
            residual,
            slices: vec![SliceReport {
                index: 1,
                residuals: vec![None, residual],
                initial_states_hash: hash,
                ..Default::default()
            }],
            failure: residual.is_none().then(|| "boom".to_string()),
        }
    }

    fn small_run() -> TableRun {
        TableRun {
            mu: vec![0.2, 0.8],
            n: vec![12, 14],
            cells: vec![
                cell(DriftMatrix::Identity, 0.2, 12, Some(0.01), 7),
                cell(DriftMatrix::Identity, 0.2, 14, Some(0.02), 8),
                cell(DriftMatrix::Identity, 0.8, 12, Some(0.03), 7),
                cell(DriftMatrix::Identity, 0.8, 14, None, 8),
            ],
        }
    }

    #[test]
    fn table_layout_has_descending_mu_rows() {
        assert_eq!(
            table_csv(&small_run(), DriftMatrix::Identity),
            "mu,N=12,N=14\n0.8,3.000000e-2,nan\n0.2,1.000000e-2,2.000000e-2\n"
        );
    }

    #[test]
    fn table_criteria_count_failures_and_check_isolation() {
        let cfg = ExperimentConfig::preset(ExperimentId::Table2);
        let c = table_criteria(&cfg, &small_run());
        assert!(!c[0].passed && c[0].detail.contains("1 failed"), "{}", c[0].detail);
        assert!(c[1].passed);
        let mut run = small_run();
        run.cells.truncate(3);
        run.cells[2].slices[0].initial_states_hash = 99;
        let c = table_criteria(&cfg, &run);
        assert!(c[0].passed);
        assert!(!c[1].passed);
        let restricted = ExperimentConfig {
            acceptance: super::super::AcceptanceSection {
                rows: vec![0.2],
                ..cfg.acceptance.clone()
            },
            ..cfg
        };
        assert!(table_criteria(&restricted, &small_run())[0].passed);
    }

    #[test]
    fn cells_csv_is_traceable() {
        let s = cells_csv(&small_run(), 5, (11, 30));
        let line = s.lines().nth(1).unwrap();
        assert_eq!(line, "T1,0.2,12,5,1,11,30,1.000000e-2,1.000000e-2,,0000000000000007");
    }

    #[test]
    fn parallel_map_keeps_job_order() {
        let jobs: Vec<usize> = (0..17).collect();
        assert_eq!(parallel_map(&jobs, 4, |j| j * j), jobs.iter().map(|j| j * j).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<usize>::new(), 3, |j| *j).is_empty());
    }

    #[test]
    fn emitter_writes_atomically_and_records_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Emitter::new(dir.path()).unwrap();
        e.write("sub/a.csv", "x\n").unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("sub/a.csv")).unwrap(), "x\n");
        assert!(!dir.path().join("sub/a.partial").exists());
        assert_eq!(e.files, vec!["sub/a.csv".to_string()]);
    }
}
