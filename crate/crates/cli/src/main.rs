//! `fsicloud` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use fsicloud::config::{parse_config, ScenarioConfig};
use fsicloud::error::Error;
use fsicloud::field_grid::Grid2;
use fsicloud::fsi_solver::{energy_record, run, step_count};
use fsicloud::geometry::Vec2;
use fsicloud::harness::{capacity_report, run_study_in, worker_count, WORKERS_ENV};
use fsicloud::output::{write_energy_csv, write_manifest, write_norm_csv, SnapshotWriter};
use fsicloud::restriction::{measure_operator_norms, property_suite, RestrictionConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "fsicloud", version, about = "Rigid discs in a non-Newtonian fluid: runs, studies and operator checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the bodies listed in a configuration.
    Run(ConfigArgs),
    /// Run the N-body versus body-free study of a configuration's [study] section.
    Study(ConfigArgs),
    /// Check the restriction operator's properties and measure its empirical norms.
    CheckOperators(CheckArgs),
    /// Discrete p-capacity of a shrinking ball.
    Capacity(CapacityArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    /// Cells per side of the unit square.
    #[arg(long, default_value_t = 128)]
    grid: usize,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ball radii, one single-ball configuration each.
    #[arg(long, value_delimiter = ',', default_values_t = [0.02, 0.04, 0.08])]
    radii: Vec<f64>,
}

#[derive(Args, Debug)]
struct CapacityArgs {
    #[arg(long)]
    out: PathBuf,
    /// Cells per side of the unit square.
    #[arg(long, default_value_t = 2048)]
    grid: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0])]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.055, 0.0275, 0.011, 0.003])]
    radii: Vec<f64>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Study(a) => cmd_study(a),
        Command::CheckOperators(a) => cmd_check(a),
        Command::Capacity(a) => cmd_capacity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(a: &ConfigArgs) -> Result<(String, ScenarioConfig), Failure> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let cfg = parse_config(&text).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), &text)?;
    Ok((text, cfg))
}

fn base_manifest(command: &str, config: Option<&Path>) -> Vec<(&'static str, String)> {
    let mut m = vec![("command", command.to_string()), ("version", env!("CARGO_PKG_VERSION").to_string())];
    if let Some(c) = config {
        m.push(("config", c.display().to_string()));
    }
    m
}

fn cmd_run(a: &ConfigArgs) -> Result<(), Failure> {
    let (_, cfg) = load(a)?;
    if cfg.bodies.is_none() {
        return Err(Failure::Config("`run` needs a bodies list; use `study` for a [study] section".into()));
    }
    let s0 = cfg.initial_state()?;
    let dt = cfg.time_step(&s0);
    let initial = energy_record(&s0);
    let mut snaps = SnapshotWriter::new(a.out.join("snapshots"), cfg.time.snapshot_every)?;
    let outcome = run(s0, cfg.time.t_end, dt, &mut snaps);
    let mut manifest = base_manifest("run", Some(&a.config));
    manifest.push(("dt", dt.to_string()));
    manifest.push(("steps", step_count(cfg.time.t_end, dt).to_string()));
    match outcome {
        Ok((s, records)) => {
            let mut all = vec![initial];
            all.extend_from_slice(&records);
            write_energy_csv(&a.out.join("energy.csv"), &all)?;
            manifest.push(("status", "ok".into()));
            write_manifest(&a.out, &manifest)?;
            let last = all.last().expect("initial record");
            println!(
                "t = {:.6}  kinetic {:.6e} -> {:.6e}  bodies {}  dt {dt}",
                s.t,
                initial.kinetic,
                last.kinetic,
                s.cloud.len()
            );
            Ok(())
        }
        Err(e) => {
            manifest.push(("status", format!("failed: {e}")));
            write_manifest(&a.out, &manifest)?;
            Err(e.into())
        }
    }
}

fn cmd_study(a: &ConfigArgs) -> Result<(), Failure> {
    let (_, cfg) = load(a)?;
    if cfg.study.is_none() {
        return Err(Failure::Config("`study` needs a [study] section".into()));
    }
    let plan = cfg.study_plan()?;
    let result = run_study_in(&plan, Some(&a.out))?;
    let mut manifest = base_manifest("study", Some(&a.config));
    manifest.push(("workers", format!("{} ({WORKERS_ENV})", worker_count())));
    manifest.push(("dt", plan.dt.to_string()));
    manifest.push(("steps", result.reference.steps.to_string()));
    manifest.push(("max_feasible_N", result.max_feasible_n.to_string()));
    manifest.push(("reference_energy_drift", result.reference.energy_drift.to_string()));
    let mut failed = 0;
    println!("{:>4} {:>10} {:>12} {:>12} {:>12} {:>12}", "N", "radius", "err_L2", "err_grad_Lp", "drift", "max|Y|");
    let mut notes = String::new();
    for row in &result.rows {
        match &row.outcome {
            Ok(m) => {
                println!(
                    "{:>4} {:>10.5} {:>12.5e} {:>12.5e} {:>12.3e} {:>12.4e}",
                    row.n, row.radius, m.err_l2, m.err_grad_lp, m.energy_drift, m.max_rigid_speed
                );
                let _ = write!(notes, "N={} ok max_rigid_speed={}; ", row.n, m.max_rigid_speed);
            }
            Err(e) => {
                failed += 1;
                println!("{:>4} {:>10.5} failed: {e}", row.n, row.radius);
                let _ = write!(notes, "N={} failed: {e}; ", row.n);
            }
        }
    }
    manifest.push(("runs", notes.trim_end().to_string()));
    write_manifest(&a.out, &manifest)?;
    if failed > 0 {
        eprintln!("warning: {failed} of {} runs failed; see manifest.txt", result.rows.len());
    }
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Failure::Config("--trials must be at least 1".into()));
    }
    if a.radii.is_empty() {
        return Err(Failure::Config("--radii must list at least one radius".into()));
    }
    let grid = Grid2::square(a.grid, 1.0).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    let mut reports = Vec::new();
    for &r in &a.radii {
        let cfg = RestrictionConfig::single(Vec2::new(0.5, 0.5), r).map_err(|e| Failure::Config(e.to_string()))?;
        let rep = measure_operator_norms(&cfg, &grid, a.p, a.trials, a.seed)?;
        println!(
            "r = {r:<8} ratio_L {:.4}  ratio_W {:.4}  c({}) {:.4}  A1 {:.4}",
            rep.ratio_l, rep.ratio_w, a.p, rep.c_estimate, rep.a1_estimate
        );
        reports.push(rep);
    }
    // The single balls plus one overlapping pair, which merges into a single enlarged ball.
    let r2 = a.radii.iter().copied().fold(0.0, f64::max);
    let pair = RestrictionConfig::new(vec![Vec2::new(0.5 + 0.3 * r2, 0.5), Vec2::new(0.5, 0.5)], vec![0.8 * r2, r2])
        .map_err(|e| Failure::Config(e.to_string()))?;
    let mut configs: Vec<RestrictionConfig> = a
        .radii
        .iter()
        .map(|&r| RestrictionConfig::single(Vec2::new(0.5, 0.5), r))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Config(e.to_string()))?;
    configs.push(pair);
    let mut properties_ok = true;
    for cfg in &configs {
        let prop = property_suite(cfg, &grid, a.trials, a.seed)?;
        println!(
            "properties N = {} r_min = {:<8} max|div| {:.2e}  locality exact {}  constancy {:.2e}  {}",
            cfg.len(),
            cfg.r_min(),
            prop.max_divergence,
            prop.locality_exact,
            prop.constancy,
            if prop.passes() { "ok" } else { "VIOLATED" }
        );
        properties_ok &= prop.passes();
    }
    let (lo, hi) = reports.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.ratio_w), hi.max(r.ratio_w)));
    let c = reports.iter().map(|r| r.c_estimate).fold(0.0, f64::max);
    let a1 = reports.iter().map(|r| r.a1_estimate).fold(0.0, f64::max);
    println!("ratio_W spread {:.2}%  c({}) = {c:.4}  A1 = {a1:.4}", 100.0 * (hi / lo - 1.0), a.p);
    write_norm_csv(&a.out.join("norms.csv"), &reports)?;
    let mut manifest = base_manifest("check-operators", None);
    manifest.push(("grid", a.grid.to_string()));
    manifest.push(("trials", a.trials.to_string()));
    manifest.push(("seed", a.seed.to_string()));
    manifest.push(("c_estimate", c.to_string()));
    manifest.push(("a1_estimate", a1.to_string()));
    manifest.push(("properties", if properties_ok { "ok" } else { "violated" }.to_string()));
    write_manifest(&a.out, &manifest)?;
    if !properties_ok {
        return Err(Failure::Runtime("restriction operator property violated; see output above".into()));
    }
    Ok(())
}

fn cmd_capacity(a: &CapacityArgs) -> Result<(), Failure> {
    if a.radii.is_empty() || a.p.is_empty() {
        return Err(Failure::Config("--radii and --p must be non-empty".into()));
    }
    let grid = Grid2::square(a.grid, 1.0).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("capacity.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.write_record(["p", "r", "capacity", "newton_iterations"]).map_err(|e| Failure::Runtime(e.to_string()))?;
    for &p in &a.p {
        let mut first = None;
        for &r in &a.radii {
            let cfg = RestrictionConfig::single(Vec2::new(0.5, 0.5), r).map_err(|e| Failure::Config(e.to_string()))?;
            let rep = capacity_report(p, &cfg, &grid)?;
            let base = *first.get_or_insert(rep.capacity);
            println!("p = {p}  r = {r:<8} capacity {:.6}  ({:.3} of first)", rep.capacity, rep.capacity / base);
            w.write_record([p.to_string(), r.to_string(), rep.capacity.to_string(), rep.newton_iterations.to_string()])
                .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    w.flush()?;
    drop(w);
    let mut manifest = base_manifest("capacity", None);
    manifest.push(("grid", a.grid.to_string()));
    write_manifest(&a.out, &manifest)?;
    Ok(())
}
