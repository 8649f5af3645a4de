//! `hypotube`: tube estimates for hypoelliptic diffusions from the command
//! line.
//!
//! Subcommands: `norm`, `skeleton`, `simulate`, `bounds`, `distance`,
//! `validate`, `calibrate`. All randomness is seeded from the config/flags;
//! identical configurations produce byte-identical CSV output regardless of
//! the worker count. Exit codes: 0 success, 1 validation failure, 2
//! configuration or usage error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use hypotube::bounds::{GridMode, TubeSpec};
use hypotube::metrics;
use hypotube::models::{self, Reference};
use hypotube::montecarlo;
use hypotube::report::{fit_line, g17, svg_plot, write_report, Csv, Series};
use hypotube::skeleton::{integrate_skeleton, Control, TimeFn};
use hypotube::validate;

#[derive(Parser)]
#[command(name = "hypotube", version, about = "Anisotropic tube estimates for hypoelliptic diffusions")]
struct Cli {
    /// TOML configuration file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: $HYPOTUBE_OUT or ./hypotube-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the Monte Carlo stages (results do not depend on
    /// this).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Also write SVG plots where a command supports them.
    #[arg(long, global = true)]
    plots: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Built-in model name: bm, grushin, heisenberg, constant, dsl.
    #[arg(long)]
    model: Option<String>,

    /// Model parameters as key=value (repeatable), e.g. --param n=2.
    #[arg(long = "param", value_parser = parse_kv)]
    params: Vec<(String, String)>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the anisotropic norm and spectral data of a frame.
    Norm {
        #[command(flatten)]
        model: ModelArgs,
        /// Base point, comma-separated.
        #[arg(long, short = 'x')]
        x: String,
        /// Vector to measure (defaults to reporting spectra only).
        #[arg(long, short = 'y')]
        y: Option<String>,
        /// Scale R in (0,1].
        #[arg(long, short = 'R', default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    /// Integrate the deterministic skeleton path.
    Skeleton {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long, short = 'T')]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Constant control values, comma-separated.
        #[arg(long)]
        phi: Option<String>,
    },
    /// Monte Carlo tube probability around a skeleton.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, short = 'T')]
        horizon: Option<f64>,
        /// Radius (repeat or comma-separate for a sweep).
        #[arg(long, short = 'R', value_delimiter = ',')]
        radius: Vec<f64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        phi: Option<String>,
    },
    /// Evaluate H_t, R_t*, the two-sided bounds and the concatenation grid.
    Bounds {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, short = 'T')]
        horizon: Option<f64>,
        #[arg(long, short = 'R')]
        radius: Option<f64>,
        #[arg(long)]
        phi: Option<String>,
    },
    /// Quasi-distance, Carathéodory distance, d_* and equivalence reports.
    Distance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, short = 'x')]
        x: String,
        /// Target point; omit when sampling an equivalence report.
        #[arg(long, short = 'y')]
        y: Option<String>,
        /// Equivalence-report radii (enables the report).
        #[arg(long, value_delimiter = ',')]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the validation suite on the built-in models.
    Validate {
        /// Stage name or `all`.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Grid-search the bracketing constants against the built-in models.
    Calibrate {
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        #[arg(long, default_value_t = 0xCA11B)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    // die quietly when the consumer of a pipe goes away (e.g. `| head`)
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let workers = cli.workers.or(cfg.workers);
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .context("worker pool")?;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("HYPOTUBE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hypotube-out"));

    match cli.command {
        Command::Norm { ref model, ref x, ref y, radius, t } => {
            cmd_norm(&cli, &cfg, model, x, y.as_deref(), radius, t, &out_dir)
        }
        Command::Skeleton { ref model, ref x0, horizon, steps, ref phi } => {
            cmd_skeleton(&cfg, model, x0.as_deref(), horizon, steps, phi.as_deref(), &out_dir)
        }
        Command::Simulate {
            ref model,
            horizon,
            ref radius,
            paths,
            steps,
            seed,
            ref x0,
            ref phi,
        } => cmd_simulate(
            &cli, &cfg, model, horizon, radius, paths, steps, seed, x0.as_deref(), phi.as_deref(),
            &out_dir,
        ),
        Command::Bounds { ref model, horizon, radius, ref phi } => {
            cmd_bounds(&cli, &cfg, model, horizon, radius, phi.as_deref(), &out_dir)
        }
        Command::Distance { ref model, ref x, ref y, ref radii, samples, seed } => {
            cmd_distance(&cfg, model, x, y.as_deref(), radii, samples, seed, &out_dir)
        }
        Command::Validate { ref stage } => cmd_validate(stage, &out_dir),
        Command::Calibrate { paths, seed } => cmd_calibrate(paths, seed, &out_dir),
    }
}

fn model_spec(cfg: &RunConfig, args: &ModelArgs) -> Result<models::ModelSpec> {
    if let Some(name) = &args.model {
        let params: BTreeMap<String, String> = args.params.iter().cloned().collect();
        Ok(models::instantiate_model(name, &params)?)
    } else {
        cfg.model_spec()
    }
}

fn parse_point(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let v = v.map_err(|_| anyhow!("cannot parse {what} `{s}`"))?;
    if v.len() != n {
        return Err(anyhow!("{what} `{s}` has {} entries, expected {n}", v.len()));
    }
    Ok(v)
}

fn control_from(
    cfg: &RunConfig,
    phi: Option<&str>,
    d: usize,
    horizon: f64,
) -> Result<Control> {
    match phi {
        Some(s) => {
            let v = parse_point(s, d, "control value")?;
            Ok(Control::constant(d, horizon, &v)?)
        }
        None => Ok(cfg.control_for(d, horizon)?),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_norm(
    cli: &Cli,
    cfg: &RunConfig,
    model: &ModelArgs,
    x: &str,
    y: Option<&str>,
    radius: f64,
    t: f64,
    out_dir: &Path,
) -> Result<ExitCode> {
    let _ = cli;
    let spec = model_spec(cfg, model)?;
    let n = spec.fields.dim_state();
    let x = parse_point(x, n, "point x")?;
    let unscaled = hypotube::geometry::assemble_frame(&spec.fields, t, &x)?;
    let lambda = unscaled.lambda();
    let frame = unscaled.scaled(radius)?;
    let sp = frame.spectral();
    let (norm_str, y_str) = match y {
        Some(ys) => {
            let yv = parse_point(ys, n, "vector y")?;
            (g17(frame.norm(&yv)?), fmt_vec(&yv))
        }
        None => (String::new(), String::new()),
    };
    let mut csv = Csv::new(&["t", "x", "y", "R", "norm", "sv_min", "sv_max", "sqrt_det_gram", "lambda"]);
    csv.push(vec![
        g17(t),
        fmt_vec(&x),
        y_str,
        g17(radius),
        norm_str.clone(),
        g17(sp.sv_min),
        g17(sp.sv_max),
        g17(sp.sqrt_det_gram),
        g17(lambda),
    ]);
    let paths = write_report(&[("norm.csv".into(), csv.to_csv_string())], out_dir)?;
    if !norm_str.is_empty() {
        println!("|y - 0|_{{A_R(x)}} = {norm_str}");
    }
    println!(
        "sv_min = {}, sv_max = {}, sqrt_det_gram = {}, lambda(t,x) = {}",
        g17(sp.sv_min),
        g17(sp.sv_max),
        g17(sp.sqrt_det_gram),
        g17(lambda)
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| g17(*x)).collect::<Vec<_>>().join(";")
}

fn cmd_skeleton(
    cfg: &RunConfig,
    model: &ModelArgs,
    x0: Option<&str>,
    horizon: Option<f64>,
    steps: usize,
    phi: Option<&str>,
    out_dir: &Path,
) -> Result<ExitCode> {
    let spec = model_spec(cfg, model)?;
    let n = spec.fields.dim_state();
    let t_end = horizon.or(cfg.horizon).unwrap_or(1.0);
    let x0 = match x0 {
        Some(s) => parse_point(s, n, "x0")?,
        None => spec.x0.clone(),
    };
    let ctrl = control_from(cfg, phi, spec.fields.dim_noise(), t_end)?;
    let sk = integrate_skeleton(&spec.fields, &ctrl, &x0, steps)?;
    let mut header = vec!["t".to_string()];
    for i in 1..=n {
        header.push(format!("x{i}"));
    }
    let mut csv = Csv {
        header,
        rows: Vec::new(),
    };
    for k in 0..sk.len() {
        let mut row = vec![g17(sk.times()[k])];
        row.extend(sk.state(k).iter().map(|v| g17(*v)));
        csv.push(row);
    }
    let paths = write_report(&[("skeleton.csv".into(), csv.to_csv_string())], out_dir)?;
    println!(
        "skeleton: {} nodes, endpoint = [{}]",
        sk.len(),
        fmt_vec(sk.end_state())
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cli: &Cli,
    cfg: &RunConfig,
    model: &ModelArgs,
    horizon: Option<f64>,
    radius: &[f64],
    paths: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    x0: Option<&str>,
    phi: Option<&str>,
    out_dir: &Path,
) -> Result<ExitCode> {
    let spec = model_spec(cfg, model)?;
    let n = spec.fields.dim_state();
    let t_end = horizon.or(cfg.horizon).unwrap_or(1.0);
    let mc = cfg.mc.clone().unwrap_or_default();
    let n_paths = paths.or(mc.paths).unwrap_or(10_000);
    let n_steps = steps.or(mc.steps).unwrap_or(1_000);
    let seed = seed.or(mc.seed).unwrap_or(7);
    let x0 = match x0 {
        Some(s) => parse_point(s, n, "x0")?,
        None => spec.x0.clone(),
    };
    let radii: Vec<f64> = if radius.is_empty() {
        vec![match cfg.radius_fn(0.2)? {
            TimeFn::Const(v) => v,
            _ => 0.2,
        }]
    } else {
        radius.to_vec()
    };
    let ctrl = control_from(cfg, phi, spec.fields.dim_noise(), t_end)?;
    let skel = integrate_skeleton(&spec.fields, &ctrl, &x0, 512)?;
    let mut csv = Csv::new(&[
        "model", "T", "R", "paths", "steps", "seed", "p_hat", "std_err", "ci_lo", "ci_hi",
        "blowups", "reference",
    ]);
    let mut sweep = Vec::new();
    for (i, rr) in radii.iter().enumerate() {
        let est = montecarlo::tube_probability(
            &spec.fields,
            &x0,
            &skel,
            &TimeFn::constant(*rr),
            t_end,
            n_paths,
            n_steps,
            seed.wrapping_add(i as u64),
        )?;
        let reference = match spec.reference {
            Reference::Bm => g17(models::bm_sup_prob_series(t_end, rr.sqrt(), 10)),
            _ => String::new(),
        };
        println!(
            "R = {rr}: p_hat = {} +- {} ({} blow-ups){}",
            g17(est.p_hat),
            g17(est.std_err),
            est.n_blowups,
            if reference.is_empty() {
                String::new()
            } else {
                format!(", series reference {reference}")
            }
        );
        sweep.push((t_end / rr, est.p_hat, est.std_err));
        csv.push(vec![
            spec.name.clone(),
            g17(t_end),
            g17(*rr),
            n_paths.to_string(),
            n_steps.to_string(),
            seed.wrapping_add(i as u64).to_string(),
            g17(est.p_hat),
            g17(est.std_err),
            g17(est.ci95.0),
            g17(est.ci95.1),
            est.n_blowups.to_string(),
            reference,
        ]);
    }
    let mut tables = vec![("simulate.csv".to_string(), csv.to_csv_string())];
    if sweep.len() >= 2 && sweep.iter().all(|(_, p, _)| *p > 0.0) {
        let xs: Vec<f64> = sweep.iter().map(|(x, _, _)| *x).collect();
        let ys: Vec<f64> = sweep.iter().map(|(_, p, _)| p.ln()).collect();
        let fit = fit_line(&xs, &ys)?;
        let mut fit_csv = Csv::new(&["slope", "intercept", "r2"]);
        fit_csv.push(vec![g17(fit.slope), g17(fit.intercept), g17(fit.r2)]);
        tables.push(("simulate_fit.csv".to_string(), fit_csv.to_csv_string()));
        println!(
            "log p_hat vs T/R: slope = {}, R^2 = {}",
            g17(fit.slope),
            g17(fit.r2)
        );
    }
    if cli.plots && !sweep.is_empty() {
        // bound envelopes alongside the estimates, all on log scale
        let mut lower_pts = Vec::new();
        let mut upper_pts = Vec::new();
        for rr in &radii {
            let tube = TubeSpec::new(
                cfg.envelope_for(&spec)?,
                TimeFn::constant(*rr),
                cfg.bound_constants()?,
                control_from(cfg, phi, spec.fields.dim_noise(), t_end)?,
            )?;
            let b = tube.tube_bounds()?;
            lower_pts.push((t_end / rr, b.lower.max(1e-300).ln()));
            upper_pts.push((t_end / rr, b.upper.max(1e-300).ln()));
        }
        let series = [
            Series {
                label: "log p_hat",
                points: sweep.iter().map(|(x, p, _)| (*x, p.max(1e-300).ln())).collect(),
                err: Some(
                    sweep
                        .iter()
                        .map(|(_, p, se)| if *p > 0.0 { se / p } else { 0.0 })
                        .collect(),
                ),
            },
            Series {
                label: "log lower bound",
                points: lower_pts,
                err: None,
            },
            Series {
                label: "log upper bound",
                points: upper_pts,
                err: None,
            },
        ];
        tables.push((
            "simulate.svg".to_string(),
            svg_plot("tube probability vs bounds", "T/R", "log p", &series),
        ));
    }
    let paths = write_report(&tables, out_dir)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bounds(
    cli: &Cli,
    cfg: &RunConfig,
    model: &ModelArgs,
    horizon: Option<f64>,
    radius: Option<f64>,
    phi: Option<&str>,
    out_dir: &Path,
) -> Result<ExitCode> {
    let spec = model_spec(cfg, model)?;
    let t_end = horizon.or(cfg.horizon).unwrap_or(1.0);
    let radius_fn = match radius {
        Some(r) => TimeFn::constant(r),
        None => cfg.radius_fn(0.1)?,
    };
    let envelope = cfg.envelope_for(&spec)?;
    let control = control_from(cfg, phi, spec.fields.dim_noise(), t_end)?;
    let tube = TubeSpec::new(envelope, radius_fn, cfg.bound_constants()?, control)?;
    let h3 = tube.check_h3()?;
    let summary = tube.tube_bounds()?;
    let grid = tube.time_grid(GridMode::Lower)?;
    let radii = tube.concat_radii(&grid);

    let mut rows_csv = Csv::new(&["t", "H_t", "R_t", "R_star_t", "f_R", "delta"]);
    for row in tube.report_rows(&grid) {
        rows_csv.push(vec![
            g17(row.t),
            g17(row.h_t),
            g17(row.r_t),
            g17(row.r_star_t),
            g17(row.density),
            g17(row.delta),
        ]);
    }
    let mut sum_csv = Csv::new(&[
        "T", "lower", "upper", "lower_general", "r_star_ok", "h3_holds", "ordered",
        "grid_cells", "truncated_tail", "max_radius_ratio",
    ]);
    sum_csv.push(vec![
        g17(t_end),
        g17(summary.lower),
        g17(summary.upper),
        g17(summary.lower_general),
        summary.r_star_ok.to_string(),
        h3.holds().to_string(),
        summary.ordered.to_string(),
        grid.full_cells().to_string(),
        grid.truncated_tail.to_string(),
        g17(radii.max_ratio),
    ]);
    let mut tables = vec![
        ("bounds_grid.csv".to_string(), rows_csv.to_csv_string()),
        ("bounds_summary.csv".to_string(), sum_csv.to_csv_string()),
    ];
    if cli.plots {
        let rows = tube.report_rows(&grid);
        let series = [
            Series {
                label: "R_t",
                points: rows.iter().map(|r| (r.t, r.r_t)).collect(),
                err: None,
            },
            Series {
                label: "R*_t",
                points: rows.iter().map(|r| (r.t, r.r_star_t)).collect(),
                err: None,
            },
            Series {
                label: "delta(t)",
                points: rows.iter().map(|r| (r.t, r.delta)).collect(),
                err: None,
            },
        ];
        tables.push((
            "bounds.svg".to_string(),
            svg_plot("radius and grid profile", "t", "value", &series),
        ));
    }
    println!(
        "lower = {}, upper = {}, lower_general = {}",
        g17(summary.lower),
        g17(summary.upper),
        g17(summary.lower_general)
    );
    if !summary.r_star_ok {
        println!("hypothesis R <= R* violated (margin {}); strong bounds flagged", g17(summary.r_star_margin));
    }
    if !h3.holds() {
        println!("hypothesis (H3) violated: worst ratios R {} phi^2 {} n {} lambda {}",
            g17(h3.radius.worst_ratio), g17(h3.control_sq.worst_ratio),
            g17(h3.n_t.worst_ratio), g17(h3.lambda_t.worst_ratio));
    }
    let paths = write_report(&tables, out_dir)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_distance(
    cfg: &RunConfig,
    model: &ModelArgs,
    x: &str,
    y: Option<&str>,
    radii: &[f64],
    samples: usize,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<ExitCode> {
    let spec = model_spec(cfg, model)?;
    let n = spec.fields.dim_state();
    let x = parse_point(x, n, "point x")?;
    let seed = seed.unwrap_or(11);
    let mut tables = Vec::new();
    if let Some(ys) = y {
        let yv = parse_point(ys, n, "point y")?;
        let d = metrics::quasi_distance(&spec.fields, &x, &yv, 1e-9)?;
        let dc = metrics::caratheodory_distance(&metrics::ControlProblem {
            seed,
            ..metrics::ControlProblem::new(&spec.fields, &x, &yv)?
        })?;
        let ds = metrics::nsw_distance(&spec.fields, &x, &yv)?;
        let mut csv = Csv::new(&[
            "x", "y", "d", "d_c", "d_star", "d_over_dc", "dstar_over_d", "dc_over_dstar",
            "outside_unit_regime", "dc_converged", "dc_gap",
        ]);
        csv.push(vec![
            fmt_vec(&x),
            fmt_vec(&yv),
            g17(d.value),
            g17(dc.d_c),
            g17(ds.value),
            g17(d.value / dc.d_c),
            g17(ds.value / d.value),
            g17(dc.d_c / ds.value),
            d.outside_unit_regime.to_string(),
            dc.converged.to_string(),
            g17(dc.endpoint_gap),
        ]);
        println!(
            "d = {}, d_c = {}, d_* = {}",
            g17(d.value),
            g17(dc.d_c),
            g17(ds.value)
        );
        tables.push(("distance.csv".to_string(), csv.to_csv_string()));
    }
    if !radii.is_empty() {
        let rep = metrics::equivalence_report(&spec.fields, &x, radii, samples, seed)?;
        let mut stats = Csv::new(&[
            "radius", "min_d_dc", "max_d_dc", "min_dstar_d", "max_dstar_d", "min_dc_dstar",
            "max_dc_dstar",
        ]);
        for s in &rep.stats {
            stats.push(vec![
                g17(s.radius),
                g17(s.min_d_dc),
                g17(s.max_d_dc),
                g17(s.min_dstar_d),
                g17(s.max_dstar_d),
                g17(s.min_dc_dstar),
                g17(s.max_dc_dstar),
            ]);
        }
        let mut rows = Csv::new(&[
            "x", "y", "radius", "d", "d_c", "d_star", "d_over_dc", "dstar_over_d",
            "dc_over_dstar", "dc_gap", "dc_converged",
        ]);
        for row in &rep.rows {
            rows.push(vec![
                fmt_vec(&x),
                fmt_vec(&row.y),
                g17(row.radius),
                g17(row.d),
                g17(row.d_c),
                g17(row.d_star),
                g17(row.d / row.d_c),
                g17(row.d_star / row.d),
                g17(row.d_c / row.d_star),
                g17(row.dc_gap),
                row.dc_converged.to_string(),
            ]);
        }
        println!(
            "equivalence bands around [{}]: growth_ok = {}",
            fmt_vec(&x),
            rep.growth_ok
        );
        tables.push(("equivalence_stats.csv".to_string(), stats.to_csv_string()));
        tables.push(("equivalence_rows.csv".to_string(), rows.to_csv_string()));
    }
    if tables.is_empty() {
        return Err(anyhow!("distance needs --y and/or --radii"));
    }
    let paths = write_report(&tables, out_dir)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(stage: &str, out_dir: &Path) -> Result<ExitCode> {
    let stages: Vec<&str> = if stage == "all" {
        validate::STAGES.to_vec()
    } else {
        if !validate::STAGES.contains(&stage) {
            return Err(anyhow!(
                "unknown stage `{stage}`; available: all, {}",
                validate::STAGES.join(", ")
            ));
        }
        vec![validate::STAGES[validate::STAGES.iter().position(|s| *s == stage).unwrap()]]
    };
    let mut tables: Vec<(String, String)> = Vec::new();
    let mut summary = Csv::new(&["stage", "pass", "details"]);
    let mut all_pass = true;
    for name in stages {
        let start = std::time::Instant::now();
        let report = validate::run_stage(name);
        let secs = start.elapsed().as_secs_f64();
        let verdict = if report.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {name} ({secs:.1} s)");
        for line in &report.lines {
            println!("    {line}");
        }
        all_pass &= report.pass;
        summary.push(vec![
            name.to_string(),
            report.pass.to_string(),
            report.lines.join(" | ").replace(',', ";"),
        ]);
        tables.extend(report.tables);
    }
    tables.push(("validate_summary.csv".to_string(), summary.to_csv_string()));
    let paths = write_report(&tables, out_dir)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    if all_pass {
        println!("validation suite: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("validation suite: FAIL");
        Ok(ExitCode::from(1))
    }
}

fn cmd_calibrate(paths: usize, seed: u64, out_dir: &Path) -> Result<ExitCode> {
    let outcome = validate::calibrate(paths, seed)?;
    for line in &outcome.lines {
        println!("{line}");
    }
    let c = outcome.constants;
    let toml_snippet = format!(
        "[constants]\nk = {}\nq = {}\nk_star = {}\nq_star = {}\nk1 = {}\nq1 = {}\nk2 = {}\nq2 = {}\n",
        c.k, c.q, c.k_star, c.q_star, c.k1, c.q1, c.k2, c.q2
    );
    let written = write_report(
        &[
            ("calibration.toml".to_string(), toml_snippet),
            ("calibration_table.csv".to_string(), outcome.table.clone()),
        ],
        out_dir,
    )?;
    for p in written {
        println!("wrote {}", p.display());
    }
    if outcome.feasible {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
