//! Self-contained validation suite over the built-in models.
//!
//! Each stage checks one verifiable claim (closed-form reproduction,
//! property suite, Monte Carlo consistency, bracketing) at pinned scales,
//! seeds and tolerances, and reports pass/fail plus CSV tables. The CLI
//! `validate` subcommand and the acceptance test target both drive these
//! stages.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bounds::{BoundConstants, GridMode, TubeSpec};
use crate::error::Result;
use crate::fields::FieldSet;
use crate::geometry::{self, column_kind, ColumnKind, DirectionalFrame};
use crate::linalg::{self, Mat};
use crate::metrics;
use crate::models;
use crate::montecarlo::{self, stream_rng, McEstimate};
use crate::report::{fit_line, g17, Csv};
use crate::skeleton::{integrate_skeleton, Control, RegularityEnvelope, TimeFn};

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub pass: bool,
    pub lines: Vec<String>,
    /// (file name, file content) pairs for the output directory.
    pub tables: Vec<(String, String)>,
}

impl StageReport {
    fn new(stage: &'static str) -> Self {
        StageReport {
            stage,
            pass: true,
            lines: Vec::new(),
            tables: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.lines.push(format!("ok: {what}"));
        } else {
            self.pass = false;
            self.lines.push(format!("FAIL: {what}"));
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.lines.push(what.into());
    }
}

pub const STAGES: &[&str] = &[
    "norm_algebra",
    "reference_formulas",
    "bm_tube_mc",
    "bm_scaling",
    "heisenberg_scaling",
    "bound_bracketing",
    "grid_construction",
    "metric_closed_forms",
    "fixed_point",
    "equivalence",
    "determinism",
];

/// Run one stage by name; errors surface as failed reports.
pub fn run_stage(name: &str) -> StageReport {
    let out = match name {
        "norm_algebra" => stage_norm_algebra(),
        "reference_formulas" => stage_reference_formulas(),
        "bm_tube_mc" => stage_bm_tube_mc(),
        "bm_scaling" => stage_bm_scaling(),
        "heisenberg_scaling" => stage_heisenberg_scaling(),
        "bound_bracketing" => stage_bound_bracketing(),
        "grid_construction" => stage_grid_construction(),
        "metric_closed_forms" => stage_metric_closed_forms(),
        "fixed_point" => stage_fixed_point(),
        "equivalence" => stage_equivalence(),
        "determinism" => stage_determinism(),
        other => {
            let mut r = StageReport::new("unknown");
            r.pass = false;
            r.lines.push(format!("unknown stage `{other}`"));
            return r;
        }
    };
    match out {
        Ok(r) => r,
        Err(e) => {
            let mut r = StageReport::new(Box::leak(name.to_string().into_boxed_str()));
            r.pass = false;
            r.lines.push(format!("stage error: {e}"));
            r
        }
    }
}

fn zero_skeleton(fs: &FieldSet, x0: &[f64], t: f64) -> Result<crate::skeleton::Skeleton> {
    integrate_skeleton(fs, &Control::zero(fs.dim_noise(), t), x0, 32)
}

// ---------------------------------------------------------------------------
// stage 1: norm algebra on randomized frames
// ---------------------------------------------------------------------------

/// Random full-row-rank frame with the m = d² column layout.
fn random_frame(rng: &mut rand_pcg::Pcg64Mcg) -> DirectionalFrame {
    loop {
        let n = rng.gen_range(1..=4usize);
        let d_min = (1..=4usize).find(|d| d * d >= n).unwrap();
        let d = rng.gen_range(d_min..=4usize);
        let m = d * d;
        let mut a = Mat::zeros(n, m);
        for v in a.data.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let kinds: Vec<ColumnKind> = (1..=m).map(|l| column_kind(l, d)).collect();
        let frame = DirectionalFrame::from_parts(0.0, vec![0.0; n], a, kinds, None);
        if frame.sv_min > 1e-6 * frame.sv_max {
            return frame;
        }
    }
}

pub fn stage_norm_algebra() -> Result<StageReport> {
    let mut r = StageReport::new("norm_algebra");
    let start = Instant::now();
    let mut rng = stream_rng(0xA1, 1);
    const SLACK: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    let mut violations = 0usize;
    for _ in 0..1000 {
        let frame = random_frame(&mut rng);
        let n = frame.dim();
        let m = frame.n_columns();
        let rr: f64 = 10f64.powf(-3.0 * rng.gen::<f64>());
        let rp: f64 = rr + (1.0 - rr) * rng.gen::<f64>();
        let fa = frame.scaled(rr)?;
        let fb = frame.scaled(rp)?;
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let na = fa.norm(&y)?;
        let nb = fb.norm(&y)?;
        // scaling sandwich: sqrt(R/R') |y|_R >= |y|_{R'} >= (R/R') |y|_R
        let lhs = (rr / rp).sqrt() * na;
        let rhs = (rr / rp) * na;
        let v1 = (nb - lhs) / lhs.max(1e-300);
        let v2 = (rhs - nb) / rhs.max(1e-300);
        // singular-value sandwich: |y|/(sqrt(R) sv_max) <= |y|_{A_R} <= |y|/(R sv_min)
        let ey = linalg::norm2(&y);
        let v3 = (ey / (rr.sqrt() * frame.sv_max) - na) / na.max(1e-300);
        let v4 = (na - ey / (rr * frame.sv_min)) / na.max(1e-300);
        // frame contraction: |A_R z|_{A_R} <= |z|
        let z: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let az = fa.a.mul_vec(&z);
        let v5 = (fa.norm(&az)? - linalg::norm2(&z)) / linalg::norm2(&z).max(1e-300);
        // averaging: |∫ φ|²_{A_R} <= r ∫ |φ_s|²_{A_R} ds, piecewise-constant φ
        let pieces = 3;
        let r_span: f64 = 0.2 + 0.8 * rng.gen::<f64>();
        let w = r_span / pieces as f64;
        let mut integral = vec![0.0; n];
        let mut rhs_quad = 0.0;
        for _ in 0..pieces {
            let phi: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for i in 0..n {
                integral[i] += phi[i] * w;
            }
            rhs_quad += fa.norm_sq(&phi)? * w;
        }
        let v6 = (fa.norm_sq(&integral)? - r_span * rhs_quad) / (r_span * rhs_quad).max(1e-300);
        for v in [v1, v2, v3, v4, v5, v6] {
            worst = worst.max(v);
            if v > SLACK {
                violations += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    r.check(violations == 0, format!(
        "scaling/sandwich/contraction/averaging inequalities on 1000 random frames: {violations} violations, worst relative slack {worst:.3e} (allowed {SLACK:.0e})"
    ));
    r.check(elapsed < 10.0, format!("runtime {elapsed:.2} s < 10 s"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 2: closed-form Gram matrices and bracket
// ---------------------------------------------------------------------------

pub fn stage_reference_formulas() -> Result<StageReport> {
    let mut r = StageReport::new("reference_formulas");
    let g_fs = models::grushin()?;
    let h_fs = models::heisenberg()?;
    let mut rng = stream_rng(0xA2, 1);
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for _ in 0..100 {
        let x1 = 4.0 * rng.gen::<f64>() - 2.0;
        let x2 = 4.0 * rng.gen::<f64>() - 2.0;
        let rr = 0.01 + 0.99 * rng.gen::<f64>();
        let f = geometry::assemble_frame(&g_fs, 0.0, &[x1, x2])?.scaled(rr)?;
        let want = models::grushin_gram(x1, rr);
        for i in 0..2 {
            for j in 0..2 {
                worst_g = worst_g.max((f.gram.at(i, j) - want.at(i, j)).abs());
            }
        }
        let f = geometry::assemble_frame(&h_fs, 0.0, &[0.0; 3])?.scaled(rr)?;
        let want = models::heisenberg_gram_origin(rr);
        for i in 0..3 {
            for j in 0..3 {
                worst_h = worst_h.max((f.gram.at(i, j) - want.at(i, j)).abs());
            }
        }
        let x = [x1, x2, 4.0 * rng.gen::<f64>() - 2.0];
        let b = h_fs.lie_bracket(1, 2, 0.0, &x)?;
        let want_b = models::heisenberg_bracket();
        for k in 0..3 {
            worst_b = worst_b.max((b[k] - want_b[k]).abs());
        }
    }
    r.check(worst_g <= 1e-12, format!("Grushin Gram diag(R, R(x1^2+2R)): worst abs dev {worst_g:.3e}"));
    r.check(worst_h <= 1e-12, format!("Heisenberg Gram at 0 diag(R,R,2R^2): worst abs dev {worst_h:.3e}"));
    r.check(worst_b <= 1e-12, format!("Heisenberg bracket (0,0,1): worst abs dev {worst_b:.3e}"));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 3: BM tube probability vs the reflection series
// ---------------------------------------------------------------------------

const MC_PATHS: usize = 100_000;

pub fn stage_bm_tube_mc() -> Result<StageReport> {
    let mut r = StageReport::new("bm_tube_mc");
    let fs = models::bm()?;
    let skel = zero_skeleton(&fs, &[0.0], 1.0)?;
    let n_steps = 10_000;
    let mut csv = Csv::new(&[
        "R", "p_hat", "std_err", "series", "series_discrete", "n_paths", "n_steps", "seed",
        "seconds",
    ]);
    for (i, rr) in [0.1, 0.2, 0.4].iter().enumerate() {
        let start = Instant::now();
        let est = montecarlo::tube_probability(
            &fs,
            &[0.0],
            &skel,
            &TimeFn::constant(*rr),
            1.0,
            MC_PATHS,
            n_steps,
            0xB3 + i as u64,
        )?;
        let secs = start.elapsed().as_secs_f64();
        let series = models::bm_sup_prob_series(1.0, rr.sqrt(), 10);
        // The estimator monitors the sup on the simulation grid, so the
        // matching oracle is the series at the continuity-corrected barrier;
        // the continuous-time value is reported alongside.
        let target = models::bm_sup_prob_series_discrete(1.0, rr.sqrt(), n_steps, 10);
        let p_ref = est.p_hat.max(target);
        let se_cmp = (p_ref * (1.0 - p_ref) / MC_PATHS as f64).sqrt();
        csv.push(vec![
            g17(*rr),
            g17(est.p_hat),
            g17(est.std_err),
            g17(series),
            g17(target),
            est.n_paths.to_string(),
            est.n_steps.to_string(),
            est.seed.to_string(),
            format!("{secs:.2}"),
        ]);
        r.check(
            (est.p_hat - target).abs() <= 3.0 * se_cmp,
            format!(
                "R={rr}: p_hat {:.6e} within 3 SE ({:.2e}) of the grid-monitored series {target:.6e} (continuous value {series:.6e})",
                est.p_hat,
                3.0 * se_cmp
            ),
        );
        r.check(secs < 300.0, format!("R={rr}: runtime {secs:.1} s < 300 s"));
    }
    r.tables.push(("validate_bm_tube_mc.csv".into(), csv.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 4: exponential scaling regression
// ---------------------------------------------------------------------------

pub fn stage_bm_scaling() -> Result<StageReport> {
    let mut r = StageReport::new("bm_scaling");
    let fs = models::bm()?;
    let skel = zero_skeleton(&fs, &[0.0], 1.0)?;
    let radii = [1.0 / 6.0, 0.2, 0.25, 1.0 / 3.0, 0.4];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut csv = Csv::new(&["R", "T_over_R", "p_hat", "std_err", "log_p_hat"]);
    for (i, rr) in radii.iter().enumerate() {
        let est = montecarlo::tube_probability(
            &fs,
            &[0.0],
            &skel,
            &TimeFn::constant(*rr),
            1.0,
            MC_PATHS,
            4000,
            0xB4 + i as u64,
        )?;
        let x = 1.0 / rr;
        xs.push(x);
        ys.push(est.p_hat.ln());
        csv.push(vec![
            g17(*rr),
            g17(x),
            g17(est.p_hat),
            g17(est.std_err),
            g17(est.p_hat.ln()),
        ]);
    }
    let fit = fit_line(&xs, &ys)?;
    r.note(format!(
        "log p_hat ~ {:.4} * (T/R) + {:.4}",
        fit.slope, fit.intercept
    ));
    r.check(fit.r2 >= 0.98, format!("regression R^2 = {:.5} >= 0.98", fit.r2));
    r.check(fit.slope < 0.0, format!("slope {:.4} < 0", fit.slope));
    let mut summary = Csv::new(&["slope", "intercept", "r2"]);
    summary.push(vec![g17(fit.slope), g17(fit.intercept), g17(fit.r2)]);
    r.tables.push(("validate_bm_scaling.csv".into(), csv.to_csv_string()));
    r.tables.push(("validate_bm_scaling_fit.csv".into(), summary.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 5: Heisenberg Brownian-scaling identity
// ---------------------------------------------------------------------------

pub fn stage_heisenberg_scaling() -> Result<StageReport> {
    let mut r = StageReport::new("heisenberg_scaling");
    let fs = models::heisenberg()?;
    let run = |t: f64, rr: f64, seed: u64| -> Result<McEstimate> {
        let skel = zero_skeleton(&fs, &[0.0; 3], t)?;
        montecarlo::tube_probability(
            &fs,
            &[0.0; 3],
            &skel,
            &TimeFn::constant(rr),
            t,
            MC_PATHS,
            4000,
            seed,
        )
    };
    let a = run(0.5, 0.25, 0xB5)?;
    let b = run(2.0, 1.0, 0xB5 + 1)?;
    let joint = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    r.note(format!(
        "p(T=0.5,R=0.25) = {:.5e} +- {:.2e}; p(T=2,R=1) = {:.5e} +- {:.2e}",
        a.p_hat, a.std_err, b.p_hat, b.std_err
    ));
    r.check(
        (a.p_hat - b.p_hat).abs() <= 3.0 * joint,
        format!(
            "|Delta p| = {:.3e} <= 3 joint SE = {:.3e}",
            (a.p_hat - b.p_hat).abs(),
            3.0 * joint
        ),
    );
    let mut csv = Csv::new(&["T", "R", "p_hat", "std_err"]);
    csv.push(vec![g17(0.5), g17(0.25), g17(a.p_hat), g17(a.std_err)]);
    csv.push(vec![g17(2.0), g17(1.0), g17(b.p_hat), g17(b.std_err)]);
    r.tables.push(("validate_heisenberg_scaling.csv".into(), csv.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 6: two-sided bracketing with the shipped constants
// ---------------------------------------------------------------------------

struct BracketCase {
    model: &'static str,
    t_values: [f64; 3],
    r_values: [f64; 3],
    n_steps: usize,
}

const BRACKET_CASES: [BracketCase; 2] = [
    BracketCase {
        model: "bm",
        t_values: [0.2, 0.4, 0.6],
        r_values: [0.1, 0.2, 0.4],
        n_steps: 3000,
    },
    BracketCase {
        model: "grushin",
        t_values: [0.05, 0.1, 0.15],
        r_values: [0.05, 0.1, 0.2],
        n_steps: 2000,
    },
];

pub fn stage_bound_bracketing() -> Result<StageReport> {
    let mut r = StageReport::new("bound_bracketing");
    let mut csv = Csv::new(&[
        "model", "T", "R", "lower", "p_hat", "std_err", "upper", "r_star", "ok",
    ]);
    let mut seed = 0xB6_u64;
    for case in &BRACKET_CASES {
        let spec = models::instantiate_model(case.model, &BTreeMap::new())?;
        for t in case.t_values {
            for rr in case.r_values {
                seed += 1;
                let control = Control::zero(spec.fields.dim_noise(), t);
                let tube = TubeSpec::new(
                    spec.envelope.clone(),
                    TimeFn::constant(rr),
                    BoundConstants::default(),
                    control,
                )?;
                let cap = tube.radius_cap(0.0);
                let bounds = tube.tube_bounds()?;
                let skel = zero_skeleton(&spec.fields, &spec.x0, t)?;
                let est = montecarlo::tube_probability(
                    &spec.fields,
                    &spec.x0,
                    &skel,
                    &TimeFn::constant(rr),
                    t,
                    MC_PATHS,
                    case.n_steps,
                    seed,
                )?;
                let lo_ok = bounds.lower <= est.p_hat - 3.0 * est.std_err;
                let up_ok = est.p_hat + 3.0 * est.std_err <= bounds.upper;
                let hyp_ok = rr <= cap;
                let ok = lo_ok && up_ok && hyp_ok;
                csv.push(vec![
                    case.model.into(),
                    g17(t),
                    g17(rr),
                    g17(bounds.lower),
                    g17(est.p_hat),
                    g17(est.std_err),
                    g17(bounds.upper),
                    g17(cap),
                    ok.to_string(),
                ]);
                r.check(
                    hyp_ok,
                    format!("{} T={t} R={rr}: hypothesis R <= R*(0) ({rr} <= {cap:.4})", case.model),
                );
                r.check(
                    lo_ok,
                    format!(
                        "{} T={t} R={rr}: lower {:.3e} <= p_hat - 3SE = {:.3e}",
                        case.model,
                        bounds.lower,
                        est.p_hat - 3.0 * est.std_err
                    ),
                );
                r.check(
                    up_ok,
                    format!(
                        "{} T={t} R={rr}: p_hat + 3SE = {:.3e} <= upper {:.3e}",
                        case.model,
                        est.p_hat + 3.0 * est.std_err,
                        bounds.upper
                    ),
                );
            }
        }
    }
    r.tables.push(("validate_bound_bracketing.csv".into(), csv.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 7: concatenation grid consistency
// ---------------------------------------------------------------------------

fn grid_check_spec() -> Result<TubeSpec> {
    let envelope =
        RegularityEnvelope::new(1.4, 1.0, TimeFn::constant(1.0), TimeFn::constant(1.0))?;
    let radius = TimeFn::table(vec![0.0, 0.5], vec![0.2, 0.15])?;
    let control = Control::piecewise(1, 1.0, &[vec![1.0], vec![0.9]])?;
    TubeSpec::new(envelope, radius, BoundConstants::default(), control)
}

/// Independent cell-integral oracle: pointwise density, midpoint sums on
/// sub-segments split at every breakpoint of the piecewise data (exact).
fn independent_density_integral(spec: &TubeSpec, mode: GridMode, lo: f64, hi: f64) -> f64 {
    let mut cuts = vec![lo, hi];
    for b in spec
        .radius
        .breakpoints()
        .into_iter()
        .chain(spec.envelope.n_t.breakpoints())
        .chain(spec.envelope.lambda_t.breakpoints())
        .chain(spec.control.breakpoints())
    {
        if b > lo && b < hi {
            cuts.push(b);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        acc += spec.density(mode, 0.5 * (w[0] + w[1])) * (w[1] - w[0]);
    }
    acc
}

pub fn stage_grid_construction() -> Result<StageReport> {
    let mut r = StageReport::new("grid_construction");
    let spec = grid_check_spec()?;
    let h3 = spec.check_h3()?;
    r.check(h3.holds(), "hypothesis (H3) holds for R, |phi|^2, n, lambda");
    let grid = spec.time_grid(GridMode::Lower)?;
    let c = spec.constants;
    let tau = spec.envelope.mu.powf(-(2.0 * c.q1 + 1.0));
    let mut worst_cell = 0.0_f64;
    let mut rdelta_ok = true;
    let mut energy_ok = true;
    let mut h_ok = true;
    for k in 0..grid.full_cells() {
        let t = grid.nodes[k];
        let delta = grid.deltas[k];
        let integral = independent_density_integral(&spec, GridMode::Lower, t, grid.nodes[k + 1]);
        worst_cell = worst_cell.max((integral - tau).abs());
        h_ok &= delta <= spec.envelope.h + 1e-12;
        let kappa_inv =
            spec.envelope.lambda_t.eval(t) / (spec.envelope.mu * spec.envelope.n_t.eval(t));
        rdelta_ok &= delta <= spec.radius.eval(t) * kappa_inv.powf(c.q1) / c.k1 + 1e-10;
        let eps_sq = spec
            .control
            .sq_integral(t, delta.min(spec.horizon() - t))
            .unwrap_or(f64::INFINITY);
        energy_ok &= eps_sq <= kappa_inv.powf(c.q1) / c.k1 + 1e-10;
    }
    r.check(
        worst_cell <= 1e-8,
        format!(
            "interior cells: |integral - mu^-(2q1+1)| worst {worst_cell:.3e} <= 1e-8 over {} cells",
            grid.full_cells()
        ),
    );
    r.check(h_ok, "delta(t) <= h at every node");
    r.check(rdelta_ok, "cell-width bound delta(t) <= R_t (lambda/(mu n))^q1 / K1 on the grid");
    r.check(energy_ok, "(energy): eps_t(delta)^2 <= (lambda/(mu n))^q1 / K1 on the grid");
    let rows = spec.report_rows(&grid);
    let mut csv = Csv::new(&["t", "H_t", "R_t", "R_star_t", "f_R", "delta"]);
    for row in rows {
        csv.push(vec![
            g17(row.t),
            g17(row.h_t),
            g17(row.r_t),
            g17(row.r_star_t),
            g17(row.density),
            g17(row.delta),
        ]);
    }
    r.tables.push(("validate_grid_construction.csv".into(), csv.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 8: metric closed forms
// ---------------------------------------------------------------------------

pub fn stage_metric_closed_forms() -> Result<StageReport> {
    let mut r = StageReport::new("metric_closed_forms");
    let identity = models::constant_identity(3)?;
    for (x, y) in [
        ([0.1, -0.2, 0.4], [0.3, 0.0, 0.1]),
        ([0.0, 0.0, 0.0], [0.05, 0.02, -0.01]),
        ([1.0, 1.0, 1.0], [1.2, 0.9, 1.05]),
    ] {
        let want = linalg::norm2(&linalg::sub(&y, &x));
        let got = metrics::quasi_distance(&identity, &x, &y, 1e-9)?.value;
        r.check(
            (got - want).abs() <= 1e-6 * want,
            format!("identity d({x:?},{y:?}) = {got:.9} vs |y-x| = {want:.9}"),
        );
    }
    let grushin = models::grushin()?;
    for a in [0.3, 0.04, 0.9] {
        let got = metrics::quasi_distance(&grushin, &[0.0, 0.0], &[a, 0.0], 1e-9)?.value;
        r.check(
            (got - a).abs() <= 1e-6 * a,
            format!("Grushin axis d((0,0),({a},0)) = {got:.9} vs {a}"),
        );
    }
    let heis = models::heisenberg()?;
    for z in [0.3, 0.02, 1e-3] {
        let want = (z * z / 2.0_f64).powf(0.25);
        let got = metrics::quasi_distance(&heis, &[0.0; 3], &[0.0, 0.0, z], 1e-9)?.value;
        r.check(
            (got - want).abs() <= 1e-6 * want,
            format!("Heisenberg vertical d(0,(0,0,{z})) = {got:.9} vs (z^2/2)^(1/4) = {want:.9}"),
        );
    }
    let id2 = models::constant_identity(2)?;
    let x = [0.1, 0.3];
    let y = [0.6, -0.2];
    let want = linalg::norm2(&linalg::sub(&y, &x));
    let dc = metrics::caratheodory_distance(&metrics::ControlProblem::new(&id2, &x, &y)?)?;
    r.check(
        dc.converged && (dc.d_c - want).abs() <= 0.01 * want,
        format!("identity d_c = {:.6} within 1% of |y-x| = {want:.6} (gap {:.2e})", dc.d_c, dc.endpoint_gap),
    );
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 9: Moore-Penrose fixed point
// ---------------------------------------------------------------------------

pub fn stage_fixed_point() -> Result<StageReport> {
    let mut r = StageReport::new("fixed_point");
    let identity = models::constant_identity(3)?;
    let x = [0.1, 0.2, 0.3];
    let y = [0.35, 0.15, 0.28];
    let fp = metrics::gamma_fixed_point(&identity, &x, &y, 10, 1e-12)?;
    r.check(fp.iterations == 1, format!("constant fields converge in {} iteration(s)", fp.iterations));
    r.check(fp.residual <= 1e-13, format!("constant fields residual {:.2e}", fp.residual));

    let grushin = models::grushin()?;
    let x = [0.1, 0.0];
    let y = [0.1001, 0.00005];
    let fp = metrics::gamma_fixed_point(&grushin, &x, &y, 60, 1e-10)?;
    let dist = linalg::norm2(&linalg::sub(&y, &x));
    r.check(fp.residual <= 1e-8, format!("Grushin near-diagonal residual {:.2e} <= 1e-8", fp.residual));
    r.check(
        linalg::norm2(&fp.gamma) <= 2.0 * dist,
        format!("Grushin |gamma| = {:.3e} <= 2|x-y| = {:.3e}", linalg::norm2(&fp.gamma), 2.0 * dist),
    );

    let heis = models::heisenberg()?;
    let x = [0.0; 3];
    let y = [0.0007, -0.0005, 0.0000004];
    let fp = metrics::gamma_fixed_point(&heis, &x, &y, 60, 1e-10)?;
    let dist = linalg::norm2(&linalg::sub(&y, &x));
    r.check(fp.residual <= 1e-8, format!("Heisenberg near-diagonal residual {:.2e} <= 1e-8", fp.residual));
    r.check(
        linalg::norm2(&fp.gamma) <= 2.0 * dist,
        format!("Heisenberg |gamma| = {:.3e} <= 2|x-y| = {:.3e}", linalg::norm2(&fp.gamma), 2.0 * dist),
    );
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 10: equivalence diagnostics
// ---------------------------------------------------------------------------

/// Calibrated constants of the local-equivalence comparison C̄(x) = K̄ (n/λ)^q̄.
pub const EQUIV_K_BAR: f64 = 4.0;
pub const EQUIV_Q_BAR: f64 = 1.0;

pub fn stage_equivalence() -> Result<StageReport> {
    let mut r = StageReport::new("equivalence");
    let radii = [1e-1, 1e-2, 1e-3];
    let mut csv = Csv::new(&[
        "model", "radius", "min_d_dc", "max_d_dc", "min_dstar_d", "max_dstar_d", "min_dc_dstar",
        "max_dc_dstar",
    ]);
    let mut rows_csv = Csv::new(&[
        "model", "x", "y", "radius", "d", "d_c", "d_star", "d_over_dc", "dc_gap",
    ]);
    for (name, base) in [("heisenberg", vec![0.0, 0.0, 0.0]), ("grushin", vec![1.0, 0.0])] {
        let spec = models::instantiate_model(name, &BTreeMap::new())?;
        let rep = metrics::equivalence_report(&spec.fields, &base, &radii, 4, 0xB10)?;
        for s in &rep.stats {
            csv.push(vec![
                name.into(),
                g17(s.radius),
                g17(s.min_d_dc),
                g17(s.max_d_dc),
                g17(s.min_dstar_d),
                g17(s.max_dstar_d),
                g17(s.min_dc_dstar),
                g17(s.max_dc_dstar),
            ]);
        }
        for row in &rep.rows {
            rows_csv.push(vec![
                name.into(),
                base.iter().map(|v| g17(*v)).collect::<Vec<_>>().join(";"),
                row.y.iter().map(|v| g17(*v)).collect::<Vec<_>>().join(";"),
                g17(row.radius),
                g17(row.d),
                g17(row.d_c),
                g17(row.d_star),
                g17(row.d / row.d_c),
                g17(row.dc_gap),
            ]);
        }
        r.check(
            rep.rows.iter().all(|row| row.dc_converged),
            format!("{name}: every d_c solve met its endpoint tolerance"),
        );
        r.check(
            rep.growth_ok,
            format!("{name}: d/d_c band grows < 2x under radius refinement"),
        );
        // local-equivalence literal check with the calibrated C-bar
        let n_x = spec.fields.local_bound(0.0, &base, 41)?;
        let lambda_x = geometry::assemble_frame(&spec.fields, 0.0, &base)?.lambda();
        let c_bar = EQUIV_K_BAR * (n_x / lambda_x).powf(EQUIV_Q_BAR);
        let (applicable, passed) = metrics::local_equivalence_check(&rep.rows, c_bar);
        r.note(format!(
            "{name}: C_bar = {c_bar:.3} ({applicable} pairs pass the hypothesis d_c <= 1/C_bar^2)"
        ));
        r.check(
            passed == applicable,
            format!("{name}: d <= 2 C_bar d_c on {passed}/{applicable} applicable pairs"),
        );
    }
    r.tables.push(("validate_equivalence_stats.csv".into(), csv.to_csv_string()));
    r.tables.push(("validate_equivalence_rows.csv".into(), rows_csv.to_csv_string()));
    Ok(r)
}

// ---------------------------------------------------------------------------
// stage 11: determinism across worker counts
// ---------------------------------------------------------------------------

/// The determinism probe: a fixed mini Monte Carlo batch rendered to CSV.
pub fn determinism_probe_csv(workers: usize) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::TubeError::Config(format!("thread pool: {e}")))?;
    pool.install(|| -> Result<String> {
        let mut csv = Csv::new(&["model", "p_hat", "std_err", "inside", "blowups"]);
        for (name, rr, t) in [("bm", 0.2, 0.5), ("grushin", 0.15, 0.3)] {
            let spec = models::instantiate_model(name, &BTreeMap::new())?;
            let skel = zero_skeleton(&spec.fields, &spec.x0, t)?;
            let est = montecarlo::tube_probability(
                &spec.fields,
                &spec.x0,
                &skel,
                &TimeFn::constant(rr),
                t,
                20_000,
                500,
                0xB11,
            )?;
            csv.push(vec![
                name.into(),
                g17(est.p_hat),
                g17(est.std_err),
                est.n_inside.to_string(),
                est.n_blowups.to_string(),
            ]);
        }
        Ok(csv.to_csv_string())
    })
}

pub fn stage_determinism() -> Result<StageReport> {
    let mut r = StageReport::new("determinism");
    let one = determinism_probe_csv(1)?;
    let two = determinism_probe_csv(2)?;
    let many = determinism_probe_csv(4)?;
    r.check(one == two, "worker counts 1 and 2 give byte-identical CSV");
    r.check(one == many, "worker counts 1 and 4 give byte-identical CSV");
    r.tables.push(("validate_determinism.csv".into(), one));
    Ok(r)
}

// ---------------------------------------------------------------------------
// calibration of the bracketing constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub constants: BoundConstants,
    pub feasible: bool,
    /// Total log-gap (smaller = tighter bracketing).
    pub score: f64,
    pub lines: Vec<String>,
    pub table: String,
}

/// Grid-search (K, q, K*, q*) to the tightest pair bracketing the measured
/// tube probabilities of the built-in models (with 3 SE margins); the grid
/// machinery constants (K1, q1, K2, q2) are kept at their defaults.
pub fn calibrate(n_paths: usize, seed: u64) -> Result<CalibrationOutcome> {
    struct Cell {
        t: f64,
        rr: f64,
        est: McEstimate,
        envelope: RegularityEnvelope,
    }
    let mut cells = Vec::new();
    let mut s = seed;
    for case in &BRACKET_CASES {
        let spec = models::instantiate_model(case.model, &BTreeMap::new())?;
        for t in case.t_values {
            for rr in case.r_values {
                s += 1;
                let skel = zero_skeleton(&spec.fields, &spec.x0, t)?;
                let est = montecarlo::tube_probability(
                    &spec.fields,
                    &spec.x0,
                    &skel,
                    &TimeFn::constant(rr),
                    t,
                    n_paths,
                    case.n_steps.min(1500),
                    s,
                )?;
                cells.push(Cell {
                    t,
                    rr,
                    est,
                    envelope: spec.envelope.clone(),
                });
            }
        }
    }
    let mut best: Option<(BoundConstants, f64)> = None;
    let mut table = Csv::new(&["K", "q", "K_star", "q_star", "feasible", "score"]);
    for k in [1.0, 1.5, 2.0, 2.5, 3.0] {
        for q in [1.0, 2.0] {
            for k_star in [0.25, 0.5, 1.0] {
                let constants = BoundConstants {
                    k,
                    q,
                    k_star,
                    q_star: 1.0,
                    ..BoundConstants::default()
                };
                let mut feasible = true;
                let mut score = 0.0;
                for cell in &cells {
                    let tube = TubeSpec::new(
                        cell.envelope.clone(),
                        TimeFn::constant(cell.rr),
                        constants,
                        Control::zero(1, cell.t),
                    )?;
                    let cap = tube.radius_cap(0.0);
                    let b = tube.tube_bounds()?;
                    let lo_edge = cell.est.p_hat - 3.0 * cell.est.std_err;
                    let up_edge = cell.est.p_hat + 3.0 * cell.est.std_err;
                    if cell.rr > cap || b.lower > lo_edge || up_edge > b.upper || lo_edge <= 0.0 {
                        feasible = false;
                        break;
                    }
                    score += (lo_edge.ln() - b.lower.ln()) + (b.upper.ln() - up_edge.ln());
                }
                table.push(vec![
                    g17(k),
                    g17(q),
                    g17(k_star),
                    g17(1.0),
                    feasible.to_string(),
                    if feasible { g17(score) } else { "inf".into() },
                ]);
                if feasible && best.as_ref().map(|(_, s)| score < *s).unwrap_or(true) {
                    best = Some((constants, score));
                }
            }
        }
    }
    let mut lines = vec![format!("calibrated on {} cells, {} paths each", cells.len(), n_paths)];
    let (constants, score, feasible) = match best {
        Some((c, s)) => {
            lines.push(format!(
                "tightest bracketing pair: K={} q={} K*={} q*={} (log-gap {s:.2})",
                c.k, c.q, c.k_star, c.q_star
            ));
            (c, s, true)
        }
        None => {
            lines.push("no candidate bracketed every cell; keeping defaults".into());
            (BoundConstants::default(), f64::INFINITY, false)
        }
    };
    Ok(CalibrationOutcome {
        constants,
        feasible,
        score,
        lines,
        table: table.to_csv_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_are_runnable() {
        // cheap stages only; the heavy ones run in the acceptance suite
        for name in ["norm_algebra", "reference_formulas", "grid_construction"] {
            let rep = run_stage(name);
            assert_eq!(rep.stage, name);
            assert!(rep.pass, "{name} failed: {:?}", rep.lines);
        }
        let rep = run_stage("no_such_stage");
        assert!(!rep.pass);
    }
}
