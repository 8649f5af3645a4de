//! The explicit formulas of the tube estimates: the rate `H_t`, the radius
//! cap `R_t*(φ)`, the two-sided exponential bounds, the concatenation time
//! grid driven by `f_R`/`g_R`, and the shrinking radii `r_k`.
//!
//! All time data (envelope tables, radius function, squared control) are
//! piecewise constant, so quadrature on a grid refining every breakpoint is
//! exact; the composite rule below is the trapezoid rule collapsed on
//! constant segments.

use crate::error::{Result, TubeError};
use crate::skeleton::{check_regularity_class, Control, RegularityEnvelope, RegularityReport, TimeFn};

/// Constants of the bound formulas. The estimates hold for *some* positive
/// constants; the shipped defaults are a calibration against the built-in
/// models, and `validate`'s calibrate routine re-derives them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    /// Rate constants: H_t = K (μ n_t / λ_t)^q.
    pub k: f64,
    pub q: f64,
    /// Radius-cap constants in R_t*(φ).
    pub k_star: f64,
    pub q_star: f64,
    /// Grid-density constants in f_R / g_R.
    pub k1: f64,
    pub q1: f64,
    /// Concatenation-radius constants in r_k.
    pub k2: f64,
    pub q2: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants {
            k: 2.0,
            q: 1.0,
            k_star: 0.5,
            q_star: 1.0,
            k1: 2.0,
            q1: 1.0,
            k2: 4.0,
            q2: 1.0,
        }
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.k,
            self.q,
            self.k_star,
            self.q_star,
            self.k1,
            self.q1,
            self.k2,
            self.q2,
        ];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(TubeError::Domain("bound constants must be positive".into()));
        }
        if self.q < 1.0 || self.q1 < 1.0 || self.q2 < 1.0 || self.q_star < 1.0 {
            return Err(TubeError::Domain("exponents q, q1, q2, q* must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tube description: envelope, radius function, constants and the control.
#[derive(Debug, Clone)]
pub struct TubeSpec {
    pub envelope: RegularityEnvelope,
    pub radius: TimeFn,
    pub constants: BoundConstants,
    pub control: Control,
}

/// Which density function drives the concatenation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// f_R with the 1/h + 1/R terms (lower-bound proof).
    Lower,
    /// g_R with exp(-K*(μn/λ)^{q*} μ^{2q*})/R replacing 1/h + 1/R.
    Upper,
}

/// Concatenation grid t_0 = 0 < t_1 < … ; each full cell carries
/// ∫ density = μ^{-(2q1+1)}.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub mode: GridMode,
    pub nodes: Vec<f64>,
    /// `deltas[k] = nodes[k+1] - nodes[k]`.
    pub deltas: Vec<f64>,
    /// The defining integral could not reach its threshold before T, so the
    /// last cell is truncated at T.
    pub truncated_tail: bool,
}

impl TimeGrid {
    /// Number of full (non-truncated) cells.
    pub fn full_cells(&self) -> usize {
        self.deltas.len() - usize::from(self.truncated_tail)
    }
}

/// Two-sided bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSummary {
    /// exp(-∫ H_t (1/R_t + |φ_t|²) dt), valid under R_t <= R_t*(φ).
    pub lower: f64,
    /// exp(-∫ e^{-H_t} (1/R_t + |φ_t|²) dt).
    pub upper: f64,
    /// exp(-∫ H_t (1/h + 1/R_t + |φ_t|²) dt), valid without the radius cap.
    pub lower_general: f64,
    /// R_t <= R_t*(φ) held at every sampled time.
    pub r_star_ok: bool,
    /// min over sampled t of R_t*(φ) - R_t.
    pub r_star_margin: f64,
    /// H_t stayed above the threshold where lower <= upper is guaranteed.
    pub ordered: bool,
}

/// Per-node report row for CSV output.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub t: f64,
    pub h_t: f64,
    pub r_t: f64,
    pub r_star_t: f64,
    pub density: f64,
    pub delta: f64,
}

/// (H3) verification outcome for the four functions of the hypothesis.
#[derive(Debug, Clone)]
pub struct H3Report {
    pub radius: RegularityReport,
    pub control_sq: RegularityReport,
    pub n_t: RegularityReport,
    pub lambda_t: RegularityReport,
}

impl H3Report {
    pub fn holds(&self) -> bool {
        self.radius.holds && self.control_sq.holds && self.n_t.holds && self.lambda_t.holds
    }
}

impl TubeSpec {
    pub fn new(
        envelope: RegularityEnvelope,
        radius: TimeFn,
        constants: BoundConstants,
        control: Control,
    ) -> Result<Self> {
        constants.validate()?;
        let spec = TubeSpec {
            envelope,
            radius,
            constants,
            control,
        };
        for t in spec.sample_times() {
            let r = spec.radius.eval(t);
            if !(r > 0.0 && r <= 1.0) {
                return Err(TubeError::Domain(format!("R({t}) = {r} outside (0,1]")));
            }
        }
        Ok(spec)
    }

    pub fn horizon(&self) -> f64 {
        self.control.horizon()
    }

    /// Merged breakpoints of all piecewise data on [0, T], with midpoints
    /// as representative sample times.
    fn segment_nodes(&self) -> Vec<f64> {
        let t_end = self.horizon();
        let mut pts = vec![0.0, t_end];
        for src in [
            self.envelope.n_t.breakpoints(),
            self.envelope.lambda_t.breakpoints(),
            self.radius.breakpoints(),
            self.control.breakpoints(),
        ] {
            for b in src {
                if b > 0.0 && b < t_end {
                    pts.push(b);
                }
            }
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        pts
    }

    fn sample_times(&self) -> Vec<f64> {
        let nodes = self.segment_nodes();
        let mut out = nodes.clone();
        for w in nodes.windows(2) {
            out.push(0.5 * (w[0] + w[1]));
        }
        out
    }

    /// Exact integral of a piecewise-constant-in-segments function of time.
    fn integrate(&self, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let nodes = self.segment_nodes();
        let mut acc = 0.0;
        let mut a = lo;
        for w in nodes.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            if s1 <= lo || s0 >= hi {
                continue;
            }
            let b = s1.min(hi);
            let a0 = s0.max(a);
            if b > a0 {
                acc += f(0.5 * (a0 + b)) * (b - a0);
            }
            a = b;
        }
        // constant extension past the last node
        if hi > *nodes.last().unwrap() {
            let a0 = a.max(*nodes.last().unwrap());
            if hi > a0 {
                acc += f(0.5 * (a0 + hi)) * (hi - a0);
            }
        }
        acc
    }

    fn kappa(&self, t: f64) -> f64 {
        // μ n_t / λ_t, the recurring envelope ratio
        self.envelope.mu * self.envelope.n_t.eval(t) / self.envelope.lambda_t.eval(t)
    }

    /// H_t = K (μ n_t / λ_t)^q.
    pub fn rate_h(&self, t: f64) -> f64 {
        self.constants.k * self.kappa(t).powf(self.constants.q)
    }

    /// Damping factor exp(-K* (μ n_t/λ_t)^{q*} μ^{2 q*}).
    fn star_factor(&self, t: f64) -> f64 {
        let c = &self.constants;
        (-c.k_star * self.kappa(t).powf(c.q_star) * self.envelope.mu.powf(2.0 * c.q_star)).exp()
    }

    /// Radius cap
    /// R_t*(φ) = exp(-K*(μn_t/λ_t)^{q*} μ^{2q*}) (h ∧ inf_δ δ/∫_t^{t+δ}|φ|²),
    /// the infimum running over a geometric grid of 64 δ values in
    /// (0, h ∧ (T-t)]. A control vanishing on the window leaves the h-term
    /// binding.
    pub fn radius_cap(&self, t: f64) -> f64 {
        let h = self.envelope.h;
        let t_end = self.horizon();
        let cap = h.min((t_end - t).max(0.0));
        let mut inf = f64::INFINITY;
        if cap > 0.0 && !self.control.is_zero() {
            for j in 0..64 {
                let delta = cap * 1e-6_f64.powf((63 - j) as f64 / 63.0);
                let energy_sq = self
                    .control
                    .sq_integral(t.min(t_end), (delta).min(t_end - t))
                    .unwrap_or(0.0);
                if energy_sq > 0.0 {
                    inf = inf.min(delta / energy_sq);
                }
            }
        }
        self.star_factor(t) * h.min(inf)
    }

    /// Exact integral of the grid density over [lo, hi] (breakpoint-refined
    /// quadrature, exact for the piecewise-constant data model).
    pub fn integrate_density(&self, mode: GridMode, lo: f64, hi: f64) -> f64 {
        self.integrate(lo, hi, |t| self.density(mode, t))
    }

    /// Grid density f_R (lower mode) or g_R (upper mode).
    pub fn density(&self, mode: GridMode, t: f64) -> f64 {
        let c = &self.constants;
        let lead = c.k1 * self.kappa(t).powf(c.q1);
        let phi_sq = self.control.sq_norm_at(t);
        let r = self.radius.eval(t);
        match mode {
            GridMode::Lower => lead * (1.0 / self.envelope.h + 1.0 / r + phi_sq),
            GridMode::Upper => lead * (self.star_factor(t) / r + phi_sq),
        }
    }

    /// The two-sided exponential bounds and the cap-free lower bound.
    pub fn tube_bounds(&self) -> Result<BoundsSummary> {
        let t_end = self.horizon();
        let h = self.envelope.h;
        let i_lower = self.integrate(0.0, t_end, |t| {
            self.rate_h(t) * (1.0 / self.radius.eval(t) + self.control.sq_norm_at(t))
        });
        let i_upper = self.integrate(0.0, t_end, |t| {
            (-self.rate_h(t)).exp() * (1.0 / self.radius.eval(t) + self.control.sq_norm_at(t))
        });
        let i_general = self.integrate(0.0, t_end, |t| {
            self.rate_h(t) * (1.0 / h + 1.0 / self.radius.eval(t) + self.control.sq_norm_at(t))
        });
        let mut r_star_margin = f64::INFINITY;
        let mut ordered = true;
        for t in self.sample_times() {
            r_star_margin = r_star_margin.min(self.radius_cap(t) - self.radius.eval(t));
            // H > W(1) = 0.567143 guarantees H >= e^{-H}, hence lower <= upper
            ordered &= self.rate_h(t) > 0.567143;
        }
        let summary = BoundsSummary {
            lower: (-i_lower).exp(),
            upper: (-i_upper).exp(),
            lower_general: (-i_general).exp(),
            r_star_ok: r_star_margin >= 0.0,
            r_star_margin,
            ordered,
        };
        debug_assert!(
            !summary.ordered || summary.lower <= summary.upper * (1.0 + 1e-12),
            "lower bound exceeded upper bound despite H_t > 0.567"
        );
        Ok(summary)
    }

    /// Solve ∫_t^{t+δ} density = μ^{-(2q1+1)} for δ by bracketing and
    /// bisection (relative tolerance 1e-12, well below the 1e-8 cell
    /// verification tolerance). Returns `None` when the integral cannot
    /// reach the threshold before T.
    pub fn cell_width(&self, mode: GridMode, t: f64) -> Option<f64> {
        let c = &self.constants;
        let tau = self.envelope.mu.powf(-(2.0 * c.q1 + 1.0));
        let t_end = self.horizon();
        let cap = self.envelope.h.min(t_end - t);
        if cap <= 0.0 {
            return None;
        }
        let g = |delta: f64| self.integrate(t, t + delta, |s| self.density(mode, s));
        if g(cap) < tau {
            return None;
        }
        let (mut lo, mut hi) = (0.0_f64, cap);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(mid) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-12 * hi.max(1e-300) {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Concatenation grid t_0 = 0, t_{k+1} = t_k + δ(t_k), generated until
    /// the horizon; a tail interval that cannot fill its threshold is
    /// truncated at T and flagged.
    pub fn time_grid(&self, mode: GridMode) -> Result<TimeGrid> {
        let t_end = self.horizon();
        let mut nodes = vec![0.0];
        let mut deltas = Vec::new();
        let mut truncated_tail = false;
        let mut guard = 0usize;
        loop {
            let t = *nodes.last().unwrap();
            if t >= t_end - 1e-12 {
                break;
            }
            guard += 1;
            if guard > 2_000_000 {
                return Err(TubeError::Domain(
                    "time grid did not terminate (density too small?)".into(),
                ));
            }
            match self.cell_width(mode, t) {
                Some(delta) => {
                    if delta > self.envelope.h * (1.0 + 1e-9) {
                        return Err(TubeError::Domain(format!(
                            "cell width {delta} exceeded h = {}",
                            self.envelope.h
                        )));
                    }
                    nodes.push((t + delta).min(t_end));
                    deltas.push(delta);
                }
                None => {
                    truncated_tail = true;
                    deltas.push(t_end - t);
                    nodes.push(t_end);
                }
            }
        }
        Ok(TimeGrid {
            mode,
            nodes,
            deltas,
            truncated_tail,
        })
    }

    /// Concatenation radii r_k = (λ_k/n_k)^{q2} / (K2 μ^{2q1+2q2+1}) at the
    /// grid nodes, plus the ratio check r_{k+1}/r_k <= μ^{2 q2}.
    pub fn concat_radii(&self, grid: &TimeGrid) -> RadiiReport {
        let c = &self.constants;
        let lead = 1.0 / (c.k2 * self.envelope.mu.powf(2.0 * c.q1 + 2.0 * c.q2 + 1.0));
        let r: Vec<f64> = grid
            .nodes
            .iter()
            .map(|t| {
                lead * (self.envelope.lambda_t.eval(*t) / self.envelope.n_t.eval(*t)).powf(c.q2)
            })
            .collect();
        let ratio_bound = self.envelope.mu.powf(2.0 * c.q2);
        let mut max_ratio = 0.0_f64;
        for w in r.windows(2) {
            max_ratio = max_ratio.max(w[1] / w[0]);
        }
        RadiiReport {
            radii: r,
            max_ratio,
            ratio_bound,
            ratio_ok: max_ratio <= ratio_bound * (1.0 + 1e-12),
        }
    }

    /// Per-node rows (t, H_t, R_t, R_t*, density, δ) for reports.
    pub fn report_rows(&self, grid: &TimeGrid) -> Vec<BoundRow> {
        grid.nodes
            .iter()
            .enumerate()
            .map(|(k, t)| BoundRow {
                t: *t,
                h_t: self.rate_h(*t),
                r_t: self.radius.eval(*t),
                r_star_t: self.radius_cap(*t),
                density: self.density(grid.mode, *t),
                delta: grid.deltas.get(k).copied().unwrap_or(0.0),
            })
            .collect()
    }

    /// Hypothesis (H3): R, |φ|², n, λ all belong to L(μ, h). The squared
    /// control of the zero control is in every class trivially.
    pub fn check_h3(&self) -> Result<H3Report> {
        let t_end = self.horizon();
        let h = self.envelope.h;
        let steps = ((t_end / h * 20.0).ceil() as usize).max(40);
        let times: Vec<f64> = (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect();
        let mu = self.envelope.mu;
        let sample = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { times.iter().map(|t| f(*t)).collect() };
        let radius = check_regularity_class(&times, &sample(&|t| self.radius.eval(t)), mu, h)?;
        let n_t = check_regularity_class(&times, &sample(&|t| self.envelope.n_t.eval(t)), mu, h)?;
        let lambda_t =
            check_regularity_class(&times, &sample(&|t| self.envelope.lambda_t.eval(t)), mu, h)?;
        let phi_sq_samples = sample(&|t| self.control.sq_norm_at(t));
        let control_sq = if phi_sq_samples.iter().all(|v| *v == 0.0) {
            RegularityReport {
                holds: true,
                worst_ratio: 1.0,
                witness: (0.0, 0.0),
            }
        } else if phi_sq_samples.contains(&0.0) {
            // a control active somewhere and zero elsewhere cannot satisfy
            // f(t) <= μ f(s) across the zero set
            let bad = times[phi_sq_samples.iter().position(|v| *v == 0.0).unwrap()];
            let good = times[phi_sq_samples.iter().position(|v| *v > 0.0).unwrap()];
            RegularityReport {
                holds: false,
                worst_ratio: f64::INFINITY,
                witness: (good, bad),
            }
        } else {
            check_regularity_class(&times, &phi_sq_samples, mu, h)?
        };
        Ok(H3Report {
            radius,
            control_sq,
            n_t,
            lambda_t,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RadiiReport {
    pub radii: Vec<f64>,
    pub max_ratio: f64,
    pub ratio_bound: f64,
    pub ratio_ok: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_ones_spec(t_end: f64, r: f64) -> TubeSpec {
        TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(r),
            BoundConstants::default(),
            Control::zero(1, t_end),
        )
        .unwrap()
    }

    fn custom_spec(k: f64, q: f64, mu: f64, n: f64, lam: f64) -> TubeSpec {
        TubeSpec::new(
            RegularityEnvelope::new(mu, 1.0, TimeFn::constant(n), TimeFn::constant(lam)).unwrap(),
            TimeFn::constant(0.5),
            BoundConstants {
                k,
                q,
                ..BoundConstants::default()
            },
            Control::zero(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn rate_h_examples() {
        // all-ones substitution with K = q = 1
        let spec = custom_spec(1.0, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(spec.rate_h(0.3), 1.0);
        // (2*3/0.5)^2 = 144
        let spec = custom_spec(1.0, 2.0, 2.0, 3.0, 0.5);
        assert!((spec.rate_h(0.0) - 144.0).abs() < 1e-10);
        // monotone in n_t
        let lo = custom_spec(1.5, 2.0, 1.2, 2.0, 0.7).rate_h(0.0);
        let hi = custom_spec(1.5, 2.0, 1.2, 2.5, 0.7).rate_h(0.0);
        assert!(hi > lo);
    }

    #[test]
    fn radius_cap_zero_control_binds_h_term() {
        // φ = 0, μ = n = λ = 1, h = 1: R* = e^{-K*}
        let spec = all_ones_spec(5.0, 0.5);
        let want = (-spec.constants.k_star).exp();
        assert!((spec.radius_cap(0.0) - want).abs() < 1e-12);
    }

    #[test]
    fn radius_cap_constant_energy_density() {
        // |φ|² = c: inf_δ δ/(cδ) = 1/c, so R* = e^{-K*(μn/λ)^{q*} μ^{2q*}} (h ∧ 1/c)
        let c_sq: f64 = 4.0; // |φ| = 2
        let spec = TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(0.1),
            BoundConstants::default(),
            Control::constant(1, 10.0, &[2.0]).unwrap(),
        )
        .unwrap();
        let want = (-spec.constants.k_star).exp() * (1.0_f64).min(1.0 / c_sq);
        assert!((spec.radius_cap(0.0) - want).abs() < 1e-9 * want);
        // the wedge bound R* <= h e^{-K*(μn/λ)^{q*}} always
        assert!(spec.radius_cap(0.0) <= 1.0 * (-spec.constants.k_star).exp() + 1e-15);
    }

    #[test]
    fn tube_bounds_closed_form_constants() {
        // constant data: lower = e^{-H T / R}, upper = e^{-e^{-H} T / R}
        let t_end = 2.0;
        let r = 0.25;
        let spec = all_ones_spec(t_end, r);
        let h = spec.rate_h(0.0);
        let s = spec.tube_bounds().unwrap();
        assert!((s.lower - (-h * t_end / r).exp()).abs() < 1e-12);
        assert!((s.upper - (-(-h).exp() * t_end / r).exp()).abs() < 1e-12);
        // lower_general has the extra T/h term
        let want = (-h * (t_end / 1.0 + t_end / r)).exp();
        assert!((s.lower_general - want).abs() < 1e-12);
        assert!(s.ordered && s.lower <= s.upper);
        assert!(s.lower_general <= s.lower);
    }

    #[test]
    fn doubling_horizon_squares_bounds() {
        let s1 = all_ones_spec(1.0, 0.2).tube_bounds().unwrap();
        let s2 = all_ones_spec(2.0, 0.2).tube_bounds().unwrap();
        assert!((s2.lower - s1.lower * s1.lower).abs() < 1e-12);
        assert!((s2.upper - s1.upper * s1.upper).abs() < 1e-12);
    }

    #[test]
    fn bm_bounds_are_exp_minus_c_t_over_r() {
        // for the all-ones envelope both bounds are exp(-c T/R) with
        // c = K (lower) and c = e^{-K} (upper)
        for (t_end, r) in [(1.0, 0.5), (0.5, 0.1), (2.0, 0.8)] {
            let s = all_ones_spec(t_end, r).tube_bounds().unwrap();
            let k = BoundConstants::default().k;
            assert!((s.lower.ln() + k * t_end / r).abs() < 1e-9);
            assert!((s.upper.ln() + (-k).exp() * t_end / r).abs() < 1e-9);
        }
    }

    #[test]
    fn r_star_flag_reports_violation() {
        // huge constant radius vs tiny cap: flagged but still computed
        let spec = all_ones_spec(1.0, 0.9);
        let s = spec.tube_bounds().unwrap();
        assert!(!s.r_star_ok);
        assert!(s.r_star_margin < 0.0);
        assert!(s.lower > 0.0 && s.upper <= 1.0);
    }

    #[test]
    fn constant_density_gives_uniform_grid() {
        let spec = all_ones_spec(1.0, 0.2);
        // f_R = K1 (1/h + 1/R) = 2 (1 + 5) = 12, τ = 1 → δ = 1/12
        let grid = spec.time_grid(GridMode::Lower).unwrap();
        let expect = 1.0 / 12.0;
        for (k, d) in grid.deltas.iter().enumerate() {
            if k + 1 < grid.deltas.len() || !grid.truncated_tail {
                assert!((d - expect).abs() < 1e-9, "cell {k}: {d}");
            }
        }
        // defining property on interior cells
        for k in 0..grid.full_cells() {
            let integral = spec.integrate(grid.nodes[k], grid.nodes[k + 1], |t| {
                spec.density(GridMode::Lower, t)
            });
            assert!((integral - 1.0).abs() < 1e-8);
        }
        assert!(grid.deltas.iter().all(|d| *d <= spec.envelope.h + 1e-12));
    }

    #[test]
    fn grid_rdelta_and_energy_inequalities() {
        // non-constant radius and control, mu > 1
        let envelope = RegularityEnvelope::new(
            1.4,
            1.0,
            TimeFn::constant(1.0),
            TimeFn::constant(1.0),
        )
        .unwrap();
        let radius = TimeFn::table(vec![0.0, 0.5], vec![0.2, 0.15]).unwrap();
        let control = Control::piecewise(1, 1.0, &[vec![1.0], vec![0.9]]).unwrap();
        let spec = TubeSpec::new(envelope, radius, BoundConstants::default(), control).unwrap();
        assert!(spec.check_h3().unwrap().holds());
        let grid = spec.time_grid(GridMode::Lower).unwrap();
        assert!(grid.full_cells() > 3);
        let c = &spec.constants;
        for k in 0..grid.full_cells() {
            let t = grid.nodes[k];
            let delta = grid.deltas[k];
            // cell-width bound: δ(t) <= R_t (λ/(μ n))^{q1} / K1
            let kappa_inv = spec.envelope.lambda_t.eval(t)
                / (spec.envelope.mu * spec.envelope.n_t.eval(t));
            assert!(delta <= spec.radius.eval(t) * kappa_inv.powf(c.q1) / c.k1 + 1e-10);
            // (energy): ε_t(δ)² <= (λ/(μn))^{q1} / K1
            let eps_sq = spec.control.sq_integral(t, delta.min(1.0 - t)).unwrap();
            assert!(eps_sq <= kappa_inv.powf(c.q1) / c.k1 + 1e-10);
            // cell integral threshold
            let tau = spec.envelope.mu.powf(-(2.0 * c.q1 + 1.0));
            let integral =
                spec.integrate(t, grid.nodes[k + 1], |s| spec.density(GridMode::Lower, s));
            assert!((integral - tau).abs() <= 1e-8);
        }
        // N(T) satisfies ∫_0^T f_R >= N(T) / μ^{2q1+1}
        let total = spec.integrate(0.0, 1.0, |t| spec.density(GridMode::Lower, t));
        let tau = spec.envelope.mu.powf(-(2.0 * c.q1 + 1.0));
        assert!(total >= grid.full_cells() as f64 * tau - 1e-9);
    }

    #[test]
    fn delta_fn_is_in_regularity_class() {
        // δ(·) ∈ L(μ^{4q1+2}, h)
        let envelope =
            RegularityEnvelope::new(1.4, 1.0, TimeFn::constant(1.0), TimeFn::constant(1.0))
                .unwrap();
        let radius = TimeFn::table(vec![0.0, 0.5], vec![0.2, 0.15]).unwrap();
        let control = Control::piecewise(1, 1.0, &[vec![1.0], vec![0.9]]).unwrap();
        let spec = TubeSpec::new(envelope, radius, BoundConstants::default(), control).unwrap();
        let c = &spec.constants;
        let h = spec.envelope.h;
        let steps = 220;
        let mut times = Vec::new();
        let mut vals = Vec::new();
        for k in 0..=steps {
            // sample only where a full cell fits
            let t = 0.85 * k as f64 / steps as f64;
            if let Some(d) = spec.cell_width(GridMode::Lower, t) {
                times.push(t);
                vals.push(d);
            }
        }
        let mu_class = spec.envelope.mu.powf(4.0 * c.q1 + 2.0);
        let rep = check_regularity_class(&times, &vals, mu_class, h).unwrap();
        assert!(rep.holds, "delta(.) left L(mu^(4q1+2), h): {rep:?}");
    }

    #[test]
    fn upper_mode_grid_and_rdelta2() {
        let envelope =
            RegularityEnvelope::new(1.4, 1.0, TimeFn::constant(1.0), TimeFn::constant(1.0))
                .unwrap();
        let radius = TimeFn::table(vec![0.0, 0.5], vec![0.2, 0.15]).unwrap();
        let control = Control::piecewise(1, 1.0, &[vec![1.0], vec![0.9]]).unwrap();
        let spec = TubeSpec::new(envelope, radius, BoundConstants::default(), control).unwrap();
        // hypothesis R <= R* holds here
        assert!(spec.tube_bounds().unwrap().r_star_ok);
        let grid = spec.time_grid(GridMode::Upper).unwrap();
        let c = &spec.constants;
        for k in 0..grid.full_cells() {
            let t = grid.nodes[k];
            let delta = grid.deltas[k];
            assert!(delta <= spec.envelope.h + 1e-12);
            // upper-mode width bound: R_t/δ(t) <= 2 μ^{4q1+2} K1 (μn/λ)^{q1} e^{-K*(μn/λ)^{q*}}
            let kap = spec.envelope.mu * spec.envelope.n_t.eval(t) / spec.envelope.lambda_t.eval(t);
            let rhs = 2.0
                * spec.envelope.mu.powf(4.0 * c.q1 + 2.0)
                * c.k1
                * kap.powf(c.q1)
                * (-c.k_star * kap.powf(c.q_star)).exp();
            assert!(spec.radius.eval(t) / delta <= rhs * (1.0 + 1e-9));
        }
    }

    #[test]
    fn concat_radii_examples() {
        // all-ones envelope with K2 = 1: r_k = μ^{-(2q1+2q2+1)} = 1
        let spec = TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(0.2),
            BoundConstants {
                k2: 1.0,
                ..BoundConstants::default()
            },
            Control::zero(1, 1.0),
        )
        .unwrap();
        let grid = spec.time_grid(GridMode::Lower).unwrap();
        let rep = spec.concat_radii(&grid);
        for r in &rep.radii {
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!(rep.ratio_ok);
        assert!((rep.max_ratio - 1.0).abs() < 1e-12);
        assert!((rep.ratio_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grushin_envelope_radii_constant() {
        // time-homogeneous envelope ⇒ r_k constant in k
        let spec = TubeSpec::new(
            RegularityEnvelope::new(1.0, 1.0, TimeFn::constant(3.0), TimeFn::constant(1.0))
                .unwrap(),
            TimeFn::constant(0.1),
            BoundConstants::default(),
            Control::zero(2, 1.0),
        )
        .unwrap();
        let grid = spec.time_grid(GridMode::Lower).unwrap();
        let rep = spec.concat_radii(&grid);
        let first = rep.radii[0];
        assert!(rep.radii.iter().all(|r| (r - first).abs() < 1e-14));
        let c = &spec.constants;
        assert!((first - (1.0 / 3.0_f64).powf(c.q2) / c.k2).abs() < 1e-12);
    }

    #[test]
    fn truncated_tail_is_flagged() {
        // short horizon: the single cell cannot absorb the threshold
        let spec = TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(1.0),
            BoundConstants::default(),
            Control::zero(1, 0.01),
        )
        .unwrap();
        let grid = spec.time_grid(GridMode::Lower).unwrap();
        assert!(grid.truncated_tail);
        assert_eq!(*grid.nodes.last().unwrap(), 0.01);
    }

    #[test]
    fn h3_detects_violations() {
        // radius jumping by 3 with mu = 2 fails (H3)
        let spec = TubeSpec::new(
            RegularityEnvelope::new(2.0, 1.0, TimeFn::constant(1.0), TimeFn::constant(1.0))
                .unwrap(),
            TimeFn::table(vec![0.0, 0.5], vec![0.3, 0.9]).unwrap(),
            BoundConstants::default(),
            Control::zero(1, 1.0),
        )
        .unwrap();
        let rep = spec.check_h3().unwrap();
        assert!(!rep.radius.holds);
        assert!(!rep.holds());
        // an on/off control also fails
        let spec = TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(0.5),
            BoundConstants::default(),
            Control::piecewise(1, 1.0, &[vec![1.0], vec![0.0]]).unwrap(),
        )
        .unwrap();
        assert!(!spec.check_h3().unwrap().control_sq.holds);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(BoundConstants {
            k: -1.0,
            ..BoundConstants::default()
        }
        .validate()
        .is_err());
        assert!(TubeSpec::new(
            RegularityEnvelope::all_ones(),
            TimeFn::constant(1.5),
            BoundConstants::default(),
            Control::zero(1, 1.0),
        )
        .is_err());
    }
}
