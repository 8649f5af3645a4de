//! Controls, the skeleton ODE, control energies and the L(μ,h) class.

use crate::error::{Result, TubeError};
use crate::fields::FieldSet;

/// Piecewise-constant control φ on a uniform grid over `[0, horizon]`.
///
/// Arbitrary L² controls are approximated by refinement; keeping the pieces
/// constant makes energies exact and runs reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    horizon: f64,
    d: usize,
    pieces: usize,
    /// pieces × d, row-major.
    values: Vec<f64>,
}

impl Control {
    pub fn zero(d: usize, horizon: f64) -> Self {
        Control {
            horizon,
            d,
            pieces: 1,
            values: vec![0.0; d],
        }
    }

    pub fn constant(d: usize, horizon: f64, value: &[f64]) -> Result<Self> {
        Control::piecewise(d, horizon, std::slice::from_ref(&value.to_vec()))
    }

    pub fn piecewise(d: usize, horizon: f64, rows: &[Vec<f64>]) -> Result<Self> {
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(TubeError::Domain(format!("bad control horizon {horizon}")));
        }
        if rows.is_empty() {
            return Err(TubeError::Domain("control needs at least one piece".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(TubeError::Domain(format!(
                    "control piece has {} components, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(TubeError::Domain("non-finite control value".into()));
            }
            values.extend_from_slice(row);
        }
        Ok(Control {
            horizon,
            d,
            pieces: rows.len(),
            values,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pieces(&self) -> usize {
        self.pieces
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    fn piece_of(&self, t: f64) -> usize {
        let w = self.horizon / self.pieces as f64;
        ((t / w) as usize).min(self.pieces - 1)
    }

    /// φ_t (right-continuous; the last piece is closed at the horizon, and
    /// the value extends constantly past it).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let k = if t <= 0.0 { 0 } else { self.piece_of(t) };
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// |φ_t|².
    pub fn sq_norm_at(&self, t: f64) -> f64 {
        self.value_at(t).iter().map(|v| v * v).sum()
    }

    /// Piece boundaries 0 = b_0 < … < b_P = horizon.
    pub fn breakpoints(&self) -> Vec<f64> {
        let w = self.horizon / self.pieces as f64;
        (0..=self.pieces).map(|k| k as f64 * w).collect()
    }

    /// Exact ∫_t^{t+delta} |φ_s|² ds over the piecewise-constant control.
    pub fn sq_integral(&self, t: f64, delta: f64) -> Result<f64> {
        if delta < 0.0 {
            return Err(TubeError::Domain("negative interval length".into()));
        }
        if t < -1e-12 || t + delta > self.horizon * (1.0 + 1e-12) + 1e-12 {
            return Err(TubeError::Domain(format!(
                "energy interval [{t}, {}] outside [0, {}]",
                t + delta,
                self.horizon
            )));
        }
        let w = self.horizon / self.pieces as f64;
        let start = t.max(0.0);
        let end = (t + delta).min(self.horizon);
        let k0 = ((start / w) as usize).min(self.pieces.saturating_sub(1));
        let mut acc = 0.0;
        for k in k0..self.pieces {
            let p_lo = k as f64 * w;
            let p_hi = if k + 1 == self.pieces {
                self.horizon
            } else {
                (k + 1) as f64 * w
            };
            let lo = start.max(p_lo);
            let hi = end.min(p_hi);
            if hi > lo {
                let sq: f64 = self.values[k * self.d..(k + 1) * self.d]
                    .iter()
                    .map(|v| v * v)
                    .sum();
                acc += sq * (hi - lo);
            }
            if p_hi >= end {
                break;
            }
        }
        Ok(acc)
    }

    /// Control energy ε_t(δ) = (∫_t^{t+δ} |φ_s|² ds)^{1/2}.
    pub fn energy(&self, t: f64, delta: f64) -> Result<f64> {
        Ok(self.sq_integral(t, delta)?.sqrt())
    }

    /// Refine to `pieces` uniform pieces (values repeated), for optimizer
    /// homotopy. `pieces` must be a multiple of the current count.
    pub fn refined(&self, pieces: usize) -> Control {
        assert!(pieces % self.pieces == 0);
        let rep = pieces / self.pieces;
        let mut values = Vec::with_capacity(pieces * self.d);
        for k in 0..self.pieces {
            for _ in 0..rep {
                values.extend_from_slice(&self.values[k * self.d..(k + 1) * self.d]);
            }
        }
        Control {
            horizon: self.horizon,
            d: self.d,
            pieces,
            values,
        }
    }

    /// Time-reversed, negated control: steers the flow backwards.
    pub fn reversed_negated(&self) -> Control {
        let mut values = Vec::with_capacity(self.values.len());
        for k in (0..self.pieces).rev() {
            for v in &self.values[k * self.d..(k + 1) * self.d] {
                values.push(-v);
            }
        }
        Control {
            horizon: self.horizon,
            d: self.d,
            pieces: self.pieces,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Squared L² norm ∫_0^T |φ|² dt.
    pub fn sq_l2(&self) -> f64 {
        let w = self.horizon / self.pieces as f64;
        self.values
            .chunks(self.d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>() * w)
            .sum()
    }
}

/// Integrated skeleton path: grid times, states and a piecewise-linear
/// accessor.
#[derive(Debug, Clone)]
pub struct Skeleton {
    times: Vec<f64>,
    /// len(times) × n, row-major.
    states: Vec<f64>,
    n: usize,
}

impl Skeleton {
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn end_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// x_t by piecewise-linear interpolation between stored states.
    pub fn state_at(&self, t: f64, out: &mut [f64]) {
        let times = &self.times;
        if t <= times[0] {
            out.copy_from_slice(self.state(0));
            return;
        }
        if t >= *times.last().unwrap() {
            out.copy_from_slice(self.end_state());
            return;
        }
        let mut hi = times.partition_point(|v| *v <= t);
        hi = hi.clamp(1, times.len() - 1);
        let lo = hi - 1;
        let span = times[hi] - times[lo];
        let w = if span > 0.0 { (t - times[lo]) / span } else { 0.0 };
        let a = self.state(lo);
        let b = self.state(hi);
        for i in 0..self.n {
            out[i] = a[i] + w * (b[i] - a[i]);
        }
    }
}

/// Integrate the skeleton ODE
/// `dx_t = Σ_j σ_j(t,x_t) φ_t^j dt + b(t,x_t) dt`
/// with classical RK4 on a grid refining the control's breakpoints; `steps`
/// is the total step budget spread over the pieces.
pub fn integrate_skeleton(
    fs: &FieldSet,
    ctrl: &Control,
    x0: &[f64],
    steps: usize,
) -> Result<Skeleton> {
    if steps < 1 {
        return Err(TubeError::Domain("steps must be >= 1".into()));
    }
    if x0.len() != fs.dim_state() {
        return Err(TubeError::Domain("x0 has wrong dimension".into()));
    }
    if ctrl.dim() != fs.dim_noise() {
        return Err(TubeError::Domain("control dimension != noise dimension".into()));
    }
    let n = fs.dim_state();
    let horizon = ctrl.horizon();
    let mut times = Vec::with_capacity(steps + ctrl.pieces() + 1);
    let mut states = Vec::with_capacity((steps + ctrl.pieces() + 1) * n);
    times.push(0.0);
    states.extend_from_slice(x0);

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut sig = vec![0.0; n];

    let bp = ctrl.breakpoints();
    for piece in 0..ctrl.pieces() {
        let (t0, t1) = (bp[piece], bp[piece + 1]);
        let phi = ctrl.value_at(0.5 * (t0 + t1)).to_vec();
        let frac = (t1 - t0) / horizon;
        let sub = ((steps as f64 * frac).round() as usize).max(1);
        let dt = (t1 - t0) / sub as f64;
        for s in 0..sub {
            let t = t0 + s as f64 * dt;
            let mut rhs = |tt: f64, xx: &[f64], out: &mut [f64]| -> Result<()> {
                fs.drift_into(tt, xx, out)?;
                for (j, pj) in phi.iter().enumerate() {
                    if *pj != 0.0 {
                        fs.sigma_into(j, tt, xx, &mut sig)?;
                        for i in 0..n {
                            out[i] += sig[i] * pj;
                        }
                    }
                }
                Ok(())
            };
            rhs(t, &x, &mut k1)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * dt * k1[i];
            }
            rhs(t + 0.5 * dt, &tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * dt * k2[i];
            }
            rhs(t + 0.5 * dt, &tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = x[i] + dt * k3[i];
            }
            rhs(t + dt, &tmp, &mut k4)?;
            for i in 0..n {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let t_next = t + dt;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(TubeError::SkeletonBlowUp { t: t_next });
            }
            times.push(t_next);
            states.extend_from_slice(&x);
        }
    }
    Ok(Skeleton { times, states, n })
}

/// Result of an L(μ,h) membership check.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub holds: bool,
    /// max over sampled pairs with |t - s| <= h of f(t)/f(s).
    pub worst_ratio: f64,
    /// argmax pair (t, s).
    pub witness: (f64, f64),
}

/// Check `f ∈ L(μ,h)`, i.e. `f(t) ≤ μ f(s)` whenever `|t-s| ≤ h`, on a
/// sampled table. The grid must be finer than `h/10`.
pub fn check_regularity_class(
    times: &[f64],
    values: &[f64],
    mu: f64,
    h: f64,
) -> Result<RegularityReport> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(TubeError::Domain("regularity check needs a table".into()));
    }
    if mu < 1.0 || !(h > 0.0) {
        return Err(TubeError::Domain(format!("need mu >= 1 and h > 0 (mu={mu}, h={h})")));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(TubeError::Domain("non-positive samples in regularity check".into()));
    }
    let max_gap = times.windows(2).map(|w| w[1] - w[0]).fold(0.0_f64, f64::max);
    if max_gap > h / 10.0 + 1e-12 {
        return Err(TubeError::Domain(format!(
            "sample grid spacing {max_gap} coarser than h/10 = {}",
            h / 10.0
        )));
    }
    let mut worst = 0.0_f64;
    let mut witness = (times[0], times[0]);
    for i in 0..times.len() {
        for j in i..times.len() {
            if times[j] - times[i] > h {
                break;
            }
            let r = values[i] / values[j];
            let r = r.max(1.0 / r);
            if r > worst {
                worst = r;
                witness = if values[i] >= values[j] {
                    (times[i], times[j])
                } else {
                    (times[j], times[i])
                };
            }
        }
    }
    Ok(RegularityReport {
        holds: worst <= mu,
        worst_ratio: worst,
        witness,
    })
}

/// Positive function of time: a constant or a piecewise-constant table
/// (left-closed pieces, constant extension outside the table).
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFn {
    Const(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl TimeFn {
    pub fn constant(v: f64) -> Self {
        TimeFn::Const(v)
    }

    /// Piecewise-constant table: value `values[k]` on `[times[k], times[k+1])`.
    pub fn table(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(TubeError::Domain("table needs matching times/values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TubeError::Domain("table times must increase".into()));
        }
        Ok(TimeFn::Table { times, values })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Const(v) => *v,
            TimeFn::Table { times, values } => {
                let k = times.partition_point(|v| *v <= t);
                if k == 0 {
                    values[0]
                } else {
                    values[k - 1]
                }
            }
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            TimeFn::Const(_) => Vec::new(),
            TimeFn::Table { times, .. } => times.clone(),
        }
    }

    pub fn min_on(&self, lo: f64, hi: f64) -> f64 {
        match self {
            TimeFn::Const(v) => *v,
            TimeFn::Table { .. } => {
                let mut m = f64::INFINITY;
                let mut pts = vec![lo, hi];
                for b in self.breakpoints() {
                    if b > lo && b < hi {
                        pts.push(b);
                    }
                }
                for p in pts {
                    m = m.min(self.eval(p));
                }
                m
            }
        }
    }
}

/// Envelope data (μ, h, n_t, λ_t) bounding the fields along a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityEnvelope {
    pub mu: f64,
    pub h: f64,
    pub n_t: TimeFn,
    pub lambda_t: TimeFn,
}

impl RegularityEnvelope {
    pub fn new(mu: f64, h: f64, n_t: TimeFn, lambda_t: TimeFn) -> Result<Self> {
        if mu < 1.0 {
            return Err(TubeError::Domain(format!("mu must be >= 1, got {mu}")));
        }
        if !(h > 0.0 && h <= 1.0) {
            return Err(TubeError::Domain(format!("h must lie in (0,1], got {h}")));
        }
        let env = RegularityEnvelope { mu, h, n_t, lambda_t };
        for t in [0.0, 0.31, 0.77, 1.0, 2.5] {
            let n = env.n_t.eval(t);
            let l = env.lambda_t.eval(t);
            if !(n >= 1.0) {
                return Err(TubeError::Domain(format!("n_t must be >= 1 (n({t}) = {n})")));
            }
            if !(l > 0.0 && l <= 1.0) {
                return Err(TubeError::Domain(format!(
                    "lambda_t must lie in (0,1] (lambda({t}) = {l})"
                )));
            }
        }
        Ok(env)
    }

    pub fn all_ones() -> Self {
        RegularityEnvelope {
            mu: 1.0,
            h: 1.0,
            n_t: TimeFn::constant(1.0),
            lambda_t: TimeFn::constant(1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn zero_control_keeps_driftless_skeleton_fixed() {
        let fs = models::grushin().unwrap();
        let ctrl = Control::zero(2, 1.0);
        let sk = integrate_skeleton(&fs, &ctrl, &[0.3, -0.7], 64).unwrap();
        for k in 0..sk.len() {
            assert_eq!(sk.state(k), &[0.3, -0.7]);
        }
    }

    #[test]
    fn constant_control_identity_fields_is_linear_motion() {
        let fs = models::constant_identity(2).unwrap();
        let ctrl = Control::constant(2, 1.0, &[0.7, -0.2]).unwrap();
        let sk = integrate_skeleton(&fs, &ctrl, &[1.0, 2.0], 50).unwrap();
        for k in 0..sk.len() {
            let t = sk.times()[k];
            let s = sk.state(k);
            assert!((s[0] - (1.0 + 0.7 * t)).abs() < 1e-12);
            assert!((s[1] - (2.0 - 0.2 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn grushin_closed_form_skeletons() {
        let fs = models::grushin().unwrap();
        // phi = (1,0): x_t = (t, 0)
        let sk = integrate_skeleton(&fs, &Control::constant(2, 1.0, &[1.0, 0.0]).unwrap(), &[0.0, 0.0], 40)
            .unwrap();
        for k in 0..sk.len() {
            let t = sk.times()[k];
            assert!((sk.state(k)[0] - t).abs() < 1e-12);
            assert!(sk.state(k)[1].abs() < 1e-12);
        }
        // phi = (0,1): sigma_2 vanishes on x1 = 0, so the path stays put
        let sk = integrate_skeleton(&fs, &Control::constant(2, 1.0, &[0.0, 1.0]).unwrap(), &[0.0, 0.0], 40)
            .unwrap();
        assert_eq!(sk.end_state(), &[0.0, 0.0]);
    }

    #[test]
    fn rk4_convergence_order_on_nonpolynomial_model() {
        // sigma_2 = (0, sin(x1)), phi = (1,1): x(t) = (t, 1 - cos t)
        let fs = crate::fields::FieldSet::from_dsl_strs(
            2,
            2,
            &[vec!["1", "0"], vec!["0", "sin(x1)"]],
            &["0", "0"],
        )
        .unwrap();
        let ctrl = Control::constant(2, 1.0, &[1.0, 1.0]).unwrap();
        let exact = 1.0 - 1.0_f64.cos();
        let err = |steps: usize| -> f64 {
            let sk = integrate_skeleton(&fs, &ctrl, &[0.0, 0.0], steps).unwrap();
            (sk.end_state()[1] - exact).abs()
        };
        let e1 = err(8);
        let e2 = err(16);
        let e3 = err(32);
        let order12 = (e1 / e2).log2();
        let order23 = (e2 / e3).log2();
        assert!(order12 >= 3.5, "observed order {order12}");
        assert!(order23 >= 3.5, "observed order {order23}");
    }

    #[test]
    fn control_energy_examples() {
        let zero = Control::zero(2, 1.0);
        assert_eq!(zero.energy(0.2, 0.5).unwrap(), 0.0);

        let c = Control::constant(2, 1.0, &[0.6, 0.8]).unwrap(); // |phi| = 1
        for (t, delta) in [(0.0, 1.0), (0.25, 0.5), (0.9, 0.1)] {
            assert!((c.energy(t, delta).unwrap() - delta.sqrt()).abs() < 1e-14);
        }

        // |phi|^2 = 1 on [0, 1/2), 4 on [1/2, 1]: energy over [0,1] = sqrt(2.5)
        let two = Control::piecewise(1, 1.0, &[vec![1.0], vec![2.0]]).unwrap();
        assert!((two.energy(0.0, 1.0).unwrap() - 2.5_f64.sqrt()).abs() < 1e-14);
        assert!((two.energy(0.25, 0.5).unwrap() - (0.25_f64 + 1.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn energy_outside_horizon_is_error() {
        let c = Control::zero(1, 1.0);
        assert!(c.energy(0.8, 0.4).is_err());
        assert!(c.energy(-0.1, 0.2).is_err());
    }

    #[test]
    fn regularity_class_examples() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        // constant f: holds with mu = 1, worst ratio 1
        let rep = check_regularity_class(&times, &vec![2.5; 101], 1.0, 0.5).unwrap();
        assert!(rep.holds);
        assert!((rep.worst_ratio - 1.0).abs() < 1e-14);

        // f = e^t on [0,1], h = 0.5: worst ratio e^{0.5}
        let values: Vec<f64> = times.iter().map(|t| t.exp()).collect();
        let rep = check_regularity_class(&times, &values, 2.0, 0.5).unwrap();
        assert!(rep.holds);
        assert!((rep.worst_ratio - 0.5_f64.exp()).abs() < 1e-9, "{}", rep.worst_ratio);
        let rep = check_regularity_class(&times, &values, 1.6, 0.5).unwrap();
        assert!(!rep.holds, "mu below e^0.5 must fail");

        // jump by factor 3 vs mu = 2: fails, witness straddles the jump
        let values: Vec<f64> = times.iter().map(|t| if *t < 0.5 { 1.0 } else { 3.0 }).collect();
        let rep = check_regularity_class(&times, &values, 2.0, 0.3).unwrap();
        assert!(!rep.holds);
        assert!((rep.worst_ratio - 3.0).abs() < 1e-14);
        let (a, b) = rep.witness;
        assert!(a >= 0.5 && b < 0.5 && (a - b) <= 0.3 + 1e-12);
    }

    #[test]
    fn regularity_class_rejects_bad_input() {
        let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        // grid coarser than h/10
        assert!(check_regularity_class(&times, &[1.0; 11], 2.0, 0.5).is_err());
        // non-positive samples
        let fine: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let mut vals = vec![1.0; 201];
        vals[7] = 0.0;
        assert!(check_regularity_class(&fine, &vals, 2.0, 0.5).is_err());
    }

    #[test]
    fn timefn_table_semantics() {
        let f = TimeFn::table(vec![0.0, 0.5], vec![2.0, 3.0]).unwrap();
        assert_eq!(f.eval(0.0), 2.0);
        assert_eq!(f.eval(0.49), 2.0);
        assert_eq!(f.eval(0.5), 3.0);
        assert_eq!(f.eval(9.0), 3.0);
        assert_eq!(f.min_on(0.0, 1.0), 2.0);
    }

    #[test]
    fn skeleton_interpolation_is_piecewise_linear() {
        let fs = models::constant_identity(1).unwrap();
        let ctrl = Control::constant(1, 1.0, &[2.0]).unwrap();
        let sk = integrate_skeleton(&fs, &ctrl, &[0.0], 10).unwrap();
        let mut out = [0.0];
        sk.state_at(0.55, &mut out);
        assert!((out[0] - 1.1).abs() < 1e-12);
        sk.state_at(-1.0, &mut out);
        assert_eq!(out[0], 0.0);
        sk.state_at(7.0, &mut out);
        assert!((out[0] - 2.0).abs() < 1e-12);
    }

    // Drifted-start control deviation stays bounded in the A_delta norm:
    // sup_{s<=delta} |x_{t+s} - (x_t + b s)|_{A_delta(t,x_t)} / (eps_t(delta) v sqrt(delta))
    // must not grow as delta halves.
    #[test]
    fn skeleton_deviation_ratio_stays_bounded() {
        for (fs, d, x0) in [
            (models::grushin().unwrap(), 2, vec![0.1, 0.0]),
            (models::heisenberg().unwrap(), 2, vec![0.0, 0.0, 0.0]),
        ] {
            let ctrl = Control::piecewise(d, 1.0, &[vec![0.8; d], vec![0.3; d]]).unwrap();
            let sk = integrate_skeleton(&fs, &ctrl, &x0, 4096).unwrap();
            let t = 0.25;
            let mut xt = vec![0.0; fs.dim_state()];
            sk.state_at(t, &mut xt);
            let mut prev_ratio: Option<f64> = None;
            let mut delta = 1e-2;
            while delta >= 1e-4 {
                let frame = crate::geometry::assemble_frame(&fs, t, &xt)
                    .unwrap()
                    .scaled(delta)
                    .unwrap();
                let eps = ctrl.energy(t, delta).unwrap();
                let denom = eps.max(delta.sqrt());
                let mut sup = 0.0_f64;
                let mut xs = vec![0.0; fs.dim_state()];
                for k in 0..=64 {
                    let s = delta * k as f64 / 64.0;
                    sk.state_at(t + s, &mut xs);
                    let diff: Vec<f64> = xs.iter().zip(&xt).map(|(a, b)| a - b).collect();
                    sup = sup.max(frame.norm(&diff).unwrap());
                }
                let ratio = sup / denom;
                if let Some(prev) = prev_ratio {
                    if delta < 1e-3 {
                        assert!(
                            ratio <= prev * 1.10,
                            "deviation ratio grew more than 10% per halving: {prev} -> {ratio}"
                        );
                    }
                }
                prev_ratio = Some(ratio);
                delta *= 0.5;
            }
        }
    }

    // Factor-4 norm stability along the skeleton, (s,y) = (t+s, x_{t+s}).
    #[test]
    fn norm_stable_along_skeleton() {
        let fs = models::heisenberg().unwrap();
        let ctrl = Control::constant(2, 1.0, &[0.5, -0.3]).unwrap();
        let sk = integrate_skeleton(&fs, &ctrl, &[0.0; 3], 2048).unwrap();
        let t = 0.3;
        let mut xt = vec![0.0; 3];
        sk.state_at(t, &mut xt);
        let delta = 2e-3;
        let fa = crate::geometry::assemble_frame(&fs, t, &xt).unwrap().scaled(delta).unwrap();
        let mut xs = vec![0.0; 3];
        for k in 1..=8 {
            let s = delta * k as f64 / 8.0;
            sk.state_at(t + s, &mut xs);
            let fb = crate::geometry::assemble_frame(&fs, t + s, &xs)
                .unwrap()
                .scaled(delta)
                .unwrap();
            for z in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.3, -0.4, 1.0]] {
                let qa = fa.norm_sq(&z).unwrap();
                let qb = fb.norm_sq(&z).unwrap();
                assert!(qb <= 4.0 * qa && qb >= qa / 4.0);
            }
        }
    }
}
