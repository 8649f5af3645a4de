//! Vector fields with enough derivative information for Lie brackets, Itô
//! corrections and local derivative bounds.
//!
//! A [`FieldSet`] holds the diffusion fields `σ_1..σ_d`, the drift `b`, and
//! evaluators for their space derivatives up to order four plus one time
//! derivative. Fields defined through the expression DSL differentiate
//! exactly; user-supplied closures fall back to central finite differences
//! with step `1e-5 · max(1, |x|)` for first order (wider steps for higher
//! orders, where the optimal step grows with the order).

use crate::error::{Result, TubeError};
use crate::exprdsl::{parse_expr, Expr, Var};
use crate::linalg::Mat;

/// Evaluator writing an n-vector into `out`.
pub type FieldFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

pub struct FieldSet {
    n: usize,
    d: usize,
    repr: Repr,
}

enum Repr {
    Dsl(DslFields),
    Closure(ClosureFields),
}

struct DslFields {
    /// d × n component expressions.
    sigma: Vec<Vec<Expr>>,
    drift: Vec<Expr>,
    /// jac_sigma[j][k][i] = ∂_{x_{i+1}} σ_j^{k+1}
    jac_sigma: Vec<Vec<Vec<Expr>>>,
    jac_drift: Vec<Vec<Expr>>,
    /// Effective Itô drift b + (1/2) Σ_l ∂_{σ_l} σ_l, folded symbolically.
    ito_drift: Vec<Expr>,
    ito_drift_zero: bool,
    /// Per field (σ_1..σ_d then b), per derivative multiset: the component
    /// expressions of ∂^α F and ∂_t ∂^α F, with the ordered-tuple
    /// multiplicity of the multiset.
    deriv_tables: Vec<Vec<DerivEntry>>,
}

struct DerivEntry {
    multiplicity: f64,
    space: Vec<Expr>,
    time: Vec<Expr>,
    space_live: bool,
    time_live: bool,
}

struct ClosureFields {
    sigma: Vec<FieldFn>,
    drift: FieldFn,
}

impl FieldSet {
    /// Build a field set from DSL expressions: `sigma[j]` has `n` component
    /// expressions for the field `σ_{j+1}`, `drift` has `n` components.
    pub fn from_dsl(n: usize, d: usize, sigma: Vec<Vec<Expr>>, drift: Vec<Expr>) -> Result<Self> {
        if n < 1 || d < 1 {
            return Err(TubeError::Domain(format!(
                "dimensions must be >= 1 (got n={n}, d={d})"
            )));
        }
        if sigma.len() != d || sigma.iter().any(|s| s.len() != n) || drift.len() != n {
            return Err(TubeError::Domain(
                "field/drift component counts do not match (n, d)".into(),
            ));
        }
        let jac = |comps: &[Expr]| -> Vec<Vec<Expr>> {
            comps
                .iter()
                .map(|c| (0..n).map(|i| c.differentiate(Var::State(i))).collect())
                .collect()
        };
        let jac_sigma: Vec<Vec<Vec<Expr>>> = sigma.iter().map(|s| jac(s)).collect();
        let jac_drift = jac(&drift);

        // Itô correction: (1/2) Σ_l Jac(σ_l) σ_l, built symbolically so it
        // folds to the literal zero for constant and affine-area models.
        let mut ito_drift = Vec::with_capacity(n);
        let mut ito_drift_zero = true;
        for k in 0..n {
            let mut acc = drift[k].clone();
            for l in 0..d {
                for i in 0..n {
                    let term = crate::exprdsl::fold_mul(
                        crate::exprdsl::fold_mul(Expr::Num(0.5), jac_sigma[l][k][i].clone()),
                        sigma[l][i].clone(),
                    );
                    acc = crate::exprdsl::fold_add(acc, term);
                }
            }
            ito_drift_zero &= acc.is_const_zero();
            ito_drift.push(acc);
        }

        let mut deriv_tables = Vec::with_capacity(d + 1);
        for field in sigma.iter().chain(std::iter::once(&drift)) {
            deriv_tables.push(build_deriv_table(field, n));
        }

        Ok(FieldSet {
            n,
            d,
            repr: Repr::Dsl(DslFields {
                sigma,
                drift,
                jac_sigma,
                jac_drift,
                ito_drift,
                ito_drift_zero,
                deriv_tables,
            }),
        })
    }

    /// Convenience constructor parsing component strings.
    pub fn from_dsl_strs(n: usize, d: usize, sigma: &[Vec<&str>], drift: &[&str]) -> Result<Self> {
        let sigma: Vec<Vec<Expr>> = sigma
            .iter()
            .map(|comps| comps.iter().map(|s| parse_expr(s, n)).collect::<std::result::Result<_, _>>())
            .collect::<std::result::Result<_, _>>()?;
        let drift: Vec<Expr> = drift
            .iter()
            .map(|s| parse_expr(s, n))
            .collect::<std::result::Result<_, _>>()?;
        FieldSet::from_dsl(n, d, sigma, drift)
    }

    /// Field set from opaque evaluators; derivatives use finite differences.
    pub fn from_closures(n: usize, d: usize, sigma: Vec<FieldFn>, drift: FieldFn) -> Result<Self> {
        if sigma.len() != d {
            return Err(TubeError::Domain("need d sigma closures".into()));
        }
        Ok(FieldSet {
            n,
            d,
            repr: Repr::Closure(ClosureFields { sigma, drift }),
        })
    }

    pub fn dim_state(&self) -> usize {
        self.n
    }

    pub fn dim_noise(&self) -> usize {
        self.d
    }

    pub fn is_dsl(&self) -> bool {
        matches!(self.repr, Repr::Dsl(_))
    }

    /// The effective Itô drift `b + (1/2) Σ_l ∂_{σ_l} σ_l` folds to the
    /// literal zero (exact for DSL fields; always false for closures).
    pub fn effective_ito_drift_is_zero(&self) -> bool {
        match &self.repr {
            Repr::Dsl(f) => f.ito_drift_zero,
            Repr::Closure(_) => false,
        }
    }

    /// The drift b vanishes identically (exact for DSL fields; probed at a
    /// few points for closures).
    pub fn drift_is_zero(&self) -> bool {
        match &self.repr {
            Repr::Dsl(f) => f.drift.iter().all(|e| e.is_const_zero()),
            Repr::Closure(f) => {
                let mut out = vec![0.0; self.n];
                for k in 0..5 {
                    let x: Vec<f64> = (0..self.n).map(|i| 0.31 * (k * 7 + i) as f64 - 0.8).collect();
                    (f.drift)(0.1 * k as f64, &x, &mut out);
                    if out.iter().any(|v| *v != 0.0) {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Write `σ_{j+1}(t,x)` into `out` (0-based `j`).
    pub fn sigma_into(&self, j: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.repr {
            Repr::Dsl(f) => {
                for (k, e) in f.sigma[j].iter().enumerate() {
                    out[k] = e
                        .eval(t, x)
                        .map_err(|err| TubeError::field_eval(t, x, err.to_string()))?;
                }
            }
            Repr::Closure(f) => (f.sigma[j])(t, x, out),
        }
        check_finite(t, x, out)
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.repr {
            Repr::Dsl(f) => {
                for (k, e) in f.drift.iter().enumerate() {
                    out[k] = e
                        .eval(t, x)
                        .map_err(|err| TubeError::field_eval(t, x, err.to_string()))?;
                }
            }
            Repr::Closure(f) => (f.drift)(t, x, out),
        }
        check_finite(t, x, out)
    }

    /// Effective Itô drift `b + (1/2) Σ_l ∂_{σ_l} σ_l` for simulating the
    /// Stratonovich equation with an Euler scheme.
    pub fn ito_drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.repr {
            Repr::Dsl(f) => {
                for (k, e) in f.ito_drift.iter().enumerate() {
                    out[k] = e
                        .eval(t, x)
                        .map_err(|err| TubeError::field_eval(t, x, err.to_string()))?;
                }
                check_finite(t, x, out)
            }
            Repr::Closure(_) => {
                self.drift_into(t, x, out)?;
                let mut jac = vec![0.0; self.n * self.n];
                let mut sig = vec![0.0; self.n];
                for l in 0..self.d {
                    self.sigma_into(l, t, x, &mut sig)?;
                    self.jac_sigma_into(l, t, x, &mut jac)?;
                    for k in 0..self.n {
                        let mut acc = 0.0;
                        for i in 0..self.n {
                            acc += jac[k * self.n + i] * sig[i];
                        }
                        out[k] += 0.5 * acc;
                    }
                }
                check_finite(t, x, out)
            }
        }
    }

    /// Space Jacobian of `σ_{j+1}`, row-major `n×n`: `out[k*n+i] = ∂_{x_i} σ^k`.
    pub fn jac_sigma_into(&self, j: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n;
        match &self.repr {
            Repr::Dsl(f) => {
                for k in 0..n {
                    for i in 0..n {
                        out[k * n + i] = f.jac_sigma[j][k][i]
                            .eval(t, x)
                            .map_err(|err| TubeError::field_eval(t, x, err.to_string()))?;
                    }
                }
            }
            Repr::Closure(f) => {
                let h = 1e-5 * x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
                let mut plus = vec![0.0; n];
                let mut minus = vec![0.0; n];
                let mut xp = x.to_vec();
                for i in 0..n {
                    xp[i] = x[i] + h;
                    (f.sigma[j])(t, &xp, &mut plus);
                    xp[i] = x[i] - h;
                    (f.sigma[j])(t, &xp, &mut minus);
                    xp[i] = x[i];
                    for k in 0..n {
                        out[k * n + i] = (plus[k] - minus[k]) / (2.0 * h);
                    }
                }
            }
        }
        check_finite(t, x, out)
    }

    pub fn jac_drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n;
        match &self.repr {
            Repr::Dsl(f) => {
                for k in 0..n {
                    for i in 0..n {
                        out[k * n + i] = f.jac_drift[k][i]
                            .eval(t, x)
                            .map_err(|err| TubeError::field_eval(t, x, err.to_string()))?;
                    }
                }
                check_finite(t, x, out)
            }
            Repr::Closure(f) => {
                let h = 1e-5 * x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
                let mut plus = vec![0.0; n];
                let mut minus = vec![0.0; n];
                let mut xp = x.to_vec();
                for i in 0..n {
                    xp[i] = x[i] + h;
                    (f.drift)(t, &xp, &mut plus);
                    xp[i] = x[i] - h;
                    (f.drift)(t, &xp, &mut minus);
                    xp[i] = x[i];
                    for k in 0..n {
                        out[k * n + i] = (plus[k] - minus[k]) / (2.0 * h);
                    }
                }
                check_finite(t, x, out)
            }
        }
    }

    /// Pack the diffusion columns and drift: column `j` of the returned
    /// matrix is `σ_{j+1}(t,x)`.
    pub fn eval_fields(&self, t: f64, x: &[f64]) -> Result<(Mat, Vec<f64>)> {
        let mut sigma = Mat::zeros(self.n, self.d);
        let mut col = vec![0.0; self.n];
        for j in 0..self.d {
            self.sigma_into(j, t, x, &mut col)?;
            sigma.set_col(j, &col);
        }
        let mut drift = vec![0.0; self.n];
        self.drift_into(t, x, &mut drift)?;
        Ok((sigma, drift))
    }

    /// Lie bracket `[σ_i, σ_p](t,x) = ∂_{σ_i} σ_p - ∂_{σ_p} σ_i` with
    /// 1-based field indices `i, p ∈ {1..d}`.
    pub fn lie_bracket(&self, i: usize, p: usize, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if i < 1 || i > self.d || p < 1 || p > self.d {
            return Err(TubeError::Domain(format!(
                "bracket indices ({i},{p}) outside 1..={}",
                self.d
            )));
        }
        let n = self.n;
        let mut out = vec![0.0; n];
        self.lie_bracket_into(i - 1, p - 1, t, x, &mut out)?;
        Ok(out)
    }

    /// 0-based internal variant writing into a scratch buffer.
    pub(crate) fn lie_bracket_into(
        &self,
        i0: usize,
        p0: usize,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let n = self.n;
        let mut jac = vec![0.0; n * n];
        let mut si = vec![0.0; n];
        let mut sp = vec![0.0; n];
        self.sigma_into(i0, t, x, &mut si)?;
        self.sigma_into(p0, t, x, &mut sp)?;
        // Jac(σ_p) σ_i
        self.jac_sigma_into(p0, t, x, &mut jac)?;
        for k in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += jac[k * n + c] * si[c];
            }
            out[k] = acc;
        }
        // - Jac(σ_i) σ_p
        self.jac_sigma_into(i0, t, x, &mut jac)?;
        for k in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += jac[k * n + c] * sp[c];
            }
            out[k] -= acc;
        }
        Ok(())
    }

    /// Sampled local derivative bound n(t,x): the supremum over
    /// `s ∈ [(t-1)∨0, t+1]` and `y ∈ B(x,1)` of the summed derivative norms
    /// up to order four (space) and one time derivative, floored at 1.
    ///
    /// Sampling uses `grid_points` per space axis on the cube circumscribing
    /// the unit ball (filtered to the ball) and `grid_points` time samples;
    /// nested grids give a non-decreasing result. The returned value is the
    /// sampled supremum itself, not an inflated rigorous bound.
    pub fn local_bound(&self, t: f64, x: &[f64], grid_points: usize) -> Result<f64> {
        if grid_points < 2 {
            return Err(TubeError::Domain("grid_points must be >= 2 per axis".into()));
        }
        let n = self.n;
        let s_lo = (t - 1.0).max(0.0);
        let s_hi = t + 1.0;
        let mut sup = 0.0_f64;
        let mut y = vec![0.0; n];
        let mut idx = vec![0usize; n];
        loop {
            // lattice point of the cube [x-1, x+1]^n
            let mut r2 = 0.0;
            for a in 0..n {
                let frac = idx[a] as f64 / (grid_points - 1) as f64;
                let off = 2.0 * frac - 1.0;
                y[a] = x[a] + off;
                r2 += off * off;
            }
            if r2 <= 1.0 + 1e-12 {
                for st in 0..grid_points {
                    let s = s_lo + (s_hi - s_lo) * st as f64 / (grid_points - 1) as f64;
                    let v = self.deriv_norm_sum(s, &y)?;
                    if !v.is_finite() {
                        return Err(TubeError::field_eval(
                            s,
                            &y,
                            "non-finite derivative sample in local bound",
                        ));
                    }
                    sup = sup.max(v);
                }
            }
            // advance the mixed-radix counter
            let mut a = 0;
            loop {
                if a == n {
                    return Ok(sup.max(1.0));
                }
                idx[a] += 1;
                if idx[a] < grid_points {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }

    /// Σ_{|α|<=4} (|∂^α b| + |∂_t ∂^α b| + Σ_j |∂^α σ_j| + |∂_t ∂^α σ_j|)
    /// at a single point, ordered multi-index counting.
    fn deriv_norm_sum(&self, s: f64, y: &[f64]) -> Result<f64> {
        match &self.repr {
            Repr::Dsl(f) => {
                let mut total = 0.0;
                for table in &f.deriv_tables {
                    for entry in table {
                        let mut sp = 0.0;
                        let mut tm = 0.0;
                        if entry.space_live {
                            for e in &entry.space {
                                let v = e
                                    .eval(s, y)
                                    .map_err(|err| TubeError::field_eval(s, y, err.to_string()))?;
                                sp += v * v;
                            }
                        }
                        if entry.time_live {
                            for e in &entry.time {
                                let v = e
                                    .eval(s, y)
                                    .map_err(|err| TubeError::field_eval(s, y, err.to_string()))?;
                                tm += v * v;
                            }
                        }
                        total += entry.multiplicity * (sp.sqrt() + tm.sqrt());
                    }
                }
                Ok(total)
            }
            Repr::Closure(f) => {
                let n = self.n;
                let mut total = 0.0;
                let mut evals: Vec<&FieldFn> = f.sigma.iter().collect();
                evals.push(&f.drift);
                for func in evals {
                    for (alpha, mult) in multisets_with_multiplicity(n, 4) {
                        let mut sp = 0.0;
                        let mut tm = 0.0;
                        for k in 0..n {
                            let v = fd_space_deriv(func, k, &alpha, s, y, n);
                            sp += v * v;
                            let vt = fd_time_of_space_deriv(func, k, &alpha, s, y, n);
                            tm += vt * vt;
                        }
                        total += mult * (sp.sqrt() + tm.sqrt());
                    }
                }
                Ok(total)
            }
        }
    }
}

fn check_finite(t: f64, x: &[f64], out: &[f64]) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TubeError::field_eval(t, x, "non-finite field value"))
    }
}

/// All non-decreasing index multisets of length 0..=max_order over `n`
/// coordinates, with the count of ordered tuples collapsing onto each.
fn multisets_with_multiplicity(n: usize, max_order: usize) -> Vec<(Vec<usize>, f64)> {
    fn factorial(k: usize) -> f64 {
        (1..=k).map(|v| v as f64).product::<f64>().max(1.0)
    }
    let mut out = vec![(Vec::new(), 1.0)];
    let mut current: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for ms in &current {
            let start = ms.last().copied().unwrap_or(0);
            for i in start..n {
                let mut v = ms.clone();
                v.push(i);
                next.push(v);
            }
        }
        for ms in &next {
            let k = ms.len();
            let mut mult = factorial(k);
            let mut run = 1;
            for w in 1..k {
                if ms[w] == ms[w - 1] {
                    run += 1;
                } else {
                    mult /= factorial(run);
                    run = 1;
                }
            }
            mult /= factorial(run);
            out.push((ms.clone(), mult));
        }
        current = next;
    }
    out
}

fn build_deriv_table(field: &[Expr], n: usize) -> Vec<DerivEntry> {
    multisets_with_multiplicity(n, 4)
        .into_iter()
        .filter_map(|(alpha, multiplicity)| {
            let space: Vec<Expr> = field
                .iter()
                .map(|c| {
                    let mut e = c.clone();
                    for &i in &alpha {
                        e = e.differentiate(Var::State(i));
                    }
                    e
                })
                .collect();
            let time: Vec<Expr> = space.iter().map(|e| e.differentiate(Var::Time)).collect();
            // entries that fold to the zero literal contribute nothing
            let space_live = !space.iter().all(|e| e.is_const_zero());
            let time_live = !time.iter().all(|e| e.is_const_zero());
            if !space_live && !time_live {
                return None;
            }
            Some(DerivEntry {
                multiplicity,
                space,
                time,
                space_live,
                time_live,
            })
        })
        .collect()
}

/// Central-difference step per derivative order, balancing truncation against
/// rounding; scaled by max(1, |y|).
fn fd_step(order: usize, y: &[f64]) -> f64 {
    let scale = y.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let base = match order {
        0 | 1 => 1e-5,
        2 => 1e-4,
        3 => 8e-4,
        _ => 3e-3,
    };
    base * scale
}

fn fd_space_deriv(f: &FieldFn, comp: usize, alpha: &[usize], s: f64, y: &[f64], n: usize) -> f64 {
    if alpha.is_empty() {
        let mut out = vec![0.0; n];
        f(s, y, &mut out);
        return out[comp];
    }
    let h = fd_step(alpha.len(), y);
    let (i, rest) = (alpha[0], &alpha[1..]);
    let mut yp = y.to_vec();
    yp[i] += h;
    let plus = fd_space_deriv(f, comp, rest, s, &yp, n);
    yp[i] = y[i] - h;
    let minus = fd_space_deriv(f, comp, rest, s, &yp, n);
    (plus - minus) / (2.0 * h)
}

fn fd_time_of_space_deriv(
    f: &FieldFn,
    comp: usize,
    alpha: &[usize],
    s: f64,
    y: &[f64],
    n: usize,
) -> f64 {
    let h = 1e-5 * s.abs().max(1.0);
    let plus = fd_space_deriv(f, comp, alpha, s + h, y, n);
    let minus = fd_space_deriv(f, comp, alpha, (s - h).max(0.0), y, n);
    (plus - minus) / (h + (s - (s - h).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    fn fd_directional(fs: &FieldSet, g: usize, f: usize, t: f64, x: &[f64]) -> Vec<f64> {
        // ∂_{σ_g} σ_f by central differences, step 1e-5
        let n = fs.dim_state();
        let h = 1e-5;
        let mut sg = vec![0.0; n];
        fs.sigma_into(g, t, x, &mut sg).unwrap();
        let mut out = vec![0.0; n];
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        let mut xs = x.to_vec();
        for i in 0..n {
            xs[i] = x[i] + h;
            fs.sigma_into(f, t, &xs, &mut plus).unwrap();
            xs[i] = x[i] - h;
            fs.sigma_into(f, t, &xs, &mut minus).unwrap();
            xs[i] = x[i];
            for k in 0..n {
                out[k] += sg[i] * (plus[k] - minus[k]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn eval_fields_identity_model() {
        let fs = models::constant_identity(2).unwrap();
        let (sigma, drift) = fs.eval_fields(0.3, &[5.0, -2.0]).unwrap();
        assert_eq!(sigma.at(0, 0), 1.0);
        assert_eq!(sigma.at(1, 0), 0.0);
        assert_eq!(sigma.at(0, 1), 0.0);
        assert_eq!(sigma.at(1, 1), 1.0);
        assert_eq!(drift, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_fields_grushin_and_heisenberg_examples() {
        let fs = models::grushin().unwrap();
        let (sigma, _) = fs.eval_fields(0.0, &[0.5, 3.0]).unwrap();
        assert_eq!(sigma.col(0), vec![1.0, 0.0]);
        assert_eq!(sigma.col(1), vec![0.0, 0.5]);

        let fs = models::heisenberg().unwrap();
        let (sigma, _) = fs.eval_fields(0.0, &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(sigma.col(0), vec![1.0, 0.0, -1.0]);
        assert_eq!(sigma.col(1), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn bracket_of_constant_fields_vanishes() {
        let fs = models::constant_identity(3).unwrap();
        let b = fs.lie_bracket(1, 2, 0.0, &[0.4, -0.3, 1.0]).unwrap();
        assert_eq!(b, vec![0.0, 0.0, 0.0]);
        assert_eq!(fs.lie_bracket(2, 2, 0.0, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn heisenberg_bracket_is_e3() {
        let fs = models::heisenberg().unwrap();
        for x in [[0.0, 0.0, 0.0], [1.3, -0.7, 2.0], [-5.0, 4.0, 0.1]] {
            let b = fs.lie_bracket(1, 2, 0.7, &x).unwrap();
            assert!((b[0]).abs() < 1e-14 && (b[1]).abs() < 1e-14);
            assert!((b[2] - 1.0).abs() < 1e-14);
            // antisymmetry
            let br = fs.lie_bracket(2, 1, 0.7, &x).unwrap();
            for k in 0..3 {
                assert_eq!(b[k], -br[k]);
            }
        }
    }

    #[test]
    fn grushin_bracket_matches_fd_oracle() {
        let fs = models::grushin().unwrap();
        for x in [[0.0, 0.0], [0.5, 3.0], [-2.0, 1.0]] {
            let b = fs.lie_bracket(1, 2, 0.0, &x).unwrap();
            assert!((b[0]).abs() < 1e-12);
            assert!((b[1] - 1.0).abs() < 1e-12);
            // independent finite-difference oracle on the directional derivatives
            let dgf = fd_directional(&fs, 0, 1, 0.0, &x);
            let dfg = fd_directional(&fs, 1, 0, 0.0, &x);
            for k in 0..2 {
                assert!((b[k] - (dgf[k] - dfg[k])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jacobian_consistent_with_finite_differences() {
        // pseudo-random points via an LCG; tolerance from the module contract
        let fs = models::heisenberg().unwrap();
        let n = 3;
        let mut state = 0x12345678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let mut jac = vec![0.0; n * n];
        for _ in 0..100 {
            let x = [next(), next(), next()];
            for j in 0..2 {
                fs.jac_sigma_into(j, 0.0, &x, &mut jac).unwrap();
                let h = 1e-5;
                let mut xp = x;
                let mut plus = vec![0.0; n];
                let mut minus = vec![0.0; n];
                for i in 0..n {
                    xp[i] = x[i] + h;
                    fs.sigma_into(j, 0.0, &xp, &mut plus).unwrap();
                    xp[i] = x[i] - h;
                    fs.sigma_into(j, 0.0, &xp, &mut minus).unwrap();
                    xp[i] = x[i];
                    for k in 0..n {
                        let fd = (plus[k] - minus[k]) / (2.0 * h);
                        let j_ki = jac[k * n + i];
                        assert!(
                            (j_ki - fd).abs() <= 1e-6 * (1.0 + j_ki.abs()),
                            "jacobian mismatch at ({k},{i}): {j_ki} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn local_bound_identity_model_is_two() {
        let fs = models::constant_identity(2).unwrap();
        let b = fs.local_bound(0.0, &[0.0, 0.0], 5).unwrap();
        assert!((b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn local_bound_grushin_origin_dense_grid_oracle() {
        let fs = models::grushin().unwrap();
        // sup |σ2(y)| = |y1| <= 1, plus |∂σ2| = 1, plus |σ1| = 1  →  3
        let b = fs.local_bound(0.0, &[0.0, 0.0], 101).unwrap();
        assert!((b - 3.0).abs() < 1e-9, "got {b}");
    }

    #[test]
    fn local_bound_heisenberg_stable_under_refinement() {
        let fs = models::heisenberg().unwrap();
        let coarse = fs.local_bound(0.0, &[0.0; 3], 51).unwrap();
        let fine = fs.local_bound(0.0, &[0.0; 3], 101).unwrap();
        assert!(fine >= coarse - 1e-12, "nested sup must not decrease");
        assert!((fine - coarse) / fine < 0.01, "coarse {coarse} vs fine {fine}");
        assert!(fine >= 1.0);
    }

    #[test]
    fn local_bound_monotone_on_nested_grids() {
        let fs = models::grushin().unwrap();
        let b3 = fs.local_bound(0.0, &[0.2, -0.1], 3).unwrap();
        let b5 = fs.local_bound(0.0, &[0.2, -0.1], 5).unwrap();
        let b9 = fs.local_bound(0.0, &[0.2, -0.1], 9).unwrap();
        assert!(b3 <= b5 + 1e-12 && b5 <= b9 + 1e-12);
    }

    #[test]
    fn closure_fields_fd_jacobian() {
        let fs = FieldSet::from_closures(
            2,
            1,
            vec![Box::new(|_t: f64, x: &[f64], out: &mut [f64]| {
                out[0] = x[1] * x[1];
                out[1] = x[0].sin();
            })],
            Box::new(|_t: f64, _x: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
            }),
        )
        .unwrap();
        let mut jac = vec![0.0; 4];
        fs.jac_sigma_into(0, 0.0, &[0.7, -1.2], &mut jac).unwrap();
        assert!((jac[0 * 2 + 1] - 2.0 * -1.2).abs() < 1e-6);
        assert!((jac[1 * 2 + 0] - 0.7_f64.cos()).abs() < 1e-6);
    }

    #[test]
    fn ito_correction_zero_for_builtin_models() {
        for fs in [
            models::bm().unwrap(),
            models::grushin().unwrap(),
            models::heisenberg().unwrap(),
            models::constant_identity(2).unwrap(),
        ] {
            assert!(fs.effective_ito_drift_is_zero());
            let n = fs.dim_state();
            let mut out = vec![1.0; n];
            fs.ito_drift_into(0.0, &vec![0.3; n], &mut out).unwrap();
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grushin_ito_correction_hand_computation() {
        // Jac(σ2) = [[0,0],[1,0]], σ2 = (0, x1) → Jac(σ2)·σ2 = (0,0)
        let fs = models::grushin().unwrap();
        let mut jac = vec![0.0; 4];
        fs.jac_sigma_into(1, 0.0, &[0.8, -0.4], &mut jac).unwrap();
        assert_eq!(jac, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn field_eval_failure_reports_point() {
        let fs = FieldSet::from_dsl_strs(1, 1, &[vec!["1/x1"]], &["0"]).unwrap();
        let mut out = vec![0.0];
        let err = fs.sigma_into(0, 0.0, &[0.0], &mut out).unwrap_err();
        match err {
            TubeError::FieldEval { t, x, .. } => {
                assert_eq!(t, 0.0);
                assert_eq!(x, vec![0.0]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
