//! Built-in model catalog with closed-form reference data.
//!
//! * `bm`: standard Brownian motion, n = d = 1, with the exact reflection
//!   series for `P(sup_{t<=T} |W_t| <= a)`;
//! * `grushin`: σ₁ = (1,0), σ₂ = (0,x₁); `X² = x₂ + ∫ X¹ dW²`, degenerate
//!   on `{x₁ = 0}`, closed-form scaled Gram `diag(R, R(x₁²+2R))`;
//! * `heisenberg`: planar Brownian motion plus its Lévy area; fields with
//!   `∓x/2` third components, bracket `(0,0,1)`, Gram at 0 `diag(R,R,2R²)`;
//! * `constant`: constant unit fields `σ_j = e_j` (elliptic reference);
//! * `dsl`: user-defined fields through the expression language.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Result, TubeError};
use crate::fields::FieldSet;
use crate::geometry;
use crate::linalg::Mat;
use crate::skeleton::{RegularityEnvelope, TimeFn};

/// A catalog entry: fields plus the default envelope and reference data.
pub struct ModelSpec {
    pub name: String,
    pub fields: FieldSet,
    /// Default starting point of the model's reference skeleton.
    pub x0: Vec<f64>,
    pub envelope: RegularityEnvelope,
    pub reference: Reference,
}

/// Which closed-form reference data the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Bm,
    Grushin,
    Heisenberg,
    None,
}

pub fn bm() -> Result<FieldSet> {
    FieldSet::from_dsl_strs(1, 1, &[vec!["1"]], &["0"])
}

pub fn grushin() -> Result<FieldSet> {
    FieldSet::from_dsl_strs(2, 2, &[vec!["1", "0"], vec!["0", "x1"]], &["0", "0"])
}

pub fn heisenberg() -> Result<FieldSet> {
    FieldSet::from_dsl_strs(
        3,
        2,
        &[vec!["1", "0", "-x2/2"], vec!["0", "1", "x1/2"]],
        &["0", "0", "0"],
    )
}

/// Constant fields σ_j = e_j, n = d.
pub fn constant_identity(n: usize) -> Result<FieldSet> {
    let mut sigma = Vec::with_capacity(n);
    for j in 0..n {
        let comps: Vec<String> = (0..n).map(|i| if i == j { "1".into() } else { "0".into() }).collect();
        sigma.push(comps);
    }
    let sigma_refs: Vec<Vec<&str>> = sigma.iter().map(|c| c.iter().map(|s| s.as_str()).collect()).collect();
    let drift: Vec<&str> = (0..n).map(|_| "0").collect();
    FieldSet::from_dsl_strs(n, n, &sigma_refs, &drift)
}

/// Instantiate a model by name. Recognized names: `bm`, `grushin`,
/// `heisenberg`, `constant`, `dsl`.
///
/// Parameters (`constant`: `n`; `dsl`: `n`, `d`, `sigma_j_i` component
/// expressions, `drift_i`, optional `x0`, `n_t`, `lambda_t`, `mu`, `h`).
/// The default envelope is verified against the sampled local bound and the
/// frame's smallest singular value along the model's reference skeleton.
pub fn instantiate_model(name: &str, params: &BTreeMap<String, String>) -> Result<ModelSpec> {
    let spec = match name {
        "bm" => ModelSpec {
            name: name.into(),
            fields: bm()?,
            x0: vec![0.0],
            envelope: RegularityEnvelope::all_ones(),
            reference: Reference::Bm,
        },
        "grushin" => ModelSpec {
            name: name.into(),
            fields: grushin()?,
            x0: vec![0.0, 0.0],
            // n_t = 3 is the sampled local bound at the origin skeleton
            // (|σ1| + sup|σ2| + |∂σ2| on the unit ball); λ from Gram diag(1,2).
            envelope: RegularityEnvelope::new(
                1.0,
                1.0,
                TimeFn::constant(3.0),
                TimeFn::constant(1.0),
            )?,
            reference: Reference::Grushin,
        },
        "heisenberg" => ModelSpec {
            name: name.into(),
            fields: heisenberg()?,
            x0: vec![0.0, 0.0, 0.0],
            // sampled local bound at 0 is 2 sqrt(9/8) + 1 ≈ 3.12; store 3.25
            envelope: RegularityEnvelope::new(
                1.0,
                1.0,
                TimeFn::constant(3.25),
                TimeFn::constant(1.0),
            )?,
            reference: Reference::Heisenberg,
        },
        "constant" => {
            let n: usize = param(params, "n").unwrap_or("2").parse().map_err(|_| bad("n"))?;
            if n < 1 || n > 8 {
                return Err(TubeError::Config("constant model needs 1 <= n <= 8".into()));
            }
            ModelSpec {
                name: name.into(),
                fields: constant_identity(n)?,
                x0: vec![0.0; n],
                envelope: RegularityEnvelope::new(
                    1.0,
                    1.0,
                    TimeFn::constant(n as f64),
                    TimeFn::constant(1.0),
                )?,
                reference: Reference::None,
            }
        }
        "dsl" => {
            let n: usize = param(params, "n").ok_or_else(|| miss("n"))?.parse().map_err(|_| bad("n"))?;
            let d: usize = param(params, "d").ok_or_else(|| miss("d"))?.parse().map_err(|_| bad("d"))?;
            let mut sigma = Vec::with_capacity(d);
            for j in 1..=d {
                let mut comps = Vec::with_capacity(n);
                for i in 1..=n {
                    let key = format!("sigma_{j}_{i}");
                    comps.push(param(params, &key).ok_or_else(|| miss(&key))?.to_string());
                }
                sigma.push(comps);
            }
            let mut drift = Vec::with_capacity(n);
            for i in 1..=n {
                drift.push(param(params, &format!("drift_{i}")).unwrap_or("0").to_string());
            }
            let sigma_refs: Vec<Vec<&str>> =
                sigma.iter().map(|c| c.iter().map(|s| s.as_str()).collect()).collect();
            let drift_refs: Vec<&str> = drift.iter().map(|s| s.as_str()).collect();
            let fields = FieldSet::from_dsl_strs(n, d, &sigma_refs, &drift_refs)?;
            let x0 = match param(params, "x0") {
                Some(s) => parse_vec(s, n)?,
                None => vec![0.0; n],
            };
            let mu: f64 = param(params, "mu").unwrap_or("1").parse().map_err(|_| bad("mu"))?;
            let h: f64 = param(params, "h").unwrap_or("1").parse().map_err(|_| bad("h"))?;
            let frame = geometry::assemble_frame(&fields, 0.0, &x0)?;
            let measured_n = fields.local_bound(0.0, &x0, 15)?;
            let n_t: f64 = match param(params, "n_t") {
                Some(s) => s.parse().map_err(|_| bad("n_t"))?,
                None => (measured_n * 1.05).max(1.0),
            };
            let lambda_t: f64 = match param(params, "lambda_t") {
                Some(s) => s.parse().map_err(|_| bad("lambda_t"))?,
                None => frame.lambda().min(1.0),
            };
            ModelSpec {
                name: name.into(),
                fields,
                x0,
                envelope: RegularityEnvelope::new(
                    mu,
                    h,
                    TimeFn::constant(n_t),
                    TimeFn::constant(lambda_t),
                )?,
                reference: Reference::None,
            }
        }
        other => {
            return Err(TubeError::Config(format!(
                "unknown model `{other}` (expected bm, grushin, heisenberg, constant or dsl)"
            )))
        }
    };
    spec.check_envelope()?;
    Ok(spec)
}

impl ModelSpec {
    /// (H1)/(H2) sanity along the default (zero-control) skeleton: the
    /// sampled local bound must not exceed n_t and the frame's smallest
    /// singular value must not drop below λ_t.
    fn check_envelope(&self) -> Result<()> {
        for t in [0.0, 0.5, 1.0] {
            let nb = self.fields.local_bound(t, &self.x0, 11)?;
            let n_t = self.envelope.n_t.eval(t);
            if nb > n_t + 1e-9 {
                return Err(TubeError::Config(format!(
                    "envelope violates (H1) for `{}`: sampled n({t}) = {nb} > n_t = {n_t}",
                    self.name
                )));
            }
            let frame = geometry::assemble_frame(&self.fields, t, &self.x0)?;
            let l_t = self.envelope.lambda_t.eval(t);
            if frame.lambda() < l_t - 1e-9 {
                return Err(TubeError::Config(format!(
                    "envelope violates (H2) for `{}`: lambda({t}) = {} < lambda_t = {l_t}",
                    self.name,
                    frame.lambda()
                )));
            }
        }
        Ok(())
    }
}

fn param<'a>(params: &'a BTreeMap<String, String>, key: &str) -> Option<&'a str> {
    params.get(key).map(|s| s.as_str())
}

fn miss(key: &str) -> TubeError {
    TubeError::Config(format!("missing model parameter `{key}`"))
}

fn bad(key: &str) -> TubeError {
    TubeError::Config(format!("model parameter `{key}` is not a valid number"))
}

fn parse_vec(s: &str, n: usize) -> Result<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse()).collect();
    let v = v.map_err(|_| TubeError::Config(format!("cannot parse vector `{s}`")))?;
    if v.len() != n {
        return Err(TubeError::Config(format!(
            "vector `{s}` has {} entries, expected {n}",
            v.len()
        )));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// closed-form reference data
// ---------------------------------------------------------------------------

/// `P(sup_{t<=T} |W_t| <= a)` for a standard 1-d Brownian motion, by the
/// classical reflection eigenfunction series
/// `(4/π) Σ_k (-1)^k/(2k+1) exp(-(2k+1)² π² T / (8a²))`.
pub fn bm_sup_prob_series(t_horizon: f64, a: f64, terms: usize) -> f64 {
    let mut sum = 0.0;
    for k in 0..terms {
        let m = (2 * k + 1) as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / m * (-m * m * PI * PI * t_horizon / (8.0 * a * a)).exp();
    }
    (4.0 / PI * sum).clamp(0.0, 1.0)
}

/// Partial sums of the reflection series (for the alternation check).
pub fn bm_sup_prob_partial_sums(t_horizon: f64, a: f64, terms: usize) -> Vec<f64> {
    (1..=terms).map(|k| bm_sup_prob_series(t_horizon, a, k)).collect()
}

/// First-order continuity correction for a discretely monitored barrier:
/// the grid-monitored maximum behaves like a continuous one with the barrier
/// pushed out by `β √dt`, β = ζ(1/2)/√(2π).
pub const DISCRETE_BARRIER_SHIFT: f64 = 0.5826486042717588;

/// Reference value for the grid-monitored event
/// `max_k |W_{t_k}| <= a` with `n_steps` uniform steps on `[0,T]`.
pub fn bm_sup_prob_series_discrete(t_horizon: f64, a: f64, n_steps: usize, terms: usize) -> f64 {
    let dt = t_horizon / n_steps as f64;
    bm_sup_prob_series(t_horizon, a + DISCRETE_BARRIER_SHIFT * dt.sqrt(), terms)
}

/// Closed-form scaled Grushin Gram matrix `diag(R, R(x₁²+2R))`.
pub fn grushin_gram(x1: f64, r: f64) -> Mat {
    let mut g = Mat::zeros(2, 2);
    *g.at_mut(0, 0) = r;
    *g.at_mut(1, 1) = r * (x1 * x1 + 2.0 * r);
    g
}

/// Closed-form scaled Heisenberg Gram matrix at the origin `diag(R,R,2R²)`.
pub fn heisenberg_gram_origin(r: f64) -> Mat {
    let mut g = Mat::zeros(3, 3);
    *g.at_mut(0, 0) = r;
    *g.at_mut(1, 1) = r;
    *g.at_mut(2, 2) = 2.0 * r * r;
    g
}

pub fn heisenberg_bracket() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
