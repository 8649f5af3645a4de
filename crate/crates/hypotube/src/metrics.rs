//! The three distances of the homogeneous theory and their equivalence
//! diagnostics.
//!
//! * `d(x,y) = √R̂` where `R̂` solves `|y-x|_{A_R(x)} = 1`, found by
//!   bisection, since `R ↦ |y-x|_{A_R(x)}` is strictly decreasing;
//! * `d_c(x,y)`: the Carathéodory distance, the infimal L² norm of a
//!   control steering `du = σ(u) ψ_t dt` from x to y in unit time; computed
//!   by penalty homotopy over piecewise-constant controls with multi-start,
//!   adjoint gradients and a feasibility-restoration polish;
//! * `d_*(x,y) = √R̂` with `R̂` the least R admitting a constant vector
//!   θ over fields and brackets with `v_1(θ) = y` and `|D_R^{-1}θ| < 1`;
//!   θ comes from the Moore-Penrose fixed point
//!   `γ ← (y-x) - r(A(x)^+ γ)`.
//!
//! All of this assumes homogeneous fields (σ = σ(x), no drift) and
//! endpoints in `O = {x : λ_*(A(x)) > 0}`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TubeError};
use crate::fields::FieldSet;
use crate::geometry::{self, GramPencil};
use crate::linalg::{self, Mat};
use crate::montecarlo::stream_rng;
use crate::skeleton::Control;

// ---------------------------------------------------------------------------
// quasi-distance d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiResult {
    /// d(x,y) = sqrt(r_hat).
    pub value: f64,
    pub r_hat: f64,
    /// r_hat exceeded 1: the scaling was defined for R in (0,1], the value
    /// is extrapolated and flagged.
    pub outside_unit_regime: bool,
}

/// Quasi-distance from the norm family: `d(x,y) < √R  ⟺  |y-x|_{A_R(x)} < 1`.
pub fn quasi_distance(fs: &FieldSet, x: &[f64], y: &[f64], tol: f64) -> Result<QuasiResult> {
    if !(tol > 0.0) {
        return Err(TubeError::Domain("tolerance must be positive".into()));
    }
    let frame = geometry::assemble_frame(fs, 0.0, x)?;
    if frame.is_degenerate() {
        return Err(TubeError::Domain(
            "x outside O: frame degenerate at the base point".into(),
        ));
    }
    let diff = linalg::sub(y, x);
    if diff.iter().all(|v| *v == 0.0) {
        return Ok(QuasiResult {
            value: 0.0,
            r_hat: 0.0,
            outside_unit_regime: false,
        });
    }
    let pencil = GramPencil::new(&frame);
    let norm_at = |r: f64| pencil.norm_at(r, &diff);

    // bracket the root of |y-x|_{A_R(x)} = 1
    let mut hi = 1.0_f64;
    let mut outside = false;
    if norm_at(hi)? > 1.0 {
        outside = true;
        while norm_at(hi)? > 1.0 {
            hi *= 2.0;
            if hi > 1e120 {
                return Err(TubeError::Domain("quasi-distance bracket overflow".into()));
            }
        }
    }
    let mut lo = hi;
    while norm_at(lo)? <= 1.0 {
        lo *= 0.5;
        if lo < 1e-280 {
            break;
        }
    }
    // invariants of the bisection: norm(lo) >= 1 >= norm(hi)
    #[cfg(debug_assertions)]
    {
        let a = norm_at(lo)?;
        let b = norm_at(hi)?;
        debug_assert!(a >= b, "R -> |y-x|_(A_R) must be non-increasing: {a} < {b}");
    }
    while hi / lo - 1.0 > tol {
        let mid = (lo * hi).sqrt();
        if norm_at(mid)? > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_hat = (lo * hi).sqrt();
    Ok(QuasiResult {
        value: r_hat.sqrt(),
        r_hat,
        outside_unit_regime: outside,
    })
}

// ---------------------------------------------------------------------------
// Carathéodory distance d_c
// ---------------------------------------------------------------------------

/// Configuration of one d_c computation. Horizon is fixed at 1; shorter
/// horizons are covered by the energy rescaling identity.
pub struct ControlProblem<'a> {
    pub fs: &'a FieldSet,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Final number of control pieces in the homotopy (16 → … → n_pieces).
    pub n_pieces: usize,
    /// Number of random restarts on top of the structured seeds.
    pub restarts: usize,
    pub seed: u64,
    /// Endpoint gap target, relative to |y - x|.
    pub gap_tol_rel: f64,
    pub penalty_growth: f64,
    pub max_penalty_stages: usize,
    pub inner_iters: usize,
}

impl<'a> ControlProblem<'a> {
    pub fn new(fs: &'a FieldSet, x: &[f64], y: &[f64]) -> Result<Self> {
        if !fs.drift_is_zero() {
            return Err(TubeError::Domain(
                "control distance needs driftless homogeneous fields".into(),
            ));
        }
        for (name, p) in [("x", x), ("y", y)] {
            let f = geometry::assemble_frame(fs, 0.0, p)?;
            if f.is_degenerate() {
                return Err(TubeError::Domain(format!("endpoint {name} outside O")));
            }
        }
        Ok(ControlProblem {
            fs,
            x: x.to_vec(),
            y: y.to_vec(),
            n_pieces: 64,
            restarts: 3,
            seed: 0x5EED,
            gap_tol_rel: 1e-6,
            penalty_growth: 10.0,
            max_penalty_stages: 8,
            inner_iters: 40,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DcResult {
    /// d_c estimate: sqrt of the control energy ∫_0^1 |ψ|².
    pub d_c: f64,
    pub energy: f64,
    pub control: Control,
    pub endpoint_gap: f64,
    /// Endpoint gap met the configured tolerance.
    pub converged: bool,
}

struct Flow<'a> {
    fs: &'a FieldSet,
    n: usize,
    d: usize,
    pieces: usize,
    substeps: usize,
}

impl<'a> Flow<'a> {
    fn new(fs: &'a FieldSet, pieces: usize) -> Self {
        Flow {
            fs,
            n: fs.dim_state(),
            d: fs.dim_noise(),
            pieces,
            substeps: (128 / pieces).max(2),
        }
    }

    fn steps(&self) -> usize {
        self.pieces * self.substeps
    }

    fn rhs(&self, u: &[f64], psi_piece: &[f64], out: &mut [f64], sig: &mut [f64]) -> bool {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for j in 0..self.d {
            if psi_piece[j] != 0.0 {
                if self.fs.sigma_into(j, 0.0, u, sig).is_err() {
                    return false;
                }
                for i in 0..self.n {
                    out[i] += sig[i] * psi_piece[j];
                }
            }
        }
        true
    }

    /// RK4 trajectory at all substep nodes; `None` on blow-up.
    fn trajectory(&self, x0: &[f64], psi: &[f64]) -> Option<Vec<f64>> {
        let n = self.n;
        let steps = self.steps();
        let dt = 1.0 / steps as f64;
        let mut traj = vec![0.0; (steps + 1) * n];
        traj[..n].copy_from_slice(x0);
        let mut u = x0.to_vec();
        let (mut k1, mut k2, mut k3, mut k4) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        let mut tmp = vec![0.0; n];
        let mut sig = vec![0.0; n];
        for s in 0..steps {
            let piece = s / self.substeps;
            let psi_piece = &psi[piece * self.d..(piece + 1) * self.d];
            if !self.rhs(&u, psi_piece, &mut k1, &mut sig) {
                return None;
            }
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * k1[i];
            }
            if !self.rhs(&tmp, psi_piece, &mut k2, &mut sig) {
                return None;
            }
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * k2[i];
            }
            if !self.rhs(&tmp, psi_piece, &mut k3, &mut sig) {
                return None;
            }
            for i in 0..n {
                tmp[i] = u[i] + dt * k3[i];
            }
            if !self.rhs(&tmp, psi_piece, &mut k4, &mut sig) {
                return None;
            }
            for i in 0..n {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if u.iter().any(|v| !v.is_finite() || v.abs() > 1e9) {
                return None;
            }
            traj[(s + 1) * n..(s + 2) * n].copy_from_slice(&u);
        }
        Some(traj)
    }

    fn endpoint(&self, x0: &[f64], psi: &[f64]) -> Option<Vec<f64>> {
        self.trajectory(x0, psi)
            .map(|t| t[self.steps() * self.n..].to_vec())
    }

    /// M(u)ᵀ λ with M(u) = Σ_j ψ_j Jac(σ_j)(u).
    fn mt_lambda(&self, u: &[f64], psi_piece: &[f64], lambda: &[f64], jac: &mut [f64], out: &mut [f64]) {
        let n = self.n;
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for j in 0..self.d {
            if psi_piece[j] == 0.0 {
                continue;
            }
            if self.fs.jac_sigma_into(j, 0.0, u, jac).is_err() {
                continue;
            }
            // (Jac σ_j)ᵀ λ
            for k in 0..n {
                let lk = lambda[k] * psi_piece[j];
                if lk != 0.0 {
                    for i in 0..n {
                        out[i] += jac[k * n + i] * lk;
                    }
                }
            }
        }
    }

    /// Backward adjoint sweep: given λ(1) = seed, accumulate
    /// grad[(p,j)] += ∫_{piece p} λᵀ σ_j(u) dt  into `grad`.
    fn adjoint_accumulate(&self, traj: &[f64], psi: &[f64], seed: &[f64], grad: &mut [f64]) {
        let n = self.n;
        let steps = self.steps();
        let dt = 1.0 / steps as f64;
        let mut lambda = seed.to_vec();
        let mut jac = vec![0.0; n * n];
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut half = vec![0.0; n];
        let mut umid = vec![0.0; n];
        let mut sig = vec![0.0; n];
        for s in (0..steps).rev() {
            let piece = s / self.substeps;
            let psi_piece = &psi[piece * self.d..(piece + 1) * self.d];
            let u0 = &traj[s * n..(s + 1) * n];
            let u1 = &traj[(s + 1) * n..(s + 2) * n];
            // trapezoid of λᵀ σ_j(u) over [t_s, t_{s+1}] with λ at the right end
            for j in 0..self.d {
                if self.fs.sigma_into(j, 0.0, u1, &mut sig).is_ok() {
                    let dot: f64 = (0..n).map(|i| lambda[i] * sig[i]).sum();
                    grad[piece * self.d + j] += 0.5 * dt * dot;
                }
            }
            // Heun step backwards: dλ/d(-t) = M(u)ᵀ λ
            self.mt_lambda(u1, psi_piece, &lambda, &mut jac, &mut k1);
            for i in 0..n {
                half[i] = lambda[i] + 0.5 * dt * k1[i];
                umid[i] = 0.5 * (u0[i] + u1[i]);
            }
            self.mt_lambda(&umid, psi_piece, &half, &mut jac, &mut k2);
            for i in 0..n {
                lambda[i] += dt * k2[i];
            }
            for j in 0..self.d {
                if self.fs.sigma_into(j, 0.0, u0, &mut sig).is_ok() {
                    let dot: f64 = (0..n).map(|i| lambda[i] * sig[i]).sum();
                    grad[piece * self.d + j] += 0.5 * dt * dot;
                }
            }
        }
    }

    /// Endpoint Jacobian ∂u(1)/∂ψ as an n × (pieces·d) matrix.
    fn jacobian(&self, traj: &[f64], psi: &[f64]) -> Mat {
        let n = self.n;
        let mut jac = Mat::zeros(n, self.pieces * self.d);
        let mut seed = vec![0.0; n];
        let mut row = vec![0.0; self.pieces * self.d];
        for r in 0..n {
            for v in row.iter_mut() {
                *v = 0.0;
            }
            for (i, s) in seed.iter_mut().enumerate() {
                *s = if i == r { 1.0 } else { 0.0 };
            }
            self.adjoint_accumulate(traj, psi, &seed, &mut row);
            for c in 0..row.len() {
                *jac.at_mut(r, c) = row[c];
            }
        }
        jac
    }
}

fn energy_of(psi: &[f64], pieces: usize) -> f64 {
    let dt = 1.0 / pieces as f64;
    psi.iter().map(|v| v * v).sum::<f64>() * dt
}

struct Candidate {
    psi: Vec<f64>,
    energy: f64,
    gap: f64,
}

/// Carathéodory distance by penalty homotopy + restoration polish.
pub fn caratheodory_distance(prob: &ControlProblem) -> Result<DcResult> {

    let d = prob.fs.dim_noise();
    let diff = linalg::sub(&prob.y, &prob.x);
    let scale = linalg::norm2(&diff);
    if scale == 0.0 {
        return Ok(DcResult {
            d_c: 0.0,
            energy: 0.0,
            control: Control::zero(d, 1.0),
            endpoint_gap: 0.0,
            converged: true,
        });
    }
    let gap_target = prob.gap_tol_rel * scale;

    // homotopy stages in piece count
    let mut stages = vec![16.min(prob.n_pieces)];
    let mut p = 16;
    while p < prob.n_pieces {
        p = (p * 4).min(prob.n_pieces);
        stages.push(p);
    }

    // seeds at the coarsest stage
    let pieces0 = stages[0];
    let mut rng = stream_rng(prob.seed, 0xDC);
    let mut seeds: Vec<Vec<f64>> = Vec::new();

    // 1) least-squares constant control through the σ-columns at x
    let (sigma_x, _) = prob.fs.eval_fields(0.0, &prob.x)?;
    let gram_sigma = sigma_x.gram();
    let w = linalg::damped_spd_solve(&gram_sigma, &diff, 1e-10);
    let theta0 = sigma_x.tr_mul_vec(&w);
    let mut pinv_seed = vec![0.0; pieces0 * d];
    for k in 0..pieces0 {
        pinv_seed[k * d..(k + 1) * d].copy_from_slice(&theta0);
    }
    seeds.push(pinv_seed.clone());

    // 2) rotational seeds: closed loops in pairs of control coordinates
    //    generate bracket directions; amplitude sized by the unreached part
    let reached: Vec<f64> = sigma_x.mul_vec(&theta0);
    let res_norm = linalg::norm2(&linalg::sub(&diff, &reached));
    if d >= 2 && res_norm > 1e-14 * scale {
        let amp = 2.0 * (std::f64::consts::PI * res_norm).sqrt();
        let mut pairs = vec![(0usize, 1usize)];
        if d >= 3 {
            pairs.push((1, 2));
        }
        for (a, b) in pairs {
            for sign in [1.0, -1.0] {
                let mut s = pinv_seed.clone();
                for k in 0..pieces0 {
                    let t = (k as f64 + 0.5) / pieces0 as f64;
                    let ang = 2.0 * std::f64::consts::PI * t;
                    s[k * d + a] += sign * amp * ang.cos();
                    s[k * d + b] += amp * ang.sin();
                }
                seeds.push(s);
            }
        }
    }

    // 3) random perturbations
    let noise_scale = (linalg::norm2(&theta0) + res_norm.sqrt() + scale).max(1e-8);
    for _ in 0..prob.restarts {
        let mut s = pinv_seed.clone();
        for v in s.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += 0.7 * noise_scale * z;
        }
        seeds.push(s);
    }

    // optimize stage by stage, promoting the best candidates
    let mut candidates: Vec<Candidate> = seeds
        .into_iter()
        .filter_map(|psi| optimize_candidate(prob, pieces0, psi, gap_target))
        .collect();
    if candidates.is_empty() {
        return Err(TubeError::OptimizerStalled(
            "no candidate control produced a finite flow".into(),
        ));
    }
    rank_candidates(&mut candidates, gap_target);
    for stage in stages.iter().skip(1) {
        let keep = candidates.len().min(2);
        let mut next = Vec::new();
        for cand in candidates.into_iter().take(keep) {
            let refined = refine_control(&cand.psi, pieces0_of(&cand, d), *stage, d);
            if let Some(c) = optimize_candidate(prob, *stage, refined, gap_target) {
                next.push(c);
            }
        }
        if next.is_empty() {
            return Err(TubeError::OptimizerStalled(
                "refinement lost all candidates".into(),
            ));
        }
        rank_candidates(&mut next, gap_target);
        candidates = next;
    }

    let best = &candidates[0];
    let pieces = best.psi.len() / d;
    let flow = Flow::new(prob.fs, pieces);
    let endpoint = flow
        .endpoint(&prob.x, &best.psi)
        .ok_or_else(|| TubeError::OptimizerStalled("best control blew up on re-evaluation".into()))?;
    let gap = linalg::norm2(&linalg::sub(&endpoint, &prob.y));
    let energy = energy_of(&best.psi, pieces);
    let rows: Vec<Vec<f64>> = best.psi.chunks(d).map(|c| c.to_vec()).collect();
    let control = Control::piecewise(d, 1.0, &rows)?;
    let converged = gap <= gap_target * (1.0 + 1e-9);
    if gap > 1e3 * gap_target.max(1e-12) && gap > 0.2 * scale {
        return Err(TubeError::OptimizerStalled(format!(
            "endpoint gap {gap:.3e} never approached the target {gap_target:.3e} (best energy {energy:.6e})"
        )));
    }
    Ok(DcResult {
        d_c: energy.sqrt(),
        energy,
        control,
        endpoint_gap: gap,
        converged,
    })
}

fn pieces0_of(c: &Candidate, d: usize) -> usize {
    c.psi.len() / d
}

fn rank_candidates(cands: &mut [Candidate], gap_target: f64) {
    cands.sort_by(|a, b| {
        let fa = a.gap <= gap_target * 1.001;
        let fb = b.gap <= gap_target * 1.001;
        fb.cmp(&fa)
            .then(a.energy.partial_cmp(&b.energy).unwrap_or(std::cmp::Ordering::Equal))
    });
}

fn refine_control(psi: &[f64], pieces: usize, new_pieces: usize, d: usize) -> Vec<f64> {
    let rep = new_pieces / pieces;
    let mut out = Vec::with_capacity(new_pieces * d);
    for k in 0..pieces {
        for _ in 0..rep {
            out.extend_from_slice(&psi[k * d..(k + 1) * d]);
        }
    }
    out
}

/// Penalty homotopy on one seed, then restoration and tangent polish.
/// Within every penalty stage the Armijo line search keeps the merit
/// function monotone.
fn optimize_candidate(
    prob: &ControlProblem,
    pieces: usize,
    mut psi: Vec<f64>,
    gap_target: f64,
) -> Option<Candidate> {
    let flow = Flow::new(prob.fs, pieces);
    let d = prob.fs.dim_noise();
    let n = prob.fs.dim_state();
    let dt = 1.0 / pieces as f64;
    let scale = linalg::norm2(&linalg::sub(&prob.y, &prob.x));

    let eval = |psi: &[f64], rho: f64| -> Option<(f64, f64, f64, Vec<f64>)> {
        // returns (merit, energy, gap, endpoint)
        let end = flow.endpoint(&prob.x, psi)?;
        let gap_vec = linalg::sub(&end, &prob.y);
        let gap = linalg::norm2(&gap_vec);
        let energy = energy_of(psi, pieces);
        Some((energy + rho * gap * gap, energy, gap, end))
    };

    let mut rho = 1.0 / scale.max(1e-12);
    let mut last_alpha = 1.0_f64;
    for _stage in 0..prob.max_penalty_stages {
        let mut current = eval(&psi, rho)?;
        for _it in 0..prob.inner_iters {
            // gradient of energy + rho |u1 - y|^2 via one adjoint pass
            let traj = flow.trajectory(&prob.x, &psi)?;
            let end = &traj[flow.steps() * n..];
            let mut seed = vec![0.0; n];
            for i in 0..n {
                seed[i] = 2.0 * rho * (end[i] - prob.y[i]);
            }
            let mut grad = vec![0.0; pieces * d];
            flow.adjoint_accumulate(&traj, &psi, &seed, &mut grad);
            for (g, p) in grad.iter_mut().zip(psi.iter()) {
                *g += 2.0 * dt * p;
            }
            let gnorm = linalg::norm2(&grad);
            if gnorm <= 1e-12 * (1.0 + current.0.abs()) {
                break;
            }
            // Armijo backtracking
            let mut alpha = (last_alpha * 4.0).min(1e6 / gnorm);
            let mut improved = false;
            for _ in 0..40 {
                let trial: Vec<f64> = psi.iter().zip(&grad).map(|(p, g)| p - alpha * g).collect();
                if let Some(t) = eval(&trial, rho) {
                    if t.0 <= current.0 - 1e-4 * alpha * gnorm * gnorm {
                        psi = trial;
                        current = t;
                        improved = true;
                        last_alpha = alpha;
                        break;
                    }
                }
                alpha *= 0.25;
            }
            if !improved {
                break;
            }
        }
        if current.2 <= (0.02 * scale).max(gap_target) {
            break;
        }
        rho *= prob.penalty_growth;
    }

    // Gauss-Newton feasibility restoration: minimal-norm correction onto
    // the endpoint manifold
    let mut gap = eval(&psi, 0.0)?.2;
    for _ in 0..60 {
        if gap <= gap_target {
            break;
        }
        let traj = flow.trajectory(&prob.x, &psi)?;
        let end = traj[flow.steps() * n..].to_vec();
        let r = linalg::sub(&end, &prob.y);
        let jac = flow.jacobian(&traj, &psi);
        let jjt = jac.gram();
        let w = linalg::damped_spd_solve(&jjt, &r, 1e-12);
        let full: Vec<f64> = jac.tr_mul_vec(&w);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let trial: Vec<f64> = psi.iter().zip(&full).map(|(p, f)| p - step * f).collect();
            if let Some(t) = eval(&trial, 0.0) {
                if t.2 < gap * (1.0 - 1e-3 * step) {
                    psi = trial;
                    gap = t.2;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    // tangent-space energy polish at fixed feasibility
    let mut best = eval(&psi, 0.0)?;
    for _ in 0..12 {
        if best.2 > gap_target {
            break;
        }
        let traj = flow.trajectory(&prob.x, &psi)?;
        let jac = flow.jacobian(&traj, &psi);
        let jjt = jac.gram();
        let g: Vec<f64> = psi.iter().map(|p| 2.0 * dt * p).collect();
        let jg = jac.mul_vec(&g);
        let w = linalg::damped_spd_solve(&jjt, &jg, 1e-12);
        let proj = jac.tr_mul_vec(&w);
        let tangent: Vec<f64> = g.iter().zip(&proj).map(|(a, b)| a - b).collect();
        let tnorm = linalg::norm2(&tangent);
        if tnorm <= 1e-10 * (1.0 + best.1) {
            break;
        }
        let mut alpha = 0.5 / (1.0 + tnorm);
        let mut improved = false;
        for _ in 0..12 {
            let mut trial: Vec<f64> = psi.iter().zip(&tangent).map(|(p, t)| p - alpha * t).collect();
            // restore feasibility of the trial
            let mut tgap = match eval(&trial, 0.0) {
                Some(t) => t.2,
                None => {
                    alpha *= 0.5;
                    continue;
                }
            };
            for _ in 0..8 {
                if tgap <= gap_target {
                    break;
                }
                let ttraj = match flow.trajectory(&prob.x, &trial) {
                    Some(t) => t,
                    None => break,
                };
                let tend = ttraj[flow.steps() * n..].to_vec();
                let r = linalg::sub(&tend, &prob.y);
                let tj = flow.jacobian(&ttraj, &trial);
                let w = linalg::damped_spd_solve(&tj.gram(), &r, 1e-12);
                let corr = tj.tr_mul_vec(&w);
                for (p, c) in trial.iter_mut().zip(&corr) {
                    *p -= c;
                }
                tgap = match eval(&trial, 0.0) {
                    Some(t) => t.2,
                    None => break,
                };
            }
            if let Some(t) = eval(&trial, 0.0) {
                if t.2 <= gap_target && t.1 < best.1 * (1.0 - 1e-9) {
                    psi = trial;
                    best = t;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }

    let fin = eval(&psi, 0.0)?;
    Some(Candidate {
        psi,
        energy: fin.1,
        gap: fin.2,
    })
}

/// Energy rescaling identity: the optimal `[0,1]` control transported to
/// `[0,δ]` via φ_t = ψ_{t/δ}/δ has √δ ε_φ(δ) = ‖ψ‖₂ and reaches the same
/// endpoint. Returns (endpoint gap of the rescaled flow, √δ·ε_φ(δ)).
pub fn dc_rescale_check(
    fs: &FieldSet,
    x: &[f64],
    result: &DcResult,
    delta: f64,
) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(TubeError::Domain("delta must lie in (0,1]".into()));
    }
    let d = fs.dim_noise();
    let pieces = result.control.pieces();
    let rows: Vec<Vec<f64>> = (0..pieces)
        .map(|k| {
            result.control.values()[k * d..(k + 1) * d]
                .iter()
                .map(|v| v / delta)
                .collect()
        })
        .collect();
    let scaled = Control::piecewise(d, delta, &rows)?;
    let skel = crate::skeleton::integrate_skeleton(fs, &scaled, x, 256)?;
    let endpoint = skel.end_state();
    // target endpoint: the [0,1] flow endpoint
    let flow = Flow::new(fs, pieces);
    let end01 = flow
        .endpoint(x, result.control.values())
        .ok_or_else(|| TubeError::OptimizerStalled("flow blew up in rescale check".into()))?;
    let gap = linalg::norm2(&linalg::sub(endpoint, &end01));
    let eps = scaled.energy(0.0, delta)?;
    Ok((gap, delta.sqrt() * eps))
}

// ---------------------------------------------------------------------------
// d_* and the Moore-Penrose fixed point
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GammaFixedPoint {
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    /// |v_1(θ) - y| at acceptance.
    pub residual: f64,
    pub iterations: usize,
    /// Residual after each iteration, for convergence diagnostics.
    pub trace: Vec<f64>,
}

/// Integrate dv = A(v) θ dt over [0,1] with RK4.
fn nsw_flow(fs: &FieldSet, x0: &[f64], theta: &[f64], steps: usize) -> Result<Vec<f64>> {
    let n = fs.dim_state();
    let d = fs.dim_noise();
    let m = d * d;
    assert_eq!(theta.len(), m);
    let dt = 1.0 / steps as f64;
    let mut v = x0.to_vec();
    let mut col = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut rhs = |u: &[f64], out: &mut Vec<f64>| -> Result<()> {
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for l in 1..=m {
            if theta[l - 1] == 0.0 {
                continue;
            }
            let evaluated = match geometry::column_kind(l, d) {
                geometry::ColumnKind::Sigma { i } => fs.sigma_into(i - 1, 0.0, u, &mut col),
                geometry::ColumnKind::Bracket { i, p } => {
                    fs.lie_bracket_into(i - 1, p - 1, 0.0, u, &mut col)
                }
            };
            // a field failing to evaluate means the flow left the domain
            evaluated.map_err(|_| TubeError::OutsideBasin {
                gamma_norm: f64::INFINITY,
                limit: 1e9,
            })?;
            for k in 0..n {
                out[k] += theta[l - 1] * col[k];
            }
        }
        Ok(())
    };
    for _ in 0..steps {
        rhs(&v, &mut k1)?;
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * dt * k1[i];
        }
        rhs(&tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = v[i] + 0.5 * dt * k2[i];
        }
        rhs(&tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = v[i] + dt * k3[i];
        }
        rhs(&tmp, &mut k4)?;
        for i in 0..n {
            v[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if v.iter().any(|x| !x.is_finite() || x.abs() > 1e9) {
            return Err(TubeError::OutsideBasin {
                gamma_norm: f64::INFINITY,
                limit: 1e9,
            });
        }
    }
    Ok(v)
}

/// Moore-Penrose fixed point for the endpoint equation `Φ(θ) = y - x`:
/// iterate `γ ← γ + (y - v_1(A(x)^+ γ))` from `γ_0 = y - x`.
pub fn gamma_fixed_point(
    fs: &FieldSet,
    x: &[f64],
    y: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<GammaFixedPoint> {
    let frame = geometry::assemble_frame(fs, 0.0, x)?;
    if frame.is_degenerate() {
        return Err(TubeError::Domain("x outside O".into()));
    }
    let diff = linalg::sub(y, x);
    let scale = linalg::norm2(&diff);
    let limit = 10.0 * scale.max(1e-300);
    let mut gamma = diff.clone();
    let mut trace = Vec::new();
    for it in 1..=max_iter {
        let theta = frame.pinv_apply(&gamma)?;
        let v1 = nsw_flow(fs, x, &theta, 128)?;
        let residual = linalg::norm2(&linalg::sub(y, &v1));
        trace.push(residual);
        if residual <= tol {
            return Ok(GammaFixedPoint {
                gamma,
                theta,
                residual,
                iterations: it,
                trace,
            });
        }
        for (g, (yy, vv)) in gamma.iter_mut().zip(y.iter().zip(&v1)) {
            *g += yy - vv;
        }
        let gnorm = linalg::norm2(&gamma);
        if gnorm > limit {
            return Err(TubeError::OutsideBasin {
                gamma_norm: gnorm,
                limit,
            });
        }
    }
    Err(TubeError::OptimizerStalled(format!(
        "Moore-Penrose fixed point stalled at residual {:.3e} after {max_iter} iterations",
        trace.last().copied().unwrap_or(f64::NAN)
    )))
}

#[derive(Debug, Clone)]
pub struct NswResult {
    /// d_*(x,y) reported as √R̂ to match the quasi-distance scale.
    pub value: f64,
    pub r_hat: f64,
    pub theta: Vec<f64>,
    pub endpoint_residual: f64,
    pub fixed_point_iterations: usize,
}

/// Constant-control distance d_*: the minimal R with `|D_R^{-1} θ| < 1`
/// over constant controls θ steering the A-flow from x to y.
pub fn nsw_distance(fs: &FieldSet, x: &[f64], y: &[f64]) -> Result<NswResult> {
    let diff = linalg::sub(y, x);
    let scale = linalg::norm2(&diff);
    if scale == 0.0 {
        return Ok(NswResult {
            value: 0.0,
            r_hat: 0.0,
            theta: vec![0.0; fs.dim_noise() * fs.dim_noise()],
            endpoint_residual: 0.0,
            fixed_point_iterations: 0,
        });
    }
    // tolerance floored above the RK4/rounding noise of the flow endpoint
    let tol = (1e-11 * scale).max(1e-13);
    let fp = gamma_fixed_point(fs, x, y, 60, tol)?;
    let d = fs.dim_noise();
    // |D_R^{-1} θ|² = a/R + b/R² with a over σ-columns, b over brackets
    let mut a = 0.0;
    let mut b = 0.0;
    for l in 1..=d * d {
        let v = fp.theta[l - 1] * fp.theta[l - 1];
        if geometry::column_kind(l, d).is_bracket() {
            b += v;
        } else {
            a += v;
        }
    }
    let profile = |r: f64| a / r + b / (r * r);
    let mut hi = 1.0_f64.max(a + b.sqrt());
    while profile(hi) > 1.0 {
        hi *= 2.0;
        if hi > 1e120 {
            return Err(TubeError::Domain("d_* bracket overflow".into()));
        }
    }
    let mut lo = hi;
    while profile(lo) <= 1.0 && lo > 1e-300 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if profile(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    let r_hat = (lo * hi).sqrt();
    Ok(NswResult {
        value: r_hat.sqrt(),
        r_hat,
        theta: fp.theta,
        endpoint_residual: fp.residual,
        fixed_point_iterations: fp.iterations,
    })
}

// ---------------------------------------------------------------------------
// equivalence diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EquivRow {
    pub radius: f64,
    pub y: Vec<f64>,
    pub d: f64,
    pub d_c: f64,
    pub d_star: f64,
    pub dc_gap: f64,
    pub dc_converged: bool,
}

#[derive(Debug, Clone)]
pub struct RadiusStats {
    pub radius: f64,
    pub min_d_dc: f64,
    pub max_d_dc: f64,
    pub min_dstar_d: f64,
    pub max_dstar_d: f64,
    pub min_dc_dstar: f64,
    pub max_dc_dstar: f64,
}

#[derive(Debug, Clone)]
pub struct EquivReport {
    pub base: Vec<f64>,
    pub rows: Vec<EquivRow>,
    pub stats: Vec<RadiusStats>,
    /// Per-refinement growth of the d/d_c band stayed under 2x.
    pub growth_ok: bool,
}

/// Sample points at prescribed d-radii around `base`, compute the three
/// distances and report the ratio bands per radius.
pub fn equivalence_report(
    fs: &FieldSet,
    base: &[f64],
    radii: &[f64],
    samples: usize,
    seed: u64,
) -> Result<EquivReport> {
    let n = fs.dim_state();
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for (ri, radius) in radii.iter().enumerate() {
        let mut dirs = Vec::with_capacity(samples);
        let mut rng = stream_rng(seed, 0xE0 + ri as u64);
        for _ in 0..samples {
            let mut u: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nrm = linalg::norm2(&u);
            for v in u.iter_mut() {
                *v /= nrm;
            }
            dirs.push(u);
        }
        let mut band: Vec<(f64, f64, f64)> = Vec::new();
        for dir in &dirs {
            let y = point_at_radius(fs, base, dir, *radius)?;
            let d = quasi_distance(fs, base, &y, 1e-9)?.value;
            let prob = ControlProblem {
                seed: seed ^ (ri as u64) << 8,
                ..ControlProblem::new(fs, base, &y)?
            };
            let dc = caratheodory_distance(&prob)?;
            let ds = nsw_distance(fs, base, &y)?;
            band.push((d / dc.d_c, ds.value / d, dc.d_c / ds.value));
            rows.push(EquivRow {
                radius: *radius,
                y,
                d,
                d_c: dc.d_c,
                d_star: ds.value,
                dc_gap: dc.endpoint_gap,
                dc_converged: dc.converged,
            });
        }
        let fold = |sel: fn(&(f64, f64, f64)) -> f64| -> (f64, f64) {
            band.iter().map(sel).fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        };
        let (min_d_dc, max_d_dc) = fold(|t| t.0);
        let (min_dstar_d, max_dstar_d) = fold(|t| t.1);
        let (min_dc_dstar, max_dc_dstar) = fold(|t| t.2);
        stats.push(RadiusStats {
            radius: *radius,
            min_d_dc,
            max_d_dc,
            min_dstar_d,
            max_dstar_d,
            min_dc_dstar,
            max_dc_dstar,
        });
    }
    let mut growth_ok = true;
    for w in stats.windows(2) {
        growth_ok &= w[1].max_d_dc < 2.0 * w[0].max_d_dc;
        growth_ok &= w[1].min_d_dc > 0.5 * w[0].min_d_dc;
    }
    Ok(EquivReport {
        base: base.to_vec(),
        rows,
        stats,
        growth_ok,
    })
}

/// Find `y = base + s·dir` with `d(base, y) ≈ radius` (1% tolerance).
fn point_at_radius(fs: &FieldSet, base: &[f64], dir: &[f64], radius: f64) -> Result<Vec<f64>> {
    let at = |s: f64| -> Result<f64> {
        let y: Vec<f64> = base.iter().zip(dir).map(|(b, u)| b + s * u).collect();
        Ok(quasi_distance(fs, base, &y, 1e-7)?.value)
    };
    let mut hi = radius;
    let mut guard = 0;
    while at(hi)? < radius {
        hi *= 2.0;
        guard += 1;
        if guard > 80 {
            return Err(TubeError::Domain("radius search diverged".into()));
        }
    }
    let mut lo = hi;
    while at(lo)? > radius {
        lo *= 0.5;
        guard += 1;
        if guard > 160 {
            return Err(TubeError::Domain("radius search diverged".into()));
        }
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if at(mid)? > radius {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo - 1.0 < 1e-4 {
            break;
        }
    }
    let s = (lo * hi).sqrt();
    Ok(base.iter().zip(dir).map(|(b, u)| b + s * u).collect())
}

/// Local-equivalence literal check: on rows with d_c(x,y) <= 1/c_bar², verify
/// d <= 2 c_bar d_c. Returns (applicable, passed).
pub fn local_equivalence_check(rows: &[EquivRow], c_bar: f64) -> (usize, usize) {
    let mut applicable = 0;
    let mut passed = 0;
    for row in rows {
        if row.d_c <= 1.0 / (c_bar * c_bar) {
            applicable += 1;
            if row.d <= 2.0 * c_bar * row.d_c * (1.0 + 1e-9) {
                passed += 1;
            }
        }
    }
    (applicable, passed)
}
