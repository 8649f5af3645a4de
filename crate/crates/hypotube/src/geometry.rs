//! The bracket-augmented directional frame and its anisotropic norms.
//!
//! For fields `σ_1..σ_d` the frame `A(t,x)` is the `n × d²` matrix whose
//! column `l(i,p) = (p-1)d + i` is `σ_i(t,x)` when `i = p` and the bracket
//! `[σ_i, σ_p](t,x)` when `i ≠ p`. The diagonal scaling `D_R` multiplies
//! σ-columns by `√R` and bracket columns by `R`, giving `A_R = A D_R`, and
//! the norm is the Gram quadratic form `|y|_M = √⟨(MMᵀ)⁻¹ y, y⟩`.
//!
//! Norms are evaluated by Cholesky solves against the Gram matrix, never by
//! explicit inversion; the Gram condition number grows like `1/R`, which a
//! factor-and-solve handles comfortably at these dimensions.

use crate::error::{Result, TubeError};
use crate::fields::FieldSet;
use crate::linalg::{self, Mat};

/// Spectral cutoff: `sv_min <= RANK_TOL * sv_max` declares the frame
/// degenerate.
pub const RANK_TOL: f64 = 1e-12;

/// Provenance of a frame column, with 1-based field indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Sigma { i: usize },
    Bracket { i: usize, p: usize },
}

impl ColumnKind {
    pub fn is_bracket(&self) -> bool {
        matches!(self, ColumnKind::Bracket { .. })
    }
}

/// Column index `l(i,p) = (p-1)d + i` for 1-based `i, p`.
pub fn column_index(i: usize, p: usize, d: usize) -> usize {
    (p - 1) * d + i
}

/// Inverse of [`column_index`]: the kind of 1-based column `l ∈ 1..=d²`.
pub fn column_kind(l: usize, d: usize) -> ColumnKind {
    let l0 = l - 1;
    let i = l0 % d + 1;
    let p = l0 / d + 1;
    if i == p {
        ColumnKind::Sigma { i }
    } else {
        ColumnKind::Bracket { i, p }
    }
}

#[derive(Debug, Clone)]
pub struct DirectionalFrame {
    pub t: f64,
    pub x: Vec<f64>,
    /// n × m column matrix (m = d²), scaled iff `scale` is set.
    pub a: Mat,
    pub kinds: Vec<ColumnKind>,
    /// The applied radius R ∈ (0,1]; `None` for the unscaled frame.
    pub scale: Option<f64>,
    pub gram: Mat,
    pub sv_min: f64,
    pub sv_max: f64,
    chol: Option<Vec<f64>>,
}

/// Assemble the unscaled frame `A(t,x)` from a field set.
pub fn assemble_frame(fs: &FieldSet, t: f64, x: &[f64]) -> Result<DirectionalFrame> {
    let n = fs.dim_state();
    let d = fs.dim_noise();
    let m = d * d;
    let mut a = Mat::zeros(n, m);
    let mut kinds = Vec::with_capacity(m);
    let mut col = vec![0.0; n];
    for l in 1..=m {
        let kind = column_kind(l, d);
        match kind {
            ColumnKind::Sigma { i } => fs.sigma_into(i - 1, t, x, &mut col)?,
            ColumnKind::Bracket { i, p } => fs.lie_bracket_into(i - 1, p - 1, t, x, &mut col)?,
        }
        a.set_col(l - 1, &col);
        kinds.push(kind);
    }
    Ok(DirectionalFrame::from_parts(t, x.to_vec(), a, kinds, None))
}

impl DirectionalFrame {
    /// Build a frame from an explicit column matrix. Used internally and by
    /// randomized property tests that need frames without field sets.
    pub fn from_parts(
        t: f64,
        x: Vec<f64>,
        a: Mat,
        kinds: Vec<ColumnKind>,
        scale: Option<f64>,
    ) -> Self {
        assert_eq!(kinds.len(), a.cols);
        let gram = a.gram();
        let eig = linalg::sym_eigenvalues(&gram);
        let sv_min = eig.first().copied().unwrap_or(0.0).max(0.0).sqrt();
        let sv_max = eig.last().copied().unwrap_or(0.0).max(0.0).sqrt();
        let chol = if sv_min > RANK_TOL * sv_max && sv_min > 0.0 {
            linalg::cholesky(&gram, 1e-30)
        } else {
            None
        };
        DirectionalFrame {
            t,
            x,
            a,
            kinds,
            scale,
            gram,
            sv_min,
            sv_max,
            chol,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows
    }

    pub fn n_columns(&self) -> usize {
        self.a.cols
    }

    /// Smallest singular value; for the unscaled frame this is the
    /// non-degeneracy scale λ(t,x).
    pub fn lambda(&self) -> f64 {
        self.sv_min
    }

    pub fn is_degenerate(&self) -> bool {
        self.chol.is_none()
    }

    /// Scale by `R ∈ (0,1]`: σ-columns by `√R`, bracket columns by `R`.
    pub fn scaled(&self, r: f64) -> Result<DirectionalFrame> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(TubeError::Domain(format!(
                "scale R must lie in (0,1], got {r}"
            )));
        }
        if self.scale.is_some() {
            return Err(TubeError::Domain(
                "frame is already scaled; scale the unscaled frame".into(),
            ));
        }
        Ok(self.scaled_unchecked(r))
    }

    /// Scaling without the (0,1] restriction, for diagnostics that continue
    /// the radius bisection past R = 1 (flagged by the caller).
    pub fn scaled_unchecked(&self, r: f64) -> DirectionalFrame {
        let mut a = self.a.clone();
        let sqrt_r = r.sqrt();
        for (l, kind) in self.kinds.iter().enumerate() {
            let s = if kind.is_bracket() { r } else { sqrt_r };
            a.scale_col(l, s);
        }
        DirectionalFrame::from_parts(self.t, self.x.clone(), a, self.kinds.clone(), Some(r))
    }

    /// Anisotropic norm `|y|_{A} = √⟨(A Aᵀ)⁻¹ y, y⟩` for this frame.
    pub fn norm(&self, y: &[f64]) -> Result<f64> {
        Ok(self.norm_sq(y)?.sqrt())
    }

    pub fn norm_sq(&self, y: &[f64]) -> Result<f64> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| TubeError::degenerate(self.t, &self.x))?;
        Ok(linalg::cholesky_quad_form(chol, self.dim(), y).max(0.0))
    }

    /// Packed Cholesky factor of the Gram matrix, if non-degenerate.
    pub fn chol(&self) -> Option<&[f64]> {
        self.chol.as_deref()
    }

    /// Moore-Penrose application `A⁺ y = Aᵀ (A Aᵀ)⁻¹ y`.
    pub fn pinv_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| TubeError::degenerate(self.t, &self.x))?;
        let w = linalg::cholesky_solve(chol, self.dim(), y);
        Ok(self.a.tr_mul_vec(&w))
    }

    pub fn spectral(&self) -> Spectral {
        let degenerate = self.sv_min <= RANK_TOL * self.sv_max || self.sv_min == 0.0;
        let sqrt_det_gram = if degenerate {
            0.0
        } else {
            let eig = linalg::sym_eigenvalues(&self.gram);
            eig.iter().map(|v| v.max(0.0).sqrt()).product()
        };
        Spectral {
            sv_min: self.sv_min,
            sv_max: self.sv_max,
            sqrt_det_gram,
        }
    }
}

/// Extreme singular values of the frame matrix and `√det(A Aᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectral {
    pub sv_min: f64,
    pub sv_max: f64,
    pub sqrt_det_gram: f64,
}

/// Decomposition of an unscaled frame into the σ and bracket Gram parts, so
/// that `Gram(A_R) = R·S + R²·B` can be re-assembled cheaply for many R.
#[derive(Debug, Clone)]
pub struct GramPencil {
    pub sigma_part: Mat,
    pub bracket_part: Mat,
    n: usize,
}

impl GramPencil {
    pub fn new(frame: &DirectionalFrame) -> Self {
        assert!(frame.scale.is_none(), "pencil needs the unscaled frame");
        let n = frame.dim();
        let mut s = Mat::zeros(n, n);
        let mut b = Mat::zeros(n, n);
        for (l, kind) in frame.kinds.iter().enumerate() {
            let col = frame.a.col(l);
            let target = if kind.is_bracket() { &mut b } else { &mut s };
            for i in 0..n {
                for j in 0..n {
                    *target.at_mut(i, j) += col[i] * col[j];
                }
            }
        }
        GramPencil {
            sigma_part: s,
            bracket_part: b,
            n,
        }
    }

    pub fn gram_at(&self, r: f64) -> Mat {
        let mut g = Mat::zeros(self.n, self.n);
        let r2 = r * r;
        for k in 0..self.n * self.n {
            g.data[k] = r * self.sigma_part.data[k] + r2 * self.bracket_part.data[k];
        }
        g
    }

    /// `|y|_{A_R}` for any `R > 0` (no (0,1] restriction).
    pub fn norm_at(&self, r: f64, y: &[f64]) -> Result<f64> {
        let g = self.gram_at(r);
        let l = linalg::cholesky(&g, 1e-300).ok_or_else(|| TubeError::Domain(format!(
            "Gram matrix singular at R={r}"
        )))?;
        Ok(linalg::cholesky_quad_form(&l, self.n, y).max(0.0).sqrt())
    }
}
