//! Vector norms, dual norms, induced matrix norms and logarithmic norms.
//!
//! Every norm here is an `l_p` norm with `p ∈ {1, 2, ∞}`, optionally composed
//! with a positive diagonal weight: `‖x‖ = ‖diag(w) x‖_p`. Weighted induced and
//! logarithmic norms reduce to the unweighted ones through the similarity
//! transform `A ↦ diag(w) A diag(w)⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Off-diagonal mass at which the Jacobi sweep stops.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Largest dimension for which `∞ → q` operator norms are computed by
/// enumerating the vertices of the unit cube.
const MAX_VERTEX_DIM: usize = 20;

/// A norm on `ℝⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormKindRepr", into = "NormKindRepr")]
pub enum NormKind {
    L1,
    L2,
    LInf,
    WeightedL1(Vec<f64>),
    WeightedL2(Vec<f64>),
    WeightedLInf(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Base {
    One,
    Two,
    Inf,
}

impl Base {
    fn dual(self) -> Base {
        match self {
            Base::One => Base::Inf,
            Base::Two => Base::Two,
            Base::Inf => Base::One,
        }
    }
}

impl NormKind {
    fn base(&self) -> Base {
        match self {
            NormKind::L1 | NormKind::WeightedL1(_) => Base::One,
            NormKind::L2 | NormKind::WeightedL2(_) => Base::Two,
            NormKind::LInf | NormKind::WeightedLInf(_) => Base::Inf,
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            NormKind::WeightedL1(w) | NormKind::WeightedL2(w) | NormKind::WeightedLInf(w) => {
                Some(w)
            }
            _ => None,
        }
    }

    fn from_parts(base: Base, weights: Option<Vec<f64>>) -> NormKind {
        match (base, weights) {
            (Base::One, None) => NormKind::L1,
            (Base::Two, None) => NormKind::L2,
            (Base::Inf, None) => NormKind::LInf,
            (Base::One, Some(w)) => NormKind::WeightedL1(w),
            (Base::Two, Some(w)) => NormKind::WeightedL2(w),
            (Base::Inf, Some(w)) => NormKind::WeightedLInf(w),
        }
    }

    /// Checks that the weights (if any) are positive, finite and of length `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(w) = self.weights() {
            if w.len() != dim {
                return Err(invalid(format!(
                    "norm weights have length {} but the space has dimension {dim}",
                    w.len()
                )));
            }
            if w.iter().any(|&wi| !(wi.is_finite() && wi > 0.0)) {
                return Err(invalid("norm weights must be positive and finite"));
            }
        }
        Ok(())
    }

    /// The kind whose norm is the dual of this one.
    pub fn dual(&self) -> NormKind {
        dual_kind(self)
    }
}

/// Serialized form: `{"kind": "l1"|"l2"|"linf"|"wl1"|"wl2"|"wlinf", "weights": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormKindRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl TryFrom<NormKindRepr> for NormKind {
    type Error = Error;

    fn try_from(repr: NormKindRepr) -> Result<Self> {
        let (base, weighted) = match repr.kind.as_str() {
            "l1" => (Base::One, false),
            "l2" => (Base::Two, false),
            "linf" => (Base::Inf, false),
            "wl1" => (Base::One, true),
            "wl2" => (Base::Two, true),
            "wlinf" => (Base::Inf, true),
            other => return Err(invalid(format!("unknown norm kind `{other}`"))),
        };
        match (weighted, repr.weights) {
            (false, None) => Ok(NormKind::from_parts(base, None)),
            (false, Some(_)) => Err(invalid(format!("norm `{}` takes no weights", repr.kind))),
            (true, None) => Err(invalid(format!("norm `{}` requires weights", repr.kind))),
            (true, Some(w)) => {
                let kind = NormKind::from_parts(base, Some(w));
                let dim = kind.weights().map_or(0, <[f64]>::len);
                kind.validate(dim)?;
                Ok(kind)
            }
        }
    }
}

impl From<NormKind> for NormKindRepr {
    fn from(kind: NormKind) -> Self {
        let name = match &kind {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
            NormKind::LInf => "linf",
            NormKind::WeightedL1(_) => "wl1",
            NormKind::WeightedL2(_) => "wl2",
            NormKind::WeightedLInf(_) => "wlinf",
        };
        NormKindRepr {
            kind: name.to_string(),
            weights: kind.weights().map(<[f64]>::to_vec),
        }
    }
}

fn base_vector_norm(x: impl Iterator<Item = f64>, base: Base) -> f64 {
    match base {
        Base::One => x.map(f64::abs).sum(),
        Base::Two => x.map(|v| v * v).sum::<f64>().sqrt(),
        Base::Inf => x.map(f64::abs).fold(0.0, f64::max),
    }
}

/// `‖x‖` for the given kind.
pub fn vector_norm(x: &DVector<f64>, kind: &NormKind) -> Result<f64> {
    kind.validate(x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("vector has non-finite entries"));
    }
    Ok(match kind.weights() {
        None => base_vector_norm(x.iter().copied(), kind.base()),
        Some(w) => base_vector_norm(x.iter().zip(w).map(|(xi, wi)| xi * wi), kind.base()),
    })
}

/// The dual norm kind: `‖x‖_⋆ = sup_{‖y‖ ≤ 1} yᵀx`.
///
/// `diag(w)`-weighted `l_p` is dual to `diag(1/w)`-weighted `l_{p*}`.
pub fn dual_kind(kind: &NormKind) -> NormKind {
    let base = kind.base().dual();
    let weights = kind
        .weights()
        .map(|w| w.iter().map(|wi| 1.0 / wi).collect());
    NormKind::from_parts(base, weights)
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        Err(invalid("matrix has non-finite entries"))
    } else {
        Ok(())
    }
}

/// `diag(w_out) A diag(w_in)⁻¹`, the matrix whose base-norm equals the weighted one.
fn rescale(a: &DMatrix<f64>, domain: &NormKind, codomain: &NormKind) -> Result<DMatrix<f64>> {
    domain.validate(a.ncols())?;
    codomain.validate(a.nrows())?;
    let mut m = a.clone();
    if let Some(w) = codomain.weights() {
        for (i, wi) in w.iter().enumerate() {
            m.row_mut(i).scale_mut(*wi);
        }
    }
    if let Some(w) = domain.weights() {
        for (j, wj) in w.iter().enumerate() {
            m.column_mut(j).scale_mut(1.0 / wj);
        }
    }
    Ok(m)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(invalid("eigenvalues require a square matrix"));
    }
    check_finite(a)?;
    let n = a.nrows();
    let mut m = a.clone();
    // symmetrize to kill round-off asymmetry in the input
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0.0);
    }
    let gram = m.transpose() * m;
    let top = symmetric_eigenvalues(&gram)?.last().copied().unwrap_or(0.0);
    Ok(top.max(0.0).sqrt())
}

/// `max_{s ∈ {±1}^k} ‖M s‖_q`, exact for operator norms with an `l_∞` domain.
fn cube_vertex_norm(m: &DMatrix<f64>, codomain: Base) -> Result<f64> {
    let k = m.ncols();
    if k == 0 {
        return Ok(0.0);
    }
    if k > MAX_VERTEX_DIM {
        return Err(invalid(format!(
            "operator norm from l_inf needs vertex enumeration; dimension {k} exceeds {MAX_VERTEX_DIM}"
        )));
    }
    let mut best = 0.0_f64;
    // the sign of the first coordinate can be fixed by symmetry
    for mask in 0..(1usize << (k - 1)) {
        let image = (0..m.nrows()).map(|i| {
            (0..k)
                .map(|j| {
                    let sign = if j > 0 && (mask >> (j - 1)) & 1 == 1 { -1.0 } else { 1.0 };
                    sign * m[(i, j)]
                })
                .sum::<f64>()
        });
        best = best.max(base_vector_norm(image, codomain));
    }
    Ok(best)
}

fn base_operator_norm(m: &DMatrix<f64>, domain: Base, codomain: Base) -> Result<f64> {
    match (domain, codomain) {
        (Base::One, q) => Ok(m
            .column_iter()
            .map(|col| base_vector_norm(col.iter().copied(), q))
            .fold(0.0, f64::max)),
        (p, Base::Inf) => Ok(m
            .row_iter()
            .map(|row| base_vector_norm(row.iter().copied(), p.dual()))
            .fold(0.0, f64::max)),
        (Base::Two, Base::Two) => spectral_norm(m),
        (Base::Inf, q) => cube_vertex_norm(m, q),
        // ‖M‖_{2→1} = ‖Mᵀ‖_{∞→2}
        (Base::Two, Base::One) => cube_vertex_norm(&m.transpose(), Base::Two),
    }
}

/// Operator norm of `A : (ℝᵏ, domain) → (ℝⁿ, codomain)`.
pub fn induced_norm_between(
    a: &DMatrix<f64>,
    domain: &NormKind,
    codomain: &NormKind,
) -> Result<f64> {
    check_finite(a)?;
    let m = rescale(a, domain, codomain)?;
    base_operator_norm(&m, domain.base(), codomain.base())
}

/// Induced norm `‖A‖ = sup_{‖x‖=1} ‖Ax‖` with the same norm on both sides.
///
/// Unweighted kinds accept rectangular matrices; weighted kinds need a square one.
pub fn induced_matrix_norm(a: &DMatrix<f64>, kind: &NormKind) -> Result<f64> {
    if kind.weights().is_some() && !a.is_square() {
        return Err(invalid("weighted induced norm requires a square matrix"));
    }
    induced_norm_between(a, kind, kind)
}

/// Logarithmic norm (matrix measure) `μ(A)`.
pub fn log_norm(a: &DMatrix<f64>, kind: &NormKind) -> Result<f64> {
    if !a.is_square() {
        return Err(invalid(format!(
            "log norm requires a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    let m = rescale(a, kind, kind)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(match kind.base() {
        Base::One => (0..n)
            .map(|j| m[(j, j)] + (0..n).filter(|&i| i != j).map(|i| m[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
        Base::Inf => (0..n)
            .map(|i| m[(i, i)] + (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
        Base::Two => {
            let sym = (&m + m.transpose()) * 0.5;
            *symmetric_eigenvalues(&sym)?.last().expect("nonempty")
        }
    })
}
