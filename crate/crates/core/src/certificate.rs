//! Closed-form convergence certificates and the comparison bounds they rest on.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::problem::{LipschitzData, LipschitzValues};
use crate::signals::Signal;

/// `κ = c⁻¹(1 − e^{−cT})`.
pub fn kappa(c: f64, horizon: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid(format!("contraction rate must be positive, got {c}")));
    }
    if !(horizon >= 0.0) {
        return Err(invalid(format!("horizon must be nonnegative, got {horizon}")));
    }
    Ok(-(-c * horizon).exp_m1() / c)
}

/// Each product that enters `b₁` and `b₂`, kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTerms {
    /// `ℓ_{h,x} ℓ_{f,u}`
    pub hx_fu: f64,
    /// `ℓ_{h,λ} ℓ_{ψx,x} ℓ_{f,u}`
    pub hlam_psixx_fu: f64,
    /// `ℓ_{h,λ} ℓ_{φx,u}`
    pub hlam_phixu: f64,
    /// `ℓ_{h,λ} ℓ_{fx,u}`
    pub hlam_fxu: f64,
    /// `ℓ_{h,λ} ℓ_{f,u} ℓ_{φx,x}`
    pub hlam_fu_phixx: f64,
    /// `ℓ_{h,λ} ℓ_{f,u} ℓ_{fx,x}`
    pub hlam_fu_fxx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub b1: f64,
    pub b2: f64,
    pub terms: CoefficientTerms,
}

/// `b₁ = ℓ_{h,x}ℓ_{f,u} + ℓ_{h,λ}(ℓ_{ψx,x}ℓ_{f,u} + ℓ_{φx,u} + ℓ_{fx,u})`,
/// `b₂ = ℓ_{h,λ}ℓ_{f,u}(ℓ_{φx,x} + ℓ_{fx,x})`.
pub fn coefficients(v: &LipschitzValues) -> Coefficients {
    let terms = CoefficientTerms {
        hx_fu: v.l_hx * v.l_fu,
        hlam_psixx_fu: v.l_hlam * v.l_psixx * v.l_fu,
        hlam_phixu: v.l_hlam * v.l_phixu,
        hlam_fxu: v.l_hlam * v.l_fxu,
        hlam_fu_phixx: v.l_hlam * v.l_fu * v.l_phixx,
        hlam_fu_fxx: v.l_hlam * v.l_fu * v.l_fxx,
    };
    Coefficients {
        b1: v.l_hx * v.l_fu + v.l_hlam * (v.l_psixx * v.l_fu + v.l_phixu + v.l_fxu),
        b2: v.l_hlam * v.l_fu * (v.l_phixx + v.l_fxx),
        terms,
    }
}

/// Whether the constants behind a certificate were declared or sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Soundness {
    Declared,
    /// At least one constant was estimated by sampling; the verdict is heuristic.
    Sampled,
}

/// Lipschitz bound on one MSA iteration and everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub horizon: f64,
    pub kappa: f64,
    pub b1: f64,
    pub b2: f64,
    pub terms: CoefficientTerms,
    /// `b₁κ + b₂κ²`
    pub lip_bound: f64,
    pub contractive: bool,
    /// Horizon at which `lip_bound` reaches 1; `None` when it never does.
    pub critical_horizon: Option<f64>,
    pub constants: LipschitzData,
    pub soundness: Soundness,
}

impl Certificate {
    /// Smallest `i` with `Lⁱ/(1 − L)·gap ≤ tol`, the a-priori iteration count of
    /// the Banach estimate. `None` when the bound is not contractive.
    pub fn iterations_for(&self, tol: f64, gap: f64) -> Option<usize> {
        iterations_for(self.lip_bound, tol, gap)
    }

    /// Banach envelope `Lⁱ/(1 − L)·gap` on the distance from iterate `i` to the fixed point.
    pub fn banach_envelope(&self, i: usize, gap: f64) -> Option<f64> {
        (self.lip_bound < 1.0).then(|| self.lip_bound.powi(i as i32) / (1.0 - self.lip_bound) * gap)
    }

    pub fn is_heuristic(&self) -> bool {
        self.soundness == Soundness::Sampled
    }
}

/// See [`Certificate::iterations_for`].
pub fn iterations_for(lip_bound: f64, tol: f64, gap: f64) -> Option<usize> {
    if !(lip_bound < 1.0) || !(tol > 0.0) || !(gap >= 0.0) {
        return None;
    }
    let target = tol * (1.0 - lip_bound);
    if gap <= target {
        return Some(0);
    }
    if lip_bound == 0.0 {
        return Some(1);
    }
    // estimate from logs, then settle the boundary exactly
    let mut i = ((target / gap).ln() / lip_bound.ln()).ceil().max(0.0) as usize;
    let holds = |i: usize| lip_bound.powi(i as i32) * gap <= target;
    while i > 0 && holds(i - 1) {
        i -= 1;
    }
    while !holds(i) {
        i += 1;
    }
    Some(i)
}

fn bound_at(c: Coefficients, rate: f64, horizon: f64) -> f64 {
    let k = -(-rate * horizon).exp_m1() / rate;
    c.b1 * k + c.b2 * k * k
}

/// Horizon `T*` with `b₁κ(T*) + b₂κ(T*)² = 1`, found by bisection.
pub fn critical_horizon(lip: &LipschitzData) -> Option<f64> {
    let v = lip.values();
    let co = coefficients(&v);
    let c = v.c;
    // κ increases to 1/c, so the bound is capped by its limit
    if co.b1 / c + co.b2 / (c * c) <= 1.0 {
        return None;
    }
    let mut hi = 1.0 / c;
    while bound_at(co, c, hi) <= 1.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if bound_at(co, c, mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Assembles the certificate for horizon `T`.
pub fn certify(lip: &LipschitzData, horizon: f64) -> Result<Certificate> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    let v = lip.values();
    let k = kappa(v.c, horizon)?;
    let co = coefficients(&v);
    let lip_bound = co.b1 * k + co.b2 * k * k;
    Ok(Certificate {
        horizon,
        kappa: k,
        b1: co.b1,
        b2: co.b2,
        terms: co.terms,
        lip_bound,
        contractive: lip_bound < 1.0,
        critical_horizon: critical_horizon(lip),
        constants: *lip,
        soundness: if lip.any_estimated() { Soundness::Sampled } else { Soundness::Declared },
    })
}

/// `Σ_{k≥0} (−z)^k / (k!·(k+1+m))` for small `|z|`.
fn series(z: f64, m: u32) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 0..20u32 {
        sum += term / f64::from(k + 1 + m);
        term *= -z / f64::from(k + 1);
    }
    sum
}

/// `∫₀¹ e^{−zs} ds` and `∫₀¹ s e^{−zs} ds` for `z ≥ 0`.
fn kernel_moments(z: f64) -> (f64, f64) {
    if z < 0.5 {
        (series(z, 0), series(z, 1))
    } else {
        let e = (-z).exp();
        let i0 = -(-z).exp_m1() / z;
        let i1 = (-(-z).exp_m1() - z * e) / (z * z);
        (i0, i1)
    }
}

/// `F_j = ∫₀^{t_j} e^{−c(t_j − τ)} g(τ) dτ` for the piecewise-linear interpolant
/// of the node values `g`.
///
/// For a gap that is the norm of a difference of piecewise-linear signals the
/// interpolant dominates the true gap by convexity, so the result is an upper
/// bound on the exact integral.
fn decaying_convolution(c: f64, h: f64, g: &[f64]) -> Vec<f64> {
    let (i0, i1) = kernel_moments(c * h);
    let decay = (-c * h).exp();
    let mut out = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    out.push(acc);
    for w in g.windows(2) {
        // with s = (t_{j+1} − τ)/h the kernel is e^{−chs} and g = g_{j+1}(1−s) + g_j s
        acc = decay * acc + h * (w[0] * i1 + w[1] * (i0 - i1));
        out.push(acc);
    }
    out
}

/// `B_j = ∫_{t_j}^T e^{−c(τ − t_j)} g(τ) dτ`.
fn anticipating_convolution(c: f64, h: f64, g: &[f64]) -> Vec<f64> {
    let rev: Vec<f64> = g.iter().rev().copied().collect();
    let mut out = decaying_convolution(c, h, &rev);
    out.reverse();
    out
}

fn gap_values(s: &Signal, what: &str) -> Result<Vec<f64>> {
    if s.dim() != 1 {
        return Err(invalid(format!("{what} gap must be a scalar signal")));
    }
    let v: Vec<f64> = s.values().iter().map(|x| x[0]).collect();
    if v.iter().any(|x| *x < 0.0) {
        return Err(invalid(format!("{what} gap must be nonnegative")));
    }
    Ok(v)
}

/// One input channel of the state comparison bound: its gain and its gap signal.
#[derive(Debug, Clone, Copy)]
pub struct InputGap<'a> {
    pub gain: f64,
    pub gap: &'a Signal,
}

/// State comparison bound at every node:
/// `e^{−ct}·x0_gap + Σᵢ ℓᵢ ∫₀ᵗ e^{−c(t−τ)} gapᵢ(τ) dτ`.
pub fn gronwall_rhs_nodes(c: f64, x0_gap: f64, inputs: &[InputGap<'_>]) -> Result<Vec<f64>> {
    if !(c > 0.0) || !(x0_gap >= 0.0) {
        return Err(invalid("need c > 0 and a nonnegative initial gap"));
    }
    let grid = *inputs.first().ok_or_else(|| invalid("at least one input gap is required"))?.gap.grid();
    let h = grid.step_size();
    let mut out: Vec<f64> = grid.times().map(|t| (-c * t).exp() * x0_gap).collect();
    for input in inputs {
        if *input.gap.grid() != grid {
            return Err(invalid("input gaps live on different grids"));
        }
        let conv = decaying_convolution(c, h, &gap_values(input.gap, "input")?);
        for (o, v) in out.iter_mut().zip(conv) {
            *o += input.gain * v;
        }
    }
    Ok(out)
}

/// State comparison bound at time `t`, interpolated linearly between nodes.
pub fn gronwall_rhs(c: f64, x0_gap: f64, inputs: &[InputGap<'_>], t: f64) -> Result<f64> {
    let nodes = gronwall_rhs_nodes(c, x0_gap, inputs)?;
    let grid = *inputs[0].gap.grid();
    at_time(&grid, &nodes, t)
}

fn at_time(grid: &crate::signals::Grid, nodes: &[f64], t: f64) -> Result<f64> {
    if t == grid.horizon() {
        return Ok(nodes[grid.steps()]);
    }
    let (j, th) = grid.locate(t)?;
    Ok(nodes[j] * (1.0 - th) + nodes[j + 1] * th)
}

/// The five contributions to the costate comparison bound at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostateBoundTerms {
    /// `e^{−c(T−t)}‖λ(T) − λ̄(T)‖⋆`
    pub terminal: f64,
    /// `∫_t^T e^{−c(τ−t)}‖v − v̄‖⋆`
    pub forcing: f64,
    /// `ℓ_{fx,u} ∫_t^T e^{−c(τ−t)}‖u − ū‖_U`
    pub direct_control: f64,
    /// `(ℓ_{fx,x}ℓ_{f,u}/c) sinh(c(T−t)) ∫₀ᵗ e^{−c(T−τ)}‖u − ū‖_U`
    pub past_control: f64,
    /// `(ℓ_{fx,x}ℓ_{f,u}/c) e^{−c(T−t)} ∫_t^T sinh(c(T−τ))‖u − ū‖_U`
    pub future_control: f64,
}

impl CostateBoundTerms {
    pub fn total(&self) -> f64 {
        self.terminal + self.forcing + self.direct_control + self.past_control + self.future_control
    }
}

/// Costate comparison bound, term by term, at every node.
///
/// The `sinh` products are rewritten as differences of exponentials with
/// nonpositive exponents so nothing overflows for large `cT`:
/// `sinh(c(T−t))e^{−c(T−τ)} = ½(e^{−c(t−τ)} − e^{−c(2T−t−τ)})` and
/// `e^{−c(T−t)}sinh(c(T−τ)) = ½(e^{−c(τ−t)} − e^{−c(2T−t−τ)})`.
pub fn costate_bound_terms(
    lip: &LipschitzValues,
    terminal_gap: f64,
    v_gap: &Signal,
    u_gap: &Signal,
) -> Result<Vec<CostateBoundTerms>> {
    let c = lip.c;
    if !(c > 0.0) || !(terminal_gap >= 0.0) {
        return Err(invalid("need c > 0 and a nonnegative terminal gap"));
    }
    let grid = *u_gap.grid();
    if *v_gap.grid() != grid {
        return Err(invalid("gap signals live on different grids"));
    }
    let (v, u) = (gap_values(v_gap, "forcing")?, gap_values(u_gap, "control")?);
    let h = grid.step_size();
    let horizon = grid.horizon();
    let fwd_u = decaying_convolution(c, h, &u);
    let back_u = anticipating_convolution(c, h, &u);
    let back_v = anticipating_convolution(c, h, &v);
    // G_j = ∫_{t_j}^T e^{−c(T−τ)} u dτ
    let mut g_tail = vec![0.0; u.len()];
    for j in (0..grid.steps()).rev() {
        let step = decaying_convolution(c, h, &u[j..j + 2])[1];
        g_tail[j] = g_tail[j + 1] + (-c * (horizon - grid.time(j + 1))).exp() * step;
    }
    let cross = lip.l_fxx * lip.l_fu / (2.0 * c);
    Ok(grid
        .times()
        .enumerate()
        .map(|(j, t)| {
            let rest = horizon - t;
            let decay = (-c * rest).exp();
            CostateBoundTerms {
                terminal: decay * terminal_gap,
                forcing: back_v[j],
                direct_control: lip.l_fxu * back_u[j],
                past_control: cross * (-(-2.0 * c * rest).exp_m1()) * fwd_u[j],
                future_control: cross * (back_u[j] - decay * g_tail[j]).max(0.0),
            }
        })
        .collect())
}

/// Costate comparison bound at every node.
pub fn costate_bound_rhs_nodes(
    lip: &LipschitzValues,
    terminal_gap: f64,
    v_gap: &Signal,
    u_gap: &Signal,
) -> Result<Vec<f64>> {
    Ok(costate_bound_terms(lip, terminal_gap, v_gap, u_gap)?.iter().map(|t| t.total()).collect())
}

/// Costate comparison bound at time `t`, interpolated linearly between nodes.
pub fn costate_bound_rhs(
    lip: &LipschitzValues,
    terminal_gap: f64,
    v_gap: &Signal,
    u_gap: &Signal,
    t: f64,
) -> Result<f64> {
    let nodes = costate_bound_rhs_nodes(lip, terminal_gap, v_gap, u_gap)?;
    at_time(u_gap.grid(), &nodes, t)
}

/// Sup-norm costate bound
/// `terminal_gap + κ·v_sup_gap + (ℓ_{fx,u}κ + ℓ_{fx,x}ℓ_{f,u}κ²)·u_sup_gap`.
pub fn costate_sup_rhs(
    lip: &LipschitzValues,
    terminal_gap: f64,
    v_sup_gap: f64,
    u_sup_gap: f64,
    horizon: f64,
) -> Result<f64> {
    let k = kappa(lip.c, horizon)?;
    Ok(terminal_gap + k * v_sup_gap + (lip.l_fxu * k + lip.l_fxx * lip.l_fu * k * k) * u_sup_gap)
}
