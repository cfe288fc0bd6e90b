//! Optimal control problem instances, the Hamiltonian, Lipschitz constants and
//! the bounded state/costate sets that those constants are measured on.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norms::{dual_kind, log_norm, vector_norm, NormKind};
use crate::sampling::{ball_point, Halton, Sampler};
use crate::signals::{BoxSet, Grid, Interpolation, Signal};

pub type VectorField = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalCost = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalGradient = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `(t, x, λ) ↦ u`, a selection of `argmin_u H(t, x, λ, u)`.
pub type Minimizer = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Relative step of the central differences used to validate derivatives.
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const FD_POINTS: usize = 16;
/// Step used for the control gradient of the running cost.
const PHI_U_STEP: f64 = 1e-5;

/// A fixed-horizon optimal control problem with `μ = 1`:
/// minimize `∫₀ᵀ φ(t, x, u) dt + ψ(x(T))` subject to `ẋ = f(t, x, u)`, `x(0) = x₀`, `u(t) ∈ U`.
///
/// Callbacks must be pure. Construct through [`ProblemBuilder`], which checks
/// every supplied derivative against central differences.
#[derive(Clone)]
pub struct ProblemSpec {
    pub(crate) f: VectorField,
    pub(crate) dxf: MatrixField,
    pub(crate) duf: MatrixField,
    pub(crate) phi: ScalarField,
    pub(crate) phix: VectorField,
    pub(crate) psi: TerminalCost,
    pub(crate) psix: TerminalGradient,
    pub(crate) control_box: BoxSet,
    pub(crate) state_norm: NormKind,
    pub(crate) control_norm: NormKind,
    pub(crate) analytic_minimizer: Option<Minimizer>,
    pub(crate) x0: DVector<f64>,
    pub(crate) horizon: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("state_dim", &self.state_dim())
            .field("control_dim", &self.control_dim())
            .field("control_box", &self.control_box)
            .field("state_norm", &self.state_norm)
            .field("control_norm", &self.control_norm)
            .field("analytic_minimizer", &self.analytic_minimizer.is_some())
            .field("x0", &self.x0.as_slice())
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl ProblemSpec {
    pub fn builder(x0: DVector<f64>, horizon: f64, control_box: BoxSet) -> ProblemBuilder {
        ProblemBuilder::new(x0, horizon, control_box)
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn control_box(&self) -> &BoxSet {
        &self.control_box
    }

    pub fn state_norm(&self) -> &NormKind {
        &self.state_norm
    }

    /// The dual of the state norm, used for costates.
    pub fn costate_norm(&self) -> NormKind {
        dual_kind(&self.state_norm)
    }

    pub fn control_norm(&self) -> &NormKind {
        &self.control_norm
    }

    pub fn has_analytic_minimizer(&self) -> bool {
        self.analytic_minimizer.is_some()
    }

    pub fn f(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x, u)
    }

    pub fn dxf(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.dxf)(t, x, u)
    }

    pub fn duf(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.duf)(t, x, u)
    }

    pub fn phi(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.phi)(t, x, u)
    }

    pub fn phix(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.phix)(t, x, u)
    }

    pub fn psi(&self, x: &DVector<f64>) -> f64 {
        (self.psi)(x)
    }

    pub fn psix(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.psix)(x)
    }

    /// `φ_u` by central differences.
    pub fn phiu(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(u.len());
        let mut up = u.clone();
        for i in 0..u.len() {
            let h = PHI_U_STEP * u[i].abs().max(1.0);
            up[i] = u[i] + h;
            let fp = self.phi(t, x, &up);
            up[i] = u[i] - h;
            let fm = self.phi(t, x, &up);
            up[i] = u[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// `∂H/∂u = D_u fᵀ λ + φ_u`.
    pub fn hamiltonian_gradient_u(
        &self,
        t: f64,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        self.duf(t, x, u).transpose() * lam + self.phiu(t, x, u)
    }

    /// The analytic minimizer, clamped into the control box, if one was supplied.
    pub fn analytic_minimizer(&self, t: f64, x: &DVector<f64>, lam: &DVector<f64>) -> Option<DVector<f64>> {
        self.analytic_minimizer.as_ref().map(|h| self.control_box.clamp(&h(t, x, lam)))
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(ProblemSpec { horizon, ..self.clone() })
    }

    pub fn with_x0(&self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.state_dim() {
            return Err(invalid("initial state has the wrong dimension"));
        }
        Ok(ProblemSpec { x0, ..self.clone() })
    }

    pub fn with_norms(&self, state_norm: NormKind, control_norm: NormKind) -> Result<Self> {
        state_norm.validate(self.state_dim())?;
        control_norm.validate(self.control_dim())?;
        Ok(ProblemSpec { state_norm, control_norm, ..self.clone() })
    }

    pub fn with_control_box(&self, control_box: BoxSet) -> Result<Self> {
        if control_box.dim() != self.control_dim() {
            return Err(invalid("control box has the wrong dimension"));
        }
        Ok(ProblemSpec { control_box, ..self.clone() })
    }

    /// Uniform grid over this problem's horizon.
    pub fn grid(&self, steps: usize) -> Result<Grid> {
        Grid::new(self.horizon, steps)
    }

    /// The all-zero control on `grid`.
    pub fn zero_control(&self, grid: Grid) -> Signal {
        Signal::constant(grid, DVector::zeros(self.control_dim()), Interpolation::PiecewiseLinear)
            .expect("zero control is valid")
    }
}

/// Builder for [`ProblemSpec`]. Costs default to zero and norms to `l_2`.
pub struct ProblemBuilder {
    spec: ProblemSpec,
    dynamics_set: bool,
    skip_checks: bool,
}

impl ProblemBuilder {
    fn new(x0: DVector<f64>, horizon: f64, control_box: BoxSet) -> Self {
        let n = x0.len();
        let k = control_box.dim();
        ProblemBuilder {
            spec: ProblemSpec {
                f: Arc::new(move |_, _, _| DVector::zeros(n)),
                dxf: Arc::new(move |_, _, _| DMatrix::zeros(n, n)),
                duf: Arc::new(move |_, _, _| DMatrix::zeros(n, k)),
                phi: Arc::new(|_, _, _| 0.0),
                phix: Arc::new(move |_, _, _| DVector::zeros(n)),
                psi: Arc::new(|_| 0.0),
                psix: Arc::new(move |_| DVector::zeros(n)),
                control_box,
                state_norm: NormKind::L2,
                control_norm: NormKind::L2,
                analytic_minimizer: None,
                x0,
                horizon,
            },
            dynamics_set: false,
            skip_checks: false,
        }
    }

    pub fn dynamics(
        mut self,
        f: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        dxf: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        duf: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.f = Arc::new(f);
        self.spec.dxf = Arc::new(dxf);
        self.spec.duf = Arc::new(duf);
        self.dynamics_set = true;
        self
    }

    pub fn running_cost(
        mut self,
        phi: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        phix: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.phi = Arc::new(phi);
        self.spec.phix = Arc::new(phix);
        self
    }

    pub fn terminal_cost(
        mut self,
        psi: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        psix: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.psi = Arc::new(psi);
        self.spec.psix = Arc::new(psix);
        self
    }

    pub fn norms(mut self, state_norm: NormKind, control_norm: NormKind) -> Self {
        self.spec.state_norm = state_norm;
        self.spec.control_norm = control_norm;
        self
    }

    pub fn minimizer(
        mut self,
        h: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.analytic_minimizer = Some(Arc::new(h));
        self
    }

    /// Skips the finite-difference derivative checks. Only for callers that
    /// have already validated the same callbacks.
    pub fn trusted(mut self) -> Self {
        self.skip_checks = true;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let spec = self.spec;
        let n = spec.state_dim();
        if n == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if spec.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial state must be finite"));
        }
        if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {}", spec.horizon)));
        }
        if !self.dynamics_set {
            return Err(invalid("dynamics were not supplied"));
        }
        spec.state_norm.validate(n)?;
        spec.control_norm.validate(spec.control_dim())?;
        if !self.skip_checks {
            check_derivatives(&spec)?;
        }
        Ok(spec)
    }
}

fn fd_points(spec: &ProblemSpec) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let n = spec.state_dim();
    let k = spec.control_dim();
    let halton = Halton::new(1 + n + k, 0xfd);
    let spread = spec.x0.amax().max(1.0);
    (0..FD_POINTS)
        .map(|i| {
            let p = halton.point(i);
            let t = p[0] * spec.horizon;
            let x = DVector::from_fn(n, |j, _| spec.x0[j] + spread * (2.0 * p[1 + j] - 1.0));
            let u = spec.control_box.from_unit(&p[1 + n..]);
            (t, x, u)
        })
        .collect()
}

fn fd_step(v: f64) -> f64 {
    FD_STEP * v.abs().max(1.0)
}

fn scaled_dev(err: f64, scale: f64) -> f64 {
    err / scale.max(1.0)
}

fn check_derivatives(spec: &ProblemSpec) -> Result<()> {
    scan_derivatives(spec, true).map(|_| ())
}

/// Largest scaled deviation between the supplied derivatives and central
/// differences, over the same deterministic points the builder checks.
pub fn derivative_deviation(spec: &ProblemSpec) -> Result<f64> {
    scan_derivatives(spec, false)
}

fn scan_derivatives(spec: &ProblemSpec, strict: bool) -> Result<f64> {
    let n = spec.state_dim();
    let k = spec.control_dim();
    let mut worst = 0.0_f64;
    for (t, x, u) in fd_points(spec) {
        let fx = spec.f(t, &x, &u);
        if fx.len() != n {
            return Err(invalid(format!("f returns dimension {} but the state has {n}", fx.len())));
        }
        let jx = spec.dxf(t, &x, &u);
        let ju = spec.duf(t, &x, &u);
        if jx.shape() != (n, n) || ju.shape() != (n, k) {
            return Err(invalid("Jacobian callbacks return the wrong shape"));
        }
        let gx = spec.phix(t, &x, &u);
        let gpsi = spec.psix(&x);
        if gx.len() != n || gpsi.len() != n {
            return Err(invalid("gradient callbacks return the wrong dimension"));
        }

        let mut dev_fx = 0.0_f64;
        let mut dev_phix = 0.0_f64;
        let mut dev_psix = 0.0_f64;
        let mut xp = x.clone();
        for j in 0..n {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            let (fp, pp, sp) = (spec.f(t, &xp, &u), spec.phi(t, &xp, &u), spec.psi(&xp));
            xp[j] = x[j] - h;
            let (fm, pm, sm) = (spec.f(t, &xp, &u), spec.phi(t, &xp, &u), spec.psi(&xp));
            xp[j] = x[j];
            let col = (fp - fm) / (2.0 * h);
            dev_fx = dev_fx.max(scaled_dev((col - jx.column(j)).amax(), jx.amax()));
            dev_phix = dev_phix.max(scaled_dev(((pp - pm) / (2.0 * h) - gx[j]).abs(), gx.amax()));
            dev_psix = dev_psix.max(scaled_dev(((sp - sm) / (2.0 * h) - gpsi[j]).abs(), gpsi.amax()));
        }
        let mut dev_fu = 0.0_f64;
        let mut up = u.clone();
        for j in 0..k {
            let h = fd_step(u[j]);
            up[j] = u[j] + h;
            let fp = spec.f(t, &x, &up);
            up[j] = u[j] - h;
            let fm = spec.f(t, &x, &up);
            up[j] = u[j];
            let col = (fp - fm) / (2.0 * h);
            dev_fu = dev_fu.max(scaled_dev((col - ju.column(j)).amax(), ju.amax()));
        }
        for (what, dev) in [("D_x f", dev_fx), ("D_u f", dev_fu), ("phi_x", dev_phix), ("psi_x", dev_psix)] {
            if strict && !(dev <= FD_TOL) {
                return Err(Error::DerivativeMismatch { what, deviation: dev });
            }
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

/// Tolerance used by the constructor-time derivative check.
pub const DERIVATIVE_TOLERANCE: f64 = FD_TOL;

/// `H(t, x, λ, u) = λᵀ f(t, x, u) + φ(t, x, u)`.
pub fn hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    if !spec.control_box.contains(u) {
        return Err(invalid(format!("control {:?} lies outside the control box", u.as_slice())));
    }
    Ok(lam.dot(&spec.f(t, x, u)) + spec.phi(t, x, u))
}

/// Whether a constant was supplied by the user or estimated by sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Declared,
    Estimated,
}

/// A single constant together with where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
}

/// Plain numeric values of the nine constants; also the schema of a
/// declared-constants file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzValues {
    /// Contraction rate.
    pub c: f64,
    #[serde(default)]
    pub l_fu: f64,
    #[serde(default)]
    pub l_fxx: f64,
    #[serde(default)]
    pub l_fxu: f64,
    #[serde(default)]
    pub l_phixx: f64,
    #[serde(default)]
    pub l_phixu: f64,
    #[serde(default)]
    pub l_psixx: f64,
    #[serde(default)]
    pub l_hx: f64,
    #[serde(default)]
    pub l_hlam: f64,
}

impl LipschitzValues {
    fn as_array(&self) -> [(&'static str, f64); 9] {
        [
            ("c", self.c),
            ("l_fu", self.l_fu),
            ("l_fxx", self.l_fxx),
            ("l_fxu", self.l_fxu),
            ("l_phixx", self.l_phixx),
            ("l_phixu", self.l_phixu),
            ("l_psixx", self.l_psixx),
            ("l_hx", self.l_hx),
            ("l_hlam", self.l_hlam),
        ]
    }
}

/// Contraction rate and Lipschitz constants, each tagged with its provenance.
///
/// Domain and codomain norms follow the problem: states in `‖·‖`, costates in
/// `‖·‖_⋆`, controls in `‖·‖_U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzData {
    pub c: Constant,
    /// `u ↦ f(t, x, u)`, `U → X`.
    pub l_fu: Constant,
    /// `x ↦ D_x f(t, x, u)ᵀ λ`, `X → X⋆`.
    pub l_fxx: Constant,
    /// `u ↦ D_x f(t, x, u)ᵀ λ`, `U → X⋆`.
    pub l_fxu: Constant,
    pub l_phixx: Constant,
    pub l_phixu: Constant,
    pub l_psixx: Constant,
    pub l_hx: Constant,
    pub l_hlam: Constant,
}

impl LipschitzData {
    pub fn new(values: LipschitzValues, provenance: Provenance) -> Result<Self> {
        for (name, v) in values.as_array() {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("constant {name} must be finite and nonnegative, got {v}")));
            }
        }
        if values.c <= 0.0 {
            return Err(invalid(format!("contraction rate must be positive, got {}", values.c)));
        }
        let k = |value| Constant { value, provenance };
        Ok(LipschitzData {
            c: k(values.c),
            l_fu: k(values.l_fu),
            l_fxx: k(values.l_fxx),
            l_fxu: k(values.l_fxu),
            l_phixx: k(values.l_phixx),
            l_phixu: k(values.l_phixu),
            l_psixx: k(values.l_psixx),
            l_hx: k(values.l_hx),
            l_hlam: k(values.l_hlam),
        })
    }

    pub fn declared(values: LipschitzValues) -> Result<Self> {
        LipschitzData::new(values, Provenance::Declared)
    }

    pub fn values(&self) -> LipschitzValues {
        LipschitzValues {
            c: self.c.value,
            l_fu: self.l_fu.value,
            l_fxx: self.l_fxx.value,
            l_fxu: self.l_fxu.value,
            l_phixx: self.l_phixx.value,
            l_phixu: self.l_phixu.value,
            l_psixx: self.l_psixx.value,
            l_hx: self.l_hx.value,
            l_hlam: self.l_hlam.value,
        }
    }

    fn all(&self) -> [&Constant; 9] {
        [
            &self.c,
            &self.l_fu,
            &self.l_fxx,
            &self.l_fxu,
            &self.l_phixx,
            &self.l_phixu,
            &self.l_psixx,
            &self.l_hx,
            &self.l_hlam,
        ]
    }

    /// True when any constant was estimated, which makes derived bounds heuristic.
    pub fn any_estimated(&self) -> bool {
        self.all().iter().any(|c| c.provenance == Provenance::Estimated)
    }
}

/// A state ball `X` and a costate ball `Λ` (about the origin, in the dual norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedSets {
    pub x_center: Vec<f64>,
    pub x_radius: f64,
    pub lam_radius: f64,
}

impl BoundedSets {
    pub fn new(x_center: DVector<f64>, x_radius: f64, lam_radius: f64) -> Result<Self> {
        if !(x_radius.is_finite() && x_radius >= 0.0 && lam_radius.is_finite() && lam_radius >= 0.0) {
            return Err(invalid("bounded-set radii must be finite and nonnegative"));
        }
        Ok(BoundedSets { x_center: x_center.iter().copied().collect(), x_radius, lam_radius })
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_center)
    }

    pub fn contains_state(&self, x: &DVector<f64>, norm: &NormKind, slack: f64) -> Result<bool> {
        Ok(vector_norm(&(x - self.center()), norm)? <= self.x_radius + slack)
    }

    pub fn contains_costate(&self, lam: &DVector<f64>, dual: &NormKind, slack: f64) -> Result<bool> {
        Ok(vector_norm(lam, dual)? <= self.lam_radius + slack)
    }
}

/// Outcome of [`verify_contraction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub max_lognorm: f64,
    pub c_claimed: f64,
    pub pass: bool,
    pub samples: usize,
    pub note: String,
}

const SAMPLED_NOTE: &str = "sampled necessary check, not a proof";

fn region_point(
    spec: &ProblemSpec,
    bounds: &BoundedSets,
    p: &[f64],
) -> (f64, DVector<f64>, DVector<f64>) {
    let n = spec.state_dim();
    let t = p[0] * spec.horizon;
    let x = ball_point(&bounds.center(), bounds.x_radius, &spec.state_norm, &p[1..1 + n]);
    let u = spec.control_box.from_unit(&p[1 + n..]);
    (t, x, u)
}

fn max_sampled_lognorm(
    spec: &ProblemSpec,
    bounds: &BoundedSets,
    sampler: Sampler,
    transpose: bool,
) -> Result<f64> {
    if sampler.budget == 0 {
        return Err(invalid("sampling budget must be at least 1"));
    }
    let n = spec.state_dim();
    let k = spec.control_dim();
    let halton = Halton::new(1 + n + k, sampler.seed);
    let kind = if transpose { spec.costate_norm() } else { spec.state_norm.clone() };
    let mut worst = f64::NEG_INFINITY;
    for i in 0..sampler.budget {
        let (t, x, u) = region_point(spec, bounds, &halton.point(i));
        let j = spec.dxf(t, &x, &u);
        let j = if transpose { j.transpose() } else { j };
        worst = worst.max(log_norm(&j, &kind)?);
    }
    Ok(worst)
}

/// Samples `μ(D_x f)` over `[0, T] × X × U` and compares it with `−c_claimed`.
pub fn verify_contraction(
    spec: &ProblemSpec,
    bounds: &BoundedSets,
    c_claimed: f64,
    sampler: Sampler,
) -> Result<ContractionReport> {
    let max_lognorm = max_sampled_lognorm(spec, bounds, sampler, false)?;
    Ok(ContractionReport {
        max_lognorm,
        c_claimed,
        pass: max_lognorm <= -c_claimed + 1e-9,
        samples: sampler.budget,
        note: SAMPLED_NOTE.to_string(),
    })
}

/// Same check for the time-reversed costate field `λ̃' = D_x fᵀ λ̃ + φ_x`,
/// whose Jacobian is `D_x fᵀ`, measured in the dual norm.
pub fn verify_costate_contraction(
    spec: &ProblemSpec,
    bounds: &BoundedSets,
    c_claimed: f64,
    sampler: Sampler,
) -> Result<ContractionReport> {
    let max_lognorm = max_sampled_lognorm(spec, bounds, sampler, true)?;
    Ok(ContractionReport {
        max_lognorm,
        c_claimed,
        pass: max_lognorm <= -c_claimed + 1e-9,
        samples: sampler.budget,
        note: SAMPLED_NOTE.to_string(),
    })
}

/// Result of [`estimate_constants`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimate {
    pub constants: LipschitzData,
    /// Constants forced to zero because their sampling region collapsed.
    pub degenerate: Vec<String>,
}

#[derive(Default)]
struct Quotients {
    l_fu: f64,
    l_fxx: f64,
    l_fxu: f64,
    l_phixx: f64,
    l_phixu: f64,
    l_psixx: f64,
    l_hx: f64,
    l_hlam: f64,
}

fn quotient(num: f64, den: f64) -> f64 {
    if den > 1e-14 && num.is_finite() {
        num / den
    } else {
        0.0
    }
}

/// Samples difference quotients of every map named in the Lipschitz
/// assumptions, over `[0, T] × X × U × Λ`. The results are lower bounds on the
/// true constants and are tagged [`Provenance::Estimated`].
///
/// Each sample contributes a far pair (two independent points of the region)
/// and a near pair (a short step along the same direction).
pub fn estimate_constants(
    spec: &ProblemSpec,
    bounds: &BoundedSets,
    sampler: Sampler,
) -> Result<ConstantEstimate> {
    if sampler.budget == 0 {
        return Err(invalid("sampling budget must be at least 1"));
    }
    let n = spec.state_dim();
    let k = spec.control_dim();
    let xn = &spec.state_norm;
    let un = &spec.control_norm;
    let dn = spec.costate_norm();
    let center = bounds.center();
    let zero_lam = DVector::zeros(n);
    let halton = Halton::new(1 + 2 * n + 2 * k + 2 * n, sampler.seed);

    let c = -max_sampled_lognorm(spec, bounds, sampler, false)?;
    if !(c > 0.0) {
        return Err(invalid(format!(
            "sampled Jacobians are not contracting in the chosen norm (max log norm {})",
            -c
        )));
    }

    let mut q = Quotients::default();
    let near = 1e-4;
    for i in 0..sampler.budget {
        let p = halton.point(i);
        let t = p[0] * spec.horizon;
        let mut o = 1;
        let x1 = ball_point(&center, bounds.x_radius, xn, &p[o..o + n]);
        o += n;
        let x2 = ball_point(&center, bounds.x_radius, xn, &p[o..o + n]);
        o += n;
        let u1 = spec.control_box.from_unit(&p[o..o + k]);
        o += k;
        let u2 = spec.control_box.from_unit(&p[o..o + k]);
        o += k;
        let l1 = ball_point(&zero_lam, bounds.lam_radius, &dn, &p[o..o + n]);
        o += n;
        let l2 = ball_point(&zero_lam, bounds.lam_radius, &dn, &p[o..o + n]);

        let x2n = &x1 + (&x2 - &x1) * near;
        let u2n = &u1 + (&u2 - &u1) * near;
        let l2n = &l1 + (&l2 - &l1) * near;

        for (xb, ub, lb) in [(&x2, &u2, &l2), (&x2n, &u2n, &l2n)] {
            let dx = vector_norm(&(xb - &x1), xn)?;
            let du = vector_norm(&(ub - &u1), un)?;
            let dl = vector_norm(&(lb - &l1), &dn)?;

            let df = spec.f(t, &x1, &u1) - spec.f(t, &x1, ub);
            q.l_fu = q.l_fu.max(quotient(vector_norm(&df, xn)?, du));

            let a1 = spec.dxf(t, &x1, &u1).transpose() * &l1;
            let ax = spec.dxf(t, xb, &u1).transpose() * &l1;
            let au = spec.dxf(t, &x1, ub).transpose() * &l1;
            q.l_fxx = q.l_fxx.max(quotient(vector_norm(&(&a1 - ax), &dn)?, dx));
            q.l_fxu = q.l_fxu.max(quotient(vector_norm(&(&a1 - au), &dn)?, du));

            let g1 = spec.phix(t, &x1, &u1);
            q.l_phixx = q.l_phixx.max(quotient(vector_norm(&(&g1 - spec.phix(t, xb, &u1)), &dn)?, dx));
            q.l_phixu = q.l_phixu.max(quotient(vector_norm(&(&g1 - spec.phix(t, &x1, ub)), &dn)?, du));
            q.l_psixx = q
                .l_psixx
                .max(quotient(vector_norm(&(spec.psix(&x1) - spec.psix(xb)), &dn)?, dx));

            let h1 = crate::msa::minimize_hamiltonian(spec, t, &x1, &l1)?;
            let hx = crate::msa::minimize_hamiltonian(spec, t, xb, &l1)?;
            let hl = crate::msa::minimize_hamiltonian(spec, t, &x1, lb)?;
            q.l_hx = q.l_hx.max(quotient(vector_norm(&(&h1 - hx), un)?, dx));
            q.l_hlam = q.l_hlam.max(quotient(vector_norm(&(&h1 - hl), un)?, dl));
        }
    }

    let mut degenerate = Vec::new();
    if bounds.x_radius == 0.0 {
        degenerate.extend(["l_fxx", "l_phixx", "l_psixx", "l_hx"].map(String::from));
    }
    if bounds.lam_radius == 0.0 {
        degenerate.extend(["l_fxx", "l_fxu", "l_hlam"].map(String::from));
        degenerate.dedup();
    }
    let values = LipschitzValues {
        c,
        l_fu: q.l_fu,
        l_fxx: q.l_fxx,
        l_fxu: q.l_fxu,
        l_phixx: q.l_phixx,
        l_phixu: q.l_phixu,
        l_psixx: q.l_psixx,
        l_hx: q.l_hx,
        l_hlam: q.l_hlam,
    };
    Ok(ConstantEstimate { constants: LipschitzData::new(values, Provenance::Estimated)?, degenerate })
}

/// Number of `(t, u)` samples used for the costate forcing supremum.
const FORCING_SAMPLES: usize = 64;

/// Balls containing every state and costate reachable with in-box controls.
///
/// `X` is centred on the zero-input trajectory `x̄`: its radius is the spread
/// of `x̄` about the centre plus `(ℓ_{f,u}/c)(1 − e^{−cT}) max_{u∈U} ‖u‖_U`.
/// `Λ` bounds the terminal costate through `ψ_x` and adds `κ` times a bound on
/// the forcing `‖φ_x‖_⋆` over `X × U`.
pub fn bounded_sets(spec: &ProblemSpec, lip: &LipschitzData, grid: Grid) -> Result<BoundedSets> {
    let zero = spec.zero_control(grid);
    let traj = crate::sweep::forward_sweep(spec, &zero)?;
    let nodes = traj.state.values();
    let n = spec.state_dim();
    let lo = DVector::from_fn(n, |i, _| nodes.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min));
    let hi = DVector::from_fn(n, |i, _| nodes.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max));
    let center = (lo + hi) * 0.5;
    let mut envelope = 0.0_f64;
    for v in nodes {
        envelope = envelope.max(vector_norm(&(v - &center), &spec.state_norm)?);
    }
    let c = lip.c.value;
    let kappa = crate::certificate::kappa(c, spec.horizon)?;
    let u_max = spec.control_box.max_norm(&spec.control_norm)?;
    let x_radius = envelope + lip.l_fu.value * kappa * u_max;

    let dn = spec.costate_norm();
    let terminal = vector_norm(&spec.psix(&center), &dn)? + lip.l_psixx.value * x_radius;

    let k = spec.control_dim();
    let halton = Halton::new(1 + k, 0xb0);
    let mut forcing_at_center = 0.0_f64;
    let lo_u = spec.control_box.lower().clone();
    let hi_u = spec.control_box.upper().clone();
    let corners = (0..(1usize << k.min(12))).map(|mask| {
        (0.0, DVector::from_fn(k, |i, _| if (mask >> i) & 1 == 1 { hi_u[i] } else { lo_u[i] }))
    });
    let interior = (0..FORCING_SAMPLES).map(|i| {
        let p = halton.point(i);
        (p[0] * spec.horizon, spec.control_box.from_unit(&p[1..]))
    });
    for (t, u) in corners.chain(interior) {
        forcing_at_center = forcing_at_center.max(vector_norm(&spec.phix(t, &center, &u), &dn)?);
    }
    let forcing = forcing_at_center + lip.l_phixx.value * x_radius;
    let lam_radius = terminal + kappa * forcing;
    BoundedSets::new(center, x_radius, lam_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    pub(crate) fn scalar_lqr(box_r: f64) -> ProblemSpec {
        ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, box_r).unwrap())
            .dynamics(
                |_, x, u| dvector![-x[0] + u[0]],
                |_, _, _| dmatrix![-1.0],
                |_, _, _| dmatrix![1.0],
            )
            .running_cost(|_, x, u| 0.5 * (x[0] * x[0] + u[0] * u[0]), |_, x, _| dvector![x[0]])
            .minimizer(|_, _, lam| dvector![-lam[0]])
            .build()
            .unwrap()
    }

    fn unit_lip() -> LipschitzData {
        LipschitzData::declared(LipschitzValues {
            c: 1.0,
            l_fu: 1.0,
            l_phixx: 1.0,
            l_hlam: 1.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let spec = scalar_lqr(10.0);
        let h = hamiltonian(&spec, 0.0, &dvector![1.0], &dvector![1.0], &dvector![0.0]).unwrap();
        assert_eq!(h, -0.5);
        let h0 = hamiltonian(&spec, 0.3, &dvector![2.0], &dvector![0.0], &dvector![1.0]).unwrap();
        assert_eq!(h0, spec.phi(0.3, &dvector![2.0], &dvector![1.0]));
        assert!(hamiltonian(&spec, 0.0, &dvector![1.0], &dvector![1.0], &dvector![11.0]).is_err());
    }

    #[test]
    fn hamiltonian_is_affine_in_costate() {
        let spec = scalar_lqr(10.0);
        let mut s = 0.1_f64;
        for _ in 0..50 {
            s = (s * 7.3 + 0.37).fract();
            let x = dvector![4.0 * s - 2.0];
            let u = dvector![10.0 * s - 5.0];
            let (l1, l2) = (dvector![3.0 * s], dvector![1.0 - 5.0 * s]);
            let lhs = hamiltonian(&spec, s, &x, &(&l1 + &l2), &u).unwrap();
            let rhs = hamiltonian(&spec, s, &x, &l1, &u).unwrap() + hamiltonian(&spec, s, &x, &l2, &u).unwrap()
                - spec.phi(s, &x, &u);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_jacobian_is_rejected() {
        let err = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, x, u| dvector![-x[0] - x[0].powi(3) + u[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![1.0])
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::DerivativeMismatch { what: "D_x f", .. }));

        let err = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, x, u| dvector![-x[0] + u[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![1.0])
            .running_cost(|_, x, _| x[0] * x[0], |_, x, _| dvector![x[0]])
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::DerivativeMismatch { what: "phi_x", .. }));

        assert!(ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap()).build().is_err());
    }

    #[test]
    fn phiu_matches_calculus() {
        let spec = scalar_lqr(10.0);
        let g = spec.phiu(0.0, &dvector![1.0], &dvector![0.7]);
        assert!((g[0] - 0.7).abs() < 1e-9);
    }

    fn ball(center: f64, r: f64, lam: f64) -> BoundedSets {
        BoundedSets::new(dvector![center], r, lam).unwrap()
    }

    #[test]
    fn contraction_examples() {
        let a = dmatrix![-2.0, 0.0; 0.0, -2.0];
        let a2 = a.clone();
        let spec = ProblemSpec::builder(dvector![1.0, 0.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(
                move |_, x, u| &a * x + dvector![u[0], 0.0],
                move |_, _, _| a2.clone(),
                |_, _, _| dmatrix![1.0; 0.0],
            )
            .build()
            .unwrap();
        let b = BoundedSets::new(dvector![0.0, 0.0], 2.0, 1.0).unwrap();
        let rep = verify_contraction(&spec, &b, 2.0, Sampler::new(32, 1)).unwrap();
        assert!((rep.max_lognorm + 2.0).abs() < 1e-12);
        assert!(rep.pass);
        assert!(!verify_contraction(&spec, &b, 2.5, Sampler::new(32, 1)).unwrap().pass);

        let cubic = ProblemSpec::builder(dvector![0.5], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(
                |_, x, u| dvector![-x[0] - x[0].powi(3) + u[0]],
                |_, x, _| dmatrix![-1.0 - 3.0 * x[0] * x[0]],
                |_, _, _| dmatrix![1.0],
            )
            .build()
            .unwrap();
        let rep = verify_contraction(&cubic, &ball(0.0, 3.0, 1.0), 1.0, Sampler::new(200, 4)).unwrap();
        assert!(rep.max_lognorm <= -1.0 && rep.pass);
    }

    #[test]
    fn costate_field_has_same_lognorm_in_dual_norm() {
        let a = dmatrix![-2.0, 1.0, 0.3; 0.0, -2.5, 0.7; 0.2, 0.0, -3.0];
        let a2 = a.clone();
        for norm in [NormKind::L1, NormKind::L2, NormKind::LInf, NormKind::WeightedLInf(vec![1.0, 2.0, 0.5])] {
            let (a, a2) = (a.clone(), a2.clone());
            let spec = ProblemSpec::builder(dvector![1.0, 0.0, 0.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
                .dynamics(
                    move |_, x, u| &a * x + dvector![u[0], 0.0, 0.0] * (1.0 + x[0] * 0.0),
                    move |_, _, _| a2.clone(),
                    |_, _, _| dmatrix![1.0; 0.0; 0.0],
                )
                .norms(norm, NormKind::L2)
                .build()
                .unwrap();
            let b = BoundedSets::new(dvector![0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
            let s = Sampler::new(16, 2);
            let fwd = verify_contraction(&spec, &b, 0.5, s).unwrap();
            let bwd = verify_costate_contraction(&spec, &b, 0.5, s).unwrap();
            assert!((fwd.max_lognorm - bwd.max_lognorm).abs() <= 1e-9);
        }
    }

    #[test]
    fn estimates_for_linear_dynamics() {
        let spec = scalar_lqr(10.0);
        let b = ball(0.5, 2.0, 1.0);
        let est = estimate_constants(&spec, &b, Sampler::new(64, 3)).unwrap();
        let v = est.constants.values();
        assert!((v.l_fu - 1.0).abs() < 1e-9);
        assert_eq!(v.l_fxx, 0.0);
        assert_eq!(v.l_fxu, 0.0);
        assert!((v.c - 1.0).abs() < 1e-12);
        assert!((v.l_phixx - 1.0).abs() < 1e-9);
        assert!((v.l_hlam - 1.0).abs() < 1e-9);
        assert!(est.constants.any_estimated());
        assert!(est.degenerate.is_empty());

        let flat = estimate_constants(&spec, &ball(0.5, 0.0, 1.0), Sampler::new(8, 3)).unwrap();
        assert_eq!(flat.constants.l_phixx.value, 0.0);
        assert!(flat.degenerate.contains(&"l_phixx".to_string()));
    }

    #[test]
    fn tanh_input_gain_approaches_one() {
        let spec = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 2.0).unwrap())
            .dynamics(
                |_, x, u| dvector![-2.0 * x[0] + u[0].tanh()],
                |_, _, _| dmatrix![-2.0],
                |_, _, u| dmatrix![1.0 / u[0].cosh().powi(2)],
            )
            .minimizer(|_, _, _| dvector![0.0])
            .build()
            .unwrap();
        let b = ball(0.0, 1.0, 1.0);
        let small = estimate_constants(&spec, &b, Sampler::new(8, 0)).unwrap().constants.l_fu.value;
        let large = estimate_constants(&spec, &b, Sampler::new(512, 0)).unwrap().constants.l_fu.value;
        assert!(small <= large);
        assert!(large <= 1.0 + 1e-9);
        assert!(large > 0.99, "{large}");
    }

    #[test]
    fn estimates_grow_with_budget() {
        let spec = ProblemSpec::builder(dvector![0.5], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(
                |_, x, u| dvector![-x[0] - x[0].powi(3) + u[0]],
                |_, x, _| dmatrix![-1.0 - 3.0 * x[0] * x[0]],
                |_, _, _| dmatrix![1.0],
            )
            .running_cost(|_, x, u| 0.5 * (x[0] * x[0] + u[0] * u[0]), |_, x, _| dvector![x[0]])
            .minimizer(|_, _, lam| dvector![-lam[0]])
            .build()
            .unwrap();
        let b = ball(0.2, 1.0, 1.0);
        let mut prev = estimate_constants(&spec, &b, Sampler::new(4, 1)).unwrap().constants.values();
        for budget in [8, 16, 64] {
            let next = estimate_constants(&spec, &b, Sampler::new(budget, 1)).unwrap().constants.values();
            for ((_, a), (_, bb)) in prev.as_array().iter().zip(next.as_array()).skip(1) {
                assert!(bb >= *a);
            }
            // c is minus a max, so it can only shrink
            assert!(next.c <= prev.c);
            prev = next;
        }
    }

    #[test]
    fn bounded_set_examples() {
        let spec = scalar_lqr(1.0);
        let grid = spec.grid(100).unwrap();
        let lip = unit_lip();
        let b = bounded_sets(&spec, &lip, grid).unwrap();
        let e = (-1.0f64).exp();
        let envelope = (1.0 - e) / 2.0;
        assert!((b.x_center[0] - (1.0 + e) / 2.0).abs() < 1e-9);
        assert!((b.x_radius - envelope - (1.0 - e)).abs() < 1e-9);

        let doubled = bounded_sets(&spec.with_control_box(BoxSet::symmetric(1, 2.0).unwrap()).unwrap(), &lip, grid).unwrap();
        let control_part = b.x_radius - envelope;
        assert!((doubled.x_radius - envelope - 2.0 * control_part).abs() < 1e-9);

        let frozen = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 0.0).unwrap())
            .dynamics(|_, x, u| dvector![-x[0] + u[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![1.0])
            .build()
            .unwrap();
        let no_forcing = LipschitzData::declared(LipschitzValues { l_phixx: 0.0, ..lip.values() }).unwrap();
        let fb = bounded_sets(&frozen, &no_forcing, grid).unwrap();
        assert!((fb.x_radius - envelope).abs() < 1e-9);
        assert_eq!(fb.lam_radius, 0.0);
    }

    #[test]
    fn lipschitz_values_validation() {
        assert!(LipschitzData::declared(LipschitzValues { c: 0.0, ..Default::default() }).is_err());
        assert!(LipschitzData::declared(LipschitzValues { c: 1.0, l_fu: -1.0, ..Default::default() }).is_err());
        assert!(LipschitzData::declared(LipschitzValues { c: 1.0, l_hx: f64::NAN, ..Default::default() }).is_err());
        let v: LipschitzValues = serde_json::from_str(r#"{"c": 2.0, "l_fu": 1.5}"#).unwrap();
        assert_eq!(v.l_fu, 1.5);
        assert!(serde_json::from_str::<LipschitzValues>(r#"{"c": 2.0, "bogus": 1}"#).is_err());
    }
}
