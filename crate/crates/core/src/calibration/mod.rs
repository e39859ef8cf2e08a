//! Bayesian calibration of a computer model against field observations,
//! `y(x) = f(x, θ) + δ(x) + ε`, with a GP discrepancy `δ` whose variance is
//! integrated out analytically.

pub mod diagnostics;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::estimation::offdiag_extremes;
use crate::gls::{CholeskyFactor, Likelihood, NuggetRole};
use crate::kernels::{cross_correlation, CorrelationFamily, DistanceTable, KernelMode, KernelSpec};
use crate::model::GpModel;
use crate::ppgp::{ppgp_predict_means, PpgpModel};
use crate::prediction::predict;
use crate::priors::{half_log_det, JrPrior, PriorSpec};

use diagnostics::{ess_batch_means, mean_sd, quantile};

type DirectFn = dyn Fn(&[f64], &[f64]) -> std::result::Result<f64, String> + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Direct,
    Emulated,
    EmulatedVector,
}

/// The computer model `f(x, θ)`.
#[derive(Clone)]
pub struct Simulator {
    inner: SimInner,
}

#[derive(Clone)]
enum SimInner {
    Direct(Arc<DirectFn>),
    /// Scalar emulator over the joint input `(x, θ)`.
    Emulated(Arc<GpModel>),
    /// Vector emulator over `θ` whose coordinates are the rows of `coords`.
    EmulatedVector {
        model: Arc<PpgpModel>,
        coords: DMatrix<f64>,
    },
}

impl fmt::Debug for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Simulator({:?})", self.kind())
    }
}

impl Simulator {
    pub fn direct<F>(f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> std::result::Result<f64, String> + Send + Sync + 'static,
    {
        Simulator {
            inner: SimInner::Direct(Arc::new(f)),
        }
    }

    /// Uses the predictive location of an emulator trained on `(x, θ)` rows.
    pub fn emulated(model: GpModel) -> Self {
        Simulator {
            inner: SimInner::Emulated(Arc::new(model)),
        }
    }

    /// Uses a vector emulator over `θ`; output coordinate `j` is the model at
    /// field input `coords.row(j)`.
    pub fn emulated_vector(model: PpgpModel, coords: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() != model.k() {
            return Err(Error::dim("coordinate inputs", model.k(), coords.nrows()));
        }
        Ok(Simulator {
            inner: SimInner::EmulatedVector {
                model: Arc::new(model),
                coords,
            },
        })
    }

    pub fn kind(&self) -> SimulatorKind {
        match self.inner {
            SimInner::Direct(_) => SimulatorKind::Direct,
            SimInner::Emulated(_) => SimulatorKind::Emulated,
            SimInner::EmulatedVector { .. } => SimulatorKind::EmulatedVector,
        }
    }

    fn coord_index(coords: &DMatrix<f64>, x: &[f64]) -> Result<usize> {
        (0..coords.nrows())
            .find(|&j| coords.row(j).iter().zip(x).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)))
            .ok_or_else(|| Error::Simulator(format!("input {x:?} is not an emulated coordinate")))
    }

    /// `f(x, θ)`.
    pub fn evaluate(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        let v = match &self.inner {
            SimInner::Direct(f) => f(x, theta).map_err(Error::Simulator)?,
            SimInner::Emulated(m) => {
                let z: Vec<f64> = x.iter().chain(theta).copied().collect();
                predict(m, &z).map_err(|e| Error::Simulator(e.to_string()))?.location
            }
            SimInner::EmulatedVector { model, coords } => {
                let j = Self::coord_index(coords, x)?;
                let t = DMatrix::from_row_slice(1, theta.len(), theta);
                ppgp_predict_means(model, &t).map_err(|e| Error::Simulator(e.to_string()))?[(j, 0)]
            }
        };
        if !v.is_finite() {
            return Err(Error::Simulator(format!("non-finite output at x = {x:?}, θ = {theta:?}")));
        }
        Ok(v)
    }

    /// `(f(x_1, θ), …, f(x_n, θ))` over the rows of `x`.
    pub fn evaluate_rows(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        if let SimInner::EmulatedVector { model, coords } = &self.inner {
            let t = DMatrix::from_row_slice(1, theta.len(), theta);
            let all = ppgp_predict_means(model, &t).map_err(|e| Error::Simulator(e.to_string()))?;
            let mut out = DVector::zeros(x.nrows());
            for i in 0..x.nrows() {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                out[i] = all[(Self::coord_index(coords, &row)?, 0)];
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulator("non-finite emulator output".into()));
            }
            return Ok(out);
        }
        let mut row = vec![0.0; x.ncols()];
        let mut out = DVector::zeros(x.nrows());
        for i in 0..x.nrows() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = x[(i, j)];
            }
            out[i] = self.evaluate(&row, theta)?;
        }
        Ok(out)
    }
}

/// Log density over θ, up to a constant.
pub type LogDensity = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Prior on the calibration parameters.
#[derive(Clone, Default)]
pub enum ThetaPrior {
    /// Uniform on the bounds.
    #[default]
    Uniform,
    /// Log density (up to a constant) inside the bounds.
    Custom(LogDensity),
}

impl fmt::Debug for ThetaPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThetaPrior::Uniform => write!(f, "Uniform"),
            ThetaPrior::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Kernel of the discrepancy GP over the field inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancySpec {
    pub mode: KernelMode,
    pub families: Vec<CorrelationFamily>,
}

impl DiscrepancySpec {
    pub fn isotropic(family: CorrelationFamily) -> Self {
        DiscrepancySpec {
            mode: KernelMode::Isotropic,
            families: vec![family],
        }
    }
}

struct DiscrepancyState {
    spec: DiscrepancySpec,
    table: DistanceTable,
    /// Fisher-information machinery, for the reference prior only.
    reference: Option<Likelihood>,
}

pub struct CalibrationProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    simulator: Simulator,
    bounds: Vec<(f64, f64)>,
    discrepancy: Option<DiscrepancyState>,
    prior: PriorSpec,
    theta_prior: ThetaPrior,
    prior_only: bool,
    failures: AtomicUsize,
}

impl fmt::Debug for CalibrationProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CalibrationProblem")
            .field("n", &self.x.nrows())
            .field("bounds", &self.bounds)
            .field("discrepancy", &self.discrepancy.as_ref().map(|d| &d.spec))
            .field("prior", &self.prior)
            .field("simulator", &self.simulator)
            .finish()
    }
}

impl CalibrationProblem {
    /// `discrepancy = None` gives `y = f(x, θ) + ε` with `ε ~ N(0, σ₀²)`.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        simulator: Simulator,
        bounds: Vec<(f64, f64)>,
        discrepancy: Option<DiscrepancySpec>,
        prior: PriorSpec,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::dim("field observations", n, y.len()));
        }
        if n < 2 {
            return Err(Error::Degenerate("calibration needs at least two observations".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("field data must be finite".into()));
        }
        if bounds.is_empty() {
            return Err(Error::InvalidConfig("need at least one calibration parameter".into()));
        }
        if let Some(b) = bounds.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::InvalidConfig(format!("invalid parameter bounds {b:?}")));
        }
        let (discrepancy, prior) = match discrepancy {
            None => (None, PriorSpec::Flat),
            Some(spec) => {
                let expected = match spec.mode {
                    KernelMode::Isotropic => 1,
                    KernelMode::Separable => p,
                };
                if spec.families.len() != expected {
                    return Err(Error::dim("discrepancy families", expected, spec.families.len()));
                }
                let prior = prior.materialize(spec.mode, &x, true)?;
                if prior.is_flat() {
                    log::warn!("flat prior on the discrepancy parameters is improper");
                }
                let table = DistanceTable::new(spec.mode, &x);
                let reference = matches!(prior, PriorSpec::Reference).then(|| {
                    Likelihood::new(
                        table.clone(),
                        spec.families.clone(),
                        NuggetRole::Free,
                        TrendBasis::None.matrix(&x),
                        DMatrix::from_fn(n, 1, |i, _| ((i + 1) as f64).sqrt().sin()),
                    )
                });
                (Some(DiscrepancyState { spec, table, reference }), prior)
            }
        };
        Ok(CalibrationProblem {
            x,
            y,
            simulator,
            bounds,
            discrepancy,
            prior,
            theta_prior: ThetaPrior::Uniform,
            prior_only: false,
            failures: AtomicUsize::new(0),
        })
    }

    pub fn with_theta_prior(mut self, prior: ThetaPrior) -> Self {
        self.theta_prior = prior;
        self
    }

    /// Replaces the likelihood by a constant, leaving only the priors.
    pub fn with_prior_only(mut self, prior_only: bool) -> Self {
        self.prior_only = prior_only;
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn field_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn observations(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn simulator(&self) -> &Simulator {
        &self.simulator
    }

    /// Prior on the discrepancy parameters, defaults materialized.
    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn has_discrepancy(&self) -> bool {
        self.discrepancy.is_some()
    }

    pub fn theta_dim(&self) -> usize {
        self.bounds.len()
    }

    /// Length of the second parameter block: `(ξ, log η)` with a
    /// discrepancy, `log σ₀²` without.
    pub fn kernel_dim(&self) -> usize {
        match &self.discrepancy {
            Some(d) => d.spec.families.len() + 1,
            None => 1,
        }
    }

    pub fn kernel_names(&self) -> Vec<String> {
        match &self.discrepancy {
            Some(d) => (1..=d.spec.families.len())
                .map(|l| format!("xi_{l}"))
                .chain(std::iter::once("log_eta".to_string()))
                .collect(),
            None => vec!["log_sigma0_sq".into()],
        }
    }

    /// Number of simulator failures seen so far.
    pub fn simulator_failures(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }

    fn in_bounds(&self, theta: &[f64]) -> bool {
        theta.iter().zip(&self.bounds).all(|(t, (lo, hi))| t >= lo && t <= hi)
    }

    fn log_theta_prior(&self, theta: &[f64]) -> f64 {
        if !self.in_bounds(theta) {
            return f64::NEG_INFINITY;
        }
        match &self.theta_prior {
            ThetaPrior::Uniform => 0.0,
            ThetaPrior::Custom(f) => f(theta),
        }
    }

    /// Field residuals `y − f(θ)`; `None` on simulator failure.
    fn residual(&self, theta: &[f64]) -> Option<DVector<f64>> {
        match self.simulator.evaluate_rows(&self.x, theta) {
            Ok(f) => Some(&self.y - f),
            Err(e) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                log::warn!("simulator failed at θ = {theta:?}: {e}");
                None
            }
        }
    }

    fn kernel_state(&self, psi: &[f64]) -> Option<KernelState> {
        if psi.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let Some(d) = &self.discrepancy else {
            return Some(KernelState {
                factor: None,
                log_det: 0.0,
                log_prior: 0.0,
                max_corr: 0.0,
                log_sigma0_sq: psi[0],
            });
        };
        let m = d.spec.families.len();
        let range: Vec<f64> = psi[..m].iter().map(|x| (-x).exp()).collect();
        let eta = psi[m].exp();
        if range.iter().any(|r| !(r.is_finite() && *r > 0.0)) || !(eta.is_finite() && eta > 0.0) {
            return None;
        }
        let mut c = d.table.correlation(&d.spec.families, &range);
        let (_, max_corr) = offdiag_extremes(&c);
        for i in 0..c.nrows() {
            c[(i, i)] += eta;
        }
        let factor = CholeskyFactor::new(&c).ok().filter(|f| f.jitter() == 0.0)?;
        let log_prior = match &self.prior {
            PriorSpec::Flat => 0.0,
            PriorSpec::Jr(jr) => jr_log_density(jr, psi)?,
            PriorSpec::Reference => {
                let lik = d.reference.as_ref()?;
                let params = lik.params_from_xi(psi);
                let ev = lik.evaluate(&params, true).ok()?;
                let (info, _, _) = lik.fisher(&ev);
                let (v, _) = half_log_det(&info).ok()?;
                // density in (φ, η) carried to (ξ, log η)
                v - psi[..m].iter().sum::<f64>() + psi[m]
            }
        };
        Some(KernelState {
            log_det: factor.log_det(),
            factor: Some(factor),
            log_prior,
            max_corr,
            log_sigma0_sq: 0.0,
        })
    }

    fn log_post(&self, theta: &[f64], resid: &DVector<f64>, ks: &KernelState) -> f64 {
        let lp_theta = self.log_theta_prior(theta);
        if !lp_theta.is_finite() {
            return f64::NEG_INFINITY;
        }
        if self.prior_only {
            return lp_theta + ks.log_prior;
        }
        let n = self.n() as f64;
        let ll = match &ks.factor {
            Some(factor) => {
                let s2 = factor.solve_lower_vec(resid).norm_squared();
                -0.5 * ks.log_det - 0.5 * n * s2.ln()
            }
            None => {
                let ss = resid.norm_squared();
                -0.5 * n * ks.log_sigma0_sq - 0.5 * ss * (-ks.log_sigma0_sq).exp()
            }
        };
        let v = ll + ks.log_prior + lp_theta;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// JR log density in `(ξ, log η)` including the Jacobian of `φ̃ = e^ξ`, `η = e^{log η}`.
fn jr_log_density(jr: &JrPrior, psi: &[f64]) -> Option<f64> {
    let x: Vec<f64> = psi.iter().map(|v| v.exp()).collect();
    let w = jr.weights.as_ref()?;
    if w.len() != x.len() || x.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let t: f64 = w.iter().zip(&x).map(|(w, v)| w * v).sum();
    Some(jr.b1 * t.ln() - jr.b2 * t + psi.iter().sum::<f64>())
}

struct KernelState {
    factor: Option<CholeskyFactor>,
    log_det: f64,
    log_prior: f64,
    max_corr: f64,
    log_sigma0_sq: f64,
}

/// Unnormalized log posterior of `(θ, ψ)` with the GP variance integrated out.
/// `ψ = (ξ_1, …, ξ_m, log η)` with a discrepancy and `ψ = (log σ₀²)` without.
/// Returns `−∞` outside the bounds and when the simulator fails.
pub fn calib_log_posterior(problem: &CalibrationProblem, theta: &[f64], psi: &[f64]) -> Result<f64> {
    if theta.len() != problem.theta_dim() {
        return Err(Error::dim("calibration parameters", problem.theta_dim(), theta.len()));
    }
    if psi.len() != problem.kernel_dim() {
        return Err(Error::dim("discrepancy parameters", problem.kernel_dim(), psi.len()));
    }
    if !problem.in_bounds(theta) {
        return Ok(f64::NEG_INFINITY);
    }
    let Some(resid) = problem.residual(theta) else {
        return Ok(f64::NEG_INFINITY);
    };
    let Some(ks) = problem.kernel_state(psi) else {
        return Ok(f64::NEG_INFINITY);
    };
    Ok(problem.log_post(theta, &resid, &ks))
}

fn default_iterations() -> usize {
    10_000
}
fn default_burn_in() -> usize {
    2_000
}
fn default_thin() -> usize {
    1
}
fn default_kernel_scale() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    /// Total iterations, burn-in included.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Initial random-walk scales for θ (default a tenth of each bound width).
    #[serde(default)]
    pub theta_scale: Option<Vec<f64>>,
    /// Initial random-walk scale for the second block.
    #[serde(default = "default_kernel_scale")]
    pub kernel_scale: f64,
    #[serde(default)]
    pub initial_theta: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_kernel: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: default_iterations(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            theta_scale: None,
            kernel_scale: default_kernel_scale(),
            initial_theta: None,
            initial_kernel: None,
            seed: 0,
        }
    }
}

const ADAPT_EVERY: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.3;

/// Posterior draws kept after burn-in and thinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub theta: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<f64>>,
    pub kernel_names: Vec<String>,
    pub log_post: Vec<f64>,
    /// Largest off-diagonal discrepancy correlation at each draw.
    pub max_corr: Vec<f64>,
    pub acceptance_theta: f64,
    pub acceptance_kernel: f64,
    /// Proposal scales after adaptation.
    pub theta_scale: Vec<f64>,
    pub kernel_scale: f64,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub discrepancy: bool,
    pub identifiability_warning: bool,
    pub simulator_failures: usize,
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    // fold into [lo, hi] by repeated reflection
    v = (v - lo).rem_euclid(2.0 * w);
    if v > w {
        v = 2.0 * w - v;
    }
    lo + v
}

fn initial_kernel(problem: &CalibrationProblem, theta: &[f64], resid: &DVector<f64>) -> Vec<f64> {
    let _ = theta;
    match &problem.discrepancy {
        Some(d) => {
            let p = problem.x.ncols() as f64;
            let mut psi: Vec<f64> = (0..d.spec.families.len())
                .map(|l| {
                    let range = d.table.max(l).filter(|&r| r > 0.0).unwrap_or(1.0);
                    let a = d.spec.families[l].start_exponent();
                    (p.powf(1.0 / a) / range).ln()
                })
                .collect();
            psi.push(0.1f64.ln());
            psi
        }
        None => vec![(resid.norm_squared() / problem.n() as f64).max(1e-12).ln()],
    }
}

/// Two-block adaptive random-walk Metropolis: block one moves θ (reflected
/// into the bounds), block two moves the discrepancy or noise parameters.
/// Proposal scales adapt only during burn-in.
pub fn calibrate(problem: &CalibrationProblem, cfg: &McmcConfig) -> Result<McmcChain> {
    if cfg.iterations <= cfg.burn_in {
        return Err(Error::InvalidConfig(format!(
            "iterations ({}) must exceed burn-in ({})",
            cfg.iterations, cfg.burn_in
        )));
    }
    if cfg.thin == 0 || !(cfg.kernel_scale > 0.0) {
        return Err(Error::InvalidConfig("thin and kernel_scale must be positive".into()));
    }
    let d = problem.theta_dim();
    let widths: Vec<f64> = problem.bounds.iter().map(|(lo, hi)| hi - lo).collect();
    let base_theta = match &cfg.theta_scale {
        Some(s) if s.len() == d && s.iter().all(|v| *v > 0.0) => s.clone(),
        Some(s) => return Err(Error::dim("theta_scale", d, s.len())),
        None => widths.iter().map(|w| 0.1 * w).collect(),
    };
    let mut theta = match &cfg.initial_theta {
        Some(t) if t.len() == d => t.clone(),
        Some(t) => return Err(Error::dim("initial_theta", d, t.len())),
        None => problem.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
    };
    let mut resid = problem
        .residual(&theta)
        .ok_or_else(|| Error::Simulator(format!("simulator failed at the initial θ = {theta:?}")))?;
    let mut psi = match &cfg.initial_kernel {
        Some(k) if k.len() == problem.kernel_dim() => k.clone(),
        Some(k) => return Err(Error::dim("initial_kernel", problem.kernel_dim(), k.len())),
        None => initial_kernel(problem, &theta, &resid),
    };
    let mut ks = problem
        .kernel_state(&psi)
        .ok_or_else(|| Error::Sampler("discrepancy covariance not positive definite at the start".into()))?;
    let mut lp = problem.log_post(&theta, &resid, &ks);
    if !lp.is_finite() {
        return Err(Error::Sampler("initial state has zero posterior density".into()));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut log_ft = 0.0f64;
    let mut log_fk = 0.0f64;
    let cap_t = base_theta
        .iter()
        .zip(&widths)
        .map(|(s, w)| (10.0 * w / s).ln())
        .fold(f64::INFINITY, f64::min);
    let mut window = [0usize; 2];
    let mut adapt_round = 0usize;
    let mut accepted = [0usize; 2];
    let kept = (cfg.iterations - cfg.burn_in).div_ceil(cfg.thin);
    let mut chain = McmcChain {
        theta: Vec::with_capacity(kept),
        kernel: Vec::with_capacity(kept),
        kernel_names: problem.kernel_names(),
        log_post: Vec::with_capacity(kept),
        max_corr: Vec::with_capacity(kept),
        acceptance_theta: 0.0,
        acceptance_kernel: 0.0,
        theta_scale: Vec::new(),
        kernel_scale: 0.0,
        seed: cfg.seed,
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        discrepancy: problem.has_discrepancy(),
        identifiability_warning: false,
        simulator_failures: 0,
    };
    let failures_before = problem.simulator_failures();

    for it in 0..cfg.iterations {
        // block 1: θ
        let ft = log_ft.exp();
        let prop: Vec<f64> = theta
            .iter()
            .zip(&base_theta)
            .zip(&problem.bounds)
            .map(|((t, s), (lo, hi))| {
                let z: f64 = rng.sample(StandardNormal);
                reflect(t + ft * s * z, *lo, *hi)
            })
            .collect();
        let u: f64 = rng.random();
        if let Some(r) = problem.residual(&prop) {
            let lp_new = problem.log_post(&prop, &r, &ks);
            if u.ln() < lp_new - lp {
                theta = prop;
                resid = r;
                lp = lp_new;
                window[0] += 1;
                if it >= cfg.burn_in {
                    accepted[0] += 1;
                }
            }
        }

        // block 2: (ξ, log η) or log σ₀²
        let fk = log_fk.exp() * cfg.kernel_scale;
        let prop: Vec<f64> = psi
            .iter()
            .map(|v| {
                let z: f64 = rng.sample(StandardNormal);
                v + fk * z
            })
            .collect();
        let u: f64 = rng.random();
        if let Some(k_new) = problem.kernel_state(&prop) {
            let lp_new = problem.log_post(&theta, &resid, &k_new);
            if u.ln() < lp_new - lp {
                psi = prop;
                ks = k_new;
                lp = lp_new;
                window[1] += 1;
                if it >= cfg.burn_in {
                    accepted[1] += 1;
                }
            }
        }

        if it < cfg.burn_in && (it + 1) % ADAPT_EVERY == 0 {
            adapt_round += 1;
            let gamma = 2.0 / (adapt_round as f64).sqrt();
            let rate = |c: usize| c as f64 / ADAPT_EVERY as f64;
            log_ft = (log_ft + gamma * (rate(window[0]) - TARGET_ACCEPTANCE)).min(cap_t);
            log_fk = (log_fk + gamma * (rate(window[1]) - TARGET_ACCEPTANCE)).clamp(-20.0, 5.0);
            window = [0, 0];
        }

        if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thin) {
            chain.theta.push(theta.clone());
            chain.kernel.push(psi.clone());
            chain.log_post.push(lp);
            chain.max_corr.push(ks.max_corr);
        }
    }

    let post = (cfg.iterations - cfg.burn_in) as f64;
    chain.acceptance_theta = accepted[0] as f64 / post;
    chain.acceptance_kernel = accepted[1] as f64 / post;
    chain.theta_scale = base_theta.iter().map(|s| s * log_ft.exp()).collect();
    chain.kernel_scale = cfg.kernel_scale * log_fk.exp();
    chain.simulator_failures = problem.simulator_failures() - failures_before;
    if accepted[0] == 0 || accepted[1] == 0 {
        return Err(Error::Sampler(format!(
            "no proposals accepted after burn-in (θ block {}, second block {}); final scales θ {:?}, second block {:e}",
            accepted[0], accepted[1], chain.theta_scale, chain.kernel_scale
        )));
    }
    if chain.discrepancy {
        let mut m = chain.max_corr.clone();
        m.sort_by(f64::total_cmp);
        if quantile(&m, 0.5) > 0.99 {
            chain.identifiability_warning = true;
            log::warn!(
                "the main variability of the field data can be explained by the discrepancy; \
                 calibration parameters may not be identifiable"
            );
        }
    }
    Ok(chain)
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub ess: f64,
    pub ess_failed: bool,
}

fn summarize(name: String, x: &[f64]) -> ParamSummary {
    let (mean, sd) = mean_sd(x);
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let e = ess_batch_means(x);
    ParamSummary {
        name,
        mean,
        sd,
        q025: quantile(&s, 0.025),
        median: quantile(&s, 0.5),
        q975: quantile(&s, 0.975),
        ess: e.ess,
        ess_failed: e.failed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSummary {
    pub schema: u32,
    pub kind: String,
    pub draws: usize,
    pub theta: Vec<ParamSummary>,
    pub kernel: Vec<ParamSummary>,
    pub acceptance_theta: f64,
    pub acceptance_kernel: f64,
    pub identifiability_warning: bool,
    pub simulator_failures: usize,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl McmcChain {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Draws of one θ coordinate.
    pub fn theta_column(&self, j: usize) -> Vec<f64> {
        self.theta.iter().map(|t| t[j]).collect()
    }

    pub fn kernel_column(&self, j: usize) -> Vec<f64> {
        self.kernel.iter().map(|t| t[j]).collect()
    }

    pub fn summary(&self) -> McmcSummary {
        let d = self.theta.first().map_or(0, |t| t.len());
        McmcSummary {
            schema: 1,
            kind: "mcmc_summary".into(),
            draws: self.len(),
            theta: (0..d)
                .map(|j| summarize(format!("theta_{}", j + 1), &self.theta_column(j)))
                .collect(),
            kernel: self
                .kernel_names
                .iter()
                .enumerate()
                .map(|(j, n)| summarize(n.clone(), &self.kernel_column(j)))
                .collect(),
            acceptance_theta: self.acceptance_theta,
            acceptance_kernel: self.acceptance_kernel,
            identifiability_warning: self.identifiability_warning,
            simulator_failures: self.simulator_failures,
            seed: self.seed,
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
        }
    }
}

/// Posterior predictive summary of reality at one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibPrediction {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// For each draw, `f(x*, θ) + c(x*)ᵀ(C + ηI)⁻¹(y − f(θ))`, summarized across
/// draws by mean, standard deviation and the 2.5% and 97.5% quantiles.
pub fn calib_predict(
    problem: &CalibrationProblem,
    chain: &McmcChain,
    xstar: &DMatrix<f64>,
) -> Result<Vec<CalibPrediction>> {
    if chain.is_empty() {
        return Err(Error::InvalidConfig("chain has no draws".into()));
    }
    if xstar.ncols() != problem.x.ncols() {
        return Err(Error::dim("prediction inputs", problem.x.ncols(), xstar.ncols()));
    }
    let m = xstar.nrows();
    let mut values = vec![Vec::with_capacity(chain.len()); m];
    let mut row = vec![0.0; xstar.ncols()];
    for (theta, psi) in chain.theta.iter().zip(&chain.kernel) {
        let fstar = problem.simulator.evaluate_rows(xstar, theta)?;
        let mut pred = fstar.clone();
        if let Some(d) = &problem.discrepancy {
            let resid = problem
                .residual(theta)
                .ok_or_else(|| Error::Simulator(format!("simulator failed at θ = {theta:?}")))?;
            let ks = problem
                .kernel_state(psi)
                .ok_or_else(|| Error::Sampler("draw with singular discrepancy covariance".into()))?;
            let w = ks.factor.as_ref().expect("discrepancy factor").solve_vec(&resid);
            let nm = d.spec.families.len();
            let spec = KernelSpec {
                mode: d.spec.mode,
                families: d.spec.families.clone(),
                range: psi[..nm].iter().map(|x| (-x).exp()).collect(),
                nugget: None,
            };
            for i in 0..m {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = xstar[(i, j)];
                }
                let r = cross_correlation(&spec, &problem.x, &row);
                pred[i] += r.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for i in 0..m {
            values[i].push(pred[i]);
        }
    }
    Ok(values
        .into_iter()
        .map(|mut v| {
            let (mean, sd) = mean_sd(&v);
            v.sort_by(f64::total_cmp);
            CalibPrediction {
                mean,
                sd,
                lo: quantile(&v, 0.025),
                hi: quantile(&v, 0.975),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_problem(discrepancy: bool) -> CalibrationProblem {
        let x = DMatrix::from_fn(8, 1, |i, _| i as f64 / 7.0);
        let y = DVector::from_fn(8, |i, _| 2.0 * x[(i, 0)] + 0.01 * ((i * 7 % 5) as f64 - 2.0));
        let sim = Simulator::direct(|x, t| Ok(t[0] * x[0]));
        let disc = discrepancy.then(|| DiscrepancySpec::isotropic(CorrelationFamily::matern_5_2()));
        CalibrationProblem::new(x, y, sim, vec![(0.0, 5.0)], disc, PriorSpec::jr()).unwrap()
    }

    #[test]
    fn out_of_bounds_is_minus_infinity() {
        let p = linear_problem(true);
        assert_eq!(calib_log_posterior(&p, &[6.0], &[0.0, -2.0]).unwrap(), f64::NEG_INFINITY);
        assert!(calib_log_posterior(&p, &[1.0], &[0.0]).is_err());
        assert!(calib_log_posterior(&p, &[2.0], &[0.0, -2.0]).unwrap().is_finite());
    }

    #[test]
    fn simulator_failure_counts() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let y = DVector::from_element(4, 1.0);
        let sim = Simulator::direct(|_, t| if t[0] > 1.0 { Err("boom".into()) } else { Ok(t[0]) });
        let p = CalibrationProblem::new(x, y, sim, vec![(0.0, 2.0)], None, PriorSpec::Flat).unwrap();
        assert_eq!(calib_log_posterior(&p, &[1.5], &[0.0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(p.simulator_failures(), 1);
    }

    #[test]
    fn reflection_stays_in_box() {
        for v in [-7.3, -0.2, 0.5, 1.3, 2.9, 11.0] {
            let r = reflect(v, 0.0, 1.0);
            assert!((0.0..=1.0).contains(&r), "{v} -> {r}");
        }
        assert!((reflect(1.3, 0.0, 1.0) - 0.7).abs() < 1e-15);
        assert!((reflect(-0.2, 0.0, 1.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn seeded_chain_is_reproducible() {
        let p = linear_problem(false);
        let cfg = McmcConfig {
            iterations: 600,
            burn_in: 200,
            seed: 11,
            ..McmcConfig::default()
        };
        let a = calibrate(&p, &cfg).unwrap();
        let b = calibrate(&p, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.acceptance_theta > 0.0);
    }
}
