//! Range and nugget estimation by MLE, MMLE or MMPE, and inert-input flags.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::gls::{CorrParams, Likelihood, NuggetRole};
use crate::kernels::{CorrelationFamily, DistanceTable, KernelMode, KernelSpec};
use crate::model::{Estimator, GpModel, Provenance};
use crate::optimize::{maximize, OptimConfig};
use crate::priors::{PriorSpec, PriorTerm};

const NUGGET_LOG_BOUNDS: (f64, f64) = (-8.0 * std::f64::consts::LN_10, std::f64::consts::LN_10);
const NUGGET_START: f64 = 1e-3;

/// Treatment of the nugget during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuggetChoice {
    #[default]
    Absent,
    Fixed(f64),
    Estimate,
}

/// Kernel families to fit; range parameters (and possibly the nugget) are
/// estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub mode: KernelMode,
    pub families: Vec<CorrelationFamily>,
    #[serde(default)]
    pub nugget: NuggetChoice,
}

impl KernelChoice {
    pub fn separable(families: Vec<CorrelationFamily>) -> Self {
        KernelChoice {
            mode: KernelMode::Separable,
            families,
            nugget: NuggetChoice::Absent,
        }
    }

    pub fn isotropic(family: CorrelationFamily) -> Self {
        KernelChoice {
            mode: KernelMode::Isotropic,
            families: vec![family],
            nugget: NuggetChoice::Absent,
        }
    }

    pub fn with_nugget(mut self, nugget: NuggetChoice) -> Self {
        self.nugget = nugget;
        self
    }

    fn validate(&self, p: usize) -> Result<()> {
        let expected = match self.mode {
            KernelMode::Isotropic => 1,
            KernelMode::Separable => p,
        };
        if self.families.len() != expected {
            return Err(Error::dim("kernel families", expected, self.families.len()));
        }
        if let NuggetChoice::Fixed(eta) = self.nugget {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::Domain(format!("nugget must be non-negative, got {eta}")));
            }
        }
        Ok(())
    }
}

fn default_starts() -> usize {
    2
}
fn default_grad_tol() -> f64 {
    1e-6
}
fn default_step_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    200
}
fn default_inert() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub estimator: Estimator,
    /// Used by MMPE only.
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Box on ξ, one `(lo, hi)` per parameter; derived from the design if unset.
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_inert")]
    pub inert_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            estimator: Estimator::Mmpe,
            prior: PriorSpec::jr(),
            starts: default_starts(),
            grad_tol: default_grad_tol(),
            step_tol: default_step_tol(),
            max_iter: default_max_iter(),
            bounds: None,
            seed: 0,
            inert_threshold: default_inert(),
        }
    }
}

impl FitConfig {
    pub fn with_estimator(mut self, estimator: Estimator, prior: PriorSpec) -> Self {
        self.estimator = estimator;
        self.prior = prior;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::InvalidConfig("need at least one start".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.step_tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig("optimizer tolerances must be positive".into()));
        }
        if !(self.inert_threshold >= 0.0) {
            return Err(Error::InvalidConfig("inert threshold must be non-negative".into()));
        }
        if self.estimator == Estimator::Mmpe && self.prior.is_flat() {
            log::warn!("MMPE with a flat prior coincides with MMLE");
        }
        Ok(())
    }
}

/// Outcome of one optimizer start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: Vec<f64>,
    pub xi: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: Estimator,
    /// Prior with defaults materialized (flat for MLE and MMLE).
    pub prior: PriorSpec,
    pub bounds: Vec<(f64, f64)>,
    pub starts: Vec<StartTrace>,
    pub winner: usize,
    pub xi: Vec<f64>,
    pub range: Vec<f64>,
    pub nugget: Option<f64>,
    pub objective: f64,
    /// ∞-norm of the projected ξ-gradient at the optimum.
    pub grad_norm: f64,
    pub condition_number: f64,
    pub min_offdiag: f64,
    pub max_offdiag: f64,
    pub jitter: f64,
    /// Normalized sensitivities `φ̃_l range_l / Σ φ̃_m range_m` (separable only).
    pub sensitivity: Option<Vec<f64>>,
    pub inert: Option<Vec<bool>>,
    pub bound_retry: bool,
    /// Output coordinates left out of the objective because `S² = 0`.
    pub degenerate_outputs: Vec<usize>,
    pub factorizations: usize,
}

/// Result of optimizing the correlation parameters over a likelihood.
pub(crate) struct Optimized {
    pub params: CorrParams,
    pub report: FitReport,
}

/// Input ranges used for bounds, starts and sensitivities.
pub(crate) fn input_ranges(mode: KernelMode, design: &DMatrix<f64>) -> Vec<f64> {
    let table = DistanceTable::new(mode, design);
    let m = match mode {
        KernelMode::Isotropic => 1,
        KernelMode::Separable => design.ncols(),
    };
    (0..m).map(|l| table.max(l).unwrap_or(0.0)).collect()
}

fn default_bounds(lik: &Likelihood) -> Vec<(f64, f64)> {
    let mut b: Vec<(f64, f64)> = (0..lik.n_range())
        .map(|l| match (lik.table.max(l), lik.table.min_positive(l)) {
            (Some(max), Some(min)) if max > 0.0 => ((1e-3 / max).ln(), (1e3 / min).ln()),
            _ => {
                log::warn!("input {l} has no spread; using unit-scale bounds");
                ((1e-3f64).ln(), (1e3f64).ln())
            }
        })
        .collect();
    if lik.nugget == NuggetRole::Free {
        b.push(NUGGET_LOG_BOUNDS);
    }
    b
}

fn first_start(lik: &Likelihood, bounds: &[(f64, f64)], p: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..lik.n_range())
        .map(|l| {
            let range = lik.table.max(l).filter(|&r| r > 0.0).unwrap_or(1.0);
            let a = lik.families[l].start_exponent();
            ((p as f64).powf(1.0 / a) / range).ln()
        })
        .collect();
    if lik.nugget == NuggetRole::Free {
        x.push(NUGGET_START.ln());
    }
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
    x
}

fn starting_points(lik: &Likelihood, bounds: &[(f64, f64)], p: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let base = first_start(lik, bounds, p);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = vec![base.clone()];
    for _ in 1..count {
        let x = base
            .iter()
            .zip(bounds)
            .map(|(&v, &(lo, hi))| {
                let u: f64 = rng.random_range(-1.0..1.0);
                (v + u * 0.25 * (hi - lo)).clamp(lo, hi)
            })
            .collect();
        out.push(x);
    }
    out
}

/// Objective value and ξ-gradient for the chosen estimator.
pub(crate) fn objective(
    lik: &Likelihood,
    estimator: Estimator,
    prior: &PriorTerm,
    xi: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let ev = lik.evaluate(&lik.params_from_xi(xi), true)?;
    // the jittered matrix is a different objective; treat it as outside the domain
    let jitter = ev.gls.factor().jitter();
    if jitter > 0.0 {
        return Err(Error::Conditioning { jitters: vec![jitter] });
    }
    match estimator {
        Estimator::Mle => {
            let g = lik.grad_log_profile_phi(&ev);
            Ok((lik.log_profile(&ev), lik.to_xi_grad(&ev, &g)))
        }
        Estimator::Mmle | Estimator::Mmpe => {
            let g = lik.grad_log_marginal_phi(&ev);
            let mut value = lik.log_marginal(&ev);
            let mut grad = lik.to_xi_grad(&ev, &g);
            if estimator == Estimator::Mmpe {
                value += prior.value(lik, &ev)?;
                grad += prior.grad_xi(lik, &ev, xi)?;
            }
            Ok((value, grad))
        }
    }
}

fn shrink(bounds: &[(f64, f64)]) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let w = 0.25 * (hi - lo);
            (lo + w, hi - w)
        })
        .collect()
}

/// Multi-start optimization shared by the scalar and vector emulators.
pub(crate) fn optimize_likelihood(
    lik: &Likelihood,
    design: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<Optimized> {
    config.validate()?;
    let p = design.ncols();
    let mode = lik.table.mode();
    let prior = match config.estimator {
        Estimator::Mmpe => config.prior.materialize(mode, design, lik.nugget == NuggetRole::Free)?,
        _ => PriorSpec::Flat,
    };
    let term = PriorTerm::from_spec(&prior)?;
    let mut bounds = match &config.bounds {
        Some(b) => {
            if b.len() != lik.n_free() {
                return Err(Error::dim("optimizer bounds", lik.n_free(), b.len()));
            }
            if b.iter().any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
                return Err(Error::InvalidConfig(format!("invalid bounds {b:?}")));
            }
            b.clone()
        }
        None => default_bounds(lik),
    };
    let cfg = OptimConfig {
        grad_tol: config.grad_tol,
        step_tol: config.step_tol,
        max_iter: config.max_iter,
        f_tol: 1e-12,
        memory: 10,
    };

    let mut bound_retry = false;
    let traces = loop {
        let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
        let starts = starting_points(lik, &bounds, p, config.starts, config.seed);
        let mut traces = Vec::with_capacity(starts.len());
        let mut nan_seen = false;
        for x0 in starts {
            let f = |xi: &[f64]| {
                let r = objective(lik, config.estimator, &term, xi);
                if let Ok((v, _)) = &r {
                    if v.is_nan() {
                        nan_seen = true;
                    }
                }
                r
            };
            let trace = match maximize(f, &x0, &lo, &hi, &cfg) {
                Ok(r) => StartTrace {
                    start: x0,
                    converged: r.converged(),
                    xi: r.x,
                    objective: r.value,
                    iterations: r.iterations,
                    grad_norm: r.grad_norm,
                    error: None,
                },
                Err(e) => StartTrace {
                    xi: x0.clone(),
                    start: x0,
                    objective: f64::NAN,
                    iterations: 0,
                    converged: false,
                    grad_norm: f64::NAN,
                    error: Some(e.to_string()),
                },
            };
            traces.push(trace);
        }
        let any_ok = traces.iter().any(|t| t.objective.is_finite());
        if (!any_ok || nan_seen) && !bound_retry {
            log::warn!("objective failed or produced NaN; retrying with shrunk bounds");
            bound_retry = true;
            bounds = shrink(&bounds);
            continue;
        }
        break traces;
    };

    let winner = pick_winner(&traces).ok_or_else(|| {
        Error::FitFailure(format!(
            "all {} starts failed: {}",
            traces.len(),
            traces
                .iter()
                .map(|t| t.error.clone().unwrap_or_else(|| "non-finite objective".into()))
                .collect::<Vec<_>>()
                .join("; ")
        ))
    })?;
    if !traces[winner].converged {
        log::warn!("no start met the convergence criteria; using the best point found");
    }
    let xi = traces[winner].xi.clone();
    let params = lik.params_from_xi(&xi);
    let ev = lik.evaluate(&params, false)?;
    let c = lik.table.correlation(&lik.families, &params.range);
    let mut cn = c.clone();
    for i in 0..cn.nrows() {
        cn[(i, i)] += ev.params.nugget;
    }
    let condition_number = condition(&cn);
    let (min_offdiag, max_offdiag) = offdiag_extremes(&c);
    let report = FitReport {
        estimator: config.estimator,
        prior,
        bounds,
        winner,
        xi: xi.clone(),
        range: params.range.clone(),
        nugget: match lik.nugget {
            NuggetRole::Absent => None,
            _ => Some(ev.params.nugget),
        },
        objective: traces[winner].objective,
        grad_norm: traces[winner].grad_norm,
        condition_number,
        min_offdiag,
        max_offdiag,
        jitter: ev.gls.factor().jitter(),
        sensitivity: None,
        inert: None,
        bound_retry,
        degenerate_outputs: Vec::new(),
        factorizations: lik.factorizations(),
        starts: traces,
    };
    Ok(Optimized { params, report })
}

fn pick_winner(traces: &[StartTrace]) -> Option<usize> {
    let best = |converged_only: bool| {
        let mut best: Option<usize> = None;
        for (i, t) in traces.iter().enumerate() {
            if !t.objective.is_finite() || (converged_only && !t.converged) {
                continue;
            }
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|b| t.objective > traces[b].objective) {
                best = Some(i);
            }
        }
        best
    };
    best(true).or_else(|| best(false))
}

pub(crate) fn condition(c: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(c.clone()).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn offdiag_extremes(c: &DMatrix<f64>) -> (f64, f64) {
    let n = c.nrows();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..n {
        for i in (j + 1)..n {
            lo = lo.min(c[(i, j)]);
            hi = hi.max(c[(i, j)]);
        }
    }
    if n < 2 {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

pub(crate) fn nugget_role(choice: NuggetChoice) -> NuggetRole {
    match choice {
        NuggetChoice::Absent => NuggetRole::Absent,
        NuggetChoice::Fixed(eta) => NuggetRole::Fixed(eta),
        NuggetChoice::Estimate => NuggetRole::Free,
    }
}

/// True when `f` lies in the column span of `H` (relative to `‖f‖`).
pub(crate) fn in_trend_span(h: &DMatrix<f64>, f: &DVector<f64>) -> bool {
    let scale = f.amax();
    if scale == 0.0 {
        return true;
    }
    if h.ncols() == 0 {
        return false;
    }
    let resid = match h.clone().svd(true, true).solve(f, 1e-12) {
        Ok(b) => f - h * b,
        Err(_) => return false,
    };
    resid.amax() <= 1e-12 * scale
}

pub(crate) fn sensitivities(range: &[f64], input_range: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = range.iter().zip(input_range).map(|(phi, r)| r / phi).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Fits the correlation parameters and conditions the emulator at the optimum.
pub fn fit(
    design: &DMatrix<f64>,
    f: &DVector<f64>,
    basis: TrendBasis,
    kernel: &KernelChoice,
    config: &FitConfig,
) -> Result<(GpModel, FitReport)> {
    let (n, p) = design.shape();
    kernel.validate(p)?;
    if f.len() != n {
        return Err(Error::dim("outputs", n, f.len()));
    }
    if design.iter().chain(f.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("design and outputs must be finite".into()));
    }
    let q = basis.q(p);
    if n <= q {
        return Err(Error::Degenerate(format!("need n > q, got n = {n} and q = {q}")));
    }
    let h = basis.matrix(design);
    if in_trend_span(&h, f) {
        return Err(Error::Degenerate(
            "outputs are fitted exactly by the trend (S² = 0); nothing left to emulate".into(),
        ));
    }
    let lik = Likelihood::new(
        DistanceTable::new(kernel.mode, design),
        kernel.families.clone(),
        nugget_role(kernel.nugget),
        h,
        DMatrix::from_column_slice(n, 1, f.as_slice()),
    );
    let Optimized { params, mut report } = optimize_likelihood(&lik, design, config)?;
    let spec = KernelSpec {
        mode: kernel.mode,
        families: kernel.families.clone(),
        range: params.range.clone(),
        nugget: match kernel.nugget {
            NuggetChoice::Absent => None,
            _ => Some(params.nugget),
        },
    };
    let mut model = GpModel::new(design.clone(), f.clone(), basis, spec)?;
    if kernel.mode == KernelMode::Separable {
        let s = sensitivities(&params.range, &input_ranges(kernel.mode, design));
        report.inert = Some(s.iter().map(|&v| v < config.inert_threshold).collect());
        report.sensitivity = Some(s);
    }
    let trace = &report.starts[report.winner];
    model.provenance = Provenance {
        estimator: Some(config.estimator),
        prior: Some(report.prior.clone()),
        objective: Some(report.objective),
        iterations: Some(trace.iterations),
        converged: Some(trace.converged),
        grad_norm: Some(report.grad_norm),
        jitter: model.provenance.jitter,
        seed: Some(config.seed),
    };
    Ok((model, report))
}

/// Flags inputs whose normalized sensitivity `φ̃_l range_l / Σ_m φ̃_m range_m`
/// falls below `threshold`.
pub fn detect_inert_inputs(model: &GpModel, threshold: f64) -> Result<Vec<bool>> {
    if model.kernel().mode != KernelMode::Separable {
        return Err(Error::Unsupported(
            "inert-input detection needs a separable kernel".into(),
        ));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Domain(format!("threshold must be non-negative, got {threshold}")));
    }
    let s = sensitivities(&model.kernel().range, &input_ranges(KernelMode::Separable, model.design()));
    Ok(s.iter().map(|&v| v < threshold).collect())
}

/// Conditioning and sensitivity summary of a fitted kernel on its design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostics {
    /// Eigenvalue ratio of `C + ηI`.
    pub condition_number: f64,
    pub min_offdiag: f64,
    pub max_offdiag: f64,
    pub sensitivity: Option<Vec<f64>>,
    pub inert: Option<Vec<bool>>,
}

pub fn kernel_diagnostics(design: &DMatrix<f64>, kernel: &KernelSpec, inert_threshold: f64) -> KernelDiagnostics {
    let table = DistanceTable::new(kernel.mode, design);
    let mut c = table.correlation(&kernel.families, &kernel.range);
    let (min_offdiag, max_offdiag) = offdiag_extremes(&c);
    for i in 0..c.nrows() {
        c[(i, i)] += kernel.nugget_value();
    }
    let sensitivity = (kernel.mode == KernelMode::Separable)
        .then(|| sensitivities(&kernel.range, &input_ranges(KernelMode::Separable, design)));
    let inert = sensitivity
        .as_ref()
        .map(|s| s.iter().map(|&v| v < inert_threshold).collect());
    KernelDiagnostics {
        condition_number: condition(&c),
        min_offdiag,
        max_offdiag,
        sensitivity,
        inert,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sin_problem(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let f = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).collect();
        (DMatrix::from_vec(n, 1, x), DVector::from_vec(f))
    }

    #[test]
    fn constant_outputs_rejected() {
        let (design, _) = sin_problem(6);
        let f = DVector::from_element(6, 2.5);
        let k = KernelChoice::isotropic(CorrelationFamily::matern_5_2());
        let err = fit(&design, &f, TrendBasis::Constant, &k, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn sin_fit_is_interior() {
        let (design, f) = sin_problem(12);
        let k = KernelChoice::separable(vec![CorrelationFamily::matern_5_2()]);
        let (_, report) = fit(&design, &f, TrendBasis::Constant, &k, &FitConfig::default()).unwrap();
        assert!(report.grad_norm < 1e-4, "{report:?}");
        assert!(report.min_offdiag > 1e-6 && report.max_offdiag < 1.0 - 1e-6);
    }

    #[test]
    fn mmle_equals_flat_mmpe() {
        let (design, f) = sin_problem(10);
        let k = KernelChoice::separable(vec![CorrelationFamily::matern(1.5).unwrap()]);
        let a = FitConfig::default().with_estimator(Estimator::Mmle, PriorSpec::Flat);
        let b = FitConfig::default().with_estimator(Estimator::Mmpe, PriorSpec::Flat);
        let (_, ra) = fit(&design, &f, TrendBasis::Constant, &k, &a).unwrap();
        let (_, rb) = fit(&design, &f, TrendBasis::Constant, &k, &b).unwrap();
        assert_eq!(ra.xi, rb.xi);
    }

    #[test]
    fn winner_prefers_converged_then_lowest_index() {
        let t = |objective: f64, converged: bool| StartTrace {
            start: vec![],
            xi: vec![],
            objective,
            iterations: 1,
            converged,
            grad_norm: 0.0,
            error: None,
        };
        assert_eq!(pick_winner(&[t(1.0, true), t(1.0, true)]), Some(0));
        assert_eq!(pick_winner(&[t(1.0, true), t(5.0, false)]), Some(0));
        assert_eq!(pick_winner(&[t(f64::NAN, false), t(2.0, false)]), Some(1));
        assert_eq!(pick_winner(&[t(f64::NAN, false)]), None);
    }

    #[test]
    fn isotropic_inert_unsupported() {
        let (design, f) = sin_problem(8);
        let k = KernelChoice::isotropic(CorrelationFamily::matern_5_2());
        let (m, _) = fit(&design, &f, TrendBasis::Constant, &k, &FitConfig::default()).unwrap();
        assert!(matches!(detect_inert_inputs(&m, 0.1), Err(Error::Unsupported(_))));
    }
}
