//! Reference and jointly robust (JR) priors on range and nugget parameters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::gls::{Evaluation, Likelihood};
use crate::kernels::{KernelMode, KernelSpec};

/// Log reference prior returned when `det I*` is not numerically positive.
pub const REFERENCE_SENTINEL: f64 = -1e30;

/// Relative central-difference step for reference-prior gradients in ξ.
pub(crate) const REFERENCE_FD_STEP: f64 = 1e-4;

fn default_b1() -> f64 {
    0.2
}

fn default_b2() -> f64 {
    1.0
}

/// Hyperparameters of `π(φ̃) ∝ t^{b1} exp(−b2 t)` with `t = Σ w_l φ̃_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JrPrior {
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(default = "default_b2")]
    pub b2: f64,
    /// One weight per range parameter, optionally followed by the nugget
    /// weight. `None` until materialized against a design.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl Default for JrPrior {
    fn default() -> Self {
        JrPrior {
            b1: default_b1(),
            b2: default_b2(),
            weights: None,
        }
    }
}

impl JrPrior {
    pub fn new(b1: f64, b2: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        let prior = JrPrior { b1, b2, weights };
        prior.check_hyper()?;
        Ok(prior)
    }

    fn check_hyper(&self) -> Result<()> {
        if !(self.b2 > 0.0 && self.b2.is_finite()) {
            return Err(Error::InvalidConfig(format!("JR prior needs b2 > 0, got {}", self.b2)));
        }
        if !self.b1.is_finite() {
            return Err(Error::InvalidConfig("JR prior b1 must be finite".into()));
        }
        if let Some(w) = &self.weights {
            if w.is_empty() || w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig(format!(
                    "JR prior weights must be positive, got {w:?}"
                )));
            }
        }
        Ok(())
    }

    /// Checks `b1 > −(m+1)` for `m` parameters; warns when `b1 ≤ −m`, where
    /// the density is no longer integrable.
    fn check_dimension(&self, m: usize) -> Result<()> {
        self.check_hyper()?;
        let m = m as f64;
        if self.b1 <= -(m + 1.0) {
            return Err(Error::InvalidConfig(format!(
                "JR prior needs b1 > {}, got {}",
                -(m + 1.0),
                self.b1
            )));
        }
        if self.b1 <= -m {
            log::warn!("JR prior with b1 = {} <= -{m} is not integrable", self.b1);
        }
        Ok(())
    }

    /// Fills in default weights: `n^{-1/p}·range_l` for each range parameter
    /// (the largest pairwise distance for isotropic kernels) and `1` for the
    /// nugget.
    pub fn materialize(&self, mode: KernelMode, design: &DMatrix<f64>, nugget: bool) -> Result<Self> {
        let m = match mode {
            KernelMode::Isotropic => 1,
            KernelMode::Separable => design.ncols(),
        };
        let want = m + usize::from(nugget);
        let weights = match &self.weights {
            Some(w) if w.len() == want => w.clone(),
            Some(w) if nugget && w.len() == m => {
                let mut w = w.clone();
                w.push(1.0);
                w
            }
            Some(w) => return Err(Error::dim("JR prior weights", want, w.len())),
            None => {
                let mut w = default_weights(mode, design);
                if nugget {
                    w.push(1.0);
                }
                w
            }
        };
        let prior = JrPrior {
            b1: self.b1,
            b2: self.b2,
            weights: Some(weights),
        };
        prior.check_dimension(want)?;
        Ok(prior)
    }

    fn weights(&self, m: usize) -> Result<&[f64]> {
        match &self.weights {
            Some(w) if w.len() == m => Ok(w),
            Some(w) => Err(Error::dim("JR prior weights", m, w.len())),
            None => Err(Error::InvalidConfig(
                "JR prior weights must be materialized against a design".into(),
            )),
        }
    }

    /// `b1·log t − b2·t` and its gradient in log coordinates.
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        let w = self.weights(x.len())?;
        if let Some(&bad) = x.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!(
                "JR prior needs positive inverse ranges and nugget, got {bad}"
            )));
        }
        let t: f64 = w.iter().zip(x).map(|(w, v)| w * v).sum();
        let value = self.b1 * t.ln() - self.b2 * t;
        let coef = self.b1 / t - self.b2;
        let grad = DVector::from_iterator(x.len(), w.iter().zip(x).map(|(w, v)| coef * w * v));
        Ok((value, grad))
    }
}

fn default_weights(mode: KernelMode, design: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = design.shape();
    let scale = (n as f64).powf(-1.0 / p as f64);
    let fix = |r: f64| {
        if r > 0.0 {
            scale * r
        } else {
            log::warn!("input without spread; JR weight falls back to unit range");
            scale
        }
    };
    match mode {
        KernelMode::Separable => (0..p)
            .map(|l| {
                let c = design.column(l);
                fix(c.max() - c.min())
            })
            .collect(),
        KernelMode::Isotropic => {
            let mut dmax: f64 = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    dmax = dmax.max((design.row(i) - design.row(j)).norm());
                }
            }
            vec![fix(dmax)]
        }
    }
}

/// Prior on the correlation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PriorSpec {
    Flat,
    Reference,
    Jr(JrPrior),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::jr()
    }
}

impl PriorSpec {
    pub fn jr() -> Self {
        PriorSpec::Jr(JrPrior::default())
    }

    /// Resolves defaults against a design so the prior can be echoed in full.
    pub fn materialize(&self, mode: KernelMode, design: &DMatrix<f64>, nugget: bool) -> Result<Self> {
        Ok(match self {
            PriorSpec::Flat => PriorSpec::Flat,
            PriorSpec::Reference => PriorSpec::Reference,
            PriorSpec::Jr(jr) => PriorSpec::Jr(jr.materialize(mode, design, nugget)?),
        })
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, PriorSpec::Flat)
    }
}

/// Fisher information `I*(φ)` of the marginal model.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    /// Symmetric `(m+1) × (m+1)` matrix; entry `[0,0]` is `n − q`.
    pub matrix: DMatrix<f64>,
    /// `W_l = Ċ_l Q` for each parameter (ranges, then nugget).
    pub w: Vec<DMatrix<f64>>,
    /// Largest entrywise asymmetry before symmetrization.
    pub asymmetry: f64,
}

fn dummy_outputs(n: usize) -> DMatrix<f64> {
    // The Fisher information does not depend on the outputs; any vector
    // outside span(H) keeps the GLS step well defined.
    DMatrix::from_fn(n, 1, |i, _| ((i + 1) as f64).sqrt().sin())
}

fn reference_likelihood(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
    basis: TrendBasis,
) -> Result<(Likelihood, crate::gls::CorrParams)> {
    let n = design.nrows();
    let (lik, params) = Likelihood::from_spec(spec, design, basis, dummy_outputs(n))?;
    if lik.n() <= lik.q() {
        return Err(Error::Degenerate(format!(
            "marginal model needs n > q, got n = {} and q = {}",
            lik.n(),
            lik.q()
        )));
    }
    Ok((lik, params))
}

pub fn fisher_info(spec: &KernelSpec, design: &DMatrix<f64>, basis: TrendBasis) -> Result<FisherInfo> {
    let (lik, params) = reference_likelihood(spec, design, basis)?;
    let ev = lik.evaluate(&params, true)?;
    let (matrix, w, asymmetry) = lik.fisher(&ev);
    Ok(FisherInfo { matrix, w, asymmetry })
}

/// `½ log det I*`, or [`REFERENCE_SENTINEL`] when the determinant is not
/// numerically positive. The boolean is true when the sentinel was used.
pub(crate) fn half_log_det(info: &DMatrix<f64>) -> Result<(f64, bool)> {
    if info.iter().any(|v| !v.is_finite()) {
        return Ok((REFERENCE_SENTINEL, true));
    }
    if let Some(ch) = info.clone().cholesky() {
        let ld: f64 = ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        if ld.is_finite() {
            return Ok((ld, false));
        }
    }
    let eig = SymmetricEigen::new(info.clone()).eigenvalues;
    let scale = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if eig.iter().any(|&v| v < -1e-6 * scale) {
        return Err(Error::PriorEvaluation {
            eigenvalues: eig.iter().copied().collect(),
        });
    }
    Ok((REFERENCE_SENTINEL, true))
}

/// `½ log det I*(φ)` of the reference prior (outputs play no role).
pub fn log_reference_prior(spec: &KernelSpec, design: &DMatrix<f64>, basis: TrendBasis) -> Result<f64> {
    let info = fisher_info(spec, design, basis)?;
    Ok(half_log_det(&info.matrix)?.0)
}

/// `b1·log(Σ w_l φ̃_l) − b2·Σ w_l φ̃_l`; the nugget enters as one more
/// inverse-range slot when present.
pub fn log_jr_prior(prior: &JrPrior, inv_range: &[f64], nugget: Option<f64>) -> Result<f64> {
    let x: Vec<f64> = inv_range.iter().copied().chain(nugget).collect();
    prior.check_dimension(x.len())?;
    Ok(prior.value_and_grad(&x)?.0)
}

/// Gradient of [`log_jr_prior`] in `(log φ̃_1, …, log φ̃_m [, log η])`.
pub fn grad_log_jr_prior(prior: &JrPrior, inv_range: &[f64], nugget: Option<f64>) -> Result<DVector<f64>> {
    let x: Vec<f64> = inv_range.iter().copied().chain(nugget).collect();
    prior.check_dimension(x.len())?;
    Ok(prior.value_and_grad(&x)?.1)
}

/// Log prior density (up to a constant) of the correlation parameters in
/// `spec`; `Flat` gives 0. JR weights default from the design if unset.
pub fn log_prior(prior: &PriorSpec, spec: &KernelSpec, design: &DMatrix<f64>, basis: TrendBasis) -> Result<f64> {
    match prior {
        PriorSpec::Flat => Ok(0.0),
        PriorSpec::Reference => log_reference_prior(spec, design, basis),
        PriorSpec::Jr(_) => {
            let PriorSpec::Jr(jr) = prior.materialize(spec.mode, design, spec.nugget.is_some())? else {
                unreachable!()
            };
            let inv: Vec<f64> = spec.range.iter().map(|phi| 1.0 / phi).collect();
            log_jr_prior(&jr, &inv, spec.nugget)
        }
    }
}

/// A materialized prior bound to a likelihood, evaluated in ξ coordinates.
#[derive(Debug, Clone)]
pub(crate) enum PriorTerm {
    Flat,
    Reference,
    Jr(JrPrior),
}

impl PriorTerm {
    pub fn from_spec(prior: &PriorSpec) -> Result<Self> {
        Ok(match prior {
            PriorSpec::Flat => PriorTerm::Flat,
            PriorSpec::Reference => PriorTerm::Reference,
            PriorSpec::Jr(jr) if jr.weights.is_some() => PriorTerm::Jr(jr.clone()),
            _ => {
                return Err(Error::InvalidConfig(
                    "prior must be materialized before use".into(),
                ))
            }
        })
    }

    /// Prior value at an evaluation; for Reference this needs `dc`.
    pub fn value(&self, lik: &Likelihood, ev: &Evaluation) -> Result<f64> {
        match self {
            PriorTerm::Flat => Ok(0.0),
            PriorTerm::Reference => {
                let (info, _, _) = lik.fisher(ev);
                Ok(half_log_det(&info)?.0)
            }
            PriorTerm::Jr(jr) => Ok(jr.value_and_grad(&jr_args(lik, ev))?.0),
        }
    }

    /// Gradient in ξ. `xi` must be the coordinates of `ev`.
    pub fn grad_xi(&self, lik: &Likelihood, ev: &Evaluation, xi: &[f64]) -> Result<DVector<f64>> {
        match self {
            PriorTerm::Flat => Ok(DVector::zeros(xi.len())),
            PriorTerm::Jr(jr) => {
                // ξ_l = log φ̃_l and log η are exactly the JR log coordinates.
                Ok(jr.value_and_grad(&jr_args(lik, ev))?.1)
            }
            PriorTerm::Reference => {
                let mut g = DVector::zeros(xi.len());
                for l in 0..xi.len() {
                    let h = REFERENCE_FD_STEP * xi[l].abs().max(1.0);
                    let mut up = xi.to_vec();
                    up[l] += h;
                    let mut dn = xi.to_vec();
                    dn[l] -= h;
                    let f = |x: &[f64]| -> Result<f64> {
                        let e = lik.evaluate(&lik.params_from_xi(x), true)?;
                        PriorTerm::Reference.value(lik, &e)
                    };
                    g[l] = (f(&up)? - f(&dn)?) / (2.0 * h);
                }
                Ok(g)
            }
        }
    }
}

fn jr_args(lik: &Likelihood, ev: &Evaluation) -> Vec<f64> {
    let mut x: Vec<f64> = ev.params.range.iter().map(|phi| 1.0 / phi).collect();
    if lik.nugget == crate::gls::NuggetRole::Free {
        x.push(ev.params.nugget);
    }
    x
}
