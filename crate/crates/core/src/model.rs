//! Fitted scalar emulator and its JSON form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::gls::{gls_solve, CholeskyFactor, GlsState};
use crate::kernels::{build_correlation, KernelSpec};
use crate::priors::PriorSpec;

/// Estimation method for the correlation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Profile likelihood with `β` and `σ²` maximized out.
    Mle,
    /// Marginal likelihood with `β` and `σ²` integrated out.
    Mmle,
    /// Marginal likelihood times a prior on the correlation parameters.
    #[default]
    Mmpe,
}

/// How a model came to be; stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub estimator: Option<Estimator>,
    pub prior: Option<PriorSpec>,
    pub objective: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub grad_norm: Option<f64>,
    /// Diagonal inflation applied to factorize `Ĉ`.
    pub jitter: f64,
    pub seed: Option<u64>,
}

/// An emulator with fixed correlation parameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    design: DMatrix<f64>,
    outputs: DVector<f64>,
    basis: TrendBasis,
    kernel: KernelSpec,
    gls: GlsState,
    sigma2: f64,
    pub provenance: Provenance,
}

impl GpModel {
    /// Conditions a GP with the given kernel on `(design, outputs)`.
    pub fn new(
        design: DMatrix<f64>,
        outputs: DVector<f64>,
        basis: TrendBasis,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let (n, p) = design.shape();
        if outputs.len() != n {
            return Err(Error::dim("outputs", n, outputs.len()));
        }
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("outputs must be finite".into()));
        }
        let q = basis.q(p);
        if n <= q {
            return Err(Error::Degenerate(format!("need n > q, got n = {n} and q = {q}")));
        }
        let c = build_correlation(&kernel, &design)?;
        let factor = CholeskyFactor::new(&c.matrix)?;
        let jitter = factor.jitter();
        let gls = gls_solve(factor, &basis.matrix(&design), &outputs)?;
        let sigma2 = gls.s2() / (n - q) as f64;
        Ok(GpModel {
            design,
            outputs,
            basis,
            kernel,
            gls,
            sigma2,
            provenance: Provenance {
                jitter,
                ..Provenance::default()
            },
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn basis(&self) -> TrendBasis {
        self.basis
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn gls(&self) -> &GlsState {
        &self.gls
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn q(&self) -> usize {
        self.basis.q(self.p())
    }

    pub fn beta(&self) -> DVector<f64> {
        self.gls.beta()
    }

    /// `σ̂² = S²/(n − q)`.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Degrees of freedom of every predictive distribution, `n − q`.
    pub fn dof(&self) -> usize {
        self.n() - self.q()
    }

    pub fn to_file(&self) -> GpModelFile {
        GpModelFile {
            schema: 1,
            kind: GP_MODEL_KIND.into(),
            design: rows(&self.design),
            outputs: self.outputs.iter().copied().collect(),
            basis: self.basis,
            kernel: self.kernel.clone(),
            beta: self.beta().iter().copied().collect(),
            sigma2: self.sigma2,
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Rebuilds a model from its file form; the Cholesky factor and GLS
    /// quantities are recomputed from the stored design and outputs.
    pub fn from_file(file: GpModelFile) -> Result<Self> {
        if file.schema != 1 {
            return Err(Error::Serialization(format!("unsupported schema {}", file.schema)));
        }
        if file.kind != GP_MODEL_KIND {
            return Err(Error::Serialization(format!(
                "expected kind `{GP_MODEL_KIND}`, got `{}`",
                file.kind
            )));
        }
        let design = from_rows(&file.design)?;
        let mut model = GpModel::new(design, DVector::from_vec(file.outputs), file.basis, file.kernel)?;
        model.provenance = file.provenance;
        Ok(model)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GpModelFile = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        GpModel::from_file(file)
    }
}

pub(crate) const GP_MODEL_KIND: &str = "gp_model";

/// Serialized form of [`GpModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelFile {
    pub schema: u32,
    pub kind: String,
    pub design: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub basis: TrendBasis,
    pub kernel: KernelSpec,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub provenance: Provenance,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    if let Some(bad) = rows.iter().find(|r| r.len() != p) {
        return Err(Error::dim("design row", p, bad.len()));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::CorrelationFamily;

    #[test]
    fn json_round_trip_recomputes_factor() {
        let design = DMatrix::from_column_slice(5, 1, &[0.0, 0.2, 0.5, 0.7, 1.0]);
        let f = DVector::from_vec(vec![0.3, 1.0, -0.2, 0.4, 0.9]);
        let spec = KernelSpec::isotropic(CorrelationFamily::matern_5_2(), 0.4, None).unwrap();
        let m = GpModel::new(design, f, TrendBasis::Constant, spec).unwrap();
        let json = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["kind"], "gp_model");
        let back = GpModel::from_json(&json).unwrap();
        assert_eq!(back.sigma2(), m.sigma2());
        assert_eq!(back.beta(), m.beta());
        assert_eq!(back.dof(), 4);
    }

    #[test]
    fn rejects_too_few_points() {
        let design = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let f = DVector::from_vec(vec![0.3, 1.0]);
        let spec = KernelSpec::isotropic(CorrelationFamily::matern_5_2(), 0.4, None).unwrap();
        assert!(GpModel::new(design, f, TrendBasis::Linear, spec).is_err());
    }
}
