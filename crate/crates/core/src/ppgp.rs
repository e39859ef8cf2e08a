//! Parallel partial emulation of vector-valued outputs: one correlation
//! matrix shared by every output coordinate, with per-coordinate trend and
//! variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::estimation::{
    in_trend_span, input_ranges, nugget_role, optimize_likelihood, sensitivities, FitConfig, FitReport,
    KernelChoice, NuggetChoice, Optimized,
};
use crate::gls::{gls_solve_multi, CholeskyFactor, GlsState, Likelihood};
use crate::kernels::{build_correlation, cross_correlation, DistanceTable, KernelMode, KernelSpec};
use crate::model::{from_rows, rows, Provenance};
use crate::prediction::{point_terms, PredictiveT};

pub(crate) const PPGP_MODEL_KIND: &str = "ppgp_model";

#[derive(Debug, Clone)]
pub struct PpgpModel {
    design: DMatrix<f64>,
    /// `k × n`, one row per output coordinate.
    outputs: DMatrix<f64>,
    basis: TrendBasis,
    kernel: KernelSpec,
    gls: GlsState,
    sigma2: Vec<f64>,
    pub labels: Option<Vec<String>>,
    /// Coordinates with `S² = 0`.
    pub degenerate: Vec<usize>,
    pub provenance: Provenance,
}

impl PpgpModel {
    /// Conditions all coordinates on the design with a fixed kernel.
    pub fn new(design: DMatrix<f64>, outputs: DMatrix<f64>, basis: TrendBasis, kernel: KernelSpec) -> Result<Self> {
        let (n, p) = design.shape();
        if outputs.ncols() != n {
            return Err(Error::dim("output matrix columns", n, outputs.ncols()));
        }
        if outputs.nrows() == 0 {
            return Err(Error::Degenerate("need at least one output coordinate".into()));
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
        let h = basis.matrix(&design);
        let gls = gls_solve_multi(factor, &h, &outputs.transpose())?;
        let degenerate = degenerate_rows(&h, &outputs);
        let sigma2 = gls
            .s2_all()
            .iter()
            .enumerate()
            .map(|(j, s)| if degenerate.contains(&j) { 0.0 } else { s / (n - q) as f64 })
            .collect();
        Ok(PpgpModel {
            design,
            outputs,
            basis,
            kernel,
            gls,
            sigma2,
            labels: None,
            degenerate,
            provenance: Provenance {
                jitter,
                ..Provenance::default()
            },
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn basis(&self) -> TrendBasis {
        self.basis
    }

    pub fn k(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn dof(&self) -> usize {
        self.n() - self.basis.q(self.design.ncols())
    }

    /// `q × k` trend coefficients.
    pub fn beta(&self) -> &DMatrix<f64> {
        self.gls.beta_all()
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn gls(&self) -> &GlsState {
        &self.gls
    }

    pub fn to_file(&self) -> PpgpModelFile {
        PpgpModelFile {
            schema: 1,
            kind: PPGP_MODEL_KIND.into(),
            design: rows(&self.design),
            outputs: rows(&self.outputs),
            basis: self.basis,
            kernel: self.kernel.clone(),
            beta: rows(&self.gls.beta_all().transpose()),
            sigma2: self.sigma2.clone(),
            labels: self.labels.clone(),
            degenerate: self.degenerate.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_file(file: PpgpModelFile) -> Result<Self> {
        if file.schema != 1 || file.kind != PPGP_MODEL_KIND {
            return Err(Error::Serialization(format!(
                "expected schema 1 `{PPGP_MODEL_KIND}`, got schema {} `{}`",
                file.schema, file.kind
            )));
        }
        let mut m = PpgpModel::new(from_rows(&file.design)?, from_rows(&file.outputs)?, file.basis, file.kernel)?;
        m.labels = file.labels;
        m.provenance = file.provenance;
        Ok(m)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: PpgpModelFile = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        PpgpModel::from_file(file)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpgpModelFile {
    pub schema: u32,
    pub kind: String,
    pub design: Vec<Vec<f64>>,
    /// One row per output coordinate.
    pub outputs: Vec<Vec<f64>>,
    pub basis: TrendBasis,
    pub kernel: KernelSpec,
    /// One row of `q` coefficients per coordinate.
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub degenerate: Vec<usize>,
    pub provenance: Provenance,
}

fn degenerate_rows(h: &DMatrix<f64>, outputs: &DMatrix<f64>) -> Vec<usize> {
    (0..outputs.nrows())
        .filter(|&j| in_trend_span(h, &outputs.row(j).transpose()))
        .collect()
}

/// Fits the shared correlation parameters by maximizing the summed
/// marginal likelihood (plus prior) over non-degenerate coordinates.
pub fn ppgp_fit(
    design: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    basis: TrendBasis,
    kernel: &KernelChoice,
    config: &FitConfig,
) -> Result<(PpgpModel, FitReport)> {
    let (n, p) = design.shape();
    if outputs.ncols() != n {
        return Err(Error::dim("output matrix columns", n, outputs.ncols()));
    }
    let expected = match kernel.mode {
        KernelMode::Isotropic => 1,
        KernelMode::Separable => p,
    };
    if kernel.families.len() != expected {
        return Err(Error::dim("kernel families", expected, kernel.families.len()));
    }
    if design.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("design and outputs must be finite".into()));
    }
    let q = basis.q(p);
    if n <= q {
        return Err(Error::Degenerate(format!("need n > q, got n = {n} and q = {q}")));
    }
    let h = basis.matrix(design);
    let degenerate = degenerate_rows(&h, outputs);
    if degenerate.len() == outputs.nrows() {
        return Err(Error::Degenerate(
            "every output coordinate is fitted exactly by the trend".into(),
        ));
    }
    if !degenerate.is_empty() {
        log::warn!("{} degenerate output coordinates excluded from the fit", degenerate.len());
    }
    let mut lik = Likelihood::new(
        DistanceTable::new(kernel.mode, design),
        kernel.families.clone(),
        nugget_role(kernel.nugget),
        h,
        outputs.transpose(),
    );
    lik.active = (0..outputs.nrows()).filter(|j| !degenerate.contains(j)).collect();
    let Optimized { params, mut report } = optimize_likelihood(&lik, design, config)?;
    report.degenerate_outputs = degenerate;
    let spec = KernelSpec {
        mode: kernel.mode,
        families: kernel.families.clone(),
        range: params.range.clone(),
        nugget: match kernel.nugget {
            NuggetChoice::Absent => None,
            _ => Some(params.nugget),
        },
    };
    if kernel.mode == KernelMode::Separable {
        let s = sensitivities(&params.range, &input_ranges(kernel.mode, design));
        report.inert = Some(s.iter().map(|&v| v < config.inert_threshold).collect());
        report.sensitivity = Some(s);
    }
    let mut model = PpgpModel::new(design.clone(), outputs.clone(), basis, spec)?;
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

/// Per-coordinate predictive distributions at one input; `c**` is shared.
pub fn ppgp_predict(model: &PpgpModel, x: &[f64]) -> Result<Vec<PredictiveT>> {
    let t = point_terms(&model.kernel, model.basis, &model.design, &model.gls, x, false)?;
    let alpha = model.gls.alpha();
    let beta = model.gls.beta_all();
    Ok((0..model.k())
        .map(|j| PredictiveT {
            location: t.h.dot(&beta.column(j)) + t.r.dot(&alpha.column(j)),
            scale2: model.sigma2[j] * t.c_star2,
            dof: model.dof(),
            clip: t.clip,
        })
        .collect())
}

/// Batch predictions: `k × m` locations and squared scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgpBatch {
    pub locations: DMatrix<f64>,
    pub scale2: DMatrix<f64>,
    pub dof: usize,
}

pub fn ppgp_predict_batch(model: &PpgpModel, x: &DMatrix<f64>) -> Result<PpgpBatch> {
    let (m, k) = (x.nrows(), model.k());
    let mut locations = DMatrix::zeros(k, m);
    let mut scale2 = DMatrix::zeros(k, m);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..m {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[(i, j)];
        }
        for (j, pt) in ppgp_predict(model, &row)?.into_iter().enumerate() {
            locations[(j, i)] = pt.location;
            scale2[(j, i)] = pt.scale2;
        }
    }
    Ok(PpgpBatch {
        locations,
        scale2,
        dof: model.dof(),
    })
}

/// Predictive means only, `k × m`, as `βᵀH* + αᵀR*` with two matrix products.
pub fn ppgp_predict_means(model: &PpgpModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = model.design.ncols();
    if x.ncols() != p {
        return Err(Error::dim("test input", p, x.ncols()));
    }
    let m = x.nrows();
    let n = model.n();
    let mut r = DMatrix::zeros(n, m);
    let mut row = vec![0.0; p];
    for i in 0..m {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[(i, j)];
        }
        r.set_column(i, &DVector::from_vec(cross_correlation(&model.kernel, &model.design, &row)));
    }
    let h = model.basis.matrix(x);
    let mut out = model.gls.beta_all().tr_mul(&h.transpose());
    out.gemm_tr(1.0, model.gls.alpha(), &r, 1.0);
    Ok(out)
}

/// Predictive means (`k × m`) straight from the training data at fixed
/// correlation parameters. The work is one factorization of `C`, solves
/// against the `m` cross-correlation columns and the trend, and products with
/// the `k × n` outputs, so the output count enters only through `O(nk)` terms
/// per test input. No per-coordinate variances are formed.
pub fn ppgp_means_direct(
    design: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    basis: TrendBasis,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = design.shape();
    if outputs.ncols() != n {
        return Err(Error::dim("output matrix columns", n, outputs.ncols()));
    }
    if x.ncols() != p {
        return Err(Error::dim("test input", p, x.ncols()));
    }
    let factor = CholeskyFactor::new(&build_correlation(kernel, design)?.matrix)?;
    let h = basis.matrix(design);
    let m = x.nrows();
    let mut r = DMatrix::zeros(n, m);
    let mut row = vec![0.0; p];
    for i in 0..m {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[(i, j)];
        }
        r.set_column(i, &DVector::from_vec(cross_correlation(kernel, design, &row)));
    }
    let ci_r = factor.solve(&r);
    let ci_h = factor.solve(&h);
    let g = h.tr_mul(&ci_h);
    let g = g
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { columns: (0..h.ncols()).collect() })?;
    // β is q × k
    let beta = g.solve(&(outputs * &ci_h).transpose());
    // mean = F C⁻¹r* + βᵀ(h* − HᵀC⁻¹r*)
    let trend = basis.matrix(x).transpose() - h.tr_mul(&ci_r);
    let mut out = outputs * &ci_r;
    out.gemm_tr(1.0, &beta, &trend, 1.0);
    Ok(out)
}
