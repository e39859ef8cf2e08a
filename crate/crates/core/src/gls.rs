//! Generalized least squares and the integrated likelihoods shared by the
//! scalar emulator, the parallel partial emulator, the priors and calibration.
//!
//! Every evaluation at a correlation parameter goes through one Cholesky
//! factorization of `C + ηI`; all other quantities are triangular solves
//! against that factor.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::basis::TrendBasis;
use crate::error::{Error, Result};
use crate::kernels::{CorrelationFamily, DistanceTable, KernelSpec};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of a correlation matrix, with the diagonal
/// inflation (relative to the mean diagonal) that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `matrix`, retrying with diagonal inflation
    /// `1e-10·mean(diag)`, `1e-9·mean(diag)`, … up to `1e-4·mean(diag)`.
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::dim("correlation matrix columns", matrix.nrows(), matrix.ncols()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning { jitters: vec![] });
        }
        if let Some(ch) = matrix.clone().cholesky() {
            return Ok(CholeskyFactor {
                l: ch.unpack(),
                jitter: 0.0,
            });
        }
        let n = matrix.nrows();
        let mean_diag = matrix.diagonal().sum() / n as f64;
        let mut tried = Vec::new();
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            tried.push(jitter);
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                log::debug!("cholesky succeeded with jitter {jitter:e}");
                return Ok(CholeskyFactor {
                    l: ch.unpack(),
                    jitter,
                });
            }
            rel *= 10.0;
        }
        Err(Error::Conditioning { jitters: tried })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Absolute diagonal inflation applied before factorizing (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻ᵀ B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `C⁻¹ B` by two triangular solves.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// `C⁻¹` assembled as `L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = self.solve_lower(&DMatrix::identity(self.dim(), self.dim()));
        linv.tr_mul(&linv)
    }
}

/// Generalized least squares fit of one or several output vectors sharing
/// the same correlation matrix.
#[derive(Debug, Clone)]
pub struct GlsState {
    factor: CholeskyFactor,
    /// `L⁻¹ H`.
    linv_h: DMatrix<f64>,
    /// Lower Cholesky factor of `Hᵀ C⁻¹ H` (empty when `q = 0`).
    info_l: DMatrix<f64>,
    /// `log |C|` (of the matrix actually factorized).
    pub log_det_c: f64,
    /// `log |Hᵀ C⁻¹ H|`.
    pub log_det_info: f64,
    beta: DMatrix<f64>,
    s2: Vec<f64>,
    /// `C⁻¹ (f − Hβ̂)` per output column.
    alpha: DMatrix<f64>,
}

impl GlsState {
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn n(&self) -> usize {
        self.factor.dim()
    }

    pub fn q(&self) -> usize {
        self.linv_h.ncols()
    }

    pub fn k(&self) -> usize {
        self.s2.len()
    }

    /// `β̂` of the first (or only) output.
    pub fn beta(&self) -> DVector<f64> {
        self.beta.column(0).into_owned()
    }

    /// `q × k` matrix of GLS coefficients.
    pub fn beta_all(&self) -> &DMatrix<f64> {
        &self.beta
    }

    /// `S²` of the first (or only) output.
    pub fn s2(&self) -> f64 {
        self.s2[0]
    }

    pub fn s2_all(&self) -> &[f64] {
        &self.s2
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub(crate) fn linv_h(&self) -> &DMatrix<f64> {
        &self.linv_h
    }

    /// Solves `(Hᵀ C⁻¹ H) x = b`.
    pub(crate) fn info_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.info_l.solve_lower_triangular_mut(&mut x);
        self.info_l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub(crate) fn info_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.info_l.solve_lower_triangular_mut(&mut x);
        self.info_l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `(Hᵀ C⁻¹ H)⁻¹`.
    pub fn info_inverse(&self) -> DMatrix<f64> {
        self.info_solve_mat(&DMatrix::identity(self.q(), self.q()))
    }

    /// `Q = C⁻¹ P = C⁻¹ − C⁻¹H (HᵀC⁻¹H)⁻¹ HᵀC⁻¹`.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let cinv = self.factor.inverse();
        if self.q() == 0 {
            return cinv;
        }
        let g = self.factor.solve_upper(&self.linv_h);
        let ag = self.info_solve_mat(&g.transpose());
        let mut q = cinv - &g * ag;
        symmetrize(&mut q);
        q
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Columns of `B` that are (numerically) in the span of the preceding ones.
fn dependent_columns(b: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..b.ncols() {
        let col = b.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for e in &basis {
            let c = e.dot(&r);
            r -= e * c;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-10 * norm {
            bad.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    bad
}

/// GLS estimate `β̂ = (HᵀC⁻¹H)⁻¹HᵀC⁻¹f` and `S² = (f − Hβ̂)ᵀC⁻¹(f − Hβ̂)`.
pub fn gls_solve(factor: CholeskyFactor, h: &DMatrix<f64>, f: &DVector<f64>) -> Result<GlsState> {
    let f = DMatrix::from_column_slice(f.len(), 1, f.as_slice());
    gls_solve_multi(factor, h, &f)
}

/// GLS for `k` output columns (`outputs` is `n × k`) sharing one factor.
pub fn gls_solve_multi(
    factor: CholeskyFactor,
    h: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
) -> Result<GlsState> {
    let n = factor.dim();
    if h.nrows() != n {
        return Err(Error::dim("trend basis rows", n, h.nrows()));
    }
    if outputs.nrows() != n {
        return Err(Error::dim("output rows", n, outputs.nrows()));
    }
    let q = h.ncols();
    let linv_h = factor.solve_lower(h);
    let linv_f = factor.solve_lower(outputs);
    let (info_l, log_det_info, beta, resid) = if q == 0 {
        (DMatrix::zeros(0, 0), 0.0, DMatrix::zeros(0, outputs.ncols()), linv_f)
    } else {
        let bad = dependent_columns(&linv_h);
        if !bad.is_empty() {
            return Err(Error::RankDeficient { columns: bad });
        }
        let info = linv_h.tr_mul(&linv_h);
        let info_l = info
            .cholesky()
            .ok_or_else(|| Error::RankDeficient {
                columns: (0..q).collect(),
            })?
            .unpack();
        let log_det_info = 2.0 * info_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut beta = linv_h.tr_mul(&linv_f);
        info_l.solve_lower_triangular_mut(&mut beta);
        info_l.tr_solve_lower_triangular_mut(&mut beta);
        let resid = &linv_f - &linv_h * &beta;
        (info_l, log_det_info, beta, resid)
    };
    let s2 = resid.column_iter().map(|c| c.norm_squared()).collect();
    let alpha = factor.solve_upper(&resid);
    Ok(GlsState {
        log_det_c: factor.log_det(),
        factor,
        linv_h,
        info_l,
        log_det_info,
        beta,
        s2,
        alpha,
    })
}

/// Role of the nugget in an objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum NuggetRole {
    Absent,
    Fixed(f64),
    /// Estimated; appended to the parameter vector as `log η`.
    Free,
}

/// A point in correlation-parameter space.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CorrParams {
    pub range: Vec<f64>,
    pub nugget: f64,
}

/// Design-bound likelihood machinery with cached distances.
#[derive(Debug)]
pub(crate) struct Likelihood {
    pub table: DistanceTable,
    pub families: Vec<CorrelationFamily>,
    pub nugget: NuggetRole,
    pub h: DMatrix<f64>,
    /// `n × k` outputs.
    pub outputs: DMatrix<f64>,
    /// Output columns entering the objective sum.
    pub active: Vec<usize>,
    factorizations: AtomicUsize,
}

/// Everything evaluated at one parameter value.
#[derive(Debug)]
pub(crate) struct Evaluation {
    pub params: CorrParams,
    pub gls: GlsState,
    /// `∂C/∂φ_l` for each range parameter (nugget derivative is `I`).
    pub dc: Vec<DMatrix<f64>>,
}

impl Likelihood {
    pub fn new(
        table: DistanceTable,
        families: Vec<CorrelationFamily>,
        nugget: NuggetRole,
        h: DMatrix<f64>,
        outputs: DMatrix<f64>,
    ) -> Self {
        let active = (0..outputs.ncols()).collect();
        Likelihood {
            table,
            families,
            nugget,
            h,
            outputs,
            active,
            factorizations: AtomicUsize::new(0),
        }
    }

    /// Builds the machinery for a concrete kernel spec; a present nugget is
    /// treated as a free parameter.
    pub fn from_spec(
        spec: &KernelSpec,
        design: &DMatrix<f64>,
        basis: TrendBasis,
        outputs: DMatrix<f64>,
    ) -> Result<(Self, CorrParams)> {
        spec.validate(design.ncols())?;
        if design.iter().any(|v| !v.is_finite()) || outputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("design and outputs must be finite".into()));
        }
        if outputs.nrows() != design.nrows() {
            return Err(Error::dim("outputs", design.nrows(), outputs.nrows()));
        }
        let role = if spec.nugget.is_some() {
            NuggetRole::Free
        } else {
            NuggetRole::Absent
        };
        let lik = Likelihood::new(
            DistanceTable::new(spec.mode, design),
            spec.families.clone(),
            role,
            basis.matrix(design),
            outputs,
        );
        let params = CorrParams {
            range: spec.range.clone(),
            nugget: spec.nugget_value(),
        };
        Ok((lik, params))
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn q(&self) -> usize {
        self.h.ncols()
    }

    pub fn n_range(&self) -> usize {
        self.families.len()
    }

    /// Number of free parameters (ranges plus a free nugget).
    pub fn n_free(&self) -> usize {
        self.n_range() + usize::from(self.nugget == NuggetRole::Free)
    }

    pub fn factorizations(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }

    fn nugget_value(&self, params: &CorrParams) -> f64 {
        match self.nugget {
            NuggetRole::Absent => 0.0,
            NuggetRole::Fixed(eta) => eta,
            NuggetRole::Free => params.nugget,
        }
    }

    /// Maps `ξ = (log 1/φ_1, …, log 1/φ_m [, log η])` to parameters.
    pub fn params_from_xi(&self, xi: &[f64]) -> CorrParams {
        let m = self.n_range();
        let range = xi[..m].iter().map(|x| (-x).exp()).collect();
        let nugget = match self.nugget {
            NuggetRole::Absent => 0.0,
            NuggetRole::Fixed(eta) => eta,
            NuggetRole::Free => xi[m].exp(),
        };
        CorrParams { range, nugget }
    }

    /// Jacobian diagonal `∂(φ, η)/∂ξ`, used to carry gradients into ξ.
    pub fn xi_jacobian(&self, params: &CorrParams) -> Vec<f64> {
        let mut j: Vec<f64> = params.range.iter().map(|phi| -phi).collect();
        if self.nugget == NuggetRole::Free {
            j.push(params.nugget);
        }
        j
    }

    pub fn evaluate(&self, params: &CorrParams, with_grad: bool) -> Result<Evaluation> {
        let (mut c, dc) = if with_grad {
            self.table.correlation_with_grad(&self.families, &params.range)
        } else {
            (self.table.correlation(&self.families, &params.range), Vec::new())
        };
        let n = c.nrows();
        let eta = self.nugget_value(params);
        if eta != 0.0 {
            for i in 0..n {
                c[(i, i)] += eta;
            }
        }
        self.factorizations.fetch_add(1, Ordering::Relaxed);
        let factor = CholeskyFactor::new(&c)?;
        let gls = gls_solve_multi(factor, &self.h, &self.outputs)?;
        Ok(Evaluation {
            params: CorrParams {
                range: params.range.clone(),
                nugget: eta,
            },
            gls,
            dc,
        })
    }

    /// Sum over active outputs of
    /// `−½log|C| − ½log|HᵀC⁻¹H| − ((n−q)/2) log S²_j`.
    pub fn log_marginal(&self, ev: &Evaluation) -> f64 {
        let dof = (self.n() - self.q()) as f64;
        self.active
            .iter()
            .map(|&j| {
                -0.5 * ev.gls.log_det_c - 0.5 * ev.gls.log_det_info - 0.5 * dof * ev.gls.s2[j].ln()
            })
            .sum()
    }

    /// Profile log likelihood with `β` and `σ² = S²/n` maximized out.
    pub fn log_profile(&self, ev: &Evaluation) -> f64 {
        let n = self.n() as f64;
        self.active
            .iter()
            .map(|&j| {
                let sigma2 = ev.gls.s2[j] / n;
                -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
                    - 0.5 * ev.gls.log_det_c
                    - 0.5 * n
            })
            .sum()
    }

    /// `Σ_j u_j u_jᵀ / S²_j` with `u_j = C⁻¹(f_j − Hβ̂_j)`.
    fn weighted_outer(&self, ev: &Evaluation) -> DMatrix<f64> {
        let n = self.n();
        let k = self.active.len();
        let mut u = DMatrix::zeros(n, k);
        for (c, &j) in self.active.iter().enumerate() {
            let w = 1.0 / ev.gls.s2[j].sqrt();
            u.set_column(c, &(ev.gls.alpha.column(j) * w));
        }
        &u * u.transpose()
    }

    fn grad_from_parts(
        &self,
        ev: &Evaluation,
        trace_mat: &DMatrix<f64>,
        data_coef: f64,
    ) -> DVector<f64> {
        let k = self.active.len() as f64;
        let m = self.weighted_outer(ev);
        let mut g = DVector::zeros(self.n_free());
        for (l, dc) in ev.dc.iter().enumerate() {
            g[l] = -0.5 * k * trace_mat.dot(dc) + 0.5 * data_coef * m.dot(dc);
        }
        if self.nugget == NuggetRole::Free {
            let l = ev.dc.len();
            g[l] = -0.5 * k * trace_mat.trace() + 0.5 * data_coef * m.trace();
        }
        g
    }

    /// Gradient of [`Likelihood::log_marginal`] in `(φ, η)` coordinates.
    pub fn grad_log_marginal_phi(&self, ev: &Evaluation) -> DVector<f64> {
        let q = ev.gls.q_matrix();
        self.grad_from_parts(ev, &q, (self.n() - self.q()) as f64)
    }

    /// Gradient of [`Likelihood::log_profile`] in `(φ, η)` coordinates.
    pub fn grad_log_profile_phi(&self, ev: &Evaluation) -> DVector<f64> {
        let cinv = ev.gls.factor.inverse();
        self.grad_from_parts(ev, &cinv, self.n() as f64)
    }

    pub fn to_xi_grad(&self, ev: &Evaluation, grad_phi: &DVector<f64>) -> DVector<f64> {
        let jac = self.xi_jacobian(&ev.params);
        DVector::from_iterator(jac.len(), grad_phi.iter().zip(&jac).map(|(g, j)| g * j))
    }

    /// Fisher information of the marginal model in `(φ, η)` coordinates,
    /// together with `W_l = Ċ_l Q` and the largest entrywise asymmetry seen
    /// before symmetrizing.
    pub fn fisher(&self, ev: &Evaluation) -> (DMatrix<f64>, Vec<DMatrix<f64>>, f64) {
        let q = ev.gls.q_matrix();
        let mut w: Vec<DMatrix<f64>> = ev.dc.iter().map(|dc| dc * &q).collect();
        if self.nugget == NuggetRole::Free {
            w.push(q.clone());
        }
        let m = w.len();
        let mut info = DMatrix::zeros(m + 1, m + 1);
        info[(0, 0)] = (self.n() - self.q()) as f64;
        let wt: Vec<DMatrix<f64>> = w.iter().map(|x| x.transpose()).collect();
        for a in 0..m {
            let tr = w[a].trace();
            info[(0, a + 1)] = tr;
            info[(a + 1, 0)] = tr;
            for b in 0..m {
                // tr(W_a W_b) = Σ_ij W_a[i,j] W_b[j,i]
                info[(a + 1, b + 1)] = w[a].dot(&wt[b]);
            }
        }
        let asym = (&info - info.transpose()).amax();
        symmetrize(&mut info);
        (info, w, asym)
    }
}

fn outputs_column(f: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(f.len(), 1, f.as_slice())
}

/// Log integrated likelihood of the correlation parameters, up to a constant:
/// `−½log|C| − ½log|HᵀC⁻¹H| − ((n−q)/2)·log S²`.
pub fn log_marginal_likelihood(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
    f: &DVector<f64>,
    basis: TrendBasis,
) -> Result<f64> {
    let (lik, params) = Likelihood::from_spec(spec, design, basis, outputs_column(f))?;
    if lik.n() <= lik.q() {
        return Err(Error::Degenerate(format!(
            "need n > q, got n = {} and q = {}",
            lik.n(),
            lik.q()
        )));
    }
    let ev = lik.evaluate(&params, false)?;
    Ok(lik.log_marginal(&ev))
}

/// Multivariate normal log density of `f` under `N(Hβ, σ²(C + ηI))`.
pub fn log_full_likelihood(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
    f: &DVector<f64>,
    basis: TrendBasis,
    beta: &DVector<f64>,
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {sigma2}")));
    }
    let (lik, params) = Likelihood::from_spec(spec, design, basis, outputs_column(f))?;
    if beta.len() != lik.q() {
        return Err(Error::dim("trend coefficients", lik.q(), beta.len()));
    }
    let mut c = lik.table.correlation(&lik.families, &params.range);
    for i in 0..c.nrows() {
        c[(i, i)] += params.nugget;
    }
    let factor = CholeskyFactor::new(&c)?;
    let resid = f - &lik.h * beta;
    let z = factor.solve_lower_vec(&resid);
    let n = f.len() as f64;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
        - 0.5 * factor.log_det()
        - 0.5 * z.norm_squared() / sigma2)
}

/// Gradient of [`log_marginal_likelihood`] with respect to
/// `ξ_l = log(1/φ_l)` (and `log η` when the spec has a nugget).
pub fn grad_log_marginal_likelihood(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
    f: &DVector<f64>,
    basis: TrendBasis,
) -> Result<DVector<f64>> {
    let (lik, params) = Likelihood::from_spec(spec, design, basis, outputs_column(f))?;
    if lik.n() <= lik.q() {
        return Err(Error::Degenerate("need n > q".into()));
    }
    let ev = lik.evaluate(&params, true)?;
    let g = lik.grad_log_marginal_phi(&ev);
    Ok(lik.to_xi_grad(&ev, &g))
}
