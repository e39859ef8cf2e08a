//! Student-t predictive distributions of a fitted emulator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::gls::GlsState;
use crate::kernels::{cross_correlation, KernelSpec};
use crate::basis::TrendBasis;
use crate::model::GpModel;

/// Non-central Student-t predictive `t(location, scale2, dof)`.
///
/// `scale2` is the square of the scale parameter; the predictive variance is
/// `scale2·dof/(dof − 2)` for `dof > 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveT {
    pub location: f64,
    pub scale2: f64,
    pub dof: usize,
    /// Amount by which a negative `c*` was raised to zero.
    pub clip: f64,
}

impl PredictiveT {
    pub fn scale(&self) -> f64 {
        self.scale2.sqrt()
    }

    pub fn variance(&self) -> Option<f64> {
        (self.dof > 2).then(|| self.scale2 * self.dof as f64 / (self.dof as f64 - 2.0))
    }

    pub fn interval(&self, level: f64) -> Result<(f64, f64)> {
        predictive_interval(self, level)
    }
}

/// Central interval `location ± scale·t_{(1+level)/2, dof}`.
pub fn predictive_interval(pt: &PredictiveT, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    let half = pt.scale() * t_quantile(pt.dof, 0.5 + 0.5 * level)?;
    Ok((pt.location - half, pt.location + half))
}

/// Quantile of the standard Student-t distribution.
pub fn t_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Domain("degrees of freedom must be positive".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")));
    }
    let t = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    if (p - 0.5).abs() < 1e-6 {
        // linear in the centre, where the library cdf loses resolution
        return Ok((p - 0.5) / t.pdf(0.0));
    }
    let mut x = t.inverse_cdf(p);
    // the library inversion is only accurate to about 1e-8; polish with Newton
    for _ in 0..2 {
        let d = t.pdf(x);
        if d > 0.0 {
            x -= (t.cdf(x) - p) / d;
        }
    }
    Ok(x)
}

/// Pieces of the predictive shared by every output coordinate at one point.
pub(crate) struct PointTerms {
    /// `c(x*)ᵀ` against the design.
    pub r: DVector<f64>,
    pub h: DVector<f64>,
    /// `c** ` after clipping `c*` at 0.
    pub c_star2: f64,
    pub clip: f64,
}

pub(crate) fn point_terms(
    kernel: &KernelSpec,
    basis: TrendBasis,
    design: &DMatrix<f64>,
    gls: &GlsState,
    x: &[f64],
    include_noise: bool,
) -> Result<PointTerms> {
    if x.len() != design.ncols() {
        return Err(Error::dim("test input", design.ncols(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("test input must be finite".into()));
    }
    let r = DVector::from_vec(cross_correlation(kernel, design, x));
    let h = DVector::from_vec(basis.row(x));
    let z = gls.factor().solve_lower_vec(&r);
    let prior_var = 1.0 + if include_noise { kernel.nugget_value() } else { 0.0 };
    let mut c_star = prior_var - z.norm_squared();
    let mut clip = 0.0;
    if c_star < 0.0 {
        clip = -c_star;
        c_star = 0.0;
        log::debug!("clipped negative predictive correlation by {clip:e}");
    }
    let mut c_star2 = c_star;
    if gls.q() > 0 {
        let h_star = &h - gls.linv_h().tr_mul(&z);
        c_star2 += h_star.dot(&gls.info_solve(&h_star));
    }
    Ok(PointTerms { r, h, c_star2, clip })
}

/// Predictive distribution of the latent output at `x`.
pub fn predict(model: &GpModel, x: &[f64]) -> Result<PredictiveT> {
    predict_with(model, x, false)
}

/// As [`predict`]; with `include_noise` the nugget variance is added so the
/// predictive covers a noisy observation.
pub fn predict_with(model: &GpModel, x: &[f64], include_noise: bool) -> Result<PredictiveT> {
    let t = point_terms(model.kernel(), model.basis(), model.design(), model.gls(), x, include_noise)?;
    let location = t.h.dot(&model.beta()) + t.r.dot(&model.gls().alpha().column(0));
    Ok(PredictiveT {
        location,
        scale2: model.sigma2() * t.c_star2,
        dof: model.dof(),
        clip: t.clip,
    })
}

/// Row-wise [`predict_with`] over an `m × p` matrix of test inputs.
pub fn predict_batch(model: &GpModel, x: &DMatrix<f64>, include_noise: bool) -> Result<Vec<PredictiveT>> {
    let mut row = vec![0.0; x.ncols()];
    (0..x.nrows())
        .map(|i| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = x[(i, j)];
            }
            predict_with(model, &row, include_noise)
        })
        .collect()
}
