//! Stationary correlation functions, their range derivatives and correlation
//! matrix assembly for isotropic and separable kernels.
//!
//! All families are written in terms of `r = d / φ`, so `c(0) = 1` and the
//! correlation decays monotonically in `d` for a fixed range `φ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-integer Matérn smoothness with a closed-form correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub fn alpha(self) -> f64 {
        match self {
            MaternOrder::Half => 0.5,
            MaternOrder::ThreeHalves => 1.5,
            MaternOrder::FiveHalves => 2.5,
        }
    }
}

/// One-dimensional correlation family with its (fixed) roughness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyRepr", into = "FamilyRepr")]
pub enum CorrelationFamily {
    PowerExponential { alpha: f64 },
    Spherical,
    RationalQuadratic { alpha: f64 },
    Matern(MaternOrder),
}

impl CorrelationFamily {
    pub fn power_exponential(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::Domain(format!(
                "power exponential roughness must lie in (0, 2], got {alpha}"
            )));
        }
        Ok(CorrelationFamily::PowerExponential { alpha })
    }

    pub fn rational_quadratic(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!(
                "rational quadratic roughness must be positive, got {alpha}"
            )));
        }
        Ok(CorrelationFamily::RationalQuadratic { alpha })
    }

    /// Matérn family; only `α ∈ {1/2, 3/2, 5/2}` is supported.
    pub fn matern(alpha: f64) -> Result<Self> {
        let order = if alpha == 0.5 {
            MaternOrder::Half
        } else if alpha == 1.5 {
            MaternOrder::ThreeHalves
        } else if alpha == 2.5 {
            MaternOrder::FiveHalves
        } else {
            return Err(Error::Domain(format!(
                "Matérn smoothness must be one of 0.5, 1.5, 2.5, got {alpha}"
            )));
        };
        Ok(CorrelationFamily::Matern(order))
    }

    pub fn matern_5_2() -> Self {
        CorrelationFamily::Matern(MaternOrder::FiveHalves)
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            CorrelationFamily::PowerExponential { alpha } => Some(alpha),
            CorrelationFamily::Spherical => None,
            CorrelationFamily::RationalQuadratic { alpha } => Some(alpha),
            CorrelationFamily::Matern(order) => Some(order.alpha()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorrelationFamily::PowerExponential { .. } => "power_exponential",
            CorrelationFamily::Spherical => "spherical",
            CorrelationFamily::RationalQuadratic { .. } => "rational_quadratic",
            CorrelationFamily::Matern(_) => "matern",
        }
    }

    /// Exponent used by the starting-value heuristic `φ = range / p^{1/α̃}`.
    pub(crate) fn start_exponent(&self) -> f64 {
        match *self {
            CorrelationFamily::PowerExponential { alpha } => alpha,
            CorrelationFamily::Spherical => 1.0,
            CorrelationFamily::RationalQuadratic { .. } => 2.0,
            CorrelationFamily::Matern(_) => 2.0,
        }
    }

    #[inline]
    pub(crate) fn value(&self, d: f64, phi: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        let r = d / phi;
        match *self {
            CorrelationFamily::PowerExponential { alpha } => {
                if alpha == 2.0 {
                    (-r * r).exp()
                } else if alpha == 1.0 {
                    (-r).exp()
                } else {
                    (-r.powf(alpha)).exp()
                }
            }
            CorrelationFamily::Spherical => {
                if r <= 1.0 {
                    1.0 - 1.5 * r + 0.5 * r * r * r
                } else {
                    0.0
                }
            }
            CorrelationFamily::RationalQuadratic { alpha } => (1.0 + r * r).powf(-alpha),
            CorrelationFamily::Matern(order) => match order {
                MaternOrder::Half => (-r).exp(),
                MaternOrder::ThreeHalves => {
                    let s = 3f64.sqrt() * r;
                    (1.0 + s) * (-s).exp()
                }
                MaternOrder::FiveHalves => {
                    let s = 5f64.sqrt() * r;
                    (1.0 + s + s * s / 3.0) * (-s).exp()
                }
            },
        }
    }

    /// `∂c(d; φ)/∂φ`.
    #[inline]
    pub(crate) fn dphi(&self, d: f64, phi: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        let r = d / phi;
        match *self {
            CorrelationFamily::PowerExponential { alpha } => {
                let ra = if alpha == 2.0 { r * r } else { r.powf(alpha) };
                (-ra).exp() * alpha * ra / phi
            }
            CorrelationFamily::Spherical => {
                // d = φ is assigned to the polynomial branch (derivative 0 there anyway).
                if r <= 1.0 {
                    1.5 * (r - r * r * r) / phi
                } else {
                    0.0
                }
            }
            CorrelationFamily::RationalQuadratic { alpha } => {
                let u = 1.0 + r * r;
                2.0 * alpha * r * r * u.powf(-alpha - 1.0) / phi
            }
            CorrelationFamily::Matern(order) => match order {
                MaternOrder::Half => r * (-r).exp() / phi,
                MaternOrder::ThreeHalves => {
                    let s = 3f64.sqrt() * r;
                    s * s * (-s).exp() / phi
                }
                MaternOrder::FiveHalves => {
                    let s = 5f64.sqrt() * r;
                    s * s * (1.0 + s) * (-s).exp() / (3.0 * phi)
                }
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FamilyRepr {
    family: String,
    #[serde(default)]
    alpha: Option<f64>,
}

impl TryFrom<FamilyRepr> for CorrelationFamily {
    type Error = Error;

    fn try_from(repr: FamilyRepr) -> Result<Self> {
        let need_alpha = |name: &str| {
            repr.alpha
                .ok_or_else(|| Error::InvalidConfig(format!("family `{name}` requires `alpha`")))
        };
        match repr.family.as_str() {
            "power_exponential" | "pow_exp" => {
                CorrelationFamily::power_exponential(need_alpha("power_exponential")?)
            }
            "spherical" => Ok(CorrelationFamily::Spherical),
            "rational_quadratic" => {
                CorrelationFamily::rational_quadratic(need_alpha("rational_quadratic")?)
            }
            "matern" => CorrelationFamily::matern(repr.alpha.unwrap_or(2.5)),
            "matern_5_2" => Ok(CorrelationFamily::Matern(MaternOrder::FiveHalves)),
            "matern_3_2" => Ok(CorrelationFamily::Matern(MaternOrder::ThreeHalves)),
            "exponential" => Ok(CorrelationFamily::Matern(MaternOrder::Half)),
            other => Err(Error::InvalidConfig(format!(
                "unknown correlation family `{other}`"
            ))),
        }
    }
}

impl From<CorrelationFamily> for FamilyRepr {
    fn from(family: CorrelationFamily) -> Self {
        FamilyRepr {
            family: family.name().to_string(),
            alpha: family.alpha(),
        }
    }
}

fn check_args(d: f64, phi: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::Domain(format!(
            "distance must be finite and non-negative, got {d}"
        )));
    }
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::Domain(format!(
            "range parameter must be positive and finite, got {phi}"
        )));
    }
    Ok(())
}

/// Correlation `c(d; φ)` of a single family.
pub fn eval_correlation(family: CorrelationFamily, d: f64, phi: f64) -> Result<f64> {
    check_args(d, phi)?;
    Ok(family.value(d, phi))
}

/// Range derivative `∂c(d; φ)/∂φ` of a single family.
pub fn eval_correlation_dphi(family: CorrelationFamily, d: f64, phi: f64) -> Result<f64> {
    check_args(d, phi)?;
    Ok(family.dphi(d, phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// One range parameter acting on the Euclidean distance.
    Isotropic,
    /// One range parameter (and family) per input coordinate.
    Separable,
}

/// Full kernel description: families, range parameters and optional nugget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecRepr")]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub families: Vec<CorrelationFamily>,
    pub range: Vec<f64>,
    /// `η = σ₀²/σ²`; `None` means no nugget term at all.
    pub nugget: Option<f64>,
}

#[derive(Deserialize)]
struct KernelSpecRepr {
    mode: KernelMode,
    families: Vec<CorrelationFamily>,
    range: Vec<f64>,
    #[serde(default)]
    nugget: Option<f64>,
}

impl TryFrom<KernelSpecRepr> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelSpecRepr) -> Result<Self> {
        let spec = KernelSpec {
            mode: r.mode,
            families: r.families,
            range: r.range,
            nugget: r.nugget,
        };
        spec.validate_shape()?;
        Ok(spec)
    }
}

impl KernelSpec {
    pub fn isotropic(family: CorrelationFamily, range: f64, nugget: Option<f64>) -> Result<Self> {
        let spec = KernelSpec {
            mode: KernelMode::Isotropic,
            families: vec![family],
            range: vec![range],
            nugget,
        };
        spec.validate_shape()?;
        Ok(spec)
    }

    pub fn separable(
        families: Vec<CorrelationFamily>,
        range: Vec<f64>,
        nugget: Option<f64>,
    ) -> Result<Self> {
        let spec = KernelSpec {
            mode: KernelMode::Separable,
            families,
            range,
            nugget,
        };
        spec.validate_shape()?;
        Ok(spec)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidConfig("kernel needs at least one family".into()));
        }
        match self.mode {
            KernelMode::Isotropic => {
                if self.families.len() != 1 {
                    return Err(Error::dim("isotropic kernel families", 1, self.families.len()));
                }
                if self.range.len() != 1 {
                    return Err(Error::dim("isotropic kernel range", 1, self.range.len()));
                }
            }
            KernelMode::Separable => {
                if self.range.len() != self.families.len() {
                    return Err(Error::dim(
                        "separable kernel range",
                        self.families.len(),
                        self.range.len(),
                    ));
                }
            }
        }
        if let Some(&bad) = self.range.iter().find(|&&phi| !(phi > 0.0 && phi.is_finite())) {
            return Err(Error::Domain(format!(
                "range parameters must be positive and finite, got {bad}"
            )));
        }
        if let Some(eta) = self.nugget {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::Domain(format!(
                    "nugget must be non-negative and finite, got {eta}"
                )));
            }
        }
        Ok(())
    }

    /// Checks the spec against an input dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        self.validate_shape()?;
        if self.mode == KernelMode::Separable && self.families.len() != p {
            return Err(Error::dim("separable kernel families", p, self.families.len()));
        }
        Ok(())
    }

    pub fn n_range(&self) -> usize {
        self.range.len()
    }

    /// Number of correlation parameters, counting the nugget when present.
    pub fn n_params(&self) -> usize {
        self.range.len() + usize::from(self.nugget.is_some())
    }

    pub fn nugget_value(&self) -> f64 {
        self.nugget.unwrap_or(0.0)
    }

    /// Correlation between two input points (without the nugget).
    pub fn correlation(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.mode {
            KernelMode::Isotropic => {
                let d = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                self.families[0].value(d, self.range[0])
            }
            KernelMode::Separable => x
                .iter()
                .zip(y)
                .zip(self.families.iter().zip(&self.range))
                .map(|((a, b), (fam, &phi))| fam.value((a - b).abs(), phi))
                .product(),
        }
    }
}

/// Pairwise distances of a design, stored once and reused for every range value.
///
/// For separable kernels each pair stores `p` coordinate distances; for
/// isotropic kernels a single Euclidean distance.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    mode: KernelMode,
    n: usize,
    width: usize,
    // Row-major over pairs (i, j) with i < j, `width` values per pair.
    pairs: Vec<f64>,
}

impl DistanceTable {
    pub fn new(mode: KernelMode, design: &DMatrix<f64>) -> Self {
        let n = design.nrows();
        let p = design.ncols();
        let width = match mode {
            KernelMode::Isotropic => 1,
            KernelMode::Separable => p,
        };
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2 * width);
        for i in 0..n {
            for j in (i + 1)..n {
                match mode {
                    KernelMode::Isotropic => {
                        let d2: f64 = (0..p)
                            .map(|l| {
                                let diff = design[(i, l)] - design[(j, l)];
                                diff * diff
                            })
                            .sum();
                        pairs.push(d2.sqrt());
                    }
                    KernelMode::Separable => {
                        pairs.extend((0..p).map(|l| (design[(i, l)] - design[(j, l)]).abs()));
                    }
                }
            }
        }
        DistanceTable {
            mode,
            n,
            width,
            pairs,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    fn pair_iter(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
            .zip(self.pairs.chunks_exact(self.width.max(1)))
            .map(|((i, j), d)| (i, j, d))
    }

    /// True when two design rows coincide exactly.
    pub fn has_duplicates(&self) -> bool {
        self.pair_iter().any(|(_, _, d)| d.iter().all(|&v| v == 0.0))
    }

    /// Smallest positive distance along coordinate `l` (or overall, isotropic).
    pub fn min_positive(&self, l: usize) -> Option<f64> {
        self.pair_iter()
            .map(|(_, _, d)| d[l])
            .filter(|&v| v > 0.0)
            .min_by(f64::total_cmp)
    }

    pub fn max(&self, l: usize) -> Option<f64> {
        self.pair_iter().map(|(_, _, d)| d[l]).max_by(f64::total_cmp)
    }

    /// Correlation matrix with unit diagonal (no nugget).
    pub fn correlation(&self, families: &[CorrelationFamily], range: &[f64]) -> DMatrix<f64> {
        let mut c = DMatrix::identity(self.n, self.n);
        for (i, j, d) in self.pair_iter() {
            let v = pair_correlation(families, range, d);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        c
    }

    /// Correlation matrix together with `∂C/∂φ_l` for every range parameter.
    pub fn correlation_with_grad(
        &self,
        families: &[CorrelationFamily],
        range: &[f64],
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let m = range.len();
        let mut c = DMatrix::identity(self.n, self.n);
        let mut grads = vec![DMatrix::zeros(self.n, self.n); m];
        let mut vals = vec![0.0; m];
        let mut ders = vec![0.0; m];
        for (i, j, d) in self.pair_iter() {
            for l in 0..m {
                vals[l] = families[l].value(d[l], range[l]);
                ders[l] = families[l].dphi(d[l], range[l]);
            }
            let v: f64 = vals.iter().product();
            c[(i, j)] = v;
            c[(j, i)] = v;
            for l in 0..m {
                // Product rule without dividing by a possibly-zero factor.
                let others: f64 = vals
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != l)
                    .map(|(_, v)| v)
                    .product();
                let g = ders[l] * others;
                grads[l][(i, j)] = g;
                grads[l][(j, i)] = g;
            }
        }
        (c, grads)
    }
}

#[inline]
fn pair_correlation(families: &[CorrelationFamily], range: &[f64], d: &[f64]) -> f64 {
    families
        .iter()
        .zip(range)
        .zip(d)
        .map(|((fam, &phi), &dist)| fam.value(dist, phi))
        .product()
}

/// Correlation vector between a point and every design row.
pub fn cross_correlation(spec: &KernelSpec, design: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; design.ncols()];
    (0..design.nrows())
        .map(|i| {
            for (l, v) in row.iter_mut().enumerate() {
                *v = design[(i, l)];
            }
            spec.correlation(&row, x)
        })
        .collect()
}

/// Correlation matrix of a design under a kernel spec.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    /// `C`, or `C + ηIₙ` when the spec carries a nugget.
    pub matrix: DMatrix<f64>,
    pub nugget: f64,
    /// Set when two design rows coincide and no nugget is present.
    pub singular_risk: bool,
}

fn check_design(spec: &KernelSpec, design: &DMatrix<f64>) -> Result<()> {
    spec.validate(design.ncols())?;
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("design contains non-finite entries".into()));
    }
    Ok(())
}

pub fn build_correlation(spec: &KernelSpec, design: &DMatrix<f64>) -> Result<CorrelationMatrix> {
    check_design(spec, design)?;
    let table = DistanceTable::new(spec.mode, design);
    let mut matrix = table.correlation(&spec.families, &spec.range);
    let eta = spec.nugget_value();
    for i in 0..matrix.nrows() {
        matrix[(i, i)] += eta;
    }
    Ok(CorrelationMatrix {
        matrix,
        nugget: eta,
        singular_risk: eta == 0.0 && table.has_duplicates(),
    })
}

/// `∂(C + ηI)/∂φ_l` for every range parameter, followed by `I` for the nugget.
pub fn build_correlation_grad(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    check_design(spec, design)?;
    let table = DistanceTable::new(spec.mode, design);
    let (_, mut grads) = table.correlation_with_grad(&spec.families, &spec.range);
    if spec.nugget.is_some() {
        grads.push(DMatrix::identity(design.nrows(), design.nrows()));
    }
    Ok(grads)
}
