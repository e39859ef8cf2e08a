//! Brute-force reference implementations shared by the integration tests.
//! Everything here works with explicit inverses and determinants and
//! re-derives the correlation formulas from scratch.
#![allow(dead_code)]

use gpemu_core::{CorrelationFamily, KernelMode, KernelSpec, MaternOrder, TrendBasis};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

pub fn corr_1d(family: &CorrelationFamily, d: f64, phi: f64) -> f64 {
    let r = d.abs() / phi;
    match *family {
        CorrelationFamily::PowerExponential { alpha } => (-r.powf(alpha)).exp(),
        CorrelationFamily::Spherical => {
            if r < 1.0 {
                1.0 - 1.5 * r + 0.5 * r.powi(3)
            } else {
                0.0
            }
        }
        CorrelationFamily::RationalQuadratic { alpha } => (1.0 + r * r).powf(-alpha),
        CorrelationFamily::Matern(MaternOrder::Half) => (-r).exp(),
        CorrelationFamily::Matern(MaternOrder::ThreeHalves) => {
            (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp()
        }
        CorrelationFamily::Matern(MaternOrder::FiveHalves) => {
            (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp()
        }
    }
}

/// `∂/∂φ` of [`corr_1d`], differentiated by hand.
pub fn corr_1d_dphi(family: &CorrelationFamily, d: f64, phi: f64) -> f64 {
    let d = d.abs();
    let r = d / phi;
    // dr/dφ = −r/φ
    let drdphi = -r / phi;
    let dcdr = match *family {
        CorrelationFamily::PowerExponential { alpha } => {
            if r == 0.0 {
                0.0
            } else {
                -alpha * r.powf(alpha - 1.0) * (-r.powf(alpha)).exp()
            }
        }
        CorrelationFamily::Spherical => {
            if r < 1.0 {
                -1.5 + 1.5 * r * r
            } else {
                0.0
            }
        }
        CorrelationFamily::RationalQuadratic { alpha } => -2.0 * alpha * r * (1.0 + r * r).powf(-alpha - 1.0),
        CorrelationFamily::Matern(MaternOrder::Half) => -(-r).exp(),
        CorrelationFamily::Matern(MaternOrder::ThreeHalves) => {
            let a = 3f64.sqrt();
            -a * a * r * (-a * r).exp()
        }
        CorrelationFamily::Matern(MaternOrder::FiveHalves) => {
            let a = 5f64.sqrt();
            -(5.0 / 3.0) * r * (1.0 + a * r) * (-a * r).exp()
        }
    };
    dcdr * drdphi
}

pub fn corr(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match spec.mode {
        KernelMode::Isotropic => {
            let d = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            corr_1d(&spec.families[0], d, spec.range[0])
        }
        KernelMode::Separable => x
            .iter()
            .zip(y)
            .enumerate()
            .map(|(l, (a, b))| corr_1d(&spec.families[l], a - b, spec.range[l]))
            .product(),
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `C + ηI`.
pub fn corr_matrix(spec: &KernelSpec, design: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let eta = spec.nugget.unwrap_or(0.0);
    DMatrix::from_fn(n, n, |i, j| {
        corr(spec, &row(design, i), &row(design, j)) + if i == j { eta } else { 0.0 }
    })
}

/// `∂C/∂φ_l`.
pub fn corr_matrix_dphi(spec: &KernelSpec, design: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let n = design.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let (x, y) = (row(design, i), row(design, j));
        match spec.mode {
            KernelMode::Isotropic => {
                let d = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                corr_1d_dphi(&spec.families[0], d, spec.range[0])
            }
            KernelMode::Separable => (0..x.len())
                .map(|m| {
                    let d = x[m] - y[m];
                    if m == l {
                        corr_1d_dphi(&spec.families[m], d, spec.range[m])
                    } else {
                        corr_1d(&spec.families[m], d, spec.range[m])
                    }
                })
                .product(),
        }
    })
}

pub fn basis_row(basis: TrendBasis, x: &[f64]) -> Vec<f64> {
    match basis {
        TrendBasis::None => vec![],
        TrendBasis::Constant => vec![1.0],
        TrendBasis::Linear => std::iter::once(1.0).chain(x.iter().copied()).collect(),
    }
}

pub fn basis_matrix(basis: TrendBasis, design: &DMatrix<f64>) -> DMatrix<f64> {
    let n = design.nrows();
    let q = basis_row(basis, &row(design, 0)).len();
    let mut h = DMatrix::zeros(n, q);
    for i in 0..n {
        for (j, v) in basis_row(basis, &row(design, i)).into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    h
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().ln()
}

/// Quantities of the GLS fit computed with explicit inverses.
pub struct Dense {
    pub cinv: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `(HᵀC⁻¹H)⁻¹`.
    pub ainv: DMatrix<f64>,
    /// `C⁻¹ − C⁻¹H(HᵀC⁻¹H)⁻¹HᵀC⁻¹`.
    pub q: DMatrix<f64>,
    pub log_det_c: f64,
    pub log_det_a: f64,
}

pub fn dense(spec: &KernelSpec, design: &DMatrix<f64>, basis: TrendBasis) -> Dense {
    let c = corr_matrix(spec, design);
    let cinv = c.clone().try_inverse().expect("invertible");
    let h = basis_matrix(basis, design);
    let a = h.transpose() * &cinv * &h;
    let ainv = if a.nrows() == 0 {
        a.clone()
    } else {
        a.clone().try_inverse().expect("invertible")
    };
    let q = &cinv - &cinv * &h * &ainv * h.transpose() * &cinv;
    Dense {
        log_det_c: log_det(&c),
        log_det_a: if a.nrows() == 0 { 0.0 } else { log_det(&a) },
        cinv,
        h,
        ainv,
        q,
    }
}

pub fn dense_log_marginal(spec: &KernelSpec, design: &DMatrix<f64>, f: &DVector<f64>, basis: TrendBasis) -> f64 {
    let d = dense(spec, design, basis);
    let n = f.len() as f64;
    let q = d.h.ncols() as f64;
    let s2 = (f.transpose() * &d.q * f)[(0, 0)];
    -0.5 * d.log_det_c - 0.5 * d.log_det_a - 0.5 * (n - q) * s2.ln()
}

/// Expected Fisher information with respect to `(σ², φ_1, …, φ_m [, η])`.
pub fn dense_fisher(spec: &KernelSpec, design: &DMatrix<f64>, basis: TrendBasis) -> DMatrix<f64> {
    let d = dense(spec, design, basis);
    let n = design.nrows() as f64;
    let q = d.h.ncols() as f64;
    let mut w: Vec<DMatrix<f64>> = (0..spec.range.len())
        .map(|l| corr_matrix_dphi(spec, design, l) * &d.q)
        .collect();
    if spec.nugget.is_some() {
        w.push(d.q.clone());
    }
    let m = w.len();
    let mut info = DMatrix::zeros(m + 1, m + 1);
    info[(0, 0)] = n - q;
    for a in 0..m {
        info[(0, a + 1)] = w[a].trace();
        info[(a + 1, 0)] = w[a].trace();
        for b in 0..m {
            info[(a + 1, b + 1)] = (&w[a] * &w[b]).trace();
        }
    }
    info
}

/// `(location, scale², dof)` of the Student-t predictive.
pub fn dense_predict(
    spec: &KernelSpec,
    design: &DMatrix<f64>,
    f: &DVector<f64>,
    basis: TrendBasis,
    x: &[f64],
) -> (f64, f64, usize) {
    let d = dense(spec, design, basis);
    let n = design.nrows();
    let q = d.h.ncols();
    let beta = &d.ainv * d.h.transpose() * &d.cinv * f;
    let r = DVector::from_fn(n, |i, _| corr(spec, &row(design, i), x));
    let h = DVector::from_vec(basis_row(basis, x));
    let resid = f - &d.h * &beta;
    let loc = h.dot(&beta) + (r.transpose() * &d.cinv * resid)[(0, 0)];
    let s2 = (f.transpose() * &d.q * f)[(0, 0)];
    let sigma2 = s2 / (n - q) as f64;
    let c_star = 1.0 - (r.transpose() * &d.cinv * &r)[(0, 0)];
    let h_star = &h - d.h.transpose() * &d.cinv * &r;
    let c2 = c_star + (h_star.transpose() * &d.ainv * &h_star)[(0, 0)];
    (loc, sigma2 * c2, n - q)
}

/// `log ∫ N(y; m, σ²K) σ⁻² dσ²`, by the trapezoid rule in `u = log σ²`.
pub fn log_integrated_normal(k: &DMatrix<f64>, resid: &DVector<f64>) -> f64 {
    let n = resid.len() as f64;
    let kinv = k.clone().try_inverse().expect("invertible");
    let quad = (resid.transpose() * kinv * resid)[(0, 0)];
    let ld = log_det(k);
    let log_f = |u: f64| -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * ld - 0.5 * n * u - 0.5 * quad * (-u).exp();
    let centre = (quad / n).ln();
    let (lo, hi, m) = (centre - 30.0, centre + 60.0, 40_000);
    let step = (hi - lo) / m as f64;
    let vals: Vec<f64> = (0..=m).map(|i| log_f(lo + step * i as f64)).collect();
    let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            w * (v - mx).exp()
        })
        .sum();
    mx + (s * step).ln()
}

/// The closed form matched by [`log_integrated_normal`]: the terms that
/// depend on the parameters plus `log Γ(n/2) − (n/2) log π`.
pub fn integrated_normal_constant(n: usize) -> f64 {
    ln_gamma(n as f64 / 2.0) - 0.5 * n as f64 * std::f64::consts::PI.ln()
}

/// Central finite-difference gradient.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            let s = h * x[i].abs().max(1.0);
            a[i] += s;
            b[i] -= s;
            (f(&a) - f(&b)) / (2.0 * s)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Maximin-free Latin hypercube on `[0, 1]^p`.
pub fn lhs(n: usize, p: usize, rng: &mut StdRng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, p);
    for j in 0..p {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for i in 0..n {
            m[(i, j)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    m
}

/// Branin function on the unit square, rescaled to `[−5, 10] × [0, 15]`.
pub fn branin(u: &[f64]) -> f64 {
    let x1 = -5.0 + 15.0 * u[0];
    let x2 = 15.0 * u[1];
    let pi = std::f64::consts::PI;
    let b = 5.1 / (4.0 * pi * pi);
    let c = 5.0 / pi;
    let t = 1.0 / (8.0 * pi);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

/// Every family of the correlation table, with representative roughness.
pub fn all_families() -> Vec<CorrelationFamily> {
    vec![
        CorrelationFamily::power_exponential(1.0).unwrap(),
        CorrelationFamily::power_exponential(1.5).unwrap(),
        CorrelationFamily::power_exponential(1.9).unwrap(),
        CorrelationFamily::power_exponential(2.0).unwrap(),
        CorrelationFamily::Spherical,
        CorrelationFamily::rational_quadratic(0.8).unwrap(),
        CorrelationFamily::rational_quadratic(2.5).unwrap(),
        CorrelationFamily::matern(0.5).unwrap(),
        CorrelationFamily::matern(1.5).unwrap(),
        CorrelationFamily::matern(2.5).unwrap(),
    ]
}

/// Student-t quantile by bisection on a Simpson-rule cdf.
pub fn t_quantile_oracle(dof: usize, p: f64) -> f64 {
    let nu = dof as f64;
    let log_c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    let pdf = |x: f64| (log_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp();
    // P(0 < T < x) by composite Simpson after x = tan s
    let g = |s: f64| pdf(s.tan()) / (s.cos() * s.cos());
    let upper = |x: f64| {
        let m = 20_000;
        let end = x.atan();
        let h = end / m as f64;
        let mut s = g(0.0) + g(end);
        for i in 1..m {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(h * i as f64);
        }
        s * h / 3.0
    };
    let target = p - 0.5;
    let (mut lo, mut hi) = (0.0, 1e6);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if upper(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub struct Instance {
    pub spec: KernelSpec,
    pub design: DMatrix<f64>,
    pub f: DVector<f64>,
    pub basis: TrendBasis,
}

/// Small random problem: `n ≤ n_max`, up to three inputs, random family,
/// mode, trend and nugget. Draws are repeated until `C + ηI` has condition
/// number below 1e5, since the explicit-inverse oracles lose about
/// `cond·ε` relative accuracy.
pub fn random_instance(rng: &mut StdRng, n_max: usize) -> Instance {
    loop {
        let inst = draw_instance(rng, n_max);
        let eig = nalgebra::SymmetricEigen::new(corr_matrix(&inst.spec, &inst.design)).eigenvalues;
        if eig.max() / eig.min() < 1e5 && eig.min() > 0.0 {
            return inst;
        }
    }
}

fn draw_instance(rng: &mut StdRng, n_max: usize) -> Instance {
    let p = rng.random_range(1..=3);
    let n = rng.random_range(4..=n_max);
    let basis = match rng.random_range(0..3) {
        0 => TrendBasis::None,
        1 => TrendBasis::Constant,
        _ if n > p + 2 => TrendBasis::Linear,
        _ => TrendBasis::Constant,
    };
    let fams = all_families();
    let nugget = rng.random_bool(0.5).then(|| rng.random_range(1e-3..0.1));
    let spec = if rng.random_bool(0.3) {
        let fam = fams[rng.random_range(0..fams.len())];
        KernelSpec::isotropic(fam, rng.random_range(0.2..0.8) * (p as f64).sqrt(), nugget).unwrap()
    } else {
        let families = (0..p).map(|_| fams[rng.random_range(0..fams.len())]).collect();
        let range = (0..p).map(|_| rng.random_range(0.2..0.8)).collect();
        KernelSpec::separable(families, range, nugget).unwrap()
    };
    let design = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let f = DVector::from_fn(n, |i, _| {
        (0..p).map(|j| (3.0 * design[(i, j)] + j as f64).sin()).sum::<f64>() + 0.1 * rng.random::<f64>()
    });
    Instance { spec, design, f, basis }
}

/// Central differences refined by one Richardson step.
pub fn richardson_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let coarse = fd_grad(&f, x, h);
    let fine = fd_grad(&f, x, h / 2.0);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// `spec` with ranges and nugget replaced from `ψ = (ξ_1, …, ξ_m [, log η])`.
pub fn spec_at(spec: &KernelSpec, psi: &[f64]) -> KernelSpec {
    let m = spec.range.len();
    let mut out = spec.clone();
    out.range = psi[..m].iter().map(|x| (-x).exp()).collect();
    if spec.nugget.is_some() {
        out.nugget = Some(psi[m].exp());
    }
    out
}

pub fn psi_of(spec: &KernelSpec) -> Vec<f64> {
    spec.range.iter().map(|r| -r.ln()).chain(spec.nugget.map(f64::ln)).collect()
}

/// Smallest `|d/φ − 1|` over design pairs, for kernels with a kink at `d = φ`.
pub fn kink_margin(spec: &KernelSpec, design: &DMatrix<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..design.nrows() {
        for j in 0..i {
            let (x, y) = (row(design, i), row(design, j));
            let pairs: Vec<(usize, f64)> = match spec.mode {
                KernelMode::Isotropic => {
                    vec![(0, x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())]
                }
                KernelMode::Separable => (0..x.len()).map(|l| (l, (x[l] - y[l]).abs())).collect(),
            };
            for (l, d) in pairs {
                if spec.families[l] == CorrelationFamily::Spherical {
                    margin = margin.min((d / spec.range[l] - 1.0).abs());
                }
            }
        }
    }
    margin
}

/// Normwise relative error of the analytic ψ-gradient of the log marginal
/// likelihood against Richardson-refined central differences.
pub fn marginal_gradient_error(inst: &Instance) -> f64 {
    use gpemu_core::gls::{grad_log_marginal_likelihood, log_marginal_likelihood};
    let psi = psi_of(&inst.spec);
    let an = grad_log_marginal_likelihood(&inst.spec, &inst.design, &inst.f, inst.basis).unwrap();
    let fd = richardson_grad(
        |p| log_marginal_likelihood(&spec_at(&inst.spec, p), &inst.design, &inst.f, inst.basis).unwrap(),
        &psi,
        1e-3,
    );
    let diff = an.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    diff / an.amax().max(1e-8)
}

/// Same comparison for the JR prior at random hyperparameters and inputs.
pub fn jr_gradient_error(rng: &mut StdRng) -> f64 {
    use gpemu_core::priors::{grad_log_jr_prior, log_jr_prior, JrPrior};
    let m = rng.random_range(1..=4);
    let nugget = rng.random_bool(0.5);
    let slots = m + usize::from(nugget);
    let weights: Vec<f64> = (0..slots).map(|_| rng.random_range(0.1..3.0)).collect();
    let jr = JrPrior::new(rng.random_range(-0.5..2.0), rng.random_range(0.2..3.0), Some(weights)).unwrap();
    let logs: Vec<f64> = (0..slots).map(|_| rng.random_range(-3.0..2.0)).collect();
    let split = |v: &[f64]| {
        let x: Vec<f64> = v.iter().map(|l| l.exp()).collect();
        let eta = nugget.then(|| x[m]);
        (x[..m].to_vec(), eta)
    };
    let (x, eta) = split(&logs);
    let an = grad_log_jr_prior(&jr, &x, eta).unwrap();
    let fd = richardson_grad(
        |v| {
            let (x, eta) = split(v);
            log_jr_prior(&jr, &x, eta).unwrap()
        },
        &logs,
        1e-3,
    );
    let diff = an.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    diff / an.amax().max(1e-8)
}

/// A random instance whose correlation is smooth in the ranges near the
/// chosen values.
pub fn smooth_instance(rng: &mut StdRng, n_max: usize) -> Instance {
    loop {
        let inst = random_instance(rng, n_max);
        if kink_margin(&inst.spec, &inst.design) > 0.05 {
            return inst;
        }
    }
}
