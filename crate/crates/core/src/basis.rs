use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Mean basis `h(x)` of the Gaussian process trend `h(x)ᵀβ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendBasis {
    /// No trend (`q = 0`); only meaningful for likelihood evaluation.
    None,
    /// `h(x) = 1`.
    #[default]
    Constant,
    /// `h(x) = (1, x₁, …, x_p)`.
    Linear,
}

impl TrendBasis {
    pub fn q(&self, p: usize) -> usize {
        match self {
            TrendBasis::None => 0,
            TrendBasis::Constant => 1,
            TrendBasis::Linear => p + 1,
        }
    }

    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TrendBasis::None => Vec::new(),
            TrendBasis::Constant => vec![1.0],
            TrendBasis::Linear => std::iter::once(1.0).chain(x.iter().copied()).collect(),
        }
    }

    /// The `n × q` basis matrix `H` of a design.
    pub fn matrix(&self, design: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, p) = design.shape();
        let q = self.q(p);
        DMatrix::from_fn(n, q, |i, j| match self {
            TrendBasis::None => unreachable!(),
            TrendBasis::Constant => 1.0,
            TrendBasis::Linear => {
                if j == 0 {
                    1.0
                } else {
                    design[(i, j - 1)]
                }
            }
        })
    }
}
