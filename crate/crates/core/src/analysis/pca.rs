use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Retained components as unit rows, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratio of every component (all dimensions).
    pub explained: Vec<f64>,
    /// Row-wise projections onto the retained components.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn cumulative(&self) -> Vec<f64> {
        self.explained
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }
}

/// Keeps the smallest number of components whose cumulative explained
/// variance reaches `var_target`. Equal eigenvalues keep their index order.
pub fn pca_reduce(rows: &[Vec<f64>], var_target: f64) -> Result<Pca> {
    if rows.len() < 2 {
        return Err(Error::EmptyInput(format!("pca needs at least 2 rows, got {}", rows.len())));
    }
    if !(var_target > 0.0 && var_target <= 1.0) {
        return Err(Error::Config(format!("variance target {var_target} outside (0, 1]")));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::LengthMismatch(d, r.len()));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::Domain("features have zero variance".into()));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let explained: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();
    let mut m = d;
    let mut acc = 0.0;
    for (k, e) in explained.iter().enumerate() {
        acc += e;
        if acc >= var_target - 1e-12 {
            m = k + 1;
            break;
        }
    }
    let components: Vec<Vec<f64>> = order[..m]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, v)| v * x[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained,
        projected,
    })
}
