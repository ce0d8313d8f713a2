use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{CausalDataset, Dag};
use crate::error::{ensure_dim, Result};

/// Residual variances below this are clamped before taking logs.
const VARIANCE_FLOOR: f64 = 1e-12;
const RIDGE: f64 = 1e-8;

/// Decomposable linear-Gaussian BIC, higher is better:
/// `local(v, P) = -n ln(RSS/n) - penalty * |P| * ln n`.
///
/// Regressions include an intercept (columns are centered) and are solved
/// from the sample covariance.
#[derive(Debug, Clone)]
pub struct BicScore {
    n: usize,
    cov: DMatrix<f64>,
    penalty: f64,
}

impl BicScore {
    pub fn new(dataset: &CausalDataset, penalty: f64) -> Self {
        let n = dataset.n_rows();
        let p = dataset.n_cols();
        let mut means = vec![0.0; p];
        for row in &dataset.rows {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n.max(1) as f64;
        }
        let mut cov = DMatrix::zeros(p, p);
        for row in &dataset.rows {
            for i in 0..p {
                let di = row[i] - means[i];
                for j in i..p {
                    cov[(i, j)] += di * (row[j] - means[j]);
                }
            }
        }
        for i in 0..p {
            for j in i..p {
                let v = cov[(i, j)] / n.max(1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Self { n, cov, penalty }
    }

    pub fn n_vars(&self) -> usize {
        self.cov.nrows()
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    /// Residual variance of `node` regressed on `parents`.
    pub fn residual_variance(&self, node: usize, parents: &[usize]) -> f64 {
        let syy = self.cov[(node, node)];
        if parents.is_empty() {
            return syy.max(VARIANCE_FLOOR);
        }
        let k = parents.len();
        let sxx = DMatrix::from_fn(k, k, |a, b| self.cov[(parents[a], parents[b])]);
        let sxy = DVector::from_fn(k, |a, _| self.cov[(parents[a], node)]);
        let beta = match sxx.clone().cholesky() {
            Some(ch) => ch.solve(&sxy),
            None => {
                let damped = sxx + DMatrix::identity(k, k) * RIDGE;
                match damped.clone().cholesky() {
                    Some(ch) => ch.solve(&sxy),
                    None => damped.lu().solve(&sxy).unwrap_or_else(|| DVector::zeros(k)),
                }
            }
        };
        (syy - sxy.dot(&beta)).max(VARIANCE_FLOOR)
    }

    pub fn local(&self, node: usize, parents: &[usize]) -> f64 {
        let n = self.n as f64;
        -n * self.residual_variance(node, parents).ln() - self.penalty * parents.len() as f64 * n.ln()
    }

    pub fn score(&self, dag: &Dag) -> f64 {
        (0..dag.len()).map(|v| self.local(v, dag.parents(v))).sum()
    }
}

/// [`BicScore`] with a memo of local scores keyed by node and sorted parent
/// set. One cache per search thread.
#[derive(Debug)]
pub struct CachedScore<'a> {
    bic: &'a BicScore,
    cache: HashMap<(usize, Vec<usize>), f64>,
}

impl<'a> CachedScore<'a> {
    pub fn new(bic: &'a BicScore) -> Self {
        Self {
            bic,
            cache: HashMap::new(),
        }
    }

    pub fn bic(&self) -> &BicScore {
        self.bic
    }

    pub fn local(&mut self, node: usize, parents: &[usize]) -> f64 {
        let mut key = parents.to_vec();
        key.sort_unstable();
        if let Some(&s) = self.cache.get(&(node, key.clone())) {
            return s;
        }
        let s = self.bic.local(node, &key);
        self.cache.insert((node, key), s);
        s
    }
}

/// Full BIC of `dag` on `dataset`.
pub fn bic_score(dataset: &CausalDataset, dag: &Dag, penalty: f64) -> Result<f64> {
    ensure_dim("dag nodes vs dataset columns", dataset.n_cols(), dag.len())?;
    Ok(BicScore::new(dataset, penalty).score(dag))
}
