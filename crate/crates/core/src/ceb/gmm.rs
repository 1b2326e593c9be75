//! Diagonal-covariance Gaussian mixtures fitted by EM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::gaussian::{diag_logpdf_var, log_sum_exp};
use crate::numkit::Matrix;
use crate::rng::{self, Rng};

/// Variances below this trigger a component reseed.
pub const COLLAPSE_VARIANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    /// Mean log-likelihood of the data after initialization and after every
    /// EM iteration.
    pub log_likelihood: Vec<f64>,
    /// Iterations that reseeded a collapsed component.
    pub reseeds: Vec<usize>,
}

impl GaussianMixture {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::Shape("mixture parameter lists disagree in length".into()));
        }
        let d = self.dim();
        if self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(Error::Shape("mixture components disagree in dimension".into()));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Format("mixture variances must be positive".into()));
        }
        Ok(())
    }

    fn component_logs(&self, z: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.weights[c].ln() + diag_logpdf_var(&self.means[c], &self.variances[c], z);
        }
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut logs = vec![0.0; self.components()];
        self.component_logs(z, &mut logs);
        log_sum_exp(&logs)
    }

    /// Posterior component probabilities for `z`.
    pub fn responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let mut logs = vec![0.0; self.components()];
        self.component_logs(z, &mut logs);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn mean_log_likelihood(&self, data: &Matrix) -> f64 {
        data.iter_rows().map(|z| self.log_density(z)).sum::<f64>() / data.rows() as f64
    }

    /// Fits `k` components by EM after k-means++ seeding. Stops after
    /// `max_iters` iterations or when the mean log-likelihood improves by
    /// less than `tol`.
    pub fn fit(data: &Matrix, k: usize, max_iters: usize, tol: f64, rng: &mut Rng) -> Result<(Self, EmTrace)> {
        let (n, d) = (data.rows(), data.cols());
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if n < k {
            return Err(Error::Config(format!("{n} points cannot seed {k} components")));
        }
        if !data.is_finite() {
            return Err(Error::Shape("mixture data contains non-finite values".into()));
        }
        let global_mean: Vec<f64> = data.col_sums().iter().map(|s| s / n as f64).collect();
        let global_var: Vec<f64> = (0..d)
            .map(|j| {
                let v = data.iter_rows().map(|r| (r[j] - global_mean[j]).powi(2)).sum::<f64>() / n as f64;
                v.max(COLLAPSE_VARIANCE * 10.0)
            })
            .collect();

        let means = kmeans_pp(data, k, rng);
        let mut gmm = GaussianMixture {
            weights: vec![1.0 / k as f64; k],
            means,
            variances: vec![global_var.clone(); k],
        };
        let mut trace = EmTrace { log_likelihood: vec![gmm.mean_log_likelihood(data)], reseeds: Vec::new() };
        let mut resp = Matrix::zeros(n, k);
        let mut point_ll = vec![0.0; n];
        let mut logs = vec![0.0; k];
        for iter in 0..max_iters {
            // E-step.
            for i in 0..n {
                gmm.component_logs(data.row(i), &mut logs);
                let lse = log_sum_exp(&logs);
                point_ll[i] = lse;
                for (c, l) in logs.iter().enumerate() {
                    resp.set(i, c, (l - lse).exp());
                }
            }
            // M-step.
            let nk = resp.col_sums();
            let mut reseeded = false;
            for c in 0..k {
                if nk[c] <= 0.0 {
                    reseeded = true;
                    gmm.reseed(c, data, &point_ll, &global_var);
                    continue;
                }
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    let r = resp.get(i, c);
                    for (m, x) in mean.iter_mut().zip(data.row(i)) {
                        *m += r * x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nk[c]);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    let r = resp.get(i, c);
                    for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                        *v += r * (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= nk[c]);
                gmm.weights[c] = nk[c] / n as f64;
                gmm.means[c] = mean;
                gmm.variances[c] = var;
                if gmm.variances[c].iter().any(|&v| !(v >= COLLAPSE_VARIANCE)) {
                    reseeded = true;
                    gmm.reseed(c, data, &point_ll, &global_var);
                }
            }
            let total: f64 = gmm.weights.iter().sum();
            gmm.weights.iter_mut().for_each(|w| *w /= total);
            let ll = gmm.mean_log_likelihood(data);
            if !ll.is_finite() {
                return Err(Error::training("gaussian mixture", iter, "log-likelihood is not finite"));
            }
            let prev = *trace.log_likelihood.last().unwrap();
            trace.log_likelihood.push(ll);
            if reseeded {
                trace.reseeds.push(iter);
            } else if ll - prev < tol {
                break;
            }
        }
        Ok((gmm, trace))
    }

    /// Moves component `c` onto the point the current mixture explains
    /// worst, with the global variance and a small weight.
    fn reseed(&mut self, c: usize, data: &Matrix, point_ll: &[f64], global_var: &[f64]) {
        let worst = point_ll
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.means[c] = data.row(worst).to_vec();
        self.variances[c] = global_var.to_vec();
        self.weights[c] = 1.0 / data.rows() as f64;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let gmm: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        gmm.validate()?;
        Ok(gmm)
    }
}

fn kmeans_pp(data: &Matrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = data.rows();
    let mut centers = vec![data.row(rng::index(rng, n)).to_vec()];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut dist: Vec<f64> = data.iter_rows().map(|r| sq(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng::uniform(rng, 0.0, total);
            let mut chosen = n - 1;
            for (i, &dv) in dist.iter().enumerate() {
                if target < dv {
                    chosen = i;
                    break;
                }
                target -= dv;
            }
            chosen
        } else {
            rng::index(rng, n)
        };
        let c = data.row(pick).to_vec();
        for (i, r) in data.iter_rows().enumerate() {
            dist[i] = dist[i].min(sq(r, &c));
        }
        centers.push(c);
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture_sample(centers: &[[f64; 2]], scales: &[f64], n: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = i % centers.len();
                (0..2).map(|j| centers[c][j] + scales[c] * rng::normal(&mut r)).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_component_recovers_sample_moments() {
        let data = mixture_sample(&[[1.0, -2.0]], &[0.5], 4000, 1);
        let (g, _) = GaussianMixture::fit(&data, 1, 50, 1e-6, &mut rng::seeded(0)).unwrap();
        let n = data.rows() as f64;
        for j in 0..2 {
            let m = data.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            let v = data.iter_rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            assert!((g.means[0][j] - m).abs() < 1e-2);
            assert!((g.variances[0][j] - v).abs() < 1e-2);
        }
        assert!((g.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let data = mixture_sample(&[[0.0, 0.0], [4.0, 1.0], [-3.0, 5.0]], &[0.3, 1.0, 0.6], 1500, 2);
        let (g, trace) = GaussianMixture::fit(&data, 6, 200, 0.0, &mut rng::seeded(3)).unwrap();
        assert!(trace.reseeds.is_empty());
        for w in trace.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for z in data.iter_rows().take(100) {
            assert!((g.responsibilities(z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_points_is_config_error() {
        let data = Matrix::zeros(3, 2);
        assert!(matches!(
            GaussianMixture::fit(&data, 4, 10, 1e-6, &mut rng::seeded(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicated_points_trigger_reseed_not_nan() {
        let mut rows = vec![vec![1.0, 1.0]; 50];
        rows.extend((0..50).map(|i| vec![i as f64 * 0.1, -(i as f64) * 0.05]));
        let data = Matrix::from_rows(&rows).unwrap();
        let (g, _) = GaussianMixture::fit(&data, 4, 100, 1e-6, &mut rng::seeded(5)).unwrap();
        assert!(g.variances.iter().flatten().all(|&v| v >= COLLAPSE_VARIANCE));
        assert!(g.mean_log_likelihood(&data).is_finite());
    }

    #[test]
    fn json_round_trip() {
        let data = mixture_sample(&[[0.0, 0.0], [3.0, 3.0]], &[1.0, 1.0], 200, 4);
        let (g, _) = GaussianMixture::fit(&data, 2, 20, 1e-6, &mut rng::seeded(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gmm.json");
        g.save(&p).unwrap();
        assert_eq!(GaussianMixture::load(&p).unwrap(), g);
    }
}
