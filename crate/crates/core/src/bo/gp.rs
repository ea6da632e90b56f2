//! Gaussian-process surrogate with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Candidate shared lengthscales (inputs live on the unit simplex).
pub const LENGTHSCALES: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
/// Candidate noise variances on the standardized scale; the first is the floor.
pub const NOISE_LEVELS: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-2];
const JITTER: [f64; 5] = [0.0, 1e-10, 1e-9, 1e-8, 1e-6];
/// Inputs closer than this (max-norm) are treated as one point.
pub const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    inputs: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    lengthscale: f64,
    noise: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

/// Posterior mean and standard deviation with their input gradients.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
    pub d_mean: Vec<f64>,
    pub d_std: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Drops earlier copies of (near-)duplicate inputs, keeping the latest value.
fn dedup(inputs: &[Vec<f64>], values: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut ys: Vec<f64> = Vec::with_capacity(values.len());
    for (x, &y) in inputs.iter().zip(values) {
        let dup = xs.iter().position(|u| u.iter().zip(x).all(|(a, b)| (a - b).abs() < DUPLICATE_TOL));
        if let Some(j) = dup {
            xs.remove(j);
            ys.remove(j);
        }
        xs.push(x.clone());
        ys.push(y);
    }
    (xs, ys)
}

/// Fits the GP by maximizing the marginal likelihood over the lengthscale and
/// noise grids. Values are standardized, so the signal variance is the data
/// variance.
pub fn gp_fit(inputs: &[Vec<f64>], values: &[f64]) -> Result<GpSurrogate> {
    if inputs.len() != values.len() {
        return Err(Error::GpFitFailure("inputs and values differ in length".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::GpFitFailure("non-finite training value".into()));
    }
    let (xs, ys) = dedup(inputs, values);
    if xs.len() < 2 {
        return Err(Error::GpFitFailure("need at least 2 distinct inputs".into()));
    }
    let n = ys.len();
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_scale));
    let d2 = DMatrix::from_fn(n, n, |i, j| sq_dist(&xs[i], &xs[j]));

    let mut best: Option<GpSurrogate> = None;
    for &ell in &LENGTHSCALES {
        let k = d2.map(|d| (-0.5 * d / (ell * ell)).exp());
        for &noise in &NOISE_LEVELS {
            let Some((chol, jitter)) = factor(&k, noise) else { continue };
            let alpha = chol.solve(&y);
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let ll = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if best.as_ref().is_none_or(|b| ll > b.log_likelihood) {
                best = Some(GpSurrogate {
                    inputs: xs.clone(),
                    y_mean,
                    y_scale,
                    lengthscale: ell,
                    noise: noise + jitter,
                    chol,
                    alpha,
                    log_likelihood: ll,
                });
            }
        }
    }
    best.ok_or_else(|| Error::GpFitFailure("kernel matrix not positive definite after jitter".into()))
}

fn factor(k: &DMatrix<f64>, noise: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    JITTER.iter().find_map(|&j| {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += noise + j;
        }
        m.cholesky().map(|c| (c, j))
    })
}

impl GpSurrogate {
    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn num_points(&self) -> usize {
        self.inputs.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Posterior of the latent function (no observation noise) at `x`.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let ell2 = self.lengthscale * self.lengthscale;
        let n = self.inputs.len();
        let kx = DVector::from_iterator(n, self.inputs.iter().map(|u| (-0.5 * sq_dist(x, u) / ell2).exp()));
        let mean_std = kx.dot(&self.alpha);
        let v = self.chol.solve(&kx);
        let var_std = (1.0 - kx.dot(&v)).max(0.0);
        let std_std = var_std.sqrt();
        let dim = x.len();
        let mut d_mean = vec![0.0; dim];
        let mut d_var = vec![0.0; dim];
        for (i, u) in self.inputs.iter().enumerate() {
            for d in 0..dim {
                // dk/dx_d = -k (x_d - u_d) / ell^2
                let dk = -kx[i] * (x[d] - u[d]) / ell2;
                d_mean[d] += self.alpha[i] * dk;
                d_var[d] -= 2.0 * v[i] * dk;
            }
        }
        let d_std = if std_std > 1e-12 {
            d_var.iter().map(|g| self.y_scale * g / (2.0 * std_std)).collect()
        } else {
            vec![0.0; dim]
        };
        Prediction {
            mean: self.y_mean + self.y_scale * mean_std,
            std: self.y_scale * std_std,
            d_mean: d_mean.iter().map(|g| self.y_scale * g).collect(),
            d_std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect()
    }

    #[test]
    fn interpolates_training_points() {
        let xs = line(8);
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
        let gp = gp_fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let p = gp.predict(x);
            assert!((p.mean - y).abs() < 1e-2, "{} vs {y}", p.mean);
        }
    }

    #[test]
    fn constant_data_gives_constant_mean() {
        let xs = line(5);
        let gp = gp_fit(&xs, &[2.5; 5]).unwrap();
        for t in [0.1, 0.33, 0.9] {
            assert_abs_diff_eq!(gp.predict(&[t]).mean, 2.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn duplicates_keep_latest_value() {
        let xs = vec![vec![0.0], vec![1.0], vec![0.0]];
        let gp = gp_fit(&xs, &[5.0, 1.0, 3.0]).unwrap();
        assert_eq!(gp.num_points(), 2);
        assert!((gp.predict(&[0.0]).mean - 3.0).abs() < 1e-2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.37).fract(), (i as f64 * 0.61).fract()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (4.0 * x[0]).cos() + x[1] * x[1]).collect();
        let gp = gp_fit(&xs, &ys).unwrap();
        let x = [0.43, 0.27];
        let p = gp.predict(&x);
        let h = 1e-6;
        for d in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[d] += h;
            dn[d] -= h;
            let (pu, pd) = (gp.predict(&up), gp.predict(&dn));
            assert_abs_diff_eq!((pu.mean - pd.mean) / (2.0 * h), p.d_mean[d], epsilon = 1e-5);
            assert_abs_diff_eq!((pu.std - pd.std) / (2.0 * h), p.d_std[d], epsilon = 1e-5);
        }
    }

    #[test]
    fn leave_one_out_errors_are_calibrated() {
        let xs: Vec<Vec<f64>> =
            (0..20).map(|i| vec![(i as f64 * 0.618_034).fract(), (i as f64 * 0.754_878).fract()]).collect();
        let f = |x: &[f64]| (3.0 * x[0]).sin() + (2.0 * x[1]).cos();
        let mut z: Vec<f64> = (0..xs.len())
            .map(|i| {
                let train: Vec<Vec<f64>> =
                    xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x.clone()).collect();
                let ys: Vec<f64> = train.iter().map(|x| f(x)).collect();
                let p = gp_fit(&train, &ys).unwrap().predict(&xs[i]);
                ((f(&xs[i]) - p.mean) / p.std.max(1e-12)).abs()
            })
            .collect();
        z.sort_by(f64::total_cmp);
        let median = 0.5 * (z[9] + z[10]);
        assert!(median < 2.0, "median |z| = {median}");
    }

    #[test]
    fn single_point_rejected() {
        assert!(gp_fit(&[vec![0.0]], &[1.0]).is_err());
    }
}
