//! Expected improvement and its maximization over the allocation slab.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::gp::GpSurrogate;
use crate::ambiguity::projection::project_shifted_simplex;

/// Below this posterior spread the improvement is treated as deterministic.
pub const MIN_STD: f64 = 1e-12;

/// `E[max(best - f, 0)]` for `f ~ N(mean, std^2)` (minimization).
pub fn ei_from_moments(mean: f64, std: f64, best: f64) -> f64 {
    if std < MIN_STD {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / std;
    let n = Normal::standard();
    ((best - mean) * n.cdf(z) + std * n.pdf(z)).max(0.0)
}

pub fn expected_improvement(gp: &GpSurrogate, x: &[f64], best: f64) -> f64 {
    let p = gp.predict(x);
    ei_from_moments(p.mean, p.std, best)
}

/// EI and its gradient in `x`.
pub fn expected_improvement_with_gradient(gp: &GpSurrogate, x: &[f64], best: f64) -> (f64, Vec<f64>) {
    let p = gp.predict(x);
    if p.std < MIN_STD {
        let ei = (best - p.mean).max(0.0);
        let grad = if ei > 0.0 { p.d_mean.iter().map(|g| -g).collect() } else { vec![0.0; x.len()] };
        return (ei, grad);
    }
    let z = (best - p.mean) / p.std;
    let n = Normal::standard();
    let (cdf, pdf) = (n.cdf(z), n.pdf(z));
    let ei = (best - p.mean) * cdf + p.std * pdf;
    // dEI/dmean = -Phi(z), dEI/dstd = phi(z)
    let grad = p.d_mean.iter().zip(&p.d_std).map(|(dm, ds)| -cdf * dm + pdf * ds).collect();
    (ei.max(0.0), grad)
}

/// Feasible region `{u : sum u = 1, u_k >= lower}` in budget-fraction units.
#[derive(Debug, Clone, Copy)]
pub struct Slab {
    pub dim: usize,
    pub lower: f64,
}

impl Slab {
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        project_shifted_simplex(y, self.lower, 1.0)
    }

    /// Uniform draw (flat Dirichlet) over the slab.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let e: Vec<f64> = (0..self.dim).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        let free = 1.0 - self.dim as f64 * self.lower;
        e.iter().map(|v| self.lower + free * v / s).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AcquisitionConfig {
    pub candidates: usize,
    pub restarts: usize,
    pub ascent_steps: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { candidates: 512, restarts: 8, ascent_steps: 100 }
    }
}

/// Point of the slab with (locally) maximal EI: random candidates, then
/// projected gradient ascent from the best few.
pub fn propose_next<R: Rng + ?Sized>(
    gp: &GpSurrogate,
    best: f64,
    slab: Slab,
    config: &AcquisitionConfig,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let mut scored: Vec<(Vec<f64>, f64)> = (0..config.candidates.max(1))
        .map(|_| {
            let u = slab.sample(rng);
            let ei = expected_improvement(gp, &u, best);
            (u, ei)
        })
        .collect();
    // Stable sort keeps draw order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut winner = scored[0].clone();
    for (start, ei0) in scored.into_iter().take(config.restarts) {
        let (u, ei) = ascend_ei(gp, best, slab, start, ei0, config.ascent_steps);
        if ei > winner.1 {
            winner = (u, ei);
        }
    }
    winner
}

fn ascend_ei(gp: &GpSurrogate, best: f64, slab: Slab, start: Vec<f64>, ei0: f64, steps: usize) -> (Vec<f64>, f64) {
    let mut u = start;
    let mut ei = ei0;
    let mut t = 0.1;
    for _ in 0..steps {
        let (_, grad) = expected_improvement_with_gradient(gp, &u, best);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm > 0.0) {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            // Step length t in the input space, along the normalized gradient.
            let y: Vec<f64> = u.iter().zip(&grad).map(|(a, g)| a + t * g / gnorm).collect();
            let cand = slab.project(&y);
            let e = expected_improvement(gp, &cand, best);
            if e > ei {
                u = cand;
                ei = e;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || t < 1e-10 {
            break;
        }
        t = (2.0 * t).min(0.5);
    }
    (u, ei)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bo::gp::gp_fit;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_form_values() {
        assert_eq!(ei_from_moments(1.0, 0.0, 1.0), 0.0);
        assert_eq!(ei_from_moments(0.0, 0.0, 1.0), 1.0);
        // phi(0) = 1 / sqrt(2 pi)
        assert_abs_diff_eq!(ei_from_moments(2.0, 1.0, 2.0), 1.0 / (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn slab_samples_are_feasible() {
        let slab = Slab { dim: 4, lower: 0.05 };
        let mut rng = substream(1, &[]);
        for _ in 0..100 {
            let u = slab.sample(&mut rng);
            assert_abs_diff_eq!(u.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(u.iter().all(|&v| v >= 0.05 - 1e-15));
        }
    }

    #[test]
    fn proposal_finds_the_low_region() {
        // Objective low near (0.7, 0.2, 0.1); training points elsewhere are high.
        let target = [0.7, 0.2, 0.1];
        let slab = Slab { dim: 3, lower: 0.02 };
        let mut rng = substream(4, &[]);
        let xs: Vec<Vec<f64>> = (0..25).map(|_| slab.sample(&mut rng)).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect();
        let best = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let gp = gp_fit(&xs, &ys).unwrap();
        let (u, ei) = propose_next(&gp, best, slab, &AcquisitionConfig::default(), &mut rng);
        assert!(ei > 0.0);
        let dist: f64 = u.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 0.25, "proposal {u:?}");
        assert_abs_diff_eq!(u.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
