//! Euclidean-style projections onto the probability simplex intersected with
//! each ambiguity set.

use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 500;
pub const SWEEP_TOL: f64 = 1e-10;

/// Projection of `y` onto `{x >= 0, sum x = total}` (sort-and-threshold).
pub fn project_simplex(y: &[f64], total: f64) -> Vec<f64> {
    let mut u: Vec<f64> = y.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - total) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Projection onto `{x >= lower, sum x = total}`.
pub fn project_shifted_simplex(y: &[f64], lower: f64, total: f64) -> Vec<f64> {
    let free = total - lower * y.len() as f64;
    let shifted: Vec<f64> = y.iter().map(|v| v - lower).collect();
    project_simplex(&shifted, free).into_iter().map(|v| v + lower).collect()
}

pub(crate) fn l2_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Exact projection onto `simplex ∩ {||x - center|| <= radius}`.
///
/// The minimizer is `Π_simplex((1 - t) y + t center)` for the smallest `t`
/// in `[0, 1]` that lands inside the ball, found by bisection.
pub fn project_l2_ball_simplex(y: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    let s = project_simplex(y, 1.0);
    if l2_norm_diff(&s, center) <= radius {
        return s;
    }
    if radius <= 0.0 {
        return center.to_vec();
    }
    let at = |t: f64| -> Vec<f64> {
        let mixed: Vec<f64> = y.iter().zip(center).map(|(a, c)| (1.0 - t) * a + t * c).collect();
        project_simplex(&mixed, 1.0)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = center.to_vec();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let q = at(mid);
        if l2_norm_diff(&q, center) <= radius {
            hi = mid;
            best = q;
        } else {
            lo = mid;
        }
    }
    best
}

/// `sum_i |C_p(i) - C_q(i)| (x_{i+1} - x_i)` over the first `n - 1` cumulative sums.
pub fn wasserstein1_cdf(p: &[f64], q: &[f64], spacings: &[f64]) -> f64 {
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for i in 0..spacings.len() {
        cp += p[i];
        cq += q[i];
        total += (cp - cq).abs() * spacings[i];
    }
    total
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    // Only the first n - 1 partial sums are free; the last is always 1.
    let mut acc = 0.0;
    p[..p.len() - 1]
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn from_cumulative(u: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    let mut out: Vec<f64> = u
        .iter()
        .map(|&c| {
            let m = (c - prev).max(0.0);
            prev = c;
            m
        })
        .collect();
    out.push((1.0 - prev).max(0.0));
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Least-squares nondecreasing fit clipped to `[0, 1]` (pool adjacent violators).
pub(crate) fn project_monotone_unit(y: &[f64]) -> Vec<f64> {
    let mut values: Vec<f64> = Vec::with_capacity(y.len());
    let mut weights: Vec<usize> = Vec::with_capacity(y.len());
    for &v in y {
        values.push(v);
        weights.push(1);
        while values.len() > 1 && values[values.len() - 2] > values[values.len() - 1] {
            let (v2, w2) = (values.pop().unwrap(), weights.pop().unwrap());
            let (v1, w1) = (values.pop().unwrap(), weights.pop().unwrap());
            let w = w1 + w2;
            values.push((v1 * w1 as f64 + v2 * w2 as f64) / w as f64);
            weights.push(w);
        }
    }
    values.iter().zip(&weights).flat_map(|(&v, &w)| std::iter::repeat_n(v.clamp(0.0, 1.0), w)).collect()
}

/// Projection onto `{v : sum_i w_i |v_i - c_i| <= radius}`.
pub(crate) fn project_weighted_l1_ball(y: &[f64], center: &[f64], w: &[f64], radius: f64) -> Vec<f64> {
    let d: Vec<f64> = y.iter().zip(center).map(|(a, c)| a - c).collect();
    let norm: f64 = d.iter().zip(w).map(|(x, w)| x.abs() * w).sum();
    if norm <= radius {
        return y.to_vec();
    }
    if radius <= 0.0 {
        return center.to_vec();
    }
    // Soft threshold v_i = c_i + sign(d_i) max(|d_i| - lambda w_i, 0); the
    // weighted norm is piecewise linear and decreasing in lambda.
    let mut breaks: Vec<(f64, f64)> =
        d.iter().zip(w).filter(|(_, &w)| w > 0.0).map(|(x, &w)| (x.abs() / w, w)).collect();
    breaks.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    // norm(lambda) = sum_{active} w_i |d_i| - lambda w_i^2 for the active set
    // of breakpoints above lambda.
    let mut sum_wd = 0.0;
    let mut sum_ww = 0.0;
    let mut lambda = 0.0;
    for (j, &(b, wi)) in breaks.iter().enumerate() {
        sum_wd += wi * wi * b;
        sum_ww += wi * wi;
        let next = breaks.get(j + 1).map_or(0.0, |x| x.0);
        let candidate = (sum_wd - radius) / sum_ww;
        if candidate >= next {
            lambda = candidate;
            break;
        }
    }
    d.iter().zip(w).zip(center).map(|((x, w), c)| c + x.signum() * (x.abs() - lambda * w).max(0.0)).collect()
}

/// Projection onto `simplex ∩ {W1(p, center) <= radius}`.
///
/// Works in cumulative coordinates, where the simplex is the set of
/// nondecreasing vectors in `[0, 1]` and the 1-Wasserstein ball is a weighted
/// L1 ball; Dykstra's alternating projection finds the nearest point of the
/// intersection. A final contraction toward `center` absorbs residual
/// infeasibility.
pub fn project_wasserstein1_simplex(y: &[f64], center: &[f64], spacings: &[f64], radius: f64) -> Result<Vec<f64>> {
    let s = project_simplex(y, 1.0);
    if wasserstein1_cdf(&s, center, spacings) <= radius {
        return Ok(s);
    }
    if radius <= 0.0 {
        return Ok(center.to_vec());
    }
    let cbar = cumulative(center);
    let mut x = cumulative(&s);
    let dim = x.len();
    let mut p_inc = vec![0.0; dim];
    let mut q_inc = vec![0.0; dim];
    let mut mono = x.clone();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let shifted: Vec<f64> = x.iter().zip(&p_inc).map(|(a, b)| a + b).collect();
        mono = project_monotone_unit(&shifted);
        for i in 0..dim {
            p_inc[i] = shifted[i] - mono[i];
        }
        let shifted: Vec<f64> = mono.iter().zip(&q_inc).map(|(a, b)| a + b).collect();
        let ball = project_weighted_l1_ball(&shifted, &cbar, spacings, radius);
        for i in 0..dim {
            q_inc[i] = shifted[i] - ball[i];
        }
        let moved = x.iter().zip(&ball).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let gap = mono.iter().zip(&ball).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = ball;
        if moved < SWEEP_TOL && gap < SWEEP_TOL.sqrt() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ProjectionDidNotConverge { sweeps: MAX_SWEEPS });
    }
    let p = from_cumulative(&mono);
    let dist = wasserstein1_cdf(&p, center, spacings);
    if dist <= radius {
        return Ok(p);
    }
    let shrink = radius / dist;
    Ok(center.iter().zip(&p).map(|(c, v)| c + shrink * (v - c)).collect())
}

/// Maximizer of `g . q` over `simplex ∩ {W1(q, center) <= radius}` on the grid `x`.
///
/// For a multiplier `lambda` on the transport budget each atom of `center`
/// moves whole to `argmax_j g_j - lambda |x_i - x_j|`. Bisection brackets the
/// multiplier at which the plan cost crosses `radius`, and mixing the two
/// bracketing plans spends the budget exactly.
pub fn maximize_linear_wasserstein1(g: &[f64], center: &[f64], x: &[f64], radius: f64) -> Vec<f64> {
    let n = x.len();
    // Best target to the left is a running max of g_j + lambda x_j, to the
    // right a running max of g_j - lambda x_j; ties go to the nearer point.
    let plan = |lambda: f64| -> (Vec<usize>, f64) {
        let mut left = vec![0; n];
        let mut best = 0;
        for j in 0..n {
            if g[j] + lambda * x[j] >= g[best] + lambda * x[best] {
                best = j;
            }
            left[j] = best;
        }
        let mut right = vec![n - 1; n];
        best = n - 1;
        for j in (0..n).rev() {
            if g[j] - lambda * x[j] >= g[best] - lambda * x[best] {
                best = j;
            }
            right[j] = best;
        }
        let mut cost = 0.0;
        let targets = (0..n)
            .map(|i| {
                let score = |j: usize| g[j] - lambda * (x[i] - x[j]).abs();
                let (l, r) = (left[i], right[i]);
                let j = if score(l) > score(r) || (score(l) == score(r) && x[i] - x[l] <= x[r] - x[i]) { l } else { r };
                cost += center[i] * (x[i] - x[j]).abs();
                j
            })
            .collect();
        (targets, cost)
    };
    let image = |targets: &[usize]| {
        let mut q = vec![0.0; n];
        for (i, &j) in targets.iter().enumerate() {
            q[j] += center[i];
        }
        q
    };
    let (free, free_cost) = plan(0.0);
    if free_cost <= radius {
        return image(&free);
    }
    let gap = g.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - g.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let min_step = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, 2.0 * gap / min_step + 1.0);
    let (mut lo_plan, mut hi_plan) = (free, plan(hi));
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let candidate = plan(mid);
        if candidate.1 > radius {
            lo = mid;
            lo_plan = candidate.0;
        } else {
            hi = mid;
            hi_plan = candidate;
        }
    }
    let lo_cost: f64 = lo_plan.iter().enumerate().map(|(i, &j)| center[i] * (x[i] - x[j]).abs()).sum();
    let alpha = ((radius - hi_plan.1) / (lo_cost - hi_plan.1)).clamp(0.0, 1.0);
    let (a, b) = (image(&lo_plan), image(&hi_plan.0));
    a.iter().zip(&b).map(|(u, v)| alpha * u + (1.0 - alpha) * v).collect()
}

/// Scalar moment constraints in terms of `d = mean - mu` and
/// `s = sum p_i (x_i - mu)^2`:
/// `d^2 <= gamma1 var`, `s <= ub var`, `s >= lb var + 2 d^2`.
#[derive(Debug, Clone)]
pub(crate) struct MomentRegion {
    pub mu: f64,
    pub var: f64,
    pub gamma1: f64,
    pub lb: f64,
    pub ub: f64,
}

impl MomentRegion {
    pub fn coordinates(&self, p: &[f64], x: &[f64]) -> (f64, f64) {
        let mut d = 0.0;
        let mut s = 0.0;
        for (pi, xi) in p.iter().zip(x) {
            let a = xi - self.mu;
            d += pi * a;
            s += pi * a * a;
        }
        (d, s)
    }

    /// Largest constraint violation, each constraint scaled by the nominal variance.
    pub fn violation(&self, d: f64, s: f64) -> f64 {
        let c1 = d * d / self.var - self.gamma1;
        let c2 = s / self.var - self.ub;
        let c3 = self.lb + 2.0 * d * d / self.var - s / self.var;
        c1.max(c2).max(c3)
    }

    fn half_width(&self) -> f64 {
        (self.gamma1 * self.var).sqrt().min(((self.ub - self.lb) * self.var / 2.0).max(0.0).sqrt())
    }

    /// Nearest point of the region to `t` in the metric `m` (2x2 SPD).
    fn project_point(&self, t: (f64, f64), m: [[f64; 2]; 2]) -> (f64, f64) {
        let (lower, upper) = (self.lb * self.var, self.ub * self.var);
        let a = (self.gamma1 * self.var).sqrt();
        let inside = |d: f64, s: f64| d.abs() <= a && s <= upper && s >= lower + 2.0 * d * d;
        if inside(t.0, t.1) {
            return t;
        }
        let cost = |d: f64, s: f64| {
            let (u, v) = (d - t.0, s - t.1);
            m[0][0] * u * u + 2.0 * m[0][1] * u * v + m[1][1] * v * v
        };
        let dm = self.half_width();
        let mut best = (0.0, lower);
        let mut best_cost = f64::INFINITY;
        let mut consider = |d: f64, s: f64| {
            let c = cost(d, s);
            if c < best_cost {
                best_cost = c;
                best = (d, s);
            }
        };
        // Top edge s = upper, |d| <= dm: quadratic in d.
        {
            let d = if m[0][0] > 0.0 { t.0 - m[0][1] * (upper - t.1) / m[0][0] } else { 0.0 };
            consider(d.clamp(-dm, dm), upper);
        }
        // Vertical edges d = +-a where they exist.
        if lower + 2.0 * a * a <= upper {
            for side in [-a, a] {
                let lo = lower + 2.0 * side * side;
                let s = if m[1][1] > 0.0 { t.1 - m[0][1] * (side - t.0) / m[1][1] } else { lo };
                consider(side, s.clamp(lo, upper));
            }
        }
        // Parabola s = lower + 2 d^2: stationary points of a quartic, located by
        // sign changes of its derivative on a fine partition.
        let h = |d: f64| cost(d, lower + 2.0 * d * d);
        let dh = |d: f64| {
            let (u, v) = (d - t.0, lower + 2.0 * d * d - t.1);
            let dv = 4.0 * d;
            2.0 * (m[0][0] * u + m[0][1] * (v + u * dv) + m[1][1] * v * dv)
        };
        consider(-dm, lower + 2.0 * dm * dm);
        consider(dm, lower + 2.0 * dm * dm);
        if dm > 0.0 {
            const PIECES: usize = 256;
            let step = 2.0 * dm / PIECES as f64;
            let mut left = -dm;
            let mut f_left = dh(left);
            for j in 1..=PIECES {
                let right = if j == PIECES { dm } else { -dm + step * j as f64 };
                let f_right = dh(right);
                if f_left == 0.0 {
                    consider(left, lower + 2.0 * left * left);
                } else if f_left * f_right < 0.0 {
                    let (mut lo, mut hi) = (left, right);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if dh(mid) * f_left > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let r = 0.5 * (lo + hi);
                    if h(r).is_finite() {
                        consider(r, lower + 2.0 * r * r);
                    }
                }
                left = right;
                f_left = f_right;
            }
        }
        best
    }
}

/// Moment constraint rows `A = [1; x - mu; (x - mu)^2]`.
pub(crate) struct MomentProjector<'a> {
    region: &'a MomentRegion,
    x: &'a [f64],
    rows: [Vec<f64>; 3],
    tol: f64,
}

/// Projection of `y` onto `{p >= 0, A p = z}` for a fixed `z`.
struct FixedMoments {
    theta: [f64; 3],
    p: Vec<f64>,
    value: f64,
    hessian: [[f64; 2]; 2],
}

const NEWTON_ITERS: usize = 200;
const OUTER_ITERS: usize = 200;

impl<'a> MomentProjector<'a> {
    pub fn new(region: &'a MomentRegion, x: &'a [f64]) -> Result<Self> {
        let a: Vec<f64> = x.iter().map(|v| v - region.mu).collect();
        let rows = [vec![1.0; x.len()], a.clone(), a.iter().map(|v| v * v).collect::<Vec<_>>()];
        let mut gram = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                gram[r][c] = rows[r].iter().zip(&rows[c]).map(|(u, v)| u * v).sum();
            }
        }
        if invert3(gram).is_none() {
            return Err(Error::InvalidAmbiguitySet("moment constraints need at least 3 distinct grid points".into()));
        }
        let scale = rows[2].iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        Ok(Self { region, x, rows, tol: 1e-13 * scale })
    }

    fn violation(&self, p: &[f64]) -> f64 {
        let (d, s) = self.region.coordinates(p, self.x);
        self.region.violation(d, s)
    }

    fn primal(&self, y: &[f64], theta: &[f64; 3]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| (v + theta[0] + theta[1] * self.rows[1][i] + theta[2] * self.rows[2][i]).max(0.0))
            .collect()
    }

    fn dual_value(&self, p: &[f64], theta: &[f64; 3], z: &[f64; 3]) -> f64 {
        0.5 * p.iter().map(|v| v * v).sum::<f64>() - (0..3).map(|r| theta[r] * z[r]).sum::<f64>()
    }

    /// Semismooth Newton on the dual `min 0.5 |max(y + A^T theta, 0)|^2 - theta . z`.
    /// Returns `None` when `z` is not reachable from the simplex.
    fn solve_fixed(&self, y: &[f64], z: [f64; 3], warm: [f64; 3]) -> Option<FixedMoments> {
        // Forming y_i + A_i theta cancels terms of size |y|; the attainable
        // residual grows with it.
        let magnitude = 1.0 + y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = self.tol * magnitude;
        let mut theta = warm;
        let mut p = self.primal(y, &theta);
        let mut h = self.dual_value(&p, &theta, &z);
        let mut stalled = false;
        for _ in 0..NEWTON_ITERS {
            let grad: [f64; 3] =
                std::array::from_fn(|r| self.rows[r].iter().zip(&p).map(|(a, v)| a * v).sum::<f64>() - z[r]);
            let gram = self.active_gram(&p);
            let residual = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
            if residual <= tol || (stalled && residual <= 1e3 * tol) {
                let inv = regularized_inverse(gram)?;
                let value = 0.5 * p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                return Some(FixedMoments {
                    theta,
                    p,
                    value,
                    hessian: [[inv[1][1], inv[1][2]], [inv[2][1], inv[2][2]]],
                });
            }
            let inv = regularized_inverse(gram)?;
            let step: [f64; 3] = std::array::from_fn(|r| -(0..3).map(|c| inv[r][c] * grad[c]).sum::<f64>());
            let slope: f64 = (0..3).map(|r| grad[r] * step[r]).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand: [f64; 3] = std::array::from_fn(|r| theta[r] + t * step[r]);
                let pc = self.primal(y, &cand);
                let hc = self.dual_value(&pc, &cand, &z);
                if hc <= h + 1e-4 * t * slope {
                    // A step that leaves the dual value unchanged is round-off.
                    accepted = hc < h;
                    theta = cand;
                    p = pc;
                    h = hc;
                    break;
                }
                t *= 0.5;
            }
            if theta.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                return None;
            }
            if !accepted {
                if stalled {
                    return None;
                }
                stalled = true;
            }
        }
        None
    }

    fn active_gram(&self, p: &[f64]) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for (i, &v) in p.iter().enumerate() {
            if v > 0.0 {
                let col = [1.0, self.rows[1][i], self.rows[2][i]];
                for r in 0..3 {
                    for c in 0..3 {
                        g[r][c] += col[r] * col[c];
                    }
                }
            }
        }
        g
    }

    /// Euclidean projection onto the simplex intersected with the moment region.
    ///
    /// Minimizes `phi(d, s)`, the squared distance from `y` to the simplex slice
    /// with those moment coordinates, over the region by projected Newton. The
    /// slice projection is exact, so the result is feasible whenever the
    /// region meets the simplex; optimality over the region is to solver
    /// tolerance.
    pub fn project(&self, y: &[f64], nominal: &[f64]) -> Result<Vec<f64>> {
        let simplex = project_simplex(y, 1.0);
        if self.violation(&simplex) <= 0.0 {
            return Ok(simplex);
        }
        let fail = || Error::ProjectionDidNotConverge { sweeps: OUTER_ITERS };
        let start = self.region.coordinates(nominal, self.x);
        let mut w = self.region.project_point(start, [[1.0, 0.0], [0.0, 1.0]]);
        let mut cur = self.solve_fixed(y, [1.0, w.0, w.1], [0.0; 3]).ok_or_else(fail)?;
        for _ in 0..OUTER_ITERS {
            let g = (cur.theta[1], cur.theta[2]);
            let m = cur.hessian;
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let mut directions = Vec::with_capacity(2);
            if det > 0.0 && m[0][0] > 0.0 {
                // Newton step: minimize the local quadratic model over the region.
                let step = ((m[1][1] * g.0 - m[0][1] * g.1) / det, (-m[1][0] * g.0 + m[0][0] * g.1) / det);
                directions.push(self.region.project_point((w.0 - step.0, w.1 - step.1), m));
            }
            let scale = (m[0][0].abs() + m[1][1].abs()).max(1e-300);
            directions
                .push(self.region.project_point((w.0 - g.0 / scale, w.1 - g.1 / scale), [[1.0, 0.0], [0.0, 1.0]]));
            let mut moved = false;
            for target in directions {
                let dir = (target.0 - w.0, target.1 - w.1);
                let slope = g.0 * dir.0 + g.1 * dir.1;
                if slope >= 0.0 {
                    continue;
                }
                let mut t = 1.0;
                for _ in 0..50 {
                    let cand = (w.0 + t * dir.0, w.1 + t * dir.1);
                    if let Some(next) = self.solve_fixed(y, [1.0, cand.0, cand.1], cur.theta) {
                        if next.value <= cur.value + 1e-4 * t * slope {
                            moved = next.value < cur.value;
                            w = cand;
                            cur = next;
                            break;
                        }
                    }
                    t *= 0.5;
                }
                if moved {
                    break;
                }
            }
            if !moved {
                break;
            }
        }
        let mut p = cur.p;
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        if self.violation(&p) <= 0.0 || self.violation(nominal) >= 0.0 {
            return Ok(p);
        }
        // Round-off can leave a sliver of violation; the region is convex, so
        // blending toward a strictly feasible nominal restores feasibility.
        let blend = |t: f64| -> Vec<f64> { p.iter().zip(nominal).map(|(a, c)| (1.0 - t) * a + t * c).collect() };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.violation(&blend(mid)) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(blend(hi))
    }
}

/// Inverse of a positive semidefinite 3x3 matrix after a small ridge.
fn regularized_inverse(g: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let eps = 1e-12 * (g[0][0] + g[1][1] + g[2][2] + 1.0);
    let m = nalgebra::Matrix3::from_fn(|r, c| g[r][c] + if r == c { eps } else { 0.0 });
    let inv = m.cholesky()?.inverse();
    Some(std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)])))
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if !(det.abs() > 1e-14 * scale.powi(3)) {
        return None;
    }
    let cof = |r: usize, c: usize| {
        let rs: Vec<usize> = (0..3).filter(|&i| i != r).collect();
        let cs: Vec<usize> = (0..3).filter(|&i| i != c).collect();
        let minor = m[rs[0]][cs[0]] * m[rs[1]][cs[1]] - m[rs[0]][cs[1]] * m[rs[1]][cs[0]];
        if (r + c).is_multiple_of(2) {
            minor
        } else {
            -minor
        }
    };
    Some(std::array::from_fn(|r| std::array::from_fn(|c| cof(c, r) / det)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn simplex_projection_basics() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5], 1.0), vec![0.2, 0.3, 0.5]);
        let p = project_simplex(&[2.0, 0.0, 0.0], 1.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5], 1.0);
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = project_shifted_simplex(&[0.0, 0.0, 10.0], 1.0, 12.0);
        assert_eq!(p, vec![1.0, 1.0, 10.0]);
    }

    #[test]
    fn l2_projection_along_segment() {
        // Nominal in the interior, p 0.2 away in the direction of vertex e_0.
        let c = [0.3, 0.35, 0.35];
        let dir = [2.0f64, -1.0, -1.0];
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let p: Vec<f64> = c.iter().zip(&u).map(|(c, u)| c + 0.2 * u).collect();
        let q = project_l2_ball_simplex(&p, &c, 0.1);
        for i in 0..3 {
            assert_abs_diff_eq!(q[i], c[i] + 0.1 * u[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn monotone_fit() {
        assert_eq!(project_monotone_unit(&[0.1, 0.3, 0.2, 0.9]), vec![0.1, 0.25, 0.25, 0.9]);
        assert_eq!(project_monotone_unit(&[-0.5, 1.5]), vec![0.0, 1.0]);
    }

    #[test]
    fn weighted_l1_ball_hits_radius() {
        let y = [1.0, -2.0, 0.5];
        let c = [0.0; 3];
        let w = [1.0, 2.0, 0.5];
        let v = project_weighted_l1_ball(&y, &c, &w, 1.0);
        let norm: f64 = v.iter().zip(&w).map(|(x, w)| x.abs() * w).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        assert_eq!(project_weighted_l1_ball(&y, &c, &w, 100.0), y.to_vec());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn inverse_3x3() {
        let m = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let inv = invert3(m).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| m[r][k] * inv[k][c]).sum();
                assert_abs_diff_eq!(v, if r == c { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn l2_projection_is_optimal_against_random_members(
            y in prop::collection::vec(-0.5f64..1.0, 5),
            c in prop::collection::vec(0.05f64..1.0, 5),
            others in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 50),
            radius in 0.01f64..0.5,
        ) {
            let cs: f64 = c.iter().sum();
            let c: Vec<f64> = c.iter().map(|v| v / cs).collect();
            let q = project_l2_ball_simplex(&y, &c, radius);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(q.iter().all(|v| *v >= 0.0));
            prop_assert!(l2_norm_diff(&q, &c) <= radius + 1e-12);
            let dq = l2_norm_diff(&q, &y);
            for o in others {
                let os: f64 = o.iter().sum();
                if os <= 0.0 { continue; }
                let o: Vec<f64> = o.iter().map(|v| v / os).collect();
                if l2_norm_diff(&o, &c) <= radius {
                    prop_assert!(dq <= l2_norm_diff(&o, &y) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn moment_projection_of_point_mass_on_uneven_grid() {
        let x = [0.809, 1.975, 2.872, 3.162, 3.589];
        let nom = [0.14, 0.244, 0.168, 0.119, 0.329];
        let mu: f64 = nom.iter().zip(&x).map(|(p, x)| p * x).sum();
        let var: f64 = nom.iter().zip(&x).map(|(p, x)| p * (x - mu) * (x - mu)).sum();
        let region = MomentRegion { mu, var, gamma1: 0.01, lb: 0.9, ub: 1.1 };
        let p = MomentProjector::new(&region, &x).unwrap().project(&[1.0, 0.0, 0.0, 0.0, 0.0], &nom).unwrap();
        let (d, s) = region.coordinates(&p, &x);
        assert!(region.violation(d, s) <= 1e-10);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn wasserstein1_linear_maximizer_beats_lattice() {
        let x = [0.0, 0.7, 1.1, 2.5];
        let spacings: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let center = [0.4, 0.1, 0.3, 0.2];
        for (g, radius) in [([0.3, -1.0, 2.0, 0.5], 0.3), ([1.0, 0.0, 0.0, 1.2], 0.1), ([0.0, 0.0, 1.0, 0.0], 5.0)] {
            let q = maximize_linear_wasserstein1(&g, &center, &x, radius);
            assert!(wasserstein1_cdf(&q, &center, &spacings) <= radius + 1e-12);
            assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            let value: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum();
            let res = 40;
            for a in 0..=res {
                for b in 0..=res - a {
                    for c in 0..=res - a - b {
                        let p = [a, b, c, res - a - b - c].map(|v| v as f64 / res as f64);
                        if wasserstein1_cdf(&p, &center, &spacings) <= radius {
                            let v: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
                            assert!(v <= value + 1e-12, "lattice {v} beats {value}");
                        }
                    }
                }
            }
        }
    }
}
