use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{LaplaceEngine, LatentModel, ModeFit};
use crate::config::{GridConfig, GridStrategy};
use crate::error::{Error, Result};
use crate::parallel;

/// Result of evaluating `log p̃(θ | y)` at one θ, plus whatever the
/// objective wants to keep for warm starts and later use.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub log_post: f64,
    pub state: S,
}

/// Unnormalized log posterior of the hyperparameters in internal scale.
pub trait HyperObjective: Sync {
    type State: Clone + Send + Sync;

    fn dim(&self) -> usize;

    fn evaluate(&self, theta: &[f64], warm: Option<&Self::State>) -> Result<Evaluation<Self::State>>;
}

impl<M: LatentModel> HyperObjective for LaplaceEngine<'_, M> {
    type State = ModeFit;

    fn dim(&self) -> usize {
        self.model().hyper_dim()
    }

    fn evaluate(&self, theta: &[f64], warm: Option<&ModeFit>) -> Result<Evaluation<ModeFit>> {
        let fit = self.find_mode(theta, warm.map(|w| w.mode.as_slice()))?;
        Ok(Evaluation { log_post: fit.log_posterior(), state: fit })
    }
}

#[derive(Debug, Clone)]
pub struct MaximizeResult<S> {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub state: S,
    pub iterations: usize,
    pub evaluations: usize,
}

/// BFGS ascent with central finite-difference gradients, Armijo
/// backtracking and a unit cap on the step's ∞-norm.
pub fn maximize<O: HyperObjective>(
    obj: &O,
    theta0: &[f64],
    cfg: &GridConfig,
) -> Result<MaximizeResult<O::State>> {
    let d = obj.dim();
    if theta0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta0.len() });
    }
    let mut evaluations = 1;
    let mut cur = obj.evaluate(theta0, None)?;
    let mut theta = theta0.to_vec();
    if d == 0 {
        return Ok(MaximizeResult {
            theta,
            log_post: cur.log_post,
            state: cur.state,
            iterations: 0,
            evaluations,
        });
    }

    let h = cfg.fd_step;
    let gradient = |theta: &[f64], state: &O::State, count: &mut usize| -> Result<DVector<f64>> {
        let mut g = DVector::zeros(d);
        for i in 0..d {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[i] += h;
            tm[i] -= h;
            let fp = obj.evaluate(&tp, Some(state))?.log_post;
            let fm = obj.evaluate(&tm, Some(state))?.log_post;
            *count += 2;
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    };

    let mut g = gradient(&theta, &cur.state, &mut evaluations)?;
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut first = true;
    for iter in 1..=cfg.max_ascent_iter {
        let mut p = &hinv * &g;
        if p.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(d, d);
            p = g.clone();
        }
        let cap = p.amax();
        if cap > 1.0 {
            p /= cap;
        }
        let slope = p.dot(&g);

        let mut t = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            evaluations += 1;
            if let Ok(e) = obj.evaluate(&cand, Some(&cur.state)) {
                if e.log_post.is_finite() && e.log_post >= cur.log_post + 1e-4 * t * slope {
                    break Some((cand, e));
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                break None;
            }
        };
        let Some((cand, e)) = accepted else {
            // no ascent possible at finite-difference resolution
            return Ok(MaximizeResult { theta, log_post: cur.log_post, state: cur.state, iterations: iter, evaluations });
        };
        if cand.iter().any(|v| v.abs() > 25.0) {
            return Err(Error::AscentDivergence(format!(
                "hyperparameters left the plausible range at iteration {iter}: {cand:?}; \
                 review the priors and whether the data identify every component"
            )));
        }
        let s = DVector::from_iterator(d, cand.iter().zip(&theta).map(|(a, b)| a - b));
        theta = cand;
        cur = e;
        let step = s.amax();
        if step <= cfg.ascent_tol {
            return Ok(MaximizeResult { theta, log_post: cur.log_post, state: cur.state, iterations: iter, evaluations });
        }
        let g_new = gradient(&theta, &cur.state, &mut evaluations)?;
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if first {
                hinv = DMatrix::identity(d, d) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = left * &hinv * right + rho * &s * s.transpose();
        }
        g = g_new;
    }
    Err(Error::AscentDivergence(format!(
        "no convergence within {} ascent iterations; review the priors and model identifiability",
        cfg.max_ascent_iter
    )))
}

/// Finite-difference Hessian of the log posterior at `theta`.
pub(crate) fn hessian<O: HyperObjective>(
    obj: &O,
    theta: &[f64],
    f0: f64,
    state: &O::State,
    h: f64,
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let at = |shift: &[(usize, f64)]| -> Result<f64> {
        let mut t = theta.to_vec();
        for &(i, v) in shift {
            t[i] += v;
        }
        Ok(obj.evaluate(&t, Some(state))?.log_post)
    };
    let mut jobs: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..d {
        jobs.push(vec![(i, h)]);
        jobs.push(vec![(i, -h)]);
        for j in 0..i {
            for (a, b) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                jobs.push(vec![(i, a), (j, b)]);
            }
        }
    }
    let vals = parallel::map(&jobs, |s| at(s)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut hm = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        hm[(i, i)] = (vals[k] - 2.0 * f0 + vals[k + 1]) / (h * h);
        k += 2;
        for j in 0..i {
            let v = (vals[k] - vals[k + 1] - vals[k + 2] + vals[k + 3]) / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
            k += 4;
        }
    }
    Ok(hm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    Single,
    Grid,
    Ccd,
}

#[derive(Debug, Clone)]
pub struct GridPoint<S> {
    /// Standardized coordinates: `θ = θ* + S z`.
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_post: f64,
    /// Integration weight of the design point before the posterior factor.
    pub design_weight: f64,
    /// Normalized posterior weight.
    pub weight: f64,
    pub state: S,
}

#[derive(Debug, Clone)]
pub struct HyperGrid<S> {
    pub design: Design,
    pub mode: Vec<f64>,
    pub mode_log_post: f64,
    /// Negative Hessian of the log posterior at the mode.
    pub precision: DMatrix<f64>,
    /// `S` with `S Sᵀ ≈` posterior covariance of θ.
    pub scale: DMatrix<f64>,
    pub step: f64,
    pub points: Vec<GridPoint<S>>,
    pub rejected: usize,
    /// Estimate of `log p(y)`.
    pub log_mlik: f64,
}

impl<S> HyperGrid<S> {
    pub fn weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.weight).collect()
    }

    /// Replaces every point's state, preserving order and weights.
    pub fn try_map_states<T, F>(self, f: F) -> Result<HyperGrid<T>>
    where
        S: Send + Sync,
        T: Send,
        F: Fn(&GridPoint<S>) -> Result<T> + Sync + Send,
    {
        let mapped = parallel::map(&self.points, &f).into_iter().collect::<Result<Vec<T>>>()?;
        let points = self
            .points
            .into_iter()
            .zip(mapped)
            .map(|(p, state)| GridPoint {
                z: p.z,
                theta: p.theta,
                log_post: p.log_post,
                design_weight: p.design_weight,
                weight: p.weight,
                state,
            })
            .collect();
        Ok(HyperGrid {
            design: self.design,
            mode: self.mode,
            mode_log_post: self.mode_log_post,
            precision: self.precision,
            scale: self.scale,
            step: self.step,
            points,
            rejected: self.rejected,
            log_mlik: self.log_mlik,
        })
    }
}

/// Normalizes `design_weight · exp(log_post)` over the points, returning
/// the log of the unnormalized sum (relative to `max log_post`) and the
/// maximum itself.
pub(crate) fn normalize<S>(points: &mut [GridPoint<S>]) -> (f64, f64) {
    let max = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = points.iter().map(|p| p.design_weight * (p.log_post - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    for (p, r) in points.iter_mut().zip(raw) {
        p.weight = r / total;
    }
    (total.ln(), max)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Explores the hyperparameter posterior around the mode found by
/// [`maximize`]: a standardized axis-aligned grid for up to three
/// hyperparameters, a central composite design beyond (or as configured).
pub fn explore_grid<O: HyperObjective>(
    obj: &O,
    mode: MaximizeResult<O::State>,
    cfg: &GridConfig,
) -> Result<HyperGrid<O::State>> {
    let d = mode.theta.len();
    if d == 0 {
        let mut points = vec![GridPoint {
            z: Vec::new(),
            theta: Vec::new(),
            log_post: mode.log_post,
            design_weight: 1.0,
            weight: 1.0,
            state: mode.state,
        }];
        normalize(&mut points);
        return Ok(HyperGrid {
            design: Design::Single,
            mode: Vec::new(),
            mode_log_post: mode.log_post,
            precision: DMatrix::zeros(0, 0),
            scale: DMatrix::zeros(0, 0),
            step: cfg.step,
            points,
            rejected: 0,
            log_mlik: mode.log_post,
        });
    }

    let neg_h = -hessian(obj, &mode.theta, mode.log_post, &mode.state, cfg.hessian_step)?;
    let precision = (&neg_h + neg_h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(precision.clone());
    let top = eig.eigenvalues.amax().max(1e-12);
    let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.abs().max(1e-6 * top)).collect();
    let mut scale = eig.eigenvectors.clone();
    for (j, &l) in lambdas.iter().enumerate() {
        let f = l.powf(-0.5);
        for i in 0..d {
            scale[(i, j)] *= f;
        }
    }
    let log_det_scale: f64 = lambdas.iter().map(|l| -0.5 * l.ln()).sum();
    let theta_at = |z: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| mode.theta[i] + (0..d).map(|j| scale[(i, j)] * z[j]).sum::<f64>())
            .collect()
    };

    let strategy = match cfg.strategy {
        GridStrategy::Auto if d <= 3 => Design::Grid,
        GridStrategy::Auto => Design::Ccd,
        GridStrategy::Grid => Design::Grid,
        GridStrategy::Ccd => Design::Ccd,
    };

    let evaluate = |z: &Vec<f64>| -> Option<(Vec<f64>, Evaluation<O::State>)> {
        let theta = theta_at(z);
        obj.evaluate(&theta, Some(&mode.state)).ok().filter(|e| e.log_post.is_finite()).map(|e| (theta, e))
    };

    let mut evaluated: Vec<(Vec<f64>, Vec<f64>, f64, Evaluation<O::State>)> = Vec::new();
    let mut failed = 0usize;
    evaluated.push((vec![0.0; d], mode.theta.clone(), 1.0, Evaluation {
        log_post: mode.log_post,
        state: mode.state.clone(),
    }));

    match strategy {
        Design::Grid => {
            let delta = cfg.step;
            let max_k = ((2.0 * cfg.drop).sqrt() / delta).ceil() as i32 + 6;
            // per-axis drops at integer offsets, walked outward until the
            // drop threshold is crossed
            let mut axis: Vec<BTreeMap<i32, f64>> = vec![BTreeMap::new(); d];
            for (i, walk) in axis.iter_mut().enumerate() {
                walk.insert(0, 0.0);
                for dir in [1i32, -1] {
                    for k in 1..=max_k {
                        let mut z = vec![0.0; d];
                        z[i] = (dir * k) as f64 * delta;
                        match evaluate(&z) {
                            Some((theta, e)) => {
                                let drop = mode.log_post - e.log_post;
                                if drop > cfg.drop {
                                    break;
                                }
                                walk.insert(dir * k, drop.max(0.0));
                                evaluated.push((z, theta, 1.0, e));
                            }
                            None => {
                                failed += 1;
                                break;
                            }
                        }
                    }
                }
            }
            // off-axis points whose additive drop prediction stays near the
            // threshold
            let mut candidates: Vec<Vec<f64>> = Vec::new();
            let ranges: Vec<Vec<(i32, f64)>> =
                axis.iter().map(|m| m.iter().map(|(&k, &v)| (k, v)).collect()).collect();
            let mut idx = vec![0usize; d];
            'outer: loop {
                let nonzero = idx.iter().zip(&ranges).filter(|(&j, r)| r[j].0 != 0).count();
                if nonzero >= 2 {
                    let predicted: f64 = idx.iter().zip(&ranges).map(|(&j, r)| r[j].1).sum();
                    if predicted <= cfg.drop + 1.0 {
                        candidates.push(
                            idx.iter().zip(&ranges).map(|(&j, r)| r[j].0 as f64 * delta).collect(),
                        );
                    }
                }
                for a in 0..d {
                    idx[a] += 1;
                    if idx[a] < ranges[a].len() {
                        continue 'outer;
                    }
                    idx[a] = 0;
                }
                break;
            }
            for (z, res) in candidates.iter().zip(parallel::map(&candidates, evaluate)) {
                match res {
                    Some((theta, e)) => evaluated.push((z.clone(), theta, 1.0, e)),
                    None => failed += 1,
                }
            }
        }
        Design::Ccd => {
            let f0 = cfg.ccd_f0;
            let r = f0 * (d as f64).sqrt();
            let n_points = 1 + 2 * d + (1usize << d);
            let two_pi = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
            let w0 = two_pi * (1.0 - 1.0 / (f0 * f0));
            let w = two_pi * (0.5 * r * r).exp() / (f0 * f0 * (n_points - 1) as f64);
            evaluated[0].2 = w0;
            let mut design: Vec<Vec<f64>> = Vec::new();
            for i in 0..d {
                for s in [r, -r] {
                    let mut z = vec![0.0; d];
                    z[i] = s;
                    design.push(z);
                }
            }
            for mask in 0..(1usize << d) {
                design.push((0..d).map(|i| if mask >> i & 1 == 1 { -f0 } else { f0 }).collect());
            }
            for (z, res) in design.iter().zip(parallel::map(&design, evaluate)) {
                match res {
                    Some((theta, e)) => evaluated.push((z.clone(), theta, w, e)),
                    None => failed += 1,
                }
            }
        }
        Design::Single => unreachable!(),
    }

    let best = evaluated.iter().map(|e| e.3.log_post).fold(f64::NEG_INFINITY, f64::max);
    let total = evaluated.len();
    let mut points: Vec<GridPoint<O::State>> = evaluated
        .into_iter()
        .filter(|e| best - e.3.log_post <= cfg.drop)
        .map(|(z, theta, design_weight, e)| GridPoint {
            z,
            theta,
            log_post: e.log_post,
            design_weight,
            weight: 0.0,
            state: e.state,
        })
        .collect();
    let rejected = failed + total - points.len();
    points.sort_by(|a, b| lex_cmp(&a.z, &b.z));
    let (log_sum, max) = normalize(&mut points);
    let log_design = match strategy {
        Design::Grid => d as f64 * cfg.step.ln(),
        _ => 0.0,
    };
    let log_mlik = log_det_scale + log_design + log_sum + max;

    Ok(HyperGrid {
        design: strategy,
        mode: mode.theta,
        mode_log_post: mode.log_post,
        precision,
        scale,
        step: cfg.step,
        points,
        rejected,
        log_mlik,
    })
}
