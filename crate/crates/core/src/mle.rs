//! Maximum-likelihood fitting of the random-coefficient model over levels of
//! `z`, likelihood-ratio testing of the slope covariance, and percentile
//! bootstrap intervals.
//!
//! The likelihood only needs, per distinct `z`, the count, the two sample
//! means and the 2x2 scatter matrix, so a fit never touches individual rows
//! after grouping.
//!
//! The optimiser works on an affine re-coordinatisation of the parameters:
//! each moment curve is expressed as a polynomial in the standardised level
//! `t = (z - z_c) / z_s` and divided by a pooled scale. The map is an exact
//! bijection with [`LinearModelParams`], which is what every public result
//! reports; it exists because raw `z` (around 70 for body weight) makes the
//! `z^2`, `z` and constant coefficients almost collinear.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::empirics::{percentile_interval, Dataset, Row};
use crate::linear::{ConditionalMoments, CovarianceParams, LinearModelParams};
use crate::report::KvReport;
use crate::rng;
use crate::simplex::{self, SimplexOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("need at least 2 distinct z levels, got {0}")]
    TooFewLevels(usize),
    #[error("conditional covariance at z = {0} is not positive definite")]
    NotPositiveDefinite(f64),
    #[error("data have degenerate (singular) covariance within levels of z")]
    Degenerate,
    #[error("every start failed to reach a feasible point")]
    AllStartsFailed,
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
    #[error("models were fitted to different data (n_obs {0} vs {1}, or differing content hash)")]
    DatasetMismatch(usize, usize),
    #[error("models are not nested: expected one full and one reduced fit")]
    NotNested,
    #[error("reduced model fits better than the full model by {0} log-likelihood units")]
    NestingViolated(f64),
    #[error("{failed} of {total} bootstrap refits failed (limit 20%)")]
    TooManyBootstrapFailures { failed: usize, total: usize },
}

pub const MIN_OBSERVATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub n_starts: usize,
    /// Convergence threshold on the spread of log-likelihood values across
    /// the simplex.
    pub tolerance: f64,
    /// Iteration cap for each simplex run.
    pub max_iter: usize,
    /// Standard deviation of start perturbations, in standardised coordinates.
    pub dispersion: f64,
    /// Fit with the slope covariance fixed at zero.
    pub reduced: bool,
    /// Simplex restarts from the incumbent after convergence.
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_starts: 32,
            tolerance: 1e-9,
            max_iter: 20_000,
            dispersion: 0.2,
            reduced: false,
            max_restarts: 6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn reduced(mut self, reduced: bool) -> Self {
        self.reduced = reduced;
        self
    }

    pub fn with_starts(mut self, n: usize) -> Self {
        self.n_starts = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_starts < 1 {
            return Err(FitError::BadConfig("n_starts must be at least 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(FitError::BadConfig("tolerance must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(FitError::BadConfig("max_iter must be at least 1".into()));
        }
        if !(self.dispersion >= 0.0 && self.dispersion.is_finite()) {
            return Err(FitError::BadConfig(
                "dispersion must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Sufficient statistics at one level of `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStats {
    pub z: f64,
    pub n: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    /// Sums of squared / cross deviations from the level means.
    pub sxx: f64,
    pub syy: f64,
    pub sxy: f64,
}

/// Rows collapsed to per-level sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedData {
    levels: Vec<LevelStats>,
    n_obs: usize,
}

fn level_key(z: f64) -> u64 {
    // -0.0 and 0.0 are the same level
    (z + 0.0).to_bits()
}

impl GroupedData {
    pub fn from_dataset(d: &Dataset) -> Self {
        Self::from_rows(d.rows().iter())
    }

    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a Row> + Clone) -> Self {
        let mut index: BTreeMap<u64, usize> = BTreeMap::new();
        let mut zs = Vec::new();
        for r in rows.clone() {
            index.entry(level_key(r.z)).or_insert_with(|| {
                zs.push(r.z);
                zs.len() - 1
            });
        }
        let k = zs.len();
        let mut n = vec![0usize; k];
        let mut sx = vec![0.0; k];
        let mut sy = vec![0.0; k];
        for r in rows.clone() {
            let i = index[&level_key(r.z)];
            n[i] += 1;
            sx[i] += r.x;
            sy[i] += r.y;
        }
        let mx: Vec<f64> = (0..k).map(|i| sx[i] / n[i] as f64).collect();
        let my: Vec<f64> = (0..k).map(|i| sy[i] / n[i] as f64).collect();
        let mut sxx = vec![0.0; k];
        let mut syy = vec![0.0; k];
        let mut sxy = vec![0.0; k];
        for r in rows {
            let i = index[&level_key(r.z)];
            let (dx, dy) = (r.x - mx[i], r.y - my[i]);
            sxx[i] += dx * dx;
            syy[i] += dy * dy;
            sxy[i] += dx * dy;
        }
        let mut levels: Vec<LevelStats> = (0..k)
            .map(|i| LevelStats {
                z: zs[i],
                n: n[i],
                mean_x: mx[i],
                mean_y: my[i],
                sxx: sxx[i],
                syy: syy[i],
                sxy: sxy[i],
            })
            .collect();
        levels.sort_by(|a, b| a.z.total_cmp(&b.z));
        let n_obs = n.iter().sum();
        Self { levels, n_obs }
    }

    pub fn levels(&self) -> &[LevelStats] {
        &self.levels
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
}

fn level_log_likelihood(l: &LevelStats, m: &ConditionalMoments) -> Option<f64> {
    let det = m.var_x * m.var_y - m.cov_xy * m.cov_xy;
    if !(m.var_x > 0.0 && m.var_y > 0.0 && det > 0.0) {
        return None;
    }
    let n = l.n as f64;
    let dx = l.mean_x - m.mean_x;
    let dy = l.mean_y - m.mean_y;
    let sxx = l.sxx + n * dx * dx;
    let syy = l.syy + n * dy * dy;
    let sxy = l.sxy + n * dx * dy;
    let quad = (m.var_y * sxx - 2.0 * m.cov_xy * sxy + m.var_x * syy) / det;
    Some(-n * (2.0 * PI).ln() - 0.5 * n * det.ln() - 0.5 * quad)
}

pub fn log_likelihood_grouped(g: &GroupedData, p: &LinearModelParams) -> Result<f64, FitError> {
    g.levels.iter().try_fold(0.0, |acc, l| {
        level_log_likelihood(l, &p.raw_moments(l.z))
            .map(|v| acc + v)
            .ok_or(FitError::NotPositiveDefinite(l.z))
    })
}

/// Sum of bivariate normal log-densities with moments from `p` at each row's `z`.
pub fn log_likelihood(data: &Dataset, p: &LinearModelParams) -> Result<f64, FitError> {
    log_likelihood_grouped(&GroupedData::from_dataset(data), p)
}

/// Row-by-row evaluation of [`log_likelihood`].
pub fn log_likelihood_ungrouped(data: &Dataset, p: &LinearModelParams) -> Result<f64, FitError> {
    data.rows().iter().try_fold(0.0, |acc, r| {
        let m = p.raw_moments(r.z);
        let det = m.var_x * m.var_y - m.cov_xy * m.cov_xy;
        if !(m.var_x > 0.0 && det > 0.0) {
            return Err(FitError::NotPositiveDefinite(r.z));
        }
        let (dx, dy) = (r.x - m.mean_x, r.y - m.mean_y);
        let quad = (m.var_y * dx * dx - 2.0 * m.cov_xy * dx * dy + m.var_x * dy * dy) / det;
        Ok(acc - (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad)
    })
}

/// Standardised optimiser coordinates (see module docs).
#[derive(Debug, Clone, Copy)]
struct Coords {
    zc: f64,
    zs: f64,
    sd_x: f64,
    sd_y: f64,
    v_x: f64,
    v_y: f64,
    v_c: f64,
    reduced: bool,
}

/// Quadratic `a z^2 + 2 b z + c` in raw `z` to `q2 t^2 + q1 t + q0` in `t`.
fn quad_to_std(a: f64, b: f64, c: f64, zc: f64, zs: f64) -> [f64; 3] {
    [
        a * zs * zs,
        zs * (2.0 * a * zc + 2.0 * b),
        a * zc * zc + 2.0 * b * zc + c,
    ]
}

fn quad_from_std(q: [f64; 3], zc: f64, zs: f64) -> (f64, f64, f64) {
    let a = q[0] / (zs * zs);
    let b = (q[1] / zs - 2.0 * a * zc) / 2.0;
    let c = q[2] - a * zc * zc - 2.0 * b * zc;
    (a, b, c)
}

impl Coords {
    fn new(g: &GroupedData, reduced: bool) -> Self {
        let n = g.n_obs as f64;
        let zc = g.levels.iter().map(|l| l.z * l.n as f64).sum::<f64>() / n;
        let zs = (g
            .levels
            .iter()
            .map(|l| (l.z - zc).powi(2) * l.n as f64)
            .sum::<f64>()
            / n)
            .sqrt();
        let v_x = g.levels.iter().map(|l| l.sxx).sum::<f64>() / n;
        let v_y = g.levels.iter().map(|l| l.syy).sum::<f64>() / n;
        let pos = |v: f64| if v > 0.0 { v } else { 1.0 };
        Self {
            zc,
            zs: pos(zs),
            sd_x: pos(v_x).sqrt(),
            sd_y: pos(v_y).sqrt(),
            v_x: pos(v_x),
            v_y: pos(v_y),
            v_c: (pos(v_x) * pos(v_y)).sqrt(),
            reduced,
        }
    }

    fn dim(&self) -> usize {
        if self.reduced {
            12
        } else {
            13
        }
    }

    fn theta_to_params(&self, th: &[f64]) -> LinearModelParams {
        let (zc, zs) = (self.zc, self.zs);
        let b_x = th[1] * self.sd_x / zs;
        let mu_x = th[0] * self.sd_x - b_x * zc;
        let b_y = th[3] * self.sd_y / zs;
        let mu_y = th[2] * self.sd_y - b_y * zc;
        let scale = |q: &[f64], v: f64| [q[0] * v, q[1] * v, q[2] * v];
        let (var_bx, cov_bxex, var_ex) = quad_from_std(scale(&th[4..7], self.v_x), zc, zs);
        let (var_by, cov_byey, var_ey) = quad_from_std(scale(&th[7..10], self.v_y), zc, zs);
        let cq = if self.reduced {
            [0.0, th[10] * self.v_c, th[11] * self.v_c]
        } else {
            scale(&th[10..13], self.v_c)
        };
        let (cov_bxby, cov_bxey, cov_exey) = quad_from_std(cq, zc, zs);
        LinearModelParams {
            mu_x,
            mu_y,
            b_x,
            b_y,
            cov: CovarianceParams {
                var_bx,
                var_by,
                var_ex,
                var_ey,
                cov_bxby: if self.reduced { 0.0 } else { cov_bxby },
                cov_exey,
                cov_bxex,
                cov_byey,
                cov_bxey,
                reduced: self.reduced,
            },
        }
    }

    fn params_to_theta(&self, p: &LinearModelParams) -> Vec<f64> {
        let (zc, zs) = (self.zc, self.zs);
        let c = &p.cov;
        let qx = quad_to_std(c.var_bx, c.cov_bxex, c.var_ex, zc, zs);
        let qy = quad_to_std(c.var_by, c.cov_byey, c.var_ey, zc, zs);
        let qc = quad_to_std(
            if self.reduced { 0.0 } else { c.cov_bxby },
            c.cov_bxey,
            c.cov_exey,
            zc,
            zs,
        );
        let mut th = vec![
            (p.mu_x + p.b_x * zc) / self.sd_x,
            p.b_x * zs / self.sd_x,
            (p.mu_y + p.b_y * zc) / self.sd_y,
            p.b_y * zs / self.sd_y,
            qx[0] / self.v_x,
            qx[1] / self.v_x,
            qx[2] / self.v_x,
            qy[0] / self.v_y,
            qy[1] / self.v_y,
            qy[2] / self.v_y,
        ];
        if !self.reduced {
            th.push(qc[0] / self.v_c);
        }
        th.push(qc[1] / self.v_c);
        th.push(qc[2] / self.v_c);
        th
    }
}

/// Weighted least-squares polynomial of degree `deg` (<= 2) in `t`; returns
/// `[c2, c1, c0]`.
fn weighted_poly(ts: &[f64], ys: &[f64], ws: &[f64], deg: usize) -> [f64; 3] {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for ((&t, &y), &w) in ts.iter().zip(ys).zip(ws) {
        let row = Vector3::new(t * t, t, 1.0);
        ata += w * row * row.transpose();
        atb += w * y * row;
    }
    let keep: Vec<usize> = match deg {
        0 => vec![2],
        1 => vec![1, 2],
        _ => vec![0, 1, 2],
    };
    let k = keep.len();
    let sub = nalgebra::DMatrix::from_fn(k, k, |i, j| ata[(keep[i], keep[j])]);
    let rhs = nalgebra::DVector::from_fn(k, |i, _| atb[keep[i]]);
    let mut out = [0.0; 3];
    if let Some(sol) = sub.lu().solve(&rhs) {
        for (i, &idx) in keep.iter().enumerate() {
            out[idx] = sol[i];
        }
    }
    out
}

fn nonnegative_variances(p: &LinearModelParams) -> bool {
    let c = &p.cov;
    [c.var_bx, c.var_by, c.var_ex, c.var_ey]
        .iter()
        .all(|v| *v >= 0.0)
}

/// Admissible parameters: non-negative variance terms and a positive definite
/// conditional covariance at every observed level.
fn feasible(g: &GroupedData, p: &LinearModelParams) -> bool {
    nonnegative_variances(p)
        && g.levels
            .iter()
            .all(|l| p.raw_moments(l.z).is_positive_definite())
}

/// Method-of-moments start: straight lines through the level means and
/// quadratics through the level (co)variances, shrunk towards the pooled
/// within-level covariance until positive definite at every level.
fn moment_start(g: &GroupedData, coords: &Coords) -> Result<Vec<f64>, FitError> {
    let ts: Vec<f64> = g
        .levels
        .iter()
        .map(|l| (l.z - coords.zc) / coords.zs)
        .collect();
    let ws: Vec<f64> = g.levels.iter().map(|l| l.n as f64).collect();
    let col = |f: &dyn Fn(&LevelStats) -> f64| g.levels.iter().map(f).collect::<Vec<f64>>();
    let deg = (g.levels.len() - 1).min(2);
    let mx = weighted_poly(&ts, &col(&|l| l.mean_x), &ws, deg.min(1));
    let my = weighted_poly(&ts, &col(&|l| l.mean_y), &ws, deg.min(1));
    let vx = weighted_poly(&ts, &col(&|l| l.sxx / l.n as f64), &ws, deg);
    let vy = weighted_poly(&ts, &col(&|l| l.syy / l.n as f64), &ws, deg);
    let cdeg = if coords.reduced { deg.min(1) } else { deg };
    let cv = weighted_poly(&ts, &col(&|l| l.sxy / l.n as f64), &ws, cdeg);

    let n = g.n_obs as f64;
    let pooled = [
        g.levels.iter().map(|l| l.sxx).sum::<f64>() / n,
        g.levels.iter().map(|l| l.syy).sum::<f64>() / n,
        g.levels.iter().map(|l| l.sxy).sum::<f64>() / n,
    ];
    if !(pooled[0] > 0.0
        && pooled[1] > 0.0
        && pooled[0] * pooled[1] - pooled[2] * pooled[2] > 1e-12 * pooled[0] * pooled[1])
    {
        return Err(FitError::Degenerate);
    }

    let build = |lambda: f64| -> Vec<f64> {
        let mix = |q: [f64; 3], flat: f64, v: f64| {
            [
                lambda * q[0] / v,
                lambda * q[1] / v,
                (lambda * q[2] + (1.0 - lambda) * flat) / v,
            ]
        };
        let qx = mix(vx, pooled[0], coords.v_x);
        let qy = mix(vy, pooled[1], coords.v_y);
        let qc = mix(cv, pooled[2], coords.v_c);
        let mut th = vec![
            mx[2] / coords.sd_x,
            mx[1] / coords.sd_x,
            my[2] / coords.sd_y,
            my[1] / coords.sd_y,
        ];
        th.extend_from_slice(&qx);
        th.extend_from_slice(&qy);
        if coords.reduced {
            th.extend_from_slice(&qc[1..]);
        } else {
            th.extend_from_slice(&qc);
        }
        th
    };
    let mut lambda = 1.0;
    for _ in 0..60 {
        let th = build(lambda);
        if feasible(g, &coords.theta_to_params(&th)) {
            return Ok(th);
        }
        lambda *= 0.5;
    }
    let th = build(0.0);
    if feasible(g, &coords.theta_to_params(&th)) {
        Ok(th)
    } else {
        Err(FitError::Degenerate)
    }
}

#[derive(Debug, Clone)]
struct StartOutcome {
    params: LinearModelParams,
    log_likelihood: f64,
    converged: bool,
    evaluations: usize,
}

fn run_start(
    g: &GroupedData,
    coords: &Coords,
    start: &[f64],
    cfg: &FitConfig,
) -> Option<StartOutcome> {
    let objective = |th: &[f64]| {
        let p = coords.theta_to_params(th);
        if !nonnegative_variances(&p) {
            return f64::INFINITY;
        }
        match log_likelihood_grouped(g, &p) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    if !objective(start).is_finite() {
        return None;
    }
    let opts = SimplexOptions {
        f_tol: cfg.tolerance,
        x_tol: 1e-10,
        max_iter: cfg.max_iter,
    };
    let steps = vec![0.05; start.len()];
    let mut res = simplex::minimize(objective, start, &steps, &opts);
    let mut evaluations = res.evaluations;
    for _ in 0..cfg.max_restarts {
        let again = simplex::minimize(objective, &res.x, &steps, &opts);
        evaluations += again.evaluations;
        let gain = res.f - again.f;
        if again.f <= res.f {
            res = again;
        }
        if gain <= cfg.tolerance {
            break;
        }
    }
    Some(StartOutcome {
        params: coords.theta_to_params(&res.x),
        log_likelihood: -res.f,
        converged: res.converged,
        evaluations,
    })
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: LinearModelParams,
    pub log_likelihood: f64,
    /// Final log-likelihood of every start (`None`: infeasible start).
    pub start_log_likelihoods: Vec<Option<f64>>,
    pub best_start: usize,
    pub converged: bool,
    pub n_obs: usize,
    pub n_levels: usize,
    pub data_hash: String,
    pub evaluations: usize,
}

impl FitResult {
    pub fn reduced(&self) -> bool {
        self.params.cov.reduced
    }

    pub fn model_name(&self) -> &'static str {
        if self.reduced() {
            "reduced"
        } else {
            "full"
        }
    }

    pub fn to_kv(&self) -> KvReport {
        let mut r = KvReport::new();
        r.push("model", self.model_name())
            .push("n_obs", self.n_obs)
            .push("n_levels", self.n_levels)
            .push("data_hash", &self.data_hash)
            .push_f64("log_likelihood", self.log_likelihood)
            .push("converged", self.converged)
            .push("best_start", self.best_start)
            .push("n_starts", self.start_log_likelihoods.len());
        for (name, v) in LinearModelParams::NAMES.iter().zip(self.params.values()) {
            if self.reduced() && *name == "cov_bxby" {
                continue;
            }
            r.push_f64(format!("param.{name}"), v);
        }
        for (i, ll) in self.start_log_likelihoods.iter().enumerate() {
            match ll {
                Some(v) => r.push_f64(format!("start.{i}.log_likelihood"), *v),
                None => r.push(format!("start.{i}.log_likelihood"), "failed"),
            };
        }
        r
    }

    pub fn render_text(&self, intervals: Option<&BootstrapSummary>) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} model, {} observations over {} levels of z",
            self.model_name(),
            self.n_obs,
            self.n_levels
        );
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>28}",
            "parameter", "estimate", "95% bootstrap interval"
        );
        for (name, v) in LinearModelParams::NAMES.iter().zip(self.params.values()) {
            if self.reduced() && *name == "cov_bxby" {
                let _ = writeln!(s, "{:<10} {:>14}", name, "n.a.");
                continue;
            }
            let ci = intervals
                .and_then(|b| b.interval(name))
                .map(|(lo, hi)| format!("({lo:.4}, {hi:.4})"))
                .unwrap_or_default();
            let _ = writeln!(s, "{:<10} {:>14.6} {:>28}", name, v, ci);
        }
        let _ = writeln!(s, "log likelihood {:.4}", self.log_likelihood);
        let ok = self
            .start_log_likelihoods
            .iter()
            .filter(|v| v.is_some())
            .count();
        let _ = writeln!(
            s,
            "best of {} starts (start {}, {} feasible), converged: {}",
            self.start_log_likelihoods.len(),
            self.best_start,
            ok,
            self.converged
        );
        s
    }
}

fn check_data(g: &GroupedData) -> Result<(), FitError> {
    if g.n_obs < MIN_OBSERVATIONS {
        return Err(FitError::TooFewObservations {
            need: MIN_OBSERVATIONS,
            got: g.n_obs,
        });
    }
    if g.levels.len() < 2 {
        return Err(FitError::TooFewLevels(g.levels.len()));
    }
    Ok(())
}

/// Multi-start simplex maximisation of the likelihood.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    let g = GroupedData::from_dataset(data);
    fit_grouped(&g, cfg, &[], data.content_hash())
}

/// Fits on pre-grouped data. `extra_starts` are tried after the `n_starts`
/// generated ones.
pub fn fit_grouped(
    g: &GroupedData,
    cfg: &FitConfig,
    extra_starts: &[LinearModelParams],
    data_hash: String,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    check_data(g)?;
    let coords = Coords::new(g, cfg.reduced);
    let base = moment_start(g, &coords)?;
    let dim = coords.dim();

    let mut starts: Vec<Option<Vec<f64>>> = (0..cfg.n_starts)
        .map(|k| {
            if k == 0 {
                return Some(base.clone());
            }
            let mut r = rng::stream(cfg.seed, k as u64);
            let mut scale = cfg.dispersion;
            for _ in 0..20 {
                let th: Vec<f64> = base
                    .iter()
                    .map(|b| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        b + scale * e
                    })
                    .collect();
                if feasible(g, &coords.theta_to_params(&th)) {
                    return Some(th);
                }
                scale *= 0.5;
            }
            None
        })
        .collect();
    for p in extra_starts {
        let mut p = *p;
        if cfg.reduced {
            p = p.to_reduced();
        } else {
            p.cov.reduced = false;
        }
        let th = coords.params_to_theta(&p);
        debug_assert_eq!(th.len(), dim);
        starts.push(Some(th));
    }

    let outcomes: Vec<Option<StartOutcome>> = starts
        .par_iter()
        .map(|s| s.as_ref().and_then(|th| run_start(g, &coords, th, cfg)))
        .collect();

    let mut best: Option<(usize, &StartOutcome)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(o) = o {
            if best.is_none_or(|(_, b)| o.log_likelihood > b.log_likelihood) {
                best = Some((i, o));
            }
        }
    }
    let (best_start, b) = best.ok_or(FitError::AllStartsFailed)?;
    Ok(FitResult {
        params: b.params,
        log_likelihood: b.log_likelihood,
        start_log_likelihoods: outcomes
            .iter()
            .map(|o| o.as_ref().map(|o| o.log_likelihood))
            .collect(),
        best_start,
        converged: b.converged,
        n_obs: g.n_obs,
        n_levels: g.levels.len(),
        data_hash,
        evaluations: outcomes.iter().flatten().map(|o| o.evaluations).sum(),
    })
}

/// Fits the reduced model, then the full model with the reduced optimum as
/// an extra start, so the full log-likelihood can never fall below it.
pub fn fit_nested(data: &Dataset, cfg: &FitConfig) -> Result<(FitResult, FitResult), FitError> {
    let g = GroupedData::from_dataset(data);
    let hash = data.content_hash();
    fit_nested_grouped(&g, cfg, hash)
}

pub fn fit_nested_grouped(
    g: &GroupedData,
    cfg: &FitConfig,
    hash: String,
) -> Result<(FitResult, FitResult), FitError> {
    let reduced = fit_grouped(g, &cfg.clone().reduced(true), &[], hash.clone())?;
    let full = fit_grouped(g, &cfg.clone().reduced(false), &[reduced.params], hash)?;
    Ok((full, reduced))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtResult {
    /// `2 (ll_full - ll_reduced)`.
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    /// Set when the statistic came out slightly negative (optimiser noise).
    pub negative_slack: bool,
}

/// Largest negative statistic attributed to optimiser noise.
pub const NESTING_SLACK: f64 = 1e-6;

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi_square_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        libm::erfc((x / 2.0).sqrt())
    }
}

pub fn lrt_from_log_likelihoods(ll_full: f64, ll_reduced: f64) -> Result<LrtResult, FitError> {
    let d = 2.0 * (ll_full - ll_reduced);
    if d < -NESTING_SLACK {
        return Err(FitError::NestingViolated(ll_reduced - ll_full));
    }
    Ok(LrtResult {
        statistic: d,
        df: 1,
        p_value: chi_square_1_sf(d),
        negative_slack: d < 0.0,
    })
}

pub fn likelihood_ratio_test(full: &FitResult, reduced: &FitResult) -> Result<LrtResult, FitError> {
    if full.n_obs != reduced.n_obs || full.data_hash != reduced.data_hash {
        return Err(FitError::DatasetMismatch(full.n_obs, reduced.n_obs));
    }
    if full.reduced() || !reduced.reduced() {
        return Err(FitError::NotNested);
    }
    lrt_from_log_likelihoods(full.log_likelihood, reduced.log_likelihood)
}

impl LrtResult {
    pub fn to_kv(&self) -> KvReport {
        let mut r = KvReport::new();
        r.push_f64("lrt.statistic", self.statistic)
            .push("lrt.df", self.df)
            .push_f64("lrt.p_value", self.p_value)
            .push("lrt.negative_slack", self.negative_slack);
        r
    }

    pub fn render_text(&self) -> String {
        format!(
            "likelihood-ratio test: D = {:.2}, df = {}, p = {:.3e}{}\n",
            self.statistic,
            self.df,
            self.p_value,
            if self.negative_slack {
                " (negative within optimiser slack)"
            } else {
                ""
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSummary {
    pub point: FitResult,
    /// Parameter vectors of the successful refits, in resample order.
    pub estimates: Vec<[f64; 13]>,
    pub n_resamples: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub level: f64,
    intervals: Vec<(f64, f64)>,
}

impl BootstrapSummary {
    pub fn interval(&self, name: &str) -> Option<(f64, f64)> {
        LinearModelParams::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.intervals[i])
    }

    /// Bootstrap standard deviation of a parameter.
    pub fn std_error(&self, name: &str) -> Option<f64> {
        let i = LinearModelParams::NAMES.iter().position(|n| *n == name)?;
        let k = self.estimates.len() as f64;
        let mean = self.estimates.iter().map(|e| e[i]).sum::<f64>() / k;
        let var = self
            .estimates
            .iter()
            .map(|e| (e[i] - mean).powi(2))
            .sum::<f64>()
            / (k - 1.0);
        Some(var.sqrt())
    }

    pub fn to_kv(&self) -> KvReport {
        let mut r = KvReport::new();
        r.push("bootstrap.n_resamples", self.n_resamples)
            .push("bootstrap.n_failed", self.n_failed)
            .push("bootstrap.seed", self.seed)
            .push_f64("bootstrap.level", self.level);
        for (name, (lo, hi)) in LinearModelParams::NAMES.iter().zip(&self.intervals) {
            if self.point.reduced() && *name == "cov_bxby" {
                continue;
            }
            r.push_f64(format!("bootstrap.{name}.lower"), *lo);
            r.push_f64(format!("bootstrap.{name}.upper"), *hi);
        }
        r
    }
}

/// Percentile bootstrap: resample rows with replacement, refit, and take the
/// 2.5% / 97.5% quantiles of each parameter. Resample `r` uses random stream
/// `r`, and each refit also tries the full-data estimate as a start.
pub fn bootstrap(
    data: &Dataset,
    cfg: &FitConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary, FitError> {
    if n_resamples < 2 {
        return Err(FitError::BadConfig(
            "need at least 2 bootstrap resamples".into(),
        ));
    }
    let point = fit(data, cfg)?;
    let rows = data.rows();
    let n = rows.len();
    let fits: Vec<Option<[f64; 13]>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rg = rng::stream(seed, r as u64);
            let picks: Vec<usize> = (0..n).map(|_| rg.random_range(0..n)).collect();
            let g = GroupedData::from_rows(picks.iter().map(|&i| &rows[i]));
            let sub_cfg = cfg
                .clone()
                .with_seed(rng::derive_seed(cfg.seed, r as u64 + 1));
            fit_grouped(&g, &sub_cfg, &[point.params], String::new())
                .ok()
                .map(|f| f.params.values())
        })
        .collect();
    let n_failed = fits.iter().filter(|f| f.is_none()).count();
    if n_failed * 5 > n_resamples {
        return Err(FitError::TooManyBootstrapFailures {
            failed: n_failed,
            total: n_resamples,
        });
    }
    let estimates: Vec<[f64; 13]> = fits.into_iter().flatten().collect();
    let level = 0.95;
    let intervals = (0..13)
        .map(|i| {
            let mut v: Vec<f64> = estimates.iter().map(|e| e[i]).collect();
            percentile_interval(&mut v, level)
        })
        .collect();
    Ok(BootstrapSummary {
        point,
        estimates,
        n_resamples,
        n_failed,
        seed,
        level,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{balanced_levels, integer_levels, simulate};

    fn identity_params() -> LinearModelParams {
        LinearModelParams {
            mu_x: 0.0,
            mu_y: 0.0,
            b_x: 0.0,
            b_y: 0.0,
            cov: CovarianceParams {
                var_bx: 0.0,
                var_by: 0.0,
                var_ex: 1.0,
                var_ey: 1.0,
                cov_bxby: 0.0,
                cov_exey: 0.0,
                cov_bxex: 0.0,
                cov_byey: 0.0,
                cov_bxey: 0.0,
                reduced: false,
            },
        }
    }

    #[test]
    fn standard_normal_at_mode() {
        let d = Dataset::from_rows(vec![Row {
            z: 3.0,
            x: 0.0,
            y: 0.0,
        }])
        .unwrap();
        let ll = log_likelihood(&d, &identity_params()).unwrap();
        assert!((ll + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn coordinate_map_round_trips() {
        let d = simulate(
            &LinearModelParams::strength_full(),
            &balanced_levels(&integer_levels(64, 75), 30),
            1,
        )
        .unwrap();
        let g = GroupedData::from_dataset(&d);
        for reduced in [false, true] {
            let c = Coords::new(&g, reduced);
            let p = if reduced {
                LinearModelParams::strength_full().to_reduced()
            } else {
                LinearModelParams::strength_full()
            };
            let back = c.theta_to_params(&c.params_to_theta(&p));
            for (a, b) in back.values().iter().zip(p.values()) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
            assert_eq!(back.cov.reduced, reduced);
        }
    }

    #[test]
    fn guards() {
        let few = Dataset::from_rows(
            (0..10)
                .map(|i| Row {
                    z: (i % 2) as f64,
                    x: i as f64,
                    y: 1.0,
                })
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            fit(&few, &FitConfig::default()),
            Err(FitError::TooFewObservations { got: 10, .. })
        ));
        let one_level = Dataset::from_rows(
            (0..30)
                .map(|i| Row {
                    z: 1.0,
                    x: i as f64,
                    y: (i * i) as f64,
                })
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            fit(&one_level, &FitConfig::default()),
            Err(FitError::TooFewLevels(1))
        ));
        let identical = Dataset::from_rows(
            (0..30)
                .map(|i| Row {
                    z: (i % 3) as f64,
                    x: 1.0,
                    y: 2.0,
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(
            fit(&identical, &FitConfig::default()),
            Err(FitError::Degenerate)
        );
        assert!(bootstrap(&identical, &FitConfig::default(), 10, 1).is_err());
        assert!(matches!(
            fit(&identical, &FitConfig::default().with_starts(0)),
            Err(FitError::BadConfig(_))
        ));
    }

    #[test]
    fn lrt_arithmetic() {
        let r = lrt_from_log_likelihoods(100.0 + 6.825, 100.0).unwrap();
        assert!((r.statistic - 13.65).abs() < 1e-9);
        assert!((r.p_value - 2.2e-4).abs() < 5e-5, "{}", r.p_value);
        let r = lrt_from_log_likelihoods(5.0, 5.0).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = lrt_from_log_likelihoods(3.841 / 2.0, 0.0).unwrap();
        assert!((r.p_value - 0.05).abs() < 1e-4);
        let r = lrt_from_log_likelihoods(1.0 - 1e-7, 1.0).unwrap();
        assert!(r.negative_slack);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(
            lrt_from_log_likelihoods(0.0, 1.0),
            Err(FitError::NestingViolated(_))
        ));
    }

    #[test]
    fn small_fit_nested_and_reported() {
        let d = simulate(
            &LinearModelParams::strength_full(),
            &balanced_levels(&integer_levels(64, 75), 200),
            9,
        )
        .unwrap();
        let cfg = FitConfig::default().with_starts(4).with_seed(2);
        let (full, reduced) = fit_nested(&d, &cfg).unwrap();
        assert!(full.log_likelihood >= reduced.log_likelihood);
        assert_eq!(full.start_log_likelihoods.len(), 5);
        let lrt = likelihood_ratio_test(&full, &reduced).unwrap();
        assert!(lrt.statistic >= 0.0);
        assert!(matches!(
            likelihood_ratio_test(&reduced, &full),
            Err(FitError::NotNested)
        ));
        let kv = full.to_kv();
        assert_eq!(kv.get("model"), Some("full"));
        assert_eq!(kv.get_f64("log_likelihood").unwrap(), full.log_likelihood);
        assert!(reduced.to_kv().get("param.cov_bxby").is_none());
        let direct = log_likelihood(&d, &full.params).unwrap();
        assert!((direct - full.log_likelihood).abs() < 1e-6);
    }
}
