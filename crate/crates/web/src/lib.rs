//! Browser bindings: the mixture example, graph queries and model moment
//! curves. Each binding returns a JSON string; the plain functions below do
//! the work and are what native tests call.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use effcov::binary::{self, MixtureExampleSpec, ReportMode};
use effcov::empirics::{moment_curve, Binning};
use effcov::linear::{self, LinearModelParams};
use effcov::CausalDag;

#[derive(Serialize)]
struct MixtureOut {
    tables: Vec<[[f64; 2]; 2]>,
    marginal: [[f64; 2]; 2],
    stratum_or: Vec<f64>,
    average_or: f64,
    marginal_or: f64,
    causal_or: f64,
}

/// `alphas` is `value:weight` pairs separated by commas, e.g. `0.1:0.5,0.2:0.5`.
pub fn mixture_json(
    alphas: &str,
    base_x: f64,
    base_y: f64,
    p_z1: f64,
    rounded: bool,
) -> Result<String, String> {
    let pairs = alphas
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (a, w) = s
                .split_once(':')
                .ok_or(format!("expected value:weight, got `{s}`"))?;
            let a: f64 = a.trim().parse().map_err(|_| format!("bad alpha `{a}`"))?;
            let w: f64 = w.trim().parse().map_err(|_| format!("bad weight `{w}`"))?;
            Ok((a, w))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let spec =
        MixtureExampleSpec::from_f64(&pairs, base_x, base_y, p_z1).map_err(|e| e.to_string())?;
    let mode = if rounded {
        ReportMode::RoundedTable
    } else {
        ReportMode::Exact
    };
    let m = binary::summary_measures(&spec, mode).map_err(|e| e.to_string())?;
    let out = MixtureOut {
        tables: m.stratum_tables.values().map(|t| t.to_f64()).collect(),
        marginal: m.marginal_table.to_f64(),
        stratum_or: m.stratum_or.values().copied().collect(),
        average_or: m.average_or,
        marginal_or: m.marginal_or,
        causal_or: binary::to_f64(&m.causal_rr),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct GraphOut {
    paths: Vec<GraphPath>,
    backdoor_blocked: bool,
    d_separated: bool,
}

#[derive(Serialize)]
struct GraphPath {
    text: String,
    backdoor: bool,
    blocked: bool,
}

/// Paths between `x` and `y`, which are backdoor paths, and whether the
/// comma-separated `given` set blocks them.
pub fn graph_json(text: &str, x: &str, y: &str, given: &str) -> Result<String, String> {
    let g = CausalDag::parse(text).map_err(|e| e.to_string())?;
    let given: Vec<&str> = given
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let paths = g.enumerate_paths(x, y).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        out.push(GraphPath {
            text: p.to_string(),
            backdoor: p.starts_with_incoming() && p.colliders().is_empty(),
            blocked: g.path_blocked(p, &given).map_err(|e| e.to_string())?,
        });
    }
    let res = GraphOut {
        paths: out,
        backdoor_blocked: g
            .backdoor_blocked(x, y, &given)
            .map_err(|e| e.to_string())?,
        d_separated: g
            .d_separated(&[x], &[y], &given)
            .map_err(|e| e.to_string())?,
    };
    serde_json::to_string(&res).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CurvePoint {
    z: f64,
    model_cov: f64,
    reduced_cov: f64,
    observed_cov: f64,
    lower: f64,
    upper: f64,
}

/// Closed-form conditional covariance of the full model (with the slope
/// covariance replaced by `cov_bxby`) and of its reduced version, next to
/// the covariance observed in `per_level` simulated units per level.
pub fn covariance_curve_json(cov_bxby: f64, per_level: usize, seed: u64) -> Result<String, String> {
    if !(1..=20_000).contains(&per_level) {
        return Err("units per level must be between 1 and 20000".into());
    }
    let mut p = LinearModelParams::strength_full();
    p.cov.cov_bxby = cov_bxby;
    let reduced = p.to_reduced();
    let levels = linear::integer_levels(64, 75);
    let d = linear::simulate(&p, &linear::balanced_levels(&levels, per_level), seed)
        .map_err(|e| e.to_string())?;
    let curve = moment_curve(&d, Binning::ExactLevels, 100, seed).map_err(|e| e.to_string())?;
    let points: Vec<CurvePoint> = curve
        .bins
        .iter()
        .map(|b| CurvePoint {
            z: b.z,
            model_cov: p.raw_moments(b.z).cov_xy,
            reduced_cov: reduced.raw_moments(b.z).cov_xy,
            observed_cov: b.cov_xy.estimate,
            lower: b.cov_xy.lower,
            upper: b.cov_xy.upper,
        })
        .collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn mixture(
    alphas: &str,
    base_x: f64,
    base_y: f64,
    p_z1: f64,
    rounded: bool,
) -> Result<String, JsValue> {
    mixture_json(alphas, base_x, base_y, p_z1, rounded).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn graph_query(text: &str, x: &str, y: &str, given: &str) -> Result<String, JsValue> {
    graph_json(text, x, y, given).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn covariance_curve(cov_bxby: f64, per_level: u32, seed: u32) -> Result<String, JsValue> {
    covariance_curve_json(cov_bxby, per_level as usize, seed as u64)
        .map_err(|e| JsValue::from_str(&e))
}
