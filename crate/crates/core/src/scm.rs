//! Structural causal models over a population of units.
//!
//! Each unit first draws its own parameters (random coefficients, effect
//! modulators), then produces one or more observations by evaluating the
//! node assignments in topological order. Unit `u` draws everything from
//! random stream `u`, so a population is reproducible from its seed no
//! matter how the work is split across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary::{to_f64, MixtureExampleSpec};
use crate::empirics::{Dataset, Row};
use crate::graph::{CausalDag, GraphError};
use crate::linear::LinearModelParams;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {0} has no assignment")]
    MissingAssignment(String),
    #[error("assignment given for {0}, which is not in the graph")]
    ExtraAssignment(String),
    #[error("assignment of {node} uses inputs {used:?} but its graph parents are {parents:?}")]
    ParentMismatch {
        node: String,
        used: Vec<String>,
        parents: Vec<String>,
    },
    #[error("node {node} refers to unknown unit parameter {name}")]
    UnknownUnitParam { node: String, name: String },
    #[error("probability {value} at node {node} (unit {unit}) is outside [0, 1]")]
    ProbabilityOutOfRange { node: String, value: f64, unit: u64 },
    #[error("non-finite value at node {node} (unit {unit})")]
    NonFinite { node: String, unit: u64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{y} is an ancestor of {x}")]
    NotDownstream { x: String, y: String },
    #[error("no stratum contains both treatment levels")]
    NoUsableStratum,
    #[error("number of units and observations per unit must be positive")]
    Empty,
    #[error("could not parse model: {0}")]
    Parse(String),
}

/// Coefficient of a term: a number, or the name of a unit parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Fixed(f64),
    Param(String),
}

/// `coef * prod(inputs)`; an empty input list is a plain coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: Coef,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl Term {
    pub fn new(coef: f64, inputs: &[&str]) -> Self {
        Self {
            coef: Coef::Fixed(coef),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn param(name: &str, inputs: &[&str]) -> Self {
        Self {
            coef: Coef::Param(name.to_string()),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assignment {
    Constant {
        value: f64,
    },
    /// The value of a unit parameter, constant within a unit.
    UnitParam {
        name: String,
    },
    /// `intercept + sum(terms) + noise_sd * N(0, 1)`.
    LinearGaussian {
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        terms: Vec<Term>,
        #[serde(default)]
        noise_sd: f64,
    },
    /// 1 with probability `intercept + sum(terms)`, else 0.
    BernoulliLinearProb {
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        terms: Vec<Term>,
    },
    /// Exogenous draw from a finite distribution.
    Categorical {
        values: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Assignment {
    fn terms(&self) -> &[Term] {
        match self {
            Assignment::LinearGaussian { terms, .. }
            | Assignment::BernoulliLinearProb { terms, .. } => terms,
            _ => &[],
        }
    }

    fn inputs(&self) -> BTreeSet<&str> {
        self.terms()
            .iter()
            .flat_map(|t| t.inputs.iter().map(String::as_str))
            .collect()
    }

    fn params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .terms()
            .iter()
            .filter_map(|t| match &t.coef {
                Coef::Param(p) => Some(p.as_str()),
                Coef::Fixed(_) => None,
            })
            .collect();
        if let Assignment::UnitParam { name } = self {
            out.push(name);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub values: Vec<f64>,
    pub weight: f64,
}

/// Distribution of the per-unit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitParamSpec {
    #[default]
    None,
    Discrete {
        names: Vec<String>,
        atoms: Vec<Atom>,
    },
    Gaussian {
        names: Vec<String>,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
}

impl UnitParamSpec {
    pub fn names(&self) -> &[String] {
        match self {
            UnitParamSpec::None => &[],
            UnitParamSpec::Discrete { names, .. } | UnitParamSpec::Gaussian { names, .. } => names,
        }
    }

    fn validate(&self) -> Result<(), ScmError> {
        let bad = |m: String| Err(ScmError::Invalid(m));
        let names = self.names();
        if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
            return bad("duplicate unit parameter name".into());
        }
        match self {
            UnitParamSpec::None => Ok(()),
            UnitParamSpec::Discrete { names, atoms } => {
                if atoms.is_empty() {
                    return bad("discrete unit parameters need at least one atom".into());
                }
                let mut total = 0.0;
                for a in atoms {
                    if a.values.len() != names.len() {
                        return bad(format!(
                            "atom has {} values for {} names",
                            a.values.len(),
                            names.len()
                        ));
                    }
                    if a.weight.is_nan() || a.weight < 0.0 || a.values.iter().any(|v| !v.is_finite()) {
                        return bad("atom weights must be non-negative and values finite".into());
                    }
                    total += a.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("atom weights sum to {total}"));
                }
                Ok(())
            }
            UnitParamSpec::Gaussian { names, mean, cov } => {
                let k = names.len();
                if mean.len() != k || cov.len() != k || cov.iter().any(|r| r.len() != k) {
                    return bad("gaussian unit parameters: dimension mismatch".into());
                }
                for (i, row) in cov.iter().enumerate() {
                    for (j, &c) in row.iter().enumerate() {
                        if !c.is_finite() || c != cov[j][i] {
                            return bad("covariance must be finite and symmetric".into());
                        }
                    }
                }
                self.gaussian_factor().map(|_| ())
            }
        }
    }

    fn gaussian_factor(&self) -> Result<DMatrix<f64>, ScmError> {
        let UnitParamSpec::Gaussian { cov, .. } = self else {
            return Ok(DMatrix::zeros(0, 0));
        };
        let k = cov.len();
        let m = DMatrix::from_fn(k, k, |i, j| cov[i][j]);
        let eig = SymmetricEigen::new(m);
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return Err(ScmError::Invalid(
                "unit parameter covariance is not positive semi-definite".into(),
            ));
        }
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub dag: CausalDag,
    pub nodes: BTreeMap<String, Assignment>,
    #[serde(default)]
    pub unit_params: UnitParamSpec,
    /// Interventions applied so far, in the order given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interventions: Vec<(String, f64)>,
}

impl ScmSpec {
    pub fn new(
        dag: CausalDag,
        nodes: BTreeMap<String, Assignment>,
        unit_params: UnitParamSpec,
    ) -> Result<Self, ScmError> {
        let s = Self {
            dag,
            nodes,
            unit_params,
            interventions: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        for n in self.nodes.keys() {
            if !self.dag.contains(n) {
                return Err(ScmError::ExtraAssignment(n.clone()));
            }
        }
        self.unit_params.validate()?;
        let known: BTreeSet<&str> = self
            .unit_params
            .names()
            .iter()
            .map(String::as_str)
            .collect();
        for node in self.dag.nodes() {
            let a = self
                .nodes
                .get(node)
                .ok_or_else(|| ScmError::MissingAssignment(node.clone()))?;
            let used = a.inputs();
            let parents: BTreeSet<&str> = self.dag.parents_of(node)?.into_iter().collect();
            if used != parents {
                return Err(ScmError::ParentMismatch {
                    node: node.clone(),
                    used: used.into_iter().map(String::from).collect(),
                    parents: parents.into_iter().map(String::from).collect(),
                });
            }
            for p in a.params() {
                if !known.contains(p) {
                    return Err(ScmError::UnknownUnitParam {
                        node: node.clone(),
                        name: p.to_string(),
                    });
                }
            }
            let finite = |v: f64| v.is_finite();
            let ok = match a {
                Assignment::Constant { value } => finite(*value),
                Assignment::UnitParam { .. } => true,
                Assignment::LinearGaussian {
                    intercept,
                    noise_sd,
                    ..
                } => finite(*intercept) && finite(*noise_sd) && *noise_sd >= 0.0,
                Assignment::BernoulliLinearProb { intercept, .. } => finite(*intercept),
                Assignment::Categorical { values, weights } => {
                    !values.is_empty()
                        && values.len() == weights.len()
                        && values.iter().all(|v| v.is_finite())
                        && weights.iter().all(|w| *w >= 0.0)
                        && (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9
                }
            };
            let coefs_ok = a.terms().iter().all(|t| match t.coef {
                Coef::Fixed(c) => c.is_finite(),
                Coef::Param(_) => true,
            });
            if !ok || !coefs_ok {
                return Err(ScmError::Invalid(format!(
                    "bad numeric settings at node {node}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, ScmError> {
        let s: Self = toml::from_str(text).map_err(|e| ScmError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// SHA-256 of the serialised model.
    pub fn hash(&self) -> String {
        crate::report::sha256_hex(self.to_toml().as_bytes())
    }

    /// `do(node = value)`: the node becomes a constant and loses its incoming
    /// edges. Nothing else changes.
    pub fn intervene(&self, node: &str, value: f64) -> Result<ScmSpec, ScmError> {
        let dag = self.dag.without_incoming(node)?;
        if !value.is_finite() {
            return Err(ScmError::Invalid(format!("intervention value {value}")));
        }
        let mut out = self.clone();
        out.dag = dag;
        out.nodes
            .insert(node.to_string(), Assignment::Constant { value });
        out.interventions.push((node.to_string(), value));
        Ok(out)
    }

    /// The two-type mixture example as a population model: `alpha` is a unit
    /// parameter exposed as a node, and both `X` and `Y` depend on `Z` and
    /// `alpha` with no arrow between them.
    ///
    /// The general model writes `X := g(Z, U_Y, e_X)` and `Y := f(X, Z, U_X, e_Y)`,
    /// which swaps the modulators relative to the diagram where `U_X -> X` and
    /// `U_Y -> Y`. Here a single `alpha` modulates both, so either reading
    /// gives the same model.
    pub fn mixture_example(spec: &MixtureExampleSpec) -> Result<ScmSpec, ScmError> {
        let zero = crate::binary::Rational::from_integer(0.into());
        let base_x = to_f64(&spec.prob_x(&zero, 0));
        let base_y = to_f64(&spec.prob_y(&zero, 0));
        let p_z1 = to_f64(&spec.p_z(1));
        let dag = CausalDag::from_edges(&[("Z", "X"), ("Z", "Y"), ("alpha", "X"), ("alpha", "Y")])?;
        // alpha * (1 + Z)
        let shift = vec![Term::new(1.0, &["alpha"]), Term::new(1.0, &["alpha", "Z"])];
        let nodes = BTreeMap::from([
            (
                "Z".to_string(),
                Assignment::Categorical {
                    values: vec![0.0, 1.0],
                    weights: vec![1.0 - p_z1, p_z1],
                },
            ),
            (
                "alpha".to_string(),
                Assignment::UnitParam {
                    name: "alpha".into(),
                },
            ),
            (
                "X".to_string(),
                Assignment::BernoulliLinearProb {
                    intercept: base_x,
                    terms: shift.clone(),
                },
            ),
            (
                "Y".to_string(),
                Assignment::BernoulliLinearProb {
                    intercept: base_y,
                    terms: shift,
                },
            ),
        ]);
        let unit_params = UnitParamSpec::Discrete {
            names: vec!["alpha".into()],
            atoms: spec
                .alphas()
                .iter()
                .map(|(a, w)| Atom {
                    values: vec![to_f64(a)],
                    weight: to_f64(w),
                })
                .collect(),
        };
        ScmSpec::new(dag, nodes, unit_params)
    }

    /// Random-coefficient model: `Z` uniform over `levels`,
    /// `X := mu_x + (b_x + bx) Z + ex`, `Y := mu_y + (b_y + by) Z + ey`, with
    /// `(bx, ex, by, ey)` Gaussian per unit.
    pub fn random_coefficients(p: &LinearModelParams, levels: &[f64]) -> Result<ScmSpec, ScmError> {
        if levels.is_empty() {
            return Err(ScmError::Invalid("no levels for Z".into()));
        }
        let dag = CausalDag::from_edges(&[("Z", "X"), ("Z", "Y")])?;
        let s = p.cov.sigma();
        let w = 1.0 / levels.len() as f64;
        let nodes = BTreeMap::from([
            (
                "Z".to_string(),
                Assignment::Categorical {
                    values: levels.to_vec(),
                    weights: vec![w; levels.len()],
                },
            ),
            (
                "X".to_string(),
                Assignment::LinearGaussian {
                    intercept: p.mu_x,
                    terms: vec![
                        Term::new(p.b_x, &["Z"]),
                        Term::param("bx", &["Z"]),
                        Term::param("ex", &[]),
                    ],
                    noise_sd: 0.0,
                },
            ),
            (
                "Y".to_string(),
                Assignment::LinearGaussian {
                    intercept: p.mu_y,
                    terms: vec![
                        Term::new(p.b_y, &["Z"]),
                        Term::param("by", &["Z"]),
                        Term::param("ey", &[]),
                    ],
                    noise_sd: 0.0,
                },
            ),
        ]);
        let unit_params = UnitParamSpec::Gaussian {
            names: ["bx", "ex", "by", "ey"].map(String::from).to_vec(),
            mean: vec![0.0; 4],
            cov: (0..4)
                .map(|i| (0..4).map(|j| s[(i, j)]).collect())
                .collect(),
        };
        let mut spec = ScmSpec::new(dag, nodes, unit_params)?;
        // uniform weights may not sum to exactly 1 in floating point
        if let Some(Assignment::Categorical { weights, .. }) = spec.nodes.get_mut("Z") {
            let t: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|x| *x /= t);
        }
        Ok(spec)
    }
}

enum CoefIx {
    Fixed(f64),
    Param(usize),
}

struct TermIx {
    coef: CoefIx,
    inputs: Vec<usize>,
}

enum Step {
    Constant(f64),
    Param(usize),
    Gaussian {
        intercept: f64,
        terms: Vec<TermIx>,
        sd: f64,
    },
    Bernoulli {
        intercept: f64,
        terms: Vec<TermIx>,
    },
    Categorical {
        values: Vec<f64>,
        cumulative: Vec<f64>,
    },
}

/// Assignments resolved to indices, in evaluation order.
struct Compiled {
    order: Vec<(usize, Step)>,
    n_params: usize,
    factor: DMatrix<f64>,
}

impl Compiled {
    fn new(spec: &ScmSpec) -> Result<Self, ScmError> {
        spec.validate()?;
        let pnames = spec.unit_params.names();
        let pidx = |n: &str| pnames.iter().position(|p| p == n).expect("validated");
        let terms = |ts: &[Term]| -> Vec<TermIx> {
            ts.iter()
                .map(|t| TermIx {
                    coef: match &t.coef {
                        Coef::Fixed(c) => CoefIx::Fixed(*c),
                        Coef::Param(p) => CoefIx::Param(pidx(p)),
                    },
                    inputs: t
                        .inputs
                        .iter()
                        .map(|i| spec.dag.index_of(i).expect("validated"))
                        .collect(),
                })
                .collect()
        };
        let order = spec
            .dag
            .topological_names()
            .into_iter()
            .map(|name| {
                let idx = spec.dag.index_of(name).expect("own node");
                let step = match &spec.nodes[name] {
                    Assignment::Constant { value } => Step::Constant(*value),
                    Assignment::UnitParam { name } => Step::Param(pidx(name)),
                    Assignment::LinearGaussian {
                        intercept,
                        terms: ts,
                        noise_sd,
                    } => Step::Gaussian {
                        intercept: *intercept,
                        terms: terms(ts),
                        sd: *noise_sd,
                    },
                    Assignment::BernoulliLinearProb {
                        intercept,
                        terms: ts,
                    } => Step::Bernoulli {
                        intercept: *intercept,
                        terms: terms(ts),
                    },
                    Assignment::Categorical { values, weights } => Step::Categorical {
                        values: values.clone(),
                        cumulative: weights
                            .iter()
                            .scan(0.0, |acc, w| {
                                *acc += w;
                                Some(*acc)
                            })
                            .collect(),
                    },
                };
                (idx, step)
            })
            .collect();
        Ok(Self {
            order,
            n_params: pnames.len(),
            factor: spec.unit_params.gaussian_factor()?,
        })
    }

    fn draw_params(&self, spec: &UnitParamSpec, r: &mut ChaCha8Rng) -> Vec<f64> {
        match spec {
            UnitParamSpec::None => Vec::new(),
            UnitParamSpec::Discrete { atoms, .. } => {
                let u: f64 = r.random();
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.weight;
                    if u < acc {
                        return a.values.clone();
                    }
                }
                atoms.last().expect("validated").values.clone()
            }
            UnitParamSpec::Gaussian { mean, .. } => {
                let k = self.n_params;
                let n = DVector::from_fn(k, |_, _| StandardNormal.sample(r));
                let e = &self.factor * n;
                (0..k).map(|i| mean[i] + e[i]).collect()
            }
        }
    }

    fn linear(terms: &[TermIx], intercept: f64, vals: &[f64], params: &[f64]) -> f64 {
        terms.iter().fold(intercept, |acc, t| {
            let c = match t.coef {
                CoefIx::Fixed(c) => c,
                CoefIx::Param(i) => params[i],
            };
            acc + t.inputs.iter().fold(c, |p, &i| p * vals[i])
        })
    }

    fn unit(
        &self,
        spec: &ScmSpec,
        unit: u64,
        obs: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, ScmError> {
        let mut r = rng::stream(seed, unit);
        let params = self.draw_params(&spec.unit_params, &mut r);
        let n = spec.dag.node_count();
        let mut out = Vec::with_capacity(obs);
        for _ in 0..obs {
            let mut vals = vec![0.0; n];
            for (idx, step) in &self.order {
                let v = match step {
                    Step::Constant(v) => *v,
                    Step::Param(i) => params[*i],
                    Step::Gaussian {
                        intercept,
                        terms,
                        sd,
                    } => {
                        let noise: f64 = StandardNormal.sample(&mut r);
                        Self::linear(terms, *intercept, &vals, &params) + sd * noise
                    }
                    Step::Bernoulli { intercept, terms } => {
                        let p = Self::linear(terms, *intercept, &vals, &params);
                        if !(0.0..=1.0).contains(&p) {
                            return Err(ScmError::ProbabilityOutOfRange {
                                node: spec.dag.name(*idx).to_string(),
                                value: p,
                                unit,
                            });
                        }
                        let u: f64 = r.random();
                        if u < p {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Step::Categorical { values, cumulative } => {
                        let u: f64 = r.random();
                        let k = cumulative
                            .iter()
                            .position(|c| u < *c)
                            .unwrap_or(values.len() - 1);
                        values[k]
                    }
                };
                if !v.is_finite() {
                    return Err(ScmError::NonFinite {
                        node: spec.dag.name(*idx).to_string(),
                        unit,
                    });
                }
                vals[*idx] = v;
            }
            out.push(vals);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub seed: u64,
    pub interventions: Vec<(String, f64)>,
    pub first_unit: u64,
    pub n_units: usize,
    pub obs_per_unit: usize,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "spec_hash={} seed={} units={}..{} obs_per_unit={}",
            self.spec_hash,
            self.seed,
            self.first_unit,
            self.first_unit + self.n_units as u64,
            self.obs_per_unit
        )?;
        for (n, v) in &self.interventions {
            write!(f, " do({n}={v})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub unit: u64,
    /// Values in the order of [`SampledPopulation::node_names`].
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPopulation {
    pub node_names: Vec<String>,
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

impl SampledPopulation {
    pub fn column(&self, node: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == node)
    }

    pub fn values(&self, node: &str) -> Result<Vec<f64>, ScmError> {
        let c = self
            .column(node)
            .ok_or_else(|| GraphError::UnknownNode(node.to_string()))?;
        Ok(self.records.iter().map(|r| r.values[c]).collect())
    }

    pub fn mean(&self, node: &str) -> Result<(f64, f64), ScmError> {
        mean_se(&self.values(node)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit_id");
        for n in &self.node_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}", r.unit);
            for v in &r.values {
                let _ = write!(s, ",{}", crate::report::format_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    /// Projects onto three nodes as `(z, x, y)` rows, keeping unit ids.
    pub fn to_dataset(&self, z: &str, x: &str, y: &str) -> Result<Dataset, ScmError> {
        let col = |n: &str| {
            self.column(n)
                .ok_or_else(|| ScmError::Graph(GraphError::UnknownNode(n.to_string())))
        };
        let (cz, cx, cy) = (col(z)?, col(x)?, col(y)?);
        let rows = self
            .records
            .iter()
            .map(|r| Row {
                z: r.values[cz],
                x: r.values[cx],
                y: r.values[cy],
            })
            .collect();
        let ids = self.records.iter().map(|r| r.unit.to_string()).collect();
        Dataset::from_rows(rows)
            .map(|d| d.with_unit_ids(ids))
            .map_err(|e| ScmError::Invalid(e.to_string()))
    }
}

fn mean_se(v: &[f64]) -> Result<(f64, f64), ScmError> {
    if v.is_empty() {
        return Err(ScmError::Empty);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((m, (var / n).sqrt()))
}

/// Samples units `0..n_units`.
pub fn sample_population(
    spec: &ScmSpec,
    n_units: usize,
    obs_per_unit: usize,
    seed: u64,
) -> Result<SampledPopulation, ScmError> {
    sample_unit_range(spec, 0, n_units, obs_per_unit, seed)
}

/// Samples units `first..first + n_units`; unit `u` uses random stream `u`.
pub fn sample_unit_range(
    spec: &ScmSpec,
    first: u64,
    n_units: usize,
    obs_per_unit: usize,
    seed: u64,
) -> Result<SampledPopulation, ScmError> {
    if n_units == 0 || obs_per_unit == 0 {
        return Err(ScmError::Empty);
    }
    let c = Compiled::new(spec)?;
    let per_unit: Vec<Vec<Vec<f64>>> = (first..first + n_units as u64)
        .into_par_iter()
        .map(|u| c.unit(spec, u, obs_per_unit, seed))
        .collect::<Result<_, _>>()?;
    let records = per_unit
        .into_iter()
        .enumerate()
        .flat_map(|(i, obs)| {
            let unit = first + i as u64;
            obs.into_iter().map(move |values| Record { unit, values })
        })
        .collect();
    Ok(SampledPopulation {
        node_names: spec.dag.nodes().to_vec(),
        records,
        provenance: Provenance {
            spec_hash: spec.hash(),
            seed,
            interventions: spec.interventions.clone(),
            first_unit: first,
            n_units,
            obs_per_unit,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CausalContrast {
    pub mean_x1: Estimate,
    pub mean_x0: Estimate,
    pub risk_difference: Estimate,
    /// Delta-method standard error; infinite or NaN when the `x0` mean is 0.
    pub risk_ratio: Estimate,
}

/// Monte Carlo `E[Y | do(X = x1)]` versus `E[Y | do(X = x0)]`. The `x1` arm
/// uses units `0..n_units`, the `x0` arm units `n_units..2 n_units`.
pub fn causal_contrast(
    spec: &ScmSpec,
    x: &str,
    y: &str,
    x1: f64,
    x0: f64,
    n_units: usize,
    seed: u64,
) -> Result<CausalContrast, ScmError> {
    let xi = spec.dag.index_of(x)?;
    let yi = spec.dag.index_of(y)?;
    if xi != yi && spec.dag.descendants(yi)[xi] {
        return Err(ScmError::NotDownstream {
            x: x.to_string(),
            y: y.to_string(),
        });
    }
    let arm = |value: f64, first: u64| -> Result<Estimate, ScmError> {
        let pop = sample_unit_range(&spec.intervene(x, value)?, first, n_units, 1, seed)?;
        let (value, std_error) = pop.mean(y)?;
        Ok(Estimate { value, std_error })
    };
    let m1 = arm(x1, 0)?;
    let m0 = arm(x0, n_units as u64)?;
    let rd = Estimate {
        value: m1.value - m0.value,
        std_error: m1.std_error.hypot(m0.std_error),
    };
    let ratio = m1.value / m0.value;
    let rr = Estimate {
        value: ratio,
        std_error: ratio.abs() * (m1.std_error / m1.value).hypot(m0.std_error / m0.value),
    };
    Ok(CausalContrast {
        mean_x1: m1,
        mean_x0: m0,
        risk_difference: rd,
        risk_ratio: rr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Stratum values (in `z_nodes` order) and their share of all records.
    pub used: Vec<(Vec<f64>, f64)>,
    /// Strata lacking records at `x1` or `x0`.
    pub excluded: Vec<Vec<f64>>,
}

/// Stratified difference `sum_z [mean(Y | x1, z) - mean(Y | x0, z)] P(z)`
/// over the strata of `z_nodes`. Strata missing either treatment level are
/// excluded and the remaining weights renormalised.
pub fn adjusted_estimate(
    pop: &SampledPopulation,
    x: &str,
    y: &str,
    z_nodes: &[&str],
    x1: f64,
    x0: f64,
) -> Result<AdjustedEstimate, ScmError> {
    let col = |n: &str| {
        pop.column(n)
            .ok_or_else(|| ScmError::Graph(GraphError::UnknownNode(n.to_string())))
    };
    let (cx, cy) = (col(x)?, col(y)?);
    let cz = z_nodes
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>, _>>()?;

    #[derive(Default)]
    struct Cell {
        n: usize,
        sum: f64,
        sum_sq: f64,
    }
    #[derive(Default)]
    struct Stratum {
        values: Vec<f64>,
        total: usize,
        treated: Cell,
        control: Cell,
    }
    let mut strata: BTreeMap<Vec<u64>, Stratum> = BTreeMap::new();
    for r in &pop.records {
        let key: Vec<u64> = cz.iter().map(|&c| (r.values[c] + 0.0).to_bits()).collect();
        let s = strata.entry(key).or_insert_with(|| Stratum {
            values: cz.iter().map(|&c| r.values[c]).collect(),
            ..Default::default()
        });
        s.total += 1;
        let cell = if r.values[cx] == x1 {
            &mut s.treated
        } else if r.values[cx] == x0 {
            &mut s.control
        } else {
            continue;
        };
        let v = r.values[cy];
        cell.n += 1;
        cell.sum += v;
        cell.sum_sq += v * v;
    }
    let n_total = pop.records.len() as f64;
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let mut parts = Vec::new();
    for s in strata.into_values() {
        if s.treated.n == 0 || s.control.n == 0 {
            excluded.push(s.values);
            continue;
        }
        let stats = |c: &Cell| {
            let n = c.n as f64;
            let m = c.sum / n;
            let var = if c.n > 1 {
                ((c.sum_sq - n * m * m) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            (m, var / n)
        };
        let (m1, v1) = stats(&s.treated);
        let (m0, v0) = stats(&s.control);
        let w = s.total as f64 / n_total;
        parts.push((w, m1 - m0, v1 + v0));
        used.push((s.values, w));
    }
    if parts.is_empty() {
        return Err(ScmError::NoUsableStratum);
    }
    let wsum: f64 = parts.iter().map(|p| p.0).sum();
    let estimate = parts.iter().map(|(w, d, _)| w / wsum * d).sum();
    let var: f64 = parts.iter().map(|(w, _, v)| (w / wsum).powi(2) * v).sum();
    Ok(AdjustedEstimate {
        estimate,
        std_error: var.sqrt(),
        used,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confounded(effect: f64) -> ScmSpec {
        let dag = CausalDag::from_edges(&[("Z", "X"), ("Z", "Y"), ("X", "Y")]).unwrap();
        let nodes = BTreeMap::from([
            (
                "Z".into(),
                Assignment::Categorical {
                    values: vec![0.0, 1.0, 2.0],
                    weights: vec![0.25, 0.5, 0.25],
                },
            ),
            (
                "X".into(),
                Assignment::BernoulliLinearProb {
                    intercept: 0.2,
                    terms: vec![Term::new(0.3, &["Z"])],
                },
            ),
            (
                "Y".into(),
                Assignment::LinearGaussian {
                    intercept: 1.0,
                    terms: vec![Term::new(effect, &["X"]), Term::new(2.0, &["Z"])],
                    noise_sd: 1.0,
                },
            ),
        ]);
        ScmSpec::new(dag, nodes, UnitParamSpec::None).unwrap()
    }

    #[test]
    fn parents_must_match() {
        let mut s = confounded(1.0);
        s.nodes.insert(
            "Y".into(),
            Assignment::LinearGaussian {
                intercept: 0.0,
                terms: vec![Term::new(1.0, &["X"])],
                noise_sd: 1.0,
            },
        );
        assert!(matches!(s.validate(), Err(ScmError::ParentMismatch { .. })));
        let mut s = confounded(1.0);
        s.nodes.remove("Z");
        assert_eq!(s.validate(), Err(ScmError::MissingAssignment("Z".into())));
        let mut s = confounded(1.0);
        s.nodes
            .insert("W".into(), Assignment::Constant { value: 1.0 });
        assert_eq!(s.validate(), Err(ScmError::ExtraAssignment("W".into())));
        let mut s = confounded(1.0);
        s.nodes.insert(
            "X".into(),
            Assignment::BernoulliLinearProb {
                intercept: 0.0,
                terms: vec![Term::param("beta", &["Z"])],
            },
        );
        assert!(matches!(
            s.validate(),
            Err(ScmError::UnknownUnitParam { .. })
        ));
    }

    #[test]
    fn toml_round_trip() {
        for s in [
            confounded(0.5),
            ScmSpec::mixture_example(&MixtureExampleSpec::two_types()).unwrap(),
            ScmSpec::random_coefficients(&LinearModelParams::strength_full(), &[64.0, 65.0])
                .unwrap(),
        ] {
            let text = s.to_toml();
            let back = ScmSpec::from_toml(&text).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.hash(), s.hash());
        }
    }

    #[test]
    fn probability_violation_is_an_error() {
        let mut s = confounded(1.0);
        s.nodes.insert(
            "X".into(),
            Assignment::BernoulliLinearProb {
                intercept: 0.5,
                terms: vec![Term::new(0.4, &["Z"])],
            },
        );
        match sample_population(&s, 500, 1, 1) {
            Err(ScmError::ProbabilityOutOfRange { node, value, .. }) => {
                assert_eq!(node, "X");
                assert!((value - 1.3).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn intervention_is_modular() {
        let s = confounded(1.0);
        let i = s.intervene("X", 1.0).unwrap();
        assert!(!i.dag.has_edge("Z", "X"));
        assert_eq!(i.dag.edge_count(), 2);
        for n in ["Z", "Y"] {
            assert_eq!(i.nodes[n], s.nodes[n]);
        }
        let twice = i.intervene("X", 0.0).unwrap();
        assert_eq!(twice.dag, i.dag);
        assert_eq!(twice.nodes["X"], Assignment::Constant { value: 0.0 });
        assert!(s.intervene("Q", 1.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_counted() {
        let s = confounded(1.0);
        let a = sample_population(&s, 300, 3, 42).unwrap();
        let b = sample_population(&s, 300, 3, 42).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.records.len(), 900);
        let c = sample_population(&s, 300, 3, 43).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
        let tail = sample_unit_range(&s, 100, 200, 3, 42).unwrap();
        assert_eq!(tail.records, a.records[300..]);
        assert!(a.provenance.to_string().contains("seed=42"));
        assert_eq!(sample_population(&s, 0, 1, 1), Err(ScmError::Empty));
    }

    #[test]
    fn unit_parameters_fixed_within_unit() {
        let s = ScmSpec::mixture_example(&MixtureExampleSpec::two_types()).unwrap();
        let pop = sample_population(&s, 50, 20, 3).unwrap();
        let c = pop.column("alpha").unwrap();
        for chunk in pop.records.chunks(20) {
            assert!(chunk
                .iter()
                .all(|r| r.values[c] == chunk[0].values[c] && r.unit == chunk[0].unit));
        }
    }

    #[test]
    fn deterministic_identity_effect() {
        let dag = CausalDag::from_edges(&[("X", "Y")]).unwrap();
        let nodes = BTreeMap::from([
            (
                "X".into(),
                Assignment::LinearGaussian {
                    intercept: 0.0,
                    terms: vec![],
                    noise_sd: 1.0,
                },
            ),
            (
                "Y".into(),
                Assignment::LinearGaussian {
                    intercept: 0.0,
                    terms: vec![Term::new(1.0, &["X"])],
                    noise_sd: 0.0,
                },
            ),
        ]);
        let s = ScmSpec::new(dag, nodes, UnitParamSpec::None).unwrap();
        let c = causal_contrast(&s, "X", "Y", 3.0, 1.0, 100, 0).unwrap();
        assert_eq!(c.risk_difference.value, 2.0);
        assert_eq!(c.risk_ratio.value, 3.0);
        assert!(matches!(
            causal_contrast(&s, "Y", "X", 1.0, 0.0, 10, 0),
            Err(ScmError::NotDownstream { .. })
        ));
    }

    #[test]
    fn adjustment_reports_excluded_strata() {
        let s = confounded(1.0);
        let pop = sample_population(&s, 2000, 1, 5).unwrap();
        let adj = adjusted_estimate(&pop, "X", "Y", &["Z"], 1.0, 0.0).unwrap();
        assert_eq!(adj.used.len(), 3);
        assert!(adj.excluded.is_empty());
        assert!((adj.estimate - 1.0).abs() < 5.0 * adj.std_error);
        assert!(matches!(
            adjusted_estimate(&pop, "X", "Y", &["Z"], 7.0, 0.0),
            Err(ScmError::NoUsableStratum)
        ));
    }
}
