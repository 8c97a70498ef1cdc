//! Exact reproduction of the two-level mixture example.
//!
//! Each unit carries an effect modulator `alpha` drawn from a finite set.
//! Within a unit and a level of the binary confounder `z`,
//!
//! ```text
//! P(X=1) = base_x + alpha * (1 + z)
//! P(Y=1) = base_y + alpha * (1 + z)
//! ```
//!
//! and `X` is independent of `Y`. Averaging over the unobserved `alpha`
//! induces an `X`-`Y` association inside every level of `z`.
//!
//! All arithmetic is done with exact rationals. "Risk" here is an odds
//! (`P(Y=1|X=x) / P(Y=0|X=x)`), so every relative risk below is an odds
//! ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::report::KvReport;

pub type Rational = BigRational;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExampleError {
    #[error("`{0}` is not a decimal literal")]
    BadDecimal(String),
    #[error("{what} = {value} lies outside [0, 1]")]
    ProbabilityOutOfRange { what: String, value: f64 },
    #[error("alpha weights sum to {0}, expected 1")]
    WeightsDoNotSumToOne(f64),
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("no alpha values given")]
    NoAlpha,
    #[error("alpha {0} is not part of the mixture")]
    UnknownAlpha(f64),
    #[error("z must be 0 or 1, got {0}")]
    InvalidZ(u8),
    #[error("table cell ({0},{1}) is zero; odds ratio undefined")]
    ZeroCell(usize, usize),
    #[error("table cell ({0},{1}) is negative")]
    NegativeCell(usize, usize),
}

/// Parses a plain decimal literal (`"0.1"`, `"-2"`, `"1e-3"`) into an exact rational.
pub fn parse_decimal(s: &str) -> Result<Rational, ExampleError> {
    let bad = || ExampleError::BadDecimal(s.to_string());
    let t = s.trim();
    let (mantissa, exp) = match t.find(['e', 'E']) {
        Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (t, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty()
        || !int_part
            .chars()
            .chain(frac_part.chars())
            .all(|c| c.is_ascii_digit())
    {
        return Err(bad());
    }
    let all: String = format!("{int_part}{frac_part}");
    let numer: BigInt = all.parse().map_err(|_| bad())?;
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let mut q = Rational::from_integer(numer);
    if scale >= 0 {
        q *= Rational::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        q /= Rational::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    Ok(if neg { -q } else { q })
}

/// Exact rational from the shortest decimal representation of `v`, so that
/// `0.1_f64` maps to `1/10`.
pub fn rational_from_f64(v: f64) -> Result<Rational, ExampleError> {
    if !v.is_finite() {
        return Err(ExampleError::BadDecimal(v.to_string()));
    }
    parse_decimal(&format!("{v:?}"))
}

pub fn to_f64(q: &Rational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

fn half() -> Rational {
    Rational::new(1.into(), 2.into())
}

/// Rounds to `decimals` places, ties to even.
pub fn round_half_even(q: &Rational, decimals: u32) -> Rational {
    let scale = Rational::from_integer(num_traits::pow(BigInt::from(10), decimals as usize));
    let scaled = q * &scale;
    let floor = scaled.floor();
    let frac = &scaled - &floor;
    let h = half();
    let up = if frac > h {
        true
    } else if frac == h {
        floor.to_integer() % BigInt::from(2) != BigInt::zero()
    } else {
        false
    };
    let r = if up { floor + Rational::one() } else { floor };
    r / scale
}

/// Parameters of the mixture example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExampleSpec {
    alphas: Vec<(Rational, Rational)>,
    base_x: Rational,
    base_y: Rational,
    p_z1: Rational,
}

impl MixtureExampleSpec {
    /// `alpha` in {0.1, 0.2} with equal weight, bases 0.5 and 0.1, `P(Z=1) = 0.5`.
    pub fn two_types() -> Self {
        Self::from_decimals(&[("0.1", "0.5"), ("0.2", "0.5")], "0.5", "0.1", "0.5")
            .expect("default example is valid")
    }

    pub fn from_decimals(
        alphas: &[(&str, &str)],
        base_x: &str,
        base_y: &str,
        p_z1: &str,
    ) -> Result<Self, ExampleError> {
        let alphas = alphas
            .iter()
            .map(|(a, w)| Ok((parse_decimal(a)?, parse_decimal(w)?)))
            .collect::<Result<Vec<_>, ExampleError>>()?;
        Self::new(
            alphas,
            parse_decimal(base_x)?,
            parse_decimal(base_y)?,
            parse_decimal(p_z1)?,
        )
    }

    pub fn from_f64(
        alphas: &[(f64, f64)],
        base_x: f64,
        base_y: f64,
        p_z1: f64,
    ) -> Result<Self, ExampleError> {
        let alphas = alphas
            .iter()
            .map(|&(a, w)| Ok((rational_from_f64(a)?, rational_from_f64(w)?)))
            .collect::<Result<Vec<_>, ExampleError>>()?;
        Self::new(
            alphas,
            rational_from_f64(base_x)?,
            rational_from_f64(base_y)?,
            rational_from_f64(p_z1)?,
        )
    }

    pub fn new(
        alphas: Vec<(Rational, Rational)>,
        base_x: Rational,
        base_y: Rational,
        p_z1: Rational,
    ) -> Result<Self, ExampleError> {
        if alphas.is_empty() {
            return Err(ExampleError::NoAlpha);
        }
        let mut total = Rational::zero();
        for (_, w) in &alphas {
            if w.is_negative() {
                return Err(ExampleError::NegativeWeight(to_f64(w)));
            }
            total += w;
        }
        if !total.is_one() {
            return Err(ExampleError::WeightsDoNotSumToOne(to_f64(&total)));
        }
        check_probability("P(Z=1)", &p_z1)?;
        let spec = Self {
            alphas,
            base_x,
            base_y,
            p_z1,
        };
        for (a, _) in &spec.alphas {
            for z in 0..=1u8 {
                check_probability("P(X=1)", &spec.prob_x(a, z))?;
                check_probability("P(Y=1)", &spec.prob_y(a, z))?;
            }
        }
        Ok(spec)
    }

    pub fn alphas(&self) -> &[(Rational, Rational)] {
        &self.alphas
    }

    pub fn p_z(&self, z: u8) -> Rational {
        if z == 1 {
            self.p_z1.clone()
        } else {
            Rational::one() - &self.p_z1
        }
    }

    fn shift(alpha: &Rational, z: u8) -> Rational {
        alpha * Rational::from_integer(BigInt::from(1 + z as i64))
    }

    pub fn prob_x(&self, alpha: &Rational, z: u8) -> Rational {
        &self.base_x + Self::shift(alpha, z)
    }

    pub fn prob_y(&self, alpha: &Rational, z: u8) -> Rational {
        &self.base_y + Self::shift(alpha, z)
    }
}

fn check_probability(what: &str, p: &Rational) -> Result<(), ExampleError> {
    if p.is_negative() || *p > Rational::one() {
        return Err(ExampleError::ProbabilityOutOfRange {
            what: what.to_string(),
            value: to_f64(p),
        });
    }
    Ok(())
}

fn check_z(z: u8) -> Result<(), ExampleError> {
    if z > 1 {
        return Err(ExampleError::InvalidZ(z));
    }
    Ok(())
}

/// A 2x2 table `p[x][y]` of non-negative cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    cells: [[Rational; 2]; 2],
}

impl ContingencyTable {
    pub fn new(cells: [[Rational; 2]; 2]) -> Result<Self, ExampleError> {
        for (x, row) in cells.iter().enumerate() {
            for (y, c) in row.iter().enumerate() {
                if c.is_negative() {
                    return Err(ExampleError::NegativeCell(x, y));
                }
            }
        }
        Ok(Self { cells })
    }

    pub fn from_f64(cells: [[f64; 2]; 2]) -> Result<Self, ExampleError> {
        let q = |v: f64| rational_from_f64(v);
        Self::new([
            [q(cells[0][0])?, q(cells[0][1])?],
            [q(cells[1][0])?, q(cells[1][1])?],
        ])
    }

    pub fn exact(&self, x: usize, y: usize) -> &Rational {
        &self.cells[x][y]
    }

    pub fn cell(&self, x: usize, y: usize) -> f64 {
        to_f64(&self.cells[x][y])
    }

    pub fn to_f64(&self) -> [[f64; 2]; 2] {
        [
            [self.cell(0, 0), self.cell(0, 1)],
            [self.cell(1, 0), self.cell(1, 1)],
        ]
    }

    pub fn total(&self) -> Rational {
        self.cells.iter().flatten().sum()
    }

    fn scaled(&self, w: &Rational) -> [[Rational; 2]; 2] {
        let c = &self.cells;
        [[&c[0][0] * w, &c[0][1] * w], [&c[1][0] * w, &c[1][1] * w]]
    }

    fn weighted_sum<'a>(parts: impl IntoIterator<Item = (&'a ContingencyTable, Rational)>) -> Self {
        let mut acc: [[Rational; 2]; 2] = Default::default();
        for (t, w) in parts {
            let s = t.scaled(&w);
            for x in 0..2 {
                for y in 0..2 {
                    acc[x][y] += &s[x][y];
                }
            }
        }
        Self { cells: acc }
    }

    /// Every cell rounded to `decimals` places, ties to even.
    pub fn rounded(&self, decimals: u32) -> Self {
        let c = &self.cells;
        let r = |q: &Rational| round_half_even(q, decimals);
        Self {
            cells: [[r(&c[0][0]), r(&c[0][1])], [r(&c[1][0]), r(&c[1][1])]],
        }
    }

    /// `(p11 * p00) / (p10 * p01)`.
    pub fn odds_ratio_exact(&self) -> Result<Rational, ExampleError> {
        for x in 0..2 {
            for y in 0..2 {
                if self.cells[x][y].is_zero() {
                    return Err(ExampleError::ZeroCell(x, y));
                }
            }
        }
        let c = &self.cells;
        Ok((&c[1][1] * &c[0][0]) / (&c[1][0] * &c[0][1]))
    }

    pub fn odds_ratio(&self) -> Result<f64, ExampleError> {
        self.odds_ratio_exact().map(|q| to_f64(&q))
    }

    /// `P(Y=1 | X=x) / P(Y=0 | X=x)`.
    pub fn conditional_odds(&self, x: usize) -> Result<Rational, ExampleError> {
        if self.cells[x][0].is_zero() {
            return Err(ExampleError::ZeroCell(x, 0));
        }
        Ok(&self.cells[x][1] / &self.cells[x][0])
    }
}

/// `P(X, Y | Z=z, alpha)`: the product of the two unit-level margins.
pub fn unit_table(
    spec: &MixtureExampleSpec,
    alpha: &Rational,
    z: u8,
) -> Result<ContingencyTable, ExampleError> {
    check_z(z)?;
    if !spec.alphas.iter().any(|(a, _)| a == alpha) {
        return Err(ExampleError::UnknownAlpha(to_f64(alpha)));
    }
    unit_table_unchecked(spec, alpha, z)
}

fn unit_table_unchecked(
    spec: &MixtureExampleSpec,
    alpha: &Rational,
    z: u8,
) -> Result<ContingencyTable, ExampleError> {
    let px = spec.prob_x(alpha, z);
    let py = spec.prob_y(alpha, z);
    check_probability("P(X=1)", &px)?;
    check_probability("P(Y=1)", &py)?;
    let one = Rational::one();
    let (qx, qy) = (&one - &px, &one - &py);
    ContingencyTable::new([[&qx * &qy, &qx * &py], [&px * &qy, &px * &py]])
}

/// `P(X, Y | Z=z)` with `alpha` marginalised out.
pub fn population_table(
    spec: &MixtureExampleSpec,
    z: u8,
) -> Result<ContingencyTable, ExampleError> {
    check_z(z)?;
    let units = spec
        .alphas
        .iter()
        .map(|(a, w)| Ok((unit_table_unchecked(spec, a, z)?, w.clone())))
        .collect::<Result<Vec<_>, ExampleError>>()?;
    Ok(ContingencyTable::weighted_sum(
        units.iter().map(|(t, w)| (t, w.clone())),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    /// Exact rational tables.
    Exact,
    /// Stratum tables rounded to two decimals before any ratio is taken.
    RoundedTable,
}

impl ReportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportMode::Exact => "exact",
            ReportMode::RoundedTable => "rounded-table",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryMeasures {
    pub mode: ReportMode,
    pub stratum_tables: BTreeMap<u8, ContingencyTable>,
    pub marginal_table: ContingencyTable,
    pub stratum_or: BTreeMap<u8, f64>,
    pub average_or: f64,
    pub marginal_or: f64,
    /// Odds ratio under `do(X=1)` vs `do(X=0)`.
    pub causal_rr: Rational,
}

impl SummaryMeasures {
    pub fn to_kv(&self) -> KvReport {
        let mut r = KvReport::new();
        r.push("mode", self.mode.as_str());
        for (z, t) in &self.stratum_tables {
            for x in 0..2 {
                for y in 0..2 {
                    r.push_f64(format!("table.z{z}.x{x}y{y}"), t.cell(x, y));
                }
            }
        }
        for (z, v) in &self.stratum_or {
            r.push_f64(format!("or.z{z}"), *v);
        }
        r.push_f64("or.average", self.average_or);
        r.push_f64("or.marginal", self.marginal_or);
        r.push_f64("causal_rr", to_f64(&self.causal_rr));
        r
    }
}

/// Stratum, average and marginal odds ratios plus the causal ratio.
pub fn summary_measures(
    spec: &MixtureExampleSpec,
    mode: ReportMode,
) -> Result<SummaryMeasures, ExampleError> {
    let mut stratum_tables = BTreeMap::new();
    for z in 0..=1u8 {
        let t = population_table(spec, z)?;
        let t = match mode {
            ReportMode::Exact => t,
            ReportMode::RoundedTable => t.rounded(2),
        };
        stratum_tables.insert(z, t);
    }
    let marginal_table =
        ContingencyTable::weighted_sum(stratum_tables.iter().map(|(&z, t)| (t, spec.p_z(z))));
    let mut stratum_or = BTreeMap::new();
    for (&z, t) in &stratum_tables {
        stratum_or.insert(z, t.odds_ratio()?);
    }
    let ors: Vec<Rational> = stratum_tables
        .values()
        .map(ContingencyTable::odds_ratio_exact)
        .collect::<Result<_, _>>()?;
    let average = ors.iter().sum::<Rational>() / Rational::from_integer(BigInt::from(ors.len()));
    let marginal_or = marginal_table.odds_ratio()?;
    Ok(SummaryMeasures {
        mode,
        stratum_tables,
        marginal_table,
        stratum_or,
        average_or: to_f64(&average),
        marginal_or,
        causal_rr: causal_odds_ratio(spec),
    })
}

/// Odds of `Y=1` under `do(X=x)`. `Y`'s mechanism has no `X` input, so the
/// intervention leaves its law untouched and `x` does not enter.
pub fn interventional_odds(spec: &MixtureExampleSpec, _x: u8) -> Rational {
    let mut p = Rational::zero();
    for z in 0..=1u8 {
        for (a, w) in &spec.alphas {
            p += spec.p_z(z) * w * spec.prob_y(a, z);
        }
    }
    &p / (Rational::one() - &p)
}

pub fn causal_odds_ratio(spec: &MixtureExampleSpec) -> Rational {
    interventional_odds(spec, 1) / interventional_odds(spec, 0)
}

fn fmt_cell(q: &Rational, mode: ReportMode) -> String {
    match mode {
        ReportMode::Exact => format!("{:.4}", to_f64(q)),
        ReportMode::RoundedTable => format!("{:.2}", to_f64(q)),
    }
}

/// Aligned text rendering of the per-unit tables, the stratum tables and the
/// summary measures.
pub fn render_text(spec: &MixtureExampleSpec, mode: ReportMode) -> Result<String, ExampleError> {
    let mut s = String::new();
    let _ = writeln!(s, "P(X,Y | Z, alpha)");
    for (a, _) in &spec.alphas {
        let _ = writeln!(s, "  alpha = {}", to_f64(a));
        let _ = writeln!(
            s,
            "  {:>6} | {:>7} {:>7} | {:>7} {:>7}",
            "", "Z=0,Y=0", "Y=1", "Z=1,Y=0", "Y=1"
        );
        let t0 = unit_table(spec, a, 0)?;
        let t1 = unit_table(spec, a, 1)?;
        for x in 0..2 {
            let _ = writeln!(
                s,
                "  {:>6} | {:>7} {:>7} | {:>7} {:>7}",
                format!("X={x}"),
                fmt_cell(t0.exact(x, 0), ReportMode::RoundedTable),
                fmt_cell(t0.exact(x, 1), ReportMode::RoundedTable),
                fmt_cell(t1.exact(x, 0), ReportMode::RoundedTable),
                fmt_cell(t1.exact(x, 1), ReportMode::RoundedTable),
            );
        }
    }
    let m = summary_measures(spec, mode)?;
    let _ = writeln!(s, "P(X,Y | Z)  [{}]", mode.as_str());
    let _ = writeln!(
        s,
        "  {:>6} | {:>7} {:>7} | {:>7} {:>7}",
        "", "Z=0,Y=0", "Y=1", "Z=1,Y=0", "Y=1"
    );
    for x in 0..2 {
        let (t0, t1) = (&m.stratum_tables[&0], &m.stratum_tables[&1]);
        let _ = writeln!(
            s,
            "  {:>6} | {:>7} {:>7} | {:>7} {:>7}",
            format!("X={x}"),
            fmt_cell(t0.exact(x, 0), mode),
            fmt_cell(t0.exact(x, 1), mode),
            fmt_cell(t1.exact(x, 0), mode),
            fmt_cell(t1.exact(x, 1), mode),
        );
    }
    let digits = match mode {
        ReportMode::Exact => 5,
        ReportMode::RoundedTable => 2,
    };
    let _ = writeln!(s, "odds ratios");
    for (z, v) in &m.stratum_or {
        let _ = writeln!(s, "  stratum Z={z}: {v:.digits$}");
    }
    let _ = writeln!(s, "  average:     {:.digits$}", m.average_or);
    let _ = writeln!(s, "  marginal:    {:.digits$}", m.marginal_or);
    let _ = writeln!(s, "  causal:      {:.digits$}", to_f64(&m.causal_rr));
    Ok(s)
}

/// Comma-separated long-format table: `table,alpha,z,x,y,p`.
pub fn render_csv(spec: &MixtureExampleSpec, mode: ReportMode) -> Result<String, ExampleError> {
    let mut s = String::from("table,alpha,z,x,y,p\n");
    for (a, _) in &spec.alphas {
        for z in 0..=1u8 {
            let t = unit_table(spec, a, z)?;
            for x in 0..2 {
                for y in 0..2 {
                    let _ = writeln!(s, "unit,{:?},{z},{x},{y},{:?}", to_f64(a), t.cell(x, y));
                }
            }
        }
    }
    let m = summary_measures(spec, mode)?;
    for (z, t) in &m.stratum_tables {
        for x in 0..2 {
            for y in 0..2 {
                let _ = writeln!(s, "population,,{z},{x},{y},{:?}", t.cell(x, y));
            }
        }
    }
    s.push_str("measure,value\n");
    for (z, v) in &m.stratum_or {
        let _ = writeln!(s, "or_z{z},{v:?}");
    }
    let _ = writeln!(s, "or_average,{:?}", m.average_or);
    let _ = writeln!(s, "or_marginal,{:?}", m.marginal_or);
    let _ = writeln!(s, "causal_rr,{:?}", to_f64(&m.causal_rr));
    Ok(s)
}
