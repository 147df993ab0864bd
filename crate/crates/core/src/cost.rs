//! Analytic token costs for three iterative retrieval pipelines: this one
//! (role graph), IRCoT and RQ-RAG.
//!
//! All lengths are abstract token counts: `n` sub-queries, queries of length
//! `m`, answers of length `t`, `k` passages per sub-query of length `l`. A
//! summary is assumed to be as long as one passage. Arithmetic is exact;
//! [`Tokens::rounded`] gives the nearest integer for display.
//!
//! Each breakdown lists per-stage rows and carries two totals: the sum of the
//! rows and the published closed form. They are computed separately so the
//! identity can be checked rather than assumed.

use std::fmt;
use std::ops::{Add, Mul};

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::RoleId;
use crate::pipeline::Telemetry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("trace has no token telemetry for {0}")]
    MissingTelemetry(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("retrieve fraction {0} is outside [0, 1]")]
    InvalidFraction(String),
}

/// An exact token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Tokens(pub Ratio<i128>);

impl Tokens {
    pub fn int(v: i128) -> Self {
        Tokens(Ratio::from_integer(v))
    }

    /// Nearest integer, halves rounded away from zero.
    pub fn rounded(self) -> i128 {
        self.0.round().to_integer()
    }

    pub fn is_integer(self) -> bool {
        self.0.is_integer()
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Serialize for Tokens {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl Add for Tokens {
    type Output = Tokens;
    fn add(self, rhs: Tokens) -> Tokens {
        Tokens(self.0 + rhs.0)
    }
}

impl Mul for Tokens {
    type Output = Tokens;
    fn mul(self, rhs: Tokens) -> Tokens {
        Tokens(self.0 * rhs.0)
    }
}

impl std::iter::Sum for Tokens {
    fn sum<I: Iterator<Item = Tokens>>(iter: I) -> Tokens {
        iter.fold(Tokens::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub n: u64,
    pub m: u64,
    pub t: u64,
    pub k: u64,
    pub l: u64,
}

impl CostParams {
    pub fn new(n: u64, m: u64, t: u64, k: u64, l: u64) -> Self {
        Self { n, m, t, k, l }
    }

    fn terms(&self) -> [Ratio<i128>; 5] {
        [self.n, self.m, self.t, self.k, self.l].map(|v| Ratio::from_integer(i128::from(v)))
    }
}

/// How often the role-graph pipeline retrieves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RetrievalAssumption {
    /// Every sub-query retrieves.
    #[default]
    Always,
    /// Only this share of sub-queries retrieves; the judge skips the rest.
    Fraction(Ratio<i128>),
}

impl RetrievalAssumption {
    pub fn fraction(numer: i128, denom: i128) -> Result<Self, CostError> {
        if denom <= 0 || numer < 0 || numer > denom {
            return Err(CostError::InvalidFraction(format!("{numer}/{denom}")));
        }
        Ok(RetrievalAssumption::Fraction(Ratio::new(numer, denom)))
    }

    /// Parses a decimal such as `0.75` exactly.
    pub fn parse_decimal(text: &str) -> Result<Self, CostError> {
        let bad = || CostError::InvalidFraction(text.to_string());
        let (whole, frac) = text.trim().split_once('.').unwrap_or((text.trim(), ""));
        if whole.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        let digits = format!("{whole}{frac}");
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let numer: i128 = digits.parse().map_err(|_| bad())?;
        Self::fraction(numer, 10i128.pow(frac.len() as u32)).map_err(|_| bad())
    }

    fn share(self) -> Ratio<i128> {
        match self {
            RetrievalAssumption::Always => Ratio::from_integer(1),
            RetrievalAssumption::Fraction(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RoleGraph,
    Ircot,
    RqRag,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RoleGraph, Method::Ircot, Method::RqRag];

    pub fn label(self) -> &'static str {
        match self {
            Method::RoleGraph => "role-graph",
            Method::Ircot => "IRCoT",
            Method::RqRag => "RQ-RAG",
        }
    }

    pub fn cost(self, params: &CostParams) -> CostBreakdown {
        match self {
            Method::RoleGraph => rolegraph_cost(params, RetrievalAssumption::Always),
            Method::Ircot => ircot_cost(params),
            Method::RqRag => rqrag_cost(params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub stage: &'static str,
    pub input: Tokens,
    pub output: Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub method: Method,
    pub params: CostParams,
    pub stages: Vec<StageCost>,
    /// Sums of the stage rows.
    pub input: Tokens,
    pub output: Tokens,
    /// The closed-form totals.
    pub closed_input: Tokens,
    pub closed_output: Tokens,
    /// Set when the model says nothing meaningful (IRCoT with `n = 0`).
    pub degenerate: bool,
}

impl CostBreakdown {
    fn new(method: Method, params: &CostParams, stages: Vec<StageCost>, closed: (Ratio<i128>, Ratio<i128>)) -> Self {
        let input = stages.iter().map(|s| s.input).sum();
        let output = stages.iter().map(|s| s.output).sum();
        Self {
            method,
            params: *params,
            stages,
            input,
            output,
            closed_input: Tokens(closed.0),
            closed_output: Tokens(closed.1),
            degenerate: false,
        }
    }

    /// Whether the stage sums agree with the closed form.
    pub fn is_consistent(&self) -> bool {
        self.input == self.closed_input && self.output == self.closed_output
    }

    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

fn row(stage: &'static str, input: Ratio<i128>, output: Ratio<i128>) -> StageCost {
    StageCost { stage, input: Tokens(input), output: Tokens(output) }
}

fn int(v: i128) -> Ratio<i128> {
    Ratio::from_integer(v)
}

/// Stage names of the role-graph breakdown, one per role.
pub fn stage_name(role: RoleId) -> &'static str {
    role.as_str()
}

/// Cost of this pipeline. With [`RetrievalAssumption::Fraction`] the
/// passage-driven terms (sub-answer passages, the summarizer row, and the
/// summaries held in memory) are scaled by the retrieving share.
pub fn rolegraph_cost(params: &CostParams, retrieval: RetrievalAssumption) -> CostBreakdown {
    let [n, m, t, k, l] = params.terms();
    let r = retrieval.share();
    let memory = n * (m + t + r * l);
    let stages = vec![
        row(stage_name(RoleId::GraphBuilder), m, n * m),
        row(stage_name(RoleId::RetrievalJudge), n * m, n),
        row(stage_name(RoleId::SubAnswer), n * m + r * n * k * l, n * t),
        row(stage_name(RoleId::Summarizer), r * n * k * l, r * n * l),
        row(stage_name(RoleId::NewQuery), memory, m),
        row(stage_name(RoleId::Reasoner), memory, t),
    ];
    let closed_in = n * (int(4) * m + int(2) * r * k * l + int(2) * t + int(2) * r * l) + m;
    let closed_out = n * (m + t + r * l + int(1)) + m + t;
    CostBreakdown::new(Method::RoleGraph, params, stages, (closed_in, closed_out))
}

/// IRCoT: iterative sub-query/sub-answer generation where each step re-reads
/// everything before it, then a final answer over all passages.
pub fn ircot_cost(params: &CostParams) -> CostBreakdown {
    let [n, m, t, k, l] = params.terms();
    let kl = k * l;
    // Step j (1-based) re-reads the j-1 earlier passage sets and answers.
    let earlier = n * (n - int(1)) / int(2) * (kl + t);
    let stages = vec![
        row("iterative generation", n * m + n * kl + earlier, n * (m + t)),
        row("final answer", n * kl, t),
    ];
    let closed_in = n * (m + (n + int(3)) / int(2) * kl + (n - int(1)) / int(2) * t);
    let closed_out = n * (m + t) + t;
    let mut out = CostBreakdown::new(Method::Ircot, params, stages, (closed_in, closed_out));
    out.degenerate = params.n == 0;
    out
}

/// IRCoT input total as the explicit step-by-step sum, for cross-checking
/// the closed form.
pub fn ircot_input_series(params: &CostParams) -> Tokens {
    let p = params.terms();
    let (n, m, t, kl) = (params.n, p[1], p[2], p[3] * p[4]);
    let mut total = Ratio::zero();
    for step in 1..=n {
        total += m + kl;
        for _ in 1..step {
            total += kl + t;
        }
    }
    if n > 0 {
        total += int(i128::from(n)) * kl;
    }
    Tokens(total)
}

/// RQ-RAG: one sub-query generation call, then an answer per sub-query.
pub fn rqrag_cost(params: &CostParams) -> CostBreakdown {
    let [n, m, t, k, l] = params.terms();
    let stages = vec![
        row("sub-query generation", m, n * m),
        row("answer generation", n * m + n * k * l + n * t, n * t),
    ];
    let closed_in = n * (m + k * l + t) + m;
    let closed_out = n * (m + t);
    CostBreakdown::new(Method::RqRag, params, stages, (closed_in, closed_out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    N,
    M,
    T,
    K,
    L,
}

impl std::str::FromStr for Param {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n" => Ok(Param::N),
            "m" => Ok(Param::M),
            "t" => Ok(Param::T),
            "k" => Ok(Param::K),
            "l" => Ok(Param::L),
            other => Err(format!("unknown parameter {other:?} (expected one of n, m, t, k, l)")),
        }
    }
}

impl CostParams {
    pub fn with(mut self, param: Param, value: u64) -> Self {
        match param {
            Param::N => self.n = value,
            Param::M => self.m = value,
            Param::T => self.t = value,
            Param::K => self.k = value,
            Param::L => self.l = value,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComparisonRow {
    pub params: CostParams,
    pub costs: Vec<CostBreakdown>,
}

pub fn compare(params: &CostParams) -> ComparisonRow {
    ComparisonRow { params: *params, costs: Method::ALL.iter().map(|m| m.cost(params)).collect() }
}

/// One comparison row per value of `param` in `values`.
pub fn sweep(base: &CostParams, param: Param, values: impl IntoIterator<Item = u64>) -> Vec<ComparisonRow> {
    values.into_iter().map(|v| compare(&base.with(param, v))).collect()
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:>4} {:>5} {:>5} {:>4} {:>6}", "n", "m", "t", "k", "l");
    for method in Method::ALL {
        out.push_str(&format!(" {:>12} {:>12}", format!("{} in", method.label()), format!("{} out", method.label())));
    }
    out.push('\n');
    for r in rows {
        let p = r.params;
        out.push_str(&format!("{:>4} {:>5} {:>5} {:>4} {:>6}", p.n, p.m, p.t, p.k, p.l));
        for c in &r.costs {
            out.push_str(&format!(" {:>12} {:>12}", c.input.to_string(), c.output.to_string()));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub stage: RoleId,
    pub analytic_in: Tokens,
    pub empirical_in: usize,
    /// (empirical - analytic) / analytic; absent when the analytic value is 0.
    pub deviation_in: Option<f64>,
    pub analytic_out: Tokens,
    pub empirical_out: usize,
    pub deviation_out: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub params: CostParams,
    pub rows: Vec<DeviationRow>,
}

fn deviation(analytic: Tokens, empirical: usize) -> Option<f64> {
    if analytic.0.is_zero() {
        return None;
    }
    let e = Ratio::from_integer(empirical as i128);
    ((e - analytic.0) / analytic.0).to_f64()
}

impl DeviationReport {
    pub fn to_table(&self) -> String {
        let fmt_dev = |d: Option<f64>| d.map_or_else(|| "n/a".to_string(), |d| format!("{:+.3}", d));
        let mut out = format!(
            "{:<16} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n",
            "stage", "model in", "trace in", "dev", "model out", "trace out", "dev"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}\n",
                r.stage.as_str(),
                r.analytic_in.to_string(),
                r.empirical_in,
                fmt_dev(r.deviation_in),
                r.analytic_out.to_string(),
                r.empirical_out,
                fmt_dev(r.deviation_out),
            ));
        }
        out
    }
}

/// Compares the analytic role-graph stages with the token tallies of a run.
pub fn compare_with_telemetry(
    telemetry: &Telemetry,
    params: &CostParams,
    retrieval: RetrievalAssumption,
) -> Result<DeviationReport, CostError> {
    let model = rolegraph_cost(params, retrieval);
    let mut rows = Vec::with_capacity(RoleId::ALL.len());
    for role in RoleId::ALL {
        let tally = telemetry
            .tokens
            .get(&role)
            .ok_or_else(|| CostError::MissingTelemetry(role.to_string()))?;
        let stage = model.stage(stage_name(role)).expect("every role has a stage");
        rows.push(DeviationRow {
            stage: role,
            analytic_in: stage.input,
            empirical_in: tally.accounted_in,
            deviation_in: deviation(stage.input, tally.accounted_in),
            analytic_out: stage.output,
            empirical_out: tally.accounted_out,
            deviation_out: deviation(stage.output, tally.accounted_out),
        });
    }
    Ok(DeviationReport { params: *params, rows })
}

/// Same as [`compare_with_telemetry`], reading the telemetry out of a run
/// trace file's JSON.
pub fn compare_with_trace(
    trace_json: &str,
    params: &CostParams,
    retrieval: RetrievalAssumption,
) -> Result<DeviationReport, CostError> {
    let value: serde_json::Value =
        serde_json::from_str(trace_json).map_err(|e| CostError::MalformedTrace(e.to_string()))?;
    let tokens = value
        .get("telemetry")
        .and_then(|t| t.get("tokens"))
        .ok_or_else(|| CostError::MissingTelemetry("telemetry.tokens".into()))?;
    for role in RoleId::ALL {
        if tokens.get(role.as_str()).is_none() {
            return Err(CostError::MissingTelemetry(role.to_string()));
        }
    }
    let telemetry: Telemetry = serde_json::from_value(value["telemetry"].clone())
        .map_err(|e| CostError::MalformedTrace(e.to_string()))?;
    compare_with_telemetry(&telemetry, params, retrieval)
}
