//! Registration reports and per-iteration energy traces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::RigidTransform;

/// Registration method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Icp,
    FastIcp,
    RobustIcp,
    IcpPl,
    RobustIcpPl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Icp,
        Method::FastIcp,
        Method::RobustIcp,
        Method::IcpPl,
        Method::RobustIcpPl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Icp => "icp",
            Method::FastIcp => "fast-icp",
            Method::RobustIcp => "robust-icp",
            Method::IcpPl => "icp-pl",
            Method::RobustIcpPl => "robust-icp-pl",
        }
    }

    /// Point-to-plane methods need target normals.
    pub fn needs_normals(&self) -> bool {
        matches!(self, Method::IcpPl | Method::RobustIcpPl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// How an accepted iterate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// Anderson-accelerated candidate passed the energy check.
    #[serde(rename = "AA")]
    Aa,
    /// Un-accelerated fixed-point step.
    #[serde(rename = "plain")]
    Plain,
    /// Step found by backtracking along the candidate direction.
    #[serde(rename = "linesearch")]
    LineSearch,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Aa => "AA",
            StepKind::Plain => "plain",
            StepKind::LineSearch => "linesearch",
        }
    }
}

impl FromStr for StepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AA" => Ok(StepKind::Aa),
            "plain" => Ok(StepKind::Plain),
            "linesearch" => Ok(StepKind::LineSearch),
            _ => Err(Error::Format(format!("unknown step kind '{s}'"))),
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Zero-based ν stage.
    pub stage: usize,
    /// One-based iterate index within the stage.
    pub iter: usize,
    /// Kernel scale, absent for the ℓ2 methods.
    pub nu: Option<f64>,
    pub energy: f64,
    pub step: StepKind,
    /// Frobenius norm of the change measured by the convergence test.
    pub delta_t_fro: f64,
    /// Milliseconds since the solver started.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnergyTrace {
    records: Vec<TraceRecord>,
}

impl EnergyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Records whose energy exceeds the previous record of the same stage.
    pub fn monotonicity_violations(&self) -> Vec<&TraceRecord> {
        self.records
            .windows(2)
            .filter(|w| w[0].stage == w[1].stage && w[1].energy > w[0].energy)
            .map(|w| &w[1])
            .collect()
    }

    /// Distinct stage scales in order of appearance.
    pub fn stage_nus(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = Vec::new();
        let mut last_stage = None;
        for r in &self.records {
            if last_stage != Some(r.stage) {
                out.push(r.nu);
                last_stage = Some(r.stage);
            }
        }
        out
    }
}

/// Outcome of one registration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub method: Method,
    pub final_transform: RigidTransform,
    pub trace: EnergyTrace,
    /// Present iff a ground-truth transform was supplied.
    pub rmse: Option<f64>,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    pub nu_max: Option<f64>,
    pub nu_min: Option<f64>,
    /// Human-readable statement of the stopping rule.
    pub convergence_test: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RegistrationReport {
    pub fn final_energy(&self) -> Option<f64> {
        self.trace.last().map(|r| r.energy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: usize, iter: usize, energy: f64) -> TraceRecord {
        TraceRecord {
            stage,
            iter,
            nu: Some(1.0 / (stage + 1) as f64),
            energy,
            step: StepKind::Plain,
            delta_t_fro: 0.0,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("sparse-icp".parse::<Method>().is_err());
    }

    #[test]
    fn violations_are_per_stage() {
        let trace = EnergyTrace::from_records(vec![
            rec(0, 1, 5.0),
            rec(0, 2, 4.0),
            rec(1, 1, 9.0),
            rec(1, 2, 9.0),
            rec(1, 3, 9.5),
        ]);
        let v = trace.monotonicity_violations();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].stage, v[0].iter), (1, 3));
        assert_eq!(trace.stage_nus(), vec![Some(1.0), Some(0.5)]);
    }

    #[test]
    fn step_kind_strings() {
        for s in [StepKind::Aa, StepKind::Plain, StepKind::LineSearch] {
            assert_eq!(s.as_str().parse::<StepKind>().unwrap(), s);
        }
    }
}
