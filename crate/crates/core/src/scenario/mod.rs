//! Benchmark scenarios: configuration, execution, objectives and reports.

pub mod config;
pub mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coordinator::{run_closed_loop, AgentSpec, ClosedLoopTrace};
use crate::error::{Error, Result};

pub use config::ScenarioConfig;
pub use report::{emit_report, read_trace_csv, trace_rows, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No attack.
    Nominal,
    /// Attack on, prices trusted (detection still reported when enabled).
    Selfish,
    /// Attack on, flagged prices reconstructed.
    Corrected,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nominal => "nominal",
            Mode::Selfish => "selfish",
            Mode::Corrected => "corrected",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Mode::Nominal),
            "selfish" => Ok(Mode::Selfish),
            "corrected" => Ok(Mode::Corrected),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub per_agent: Vec<f64>,
    pub global: f64,
    pub baseline_per_agent: Option<Vec<f64>>,
    pub baseline_global: Option<f64>,
    /// `100 (J - J_base) / J_base`.
    pub percent_error_per_agent: Option<Vec<f64>>,
    pub percent_error_global: Option<f64>,
}

fn percent(value: f64, base: f64) -> f64 {
    100.0 * (value - base) / base
}

/// Realized cost `J_i = Σ_k ‖w_i - y_i[k+1]‖²_Q + ‖u_i[k]‖²_R` over the run.
pub fn compute_objectives(
    trace: &ClosedLoopTrace,
    agents: &[AgentSpec],
    baseline: Option<&ObjectiveReport>,
) -> Result<ObjectiveReport> {
    let mut per_agent = vec![0.0; agents.len()];
    for step in &trace.steps {
        if step.agents.len() != agents.len() {
            return Err(Error::DimensionMismatch {
                context: "agents in trace step",
                expected: agents.len(),
                actual: step.agents.len(),
            });
        }
        for (i, (rec, spec)) in step.agents.iter().zip(agents).enumerate() {
            let e = &spec.reference - &rec.y;
            per_agent[i] += e.dot(&(&spec.q * &e)) + rec.u.dot(&(&spec.r * &rec.u));
        }
    }
    let global = per_agent.iter().sum();
    let (baseline_per_agent, baseline_global, percent_error_per_agent, percent_error_global) =
        match baseline {
            Some(b) => {
                if b.per_agent.len() != per_agent.len() {
                    return Err(Error::DimensionMismatch {
                        context: "baseline agents",
                        expected: per_agent.len(),
                        actual: b.per_agent.len(),
                    });
                }
                let pe = per_agent
                    .iter()
                    .zip(&b.per_agent)
                    .map(|(&v, &base)| percent(v, base))
                    .collect();
                (
                    Some(b.per_agent.clone()),
                    Some(b.global),
                    Some(pe),
                    Some(percent(global, b.global)),
                )
            }
            None => (None, None, None, None),
        };
    Ok(ObjectiveReport {
        per_agent,
        global,
        baseline_per_agent,
        baseline_global,
        percent_error_per_agent,
        percent_error_global,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub mode: Mode,
    pub trace: ClosedLoopTrace,
    pub report: ObjectiveReport,
}

/// Runs one mode without a baseline comparison.
pub fn simulate(cfg: &ScenarioConfig, mode: Mode) -> Result<(ClosedLoopTrace, Vec<AgentSpec>)> {
    if mode != Mode::Nominal && cfg.attack.is_none() {
        return Err(Error::invalid(
            "attack",
            format!("{mode} mode needs an attack"),
        ));
    }
    if mode == Mode::Corrected && !cfg.defense_enabled {
        return Err(Error::invalid(
            "defense_enabled",
            "corrected mode needs the defense",
        ));
    }
    let defense = cfg.defense_enabled.then(|| {
        let mut d = cfg.defense.clone();
        d.correct = mode == Mode::Corrected;
        d
    });
    let setup = cfg.to_setup(mode != Mode::Nominal, defense)?;
    let trace = run_closed_loop(&setup)?;
    Ok((trace, setup.agents))
}

/// Runs `mode`; attacked modes are compared against a nominal run.
pub fn run_scenario(cfg: &ScenarioConfig, mode: Mode) -> Result<ScenarioRun> {
    let baseline = match mode {
        Mode::Nominal => None,
        _ => {
            let (trace, agents) = simulate(cfg, Mode::Nominal)?;
            Some(compute_objectives(&trace, &agents, None)?)
        }
    };
    let (trace, agents) = simulate(cfg, mode)?;
    let report = compute_objectives(&trace, &agents, baseline.as_ref())?;
    Ok(ScenarioRun {
        mode,
        trace,
        report,
    })
}
