//! Master problem: projected-subgradient negotiation over the allocation set
//! `S = {θ : Σ_i θ_i ⪯ U_max, θ_i ⪰ 0}` and the receding-horizon loop.

use nalgebra::{DMatrix, DVector};

use crate::defense::{self, DefenseConfig, DetectionResult, NominalRecord};
use crate::error::{Error, Result};
use crate::linalg::repeat_vec;
use crate::local::{AgentResponse, AttackSpec, LocalAgent, LocalSolution};
use crate::model::{prediction_matrices, AgentProblem, DiscreteLti, PredictionOperator};
use crate::qp::{self, ActiveSetOptions};

/// Per-agent allocations over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAllocation {
    pub thetas: Vec<DVector<f64>>,
    /// `U_max = 1_Np ⊗ u_max`.
    pub u_max_stacked: DVector<f64>,
}

impl GlobalAllocation {
    /// `U_max / M` for every agent.
    pub fn equal_split(u_max_stacked: &DVector<f64>, n_agents: usize) -> Self {
        let share = u_max_stacked / n_agents as f64;
        Self {
            thetas: vec![share; n_agents],
            u_max_stacked: u_max_stacked.clone(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.thetas.len()
    }

    pub fn contains(&self, tol: f64) -> bool {
        let c = self.u_max_stacked.len();
        (0..c).all(|r| {
            let sum: f64 = self.thetas.iter().map(|t| t[r]).sum();
            sum <= self.u_max_stacked[r] + tol && self.thetas.iter().all(|t| t[r] >= -tol)
        })
    }

    pub fn stacked(&self) -> DVector<f64> {
        let c = self.u_max_stacked.len();
        DVector::from_fn(c * self.n_agents(), |i, _| self.thetas[i / c][i % c])
    }

    /// Shifts every allocation one block of `n_u` ahead, repeating the last
    /// block. Membership in `S` is preserved coordinate-wise.
    pub fn shifted(&self, n_u: usize) -> Self {
        let c = self.u_max_stacked.len();
        let thetas = self
            .thetas
            .iter()
            .map(|t| {
                DVector::from_fn(c, |i, _| {
                    if i + n_u < c {
                        t[i + n_u]
                    } else {
                        t[c - n_u + i % n_u]
                    }
                })
            })
            .collect();
        Self {
            thetas,
            u_max_stacked: self.u_max_stacked.clone(),
        }
    }

    fn distance(&self, other: &Self) -> f64 {
        self.thetas
            .iter()
            .zip(&other.thetas)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

/// Euclidean projection of `values` onto `{x ⪰ 0, Σx ≤ cap}`.
fn project_capped_simplex(values: &[f64], cap: f64) -> Vec<f64> {
    let positive_sum: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if positive_sum <= cap {
        return values.iter().map(|v| v.max(0.0)).collect();
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut tau = 0.0;
    let mut cumulative = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - cap) / (j + 1) as f64;
        if v - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    values.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// `Proj^S(v)`; the set decomposes into one capped simplex per resource
/// coordinate across the agents.
pub fn project_onto_allocation_set(
    v: &[DVector<f64>],
    u_max_stacked: &DVector<f64>,
) -> GlobalAllocation {
    let c = u_max_stacked.len();
    let mut thetas = vec![DVector::zeros(c); v.len()];
    let mut column = vec![0.0; v.len()];
    for r in 0..c {
        for (i, vi) in v.iter().enumerate() {
            column[i] = vi[r];
        }
        let projected = project_capped_simplex(&column, u_max_stacked[r]);
        for (i, value) in projected.into_iter().enumerate() {
            thetas[i][r] = value;
        }
    }
    GlobalAllocation {
        thetas,
        u_max_stacked: u_max_stacked.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegotiationConfig {
    pub rho0: f64,
    /// Step decay: `ρ_p = ρ0 / (1 + p / β)`.
    pub beta: f64,
    pub eps_theta: f64,
    pub max_iters: usize,
}

impl NegotiationConfig {
    /// Defaults scaled to the per-step budget `u_max`.
    pub fn for_budget(u_max: &DVector<f64>, n_p: usize) -> Self {
        let stacked_norm = u_max.norm() * (n_p as f64).sqrt();
        Self {
            rho0: 0.05 * u_max.norm(),
            beta: 10.0,
            eps_theta: 1e-8 * stacked_norm.max(1.0),
            max_iters: 5000,
        }
    }

    pub fn step(&self, p: usize) -> f64 {
        self.rho0 / (1.0 + p as f64 / self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) {
            return Err(Error::invalid("negotiation.rho0", "must be > 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("negotiation.beta", "must be > 0"));
        }
        if !(self.eps_theta > 0.0) {
            return Err(Error::invalid("negotiation.eps_theta", "must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("negotiation.max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// One price exchange with one agent as seen by the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub solution: LocalSolution,
    /// What came over the wire.
    pub received: DVector<f64>,
    /// What the allocation update consumes.
    pub used: DVector<f64>,
}

/// Where the coordinator gets prices from during a negotiation.
pub trait DualSource {
    fn exchange(&mut self, agent: usize, theta: &DVector<f64>) -> Result<Exchange>;
}

/// Plain negotiation: the coordinator trusts whatever the agents send.
pub struct TrustingSource<'a> {
    pub agents: &'a [LocalAgent],
    pub step: usize,
}

impl DualSource for TrustingSource<'_> {
    fn exchange(&mut self, agent: usize, theta: &DVector<f64>) -> Result<Exchange> {
        let AgentResponse { solution, sent } = self.agents[agent].respond(theta, self.step)?;
        Ok(Exchange {
            solution,
            used: sent.clone(),
            received: sent,
        })
    }
}

impl<F> DualSource for F
where
    F: FnMut(usize, &DVector<f64>) -> Result<Exchange>,
{
    fn exchange(&mut self, agent: usize, theta: &DVector<f64>) -> Result<Exchange> {
        self(agent, theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationOutcome {
    pub allocation: GlobalAllocation,
    /// Exchanges at the returned allocation.
    pub exchanges: Vec<Exchange>,
    pub iterations: usize,
    /// `‖θ^(p) - θ^(p-1)‖` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Projected-subgradient negotiation
/// `θ^(p+1) = Proj^S(θ^(p) + ρ_p λ^(p))`, repeated until the allocation
/// moves less than `eps_theta` or `max_iters` rounds have been played.
pub fn negotiate(
    theta_init: &GlobalAllocation,
    cfg: &NegotiationConfig,
    source: &mut dyn DualSource,
) -> Result<NegotiationOutcome> {
    cfg.validate()?;
    let n_agents = theta_init.n_agents();
    let mut theta = theta_init.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let rho = cfg.step(iterations);
        let mut moved = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let ex = source.exchange(i, &theta.thetas[i])?;
            moved.push(&theta.thetas[i] + rho * &ex.used);
        }
        let next = project_onto_allocation_set(&moved, &theta.u_max_stacked);
        residual = next.distance(&theta);
        theta = next;
        iterations += 1;
        if residual <= cfg.eps_theta {
            converged = true;
            break;
        }
    }
    let exchanges = (0..n_agents)
        .map(|i| source.exchange(i, &theta.thetas[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(NegotiationOutcome {
        allocation: theta,
        exchanges,
        iterations,
        residual,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub inputs: Vec<DVector<f64>>,
    /// `Σ_i J_i` including the constant parts.
    pub objective: f64,
}

/// Monolithic problem: `min Σ 1/2 U_i'H_iU_i + f_i'U_i` subject to
/// `Σ Γ̄_i U_i ⪯ U_max` and `U_i ⪰ 0`.
pub fn centralized_solve(
    problems: &[AgentProblem],
    u_max_stacked: &DVector<f64>,
) -> Result<CentralizedSolution> {
    let c = u_max_stacked.len();
    let m = problems.len();
    let n = c * m;
    let mut h = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    let mut a = DMatrix::zeros(c + n, n);
    let mut b = DVector::zeros(c + n);
    b.rows_mut(0, c).copy_from(u_max_stacked);
    for (i, prob) in problems.iter().enumerate() {
        if prob.dim() != c {
            return Err(Error::DimensionMismatch {
                context: "centralized agent dimension",
                expected: c,
                actual: prob.dim(),
            });
        }
        h.view_mut((i * c, i * c), (c, c)).copy_from(&prob.h);
        f.rows_mut(i * c, c).copy_from(&prob.f);
        a.view_mut((0, i * c), (c, c)).copy_from(&prob.gamma_bar);
    }
    a.view_mut((c, 0), (n, n))
        .copy_from(&(-DMatrix::<f64>::identity(n, n)));
    let sol = qp::solve(
        &h,
        &f,
        &a,
        &b,
        &DVector::zeros(n),
        &ActiveSetOptions::default(),
    )?;
    let inputs: Vec<DVector<f64>> = (0..m).map(|i| sol.x.rows(i * c, c).into_owned()).collect();
    let objective = problems
        .iter()
        .zip(&inputs)
        .map(|(p, u)| p.objective(u))
        .sum();
    Ok(CentralizedSolution { inputs, objective })
}

/// Everything the loop needs about one room controller.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub model: DiscreteLti,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub reference: DVector<f64>,
    pub x0: DVector<f64>,
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSetup {
    pub agents: Vec<AgentSpec>,
    pub n_p: usize,
    pub n_steps: usize,
    /// Per-step budget `u_max`.
    pub u_max: DVector<f64>,
    pub negotiation: NegotiationConfig,
    pub defense: Option<DefenseConfig>,
    pub seed: u64,
}

impl ClosedLoopSetup {
    pub fn u_max_stacked(&self) -> DVector<f64> {
        repeat_vec(&self.u_max, self.n_p)
    }

    pub fn n_u(&self) -> usize {
        self.u_max.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    /// State at the start of the step.
    pub x: DVector<f64>,
    /// Applied input `u*[k|k]`.
    pub u: DVector<f64>,
    /// Output after applying the input, `y[k+1]`.
    pub y: DVector<f64>,
    pub theta: DVector<f64>,
    /// Final prices as received by the coordinator.
    pub lambda_received: DVector<f64>,
    /// Final prices the coordinator used for the update.
    pub lambda_used: DVector<f64>,
    /// Horizon cost `J_i[k]` of the converged local plan.
    pub horizon_cost: f64,
    pub detection: Option<DetectionResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub agents: Vec<AgentStep>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub steps: Vec<StepRecord>,
}

impl ClosedLoopTrace {
    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, |s| s.agents.len())
    }
}

/// Local problems of every agent at the given states.
pub fn build_problems(
    setup: &ClosedLoopSetup,
    preds: &[PredictionOperator],
    states: &[DVector<f64>],
) -> Result<Vec<AgentProblem>> {
    setup
        .agents
        .iter()
        .zip(preds)
        .zip(states)
        .map(|((spec, pred), x)| {
            AgentProblem::tracking(pred, &spec.q, &spec.r, &spec.gamma, x, &spec.reference)
        })
        .collect()
}

/// Receding-horizon simulation: at every step run the (optionally
/// supervised) negotiation, apply the first input block of each converged
/// local plan and advance the models.
pub fn run_closed_loop(setup: &ClosedLoopSetup) -> Result<ClosedLoopTrace> {
    if setup.agents.is_empty() {
        return Err(Error::invalid("rooms", "at least one agent is required"));
    }
    let n_u = setup.n_u();
    let u_max_stacked = setup.u_max_stacked();
    let preds = setup
        .agents
        .iter()
        .map(|a| {
            if a.model.n_u() != n_u {
                return Err(Error::DimensionMismatch {
                    context: "agent input count",
                    expected: n_u,
                    actual: a.model.n_u(),
                });
            }
            prediction_matrices(&a.model, setup.n_p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<DVector<f64>> = setup.agents.iter().map(|a| a.x0.clone()).collect();

    let nominal = match &setup.defense {
        Some(_) => {
            let problems = build_problems(setup, &preds, &states)?;
            Some(
                problems
                    .iter()
                    .map(NominalRecord::commission)
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let mut supervisor = match (&setup.defense, nominal) {
        (Some(cfg), Some(records)) => {
            Some(defense::Supervisor::new(cfg.clone(), records, setup.seed))
        }
        _ => None,
    };

    let mut theta = GlobalAllocation::equal_split(&u_max_stacked, setup.agents.len());
    let mut steps = Vec::with_capacity(setup.n_steps);
    for k in 0..setup.n_steps {
        let problems = build_problems(setup, &preds, &states).map_err(|e| e.at_step(k))?;
        let agents: Vec<LocalAgent> = problems
            .into_iter()
            .zip(&setup.agents)
            .map(|(problem, spec)| LocalAgent {
                problem,
                attack: spec.attack.clone(),
            })
            .collect();

        let (outcome, detections, warnings) = match supervisor.as_mut() {
            Some(sup) => {
                let round = sup
                    .secure_round(&agents, k, &theta, &setup.negotiation)
                    .map_err(|e| e.at_step(k))?;
                (round.outcome, round.detections, round.warnings)
            }
            None => {
                let mut source = TrustingSource {
                    agents: &agents,
                    step: k,
                };
                let outcome =
                    negotiate(&theta, &setup.negotiation, &mut source).map_err(|e| e.at_step(k))?;
                (outcome, vec![None; agents.len()], Vec::new())
            }
        };
        let mut warnings = warnings;
        if !outcome.converged {
            warnings.push(format!(
                "negotiation did not converge in {} iterations (residual {:e})",
                outcome.iterations, outcome.residual
            ));
            log::warn!("step {k}: {}", warnings.last().unwrap());
        }

        let mut agent_steps = Vec::with_capacity(agents.len());
        for (i, (spec, agent)) in setup.agents.iter().zip(&agents).enumerate() {
            let ex = &outcome.exchanges[i];
            let u = ex.solution.u_star.rows(0, n_u).into_owned();
            let x_next = spec.model.step(&states[i], &u);
            let y = spec.model.output(&x_next);
            agent_steps.push(AgentStep {
                x: states[i].clone(),
                u,
                y,
                theta: outcome.allocation.thetas[i].clone(),
                lambda_received: ex.received.clone(),
                lambda_used: ex.used.clone(),
                horizon_cost: agent.problem.objective(&ex.solution.u_star),
                detection: detections[i].clone(),
            });
            states[i] = x_next;
        }
        steps.push(StepRecord {
            k,
            agents: agent_steps,
            iterations: outcome.iterations,
            residual: outcome.residual,
            converged: outcome.converged,
            warnings,
        });
        theta = outcome.allocation.shifted(n_u);
    }
    Ok(ClosedLoopTrace { steps })
}
