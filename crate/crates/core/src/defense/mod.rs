//! Supervision layer that identifies each agent's dual map from probe
//! responses, compares its 1-zone slope with the commissioned one, and
//! replaces falsified prices by reconstructed ones during negotiation.

pub mod detect;
pub mod em;
pub mod probe;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coordinator::{
    negotiate, Exchange, GlobalAllocation, NegotiationConfig, NegotiationOutcome,
};
use crate::error::{Error, Result};
use crate::local::{explicit_dual_piece, ActiveSet, LocalAgent};
use crate::model::AgentProblem;

pub use detect::{
    detect, estimate_t_inv, match_one_zone, reconstruct_lambda, DetectionResult, Reconstruction,
};
pub use em::{run_em, EmConfig, EmOutcome, MixtureParams, Responsibilities};
pub use probe::{collect_probe_responses, generate_probes, ProbeAllocations, ProbeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    /// Mixture components.
    pub z_count: usize,
    /// Probes per detection; `max(c + 1, 5c)` when unset.
    pub probe_count: Option<usize>,
    /// Probe box edge relative to the largest per-step budget entry.
    pub delta_rel: f64,
    /// Times the box is shrunk tenfold when a probe leaves the 1-zone.
    pub delta_retries: usize,
    pub eps_p: f64,
    /// Run detection every `stride` steps and reuse the last result between.
    pub stride: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub anneal_factor: f64,
    pub sigma_min_sq: f64,
    pub init_scale: f64,
    pub em_restarts: usize,
    /// Replace flagged agents' prices; detection alone when false.
    #[serde(skip)]
    pub correct: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            z_count: 2,
            probe_count: None,
            delta_rel: 1e-3,
            delta_retries: 3,
            eps_p: 1e-4,
            stride: 1,
            em_max_iters: em.max_iters,
            em_tol: em.tol,
            anneal_factor: em.anneal_factor,
            sigma_min_sq: em.sigma_min_sq,
            init_scale: em.init_scale,
            em_restarts: em.restarts,
            correct: true,
        }
    }
}

impl DefenseConfig {
    pub fn em(&self) -> EmConfig {
        EmConfig {
            max_iters: self.em_max_iters,
            tol: self.em_tol,
            anneal_factor: self.anneal_factor,
            sigma_min_sq: self.sigma_min_sq,
            init_scale: self.init_scale,
            restarts: self.em_restarts,
        }
    }

    pub fn probe_count_for(&self, c: usize) -> usize {
        self.probe_count.unwrap_or((c + 1).max(5 * c))
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_count == 0 {
            return Err(Error::invalid("defense.z_count", "must be >= 1"));
        }
        if !(self.delta_rel > 0.0 && self.delta_rel.is_finite()) {
            return Err(Error::invalid("defense.delta_rel", "must be > 0"));
        }
        if !(self.eps_p > 0.0) {
            return Err(Error::invalid("defense.eps_p", "must be > 0"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("defense.stride", "must be >= 1"));
        }
        self.em().validate()
    }
}

/// Slope of the truthful 1-zone piece, recorded before deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalRecord {
    pub p1_bar: DMatrix<f64>,
}

impl NominalRecord {
    pub fn commission(problem: &AgentProblem) -> Result<Self> {
        let piece = explicit_dual_piece(problem, &ActiveSet::all_coupling(problem.dim()))?;
        Ok(Self {
            p1_bar: piece.p_mat,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, k: usize, agent: usize, stream: u64) -> u64 {
    [k as u64, agent as u64, stream]
        .iter()
        .fold(splitmix64(seed), |acc, &v| splitmix64(acc ^ v))
}

const PROBE_STREAM: u64 = 1;
const EM_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SecureRound {
    pub outcome: NegotiationOutcome,
    pub detections: Vec<Option<DetectionResult>>,
    pub warnings: Vec<String>,
}

/// One agent's identification result at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub probes: ProbeSet,
    pub em: EmOutcome,
    pub one_zone: usize,
    pub detection: DetectionResult,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    pub cfg: DefenseConfig,
    pub records: Vec<NominalRecord>,
    seed: u64,
    last: Vec<Option<DetectionResult>>,
}

impl Supervisor {
    pub fn new(cfg: DefenseConfig, records: Vec<NominalRecord>, seed: u64) -> Self {
        let last = vec![None; records.len()];
        Self {
            cfg,
            records,
            seed,
            last,
        }
    }

    /// Probes `agent`, fits the mixture and compares the matched slope with
    /// the commissioned one. `Ok(None)` when the zero probe is outside the
    /// 1-zone, where the slope carries no information.
    pub fn identify(
        &self,
        agent_index: usize,
        agent: &LocalAgent,
        k: usize,
        budget: f64,
    ) -> Result<Option<Identification>> {
        let record = self
            .records
            .get(agent_index)
            .ok_or(Error::DimensionMismatch {
                context: "nominal records",
                expected: agent_index + 1,
                actual: self.records.len(),
            })?;
        let c = agent.problem.dim();
        let o_count = self.cfg.probe_count_for(c);
        let probe_seed = derive_seed(self.seed, k, agent_index, PROBE_STREAM);
        let mut delta = self.cfg.delta_rel * budget;
        let mut attempt = 0;
        let probes = loop {
            let allocations = generate_probes(c, o_count, delta, probe_seed)?;
            let set = collect_probe_responses(agent, &allocations, k)?;
            if !set.active_sets[set.zero_index].is_all_coupling() {
                return Ok(None);
            }
            if set.all_in_one_zone() && set.count() == o_count || attempt >= self.cfg.delta_retries
            {
                break set;
            }
            attempt += 1;
            delta *= 0.1;
        };
        let em = run_em(
            &probes,
            self.cfg.z_count,
            &self.cfg.em(),
            derive_seed(self.seed, k, agent_index, EM_STREAM),
            Some(&record.p1_bar),
        )?;
        let one_zone = match_one_zone(&em.zeta, probes.zero_index);
        let detection = detect(
            em.params.p_mats[one_zone].clone(),
            em.params.s_vecs[one_zone].clone(),
            &record.p1_bar,
            self.cfg.eps_p,
        )?;
        Ok(Some(Identification {
            probes,
            em,
            one_zone,
            detection,
        }))
    }

    /// Detection for every agent followed by a negotiation in which flagged
    /// agents' prices are replaced by `max(T̂⁻¹ λ̃, 0)`.
    pub fn secure_round(
        &mut self,
        agents: &[LocalAgent],
        k: usize,
        theta: &GlobalAllocation,
        negotiation: &NegotiationConfig,
    ) -> Result<SecureRound> {
        self.cfg.validate()?;
        if agents.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                context: "supervised agents",
                expected: self.records.len(),
                actual: agents.len(),
            });
        }
        let budget = theta.u_max_stacked.amax();
        let mut warnings = Vec::new();
        if k.is_multiple_of(self.cfg.stride) {
            for (i, agent) in agents.iter().enumerate() {
                self.last[i] = match self.identify(i, agent, k, budget) {
                    Ok(Some(id)) => {
                        if !id.em.converged {
                            warnings.push(format!(
                                "agent {i}: EM stopped after {} iterations",
                                id.em.iterations
                            ));
                        }
                        if id.detection.flag && id.detection.t_inv_hat.is_none() {
                            warnings.push(format!(
                                "agent {i}: flagged but estimated slope is not invertible"
                            ));
                        }
                        Some(id.detection)
                    }
                    Ok(None) => {
                        warnings.push(format!(
                            "agent {i}: zero probe outside the 1-zone; detection skipped"
                        ));
                        None
                    }
                    Err(e) => {
                        warnings.push(format!(
                            "agent {i}: detection failed ({e}); prices used as received"
                        ));
                        None
                    }
                };
            }
        }

        let corrections: Vec<Option<DMatrix<f64>>> = self
            .last
            .iter()
            .map(|d| {
                d.as_ref()
                    .filter(|d| self.cfg.correct && d.flag)
                    .and_then(|d| d.t_inv_hat.clone())
            })
            .collect();
        let mut clipped = vec![0usize; agents.len()];
        let mut inconsistent = vec![false; agents.len()];
        let mut source = |i: usize, th: &DVector<f64>| -> Result<Exchange> {
            let resp = agents[i].respond(th, k)?;
            let used = match &corrections[i] {
                Some(t_inv) => {
                    let rec = reconstruct_lambda(t_inv, &resp.sent);
                    clipped[i] += rec.clipped;
                    inconsistent[i] |= rec.inconsistent;
                    rec.lambda
                }
                None => resp.sent.clone(),
            };
            Ok(Exchange {
                solution: resp.solution,
                received: resp.sent,
                used,
            })
        };
        let outcome = negotiate(theta, negotiation, &mut source)?;
        for i in 0..agents.len() {
            if inconsistent[i] {
                warnings.push(format!(
                    "agent {i}: reconstructed prices went negative ({} entries clipped)",
                    clipped[i]
                ));
            }
        }
        for w in &warnings {
            log::warn!("step {k}: {w}");
        }
        Ok(SecureRound {
            outcome,
            detections: self.last.clone(),
            warnings,
        })
    }
}
