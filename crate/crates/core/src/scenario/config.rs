use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coordinator::{AgentSpec, ClosedLoopSetup, NegotiationConfig};
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::local::AttackSpec;
use crate::model::{build_thermal_model, discretize_zoh, ThermalParams};

pub const BENCHMARK_TOML: &str = include_str!("../../configs/benchmark.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    /// Output weight per room.
    pub q: Vec<f64>,
    /// Input weight per room.
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Zero-based room index.
    pub agent: usize,
    /// Rows of `T`, `N_p x N_p`.
    pub t_mat: Vec<Vec<f64>>,
    pub active_from: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegotiationOverrides {
    pub rho0: Option<f64>,
    pub beta: Option<f64>,
    pub eps_theta: Option<f64>,
    pub max_iters: Option<usize>,
}

fn default_ts_hours() -> f64 {
    0.25
}
fn default_n_p() -> usize {
    4
}
fn default_n_steps() -> usize {
    50
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rooms: Vec<ThermalParams>,
    #[serde(default = "default_ts_hours")]
    pub ts_hours: f64,
    #[serde(default = "default_n_p")]
    pub n_p: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Cap on the summed inputs at every step.
    pub budget: f64,
    /// Setpoints, 25.5 for every room when omitted.
    #[serde(default)]
    pub references: Vec<f64>,
    /// Initial `[air, walls]` temperatures, zero when omitted.
    #[serde(default)]
    pub initial_states: Vec<[f64; 2]>,
    #[serde(default)]
    pub weights: Option<Weights>,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default = "default_true")]
    pub defense_enabled: bool,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub negotiation: NegotiationOverrides,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_REFERENCE: f64 = 25.5;
pub const DEFAULT_Q: f64 = 1.0;
pub const DEFAULT_R: f64 = 1e-4;

fn positive(field: String, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            field,
            reason: format!("must be > 0, got {value}"),
        })
    }
}

fn per_room<T: Clone>(field: &str, values: &[T], rooms: usize, fallback: T) -> Result<Vec<T>> {
    match values.len() {
        0 => Ok(vec![fallback; rooms]),
        n if n == rooms => Ok(values.to_vec()),
        n => Err(Error::invalid(
            field,
            format!("expected {rooms} entries, got {n}"),
        )),
    }
}

impl ScenarioConfig {
    pub fn benchmark() -> Self {
        Self::from_toml_str(BENCHMARK_TOML, Path::new("benchmark.toml"))
            .expect("bundled benchmark is valid")
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|span| {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line}, column {column}: ")
                })
                .unwrap_or_default();
            Error::Config {
                path: path.to_path_buf(),
                message: format!("{location}{}", e.message()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn ts_seconds(&self) -> f64 {
        self.ts_hours * 3600.0
    }

    pub fn references(&self) -> Vec<f64> {
        per_room(
            "references",
            &self.references,
            self.rooms.len(),
            DEFAULT_REFERENCE,
        )
        .expect("validated")
    }

    pub fn initial_states(&self) -> Vec<[f64; 2]> {
        per_room(
            "initial_states",
            &self.initial_states,
            self.rooms.len(),
            [0.0; 2],
        )
        .expect("validated")
    }

    pub fn weights(&self) -> Weights {
        let n = self.rooms.len();
        match &self.weights {
            Some(w) => w.clone(),
            None => Weights {
                q: vec![DEFAULT_Q; n],
                r: vec![DEFAULT_R; n],
            },
        }
    }

    pub fn negotiation_config(&self) -> NegotiationConfig {
        let base = NegotiationConfig::for_budget(&DVector::from_element(1, self.budget), self.n_p);
        let o = &self.negotiation;
        NegotiationConfig {
            rho0: o.rho0.unwrap_or(base.rho0),
            beta: o.beta.unwrap_or(base.beta),
            eps_theta: o.eps_theta.unwrap_or(base.eps_theta),
            max_iters: o.max_iters.unwrap_or(base.max_iters),
        }
    }

    pub fn attack_spec(&self) -> Result<Option<(usize, AttackSpec)>> {
        let Some(a) = &self.attack else {
            return Ok(None);
        };
        let n = self.n_p;
        if a.t_mat.len() != n || a.t_mat.iter().any(|row| row.len() != n) {
            return Err(Error::invalid("attack.t_mat", format!("must be {n} x {n}")));
        }
        let t = DMatrix::from_fn(n, n, |i, j| a.t_mat[i][j]);
        Ok(Some((a.agent, AttackSpec::new(t, a.active_from)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rooms.is_empty() {
            return Err(Error::invalid("rooms", "at least one room is required"));
        }
        for (i, room) in self.rooms.iter().enumerate() {
            room.validate().map_err(|e| match e {
                Error::InvalidParameter { field, reason } => Error::InvalidParameter {
                    field: format!("rooms[{i}].{field}"),
                    reason,
                },
                other => other,
            })?;
        }
        positive("ts_hours".into(), self.ts_hours)?;
        positive("budget".into(), self.budget)?;
        if self.n_p == 0 {
            return Err(Error::invalid("n_p", "must be >= 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be >= 1"));
        }
        let n = self.rooms.len();
        per_room("references", &self.references, n, 0.0)?;
        per_room("initial_states", &self.initial_states, n, [0.0; 2])?;
        if self
            .references
            .iter()
            .chain(self.initial_states.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("references", "values must be finite"));
        }
        if let Some(w) = &self.weights {
            if w.q.len() != n {
                return Err(Error::invalid(
                    "weights.q",
                    format!("expected {n} entries, got {}", w.q.len()),
                ));
            }
            if w.r.len() != n {
                return Err(Error::invalid(
                    "weights.r",
                    format!("expected {n} entries, got {}", w.r.len()),
                ));
            }
            for (i, &q) in w.q.iter().enumerate() {
                if !(q >= 0.0 && q.is_finite()) {
                    return Err(Error::invalid(format!("weights.q[{i}]"), "must be >= 0"));
                }
            }
            for (i, &r) in w.r.iter().enumerate() {
                positive(format!("weights.r[{i}]"), r)?;
            }
        }
        if let Some(a) = &self.attack {
            if a.agent >= n {
                return Err(Error::invalid(
                    "attack.agent",
                    format!("room index {} out of range", a.agent),
                ));
            }
            self.attack_spec()?;
        }
        self.negotiation_config().validate()?;
        self.defense.validate()?;
        Ok(())
    }

    /// Closed-loop setup; the attack is kept only when `with_attack` is set.
    pub fn to_setup(
        &self,
        with_attack: bool,
        defense: Option<DefenseConfig>,
    ) -> Result<ClosedLoopSetup> {
        self.validate()?;
        let attack = if with_attack {
            self.attack_spec()?
        } else {
            None
        };
        let weights = self.weights();
        let references = self.references();
        let states = self.initial_states();
        let agents = self
            .rooms
            .iter()
            .enumerate()
            .map(|(i, room)| {
                let model = discretize_zoh(&build_thermal_model(room)?, self.ts_seconds())?;
                Ok(AgentSpec {
                    model,
                    q: DMatrix::from_element(1, 1, weights.q[i]),
                    r: DMatrix::from_element(1, 1, weights.r[i]),
                    gamma: DMatrix::identity(1, 1),
                    reference: DVector::from_element(1, references[i]),
                    x0: DVector::from_column_slice(&states[i]),
                    attack: attack
                        .as_ref()
                        .filter(|(agent, _)| *agent == i)
                        .map(|(_, spec)| spec.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClosedLoopSetup {
            agents,
            n_p: self.n_p,
            n_steps: self.n_steps,
            u_max: DVector::from_element(1, self.budget),
            negotiation: self.negotiation_config(),
            defense,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ScenarioConfig> {
        ScenarioConfig::from_toml_str(text, Path::new("test.toml"))
    }

    const ONE_ROOM: &str = r#"
budget = 4.0
[[rooms]]
c_air = 7.5e4
c_walls = 5.4e4
r_oa_ia = 5.2e-3
r_iw_ia = 2.3e-4
r_ow_oa = 1.5e-4
"#;

    #[test]
    fn benchmark_values() {
        let cfg = ScenarioConfig::benchmark();
        assert_eq!(cfg.rooms.len(), 4);
        assert_eq!(cfg.n_p, 4);
        assert_eq!(cfg.n_steps, 50);
        assert_eq!(cfg.ts_seconds(), 900.0);
        assert_eq!(cfg.budget, 4000.0);
        let walls: Vec<f64> = cfg.rooms.iter().map(|r| r.c_walls).collect();
        assert_eq!(walls, vec![5.4e4, 4.9e4, 4.7e4, 4.7e4]);
        let air: Vec<f64> = cfg.rooms.iter().map(|r| r.c_air).collect();
        assert_eq!(air, vec![7.5e4, 8.4e4, 8.2e4, 7.7e4]);
        let roa: Vec<f64> = cfg.rooms.iter().map(|r| r.r_oa_ia).collect();
        assert_eq!(roa, vec![5.2e-3, 4.6e-3, 4.9e-3, 5.4e-3]);
        let riw: Vec<f64> = cfg.rooms.iter().map(|r| r.r_iw_ia).collect();
        assert_eq!(riw, vec![2.3e-4, 2.4e-4, 2.3e-4, 2.9e-4]);
        let row: Vec<f64> = cfg.rooms.iter().map(|r| r.r_ow_oa).collect();
        assert_eq!(row, vec![1.5e-4, 0.6e-4, 0.7e-4, 0.7e-4]);
        let (agent, attack) = cfg.attack_spec().unwrap().unwrap();
        assert_eq!(agent, 0);
        assert_eq!(attack.active_from, 25);
        assert_eq!(attack.t_mat[(0, 0)], 14.43288267);
        assert_eq!(attack.t_mat[(3, 3)], 3.4447393);
        assert_eq!(cfg.references(), vec![25.5; 4]);
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(ONE_ROOM).unwrap();
        assert_eq!(cfg.n_steps, 50);
        assert_eq!(cfg.references(), vec![25.5]);
        assert_eq!(cfg.initial_states(), vec![[0.0, 0.0]]);
        assert_eq!(cfg.weights().r, vec![1e-4]);
        assert!(cfg.defense_enabled);
        assert!(cfg.defense.correct);
    }

    #[test]
    fn missing_rooms_named() {
        let err = parse("budget = 4.0\n").unwrap_err().to_string();
        assert!(err.contains("rooms"), "{err}");
    }

    #[test]
    fn negative_budget_named() {
        let err = parse(&ONE_ROOM.replace("budget = 4.0", "budget = -1.0")).unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn bad_room_field_has_path() {
        let err = parse(&ONE_ROOM.replace("c_air = 7.5e4", "c_air = 0.0")).unwrap_err();
        assert!(err.to_string().contains("rooms[0].c_air"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = parse(&format!("{ONE_ROOM}colour = 3\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line"), "{err}");
        assert!(err.contains("column"), "{err}");
        let err = parse(&format!("{ONE_ROOM}[defense]\nzz = 1\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("zz"), "{err}");
    }

    #[test]
    fn attack_shape_checked() {
        let text = format!("{ONE_ROOM}[attack]\nagent = 0\nactive_from = 1\nt_mat = [[1.0]]\n");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("attack.t_mat"), "{err}");
        let text = format!("{ONE_ROOM}[attack]\nagent = 3\nactive_from = 1\nt_mat = [[1.0]]\n");
        assert!(parse(&text)
            .unwrap_err()
            .to_string()
            .contains("attack.agent"));
    }

    #[test]
    fn mismatched_reference_count() {
        let err = parse(&format!("references = [1.0, 2.0]\n{ONE_ROOM}")).unwrap_err();
        assert!(err.to_string().contains("references"));
    }
}
