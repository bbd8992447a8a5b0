use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::local::{ActiveSet, LocalAgent};

/// Probe allocations, one per column. Column `zero_index` is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeAllocations {
    pub thetas: DMatrix<f64>,
    pub zero_index: usize,
}

/// Observed probe/response pairs, index-aligned by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub thetas: DMatrix<f64>,
    pub lambdas: DMatrix<f64>,
    pub zero_index: usize,
    /// Active sets the agent reported; empty when unknown (synthetic data).
    pub active_sets: Vec<ActiveSet>,
}

impl ProbeSet {
    pub fn new(thetas: DMatrix<f64>, lambdas: DMatrix<f64>, zero_index: usize) -> Result<Self> {
        if thetas.shape() != lambdas.shape() {
            return Err(Error::DimensionMismatch {
                context: "probe responses",
                expected: thetas.ncols(),
                actual: lambdas.ncols(),
            });
        }
        if zero_index >= thetas.ncols() {
            return Err(Error::invalid("zero_index", "out of range"));
        }
        Ok(Self {
            thetas,
            lambdas,
            zero_index,
            active_sets: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn count(&self) -> usize {
        self.thetas.ncols()
    }

    /// True when every probe landed where all coupling rows are active.
    pub fn all_in_one_zone(&self) -> bool {
        !self.active_sets.is_empty() && self.active_sets.iter().all(ActiveSet::is_all_coupling)
    }

    /// Replaces the responses by `T Λ`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Self {
        Self {
            lambdas: t * &self.lambdas,
            ..self.clone()
        }
    }
}

fn affine_rank_full(thetas: &DMatrix<f64>, zero_index: usize) -> bool {
    let c = thetas.nrows();
    let others: Vec<usize> = (0..thetas.ncols()).filter(|&o| o != zero_index).collect();
    if others.len() < c {
        return false;
    }
    let diffs = DMatrix::from_fn(c, others.len(), |r, j| {
        thetas[(r, others[j])] - thetas[(r, zero_index)]
    });
    let sv = diffs.singular_values();
    sv.min() > 1e-10 * sv.max().max(f64::MIN_POSITIVE)
}

/// The zero allocation followed by `o_count - 1` points drawn uniformly from
/// `[0, delta]^c`. Draws are repeated until the set spans `c + 1` affinely
/// independent points.
pub fn generate_probes(
    c: usize,
    o_count: usize,
    delta: f64,
    seed: u64,
) -> Result<ProbeAllocations> {
    if c == 0 {
        return Err(Error::invalid("probes.c", "dimension must be positive"));
    }
    if o_count < c + 1 {
        return Err(Error::invalid(
            "defense.probe_count",
            format!("need at least c + 1 = {} probes, got {o_count}", c + 1),
        ));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(
            "defense.delta",
            format!("must be > 0, got {delta}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut thetas = DMatrix::zeros(c, o_count);
        for o in 1..o_count {
            for r in 0..c {
                thetas[(r, o)] = rng.random_range(0.0..delta);
            }
        }
        if affine_rank_full(&thetas, 0) {
            return Ok(ProbeAllocations {
                thetas,
                zero_index: 0,
            });
        }
    }
}

/// Sends every probe to the agent and records what comes back. Probes the
/// agent fails to answer are dropped; the zero probe is mandatory.
pub fn collect_probe_responses(
    agent: &LocalAgent,
    probes: &ProbeAllocations,
    k: usize,
) -> Result<ProbeSet> {
    let c = probes.thetas.nrows();
    let mut kept_thetas = Vec::new();
    let mut kept_lambdas = Vec::new();
    let mut active_sets = Vec::new();
    let mut zero_index = None;
    for o in 0..probes.thetas.ncols() {
        let theta = probes.thetas.column(o).into_owned();
        match agent.respond(&theta, k) {
            Ok(resp) => {
                if o == probes.zero_index {
                    zero_index = Some(kept_thetas.len());
                }
                kept_thetas.push(theta);
                kept_lambdas.push(resp.sent);
                active_sets.push(resp.solution.active_set);
            }
            Err(e) if o == probes.zero_index => return Err(e),
            Err(e) => log::debug!("probe {o} dropped: {e}"),
        }
    }
    if kept_thetas.len() < c + 1 {
        return Err(Error::TooFewProbes {
            have: kept_thetas.len(),
            need: c + 1,
        });
    }
    let zero_index = zero_index.expect("zero probe kept or returned early");
    Ok(ProbeSet {
        thetas: DMatrix::from_columns(&kept_thetas),
        lambdas: DMatrix::from_columns(&kept_lambdas),
        zero_index,
        active_sets,
    })
}
