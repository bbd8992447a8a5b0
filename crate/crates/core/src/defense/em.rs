//! Expectation maximization for a mixture of affine regressions
//!
//! ```text
//! λ_o = -P^z θ_o - s^z + e,   e ~ N(0, σ_z² I),   z ~ Categorical(π)
//! ```
//!
//! The E-step computes responsibilities in log space; the M-step is a
//! responsibility-weighted least-squares fit per component. The component
//! variances follow an annealing schedule: they start at the empirical
//! variance of the responses and shrink geometrically down to a floor.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::probe::ProbeSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub p_mats: Vec<DMatrix<f64>>,
    pub s_vecs: Vec<DVector<f64>>,
    pub pis: Vec<f64>,
    /// Isotropic covariance scale `σ_z²` per component.
    pub sigma_sq: Vec<f64>,
}

impl MixtureParams {
    pub fn z_count(&self) -> usize {
        self.pis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.z_count();
        if z == 0 || self.p_mats.len() != z || self.s_vecs.len() != z || self.sigma_sq.len() != z {
            return Err(Error::invalid(
                "mixture",
                "component vectors must share a positive length",
            ));
        }
        if self.pis.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("mixture.pis", "weights must lie in [0, 1]"));
        }
        let total: f64 = self.pis.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "mixture.pis",
                format!("weights sum to {total}"),
            ));
        }
        if self.sigma_sq.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("mixture.sigma_sq", "variances must be > 0"));
        }
        Ok(())
    }

    pub fn mean(&self, z: usize, theta: &DVector<f64>) -> DVector<f64> {
        -(&self.p_mats[z] * theta) - &self.s_vecs[z]
    }

    fn log_densities(&self, probes: &ProbeSet) -> DMatrix<f64> {
        let c = probes.dim() as f64;
        DMatrix::from_fn(self.z_count(), probes.count(), |z, o| {
            let theta = probes.thetas.column(o).into_owned();
            let residual = probes.lambdas.column(o) - self.mean(z, &theta);
            let var = self.sigma_sq[z];
            -0.5 * c * (2.0 * std::f64::consts::PI * var).ln()
                - residual.norm_squared() / (2.0 * var)
        })
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for z in 0..self.z_count() {
            out.extend(self.p_mats[z].iter());
            out.extend(self.s_vecs[z].iter());
            out.push(self.pis[z]);
        }
        out
    }
}

/// Posterior zone probabilities, `Z x O`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub zeta: DMatrix<f64>,
    /// Columns where every component density underflowed; set to `1/Z`.
    pub underflow: Vec<usize>,
}

/// `ζ_zo = π_z N_zo / Σ_j π_j N_jo`, evaluated with the max-subtraction trick.
pub fn e_step(params: &MixtureParams, probes: &ProbeSet) -> Result<Responsibilities> {
    params.validate()?;
    let z_count = params.z_count();
    let logs = params.log_densities(probes);
    let mut zeta = DMatrix::zeros(z_count, probes.count());
    let mut underflow = Vec::new();
    for o in 0..probes.count() {
        let weighted: Vec<f64> = (0..z_count)
            .map(|z| params.pis[z].ln() + logs[(z, o)])
            .collect();
        let max = weighted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            underflow.push(o);
            zeta.column_mut(o).fill(1.0 / z_count as f64);
            continue;
        }
        let exps: Vec<f64> = weighted.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for z in 0..z_count {
            zeta[(z, o)] = exps[z] / total;
        }
    }
    Ok(Responsibilities { zeta, underflow })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub p_mat: DMatrix<f64>,
    pub s_vec: DVector<f64>,
    /// Weighted design was rank deficient; the fit is the minimum-norm one.
    pub degenerate: bool,
}

/// Minimizes `Σ_o w_o ‖λ_o + P θ_o + s‖²`.
///
/// The intercept is eliminated by centering on the weighted means, which
/// keeps the slope well conditioned when the probes sit in a small box far
/// from the response scale.
pub fn weighted_affine_fit(probes: &ProbeSet, weights: &[f64]) -> AffineFit {
    let c = probes.dim();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return AffineFit {
            p_mat: DMatrix::zeros(c, c),
            s_vec: DVector::zeros(c),
            degenerate: true,
        };
    }
    let theta_mean = (&probes.thetas * DVector::from_column_slice(weights)) / total;
    let lambda_mean = (&probes.lambdas * DVector::from_column_slice(weights)) / total;
    let n = probes.count();
    let mut design = DMatrix::zeros(n, c);
    let mut target = DMatrix::zeros(n, c);
    for o in 0..n {
        let w = weights[o].max(0.0).sqrt();
        for r in 0..c {
            design[(o, r)] = w * (probes.thetas[(r, o)] - theta_mean[r]);
            target[(o, r)] = -w * (probes.lambdas[(r, o)] - lambda_mean[r]);
        }
    }
    let svd = design.svd(true, true);
    let sv_max = svd.singular_values.max();
    let cutoff = sv_max * (n.max(c) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let p_t = svd
        .solve(&target, cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(c, c));
    let p_mat = p_t.transpose();
    let s_vec = -lambda_mean - &p_mat * theta_mean;
    AffineFit {
        p_mat,
        s_vec,
        degenerate: rank < c,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub params: MixtureParams,
    pub degenerate: Vec<bool>,
}

/// Re-estimates `(P^z, s^z)` by weighted least squares and
/// `π^z = Σ_o ζ_zo / O`. Variances are carried over unchanged.
pub fn m_step(zeta: &Responsibilities, probes: &ProbeSet, sigma_sq: &[f64]) -> Result<MStep> {
    let z_count = zeta.zeta.nrows();
    if zeta.zeta.ncols() != probes.count() {
        return Err(Error::DimensionMismatch {
            context: "responsibility columns",
            expected: probes.count(),
            actual: zeta.zeta.ncols(),
        });
    }
    if sigma_sq.len() != z_count {
        return Err(Error::DimensionMismatch {
            context: "component variances",
            expected: z_count,
            actual: sigma_sq.len(),
        });
    }
    let o_count = probes.count() as f64;
    let mut p_mats = Vec::with_capacity(z_count);
    let mut s_vecs = Vec::with_capacity(z_count);
    let mut pis = Vec::with_capacity(z_count);
    let mut degenerate = Vec::with_capacity(z_count);
    for z in 0..z_count {
        let weights: Vec<f64> = zeta.zeta.row(z).iter().copied().collect();
        let fit = weighted_affine_fit(probes, &weights);
        pis.push(weights.iter().sum::<f64>() / o_count);
        p_mats.push(fit.p_mat);
        s_vecs.push(fit.s_vec);
        degenerate.push(fit.degenerate);
    }
    let total: f64 = pis.iter().sum();
    for p in &mut pis {
        *p /= total;
    }
    Ok(MStep {
        params: MixtureParams {
            p_mats,
            s_vecs,
            pis,
            sigma_sq: sigma_sq.to_vec(),
        },
        degenerate,
    })
}

/// The same weighted least-squares solution written as one stacked linear
/// system in `φ^z = [vec(P^z); s^z]`:
///
/// ```text
/// φ^z = pinv(Ξ^z Ω) Ξ^z vec(Λ)
/// Ω   = -[ ((Υ Θ Δ) ∘ Y)ᵀ  Gᵀ ]
/// Υ = 1_c ⊗ I_c,  Δ = I_O ⊗ 1_cᵀ,  G = 1_Oᵀ ⊗ I_c,  Y = G ⊗ 1_c
/// Ξ^z = diag(√ζ_z1 I_c, …, √ζ_zO I_c)
/// ```
///
/// With these shapes the first `c²` entries of `φ` hold `P` row by row.
pub fn m_step_vectorized(
    zeta: &Responsibilities,
    probes: &ProbeSet,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let c = probes.dim();
    let o = probes.count();
    let ones_c = DMatrix::from_element(c, 1, 1.0);
    let eye_c = DMatrix::<f64>::identity(c, c);
    let upsilon = ones_c.kronecker(&eye_c);
    let delta = DMatrix::<f64>::identity(o, o).kronecker(&ones_c.transpose());
    let g = DMatrix::from_element(1, o, 1.0).kronecker(&eye_c);
    let y = g.kronecker(&ones_c);
    let top = (&upsilon * &probes.thetas * &delta).component_mul(&y);
    let mut omega = DMatrix::zeros(c * o, c * c + c);
    omega
        .view_mut((0, 0), (c * o, c * c))
        .copy_from(&(-top.transpose()));
    omega
        .view_mut((0, c * c), (c * o, c))
        .copy_from(&(-g.transpose()));
    let vec_lambda = DVector::from_column_slice(probes.lambdas.as_slice());

    (0..zeta.zeta.nrows())
        .map(|z| {
            let xi = DVector::from_fn(c * o, |i, _| zeta.zeta[(z, i / c)].max(0.0).sqrt());
            let xi_omega = DMatrix::from_fn(c * o, c * c + c, |r, col| xi[r] * omega[(r, col)]);
            let rhs = xi.component_mul(&vec_lambda);
            let pinv = xi_omega
                .pseudo_inverse(1e-14)
                .expect("non-negative tolerance");
            let phi = pinv * rhs;
            let p = DMatrix::from_row_slice(c, c, &phi.as_slice()[..c * c]);
            let s = DVector::from_column_slice(&phi.as_slice()[c * c..]);
            (p, s)
        })
        .collect()
}

/// `Σ_o Σ_z ζ_zo (ln π_z + ln N(λ_o; -P^z θ_o - s^z, σ_z² I))`.
pub fn expected_log_likelihood(
    params: &MixtureParams,
    zeta: &Responsibilities,
    probes: &ProbeSet,
) -> f64 {
    let logs = params.log_densities(probes);
    let mut total = 0.0;
    for o in 0..probes.count() {
        for z in 0..params.z_count() {
            let w = zeta.zeta[(z, o)];
            if w > 0.0 {
                total += w * (params.pis[z].ln() + logs[(z, o)]);
            }
        }
    }
    total
}

/// Marginal log-likelihood `Σ_o ln Σ_z π_z N_zo`.
pub fn log_likelihood(params: &MixtureParams, probes: &ProbeSet) -> f64 {
    let logs = params.log_densities(probes);
    (0..probes.count())
        .map(|o| {
            let terms: Vec<f64> = (0..params.z_count())
                .map(|z| params.pis[z].ln() + logs[(z, o)])
                .collect();
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return max;
            }
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once parameters and responsibilities move less than this.
    pub tol: f64,
    /// `σ² ← max(anneal_factor σ², sigma_min_sq)` after each M-step.
    pub anneal_factor: f64,
    pub sigma_min_sq: f64,
    /// Initial perturbation scale relative to `‖center‖_F / c`.
    pub init_scale: f64,
    /// Extra starts from random neighbourhood fits.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-9,
            anneal_factor: 0.5,
            sigma_min_sq: 1e-12,
            init_scale: 0.1,
            restarts: 16,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("em.max_iters", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("em.tol", "must be > 0"));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::invalid("em.anneal_factor", "must lie in (0, 1]"));
        }
        if !(self.sigma_min_sq > 0.0) {
            return Err(Error::invalid("em.sigma_min_sq", "must be > 0"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::invalid("em.init_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Surrogate values around one M-step, both at the same `σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmIteration {
    pub sigma_sq: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutcome {
    pub params: MixtureParams,
    pub zeta: Responsibilities,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<EmIteration>,
    /// Components that were re-seeded after collapsing.
    pub reseeded: usize,
    /// Components removed after collapsing twice.
    pub dropped: usize,
    /// Some M-step saw a rank-deficient weighted design.
    pub degenerate: bool,
    /// Index of the start that produced this outcome.
    pub start: usize,
}

fn response_variance(probes: &ProbeSet) -> f64 {
    let n = probes.lambdas.len() as f64;
    let mean = probes.lambdas.sum() / n;
    probes
        .lambdas
        .iter()
        .map(|l| (l - mean).powi(2))
        .sum::<f64>()
        / n
}

fn seeded_component(
    center: &DMatrix<f64>,
    scale: f64,
    probes: &ProbeSet,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DVector<f64>) {
    let c = center.nrows();
    let p = DMatrix::from_fn(c, c, |i, j| {
        let noise: f64 = StandardNormal.sample(rng);
        center[(i, j)] + scale * noise
    });
    // s from the mean residual of -λ - Pθ
    let residual = -&probes.lambdas - &p * &probes.thetas;
    let s = residual.column_mean();
    (p, s)
}

/// Least-squares fit of each component on the `c + 2` probes nearest to a
/// random anchor in `θ`.
fn neighbourhood_component(
    probes: &ProbeSet,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = probes.count();
    let anchor = rng.random_range(0..n);
    let a = probes.thetas.column(anchor);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let di = (probes.thetas.column(i) - a).norm_squared();
        let dj = (probes.thetas.column(j) - a).norm_squared();
        di.total_cmp(&dj).then(i.cmp(&j))
    });
    let mut weights = vec![0.0; n];
    for &o in order.iter().take((probes.dim() + 2).min(n)) {
        weights[o] = 1.0;
    }
    let fit = weighted_affine_fit(probes, &weights);
    (fit.p_mat, fit.s_vec)
}

/// `Σ_o min_z ‖λ_o + P^z θ_o + s^z‖²`.
pub fn hard_residual(params: &MixtureParams, probes: &ProbeSet) -> f64 {
    (0..probes.count())
        .map(|o| {
            let theta = probes.thetas.column(o);
            let lambda = probes.lambdas.column(o);
            (0..params.z_count())
                .map(|z| (lambda + &params.p_mats[z] * theta + &params.s_vecs[z]).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Runs EM from `1 + cfg.restarts` starts and keeps the one with the
/// smallest [`hard_residual`] (earliest on ties).
///
/// Start 0 scatters components around `center` (the least-squares fit of
/// all data when `None`) and anneals from the response variance. Later
/// starts fit each component on a random `θ`-neighbourhood and anneal from
/// that fit's own residual level.
pub fn run_em(
    probes: &ProbeSet,
    z_count: usize,
    cfg: &EmConfig,
    seed: u64,
    center: Option<&DMatrix<f64>>,
) -> Result<EmOutcome> {
    cfg.validate()?;
    let c = probes.dim();
    if z_count == 0 {
        return Err(Error::invalid("defense.z_count", "must be >= 1"));
    }
    if probes.count() < c + 1 {
        return Err(Error::TooFewProbes {
            have: probes.count(),
            need: c + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = match center {
        Some(m) => m.clone(),
        None => weighted_affine_fit(probes, &vec![1.0; probes.count()]).p_mat,
    };
    let scale = {
        let norm = center.norm();
        cfg.init_scale * if norm > 0.0 { norm / c as f64 } else { 1.0 }
    };
    let pis = vec![1.0 / z_count as f64; z_count];

    let mut best: Option<(f64, EmOutcome)> = None;
    for start in 0..=cfg.restarts {
        let (p_mats, s_vecs): (Vec<_>, Vec<_>) = (0..z_count)
            .map(|_| {
                if start == 0 {
                    seeded_component(&center, scale, probes, &mut rng)
                } else {
                    neighbourhood_component(probes, &mut rng)
                }
            })
            .unzip();
        let mut params = MixtureParams {
            p_mats,
            s_vecs,
            pis: pis.clone(),
            sigma_sq: vec![0.0; z_count],
        };
        let sigma0 = if start == 0 {
            response_variance(probes)
        } else {
            hard_residual(&params, probes) / (probes.count() * c) as f64
        }
        .max(cfg.sigma_min_sq);
        params.sigma_sq.fill(sigma0);
        let mut outcome = em_from(probes, params, cfg, &center, scale, &mut rng)?;
        outcome.start = start;
        let score = hard_residual(&outcome.params, probes);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, outcome));
        }
    }
    Ok(best.expect("at least one start").1)
}

fn em_from(
    probes: &ProbeSet,
    mut params: MixtureParams,
    cfg: &EmConfig,
    center: &DMatrix<f64>,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EmOutcome> {
    let z_count = params.z_count();
    let mut reseeded_flags = vec![false; z_count];
    let mut reseeded = 0;
    let mut dropped = 0;
    let mut degenerate = false;
    let mut history = Vec::new();
    let mut converged = false;
    let mut previous_zeta: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let collapse_floor = 1e-12 * probes.count() as f64;

    while iterations < cfg.max_iters {
        iterations += 1;
        let zeta = e_step(&params, probes)?;
        let before = expected_log_likelihood(&params, &zeta, probes);
        let step = m_step(&zeta, probes, &params.sigma_sq)?;
        let mut next = step.params;
        degenerate |= step.degenerate.iter().any(|&d| d);
        let after = expected_log_likelihood(&next, &zeta, probes);
        history.push(EmIteration {
            sigma_sq: params.sigma_sq[0],
            surrogate_before: before,
            surrogate_after: after,
            log_likelihood: log_likelihood(&next, probes),
        });

        let mut structure_changed = false;
        let mut z = 0;
        while z < next.z_count() {
            let mass: f64 = zeta.zeta.row(z).sum();
            if mass >= collapse_floor || next.z_count() == 1 {
                z += 1;
                continue;
            }
            structure_changed = true;
            if !reseeded_flags[z] {
                let (p, s) = seeded_component(center, scale, probes, rng);
                next.p_mats[z] = p;
                next.s_vecs[z] = s;
                next.pis[z] = 1.0 / next.z_count() as f64;
                reseeded_flags[z] = true;
                reseeded += 1;
                z += 1;
            } else {
                next.p_mats.remove(z);
                next.s_vecs.remove(z);
                next.pis.remove(z);
                next.sigma_sq.remove(z);
                reseeded_flags.remove(z);
                dropped += 1;
            }
            let total: f64 = next.pis.iter().sum();
            for p in &mut next.pis {
                *p /= total;
            }
        }

        let param_change = if structure_changed {
            f64::INFINITY
        } else {
            params
                .flat()
                .iter()
                .zip(next.flat())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let param_scale = next.flat().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let zeta_change = match &previous_zeta {
            Some(prev) if !structure_changed && prev.shape() == zeta.zeta.shape() => {
                (prev - &zeta.zeta).amax()
            }
            _ => f64::INFINITY,
        };
        previous_zeta = if structure_changed {
            None
        } else {
            Some(zeta.zeta.clone())
        };

        for s in &mut next.sigma_sq {
            *s = (*s * cfg.anneal_factor).max(cfg.sigma_min_sq);
        }
        params = next;
        // symmetric fixed points are stationary at large σ, so only a
        // fully annealed mixture counts as converged
        let annealed = params.sigma_sq.iter().all(|&s| s <= cfg.sigma_min_sq);
        if annealed && param_change <= cfg.tol * param_scale && zeta_change <= cfg.tol {
            converged = true;
            break;
        }
    }
    let zeta = e_step(&params, probes)?;
    Ok(EmOutcome {
        params,
        zeta,
        iterations,
        converged,
        history,
        reseeded,
        dropped,
        degenerate,
        start: 0,
    })
}
