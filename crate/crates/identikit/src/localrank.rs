//! Local identifiability ranks: Jacobians of stacked responses, SVD-based
//! numerical rank, greedy rank maximization over experiments, nonsingularity
//! evidence, and local distinguishing sets.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distinguish::{equal_response, ExperimentSet, ToleranceSpec};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::response::Response;

/// Relative singular-value cutoff for numerical rank: two orders above
/// sensitivity-integration error, below genuine rank gaps.
pub const RANK_REL_THRESHOLD: f64 = 1e-7;

/// Numerical rank of the stacked response Jacobian on one experiment set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    /// q*p x r Jacobian, stored row-major.
    pub jacobian: Vec<Vec<f64>>,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Absolute cutoff actually applied: rel_threshold * sigma_max.
    pub threshold: f64,
    pub rel_threshold: f64,
}

/// Stack the parameter Jacobians of the response at every experiment of the
/// set into one (q*p) x r matrix.
pub fn jacobian(model: &dyn Response, x: &[f64], set: &ExperimentSet) -> Result<DMatrix<f64>> {
    let r = model.r_params();
    let p = model.p_outputs();
    let mut rows = DMatrix::zeros(set.len() * p, r);
    for (i, lam) in set.points().iter().enumerate() {
        let block = model.response_jacobian(x, lam)?;
        rows.view_mut((i * p, 0), (p, r)).copy_from(&block);
    }
    Ok(rows)
}

fn numerical_rank(m: &DMatrix<f64>) -> (Vec<f64>, usize, f64) {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let threshold = RANK_REL_THRESHOLD * sigma_max;
    let rank = if sigma_max == 0.0 { 0 } else { sv.iter().filter(|&&s| s > threshold).count() };
    (sv, rank, threshold)
}

/// Rank of the stacked Jacobian at `x` over the set.
pub fn rho(model: &dyn Response, x: &[f64], set: &ExperimentSet) -> Result<RankReport> {
    let j = jacobian(model, x, set)?;
    let (singular_values, rank, threshold) = numerical_rank(&j);
    Ok(RankReport {
        jacobian: j.row_iter().map(|row| row.iter().copied().collect()).collect(),
        singular_values,
        rank,
        threshold,
        rel_threshold: RANK_REL_THRESHOLD,
    })
}

/// Stopping rule for the greedy maximal-rank search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RhoMaxConfig {
    pub seed: u64,
    /// Rejected candidates tolerated per rank level before stopping.
    pub patience: usize,
}

impl Default for RhoMaxConfig {
    fn default() -> Self {
        RhoMaxConfig { seed: 0, patience: 50 }
    }
}

/// Greedy maximization of the rank over experiment tuples: sample candidate
/// experiments, keep each one that increases the rank, stop at full rank r
/// or when the patience budget yields no increase. The returned set only
/// contains rank-increasing experiments.
pub fn rho_max(
    model: &dyn Response,
    x: &[f64],
    config: &RhoMaxConfig,
) -> Result<(usize, ExperimentSet)> {
    let bx = model.experiment_domain().clone();
    if !bx.is_finite() || bx.dim() == 0 {
        return Err(Error::Validation("experiment box must be finite and nonempty".into()));
    }
    let r = model.r_params();
    let p = model.p_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut rows: DMatrix<f64> = DMatrix::zeros(0, r);
    let mut rank = 0usize;
    let mut rejected = 0usize;

    while rank < r && rejected < config.patience {
        let cand = bx.sample(&mut rng);
        if kept.iter().any(|k| k == &cand) {
            continue;
        }
        let block = model.response_jacobian(x, &cand)?;
        let mut grown = DMatrix::zeros(rows.nrows() + p, r);
        grown.view_mut((0, 0), (rows.nrows(), r)).copy_from(&rows);
        grown.view_mut((rows.nrows(), 0), (p, r)).copy_from(&block);
        let (_, new_rank, _) = numerical_rank(&grown);
        if new_rank > rank {
            rank = new_rank;
            rows = grown;
            kept.push(cand);
            rejected = 0;
        } else {
            rejected += 1;
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation(
            "no experiment produced a nonzero response Jacobian".into(),
        ));
    }
    Ok((rank, ExperimentSet::new(kept, 0.0)?))
}

/// Probe ranks around a parameter; nonsingularity means every probe within
/// the radius reproduced the base rank under the same search budget. This is
/// evidence, not a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonsingularEvidence {
    pub nonsingular: bool,
    pub base_rank: usize,
    pub probe_ranks: Vec<usize>,
    pub radius: f64,
}

/// Sample within the intersection of the radius box around `x` and the
/// parameter domain.
fn sample_ball(px: &Domain, x: &[f64], radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &c)| {
            let lo = (c - radius).max(px.lo[i]);
            let hi = (c + radius).min(px.hi[i]);
            let v = if lo >= hi { c } else { rng.gen_range(lo..hi) };
            if px.open_lo[i] && v <= px.lo[i] {
                c
            } else {
                v
            }
        })
        .collect()
}

/// Test whether the maximal rank is locally constant by re-running the
/// greedy search at `n_probe` sampled neighbors with an equal budget.
pub fn is_nonsingular(
    model: &dyn Response,
    x: &[f64],
    radius: f64,
    n_probe: usize,
    seed: u64,
) -> Result<NonsingularEvidence> {
    let config = RhoMaxConfig { seed, ..Default::default() };
    let (base_rank, _) = rho_max(model, x, &config)?;
    let mut probe_ranks = Vec::with_capacity(n_probe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    if radius > 0.0 {
        let px = model.param_domain().clone();
        for _ in 0..n_probe {
            let xi = sample_ball(&px, x, radius, &mut rng);
            let (ri, _) = rho_max(model, &xi, &config)?;
            probe_ranks.push(ri);
        }
    }
    let nonsingular = probe_ranks.iter().all(|&ri| ri == base_rank);
    Ok(NonsingularEvidence { nonsingular, base_rank, probe_ranks, radius })
}

/// Statistical validation record for a local distinguishing set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalSetReport {
    pub set: Vec<Vec<f64>>,
    pub rank: usize,
    pub evidence: NonsingularEvidence,
    /// Sampled neighbor pairs with equal responses on the set.
    pub equal_pairs_tested: usize,
    /// Among those, pairs separated by some probe-grid experiment anyway.
    pub counterexamples: usize,
}

/// Build a distinguishing set of size rho(x) valid near `x`: the greedy
/// achieving set, guarded by nonsingularity evidence and validated
/// statistically (equal responses on the set should imply equal responses
/// on a probe grid of other experiments).
pub fn local_distinguishing_set(
    model: &dyn Response,
    x: &[f64],
    radius: f64,
    n_probe: usize,
    n_pairs: usize,
    seed: u64,
    tol: &ToleranceSpec,
) -> Result<(ExperimentSet, LocalSetReport)> {
    let evidence = is_nonsingular(model, x, radius, n_probe, seed)?;
    if !evidence.nonsingular {
        return Err(Error::SingularParameter);
    }
    let (rank, set) = rho_max(model, x, &RhoMaxConfig { seed, ..Default::default() })?;

    let px = model.param_domain().clone();
    let probe_grid = model.experiment_domain().grid(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut equal_pairs_tested = 0usize;
    let mut counterexamples = 0usize;
    for _ in 0..n_pairs {
        let x1 = sample_ball(&px, x, radius, &mut rng);
        let x2 = sample_ball(&px, x, radius, &mut rng);
        if x1 == x2 {
            continue;
        }
        let equal_on_set = set.points().iter().try_fold(true, |acc, lam| {
            let b1 = model.response(&x1, lam)?;
            let b2 = model.response(&x2, lam)?;
            Ok::<bool, Error>(acc && equal_response(&b1, &b2, tol))
        })?;
        if !equal_on_set {
            continue;
        }
        equal_pairs_tested += 1;
        for lam in &probe_grid {
            let b1 = model.response(&x1, lam)?;
            let b2 = model.response(&x2, lam)?;
            if !equal_response(&b1, &b2, tol) {
                counterexamples += 1;
                break;
            }
        }
    }

    let report = LocalSetReport {
        set: set.points().to_vec(),
        rank,
        evidence,
        equal_pairs_tested,
        counterexamples,
    };
    Ok((set, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo;

    #[test]
    fn nine_state_jacobian_at_zero_input() {
        let m = modelzoo::nine_state();
        let set = ExperimentSet::new(vec![vec![0.0]], 0.0).unwrap();
        let j = jacobian(m.response.as_ref(), &[1.0], &set).unwrap();
        assert_eq!((j.nrows(), j.ncols()), (1, 1));
        assert!((j[(0, 0)] - (-1.0f64.sin())).abs() < 1e-6);
    }

    #[test]
    fn nine_state_rank_one() {
        let m = modelzoo::nine_state();
        let set = ExperimentSet::new(vec![vec![0.5], vec![1.5]], 0.0).unwrap();
        let rep = rho(m.response.as_ref(), &[1.0], &set).unwrap();
        assert_eq!(rep.rank, 1);
        assert_eq!(rep.singular_values.len(), 1);
    }

    #[test]
    fn rank_invariant_under_row_permutation_and_duplicates() {
        let m = modelzoo::nine_state();
        let a = ExperimentSet::new(vec![vec![0.0], vec![2.0]], 0.0).unwrap();
        let b = ExperimentSet::new(vec![vec![2.0], vec![0.0]], 0.0).unwrap();
        let ra = rho(m.response.as_ref(), &[1.0], &a).unwrap();
        let rb = rho(m.response.as_ref(), &[1.0], &b).unwrap();
        assert_eq!(ra.rank, rb.rank);
    }

    #[test]
    fn rho_max_reaches_full_rank_on_nine_state() {
        let m = modelzoo::nine_state();
        let (rank, set) = rho_max(m.response.as_ref(), &[1.0], &Default::default()).unwrap();
        assert_eq!(rank, 1);
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn nine_state_nonsingular_near_one() {
        let m = modelzoo::nine_state();
        let ev = is_nonsingular(m.response.as_ref(), &[1.0], 0.1, 5, 3).unwrap();
        assert!(ev.nonsingular);
        assert_eq!(ev.base_rank, 1);
    }

    #[test]
    fn zero_radius_is_trivially_nonsingular() {
        let m = modelzoo::nine_state();
        let ev = is_nonsingular(m.response.as_ref(), &[1.0], 0.0, 5, 3).unwrap();
        assert!(ev.nonsingular);
        assert!(ev.probe_ranks.is_empty());
    }

    #[test]
    fn figure8_crossing_pair_inseparable_despite_full_rank() {
        use crate::distinguish::{scan_distinguishable, GridSpec};
        use std::f64::consts::PI;
        let m = modelzoo::figure8_demo();
        let ev = is_nonsingular(m.response.as_ref(), &[0.0], 0.3, 8, 5).unwrap();
        assert_eq!(ev.base_rank, 1);
        let tol = ToleranceSpec::default();
        let sep = scan_distinguishable(
            m.response.as_ref(),
            &[0.0],
            &[PI],
            &GridSpec { points_per_dim: 15 },
            &tol,
        )
        .unwrap();
        assert!(!sep, "curve self-crossing makes 0 and pi globally inseparable");
    }

    #[test]
    fn local_set_for_nine_state_validates() {
        let m = modelzoo::nine_state();
        let tol = ToleranceSpec::default();
        let (set, rep) =
            local_distinguishing_set(m.response.as_ref(), &[1.0], 0.05, 3, 40, 11, &tol).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(rep.counterexamples, 0);
    }
}
