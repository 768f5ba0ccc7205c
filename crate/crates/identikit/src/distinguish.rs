//! Distinguishability of parameter pairs on experiment sets, randomized
//! experiment sampling, Monte-Carlo separation trials, and falsification
//! search for universal-set candidates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::response::Response;

/// Equality tolerance for response comparison, one order above integrator
/// error so the tolerance, not solver noise, decides verdicts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ToleranceSpec {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec { atol: 1e-9, rtol: 1e-6 }
    }
}

/// True iff every coordinate gap is within atol + rtol * max magnitude.
pub fn equal_response(v1: &[f64], v2: &[f64], tol: &ToleranceSpec) -> bool {
    assert_eq!(v1.len(), v2.len());
    v1.iter()
        .zip(v2)
        .all(|(a, b)| (a - b).abs() <= tol.atol + tol.rtol * a.abs().max(b.abs()))
}

/// An ordered list of pairwise-distinct experiments with a minimum
/// separation in the experiment box metric.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSet {
    experiments: Vec<Vec<f64>>,
    min_separation: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ExperimentSet {
    /// Validates equal dimensions and pairwise separation at least `delta`.
    pub fn new(experiments: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        if experiments.is_empty() {
            return Err(Error::Validation("experiment set must be nonempty".into()));
        }
        let d = experiments[0].len();
        if experiments.iter().any(|e| e.len() != d) {
            return Err(Error::Validation("experiments have mixed dimensions".into()));
        }
        for i in 0..experiments.len() {
            for j in i + 1..experiments.len() {
                if euclid(&experiments[i], &experiments[j]) < delta {
                    return Err(Error::Validation(format!(
                        "experiments {i} and {j} are closer than the separation {delta}"
                    )));
                }
            }
        }
        Ok(ExperimentSet { experiments, min_separation: delta })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.experiments
    }

    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separation
    }
}

/// Outcome of comparing two parameters on a fixed experiment set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Verdict {
    pub distinguished: bool,
    /// First experiment index whose responses differ beyond tolerance.
    pub witness: Option<usize>,
    /// Largest coordinate gap over the set.
    pub max_gap: f64,
}

/// Compare responses of `x1` and `x2` on every experiment in the set.
pub fn distinguishable_on_set(
    model: &dyn Response,
    x1: &[f64],
    x2: &[f64],
    set: &ExperimentSet,
    tol: &ToleranceSpec,
) -> Result<Verdict> {
    let mut witness = None;
    let mut max_gap = 0.0f64;
    for (i, lam) in set.points().iter().enumerate() {
        let b1 = model.response(x1, lam)?;
        let b2 = model.response(x2, lam)?;
        let gap = b1.iter().zip(&b2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        max_gap = max_gap.max(gap);
        if witness.is_none() && !equal_response(&b1, &b2, tol) {
            witness = Some(i);
        }
    }
    Ok(Verdict { distinguished: witness.is_some(), witness, max_gap })
}

/// Draw `q` experiments i.i.d. uniform on the box, rejection-resampled until
/// the pairwise separation is at least `delta`. Deterministic given the seed.
pub fn sample_experiment_set(
    bx: &Domain,
    q: usize,
    seed: u64,
    delta: f64,
) -> Result<ExperimentSet> {
    if q == 0 {
        return Err(Error::Validation("experiment set size must be at least 1".into()));
    }
    if !bx.is_finite() || bx.dim() == 0 {
        return Err(Error::Validation("experiment box must be finite and nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(q);
    let max_attempts = 1000 * q;
    let mut attempts = 0usize;
    while points.len() < q {
        if attempts >= max_attempts {
            return Err(Error::SamplingExhausted { q, delta, attempts });
        }
        attempts += 1;
        let cand = bx.sample(&mut rng);
        if points.iter().all(|p| euclid(p, &cand) >= delta) {
            points.push(cand);
        }
    }
    ExperimentSet::new(points, delta)
}

/// Density of the grid approximating the existential quantifier over the
/// experiment box, plus one refinement pass around the best cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub points_per_dim: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { points_per_dim: 20 }
    }
}

/// Note embedded in every report that relies on the scan approximation.
pub const SCAN_NOTE: &str = "existence of a separating experiment is approximated by a dense grid \
                             with one refinement pass; a negative answer is not a proof";

/// Grid approximation of "some experiment separates the pair": scans a dense
/// grid over the experiment box, then refines once around the largest gap.
pub fn scan_distinguishable(
    model: &dyn Response,
    x1: &[f64],
    x2: &[f64],
    grid: &GridSpec,
    tol: &ToleranceSpec,
) -> Result<bool> {
    let bx = model.experiment_domain().clone();
    let mut best_gap = -1.0f64;
    let mut best_point: Vec<f64> = Vec::new();
    for lam in bx.grid(grid.points_per_dim) {
        let b1 = model.response(x1, &lam)?;
        let b2 = model.response(x2, &lam)?;
        if !equal_response(&b1, &b2, tol) {
            return Ok(true);
        }
        let gap = b1.iter().zip(&b2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if gap > best_gap {
            best_gap = gap;
            best_point = lam;
        }
    }
    let refined = bx.cell_around(&best_point, grid.points_per_dim);
    for lam in refined.grid(grid.points_per_dim) {
        let b1 = model.response(x1, &lam)?;
        let b2 = model.response(x2, &lam)?;
        if !equal_response(&b1, &b2, tol) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// One Monte-Carlo trial that the fixed set failed to separate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FailureRecord {
    pub trial: usize,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub max_gap: f64,
}

/// Aggregated result of randomized separation trials.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialReport {
    pub seed: u64,
    pub q: usize,
    pub n_trials: usize,
    pub tolerance: ToleranceSpec,
    pub grid: GridSpec,
    pub set_separation: f64,
    pub experiment_set: Vec<Vec<f64>>,
    pub separated: usize,
    pub fraction: f64,
    pub failures: Vec<FailureRecord>,
    pub scan_note: String,
}

const PAIR_ATTEMPTS: usize = 500;

/// Draw a scan-separable parameter pair; the reference parameter, when
/// given, is fixed as the second element.
fn draw_separable_pair(
    model: &dyn Response,
    rng: &mut ChaCha8Rng,
    reference: Option<&[f64]>,
    grid: &GridSpec,
    tol: &ToleranceSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let px = model.param_domain().clone();
    for _ in 0..PAIR_ATTEMPTS {
        let x1 = px.sample(rng);
        let x2 = match reference {
            Some(x0) => x0.to_vec(),
            None => px.sample(rng),
        };
        if x1 == x2 {
            continue;
        }
        if scan_distinguishable(model, &x1, &x2, grid, tol)? {
            return Ok((x1, x2));
        }
    }
    Err(Error::SamplingExhausted { q: 2, delta: 0.0, attempts: PAIR_ATTEMPTS })
}

fn run_trials(
    model: &dyn Response,
    set: &ExperimentSet,
    n_trials: usize,
    seed: u64,
    reference: Option<&[f64]>,
    tol: &ToleranceSpec,
    grid: &GridSpec,
) -> Result<TrialReport> {
    let outcomes: Vec<Result<(Verdict, Vec<f64>, Vec<f64>)>> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (x1, x2) = draw_separable_pair(model, &mut rng, reference, grid, tol)?;
            let verdict = distinguishable_on_set(model, &x1, &x2, set, tol)?;
            Ok((verdict, x1, x2))
        })
        .collect();

    let mut separated = 0usize;
    let mut failures = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (verdict, x1, x2) = outcome?;
        if verdict.distinguished {
            separated += 1;
        } else {
            failures.push(FailureRecord { trial: i, x1, x2, max_gap: verdict.max_gap });
        }
    }
    Ok(TrialReport {
        seed,
        q: set.len(),
        n_trials,
        tolerance: *tol,
        grid: *grid,
        set_separation: set.min_separation(),
        experiment_set: set.points().to_vec(),
        separated,
        fraction: separated as f64 / n_trials.max(1) as f64,
        failures,
        scan_note: SCAN_NOTE.into(),
    })
}

/// Draw one random q-set, then for `n_pairs` random scan-separable parameter
/// pairs record whether the set separates them.
pub fn monte_carlo_theorem(
    model: &dyn Response,
    q: usize,
    n_pairs: usize,
    seed: u64,
    tol: &ToleranceSpec,
    grid: &GridSpec,
) -> Result<TrialReport> {
    let set = sample_experiment_set(model.experiment_domain(), q, seed, 1e-6)?;
    run_trials(model, &set, n_pairs, seed, None, tol, grid)
}

/// Separation trials against a fixed reference parameter; each trial draws
/// its own random set of `q` experiments (`q` conventionally r + 1).
pub fn distinguish_from_reference(
    model: &dyn Response,
    x0: &[f64],
    q: usize,
    n_trials: usize,
    seed: u64,
    tol: &ToleranceSpec,
    grid: &GridSpec,
) -> Result<TrialReport> {
    model.param_domain().check(x0)?;
    let set = sample_experiment_set(model.experiment_domain(), q, seed, 1e-6)?;
    run_trials(model, &set, n_trials, seed, Some(x0), tol, grid)
}

/// Knobs for the violating-pair search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchConfig {
    pub starts: usize,
    pub max_evals: usize,
    pub seed: u64,
    /// A pair counts as violating when its summed squared response gap on
    /// the set is below this.
    pub residual_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { starts: 20, max_evals: 4000, seed: 0, residual_tol: 1e-8 }
    }
}

/// Residual of the equal-response system for a candidate pair.
pub fn pair_residual(
    model: &dyn Response,
    x1: &[f64],
    x2: &[f64],
    set: &ExperimentSet,
) -> Result<f64> {
    let mut total = 0.0;
    for lam in set.points() {
        let b1 = model.response(x1, lam)?;
        let b2 = model.response(x2, lam)?;
        total += b1.iter().zip(&b2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Search for a genuinely distinguishable pair with equal responses on the
/// given set. Finding one falsifies the set as a universal candidate;
/// finding none proves nothing.
pub fn find_violating_pair(
    model: &dyn Response,
    set: &ExperimentSet,
    config: &SearchConfig,
    tol: &ToleranceSpec,
    grid: &GridSpec,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let px = model.param_domain().clone();
    let r = px.dim();
    let scales: Vec<f64> = px
        .lo
        .iter()
        .zip(&px.hi)
        .map(|(l, h)| (h - l).abs().max(1e-6))
        .cycle()
        .take(2 * r)
        .collect();

    let objective = |y: &[f64]| -> f64 {
        let (x1, x2) = y.split_at(r);
        if !px.contains(x1) || !px.contains(x2) {
            return f64::INFINITY;
        }
        match pair_residual(model, x1, x2, set) {
            Ok(v) => v,
            Err(_) => f64::INFINITY,
        }
    };

    for start in 0..config.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(start as u64 + 1);
        let mut y0 = px.sample(&mut rng);
        y0.extend(px.sample(&mut rng));
        let res = nelder_mead(
            objective,
            &y0,
            &scales,
            &NelderMeadOptions { max_evals: config.max_evals, ..Default::default() },
        );
        if res.value < config.residual_tol {
            let (x1, x2) = res.x.split_at(r);
            if scan_distinguishable(model, x1, x2, grid, tol)? {
                return Ok(Some((x1.to_vec(), x2.to_vec())));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo;

    #[test]
    fn equal_response_tolerances() {
        let tol = ToleranceSpec::default();
        assert!(equal_response(&[1.0, 2.0], &[1.0, 2.0], &tol));
        assert!(!equal_response(&[0.0, 0.0], &[0.0, 1e-3], &tol));
        assert!(equal_response(&[1e6], &[1e6 + 0.1], &tol));
    }

    #[test]
    fn set_rejects_near_duplicates() {
        let e = ExperimentSet::new(vec![vec![0.0], vec![1e-9]], 1e-3);
        assert!(e.is_err());
        assert!(ExperimentSet::new(vec![vec![0.0], vec![0.5]], 1e-3).is_ok());
    }

    #[test]
    fn sampling_deterministic_and_separated() {
        let bx = Domain::closed(vec![0.0, 0.1], vec![3.0, 5.0]);
        let a = sample_experiment_set(&bx, 11, 42, 1e-3).unwrap();
        let b = sample_experiment_set(&bx, 11, 42, 1e-3).unwrap();
        assert_eq!(a, b);
        let pts = a.points();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                assert!(euclid(&pts[i], &pts[j]) >= 1e-3);
            }
        }
    }

    #[test]
    fn sampling_exhausts_on_oversized_delta() {
        let bx = Domain::closed(vec![0.0], vec![1.0]);
        match sample_experiment_set(&bx, 3, 1, 10.0) {
            Err(Error::SamplingExhausted { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reflexive_pairs_are_not_distinguished() {
        let m = modelzoo::nine_state();
        let set = ExperimentSet::new(vec![vec![0.0], vec![1.0]], 1e-6).unwrap();
        let v = distinguishable_on_set(m.response.as_ref(), &[1.0], &[1.0], &set, &Default::default())
            .unwrap();
        assert!(!v.distinguished);
        assert!(v.max_gap < 1e-12);
    }

    #[test]
    fn nine_state_separated_by_zero_input() {
        let m = modelzoo::nine_state();
        let set = ExperimentSet::new(vec![vec![0.0]], 1e-6).unwrap();
        let v = distinguishable_on_set(m.response.as_ref(), &[1.0], &[2.0], &set, &Default::default())
            .unwrap();
        assert!(v.distinguished);
        assert_eq!(v.witness, Some(0));
        let expected = (1.0f64.cos() - 2.0f64.cos()).abs();
        assert!((v.max_gap - expected).abs() < 1e-5);
    }

    #[test]
    fn symmetry_of_verdicts() {
        let m = modelzoo::smooth_counterexample();
        let set = ExperimentSet::new(vec![vec![1.5], vec![3.0]], 1e-6).unwrap();
        let tol = ToleranceSpec::default();
        let a = distinguishable_on_set(m.response.as_ref(), &[1.0], &[2.0], &set, &tol).unwrap();
        let b = distinguishable_on_set(m.response.as_ref(), &[2.0], &[1.0], &set, &tol).unwrap();
        assert_eq!(a.distinguished, b.distinguished);
        assert!((a.max_gap - b.max_gap).abs() < 1e-15);
    }

    #[test]
    fn scan_finds_midpoint_separator() {
        let m = modelzoo::smooth_counterexample();
        let tol = ToleranceSpec::default();
        let grid = GridSpec::default();
        assert!(scan_distinguishable(m.response.as_ref(), &[1.0], &[2.0], &grid, &tol).unwrap());
    }

    #[test]
    fn midpoint_separates_exactly_one() {
        let m = modelzoo::smooth_counterexample();
        let (x, y) = (1.0, 2.0);
        let u = vec![(x + y) / 2.0];
        let bx = m.response.response(&[x], &u).unwrap()[0];
        let by = m.response.response(&[y], &u).unwrap()[0];
        assert!((bx != 0.0) ^ (by != 0.0));
    }

    #[test]
    fn trial_reports_are_deterministic() {
        let m = modelzoo::nine_state();
        let tol = ToleranceSpec::default();
        let grid = GridSpec { points_per_dim: 11 };
        let a = monte_carlo_theorem(m.response.as_ref(), 3, 8, 9, &tol, &grid).unwrap();
        let b = monte_carlo_theorem(m.response.as_ref(), 3, 8, 9, &tol, &grid).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.separated, a.n_trials);
    }

    #[test]
    fn zero_set_size_rejected() {
        let m = modelzoo::nine_state();
        assert!(monte_carlo_theorem(
            m.response.as_ref(),
            0,
            5,
            1,
            &Default::default(),
            &Default::default()
        )
        .is_err());
    }
}
