//! Accuracy-vs-energy score and pruning-ratio search.
//!
//! The score for per-client ratios `rho` is
//!
//! ```text
//! alpha1/N * sum_i acc_i * (1 - beta_i * exp(lambda_i * rho_i))
//!   + alpha2 / (1/N * sum_i (1 - rho_i) * E_i)
//! ```
//!
//! subject to `0 <= rho_i < 1` and a predicted accuracy no more than `delta`
//! below the unpruned accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub const GRID_STEPS_PER_UNIT: usize = 10_000;
/// Largest grid ratio, `0.999`.
pub const GRID_MAX_INDEX: usize = 9_990;
pub const DEFAULT_DELTA: f64 = 0.05;

pub fn grid_rho(i: usize) -> f64 {
    i as f64 / GRID_STEPS_PER_UNIT as f64
}

/// Either one value shared by every client or one value per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerClient {
    fn expand(&self, n: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            PerClient::Uniform(x) => Ok(vec![*x; n]),
            PerClient::Each(v) if v.len() == n => Ok(v.clone()),
            PerClient::Each(v) => Err(Error::config(format!(
                "{field} has {} entries for {n} clients",
                v.len()
            ))),
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            PerClient::Uniform(_) => None,
            PerClient::Each(v) => Some(v.len()),
        }
    }
}

/// Serialized form of [`ScoreConfig`]; per-client fields may be scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfigSpec {
    #[serde(default)]
    pub clients: Option<usize>,
    pub acc_unp: PerClient,
    pub energy_unp: PerClient,
    #[serde(default = "one")]
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default = "default_beta")]
    pub beta: PerClient,
    #[serde(default = "default_lambda")]
    pub lambda: PerClient,
    /// `null`, `"none"` or `"inf"` disables the accuracy-degradation constraint.
    #[serde(default = "default_delta", with = "delta_serde")]
    pub delta: Option<f64>,
}

mod delta_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        Null(()),
    }

    pub fn serialize<S: Serializer>(d: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) if x.is_infinite() && x > 0.0 => Ok(None),
            Raw::Num(x) => Ok(Some(x)),
            Raw::Null(()) => Ok(None),
            Raw::Text(t) => match t.to_ascii_lowercase().as_str() {
                "none" | "inf" | "infinity" => Ok(None),
                other => Err(de::Error::custom(format!("invalid delta '{other}'"))),
            },
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_beta() -> PerClient {
    PerClient::Uniform(2e-5)
}
fn default_lambda() -> PerClient {
    PerClient::Uniform(10.0)
}
fn default_delta() -> Option<f64> {
    Some(DEFAULT_DELTA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoreConfigSpec", into = "ScoreConfigSpec")]
pub struct ScoreConfig {
    pub acc_unp: Vec<f64>,
    pub energy_unp: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub delta: Option<f64>,
}

impl TryFrom<ScoreConfigSpec> for ScoreConfig {
    type Error = Error;

    fn try_from(s: ScoreConfigSpec) -> Result<Self> {
        let lens = [&s.acc_unp, &s.energy_unp, &s.beta, &s.lambda].map(PerClient::len);
        let n = s
            .clients
            .or_else(|| lens.iter().flatten().copied().max())
            .unwrap_or(1);
        let cfg = ScoreConfig {
            acc_unp: s.acc_unp.expand(n, "acc_unp")?,
            energy_unp: s.energy_unp.expand(n, "energy_unp")?,
            alpha1: s.alpha1,
            alpha2: s.alpha2,
            beta: s.beta.expand(n, "beta")?,
            lambda: s.lambda.expand(n, "lambda")?,
            delta: s.delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ScoreConfig> for ScoreConfigSpec {
    fn from(c: ScoreConfig) -> Self {
        ScoreConfigSpec {
            clients: Some(c.acc_unp.len()),
            acc_unp: PerClient::Each(c.acc_unp),
            energy_unp: PerClient::Each(c.energy_unp),
            alpha1: c.alpha1,
            alpha2: c.alpha2,
            beta: PerClient::Each(c.beta),
            lambda: PerClient::Each(c.lambda),
            delta: c.delta,
        }
    }
}

impl ScoreConfig {
    /// `n` identical clients with `alpha1 = 1`, `beta = 2e-5`, `lambda = 10`
    /// and the default `delta`.
    pub fn uniform(n: usize, acc: f64, energy: f64, alpha2: f64) -> Self {
        ScoreConfig {
            acc_unp: vec![acc; n],
            energy_unp: vec![energy; n],
            alpha1: 1.0,
            alpha2,
            beta: vec![2e-5; n],
            lambda: vec![10.0; n],
            delta: Some(DEFAULT_DELTA),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.acc_unp.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.acc_unp.len();
        if n == 0 {
            return Err(Error::config("score needs at least one client"));
        }
        if [self.energy_unp.len(), self.beta.len(), self.lambda.len()] != [n; 3] {
            return Err(Error::config("per-client score vectors differ in length"));
        }
        if self.acc_unp.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("accuracies must lie in [0, 1]"));
        }
        if self.energy_unp.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("unpruned energies must be > 0"));
        }
        if self.beta.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::config("beta must be > 0"));
        }
        if self.lambda.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("lambda must be > 0"));
        }
        if self.delta.is_some_and(|d| !(d >= 0.0)) {
            return Err(Error::config("delta must be >= 0"));
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return Err(Error::config("alpha weights must be finite"));
        }
        Ok(())
    }
}

/// `acc * (1 - beta * exp(lambda * rho))`. Not clamped.
pub fn decayed_accuracy(acc: f64, beta: f64, lambda: f64, rho: f64) -> f64 {
    acc * (1.0 - beta * (lambda * rho).exp())
}

fn check_rhos(rho: &[f64], cfg: &ScoreConfig) -> Result<()> {
    if rho.len() != cfg.num_clients() {
        return Err(Error::input(format!(
            "{} ratios for {} clients",
            rho.len(),
            cfg.num_clients()
        )));
    }
    if let Some(r) = rho.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::input(format!("pruning ratio {r} outside [0, 1)")));
    }
    Ok(())
}

/// `(accuracy term, energy term)` of the score.
pub fn score_terms(rho: &[f64], cfg: &ScoreConfig) -> Result<(f64, f64)> {
    check_rhos(rho, cfg)?;
    let n = cfg.num_clients() as f64;
    let mut acc = 0.0;
    let mut energy = 0.0;
    for i in 0..rho.len() {
        acc += decayed_accuracy(cfg.acc_unp[i], cfg.beta[i], cfg.lambda[i], rho[i]);
        energy += (1.0 - rho[i]) * cfg.energy_unp[i];
    }
    Ok((cfg.alpha1 / n * acc, cfg.alpha2 / (energy / n)))
}

pub fn score(rho: &[f64], cfg: &ScoreConfig) -> Result<f64> {
    let (a, e) = score_terms(rho, cfg)?;
    Ok(a + e)
}

/// Predicted post-pruning accuracy for `(client, rho)`.
pub trait AccuracyProvider: Sync {
    fn accuracy(&self, cfg: &ScoreConfig, client: usize, rho: f64) -> f64;
}

/// The closed-form decay model.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecayModel;

impl AccuracyProvider for DecayModel {
    fn accuracy(&self, cfg: &ScoreConfig, i: usize, rho: f64) -> f64 {
        decayed_accuracy(cfg.acc_unp[i], cfg.beta[i], cfg.lambda[i], rho)
    }
}

impl<F: Fn(usize, f64) -> f64 + Sync> AccuracyProvider for F {
    fn accuracy(&self, _cfg: &ScoreConfig, i: usize, rho: f64) -> f64 {
        self(i, rho)
    }
}

fn client_feasible(cfg: &ScoreConfig, provider: &dyn AccuracyProvider, i: usize, rho: f64) -> bool {
    if !(0.0..1.0).contains(&rho) {
        return false;
    }
    match cfg.delta {
        None => true,
        Some(d) => provider.accuracy(cfg, i, rho) >= cfg.acc_unp[i] - d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillClimbOptions {
    pub seed: u64,
    pub iterations: usize,
    /// Initial perturbation scale; decays linearly over the run.
    pub sigma: f64,
}

impl Default for HillClimbOptions {
    fn default() -> Self {
        HillClimbOptions {
            seed: 0,
            iterations: 4000,
            sigma: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    UniformGrid,
    Coordinate,
    HillClimb(HillClimbOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSolution {
    pub rho: Vec<f64>,
    pub score: f64,
    pub acc_pred: Vec<f64>,
    pub energy_pred: Vec<f64>,
    pub feasible: bool,
}

fn solution(
    cfg: &ScoreConfig,
    provider: &dyn AccuracyProvider,
    rho: Vec<f64>,
    feasible: bool,
) -> Result<RhoSolution> {
    let score = score(&rho, cfg)?;
    let acc_pred = (0..rho.len())
        .map(|i| provider.accuracy(cfg, i, rho[i]))
        .collect();
    let energy_pred = rho
        .iter()
        .zip(&cfg.energy_unp)
        .map(|(r, e)| (1.0 - r) * e)
        .collect();
    Ok(RhoSolution {
        rho,
        score,
        acc_pred,
        energy_pred,
        feasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub score: f64,
    pub acc_term: f64,
    pub energy_term: f64,
    pub feasible: bool,
}

/// Score terms for a shared ratio at every grid point `0, 1e-4, ..., 0.999`.
pub fn score_curve(cfg: &ScoreConfig, exec: Execution) -> Result<Vec<CurvePoint>> {
    score_curve_with(cfg, exec, &DecayModel)
}

pub fn score_curve_with(
    cfg: &ScoreConfig,
    exec: Execution,
    provider: &dyn AccuracyProvider,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let n = cfg.num_clients();
    Ok(exec.map_range(GRID_MAX_INDEX + 1, |i| {
        let rho = grid_rho(i);
        let (acc_term, energy_term) = score_terms(&vec![rho; n], cfg).unwrap();
        CurvePoint {
            rho,
            score: acc_term + energy_term,
            acc_term,
            energy_term,
            feasible: (0..n).all(|c| client_feasible(cfg, provider, c, rho)),
        }
    }))
}

pub fn optimize_rho(cfg: &ScoreConfig, mode: SearchMode, exec: Execution) -> Result<RhoSolution> {
    optimize_rho_with(cfg, mode, exec, &DecayModel)
}

/// Like [`optimize_rho`], checking the accuracy constraint with `provider`
/// (e.g. measured post-pruning accuracies) instead of the decay model.
pub fn optimize_rho_with(
    cfg: &ScoreConfig,
    mode: SearchMode,
    exec: Execution,
    provider: &dyn AccuracyProvider,
) -> Result<RhoSolution> {
    let uniform = uniform_grid(cfg, exec, provider)?;
    match mode {
        SearchMode::UniformGrid => Ok(uniform),
        SearchMode::Coordinate if !uniform.feasible => Ok(uniform),
        SearchMode::Coordinate => coordinate(cfg, provider, uniform),
        SearchMode::HillClimb(opts) => hill_climb(cfg, provider, opts, uniform),
    }
}

fn uniform_grid(
    cfg: &ScoreConfig,
    exec: Execution,
    provider: &dyn AccuracyProvider,
) -> Result<RhoSolution> {
    let curve = score_curve_with(cfg, exec, provider)?;
    // first strict maximum wins, i.e. ties go to the smaller ratio
    let argmax = |feasible_only: bool| {
        let mut best: Option<&CurvePoint> = None;
        for p in curve.iter().filter(|p| p.feasible || !feasible_only) {
            if best.is_none_or(|b| p.score > b.score) {
                best = Some(p);
            }
        }
        best
    };
    let n = cfg.num_clients();
    match argmax(true) {
        Some(p) => solution(cfg, provider, vec![p.rho; n], true),
        None => {
            let p = argmax(false).unwrap();
            solution(cfg, provider, vec![p.rho; n], false)
        }
    }
}

const COORDINATE_TOL: f64 = 1e-8;
const COORDINATE_MAX_CYCLES: usize = 1000;

fn coordinate(
    cfg: &ScoreConfig,
    provider: &dyn AccuracyProvider,
    start: RhoSolution,
) -> Result<RhoSolution> {
    let n = cfg.num_clients();
    let nf = n as f64;
    let acc_of = |i: usize, r: f64| decayed_accuracy(cfg.acc_unp[i], cfg.beta[i], cfg.lambda[i], r);
    let mut rho = start.rho.clone();
    let mut acc_sum: f64 = (0..n).map(|i| acc_of(i, rho[i])).sum();
    let mut energy_sum: f64 = (0..n).map(|i| (1.0 - rho[i]) * cfg.energy_unp[i]).sum();
    let eval = |a: f64, e: f64| cfg.alpha1 / nf * a + cfg.alpha2 / (e / nf);
    let mut current = eval(acc_sum, energy_sum);
    for _ in 0..COORDINATE_MAX_CYCLES {
        let cycle_start = current;
        for i in 0..n {
            let acc_rest = acc_sum - acc_of(i, rho[i]);
            let energy_rest = energy_sum - (1.0 - rho[i]) * cfg.energy_unp[i];
            let mut best = (current, rho[i]);
            for g in 0..=GRID_MAX_INDEX {
                let r = grid_rho(g);
                if !client_feasible(cfg, provider, i, r) {
                    continue;
                }
                let s = eval(
                    acc_rest + acc_of(i, r),
                    energy_rest + (1.0 - r) * cfg.energy_unp[i],
                );
                if s > best.0 {
                    best = (s, r);
                }
            }
            if best.1 != rho[i] {
                rho[i] = best.1;
                acc_sum = acc_rest + acc_of(i, rho[i]);
                energy_sum = energy_rest + (1.0 - rho[i]) * cfg.energy_unp[i];
                current = eval(acc_sum, energy_sum);
            }
        }
        if current - cycle_start < COORDINATE_TOL {
            break;
        }
    }
    let refined = solution(cfg, provider, rho, true)?;
    Ok(if refined.score >= start.score {
        refined
    } else {
        start
    })
}

fn hill_climb(
    cfg: &ScoreConfig,
    provider: &dyn AccuracyProvider,
    opts: HillClimbOptions,
    uniform: RhoSolution,
) -> Result<RhoSolution> {
    let n = cfg.num_clients();
    let max_rho = grid_rho(GRID_MAX_INDEX);
    let feasible = |r: &[f64]| (0..n).all(|i| client_feasible(cfg, provider, i, r[i]));
    let mut rho = vec![0.0; n];
    if !feasible(&rho) {
        // nothing to climb from; report the grid diagnosis
        return Ok(uniform);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best = score(&rho, cfg)?;
    let iters = opts.iterations.max(1);
    for t in 0..iters {
        let sigma = opts.sigma * (1.0 - t as f64 / iters as f64) + 1e-4;
        let shared: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
        let proposal: Vec<f64> = rho
            .iter()
            .map(|r| {
                let own: f64 = rng.sample::<f64, _>(StandardNormal) * sigma * 0.25;
                (r + shared + own).clamp(0.0, max_rho)
            })
            .collect();
        if !feasible(&proposal) {
            continue;
        }
        let s = score(&proposal, cfg)?;
        if s > best {
            best = s;
            rho = proposal;
        }
    }
    solution(cfg, provider, rho, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ton() -> ScoreConfig {
        ScoreConfig::uniform(10, 0.9375, 3171152.39, 50000.0)
    }

    #[test]
    fn decay_at_zero_and_known_point() {
        assert!((decayed_accuracy(0.9375, 2e-5, 10.0, 0.0) - 0.93748125).abs() < 1e-12);
        let v = decayed_accuracy(0.9375, 2e-5, 10.0, 0.6575);
        assert!((v - 0.924058).abs() < 1e-6, "{v}");
    }

    #[test]
    fn decay_is_monotone() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let v = decayed_accuracy(0.9, 1e-3, 5.0, i as f64 / 100.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn score_at_zero() {
        let s = score(&[0.0; 10], &ton()).unwrap();
        assert!((s - 0.95325).abs() < 1e-5, "{s}");
    }

    #[test]
    fn score_rejects_full_pruning() {
        assert!(score(&[1.0; 10], &ton()).is_err());
        assert!(score(&[0.5; 9], &ton()).is_err());
    }

    #[test]
    fn score_is_permutation_invariant() {
        let mut cfg = ton();
        cfg.acc_unp = (0..10).map(|i| 0.9 + 0.005 * i as f64).collect();
        cfg.energy_unp = (0..10).map(|i| 1e6 * (1.0 + i as f64)).collect();
        let rho: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
        let s = score(&rho, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..10).collect();
        perm.reverse();
        perm.swap(2, 7);
        let pcfg = ScoreConfig {
            acc_unp: perm.iter().map(|&i| cfg.acc_unp[i]).collect(),
            energy_unp: perm.iter().map(|&i| cfg.energy_unp[i]).collect(),
            ..cfg.clone()
        };
        let prho: Vec<f64> = perm.iter().map(|&i| rho[i]).collect();
        assert!((score(&prho, &pcfg).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn no_energy_reward_means_no_pruning() {
        let mut cfg = ton();
        cfg.alpha2 = 0.0;
        let sol = optimize_rho(&cfg, SearchMode::UniformGrid, Execution::Sequential).unwrap();
        assert_eq!(sol.rho, vec![0.0; 10]);
    }

    #[test]
    fn unconstrained_optimum_runs_to_the_boundary() {
        // the energy term diverges as rho -> 1, so only delta keeps the
        // optimum in the interior
        let mut cfg = ton();
        cfg.delta = None;
        let sol = optimize_rho(&cfg, SearchMode::UniformGrid, Execution::Sequential).unwrap();
        assert_eq!(sol.rho[0], 0.999);
    }

    #[test]
    fn infeasible_reports_diagnosis() {
        let mut cfg = ton();
        cfg.delta = Some(0.0);
        let sol = optimize_rho(&cfg, SearchMode::UniformGrid, Execution::Sequential).unwrap();
        assert!(!sol.feasible);
    }

    #[test]
    fn execution_modes_agree() {
        let a = optimize_rho(&ton(), SearchMode::UniformGrid, Execution::Sequential).unwrap();
        let b = optimize_rho(&ton(), SearchMode::UniformGrid, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_json_accepts_scalars_and_null_delta() {
        let cfg: ScoreConfig = serde_json::from_str(
            r#"{"clients": 3, "acc_unp": 0.9, "energy_unp": [1.0, 2.0, 3.0], "alpha2": 5.0, "delta": null}"#,
        )
        .unwrap();
        assert_eq!(cfg.acc_unp, vec![0.9; 3]);
        assert_eq!(cfg.beta, vec![2e-5; 3]);
        assert_eq!(cfg.delta, None);
        let back: ScoreConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let bad = serde_json::from_str::<ScoreConfig>(
            r#"{"acc_unp": [0.9, 0.8], "energy_unp": [1.0, 2.0, 3.0], "alpha2": 5.0}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn measured_accuracy_provider_is_used() {
        let cfg = ton();
        // measured accuracy collapses past rho = 0.3
        let measured = |_i: usize, r: f64| if r > 0.3 { 0.5 } else { 0.9375 };
        let sol = optimize_rho_with(
            &cfg,
            SearchMode::UniformGrid,
            Execution::Sequential,
            &measured,
        )
        .unwrap();
        assert!(sol.rho[0] <= 0.3);
        assert!(sol.feasible);
    }
}
