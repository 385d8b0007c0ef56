//! Non-IID client partitioning by normalized gamma draws.
//!
//! Each client (or each client/class cell) receives a share proportional to
//! an independent `Gamma(alpha, beta)` draw. Small `alpha` gives strongly
//! skewed shares; very large `alpha` approaches an even split.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    1.0
}

impl GammaSpec {
    pub fn new(alpha: f64, seed: u64) -> Self {
        GammaSpec {
            alpha,
            beta: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "gamma alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "gamma beta must be > 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Natural log of a `Gamma(alpha, 1)` variate (Marsaglia–Tsang squeeze with
/// the `U^(1/alpha)` boost below `alpha = 1`). Working in log space keeps
/// tiny-shape draws from underflowing to zero.
pub fn sample_ln_gamma<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    if alpha < 1.0 {
        let u: f64 = rng.random();
        // u in [0, 1); ln(0) would be -inf, so nudge off zero
        let ln_u = u.max(f64::MIN_POSITIVE).ln();
        return sample_ln_gamma(rng, alpha + 1.0) + ln_u / alpha;
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// A `Gamma(alpha, beta)` variate with `beta` as the scale.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> f64 {
    beta * sample_ln_gamma(rng, alpha).exp()
}

fn proportions_from_rng<R: Rng + ?Sized>(rng: &mut R, spec: &GammaSpec, n: usize) -> Vec<f64> {
    let ln_beta = spec.beta.ln();
    let logs: Vec<f64> = (0..n)
        .map(|_| sample_ln_gamma(rng, spec.alpha) + ln_beta)
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs
        .iter()
        .map(|l| (l - max).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `n` independent gamma draws normalized to sum to one.
pub fn sample_gamma_proportions(spec: &GammaSpec, n: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("need at least one proportion"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(proportions_from_rng(&mut rng, spec, n))
}

/// Integer allocation of `total` items by `shares` (largest remainder).
/// Leftover units go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Quantity,
    Label,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// Sample indices per client, ascending.
    pub assignments: Vec<Vec<usize>>,
    /// Quantity: `clients x 1`. Label and mixed: `clients x classes`, each column sums to one.
    pub proportions: Vec<Vec<f64>>,
    /// Mixed mode only: per-client size shares used as subsampling targets.
    pub quantity_shares: Option<Vec<f64>>,
    /// `clients x classes` sample counts.
    pub counts: Vec<Vec<usize>>,
    /// Samples dropped by mixed-mode subsampling.
    pub subsampled: usize,
    pub warnings: Vec<String>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total_assigned(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Clients x classes count matrix as CSV (`client,<class names...>`).
    pub fn write_heatmap<W: Write>(&self, out: W, class_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (k, row) in self.counts.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_heatmap(&self, path: &Path, class_names: &[String]) -> Result<()> {
        self.write_heatmap(std::fs::File::create(path)?, class_names)
    }

    fn finish(
        mode: PartitionMode,
        ds: &Dataset,
        mut assignments: Vec<Vec<usize>>,
        proportions: Vec<Vec<f64>>,
    ) -> Self {
        let mut counts = vec![vec![0; ds.num_classes()]; assignments.len()];
        let mut warnings = Vec::new();
        for (k, a) in assignments.iter_mut().enumerate() {
            a.sort_unstable();
            for &i in a.iter() {
                counts[k][ds.labels()[i]] += 1;
            }
            if a.is_empty() {
                let msg = format!("client {k} received no samples");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        PartitionPlan {
            mode,
            assignments,
            proportions,
            quantity_shares: None,
            counts,
            subsampled: 0,
            warnings,
        }
    }
}

const STREAM_PROPORTIONS: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;

fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(STREAM_PROPORTIONS);
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    b.set_stream(STREAM_SHUFFLE);
    (a, b)
}

fn check_clients(clients: usize) -> Result<()> {
    if clients == 0 {
        Err(Error::config("need at least one client"))
    } else {
        Ok(())
    }
}

/// Quantity skew: client sizes follow normalized gamma shares, class mix
/// follows the global mix.
pub fn partition_quantity(ds: &Dataset, clients: usize, spec: &GammaSpec) -> Result<PartitionPlan> {
    check_clients(clients)?;
    spec.validate()?;
    if ds.len() < clients {
        return Err(Error::config(format!(
            "{} samples cannot cover {clients} clients",
            ds.len()
        )));
    }
    let (mut prop_rng, mut shuf_rng) = rngs(spec.seed);
    let theta = proportions_from_rng(&mut prop_rng, spec, clients);
    let sizes = largest_remainder(&theta, ds.len());
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut shuf_rng);
    let mut start = 0;
    let assignments = sizes
        .iter()
        .map(|&s| {
            let chunk = idx[start..start + s].to_vec();
            start += s;
            chunk
        })
        .collect();
    let proportions = theta.into_iter().map(|t| vec![t]).collect();
    Ok(PartitionPlan::finish(
        PartitionMode::Quantity,
        ds,
        assignments,
        proportions,
    ))
}

/// Label skew: every class is split across clients by its own independent
/// normalized gamma draw.
pub fn partition_label(ds: &Dataset, clients: usize, spec: &GammaSpec) -> Result<PartitionPlan> {
    check_clients(clients)?;
    spec.validate()?;
    let by_class = ds.indices_by_class();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {c} has no samples")));
    }
    let (mut prop_rng, mut shuf_rng) = rngs(spec.seed);
    let mut assignments = vec![Vec::new(); clients];
    let mut proportions = vec![vec![0.0; by_class.len()]; clients];
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let theta = proportions_from_rng(&mut prop_rng, spec, clients);
        let sizes = largest_remainder(&theta, idx.len());
        idx.shuffle(&mut shuf_rng);
        let mut start = 0;
        for k in 0..clients {
            assignments[k].extend_from_slice(&idx[start..start + sizes[k]]);
            start += sizes[k];
            proportions[k][c] = theta[k];
        }
    }
    Ok(PartitionPlan::finish(
        PartitionMode::Label,
        ds,
        assignments,
        proportions,
    ))
}

/// Mixed skew: label-skew allocation, then each client is subsampled down to
/// its quantity-skew target. Dropped samples are counted in `subsampled`.
pub fn partition_mixed(
    ds: &Dataset,
    clients: usize,
    quantity: &GammaSpec,
    label: &GammaSpec,
) -> Result<PartitionPlan> {
    quantity.validate()?;
    let mut plan = partition_label(ds, clients, label)?;
    let (mut prop_rng, mut shuf_rng) = rngs(quantity.seed ^ 0x9e37_79b9_7f4a_7c15);
    let shares = proportions_from_rng(&mut prop_rng, quantity, clients);
    let targets = largest_remainder(&shares, ds.len());
    let mut dropped = 0;
    for (a, &target) in plan.assignments.iter_mut().zip(&targets) {
        if a.len() > target {
            a.shuffle(&mut shuf_rng);
            dropped += a.len() - target;
            a.truncate(target);
        }
    }
    let mut mixed = PartitionPlan::finish(
        PartitionMode::Mixed,
        ds,
        std::mem::take(&mut plan.assignments),
        plan.proportions,
    );
    mixed.quantity_shares = Some(shares);
    mixed.subsampled = dropped;
    Ok(mixed)
}
