//! Federated rounds: broadcast, local Adam training (FedAvg or FedProx),
//! first-round pruning with fine-tuning, mask-aware aggregation, and
//! re-masked redistribution.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{
    build_model, evaluate, loss_and_grads_samples, AdamConfig, AdamState, Architecture,
    ModelParams, ParamTensors, Prox,
};
use crate::partition::PartitionPlan;
use crate::pruning::{build_mask, check_rho, importance_l1, PruneMask};
use crate::rho::PerClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Divide each coordinate by the weight of the clients that keep it.
    #[default]
    Normalized,
    /// `sum_k p_k * m_kj * w_kj` with no per-coordinate normalizer.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    /// Proximal coefficient; must be 0 for FedAvg.
    pub mu: f64,
    pub local_epochs: usize,
    /// Fine-tuning epochs after pruning; defaults to `local_epochs`.
    pub finetune_epochs: Option<usize>,
    pub rounds: usize,
    /// Shared ratio or one per client.
    pub rho: PerClient,
    pub aggregation: AggregationMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            algorithm: Algorithm::FedAvg,
            mu: 0.0,
            local_epochs: 20,
            finetune_epochs: None,
            rounds: 40,
            rho: PerClient::Uniform(0.0),
            aggregation: AggregationMode::Normalized,
            learning_rate: 0.001,
            batch_size: 128,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl RoundConfig {
    /// Every invariant violation, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.rounds == 0 {
            v.push("rounds must be >= 1".to_string());
        }
        if self.local_epochs == 0 {
            v.push("local_epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".to_string());
        }
        if !(self.mu >= 0.0) {
            v.push("mu must be >= 0".to_string());
        }
        if self.algorithm == Algorithm::FedAvg && self.mu != 0.0 {
            v.push("mu must be 0 when algorithm = fedavg".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push("learning_rate must be >= 0".to_string());
        }
        let rhos = match &self.rho {
            PerClient::Uniform(r) => vec![*r],
            PerClient::Each(rs) => rs.clone(),
        };
        if rhos.iter().any(|r| check_rho(*r).is_err()) {
            v.push("rho must lie in [0, 1)".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            Some(msg) => Err(Error::config(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.local_epochs)
    }

    fn rho_for(&self, client: usize) -> Result<f64> {
        match &self.rho {
            PerClient::Uniform(r) => Ok(*r),
            PerClient::Each(rs) => rs.get(client).copied().ok_or_else(|| {
                Error::config(format!("no pruning ratio given for client {client}"))
            }),
        }
    }

    fn prox_mu(&self) -> Option<f64> {
        (self.algorithm == Algorithm::FedProx).then_some(self.mu)
    }
}

/// Per-client RNG stream used for mini-batch shuffling.
pub fn client_rng(seed: u64, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + client as u64);
    rng
}

fn zero_pruned_grads(grads: &mut ParamTensors, mask: &PruneMask) -> Result<()> {
    mask.apply_to(grads)
}

/// Runs `epochs` passes of shuffled mini-batch Adam over `data`, returning
/// the mean training loss of the last epoch. Gradients of coordinates pruned
/// by `mask` are zeroed before every step.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    model: &mut ModelParams,
    opt: &mut AdamState,
    data: &Dataset,
    batch_size: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    prox: Option<(f64, &ModelParams)>,
    mask: Option<&PruneMask>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    let mut last = f64::NAN;
    for _ in 0..epochs {
        // each epoch permutes the identity, so epoch batches do not depend
        // on how epochs are split across calls
        order.clear();
        order.extend(0..data.len());
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| data.sample(i)).collect();
            let prox = prox.map(|(mu, anchor)| Prox { mu, anchor });
            let (loss, mut grads) = loss_and_grads_samples(model, &batch, prox)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round: 0,
                    client: 0,
                    loss,
                });
            }
            if let Some(mask) = mask {
                zero_pruned_grads(&mut grads, mask)?;
            }
            opt.step(model, &grads)?;
            total += loss * batch.len() as f64;
        }
        last = total / data.len() as f64;
    }
    Ok(last)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub model: ModelParams,
    pub mask: Option<PruneMask>,
    pub optimizer: AdamState,
    /// Aggregation weight `|D_k| / sum_i |D_i|`.
    pub weight: f64,
    pub rng: ChaCha8Rng,
    /// Number of times this client has sent its mask to the server.
    pub mask_uploads: usize,
}

impl ClientState {
    pub fn new(
        id: usize,
        data: Dataset,
        init: &ModelParams,
        weight: f64,
        cfg: &RoundConfig,
    ) -> Result<Self> {
        Ok(ClientState {
            id,
            data,
            model: init.clone(),
            mask: None,
            optimizer: AdamState::new(init, AdamConfig::with_lr(cfg.learning_rate))?,
            weight,
            rng: client_rng(cfg.seed, id),
            mask_uploads: 0,
        })
    }

    /// Sets the local model to `M_k ⊙ W_global` (all-ones mask before pruning).
    pub fn receive(&mut self, global: &ModelParams) -> Result<()> {
        let mut model = global.clone();
        if let Some(mask) = &self.mask {
            mask.apply_to(model.params_mut())?;
        }
        self.model = model;
        Ok(())
    }

    pub fn as_update(&self) -> ClientUpdate<'_> {
        ClientUpdate {
            model: &self.model,
            mask: self.mask.as_ref(),
            weight: self.weight,
        }
    }
}

/// One round of local work: receive, train, and on the first round prune
/// and fine-tune. Returns the mean training loss of the final epoch.
pub fn local_update(
    client: &mut ClientState,
    global: &ModelParams,
    cfg: &RoundConfig,
    round: usize,
    is_first_round: bool,
) -> Result<f64> {
    let id = client.id;
    client.receive(global)?;
    let anchor = cfg.prox_mu().map(|mu| (mu, client.model.clone()));
    let prox = anchor.as_ref().map(|(mu, a)| (*mu, a));
    let ClientState {
        model,
        optimizer,
        data,
        rng,
        mask,
        ..
    } = client;
    let mut loss = train_epochs(
        model,
        optimizer,
        data,
        cfg.batch_size,
        cfg.local_epochs,
        rng,
        prox,
        mask.as_ref(),
    )
    .map_err(|e| retag(e, round, id))?;

    if is_first_round {
        let new_mask = build_mask(&importance_l1(model), cfg.rho_for(id)?)?;
        new_mask.apply_to(model.params_mut())?;
        new_mask.apply_to_optimizer(optimizer)?;
        let pruned_any = new_mask.pruned_count() > 0;
        *mask = Some(new_mask);
        if pruned_any && cfg.finetune_epochs() > 0 {
            loss = train_epochs(
                model,
                optimizer,
                data,
                cfg.batch_size,
                cfg.finetune_epochs(),
                rng,
                prox,
                mask.as_ref(),
            )
            .map_err(|e| retag(e, round, id))?;
        }
    }
    Ok(loss)
}

fn retag(e: Error, round: usize, client: usize) -> Error {
    match e {
        Error::Divergence { loss, .. } => Error::Divergence {
            round,
            client,
            loss,
        },
        other => other,
    }
}

/// What the server sees from one client.
#[derive(Debug, Clone, Copy)]
pub struct ClientUpdate<'a> {
    pub model: &'a ModelParams,
    /// `None` means nothing is pruned.
    pub mask: Option<&'a PruneMask>,
    pub weight: f64,
}

/// Mask-aware weighted aggregation, reducing in slice order.
///
/// Normalized mode: `W_j = sum_k p_k m_kj w_kj / sum_k p_k m_kj`, falling back
/// to `previous` where no client keeps `j`; when every client keeps `j` this
/// is the plain weighted sum. Literal mode: `W_j = sum_k p_k m_kj w_kj`.
/// Biases are always plain weighted averages.
pub fn aggregate_masked(
    updates: &[ClientUpdate<'_>],
    previous: &ModelParams,
    mode: AggregationMode,
) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::input("no client updates to aggregate"));
    }
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "client weights sum to {total}, expected 1"
        )));
    }
    for u in updates {
        if !u.model.params().congruent(previous.params()) {
            return Err(Error::input(
                "client model topology differs from the global model",
            ));
        }
    }
    let mut out = previous.clone();
    let layout = previous.layout().clone();
    let params = out.params_mut();
    for (p, w_out) in params.weights.iter_mut().enumerate() {
        let base = layout.range(p).start;
        let prev = previous.params().weights[p].as_slice();
        for (o, dst) in w_out.as_mut_slice().iter_mut().enumerate() {
            let j = base + o;
            let mut num = 0.0;
            let mut coverage = 0.0;
            let mut all_keep = true;
            for u in updates {
                let m = if u.mask.is_none_or(|m| m.keeps(j)) {
                    1.0
                } else {
                    0.0
                };
                all_keep &= m == 1.0;
                let pm = u.weight * m;
                num += pm * u.model.params().weights[p].as_slice()[o];
                coverage += pm;
            }
            *dst = match mode {
                AggregationMode::Literal => num,
                AggregationMode::Normalized if all_keep => num,
                AggregationMode::Normalized if coverage > 0.0 => num / coverage,
                AggregationMode::Normalized => prev[o],
            };
        }
    }
    for (p, b_out) in params.biases.iter_mut().enumerate() {
        for (o, dst) in b_out.as_mut_slice().iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in updates {
                acc += u.weight * u.model.params().biases[p].as_slice()[o];
            }
            *dst = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    /// Final-epoch training loss per participating client, by client id.
    pub client_losses: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub seconds: f64,
}

impl RoundMetrics {
    pub fn mean_client_loss(&self) -> f64 {
        self.client_losses.iter().sum::<f64>() / self.client_losses.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub rounds: Vec<RoundMetrics>,
    pub global: ModelParams,
    /// Masks held by the server, by participating client.
    pub masks: Vec<PruneMask>,
    /// Ids of clients that took part (non-empty partitions).
    pub participants: Vec<usize>,
    pub mask_uploads: usize,
    pub warnings: Vec<String>,
}

impl SimulationReport {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.rounds.last().expect("at least one round")
    }
}

/// Called after every round with the round index, the clients (already
/// holding their re-masked copy of the new global model), and the global model.
pub type RoundObserver<'a> = dyn FnMut(usize, &[ClientState], &ModelParams) + 'a;

pub fn run_simulation(
    train: &Dataset,
    plan: &PartitionPlan,
    arch: &Architecture,
    cfg: &RoundConfig,
    test: &Dataset,
) -> Result<SimulationReport> {
    run_simulation_observed(train, plan, arch, cfg, test, &mut |_, _, _| {})
}

pub fn run_simulation_observed(
    train: &Dataset,
    plan: &PartitionPlan,
    arch: &Architecture,
    cfg: &RoundConfig,
    test: &Dataset,
    observer: &mut RoundObserver<'_>,
) -> Result<SimulationReport> {
    cfg.validate()?;
    if let PerClient::Each(rs) = &cfg.rho {
        if rs.len() != plan.num_clients() {
            return Err(Error::config(format!(
                "{} per-client ratios for {} clients",
                rs.len(),
                plan.num_clients()
            )));
        }
    }
    if plan.assignments.iter().flatten().any(|&i| i >= train.len()) {
        return Err(Error::input(
            "partition plan refers to samples outside the training set",
        ));
    }
    let mut warnings = plan.warnings.clone();
    let total: usize = plan.total_assigned();
    if total == 0 {
        return Err(Error::input("partition plan assigns no samples"));
    }
    let global0 = build_model(arch, cfg.seed)?;
    let mut clients = Vec::new();
    for (k, idx) in plan.assignments.iter().enumerate() {
        if idx.is_empty() {
            let msg = format!("client {k} has no data and is skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let weight = idx.len() as f64 / total as f64;
        clients.push(ClientState::new(
            k,
            train.subset(idx),
            &global0,
            weight,
            cfg,
        )?);
    }
    let participants: Vec<usize> = clients.iter().map(|c| c.id).collect();

    let mut global = global0;
    let mut server_masks: Vec<PruneMask> = Vec::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for q in 0..cfg.rounds {
        let started = Instant::now();
        let first = q == 0;
        let losses = cfg
            .execution
            .map_mut(&mut clients, |c| local_update(c, &global, cfg, q, first));
        let client_losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
        if first {
            // masks travel to the server exactly once
            for c in clients.iter_mut() {
                server_masks.push(c.mask.clone().expect("mask built in the first round"));
                c.mask_uploads += 1;
            }
        }
        let updates: Vec<ClientUpdate<'_>> = clients
            .iter()
            .zip(&server_masks)
            .map(|(c, m)| ClientUpdate {
                model: &c.model,
                mask: Some(m),
                weight: c.weight,
            })
            .collect();
        global = aggregate_masked(&updates, &global, cfg.aggregation)?;
        for c in clients.iter_mut() {
            c.receive(&global)?;
        }
        let ev = evaluate(&global, test)?;
        rounds.push(RoundMetrics {
            round: q,
            accuracy: ev.accuracy,
            loss: ev.loss,
            client_losses,
            confusion: ev.confusion,
            seconds: started.elapsed().as_secs_f64(),
        });
        observer(q, &clients, &global);
    }
    Ok(SimulationReport {
        rounds,
        global,
        masks: server_masks,
        participants,
        mask_uploads: clients.iter().map(|c| c.mask_uploads).sum(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_len: 3,
            layers: vec![LayerSpec::Flatten, LayerSpec::dense(3, 2)],
        }
    }

    fn model_with(values: &[f64]) -> ModelParams {
        let mut m = ModelParams::zeros(&tiny_arch()).unwrap();
        for (j, v) in values.iter().enumerate() {
            m.set_weight(j, *v);
        }
        m
    }

    #[test]
    fn violations_list() {
        let cfg = RoundConfig {
            mu: 0.1,
            ..RoundConfig::default()
        };
        assert!(cfg.violations().iter().any(|v| v.contains("fedavg")));
        let cfg = RoundConfig {
            algorithm: Algorithm::FedProx,
            mu: -1.0,
            ..RoundConfig::default()
        };
        assert!(cfg.violations().iter().any(|v| v == "mu must be >= 0"));
        let cfg = RoundConfig {
            local_epochs: 0,
            rounds: 0,
            ..RoundConfig::default()
        };
        assert_eq!(cfg.violations().len(), 2);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let a = model_with(&[1.0; 6]);
        let ups = [ClientUpdate {
            model: &a,
            mask: None,
            weight: 0.5,
        }];
        assert!(matches!(
            aggregate_masked(&ups, &a, AggregationMode::Normalized),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fully_pruned_coordinate() {
        let a = model_with(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = model_with(&[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let prev = model_with(&[9.0; 6]);
        let layout = a.layout().clone();
        let mut bits = vec![true; 6];
        bits[0] = false;
        let mask = PruneMask::from_bits(bits, layout, 0.1).unwrap();
        let ups = [
            ClientUpdate {
                model: &a,
                mask: Some(&mask),
                weight: 0.5,
            },
            ClientUpdate {
                model: &b,
                mask: Some(&mask),
                weight: 0.5,
            },
        ];
        let norm = aggregate_masked(&ups, &prev, AggregationMode::Normalized).unwrap();
        let lit = aggregate_masked(&ups, &prev, AggregationMode::Literal).unwrap();
        assert_eq!(norm.weight(0), 9.0);
        assert_eq!(lit.weight(0), 0.0);
        assert_eq!(norm.weight(1), 3.0);
    }
}
