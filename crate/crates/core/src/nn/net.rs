//! Forward pass, softmax cross-entropy, and exact backpropagation.

use super::arch::{ActShape, LayerSpec};
use super::model::{ModelParams, ParamTensors};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// FedProx proximal term `(mu / 2) * ||W - anchor||^2` over weights and biases.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ModelParams,
}

struct Plan {
    shapes: Vec<ActShape>,
    /// Parameter-tensor index for each layer, if it has parameters.
    param_of: Vec<Option<usize>>,
}

fn plan(model: &ModelParams) -> Plan {
    // validated when the model was built
    let shapes = model.arch().trace().expect("model architecture is valid");
    let mut next = 0;
    let param_of = model
        .arch()
        .layers
        .iter()
        .map(|l| {
            l.has_params().then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    Plan { shapes, param_of }
}

fn seq(s: ActShape) -> (usize, usize) {
    match s {
        ActShape::Seq { channels, len } => (channels, len),
        ActShape::Flat(n) => (1, n),
    }
}

/// Runs one sample through the network, returning every activation
/// (`acts[0]` is the input, `acts[i + 1]` the output of layer `i`).
fn forward_sample(model: &ModelParams, plan: &Plan, x: &[f64]) -> Vec<Vec<f64>> {
    let layers = &model.arch().layers;
    let params = model.params();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let input = &acts[i];
        let out = match *layer {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                padding,
            } => {
                let p = plan.param_of[i].unwrap();
                let w = params.weights[p].as_slice();
                let b = params.biases[p].as_slice();
                let (_, lin) = seq(plan.shapes[i]);
                let (_, lout) = seq(plan.shapes[i + 1]);
                let mut out = vec![0.0; out_channels * lout];
                for co in 0..out_channels {
                    let row = &mut out[co * lout..(co + 1) * lout];
                    row.iter_mut().for_each(|v| *v = b[co]);
                    for ci in 0..in_channels {
                        let xin = &input[ci * lin..(ci + 1) * lin];
                        let wk = &w[(co * in_channels + ci) * kernel_size..][..kernel_size];
                        for (k, &wv) in wk.iter().enumerate() {
                            // output t reads input t + k - padding
                            let t_lo = padding.saturating_sub(k);
                            let t_hi = (lin + padding).saturating_sub(k).min(lout);
                            for t in t_lo..t_hi {
                                row[t] += wv * xin[t + k - padding];
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::MaxPool1d { size } => {
                let (c, lin) = seq(plan.shapes[i]);
                let lout = lin / size;
                let mut out = Vec::with_capacity(c * lout);
                for ch in 0..c {
                    for t in 0..lout {
                        let win = &input[ch * lin + t * size..][..size];
                        out.push(win.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                    }
                }
                out
            }
            LayerSpec::Dense { n_in, n_out } => {
                let p = plan.param_of[i].unwrap();
                let w = params.weights[p].as_slice();
                let b = params.biases[p].as_slice();
                (0..n_out)
                    .map(|o| {
                        let wr = &w[o * n_in..(o + 1) * n_in];
                        b[o] + wr.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                    })
                    .collect()
            }
            LayerSpec::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Flatten => input.clone(),
        };
        acts.push(out);
    }
    acts
}

/// Backpropagates `grad_out` (gradient w.r.t. the logits), accumulating into `grads`.
fn backward_sample(
    model: &ModelParams,
    plan: &Plan,
    acts: &[Vec<f64>],
    grad_out: Vec<f64>,
    grads: &mut ParamTensors,
) {
    let layers = &model.arch().layers;
    let params = model.params();
    let mut g = grad_out;
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        let need_input_grad = i > 0;
        g = match *layer {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                padding,
            } => {
                let p = plan.param_of[i].unwrap();
                let w = params.weights[p].as_slice();
                let (_, lin) = seq(plan.shapes[i]);
                let (_, lout) = seq(plan.shapes[i + 1]);
                let mut gin = if need_input_grad {
                    vec![0.0; in_channels * lin]
                } else {
                    Vec::new()
                };
                {
                    let gb = grads.biases[p].as_mut_slice();
                    for co in 0..out_channels {
                        gb[co] += g[co * lout..(co + 1) * lout].iter().sum::<f64>();
                    }
                }
                let gw = grads.weights[p].as_mut_slice();
                for co in 0..out_channels {
                    let go = &g[co * lout..(co + 1) * lout];
                    for ci in 0..in_channels {
                        let xin = &input[ci * lin..(ci + 1) * lin];
                        let base = (co * in_channels + ci) * kernel_size;
                        for k in 0..kernel_size {
                            let t_lo = padding.saturating_sub(k);
                            let t_hi = (lin + padding).saturating_sub(k).min(lout);
                            let mut acc = 0.0;
                            for t in t_lo..t_hi {
                                acc += go[t] * xin[t + k - padding];
                            }
                            gw[base + k] += acc;
                            if need_input_grad {
                                let wv = w[base + k];
                                let gi = &mut gin[ci * lin..(ci + 1) * lin];
                                for t in t_lo..t_hi {
                                    gi[t + k - padding] += go[t] * wv;
                                }
                            }
                        }
                    }
                }
                gin
            }
            LayerSpec::MaxPool1d { size } => {
                let (c, lin) = seq(plan.shapes[i]);
                let lout = lin / size;
                let mut gin = vec![0.0; c * lin];
                for ch in 0..c {
                    for t in 0..lout {
                        let start = ch * lin + t * size;
                        let win = &input[start..start + size];
                        // first maximum wins ties, matching the forward fold
                        let mut best = 0;
                        for s in 1..size {
                            if win[s] > win[best] {
                                best = s;
                            }
                        }
                        gin[start + best] += g[ch * lout + t];
                    }
                }
                gin
            }
            LayerSpec::Dense { n_in, n_out } => {
                let p = plan.param_of[i].unwrap();
                let w = params.weights[p].as_slice();
                {
                    let gb = grads.biases[p].as_mut_slice();
                    for o in 0..n_out {
                        gb[o] += g[o];
                    }
                }
                let gw = grads.weights[p].as_mut_slice();
                for o in 0..n_out {
                    let go = g[o];
                    if go != 0.0 {
                        for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *gwi += go * xi;
                        }
                    }
                }
                if need_input_grad {
                    let mut gin = vec![0.0; n_in];
                    for o in 0..n_out {
                        let go = g[o];
                        if go != 0.0 {
                            for (gi, wi) in gin.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                                *gi += go * wi;
                            }
                        }
                    }
                    gin
                } else {
                    Vec::new()
                }
            }
            LayerSpec::Relu => g
                .iter()
                .zip(input)
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => g,
        };
    }
}

/// `(log-sum-exp - logit[label], softmax)` for one sample.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

fn check_features(model: &ModelParams, n: usize) -> Result<()> {
    if n != model.arch().input_len {
        return Err(Error::input(format!(
            "model expects {} features, got {n}",
            model.arch().input_len
        )));
    }
    Ok(())
}

/// Pre-softmax logits `[batch, classes]`.
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    if batch.shape().len() != 2 || batch.rows() == 0 {
        return Err(Error::input(
            "forward expects a non-empty [batch, features] tensor",
        ));
    }
    check_features(model, batch.cols())?;
    let plan = plan(model);
    let rows: Vec<Vec<f64>> = (0..batch.rows())
        .map(|r| forward_sample(model, &plan, batch.row(r)).pop().unwrap())
        .collect();
    Tensor::from_rows(&rows)
}

/// Logits for a single feature vector.
pub fn predict_logits(model: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_features(model, x.len())?;
    Ok(forward_sample(model, &plan(model), x).pop().unwrap())
}

/// Mean cross-entropy and its exact gradient over `(features, label)` samples.
pub(crate) fn loss_and_grads_samples(
    model: &ModelParams,
    samples: &[(&[f64], usize)],
    prox: Option<Prox<'_>>,
) -> Result<(f64, ParamTensors)> {
    if samples.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let plan = plan(model);
    let classes = plan.shapes.last().unwrap().size();
    let scale = 1.0 / samples.len() as f64;
    let mut grads = ParamTensors::zeros_like(model.params());
    let mut total = 0.0;
    for &(x, label) in samples {
        check_features(model, x.len())?;
        if label >= classes {
            return Err(Error::input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let acts = forward_sample(model, &plan, x);
        let (loss, mut probs) = softmax_xent(acts.last().unwrap(), label);
        total += loss;
        probs[label] -= 1.0;
        probs.iter_mut().for_each(|p| *p *= scale);
        backward_sample(model, &plan, &acts, probs, &mut grads);
    }
    let mut loss = total * scale;
    if let Some(Prox { mu, anchor }) = prox {
        if mu < 0.0 {
            return Err(Error::config("mu must be >= 0"));
        }
        if !anchor.params().congruent(model.params()) {
            return Err(Error::input("proximal anchor does not match the model"));
        }
        loss += 0.5 * mu * model.params().sum_sq_diff(anchor.params());
        for ((g, w), a) in grads
            .iter_mut()
            .zip(model.params().iter())
            .zip(anchor.params().iter())
        {
            for ((gi, wi), ai) in g
                .as_mut_slice()
                .iter_mut()
                .zip(w.as_slice())
                .zip(a.as_slice())
            {
                *gi += mu * (wi - ai);
            }
        }
    }
    Ok((loss, grads))
}

/// Mean softmax cross-entropy over a batch, optionally with a proximal term,
/// and the exact gradient of that total with respect to every parameter.
pub fn loss_and_grads(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    prox: Option<Prox<'_>>,
) -> Result<(f64, ParamTensors)> {
    if batch.shape().len() != 2 || batch.rows() != labels.len() {
        return Err(Error::input("batch rows and labels disagree"));
    }
    let samples: Vec<(&[f64], usize)> = (0..batch.rows())
        .map(|r| (batch.row(r), labels[r]))
        .collect();
    loss_and_grads_samples(model, &samples, prox)
}
