//! One-shot global magnitude pruning with persistent binary masks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads_samples, AdamState, ModelParams, ParamTensors, WeightLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    /// Squared loss change when the weight is zeroed.
    Exact,
    /// Weight magnitude.
    L1,
}

/// One non-negative score per global weight index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub method: ImportanceMethod,
    pub layout: WeightLayout,
}

fn mean_loss(model: &ModelParams, samples: &[(&[f64], usize)]) -> Result<f64> {
    Ok(loss_and_grads_samples(model, samples, None)?.0)
}

/// `(F(W) - F(W | w_j = 0))^2` for every weight, with `F` the mean
/// cross-entropy on `data`. Costs one full evaluation per weight, so only
/// suitable for small models.
pub fn importance_exact(model: &ModelParams, data: &Dataset) -> Result<ImportanceVector> {
    if data.is_empty() {
        return Err(Error::input("importance needs a non-empty dataset"));
    }
    let samples: Vec<(&[f64], usize)> = data.iter().collect();
    let base = mean_loss(model, &samples)?;
    let mut probe = model.clone();
    let mut scores = Vec::with_capacity(model.num_weights());
    for j in 0..model.num_weights() {
        let w = probe.weight(j);
        if w == 0.0 {
            scores.push(0.0);
            continue;
        }
        probe.set_weight(j, 0.0);
        let d = base - mean_loss(&probe, &samples)?;
        probe.set_weight(j, w);
        scores.push(d * d);
    }
    Ok(ImportanceVector {
        scores,
        method: ImportanceMethod::Exact,
        layout: model.layout().clone(),
    })
}

/// `|w_j|` for every weight; biases are not part of the index space.
pub fn importance_l1(model: &ModelParams) -> ImportanceVector {
    ImportanceVector {
        scores: model.flat_weights().into_iter().map(f64::abs).collect(),
        method: ImportanceMethod::L1,
        layout: model.layout().clone(),
    }
}

/// Number of weights removed at ratio `rho`: `floor(rho * np)`, with a small
/// guard against binary representation error (0.29 * 100 = 28.999...).
pub fn pruned_count(np: usize, rho: f64) -> usize {
    ((rho * np as f64) + 1e-9).floor() as usize
}

pub fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "pruning ratio must lie in [0, 1), got {rho}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    /// `true` = keep, indexed by global weight index.
    bits: Vec<bool>,
    layout: WeightLayout,
    rho: f64,
    kept_count: usize,
}

impl PruneMask {
    pub fn all_ones(layout: &WeightLayout) -> Self {
        PruneMask {
            bits: vec![true; layout.total()],
            layout: layout.clone(),
            rho: 0.0,
            kept_count: layout.total(),
        }
    }

    pub fn from_bits(bits: Vec<bool>, layout: WeightLayout, rho: f64) -> Result<Self> {
        if bits.len() != layout.total() {
            return Err(Error::input("mask length does not match the weight layout"));
        }
        let kept_count = bits.iter().filter(|&&b| b).count();
        Ok(PruneMask {
            bits,
            layout,
            rho,
            kept_count,
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn keeps(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn num_weights(&self) -> usize {
        self.bits.len()
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.len() - self.kept_count
    }

    /// Bits of parameterized layer `p`.
    pub fn layer_bits(&self, p: usize) -> &[bool] {
        &self.bits[self.layout.range(p)]
    }

    fn check_congruent(&self, params: &ParamTensors) -> Result<()> {
        let ok = params.weights.len() == self.layout.num_layers()
            && params
                .weights
                .iter()
                .enumerate()
                .all(|(p, w)| w.len() == self.layout.range(p).len());
        if ok {
            Ok(())
        } else {
            Err(Error::input("mask is not congruent with the model weights"))
        }
    }

    /// Zeroes the weight entries of `params` at pruned positions; biases untouched.
    pub fn apply_to(&self, params: &mut ParamTensors) -> Result<()> {
        self.check_congruent(params)?;
        for (p, w) in params.weights.iter_mut().enumerate() {
            for (x, &keep) in w.as_mut_slice().iter_mut().zip(self.layer_bits(p)) {
                if !keep {
                    *x = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Zeroes pruned coordinates of an optimizer's moment estimates.
    pub fn apply_to_optimizer(&self, state: &mut AdamState) -> Result<()> {
        self.apply_to(&mut state.m)?;
        self.apply_to(&mut state.v)
    }

    /// Serializes as a bit-packed blob:
    ///
    /// ```text
    /// b"PMSK" | version u8 = 1 | NP u64 | rho f64 | kept u64 | layers u32
    ///         | layers x (start offset u64) | ceil(NP / 8) bytes, LSB first
    /// ```
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let np = self.bits.len();
        let layers = self.layout.num_layers();
        let mut out = Vec::with_capacity(29 + 8 * layers + np.div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.push(MASK_VERSION);
        out.extend_from_slice(&(np as u64).to_le_bytes());
        out.extend_from_slice(&self.rho.to_le_bytes());
        out.extend_from_slice(&(self.kept_count as u64).to_le_bytes());
        out.extend_from_slice(&(layers as u32).to_le_bytes());
        for &o in &self.layout.offsets[..layers] {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        let mut packed = vec![0u8; np.div_ceil(8)];
        for (j, &b) in self.bits.iter().enumerate() {
            if b {
                packed[j / 8] |= 1 << (j % 8);
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    /// Parses [`to_bytes`](Self::to_bytes) output. Layer indices into the
    /// architecture are not stored, so the returned layout numbers
    /// parameterized layers `0..layers`.
    pub fn from_bytes(blob: &[u8]) -> Result<Self> {
        let mut r = ByteReader { blob, pos: 0 };
        if r.take(4)? != MASK_MAGIC {
            return Err(Error::MaskFormat("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != MASK_VERSION {
            return Err(Error::MaskFormat(format!("unsupported version {version}")));
        }
        let np = r.u64()? as usize;
        let rho = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let kept = r.u64()? as usize;
        let layers = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut offsets = Vec::with_capacity(layers + 1);
        for _ in 0..layers {
            offsets.push(r.u64()? as usize);
        }
        offsets.push(np);
        if offsets.first().is_some_and(|&o| o != 0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::MaskFormat(
                "layer offsets are not monotone from 0".into(),
            ));
        }
        let packed = r.take(np.div_ceil(8))?;
        if r.pos != blob.len() {
            return Err(Error::MaskFormat("trailing bytes".into()));
        }
        let bits: Vec<bool> = (0..np).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect();
        let layout = WeightLayout {
            layer_index: (0..layers).collect(),
            offsets,
        };
        let mask = PruneMask::from_bits(bits, layout, rho)?;
        if mask.kept_count != kept {
            return Err(Error::MaskFormat(format!(
                "header says {kept} kept weights, bits say {}",
                mask.kept_count
            )));
        }
        Ok(mask)
    }
}

const MASK_MAGIC: &[u8; 4] = b"PMSK";
const MASK_VERSION: u8 = 1;

struct ByteReader<'a> {
    blob: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.blob.len() {
            return Err(Error::MaskFormat("truncated blob".into()));
        }
        let s = &self.blob[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Keeps the top-scoring weights globally across layers, pruning exactly
/// `floor(rho * NP)` of the lowest scores. Equal scores rank the lower global
/// index higher, so ties prune the highest indices first.
pub fn build_mask(importance: &ImportanceVector, rho: f64) -> Result<PruneMask> {
    check_rho(rho)?;
    let np = importance.scores.len();
    let n_prune = pruned_count(np, rho);
    let mut order: Vec<usize> = (0..np).collect();
    // descending score, stable on index
    order.sort_by(|&a, &b| {
        importance.scores[b]
            .total_cmp(&importance.scores[a])
            .then(a.cmp(&b))
    });
    let mut bits = vec![true; np];
    for &j in &order[np - n_prune..] {
        bits[j] = false;
    }
    Ok(PruneMask {
        bits,
        layout: importance.layout.clone(),
        rho,
        kept_count: np - n_prune,
    })
}

/// `W <- W ⊙ M`; biases untouched.
pub fn apply_mask(model: &ModelParams, mask: &PruneMask) -> Result<ModelParams> {
    let mut out = model.clone();
    mask.apply_to(out.params_mut())?;
    Ok(out)
}

pub fn remaining_weights(mask: &PruneMask) -> usize {
    mask.kept_count()
}

/// `NP - floor(rho * NP)`.
pub fn remaining_for(np: usize, rho: f64) -> usize {
    np - pruned_count(np, rho)
}
