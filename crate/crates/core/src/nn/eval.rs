use serde::Serialize;

use super::model::ModelParams;
use super::net::predict_logits;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &ModelParams, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let classes = model.arch().num_classes()?;
    if data.num_classes() > classes {
        return Err(Error::input(format!(
            "dataset has {} classes, model outputs {classes}",
            data.num_classes()
        )));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in data.iter() {
        let logits = predict_logits(model, x)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += lse - logits[y];
        let pred = argmax(&logits);
        confusion[y][pred] += 1;
        correct += usize::from(pred == y);
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
        confusion,
    })
}
