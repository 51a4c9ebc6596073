//! Full-batch Adam training loops.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{finetune_gradients, pretrain_gradients};
use super::params::TinyNetParams;
use super::tensor::Matrix;
use super::NetConfig;
use crate::clip::ClipTensor;
use crate::error::{invalid, Error, Result};
use crate::masker::{MaskPlan, TubeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid("invalid optimizer settings"))
        }
    }
}

struct Adam {
    cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(cfg: TrainConfig, params: &TinyNetParams<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|m| vec![0.0; m.len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut TinyNetParams<f32>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub params: TinyNetParams<f32>,
    /// Mean loss over the batch, one entry per step, before that step's update.
    pub loss: Vec<f64>,
    /// Training accuracy per step; empty for pretraining.
    pub accuracy: Vec<f64>,
}

fn accumulate(sum: &mut [Vec<f64>], grads: &[Matrix<f32>]) {
    for (s, g) in sum.iter_mut().zip(grads) {
        for (a, &b) in s.iter_mut().zip(g.data()) {
            *a += b as f64;
        }
    }
}

fn zero_like(params: &TinyNetParams<f32>) -> Vec<Vec<f64>> {
    params.tensors().iter().map(|m| vec![0.0; m.len()]).collect()
}

fn mean(sum: &mut [Vec<f64>], n: usize) {
    for s in sum.iter_mut().flatten() {
        *s /= n as f64;
    }
}

/// Reconstruction pretraining with one fixed plan per clip.
pub fn train_pretrain(
    clips: &[ClipTensor],
    plans: &[MaskPlan],
    cfg: &NetConfig,
    mut params: TinyNetParams<f32>,
    train: &TrainConfig,
) -> Result<TrainResult> {
    train.validate()?;
    if clips.is_empty() {
        return Err(invalid("no training clips"));
    }
    if clips.len() != plans.len() {
        return Err(invalid(format!("{} clips but {} mask plans", clips.len(), plans.len())));
    }
    let mut adam = Adam::new(*train, &params);
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut sum = zero_like(&params);
        let mut loss = 0.0;
        for (clip, plan) in clips.iter().zip(plans) {
            let (l, g) = pretrain_gradients(clip, plan, cfg, &params)?;
            loss += l;
            accumulate(&mut sum, &g);
        }
        loss /= clips.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        mean(&mut sum, clips.len());
        trace.push(loss);
        adam.step(&mut params, &sum);
    }
    Ok(TrainResult { params, loss: trace, accuracy: Vec::new() })
}

/// One labelled clip with its motion-box tube grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSample {
    pub clip: ClipTensor,
    pub grid: TubeGrid,
    pub label: usize,
}

/// Classification finetuning, end to end through the encoder.
pub fn train_finetune(
    samples: &[FinetuneSample],
    cfg: &NetConfig,
    mut params: TinyNetParams<f32>,
    train: &TrainConfig,
) -> Result<TrainResult> {
    train.validate()?;
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let mut adam = Adam::new(*train, &params);
    let mut losses = Vec::with_capacity(train.steps);
    let mut accuracy = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut sum = zero_like(&params);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in samples {
            let (l, probs, g) = finetune_gradients(&s.clip, &s.grid, s.label, cfg, &params)?;
            loss += l;
            let pred = super::Prediction { logits: Vec::new(), probs };
            correct += usize::from(pred.argmax() == s.label);
            accumulate(&mut sum, &g);
        }
        loss /= samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        mean(&mut sum, samples.len());
        losses.push(loss);
        accuracy.push(correct as f64 / samples.len() as f64);
        adam.step(&mut params, &sum);
    }
    Ok(TrainResult { params, loss: losses, accuracy })
}

/// Evaluates classification accuracy without updating anything.
pub fn finetune_accuracy(samples: &[FinetuneSample], cfg: &NetConfig, params: &TinyNetParams<f32>) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let mut correct = 0usize;
    for s in samples {
        let (_, probs, _) = finetune_gradients(&s.clip, &s.grid, s.label, cfg, params)?;
        let pred = super::Prediction { logits: Vec::new(), probs };
        correct += usize::from(pred.argmax() == s.label);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `step,value` CSV.
pub fn write_trace_csv<W: Write>(mut w: W, values: &[f64]) -> Result<()> {
    writeln!(w, "step,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}
