//! Mask loss, learning-rate schedule, AdamW and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{contract, Result, SlvError};
use crate::model::{config_sidecar, Model, SampleFeatures};
use crate::params::{derive_seed, GradMap, Graph, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            bce: cfg.lambda_bce,
            dice: cfg.lambda_dice,
        }
    }
}

/// `λ_bce·BCE + λ_dice·Dice` of logits against a 0/1 mask.
pub fn mask_loss(tape: &mut Tape, logits: Var, gt: &[u8], w: LossWeights) -> Result<Var> {
    if tape.value(logits).len() != gt.len() {
        return Err(contract(format!(
            "mask loss: logits {:?} vs {} ground-truth pixels",
            tape.shape(logits),
            gt.len()
        )));
    }
    let target: Vec<f64> = gt.iter().map(|&m| f64::from(m != 0)).collect();
    let bce = tape.bce_with_logits(logits, &target)?;
    let dice = tape.soft_dice(logits, &target, DICE_EPS)?;
    let bce = tape.scale(bce, w.bce);
    let dice = tape.scale(dice, w.dice);
    tape.add(bce, dice)
}

/// Linear warmup from 0 to `base` over `warmup` steps, then linear decay to 0
/// at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, base: f64) -> Result<f64> {
    if step > total {
        return Err(contract(format!("step {step} is past the schedule end {total}")));
    }
    if warmup == 0 || warmup >= total {
        return Err(contract(format!("need 0 < warmup ({warmup}) < total ({total})")));
    }
    Ok(if step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    })
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter present in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(contract(format!("gradient shape mismatch for {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_grads(model: &Model, feats: &SampleFeatures) -> Result<(f64, GradMap)> {
    let policy = model.policy();
    let mut g = Graph::new(&model.params, &policy);
    let logits = model.first_frame_logits(&mut g, feats)?;
    let loss = mask_loss(
        &mut g,
        logits,
        &feats.masks[0],
        LossWeights::from_config(&model.config.train),
    )?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, g.param_grads(&grads)))
}

/// Mean loss and mean gradients over a micro-batch. Per-sample work runs in
/// parallel; the reduction is a fixed-order sum.
pub fn batch_grads(model: &Model, batch: &[&SampleFeatures]) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let per: Vec<(f64, GradMap)> = batch
        .par_iter()
        .map(|f| sample_grads(model, f))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut sum = GradMap::new();
    for (l, grads) in per {
        loss += l;
        add_into(&mut sum, grads);
    }
    scale_grads(&mut sum, scale);
    Ok((loss * scale, sum))
}

fn add_into(acc: &mut GradMap, grads: GradMap) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn scale_grads(grads: &mut GradMap, s: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

/// Sample index at position `k` of the training stream: each epoch is a
/// fresh permutation derived from `(seed, epoch)`.
pub fn stream_index(seed: u64, n: usize, k: usize) -> usize {
    let epoch = k / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}"))));
    order[k % n]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pending: Option<GradMap>,
    pending_loss: f64,
    micro: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let wd = model.config.train.wd;
        Self {
            model,
            opt: AdamW::new(wd),
            pending: None,
            pending_loss: 0.0,
            micro: 0,
        }
    }

    /// Completed optimizer updates.
    pub fn step(&self) -> usize {
        self.opt.step as usize
    }

    /// Forward/backward on one micro-batch. Every `accum` micro-batches the
    /// averaged gradients are applied and the step record is returned.
    pub fn micro_step(&mut self, batch: &[&SampleFeatures]) -> Result<Option<StepRecord>> {
        let cfg = self.model.config.train.clone();
        let (loss, grads) = batch_grads(&self.model, batch)?;
        match &mut self.pending {
            Some(acc) => add_into(acc, grads),
            None => self.pending = Some(grads),
        }
        self.pending_loss += loss;
        self.micro += 1;
        if self.micro < cfg.accum.max(1) {
            return Ok(None);
        }
        let mut grads = self.pending.take().expect("accumulated gradients");
        let k = 1.0 / self.micro as f64;
        scale_grads(&mut grads, k);
        let loss = self.pending_loss * k;
        self.pending_loss = 0.0;
        self.micro = 0;
        let step = self.step() + 1;
        let lr = lr_at(step, cfg.warmup, cfg.total_steps, cfg.lr)?;
        self.opt.update(&mut self.model.params, &grads, lr)?;
        Ok(Some(StepRecord { step, lr, loss }))
    }

    /// One full optimizer step drawn from the deterministic data stream.
    pub fn train_step(&mut self, data: &[SampleFeatures]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(contract("no training samples"));
        }
        let cfg = self.model.config.train.clone();
        let per_step = cfg.batch * cfg.accum.max(1);
        let base = self.step() * per_step;
        for a in 0..cfg.accum.max(1) {
            let batch: Vec<&SampleFeatures> = (0..cfg.batch)
                .map(|b| &data[stream_index(cfg.seed, data.len(), base + a * cfg.batch + b)])
                .collect();
            if let Some(rec) = self.micro_step(&batch)? {
                return Ok(rec);
            }
        }
        unreachable!("accumulation completes within one step")
    }

    /// Runs until `total_steps`, calling `on_step` after each update.
    pub fn run(&mut self, data: &[SampleFeatures], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step() < self.model.config.train.total_steps {
            let rec = self.train_step(data)?;
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        for (n, t) in &self.opt.m {
            tensors.push((format!("opt.m.{n}"), t.clone()));
        }
        for (n, t) in &self.opt.v {
            tensors.push((format!("opt.v.{n}"), t.clone()));
        }
        tensors.push(("opt.step".into(), Tensor::scalar(self.opt.step as f64)));
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        checkpoint::save(path, &tensors)?;
        let sidecar = config_sidecar(path);
        std::fs::write(&sidecar, self.model.config.to_json()).map_err(|e| SlvError::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model = Model::load(path)?;
        let mut opt = AdamW::new(model.config.train.wd);
        let mut params = Vec::new();
        for (name, t) in checkpoint::load(path)? {
            if let Some(n) = name.strip_prefix("opt.m.") {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                opt.v.insert(n.to_string(), t);
            } else if name == "opt.step" {
                opt.step = t.item() as u64;
            } else {
                params.push((name, t));
            }
        }
        model.load_params(params, path)?;
        Ok(Self {
            model,
            opt,
            pending: None,
            pending_loss: 0.0,
            micro: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: Vec<f64>, gt: &[u8], shape: &[usize]) -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(shape.to_vec(), logits).unwrap());
        let out = mask_loss(&mut t, l, gt, LossWeights::default()).unwrap();
        t.value(out).item()
    }

    #[test]
    fn perfect_prediction_limit() {
        let gt = [1u8, 0, 0, 1];
        let logits = gt.iter().map(|&g| if g == 1 { 50.0 } else { -50.0 }).collect();
        assert!(loss_of(logits, &gt, &[2, 2]) < 2e-6);
    }

    #[test]
    fn zero_logits_bce_is_ln2() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[3, 3]));
        let bce = t.bce_with_logits(l, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((t.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            mask_loss(&mut t, l, &[0, 1, 0], LossWeights::default()),
            Err(SlvError::Contract(_))
        ));
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 1000, 1e-4).unwrap(), 0.0);
        assert_eq!(lr_at(100, 100, 1000, 1e-4).unwrap(), 1e-4);
        assert!((lr_at(550, 100, 1000, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(1000, 100, 1000, 1e-4).unwrap(), 0.0);
        assert!(lr_at(1001, 100, 1000, 1e-4).is_err());
    }

    #[test]
    fn first_adamw_step_is_sign_sized() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.5));
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(-3.0));
        let mut opt = AdamW::new(0.0);
        opt.update(&mut params, &grads, 1e-3).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expect = 0.5 - 1e-3 * (-3.0) / (3.0 + 1e-8);
        assert!((params.get("w").unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.1);
        opt.update(&mut params, &grads, 0.5).unwrap();
        assert!((params.get("w").unwrap().item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn stream_covers_each_epoch() {
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|k| stream_index(4, 7, epoch * 7 + k)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }
}
