use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, OptimizerState, Transformer};
use crate::eval::ppl_masked;
use crate::examples::{InfillExample, LossScope, DEFAULT_BATCH_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// After warmup the rate decays linearly to `learning_rate * final_lr_ratio`
    /// at `max_steps`.
    pub final_lr_ratio: f64,
    pub max_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss_scope: LossScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: 3e-3,
            warmup_steps: 50,
            final_lr_ratio: 0.1,
            max_steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 100,
            patience: 3,
            seed: 0,
            loss_scope: LossScope::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, max_steps, and eval_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("final_lr_ratio, weight_decay, or grad_clip out of range");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.max_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        peak * (1.0 - progress * (1.0 - self.final_lr_ratio))
    }
}

/// Adam with decoupled weight decay applied only to matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(model: &Transformer<f32>, cfg: &TrainConfig) -> Self {
        let n = model.num_params();
        let mut decay = vec![false; n];
        for t in model.layout().tensors().iter().filter(|t| t.decays()) {
            decay[t.range()].iter_mut().for_each(|d| *d = true);
        }
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn restore(&mut self, state: OptimizerState) -> Result<(), ModelError> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(ModelError::ShapeMismatch("optimizer state does not match model".into()));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(t)) as f32;
        let c2 = 1.0 / (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps, wd) = (lr as f32, self.eps as f32, self.weight_decay as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.decay[i] {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * (self.m[i] * c1) / ((self.v[i] * c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean loss per supervised token over the batch.
    pub loss: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_ppl: Option<f64>,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
    pub optimizer: OptimizerState,
}

/// Train `model` in place. With a validation set the parameters from the
/// round with the lowest masked-token perplexity are kept.
pub fn train(
    model: &mut Transformer<f32>,
    train_set: &[InfillExample],
    val_set: &[InfillExample],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.len() > model.config().max_seq_len) {
        return Err(ModelError::SequenceTooLong { len: ex.len(), limit: model.config().max_seq_len });
    }
    let masks: Vec<Vec<bool>> = train_set.iter().map(|e| e.loss_mask_for(cfg.loss_scope)).collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::new(model, cfg);
    let mut grads = vec![0.0f32; model.num_params()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let supervised: usize = batch.iter().map(|&i| masks[i].iter().filter(|&&b| b).count()).sum();
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0f64;
        if supervised > 0 {
            let w = 1.0 / supervised as f32;
            let (mut input, mut targets, mut weights, mut lens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in &batch {
                let ex = &train_set[i];
                input.extend(model.shifted_input(&ex.tokens));
                targets.extend_from_slice(&ex.tokens);
                weights.extend(masks[i].iter().map(|&b| if b { w } else { 0.0 }));
                lens.push(ex.len());
            }
            let rng = (model.config().dropout > 0.0).then_some(&mut dropout_rng);
            loss = model.packed_loss_and_grad(&input, &targets, &weights, &lens, &mut grads, rng)? as f64;
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                step,
                loss,
                detail: format!("batch of examples {:?}", batch),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        opt.update(model.params_mut(), &grads, cfg.lr_at(step));
        step += 1;

        let mut entry = LogEntry { step, loss, val_ppl: None };
        if !val_set.is_empty() && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let ppl = ppl_masked(&*model, val_set).map_err(|e| ModelError::Validation(e.to_string()))?;
            entry.val_ppl = Some(ppl);
            match &best {
                Some((b, _, _)) if ppl >= *b => stale += 1,
                _ => {
                    best = Some((ppl, step, model.params().to_vec()));
                    stale = 0;
                }
            }
        }
        on_log(&entry);
        log.push(entry);
        if cfg.patience > 0 && stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_ppl, best_step) = match best {
        Some((ppl, s, params)) => {
            model.params_mut().copy_from_slice(&params);
            (Some(ppl), s)
        }
        None => (None, step),
    };
    Ok(TrainOutcome { steps: step, best_step, best_val_ppl, stopped_early, log, optimizer: opt.state() })
}
