//! Joint partially supervised training: losses, AdamW, schedule, EMA.

use std::time::Instant;

use moth_tensor::{GradBuffer, ParamStore, Scalar, Tape};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerSnapshot;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fine::action_loss_from_velocity;
use crate::flow::FlowBatch;
use crate::intention::{mano_loss_from_velocity, IntentionStates};
use crate::layout::SpanKind;
use crate::model::{FlowInput, Model, Query};
use crate::synth::Episode;
use crate::waypoint::{loss_3d, waypoint_logits};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.5e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-10,
            warmup_steps: 1000,
            clip_norm: 1.0,
            ema_decay: 0.999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_m: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_3d: 1.0, lambda_m: 1.0, lambda_a: 1.0 }
    }
}

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn lr_schedule(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step >= total { 0.0 } else { base };
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub m: GradBuffer<f32>,
    pub v: GradBuffer<f32>,
    pub ema: ParamStore<f32>,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        OptimState { step: 0, m: params.zeros_like(), v: params.zeros_like(), ema: params.clone() }
    }

    pub fn snapshot(&self, params: &ParamStore<f32>) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            m: params.ids().map(|id| self.m.get(id).to_vec()).collect(),
            v: params.ids().map(|id| self.v.get(id).to_vec()).collect(),
        }
    }

    pub fn restore(params: &ParamStore<f32>, snap: &OptimizerSnapshot, ema: ParamStore<f32>) -> Result<Self> {
        let mut s = OptimState::new(params);
        s.step = snap.step;
        for (i, id) in params.ids().enumerate() {
            let (m, v) = (snap.m.get(i), snap.v.get(i));
            match (m, v) {
                (Some(m), Some(v)) if m.len() == s.m.get(id).len() && v.len() == m.len() => {
                    s.m.get_mut(id).copy_from_slice(m);
                    s.v.get_mut(id).copy_from_slice(v);
                }
                _ => return Err(Error::Data(format!("optimizer state for {} is malformed", params.name(id)))),
            }
        }
        s.ema = ema;
        Ok(s)
    }
}

/// One AdamW step with decoupled weight decay; advances `state.step`.
pub fn adamw_update(params: &mut ParamStore<f32>, grads: &GradBuffer<f32>, state: &mut OptimState, cfg: &OptimConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = state.m.get_mut(id);
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = (cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi as f64) as f32;
        }
        let v = state.v.get_mut(id);
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = (cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * (gi as f64) * (gi as f64)) as f32;
        }
        let (m, v) = (state.m.get(id), state.v.get(id));
        let p = params.value_mut(id);
        for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
            let mhat = mi as f64 / c1;
            let vhat = vi as f64 / c2;
            let upd = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pi as f64;
            *pi = (*pi as f64 - lr * upd) as f32;
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·param`.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    for id in params.ids() {
        let p = params.value(id);
        for (s, &x) in ema.value_mut(id).iter_mut().zip(p) {
            *s = (decay * *s as f64 + (1.0 - decay) * x as f64) as f32;
        }
    }
}

/// Decay actually applied after `step` updates: ramps up early so the
/// shadow does not average in the random initialization for long.
pub fn ema_decay_at(step: u64, decay: f64) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Scale `grads` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradBuffer<f32>, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale((max_norm / n) as f32);
    }
    n
}

/// A batch entry: the episode and whether its instruction is replaced by
/// the null embedding.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub episode: &'a Episode,
    pub drop_text: bool,
}

/// Independently null each item's instruction with probability `p`.
pub fn apply_instruction_dropout<R: Rng>(batch: &mut [TrainItem<'_>], p: f64, rng: &mut R) {
    for item in batch {
        item.drop_text = rng.random::<f64>() < p;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Batch means of each term over the episodes that carry it.
    pub l3d: f64,
    pub lmano: f64,
    pub lact: f64,
    pub total: f64,
}

/// Whether the model draws any loss from an episode.
pub fn supervises(model_cfg: &crate::model::ModelConfig, e: &Episode) -> bool {
    model_cfg.traj3d || (model_cfg.intention && e.hand.is_some()) || e.actions.is_some()
}

/// Losses and accumulated gradients of the weighted objective for one batch.
///
/// Every episode gets its own tape; gradients are summed in batch order.
/// The waypoint term is averaged over the batch, the hand term over episodes
/// with a hand target and the action term over episodes with actions.
/// Robot episodes feed the hand span an [`IntentionStates::estimate`] for a
/// sampler with `intention_steps` steps.
pub fn batch_gradients<T: Scalar, R: Rng>(
    model: &Model<T>,
    data: &Dataset,
    batch: &[TrainItem<'_>],
    weights: &LossWeights,
    intention_steps: usize,
    rng: &mut R,
) -> Result<(StepLosses, GradBuffer<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let c = &model.config;
    let use_hand = |e: &Episode| c.intention && e.hand.is_some();
    let n = batch.len() as f64;
    let n_hand = batch.iter().filter(|i| use_hand(i.episode)).count() as f64;
    let n_act = batch.iter().filter(|i| i.episode.actions.is_some()).count() as f64;
    let lambda_m = if c.intention { weights.lambda_m } else { 0.0 };

    let mut grads = model.params.zeros_like();
    let mut sums = StepLosses::default();
    for item in batch {
        let e = item.episode;
        if e.hand.is_none() && e.actions.is_none() {
            return Err(Error::Data(format!("episode {} carries no supervision", e.id)));
        }
        if !supervises(c, e) {
            return Err(Error::Data(format!("episode {} gives this model nothing to learn", e.id)));
        }
        let inputs = data.inputs(e)?;
        let text = if item.drop_text { None } else { Some(inputs.text.as_slice()) };

        let hand_flow = match (&e.hand, use_hand(e)) {
            (Some(h), true) => Some(FlowBatch::draw(&h.frames, rng)),
            _ => None,
        };
        let plan = c.traj3d.then_some(&inputs.plan);
        let est_int = if c.intention && e.actions.is_some() && hand_flow.is_none() {
            Some(IntentionStates::estimate(model, &inputs.objects, text, plan, intention_steps, rng)?)
        } else {
            None
        };
        let act_flow = e.actions.as_ref().map(|a| FlowBatch::draw(&a.data, rng));

        let mut q = Query::new(&inputs.objects, text);
        if c.traj3d {
            q.waypoints = Some(&inputs.plan.bins);
        }
        if let Some(fb) = &hand_flow {
            q.mano = Some(FlowInput { x: &fb.x_t, t: fb.t });
            q.mano_valid = e.hand.as_ref().map(|h| h.valid.as_slice());
        } else if let Some(is) = &est_int {
            q.mano = Some(is.input());
        }
        if let Some(fb) = &act_flow {
            q.action = Some(FlowInput { x: &fb.x_t, t: fb.t });
        }

        let mut tape = Tape::with_params(&model.params);
        let fwd = model.forward(&mut tape, &q)?;
        let mut terms = Vec::with_capacity(3);
        if c.traj3d {
            let logits = waypoint_logits(model, &mut tape, &fwd)?;
            let l = loss_3d(&mut tape, logits, &inputs.plan)?;
            sums.l3d += tape.item(l).as_f64();
            terms.push(tape.scale(l, T::from_f64(weights.lambda_3d / n)));
        }
        if let (Some(fb), Some(hand)) = (&hand_flow, &e.hand) {
            let v = model.head(&mut tape, &fwd, SpanKind::Mano)?;
            let l = mano_loss_from_velocity(&mut tape, v, &fb.v_star, &hand.valid)?;
            sums.lmano += tape.item(l).as_f64();
            terms.push(tape.scale(l, T::from_f64(lambda_m / n_hand)));
        }
        if let Some(fb) = &act_flow {
            let v = model.head(&mut tape, &fwd, SpanKind::Action)?;
            let l = action_loss_from_velocity(&mut tape, v, &fb.v_star)?;
            sums.lact += tape.item(l).as_f64();
            terms.push(tape.scale(l, T::from_f64(weights.lambda_a / n_act)));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        if !tape.item(loss).as_f64().is_finite() {
            return Err(Error::NonFinite(format!("loss of episode {}", e.id)));
        }
        tape.backward_into(loss, T::one(), &mut grads)?;
    }
    let mean = |s: f64, k: f64| if k > 0.0 { s / k } else { 0.0 };
    let out = StepLosses {
        l3d: mean(sums.l3d, n),
        lmano: mean(sums.lmano, n_hand),
        lact: mean(sums.lact, n_act),
        total: 0.0,
    };
    let total = if c.traj3d { weights.lambda_3d * out.l3d } else { 0.0 } + lambda_m * out.lmano + weights.lambda_a * out.lact;
    Ok((StepLosses { total, ..out }, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub instruction_dropout: f64,
    /// Fraction of each batch drawn from hand episodes when the model uses them.
    pub hand_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch_size: 64, instruction_dropout: 0.1, hand_fraction: 0.5 }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l3d: f64,
    pub lmano: f64,
    pub lact: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall: f64,
}

pub const BATCH_STREAM: &str = "data.batch";

pub struct Trainer<'d> {
    pub model: Model<f32>,
    pub opt: OptimState,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub seed: u64,
    /// Flow steps of the hand sampler the action expert is trained against.
    pub intention_steps: usize,
    data: &'d Dataset,
    hand_pool: Vec<usize>,
    robot_pool: Vec<usize>,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model<f32>,
        data: &'d Dataset,
        optim: OptimConfig,
        weights: LossWeights,
        train: TrainConfig,
        seed: u64,
        intention_steps: usize,
    ) -> Result<Self> {
        data.check_model(&model.config)?;
        let c = &model.config;
        let mut hand_pool = Vec::new();
        let mut robot_pool = Vec::new();
        for (i, e) in data.episodes.iter().enumerate() {
            if e.split != crate::synth::Split::Train {
                continue;
            }
            if e.actions.is_some() {
                robot_pool.push(i);
            } else if e.hand.is_some() && (c.traj3d || c.intention) {
                hand_pool.push(i);
            }
        }
        if robot_pool.is_empty() {
            return Err(Error::Data("training split has no robot episodes".into()));
        }
        if train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let opt = OptimState::new(&model.params);
        Ok(Trainer {
            model,
            opt,
            optim,
            weights,
            train,
            seed,
            intention_steps,
            data,
            hand_pool,
            robot_pool,
            started: Instant::now(),
        })
    }

    /// Batch for step `step`; depends only on the seed and the step number.
    pub fn batch(&self, step: u64) -> Vec<TrainItem<'d>> {
        let mut rng = crate::rng::stream(self.seed, BATCH_STREAM, step);
        let b = self.train.batch_size;
        let n_hand = if self.hand_pool.is_empty() {
            0
        } else {
            ((b as f64) * self.train.hand_fraction).round() as usize
        };
        let mut items = Vec::with_capacity(b);
        for k in 0..b {
            let pool = if k < n_hand { &self.hand_pool } else { &self.robot_pool };
            let i = *pool.choose(&mut rng).expect("pool is non-empty");
            items.push(TrainItem { episode: &self.data.episodes[i], drop_text: false });
        }
        let mut drop_rng = crate::rng::stream(self.seed, crate::rng::DROPOUT, step);
        apply_instruction_dropout(&mut items, self.train.instruction_dropout, &mut drop_rng);
        items
    }

    /// Run the next optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.opt.step;
        let batch = self.batch(step);
        let mut rng = crate::rng::stream(self.seed, crate::rng::FLOW_NOISE, step);
        let (losses, mut grads) = batch_gradients(&self.model, self.data, &batch, &self.weights, self.intention_steps, &mut rng)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grad_norm = clip_global_norm(&mut grads, self.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        let lr = lr_schedule(step, self.optim.lr, self.optim.warmup_steps, self.train.steps);
        adamw_update(&mut self.model.params, &grads, &mut self.opt, &self.optim, lr);
        let decay = ema_decay_at(step, self.optim.ema_decay);
        ema_update(&mut self.opt.ema, &self.model.params, decay);
        Ok(StepRecord {
            step,
            lr,
            l3d: losses.l3d,
            lmano: losses.lmano,
            lact: losses.lact,
            total: losses.total,
            grad_norm,
            wall: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Model<f32> {
        let mut m = self.model.clone();
        m.params = self.opt.ema.clone();
        m
    }
}
