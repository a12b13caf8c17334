//! Action flow head and the full inference pipeline.

use moth_tensor::{Scalar, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{self, FlowBatch};
use crate::intention::{sample_mano, HandState, IntentionStates};
use crate::layout::SpanKind;
use crate::model::{FlowInput, Model, ObjectToken, Query};
use crate::waypoint::{decode_waypoints, DecodeMode, WaypointPlan};

/// Row-major `H × dim` action chunk in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub data: Vec<f64>,
    pub dim: usize,
}

impl ActionChunk {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!("{} action values do not split into rows of {dim}", data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(ActionChunk { data, dim })
    }

    pub fn horizon(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.data[h * self.dim..(h + 1) * self.dim]
    }
}

/// Squared velocity error averaged over all `H·d_a` entries.
pub fn action_loss_from_velocity<T: Scalar>(tape: &mut Tape<'_, T>, v: Var, v_star: &[f64]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let target = tape.constant_from(&shape, v_star.iter().map(|&x| T::from_f64(x)).collect())?;
    Ok(tape.mse_weighted(v, target, 1.0 / v_star.len() as f64)?)
}

fn action_query<'a>(
    objects: &'a [ObjectToken],
    text: Option<&'a [usize]>,
    plan: Option<&'a WaypointPlan>,
    intention: Option<&'a IntentionStates>,
    x: &'a [f64],
    t: f64,
) -> Query<'a> {
    let mut q = Query::new(objects, text);
    q.waypoints = plan.map(|p| p.bins.as_slice());
    q.mano = intention.map(|i| i.input());
    q.action = Some(FlowInput { x, t });
    q
}

/// Flow-matching loss of the action expert for one episode.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_act<T: Scalar, R: Rng>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: Option<&WaypointPlan>,
    intention: Option<&IntentionStates>,
    target: &ActionChunk,
    rng: &mut R,
) -> Result<Var> {
    let fb = FlowBatch::draw(&target.data, rng);
    let q = action_query(objects, text, plan, intention, &fb.x_t, fb.t);
    let fwd = model.forward(tape, &q)?;
    let v = model.head(tape, &fwd, SpanKind::Action)?;
    action_loss_from_velocity(tape, v, &fb.v_star)
}

/// Unguided Euler integration of the action flow from `ε(seed)`.
pub fn sample_actions<T: Scalar>(
    model: &Model<T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: Option<&WaypointPlan>,
    intention: Option<&IntentionStates>,
    steps: usize,
    seed: u64,
) -> Result<ActionChunk> {
    let c = &model.config;
    let x0 = flow::gaussian(c.horizon * c.action_dim, &mut crate::rng::seeded(seed));
    let mut field = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&model.params);
        let q = action_query(objects, text, plan, intention, x, t);
        let fwd = model.forward(&mut tape, &q)?;
        let v = model.head(&mut tape, &fwd, SpanKind::Action)?;
        Ok(tape.value(v).iter().map(|v| v.as_f64()).collect())
    };
    let x = flow::euler(&mut field, x0, steps)?;
    ActionChunk::new(x, c.action_dim)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub flow_steps: usize,
    pub cfg_scale: f64,
    pub decode: DecodeMode,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings { flow_steps: 10, cfg_scale: 6.0, decode: DecodeMode::Greedy }
    }
}

/// All three stages of one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub plan: Option<WaypointPlan>,
    pub hand: Option<HandState>,
    pub intention: Option<IntentionStates>,
    pub actions: ActionChunk,
}

/// Waypoints, then the hand sequence, then the action chunk.
pub fn predict_chunk<T: Scalar>(
    model: &Model<T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    settings: &SampleSettings,
    seed: u64,
) -> Result<Prediction> {
    let c = &model.config;
    let plan = if c.traj3d {
        Some(decode_waypoints(model, objects, text, settings.decode, seed)?)
    } else {
        None
    };
    let (hand, intention) = if c.intention {
        let (h, i) = sample_mano(
            model,
            objects,
            text,
            plan.as_ref(),
            settings.flow_steps,
            settings.cfg_scale,
            crate::rng::stream_seed(seed, "hand"),
        )?;
        (Some(h), Some(i))
    } else {
        (None, None)
    };
    let actions = sample_actions(
        model,
        objects,
        text,
        plan.as_ref(),
        intention.as_ref(),
        settings.flow_steps,
        crate::rng::stream_seed(seed, "action"),
    )?;
    Ok(Prediction { plan, hand, intention, actions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_loss_normalization() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant_from(&[3, 7], vec![0.0; 21]).unwrap();
        let l = action_loss_from_velocity(&mut tape, z, &[1.0; 21]).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 1e-12);
        let v: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        let p = tape.constant_from(&[3, 7], v.clone()).unwrap();
        let l = action_loss_from_velocity(&mut tape, p, &v).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn chunk_validation() {
        assert!(ActionChunk::new(vec![0.0; 10], 7).is_err());
        assert!(ActionChunk::new(vec![f64::NAN; 7], 7).is_err());
        assert_eq!(ActionChunk::new(vec![0.0; 14], 7).unwrap().horizon(), 2);
    }
}
