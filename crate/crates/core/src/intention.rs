//! Hand-motion flow generator and the intention states it exposes downstream.

use moth_tensor::{Scalar, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{self, FlowBatch, Guided};
use crate::layout::SpanKind;
use crate::model::{read_hidden, FlowInput, Model, ObjectToken, Query, HAND_DIM, JOINT_DIM, WRIST_DIM};
use crate::quat::{self, Quat};
use crate::waypoint::WaypointPlan;

pub const JOINTS: usize = JOINT_DIM / 4;

/// Hand sequence, row-major `H × 67`: wrist translation, wrist quaternion,
/// then 15 joint quaternions, all quaternions `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HandState {
    pub frames: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HandState {
    pub fn new(frames: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if frames.len() != valid.len() * HAND_DIM {
            return Err(Error::invalid(format!(
                "{} hand values for {} steps",
                frames.len(),
                valid.len()
            )));
        }
        Ok(HandState { frames, valid })
    }

    pub fn horizon(&self) -> usize {
        self.valid.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn frame(&self, h: usize) -> &[f64] {
        &self.frames[h * HAND_DIM..(h + 1) * HAND_DIM]
    }

    pub fn wrist_pos(&self, h: usize) -> [f64; 3] {
        let f = self.frame(h);
        [f[0], f[1], f[2]]
    }

    pub fn wrist_quat(&self, h: usize) -> Quat {
        let f = self.frame(h);
        [f[3], f[4], f[5], f[6]]
    }

    pub fn joint(&self, h: usize, j: usize) -> Quat {
        let o = WRIST_DIM + 4 * j;
        let f = self.frame(h);
        [f[o], f[o + 1], f[o + 2], f[o + 3]]
    }

    /// Wrist positions of the valid steps.
    pub fn wrist_track(&self) -> Vec<[f64; 3]> {
        (0..self.horizon()).filter(|&h| self.valid[h]).map(|h| self.wrist_pos(h)).collect()
    }

    /// Copy with every quaternion block normalized and sign-canonical.
    pub fn canonicalized(&self) -> Result<HandState> {
        let mut frames = self.frames.clone();
        for row in frames.chunks_mut(HAND_DIM) {
            for o in std::iter::once(3).chain((0..JOINTS).map(|j| WRIST_DIM + 4 * j)) {
                let q = quat::canonicalize(&[row[o], row[o + 1], row[o + 2], row[o + 3]])?;
                row[o..o + 4].copy_from_slice(&q);
            }
        }
        Ok(HandState { frames, valid: self.valid.clone() })
    }
}

/// Hidden states at the hand span, as seen by the action expert, together
/// with the hand-span input that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionStates {
    /// Row-major `H × d`; empty when only the input was built.
    pub hidden: Vec<f64>,
    /// The hand-span flow state and time to feed alongside the action span.
    pub state: Vec<f64>,
    pub t: f64,
}

impl IntentionStates {
    /// Pure-noise conditioning at `t = 0`, used for samples without a hand target.
    pub fn noise<R: Rng>(horizon: usize, rng: &mut R) -> Self {
        IntentionStates { hidden: Vec::new(), state: flow::gaussian(horizon * HAND_DIM, rng), t: 0.0 }
    }

    /// Training-time stand-in for the sampler's final step: one conditional
    /// velocity at `t = 0` from `ε`, followed along a straight line to
    /// [`capture_time`]. Runs without gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate<T: Scalar, R: Rng>(
        model: &Model<T>,
        objects: &[ObjectToken],
        text: Option<&[usize]>,
        plan: Option<&WaypointPlan>,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let t = capture_time(steps)?;
        let eps = flow::gaussian(model.config.horizon * HAND_DIM, rng);
        let (v, _) = hand_pass(model, objects, text, plan, &eps, 0.0)?;
        let state = eps.iter().zip(&v).map(|(e, v)| e + t * v).collect();
        Ok(IntentionStates { hidden: Vec::new(), state, t })
    }

    pub fn input(&self) -> FlowInput<'_> {
        FlowInput { x: &self.state, t: self.t }
    }
}

/// Wrist and joint velocity errors, each normalized by its width and the
/// number of valid steps; invalid rows are skipped.
pub fn mano_loss_from_velocity<T: Scalar>(
    tape: &mut Tape<'_, T>,
    v: Var,
    v_star: &[f64],
    valid: &[bool],
) -> Result<Var> {
    let h = valid.len();
    if tape.shape(v) != [h, HAND_DIM] || v_star.len() != h * HAND_DIM {
        return Err(Error::invalid("hand velocity shapes do not match the horizon"));
    }
    let rows: Vec<usize> = (0..h).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("hand target has no valid steps"));
    }
    let n = rows.len();
    let pred = if n == h { v } else { tape.gather_rows(v, &rows)? };
    let target: Vec<T> = rows
        .iter()
        .flat_map(|&r| v_star[r * HAND_DIM..(r + 1) * HAND_DIM].iter().map(|&x| T::from_f64(x)))
        .collect();
    let target = tape.constant_from(&[n, HAND_DIM], target)?;
    let pw = tape.slice_cols(pred, 0, WRIST_DIM)?;
    let tw = tape.slice_cols(target, 0, WRIST_DIM)?;
    let pj = tape.slice_cols(pred, WRIST_DIM, JOINT_DIM)?;
    let tj = tape.slice_cols(target, WRIST_DIM, JOINT_DIM)?;
    let lw = tape.mse_weighted(pw, tw, 1.0 / (WRIST_DIM * n) as f64)?;
    let lj = tape.mse_weighted(pj, tj, 1.0 / (JOINT_DIM * n) as f64)?;
    Ok(tape.add(lw, lj)?)
}

/// Flow-matching loss of the hand expert for one episode.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_mano<T: Scalar, R: Rng>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: Option<&WaypointPlan>,
    target: &HandState,
    rng: &mut R,
) -> Result<Var> {
    let fb = FlowBatch::draw(&target.frames, rng);
    let mut q = Query::new(objects, text);
    q.waypoints = plan.map(|p| p.bins.as_slice());
    q.mano = Some(FlowInput { x: &fb.x_t, t: fb.t });
    q.mano_valid = Some(&target.valid);
    let fwd = model.forward(tape, &q)?;
    let v = model.head(tape, &fwd, SpanKind::Mano)?;
    mano_loss_from_velocity(tape, v, &fb.v_star, &target.valid)
}

/// Hand velocity and final-layer hand-span hidden states for one state.
fn hand_pass<T: Scalar>(
    model: &Model<T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: Option<&WaypointPlan>,
    x: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::with_params(&model.params);
    let mut q = Query::new(objects, text);
    q.waypoints = plan.map(|p| p.bins.as_slice());
    q.mano = Some(FlowInput { x, t });
    let fwd = model.forward(&mut tape, &q)?;
    let v = model.head(&mut tape, &fwd, SpanKind::Mano)?;
    let h = read_hidden(&mut tape, &fwd, SpanKind::Mano)?;
    let f = |s: &[T]| s.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    Ok((f(tape.value(v)), f(tape.value(h))))
}

/// Flow time of the last Euler evaluation with `steps` steps, `(N − 1) / N`.
pub fn capture_time(steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::invalid("flow integration needs at least one step"));
    }
    Ok((steps - 1) as f64 / steps as f64)
}

/// Sample a hand sequence with guided Euler integration from `ε(seed)`.
///
/// The returned intention states come from the conditional pass of the
/// final integration step.
#[allow(clippy::too_many_arguments)]
pub fn sample_mano<T: Scalar>(
    model: &Model<T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: Option<&WaypointPlan>,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<(HandState, IntentionStates)> {
    if steps == 0 {
        return Err(Error::invalid("flow integration needs at least one step"));
    }
    let h = model.config.horizon;
    let x0 = flow::gaussian(h * HAND_DIM, &mut crate::rng::seeded(seed));
    let mut captured: Option<IntentionStates> = None;
    let x = {
        let cond = |x: &[f64], t: f64| -> Result<Vec<f64>> {
            let (v, hidden) = hand_pass(model, objects, text, plan, x, t)?;
            captured = Some(IntentionStates { hidden, state: x.to_vec(), t });
            Ok(v)
        };
        let uncond = |x: &[f64], t: f64| -> Result<Vec<f64>> { Ok(hand_pass(model, objects, None, plan, x, t)?.0) };
        let mut field = Guided { cond, uncond, scale: cfg_scale };
        flow::euler(&mut field, x0, steps)?
    };
    let hand = HandState::new(x, vec![true; h])?.canonicalized()?;
    Ok((hand, captured.expect("at least one step ran")))
}
