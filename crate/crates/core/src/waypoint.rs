//! Discretized waypoint plan: quantization, loss and autoregressive decoding.

use moth_tensor::{Scalar, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::SpanKind;
use crate::model::{Model, ObjectToken, Query};

fn check_grid(lo: f64, hi: f64, bins: usize) -> Result<()> {
    if bins < 2 || !(lo < hi) {
        return Err(Error::invalid(format!("bad grid [{lo}, {hi}] with {bins} bins")));
    }
    Ok(())
}

/// Bin index of `value`; out-of-range values land in the boundary bins.
pub fn quantize(value: f64, lo: f64, hi: f64, bins: usize) -> Result<usize> {
    check_grid(lo, hi, bins)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    let b = ((value - lo) / (hi - lo) * bins as f64).floor();
    Ok(b.clamp(0.0, (bins - 1) as f64) as usize)
}

/// Center of bin `bin`.
pub fn dequantize(bin: usize, lo: f64, hi: f64, bins: usize) -> Result<f64> {
    check_grid(lo, hi, bins)?;
    if bin >= bins {
        return Err(Error::invalid(format!("bin {bin} outside [0, {bins})")));
    }
    Ok(lo + (bin as f64 + 0.5) * (hi - lo) / bins as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaypointPlan {
    pub bins: Vec<[usize; 3]>,
    pub num_bins: usize,
    pub coord_range: [[f64; 2]; 3],
}

impl WaypointPlan {
    pub fn from_positions(positions: &[[f64; 3]], num_bins: usize, coord_range: [[f64; 2]; 3]) -> Result<Self> {
        let bins = positions
            .iter()
            .map(|p| {
                let mut b = [0; 3];
                for a in 0..3 {
                    b[a] = quantize(p[a], coord_range[a][0], coord_range[a][1], num_bins)?;
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WaypointPlan { bins, num_bins, coord_range })
    }

    pub fn horizon(&self) -> usize {
        self.bins.len()
    }

    /// Bin centers.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.bins
            .iter()
            .map(|b| {
                std::array::from_fn(|a| {
                    let [lo, hi] = self.coord_range[a];
                    lo + (b[a] as f64 + 0.5) * (hi - lo) / self.num_bins as f64
                })
            })
            .collect()
    }

    /// Targets in `(h, axis)` order, matching the rows of [`waypoint_logits`].
    pub fn flat_targets(&self) -> Vec<usize> {
        self.bins.iter().flat_map(|b| b.iter().copied()).collect()
    }
}

/// Waypoint head output as a `[3H, B]` matrix with rows in `(h, axis)` order.
pub fn waypoint_logits<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    fwd: &crate::model::Forward,
) -> Result<Var> {
    let y = model.head(tape, fwd, SpanKind::Traj3d)?;
    let c = &model.config;
    Ok(tape.reshape(y, &[3 * c.horizon, c.bins])?)
}

/// Summed cross-entropy over all `3H` coordinate terms.
pub fn loss_3d<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, plan: &WaypointPlan) -> Result<Var> {
    let targets = plan.flat_targets();
    if tape.shape(logits) != [targets.len(), plan.num_bins] {
        return Err(Error::invalid(format!(
            "logits {:?} do not match a plan of {} waypoints over {} bins",
            tape.shape(logits),
            plan.horizon(),
            plan.num_bins
        )));
    }
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Logits with every waypoint position fed the ground-truth previous waypoint.
pub fn teacher_forced_logits<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    plan: &WaypointPlan,
) -> Result<Var> {
    let mut q = Query::new(objects, text);
    q.waypoints = Some(&plan.bins);
    let fwd = model.forward(tape, &q)?;
    waypoint_logits(model, tape, &fwd)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Temperature-scaled categorical draws; a non-positive temperature is greedy.
    Sample { temperature: f64 },
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row<R: Rng>(row: &[f64], temperature: f64, rng: &mut R) -> usize {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    argmax(row)
}

/// Decode the plan left to right, feeding each decoded waypoint to the next position.
pub fn decode_waypoints<T: Scalar>(
    model: &Model<T>,
    objects: &[ObjectToken],
    text: Option<&[usize]>,
    mode: DecodeMode,
    seed: u64,
) -> Result<WaypointPlan> {
    let c = &model.config;
    let mut rng = crate::rng::seeded(seed);
    let mut bins = vec![[0usize; 3]; c.horizon];
    for h in 0..c.horizon {
        let mut tape = Tape::with_params(&model.params);
        let mut q = Query::new(objects, text);
        q.waypoints = Some(&bins);
        let fwd = model.forward(&mut tape, &q)?;
        let logits = waypoint_logits(model, &mut tape, &fwd)?;
        let vals = tape.value(logits);
        for a in 0..3 {
            let r = (3 * h + a) * c.bins;
            let row: Vec<f64> = vals[r..r + c.bins].iter().map(|v| v.as_f64()).collect();
            bins[h][a] = match mode {
                DecodeMode::Sample { temperature } if temperature > 0.0 => sample_row(&row, temperature, &mut rng),
                _ => argmax(&row),
            };
        }
    }
    Ok(WaypointPlan { bins, num_bins: c.bins, coord_range: c.coord_range })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(-1.0, -1.0, 1.0, 256).unwrap(), 0);
        assert_eq!(quantize(1.0, -1.0, 1.0, 256).unwrap(), 255);
        assert_eq!(quantize(0.0, -1.0, 1.0, 256).unwrap(), 128);
        assert_eq!(quantize(7.0, -1.0, 1.0, 256).unwrap(), 255);
        assert!(quantize(f64::NAN, -1.0, 1.0, 256).is_err());
        assert!(quantize(0.0, 1.0, 1.0, 256).is_err());
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, -1.0, 1.0, 256).unwrap(), -0.99609375);
        assert_eq!(dequantize(255, -1.0, 1.0, 256).unwrap(), 0.99609375);
        assert!(dequantize(256, -1.0, 1.0, 256).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn low_temperature_sampling_is_argmax() {
        let row = [0.1, 0.7, 0.3];
        let mut rng = crate::rng::seeded(3);
        for _ in 0..20 {
            assert_eq!(sample_row(&row, 1e-6, &mut rng), 1);
        }
    }
}
