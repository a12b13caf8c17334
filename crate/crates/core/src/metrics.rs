//! Hand-motion metrics and the multi-generation evaluation protocol.

use serde::{Deserialize, Serialize};

use moth_tensor::Scalar;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::intention::{sample_mano, HandState, JOINTS};
use crate::model::Model;
use crate::waypoint::{decode_waypoints, DecodeMode};
use crate::quat::Quat;
use crate::synth::Episode;

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean distance between equal-length tracks.
pub fn ade(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("ade: lengths {} and {} differ", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("ade: empty tracks"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| dist(p, g)).sum::<f64>() / pred.len() as f64)
}

/// [`ade`] over the common prefix of the two tracks.
pub fn ade_truncated(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let n = pred.len().min(gt.len());
    ade(&pred[..n], &gt[..n])
}

/// Optimal cumulative alignment cost and the length of the optimal path.
/// Among equal-cost paths the shortest is taken.
pub fn dtw_raw(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(f64, usize)> {
    let (n, m) = (pred.len(), gt.len());
    if n == 0 || m == 0 {
        return Err(Error::invalid("dtw: empty sequence"));
    }
    let mut cost = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let local = dist(&pred[i], &gt[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut b = (f64::INFINITY, usize::MAX);
                let mut consider = |c: (f64, usize)| {
                    if c.0 < b.0 || (c.0 == b.0 && c.1 < b.1) {
                        b = c;
                    }
                };
                if i > 0 {
                    consider(cost[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(cost[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    consider(cost[(i - 1) * m + j - 1]);
                }
                b
            };
            cost[i * m + j] = (best.0 + local, best.1 + 1);
        }
    }
    Ok(cost[n * m - 1])
}

/// Optimal alignment cost divided by the optimal path length.
pub fn dtw(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let (c, l) = dtw_raw(pred, gt)?;
    Ok(c / l as f64)
}

pub use crate::quat::rot_error;

/// Mean [`rot_error`] over paired quaternions.
pub fn mean_rot_error(pred: &[Quat], gt: &[Quat]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("rotation sequences must be non-empty and of equal length"));
    }
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        s += rot_error(p, g)?;
    }
    Ok(s / pred.len() as f64)
}

fn valid_steps(pred: &HandState, gt: &HandState) -> Vec<usize> {
    (0..pred.horizon().min(gt.horizon())).filter(|&h| gt.valid[h] && pred.valid[h]).collect()
}

/// Wrist rotation error averaged over the steps valid in both sequences.
pub fn wrist_rot_error(pred: &HandState, gt: &HandState) -> Result<f64> {
    let steps = valid_steps(pred, gt);
    let p: Vec<Quat> = steps.iter().map(|&h| pred.wrist_quat(h)).collect();
    let g: Vec<Quat> = steps.iter().map(|&h| gt.wrist_quat(h)).collect();
    mean_rot_error(&p, &g)
}

/// Joint rotation error averaged over the 15 joints, then over steps.
pub fn joint_rot_error(pred: &HandState, gt: &HandState) -> Result<f64> {
    let steps = valid_steps(pred, gt);
    if steps.is_empty() {
        return Err(Error::invalid("no common valid steps"));
    }
    let mut s = 0.0;
    for &h in &steps {
        let mut per = 0.0;
        for j in 0..JOINTS {
            per += rot_error(&pred.joint(h, j), &gt.joint(h, j))?;
        }
        s += per / JOINTS as f64;
    }
    Ok(s / steps.len() as f64)
}

/// How DTW cost is reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtwNorm {
    /// Divided by the optimal path length.
    #[default]
    PathLength,
    /// Raw cumulative cost.
    None,
}

/// How ADE is pooled into the dataset mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdeAggregation {
    /// Mean of per-clip means.
    #[default]
    PerClip,
    /// Mean over every compared timestep in the split.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub dtw_norm: DtwNorm,
    #[serde(default)]
    pub ade_aggregation: AdeAggregation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    pub ade_m: f64,
    pub dtw_m: f64,
    pub rot_deg: f64,
    pub joint_rot_deg: f64,
}

impl MotionMetrics {
    pub fn between(pred: &HandState, gt: &HandState) -> Result<Self> {
        Self::between_with(pred, gt, DtwNorm::PathLength)
    }

    pub fn between_with(pred: &HandState, gt: &HandState, norm: DtwNorm) -> Result<Self> {
        let p = pred.wrist_track();
        let g = gt.wrist_track();
        let (cost, len) = dtw_raw(&p, &g)?;
        Ok(MotionMetrics {
            ade_m: ade_truncated(&p, &g)?,
            dtw_m: match norm {
                DtwNorm::PathLength => cost / len as f64,
                DtwNorm::None => cost,
            },
            rot_deg: wrist_rot_error(pred, gt)?,
            joint_rot_deg: joint_rot_error(pred, gt)?,
        })
    }

    fn mean(items: &[MotionMetrics]) -> MotionMetrics {
        let n = items.len().max(1) as f64;
        let mut m = MotionMetrics::default();
        for x in items {
            m.ade_m += x.ade_m;
            m.dtw_m += x.dtw_m;
            m.rot_deg += x.rot_deg;
            m.joint_rot_deg += x.joint_rot_deg;
        }
        MotionMetrics { ade_m: m.ade_m / n, dtw_m: m.dtw_m / n, rot_deg: m.rot_deg / n, joint_rot_deg: m.joint_rot_deg / n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub episode: u64,
    /// Timesteps compared by ADE.
    pub steps: usize,
    pub generations: Vec<MotionMetrics>,
    pub mean: MotionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEvalReport {
    pub generations_per_clip: usize,
    pub clips: Vec<ClipReport>,
    pub mean: MotionMetrics,
}

impl MotionEvalReport {
    /// Plain-text table with one row per clip and a mean row.
    pub fn table(&self) -> String {
        let mut s = format!("{:>8} {:>10} {:>10} {:>10} {:>12}\n", "clip", "ADE(m)", "DTW(m)", "Rot(deg)", "JointRot(deg)");
        let row = |name: String, m: &MotionMetrics| {
            format!("{name:>8} {:>10.4} {:>10.4} {:>10.3} {:>12.3}\n", m.ade_m, m.dtw_m, m.rot_deg, m.joint_rot_deg)
        };
        for c in &self.clips {
            s += &row(c.episode.to_string(), &c.mean);
        }
        s += &row("mean".into(), &self.mean);
        s
    }
}

/// Anything that turns a clip and a seed into a hand sequence.
pub trait HandGenerator {
    fn generate(&self, clip: &Episode, seed: u64) -> Result<HandState>;
}

/// Greedy waypoint plan, then guided hand sampling seeded per generation.
pub struct ModelHandGenerator<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub dataset: &'a Dataset,
    pub flow_steps: usize,
    pub cfg_scale: f64,
}

impl<T: Scalar> HandGenerator for ModelHandGenerator<'_, T> {
    fn generate(&self, clip: &Episode, seed: u64) -> Result<HandState> {
        if !self.model.config.intention {
            return Err(Error::Config("model has no hand span".into()));
        }
        let inp = self.dataset.inputs(clip)?;
        let plan = if self.model.config.traj3d {
            Some(decode_waypoints(self.model, &inp.objects, Some(&inp.text), DecodeMode::Greedy, seed)?)
        } else {
            None
        };
        let (hand, _) =
            sample_mano(self.model, &inp.objects, Some(&inp.text), plan.as_ref(), self.flow_steps, self.cfg_scale, seed)?;
        Ok(hand)
    }
}

/// Score every clip against its hand target with one generation per seed.
/// Clip means average over generations; the report mean averages clip means.
pub fn evaluate_clips<G: HandGenerator>(gen: &G, clips: &[&Episode], seeds: &[u64]) -> Result<MotionEvalReport> {
    evaluate_clips_with(gen, clips, seeds, EvalOptions::default())
}

pub fn evaluate_clips_with<G: HandGenerator>(
    gen: &G,
    clips: &[&Episode],
    seeds: &[u64],
    opts: EvalOptions,
) -> Result<MotionEvalReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one seed"));
    }
    let mut reports = Vec::with_capacity(clips.len());
    for clip in clips {
        let gt = clip.hand.as_ref().ok_or_else(|| Error::Data(format!("clip {} has no hand target", clip.id)))?;
        let mut steps = gt.valid_count();
        let mut generations = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let pred = gen.generate(clip, s)?;
            steps = steps.min(pred.valid_count());
            generations.push(MotionMetrics::between_with(&pred, gt, opts.dtw_norm)?);
        }
        let mean = MotionMetrics::mean(&generations);
        reports.push(ClipReport { episode: clip.id, steps, generations, mean });
    }
    let means: Vec<MotionMetrics> = reports.iter().map(|c| c.mean).collect();
    let mut mean = MotionMetrics::mean(&means);
    if opts.ade_aggregation == AdeAggregation::Global {
        let total: usize = reports.iter().map(|c| c.steps).sum();
        mean.ade_m = reports.iter().map(|c| c.mean.ade_m * c.steps as f64).sum::<f64>() / total.max(1) as f64;
    }
    Ok(MotionEvalReport { generations_per_clip: seeds.len(), mean, clips: reports })
}

/// Per-dimension root-mean-square error over paired chunks.
pub fn per_dim_rmse(pred: &[&[f64]], gt: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("rmse needs equal, non-empty chunk lists"));
    }
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.len() % dim != 0 {
            return Err(Error::invalid("chunk shapes differ"));
        }
        for (i, (a, b)) in p.iter().zip(g.iter()).enumerate() {
            sq[i % dim] += (a - b) * (a - b);
        }
        n += p.len() / dim;
    }
    Ok(sq.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ade_examples() {
        let a = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b = a.map(|p| [p[0] + 0.02, p[1], p[2]]);
        assert!((ade(&b, &a).unwrap() - 0.02).abs() < 1e-12);
        assert!(ade(&a, &a[..1]).is_err());
        assert!((ade_truncated(&b, &a[..1]).unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap(), 5.0);
        let x = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let y = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(dtw_raw(&x, &y).unwrap(), (1.0, 3));
        assert!((dtw(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dtw(&x, &x).unwrap(), 0.0);
        assert!(dtw(&x, &[]).is_err());
    }

    #[test]
    fn rmse_per_dimension() {
        let p = [0.0, 0.0, 1.0, 2.0];
        let g = [1.0, 0.0, 1.0, 0.0];
        let r = per_dim_rmse(&[&p], &[&g], 2).unwrap();
        assert!((r[0] - (0.5f64).sqrt()).abs() < 1e-15);
        assert!((r[1] - 2f64.sqrt()).abs() < 1e-15);
    }
}
