//! End-to-end pipelines behind the command-line subcommands.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_digest, Checkpoint};
use crate::config::{AblationFlags, RunConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fine::{predict_chunk, SampleSettings};
use crate::metrics::{evaluate_clips_with, per_dim_rmse, ModelHandGenerator, MotionEvalReport};
use crate::model::Model;
use crate::rng;
use crate::synth::{Episode, Split};
use crate::trainer::{OptimState, StepRecord, Trainer};

/// First line of a training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogHeader {
    pub seed: u64,
    pub streams: Vec<(String, u64)>,
    pub resumed_from: Option<u64>,
    pub config: RunConfig,
}

impl LogHeader {
    pub fn new(cfg: &RunConfig, resumed_from: Option<u64>) -> Self {
        LogHeader {
            seed: cfg.seed,
            streams: rng::STREAMS.iter().map(|s| (s.to_string(), rng::stream_seed(cfg.seed, s))).collect(),
            resumed_from,
            config: cfg.clone(),
        }
    }
}

fn write_json<W: Write, S: Serialize>(out: &mut W, v: &S) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

/// Fresh model with parameters drawn from the init stream.
pub fn init_model(cfg: &RunConfig) -> Result<Model<f32>> {
    Model::init(cfg.effective_model(), &mut rng::stream(cfg.seed, rng::INIT, 0))
}

pub fn trainer<'d>(cfg: &RunConfig, data: &'d Dataset, resume: Option<&Checkpoint>) -> Result<Trainer<'d>> {
    let mc = cfg.effective_model();
    let model = match resume {
        Some(ck) => {
            ck.check_config(&mc)?;
            Model::from_params(mc, ck.params.clone())?
        }
        None => init_model(cfg)?,
    };
    let mut t = Trainer::new(model, data, cfg.optim.clone(), cfg.effective_loss(), cfg.train.clone(), cfg.seed, cfg.sampling.flow_steps)?;
    if let Some(ck) = resume {
        let snap = ck.optimizer.as_ref().ok_or_else(|| Error::Data("checkpoint has no optimizer state".into()))?;
        let ema = ck.ema.clone().unwrap_or_else(|| ck.params.clone());
        t.opt = OptimState::restore(&t.model.params, snap, ema)?;
    }
    Ok(t)
}

pub fn checkpoint_of(t: &Trainer<'_>) -> Checkpoint {
    Checkpoint {
        digest: config_digest(&t.model.config),
        params: t.model.params.clone(),
        optimizer: Some(t.opt.snapshot(&t.model.params)),
        ema: Some(t.opt.ema.clone()),
    }
}

/// Train until `cfg.train.steps`, logging one JSON record per step.
///
/// `ckpt` receives periodic checkpoints and the final one.
pub fn train<W: Write>(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<&Checkpoint>,
    ckpt: Option<&Path>,
    log: &mut W,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    cfg.validate()?;
    let mut t = trainer(cfg, data, resume)?;
    write_json(log, &LogHeader::new(cfg, resume.map(|_| t.opt.step)))?;
    let mut records = Vec::new();
    while t.opt.step < cfg.train.steps {
        let rec = t.step()?;
        write_json(log, &rec)?;
        records.push(rec);
        if let Some(p) = ckpt {
            if cfg.checkpoint_every > 0 && t.opt.step % cfg.checkpoint_every == 0 && t.opt.step < cfg.train.steps {
                checkpoint_of(&t).save(p)?;
            }
        }
    }
    let ck = checkpoint_of(&t);
    if let Some(p) = ckpt {
        ck.save(p)?;
    }
    Ok((ck, records))
}

/// Model for inference: EMA weights when the checkpoint carries them.
pub fn inference_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model<f32>> {
    let mc = cfg.effective_model();
    ck.check_config(&mc)?;
    Model::from_params(mc, ck.ema.clone().unwrap_or_else(|| ck.params.clone()))
}

pub fn sample_settings(cfg: &RunConfig) -> SampleSettings {
    SampleSettings { flow_steps: cfg.sampling.flow_steps, cfg_scale: cfg.sampling.cfg_scale, ..Default::default() }
}

/// Seeds of the `g`-th generation for every clip.
pub fn eval_seeds(root: u64, generations: usize) -> Vec<u64> {
    let base = rng::stream_seed(root, rng::EVAL);
    (0..generations as u64).map(|g| rng::stream_seed(base, &format!("gen{g}"))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub clips: usize,
    pub motion: Option<MotionEvalReport>,
    /// Per-dimension RMSE of predicted action chunks in normalized units.
    pub action_rmse: Vec<f64>,
    /// Per-axis top-1 accuracy of greedily decoded waypoint bins.
    pub waypoint_accuracy: Option<[f64; 3]>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!("split {} ({} clips)\n", self.split, self.clips);
        if let Some(m) = &self.motion {
            s += &m.table();
        }
        s += "action RMSE:";
        for r in &self.action_rmse {
            s += &format!(" {r:.4}");
        }
        s += "\n";
        if let Some(a) = self.waypoint_accuracy {
            s += &format!("waypoint top-1: x {:.4} y {:.4} z {:.4}\n", a[0], a[1], a[2]);
        }
        s
    }
}

fn clips(data: &Dataset, split: Split, limit: usize) -> Vec<&Episode> {
    let all: Vec<&Episode> = data.split(split).collect();
    if limit == 0 || limit >= all.len() {
        all
    } else {
        all[..limit].to_vec()
    }
}

/// Action RMSE and waypoint accuracy over the robot clips of `split`.
pub fn evaluate_actions(
    model: &Model<f32>,
    data: &Dataset,
    split: Split,
    settings: &SampleSettings,
    limit: usize,
    seed: u64,
) -> Result<(Vec<f64>, Option<[f64; 3]>, usize)> {
    let eps: Vec<&Episode> = clips(data, split, limit).into_iter().filter(|e| e.actions.is_some()).collect();
    if eps.is_empty() {
        return Err(Error::Data(format!("split {split} has no action clips")));
    }
    let base = rng::stream_seed(seed, rng::EVAL);
    let mut preds = Vec::with_capacity(eps.len());
    let mut hits = [0usize; 3];
    let mut total = 0usize;
    for e in &eps {
        let inp = data.inputs(e)?;
        let p = predict_chunk(model, &inp.objects, Some(&inp.text), settings, rng::stream_seed(base, &e.id.to_string()))?;
        if let Some(plan) = &p.plan {
            for (a, b) in plan.bins.iter().zip(&inp.plan.bins) {
                for k in 0..3 {
                    hits[k] += (a[k] == b[k]) as usize;
                }
            }
            total += plan.bins.len();
        }
        preds.push(p.actions.data);
    }
    let gts: Vec<&[f64]> = eps.iter().map(|e| e.actions.as_ref().expect("filtered").data.as_slice()).collect();
    let ps: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
    let rmse = per_dim_rmse(&ps, &gts, model.config.action_dim)?;
    let acc = model.config.traj3d.then(|| hits.map(|h| h as f64 / total.max(1) as f64));
    Ok((rmse, acc, eps.len()))
}

/// Motion metrics, action RMSE and waypoint accuracy on one split.
pub fn evaluate(cfg: &RunConfig, model: &Model<f32>, data: &Dataset, split: Split) -> Result<EvalReport> {
    let settings = sample_settings(cfg);
    let (action_rmse, waypoint_accuracy, n) =
        evaluate_actions(model, data, split, &settings, cfg.sampling.eval_clips, cfg.seed)?;
    let motion = if model.config.intention {
        let hand: Vec<&Episode> =
            clips(data, split, cfg.sampling.eval_clips).into_iter().filter(|e| e.hand.is_some()).collect();
        let gen = ModelHandGenerator { model, dataset: data, flow_steps: settings.flow_steps, cfg_scale: settings.cfg_scale };
        Some(evaluate_clips_with(&gen, &hand, &eval_seeds(cfg.seed, cfg.sampling.generations), cfg.eval)?)
    } else {
        None
    };
    Ok(EvalReport { split: split.to_string(), clips: n, motion, action_rmse, waypoint_accuracy })
}

/// The four arms compared by the ablation, from plain to full.
pub const ARMS: [(&str, AblationFlags); 4] = [
    ("baseline", AblationFlags { no_traj3d: true, no_intention: true, no_insulation: true }),
    ("+traj3d", AblationFlags { no_traj3d: false, no_intention: true, no_insulation: true }),
    ("+intention", AblationFlags { no_traj3d: false, no_intention: false, no_insulation: true }),
    ("+insulation", AblationFlags { no_traj3d: false, no_intention: false, no_insulation: false }),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub action_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Seed-mean per-dimension RMSE of one arm.
    pub fn arm_mean(&self, arm: &str) -> Option<Vec<f64>> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.arm == arm).collect();
        let first = rows.first()?;
        let mut m = vec![0.0; first.action_rmse.len()];
        for r in &rows {
            m.iter_mut().zip(&r.action_rmse).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= rows.len() as f64);
        Some(m)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>10}\n", "arm", "RMSE", "gripper");
        for (name, _) in ARMS {
            if let Some(m) = self.arm_mean(name) {
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                s += &format!("{name:<12} {mean:>10.4} {:>10.4}\n", m[m.len() - 1]);
            }
        }
        s
    }
}

/// Train and score every arm for every seed on one shared dataset.
///
/// Each row is also written to `log` as it completes.
pub fn ablate<W: Write>(cfg: &RunConfig, data: &Dataset, seeds: &[u64], split: Split, log: &mut W) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, flags) in ARMS {
            let mut c = cfg.clone();
            c.seed = seed;
            c.ablation = flags;
            let (ck, _) = train(&c, data, None, None, &mut std::io::sink())?;
            let model = inference_model(&c, &ck)?;
            let (rmse, _, _) = evaluate_actions(&model, data, split, &sample_settings(&c), c.sampling.eval_clips, seed)?;
            let row = AblationRow {
                arm: name.to_string(),
                seed,
                mean_rmse: rmse.iter().sum::<f64>() / rmse.len() as f64,
                action_rmse: rmse,
            };
            write_json(log, &row)?;
            rows.push(row);
        }
    }
    Ok(AblationReport { split: split.to_string(), rows })
}
