//! Run configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::model::ModelConfig;
use crate::synth::{SplitSpec, WorldConfig};
use crate::trainer::{LossWeights, OptimConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub cfg_scale: f64,
    pub flow_steps: usize,
    /// Hand generations per evaluation clip.
    pub generations: usize,
    /// Clips scored per evaluation; 0 means the whole split.
    pub eval_clips: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { cfg_scale: 6.0, flow_steps: 10, generations: 5, eval_clips: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub no_traj3d: bool,
    pub no_intention: bool,
    pub no_insulation: bool,
}

/// Single-switch form used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    NoTraj3d,
    NoIntention,
    NoInsulation,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "no-traj3d" => Ablation::NoTraj3d,
            "no-intention" => Ablation::NoIntention,
            "no-insulation" => Ablation::NoInsulation,
            _ => return Err(Error::Config(format!("unknown ablation {s:?}"))),
        })
    }
}

impl Ablation {
    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Ablation::None => {}
            Ablation::NoTraj3d => f.no_traj3d = true,
            Ablation::NoIntention => f.no_intention = true,
            Ablation::NoInsulation => f.no_insulation = true,
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub splits: SplitSpec,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            splits: SplitSpec::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalOptions::default(),
            paths: PathsConfig::default(),
            ablation: AblationFlags::default(),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    /// Settings that train to the end-to-end targets on a single CPU
    /// within the step budget. Architecture and data match the defaults.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.optim.lr = 1e-3;
        c.optim.warmup_steps = 100;
        c.optim.ema_decay = 0.99;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.world.horizon != self.model.horizon {
            return Err(Error::Config(format!(
                "world horizon {} differs from model horizon {}",
                self.world.horizon, self.model.horizon
            )));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.sampling.flow_steps == 0 || self.sampling.generations == 0 {
            return Err(Error::Config("flow steps and generations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.instruction_dropout) || !(0.0..=1.0).contains(&self.train.hand_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration with the ablation flags applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.no_traj3d {
            m.traj3d = false;
        }
        if self.ablation.no_intention {
            m.intention = false;
        }
        if self.ablation.no_insulation {
            m.insulate = false;
        }
        m
    }

    /// Loss weights with disabled spans forced to zero.
    pub fn effective_loss(&self) -> LossWeights {
        let m = self.effective_model();
        let mut w = self.loss;
        if !m.traj3d {
            w.lambda_3d = 0.0;
        }
        if !m.intention {
            w.lambda_m = 0.0;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.model.horizon, 15);
        assert_eq!(c.sampling.cfg_scale, 6.0);
        assert_eq!(c.optim.lr, 2.5e-5);
        assert_eq!(c.sampling.flow_steps, 10);
    }

    #[test]
    fn round_trip() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            let text = c.render().unwrap();
            assert_eq!(RunConfig::parse(&text).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default().render().unwrap();
        text = text.replacen("seed = 0", "seed = 0\nbogus = 1", 1);
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let text = RunConfig::default().render().unwrap().replacen("[optim]", "[optim]\nmomentum = 0.5", 1);
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn no_intention_zeroes_hand_weight() {
        let mut c = RunConfig::default();
        c.ablation = Ablation::NoIntention.flags();
        let m = c.effective_model();
        assert!(!m.intention);
        assert!(!m.layout().has(crate::layout::SpanKind::Mano));
        assert_eq!(c.effective_loss().lambda_m, 0.0);
        assert_eq!(c.effective_loss().lambda_a, 1.0);
    }

    #[test]
    fn ablation_names() {
        assert_eq!("no-traj3d".parse::<Ablation>().unwrap(), Ablation::NoTraj3d);
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
