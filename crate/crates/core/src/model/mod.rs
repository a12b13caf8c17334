//! Parameters of the three-expert policy and its forward pass.

mod embed;
mod trunk;

use moth_tensor::{ParamId, ParamStore, Scalar, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{build_mask, Expert, SpanKind, SpanLayout};

pub use embed::{fourier_features, time_embedding, ObjectToken, FOURIER_FEATURES};
pub use trunk::{read_hidden, trunk_forward};

/// Per-coordinate dimensions of the hand state: wrist translation and
/// quaternion, then 15 joint quaternions.
pub const WRIST_DIM: usize = 7;
pub const JOINT_DIM: usize = 60;
pub const HAND_DIM: usize = WRIST_DIM + JOINT_DIM;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub horizon: usize,
    pub bins: usize,
    /// Per-axis `[lo, hi]` of the waypoint grid.
    pub coord_range: [[f64; 2]; 3],
    pub n_img: usize,
    pub n_txt: usize,
    pub action_dim: usize,
    pub vocab: usize,
    pub shapes: usize,
    pub colors: usize,
    pub traj3d: bool,
    pub intention: bool,
    pub insulate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 128,
            heads: 4,
            horizon: 15,
            bins: 256,
            coord_range: [[-1.0, 1.0]; 3],
            n_img: 4,
            n_txt: 4,
            action_dim: 7,
            vocab: crate::synth::VOCAB,
            shapes: crate::synth::SHAPES,
            colors: crate::synth::COLORS,
            traj3d: true,
            intention: true,
            insulate: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return bad("depth, width and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.width % 2 != 0 {
            return bad("width must be even for the time embedding".into());
        }
        if self.horizon == 0 || self.bins < 2 || self.action_dim == 0 {
            return bad("horizon >= 1, bins >= 2 and action_dim >= 1 required".into());
        }
        if self.n_img == 0 || self.n_txt == 0 {
            return bad("n_img and n_txt must be positive".into());
        }
        for [lo, hi] in self.coord_range {
            if !(lo < hi) {
                return bad(format!("coord range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }

    /// Layout with every span the configuration enables.
    pub fn layout(&self) -> SpanLayout {
        SpanLayout {
            n_img: self.n_img,
            n_txt: self.n_txt,
            horizon: self.horizon,
            traj3d: self.traj3d,
            mano: self.intention,
            action: true,
        }
    }
}

/// Which expert (or `None` for the shared embeddings) owns a parameter.
pub fn group_of(name: &str) -> Option<Expert> {
    Expert::ALL.into_iter().find(|e| name.starts_with(e.prefix()))
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) struct ExpertIds {
    pub layers: Vec<BlockIds>,
    /// Final norm and output head; absent for an expert with no head.
    pub ln_f: Option<(ParamId, ParamId)>,
    pub head: Option<(ParamId, ParamId)>,
    /// Input projection of the noisy flow state.
    pub input: Option<(ParamId, ParamId)>,
    /// Projection of waypoint Fourier features added to the flow span.
    pub plan: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct TrajIds {
    pub query: ParamId,
    pub begin: ParamId,
    pub axis_emb: [ParamId; 3],
    /// Projection of Fourier features of the dequantized waypoint.
    pub pos: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub type_emb: ParamId,
    pub pos_emb: ParamId,
    pub obj: (ParamId, ParamId),
    pub shape_emb: ParamId,
    pub color_emb: ParamId,
    pub txt_emb: ParamId,
    pub null_txt: ParamId,
    pub traj: Option<TrajIds>,
    pub vl: ExpertIds,
    pub int: Option<ExpertIds>,
    pub fine: ExpertIds,
}

impl Ids {
    pub fn expert(&self, e: Expert) -> Option<&ExpertIds> {
        match e {
            Expert::Vl => Some(&self.vl),
            Expert::Intention => self.int.as_ref(),
            Expert::Fine => Some(&self.fine),
        }
    }
}

struct Init<'a, R: Rng> {
    store: ParamStore<f32>,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Ok(self.store.insert(name, shape, data)?)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f32) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        Ok(self.store.insert(name, shape, vec![v; n])?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<(ParamId, ParamId)> {
        let w = self.normal(&format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt())?;
        let b = self.fill(&format!("{name}.b"), &[fan_out], 0.0)?;
        Ok((w, b))
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.fill(&format!("{name}.g"), &[d], 1.0)?,
            self.fill(&format!("{name}.b"), &[d], 0.0)?,
        ))
    }

    fn expert(&mut self, cfg: &ModelConfig, prefix: &str) -> Result<Vec<BlockIds>> {
        let d = cfg.width;
        let std = 1.0 / (d as f64).sqrt();
        let resid = std / ((2 * cfg.depth) as f64).sqrt();
        (0..cfg.depth)
            .map(|l| {
                let p = format!("{prefix}l{l}");
                Ok(BlockIds {
                    ln1: self.norm(&format!("{p}.ln1"), d)?,
                    wq: self.normal(&format!("{p}.wq"), &[d, d], std)?,
                    wk: self.normal(&format!("{p}.wk"), &[d, d], std)?,
                    wv: self.normal(&format!("{p}.wv"), &[d, d], std)?,
                    wo: self.normal(&format!("{p}.wo"), &[d, d], resid)?,
                    ln2: self.norm(&format!("{p}.ln2"), d)?,
                    ff1: self.linear(&format!("{p}.ff1"), d, 4 * d, 1.0)?,
                    ff2: self.linear(&format!("{p}.ff2"), 4 * d, d, 1.0 / ((2 * cfg.depth) as f64).sqrt())?,
                })
            })
            .collect()
    }
}

const EMB_STD: f64 = 0.1;
const HEAD_GAIN: f64 = 0.5;

/// The policy: configuration, parameters and resolved parameter handles.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) ids: Ids,
}

impl Model<f32> {
    /// Fresh random parameters.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.width;
        let mut g = Init { store: ParamStore::new(), rng };
        let total = cfg.n_img + cfg.n_txt + 3 * cfg.horizon;

        let type_emb = g.normal("shared.type_emb", &[SpanKind::ALL.len(), d], EMB_STD)?;
        let pos_emb = g.normal("shared.pos_emb", &[total, d], EMB_STD)?;

        let obj = g.linear("vl.obj", FOURIER_FEATURES, d, 1.0)?;
        let shape_emb = g.normal("vl.shape_emb", &[cfg.shapes + 1, d], EMB_STD)?;
        let color_emb = g.normal("vl.color_emb", &[cfg.colors + 1, d], EMB_STD)?;
        let txt_emb = g.normal("vl.txt_emb", &[cfg.vocab, d], EMB_STD)?;
        let null_txt = g.normal("vl.null_txt", &[cfg.n_txt, d], EMB_STD)?;
        let traj = if cfg.traj3d {
            Some(TrajIds {
                query: g.normal("vl.traj_query", &[cfg.horizon, d], EMB_STD)?,
                begin: g.normal("vl.traj_begin", &[1, d], EMB_STD)?,
                axis_emb: [
                    g.normal("vl.wp_emb.x", &[cfg.bins, d], EMB_STD)?,
                    g.normal("vl.wp_emb.y", &[cfg.bins, d], EMB_STD)?,
                    g.normal("vl.wp_emb.z", &[cfg.bins, d], EMB_STD)?,
                ],
                pos: g.normal("vl.wp_pos.w", &[FOURIER_FEATURES, d], 1.0 / (FOURIER_FEATURES as f64).sqrt())?,
            })
        } else {
            None
        };

        let vl_layers = g.expert(cfg, "vl.")?;
        let (vl_ln, vl_head) = if cfg.traj3d {
            (Some(g.norm("vl.ln_f", d)?), Some(g.linear("vl.head", d, 3 * cfg.bins, HEAD_GAIN)?))
        } else {
            (None, None)
        };
        let vl = ExpertIds { layers: vl_layers, ln_f: vl_ln, head: vl_head, input: None, plan: None };
        let ff_std = 1.0 / (FOURIER_FEATURES as f64).sqrt();

        let int = if cfg.intention {
            let input = Some(g.linear("int.in", HAND_DIM, d, 1.0)?);
            let layers = g.expert(cfg, "int.")?;
            Some(ExpertIds {
                layers,
                ln_f: Some(g.norm("int.ln_f", d)?),
                head: Some(g.linear("int.head", d, HAND_DIM, HEAD_GAIN)?),
                input,
                plan: if cfg.traj3d { Some(g.normal("int.plan.w", &[FOURIER_FEATURES, d], ff_std)?) } else { None },
            })
        } else {
            None
        };

        let input = Some(g.linear("fine.in", cfg.action_dim, d, 1.0)?);
        let layers = g.expert(cfg, "fine.")?;
        let fine = ExpertIds {
            layers,
            ln_f: Some(g.norm("fine.ln_f", d)?),
            head: Some(g.linear("fine.head", d, cfg.action_dim, HEAD_GAIN)?),
            input,
            plan: if cfg.traj3d { Some(g.normal("fine.plan.w", &[FOURIER_FEATURES, d], ff_std)?) } else { None },
        };

        let ids = Ids { type_emb, pos_emb, obj, shape_emb, color_emb, txt_emb, null_txt, traj, vl, int, fine };
        Ok(Model { config, params: g.store, ids })
    }

    /// Rebuild a model around a loaded parameter table. Names and shapes
    /// must match what `init` would create for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let template = Model::init(config, &mut crate::rng::seeded(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Data(format!(
                "parameter table has {} entries, model needs {}",
                params.len(),
                template.params.len()
            )));
        }
        for id in template.params.ids() {
            let name = template.params.name(id);
            let got = params.id(name).ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if got != id || params.shape(got) != template.params.shape(id) {
                return Err(Error::Data(format!("parameter {name} has wrong position or shape")));
            }
        }
        Ok(Model { config: template.config, params, ids: template.ids })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    /// Parameters owned by `expert`.
    pub fn expert_params(&self, expert: Expert) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| group_of(self.params.name(id)) == Some(expert))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

/// A noisy flow state fed to the hand or action span.
#[derive(Clone, Copy, Debug)]
pub struct FlowInput<'a> {
    /// Row-major `H × dim`.
    pub x: &'a [f64],
    pub t: f64,
}

/// Everything a forward pass reads. The spans present in the sequence
/// follow from which optional fields are set.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    /// Exactly `n_img` entries, padded with [`ObjectToken::Pad`].
    pub objects: &'a [ObjectToken],
    /// Exactly `n_txt` token ids, or `None` for the learned null instruction.
    pub text: Option<&'a [usize]>,
    /// Waypoint bins; entry `h` feeds waypoint span position `h + 1` and,
    /// with all `H` entries, hand and action position `h`. At least `H − 1`
    /// entries, and `H` when a flow span is present.
    pub waypoints: Option<&'a [[usize; 3]]>,
    pub mano: Option<FlowInput<'a>>,
    /// Per-step validity of the hand span; invalid steps are hidden keys.
    pub mano_valid: Option<&'a [bool]>,
    pub action: Option<FlowInput<'a>>,
    /// Overrides `config.insulate` for this sample.
    pub insulate: Option<bool>,
}

impl<'a> Query<'a> {
    pub fn new(objects: &'a [ObjectToken], text: Option<&'a [usize]>) -> Self {
        Query {
            objects,
            text,
            waypoints: None,
            mano: None,
            mano_valid: None,
            action: None,
            insulate: None,
        }
    }
}

/// Result of a forward pass: final-layer hidden states plus the layout they follow.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layout: SpanLayout,
    pub states: Vec<Var>,
}

impl Forward {
    pub fn last(&self) -> Var {
        *self.states.last().expect("trunk has at least one layer")
    }
}

impl<T: Scalar> Model<T> {
    pub(crate) fn layout_for(&self, q: &Query<'_>) -> Result<SpanLayout> {
        let c = &self.config;
        let layout = SpanLayout {
            n_img: c.n_img,
            n_txt: c.n_txt,
            horizon: c.horizon,
            traj3d: q.waypoints.is_some(),
            mano: q.mano.is_some(),
            action: q.action.is_some(),
        };
        if (layout.traj3d && !c.traj3d) || (layout.mano && !c.intention) {
            return Err(Error::invalid("query carries a span the configuration disables"));
        }
        let enabled = [c.traj3d, c.intention, true];
        let present = [layout.traj3d, layout.mano, layout.action];
        let mut gap = false;
        for (e, p) in enabled.into_iter().zip(present) {
            if e && !p {
                gap = true;
            } else if e && p && gap {
                return Err(Error::invalid("query spans must form a prefix of the enabled spans"));
            }
        }
        Ok(layout)
    }

    /// Assemble the token sequence and run the trunk.
    pub fn forward(&self, tape: &mut Tape<'_, T>, q: &Query<'_>) -> Result<Forward> {
        let layout = self.layout_for(q)?;
        let mut mask = build_mask(&layout)?;
        if let (Some(valid), Some(span)) = (q.mano_valid, layout.span(SpanKind::Mano)) {
            if valid.len() != span.len {
                return Err(Error::invalid("mano validity length differs from horizon"));
            }
            let hidden: Vec<usize> = (0..span.len).filter(|&h| !valid[h]).map(|h| span.start + h).collect();
            mask.mask_keys(&hidden)?;
        }
        let blocks = embed::blocks(self, tape, &layout, q)?;
        let type_emb = tape.param(self.ids.type_emb);
        let pos_emb = tape.param(self.ids.pos_emb);
        let tokens = crate::layout::assemble(tape, &layout, &blocks, type_emb, pos_emb)?;
        let insulate = q.insulate.unwrap_or(self.config.insulate);
        let states = trunk_forward(self, tape, tokens, &layout, &mask, insulate)?;
        Ok(Forward { layout, states })
    }

    /// Final norm and head of the expert owning `span`, applied to that span's rows.
    pub fn head(&self, tape: &mut Tape<'_, T>, fwd: &Forward, span: SpanKind) -> Result<Var> {
        let e = self
            .ids
            .expert(span.owner())
            .ok_or_else(|| Error::invalid(format!("no expert for {span:?}")))?;
        let (Some((g, b)), Some((w, bias))) = (e.ln_f, e.head) else {
            return Err(Error::invalid(format!("{span:?} has no output head")));
        };
        let h = read_hidden(tape, fwd, span)?;
        let (g, b, w, bias) = (tape.param(g), tape.param(b), tape.param(w), tape.param(bias));
        let n = tape.layer_norm(h, g, b, LN_EPS)?;
        let y = tape.matmul(n, w)?;
        Ok(tape.add_row(y, bias)?)
    }
}
