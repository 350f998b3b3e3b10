//! The full model: social graph, pseudo-images, attention-aware adjacency,
//! graph convolution, transformer and Gaussian head, in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attn_adj::{AdjacencyAttention, AttentionMode, ScoreProjection};
use crate::diffarray::checkpoint::Checkpoint;
use crate::diffarray::{Array, ParamStore, Var};
use crate::error::{Error, Result};
use crate::gauss_head::{self, Bivariate, FieldVars, GaussianHead, NceEmbedder, NllTerm};
use crate::nn::Ctx;
use crate::sstg::{
    pseudo_images, AgentId, Normalization, Point, PseudoImage, SpatioTemporalGraph,
    TrajectoryWindow,
};
use crate::sstgcn::{Sstgcn, SstgcnConfig, OUT_CHANNELS};
use crate::txf::{DecodeMode, Memory, Transformer, TransformerConfig};

/// Contrastive-loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NceConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Radius of the zone around other agents that negatives are drawn from.
    pub collision_radius: f64,
    pub samples_per_frame: usize,
    /// Negatives placed evenly on a circle around each other agent.
    pub negatives_per_agent: usize,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            temperature: 0.1,
            collision_radius: 0.2,
            samples_per_frame: 4,
            negatives_per_agent: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Slots per pseudo-image.
    pub slots: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub attention_mode: AttentionMode,
    pub projection: ScoreProjection,
    pub attention_dk: usize,
    pub normalization: Normalization,
    pub sstgcn: SstgcnConfig,
    pub transformer: TransformerConfig,
    pub nce: NceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            t_obs: 8,
            t_pred: 12,
            attention_mode: AttentionMode::Off,
            projection: ScoreProjection::Learned,
            attention_dk: 8,
            normalization: Normalization::Symmetric,
            sstgcn: SstgcnConfig::default(),
            transformer: TransformerConfig::default(),
            nce: NceConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.t_obs == 0 || self.t_pred == 0 {
            return Err(Error::Config(
                "slots, t_obs and t_pred must be at least 1".into(),
            ));
        }
        if self.attention_dk == 0 {
            return Err(Error::Config("attention_dk must be at least 1".into()));
        }
        if !(self.nce.lambda >= 0.0)
            || !(self.nce.temperature > 0.0)
            || !(self.nce.collision_radius > 0.0)
        {
            return Err(Error::Config(
                "nce lambda >= 0, temperature > 0 and radius > 0 are required".into(),
            ));
        }
        if self.nce.samples_per_frame == 0 || self.nce.negatives_per_agent == 0 {
            return Err(Error::Config("nce sample counts must be at least 1".into()));
        }
        self.transformer.validate()
    }

    /// Observed timestamps `1..=T_obs` followed by future ones.
    pub fn observed_timestamps(&self) -> Vec<f64> {
        (1..=self.t_obs).map(|t| t as f64).collect()
    }

    pub fn future_timestamps(&self) -> Vec<f64> {
        (self.t_obs + 1..=self.t_obs + self.t_pred)
            .map(|t| t as f64)
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replaces the computed attention map (`[T, K, K]`) in every group; used
    /// to check that the attention path only acts through `attn ⊙ A`.
    pub attention_override: Option<Array>,
}

/// Decoder conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth previous displacements; needs the window's future.
    TeacherForced,
    /// Previous predicted means.
    Autoregressive,
}

/// Model outputs for one pseudo-image.
#[derive(Clone, Debug)]
pub struct GroupOutput {
    /// Track index (into the window) of every sequence in the batch.
    pub tracks: Vec<usize>,
    pub field: FieldVars,
    pub memory: Memory,
}

/// Per-window loss components. `nce` is `None` when fewer than two agents
/// have a complete future.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub nll: NllTerm,
    /// Mean InfoNCE over sample groups and the number of groups.
    pub nce: Option<(Var, usize)>,
}

/// Mean-displacement forecast for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentForecast {
    pub track: usize,
    pub id: AgentId,
    pub last: Point,
    pub steps: Vec<Bivariate>,
}

impl AgentForecast {
    pub fn mean_path(&self) -> Vec<Point> {
        gauss_head::mean_trajectory(&self.steps, self.last)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub agents: Vec<AgentForecast>,
    /// `[agent][sample][step]` positions.
    pub samples: Vec<Vec<Vec<Point>>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    attn: AdjacencyAttention,
    sstgcn: Sstgcn,
    txf: Transformer,
    head: GaussianHead,
    nce: NceEmbedder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let attn = AdjacencyAttention::new(
            &mut params,
            config.slots,
            config.attention_dk,
            config.attention_mode,
            config.projection,
            &mut rng,
        )?;
        let sstgcn = Sstgcn::new(&mut params, config.sstgcn.clone(), &mut rng)?;
        let txf = Transformer::new(
            &mut params,
            config.transformer.clone(),
            OUT_CHANNELS,
            &mut rng,
        )?;
        let dim = config.transformer.embed_dim;
        let head = GaussianHead::new(&mut params, dim, &mut rng)?;
        let nce = NceEmbedder::new(&mut params, dim, &mut rng)?;
        Ok(Self {
            config,
            params,
            attn,
            sstgcn,
            txf,
            head,
            nce,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_window(&self, window: &TrajectoryWindow) -> Result<()> {
        if window.t_obs() != self.config.t_obs {
            return Err(Error::invalid(format!(
                "window has {} observed frames, model expects {}",
                window.t_obs(),
                self.config.t_obs
            )));
        }
        if window.agent_count() == 0 {
            return Err(Error::invalid("window has no agents"));
        }
        Ok(())
    }

    pub fn pseudo_images(&self, window: &TrajectoryWindow) -> Result<Vec<PseudoImage>> {
        self.check_window(window)?;
        let graph = SpatioTemporalGraph::build(window, self.config.normalization)?;
        let images = pseudo_images(&graph, self.config.slots)?;
        if images.len() > 1 {
            log::warn!(
                "window at frame {}: {} agents exceed K = {}; {} groups predicted independently",
                window.frames[0],
                window.agent_count(),
                self.config.slots,
                images.len()
            );
        }
        Ok(images)
    }

    /// Forward over every pseudo-image of the window.
    pub fn forward(
        &self,
        ctx: &Ctx,
        window: &TrajectoryWindow,
        mode: Mode,
        opts: &ForwardOptions,
    ) -> Result<Vec<GroupOutput>> {
        let images = self.pseudo_images(window)?;
        let targets = match mode {
            Mode::TeacherForced => Some(future_displacements(window, self.config.t_pred)?),
            Mode::Autoregressive => None,
        };
        images
            .iter()
            .map(|img| self.forward_image(ctx, img, targets.as_ref().map(|(d, _)| d), opts))
            .collect()
    }

    /// Forward over one pseudo-image. `targets[track][step]` supplies the
    /// teacher-forcing displacements; `None` decodes autoregressively.
    pub fn forward_image(
        &self,
        ctx: &Ctx,
        img: &PseudoImage,
        targets: Option<&Vec<Vec<Option<Point>>>>,
        opts: &ForwardOptions,
    ) -> Result<GroupOutput> {
        let t = ctx.tape;
        let filled = img.filled_slots();
        let tracks: Vec<usize> = filled
            .iter()
            .map(|&k| img.slot_tracks[k].expect("filled slot"))
            .collect();
        let t_obs = img.frames();
        let v = t.constant(img.nodes.clone());
        let a = t.constant(img.adjacency.clone());
        let a = match &opts.attention_override {
            Some(attn) => self.attn.apply_with(ctx, a, t.constant(attn.clone()))?,
            None => self.attn.apply(ctx, a)?,
        };
        let x = self.sstgcn.forward(ctx, v, a)?;
        let seq = t.index_select(t.permute(x, &[1, 0, 2])?, 0, &filled)?;
        let valid: Vec<bool> = filled
            .iter()
            .flat_map(|&k| (0..t_obs).map(move |ti| img.is_valid(ti, k)))
            .collect();
        let memory = self
            .txf
            .encode(ctx, seq, &self.config.observed_timestamps(), &valid)?;
        let future_ts = self.config.future_timestamps();
        let hidden = match targets {
            Some(disp) => {
                let b = tracks.len();
                let t_pred = self.config.t_pred;
                let mut arr = Array::zeros(&[b, t_pred, 2]);
                for (bi, &tr) in tracks.iter().enumerate() {
                    for j in 0..t_pred {
                        if let Some(d) = disp[tr][j] {
                            arr.set(&[bi, j, 0], d[0]);
                            arr.set(&[bi, j, 1], d[1]);
                        }
                    }
                }
                self.txf
                    .decode(ctx, &memory, &future_ts, DecodeMode::TeacherForced(&arr))?
            }
            None => {
                let readout = |c: &Ctx, h: Var| -> Result<Array> {
                    let f = self.head.project(c, h)?;
                    Ok((*c.tape.value(f.mu)).clone())
                };
                self.txf.decode(
                    ctx,
                    &memory,
                    &future_ts,
                    DecodeMode::Autoregressive(&readout),
                )?
            }
        };
        let field = self.head.project(ctx, hidden)?;
        Ok(GroupOutput {
            tracks,
            field,
            memory,
        })
    }

    /// Teacher-forced loss terms for one window.
    pub fn loss(&self, ctx: &Ctx, window: &TrajectoryWindow) -> Result<LossTerms> {
        let (disp, _) = future_displacements(window, self.config.t_pred)?;
        let groups = self.forward(ctx, window, Mode::TeacherForced, &ForwardOptions::default())?;
        let t = ctx.tape;
        let t_pred = self.config.t_pred;
        let mut sums = Vec::new();
        let mut count = 0;
        for g in &groups {
            let b = g.tracks.len();
            let mut arr = Array::zeros(&[b, t_pred, 2]);
            let mut mask = vec![false; b * t_pred];
            for (bi, &tr) in g.tracks.iter().enumerate() {
                for j in 0..t_pred {
                    if let Some(d) = disp[tr][j] {
                        arr.set(&[bi, j, 0], d[0]);
                        arr.set(&[bi, j, 1], d[1]);
                        mask[bi * t_pred + j] = true;
                    }
                }
            }
            if mask.iter().any(|&m| m) {
                let term = gauss_head::nll_loss(ctx, &g.field, &arr, &mask)?;
                sums.push(term.sum);
                count += term.count;
            }
        }
        if count == 0 {
            return Err(Error::invalid("window has no valid future step"));
        }
        let nll_sum = sums[1..]
            .iter()
            .try_fold(sums[0], |acc, &s| t.add(acc, s))?;
        let nce = if self.config.nce.lambda > 0.0 {
            self.nce_term(ctx, window, &groups)?
        } else {
            None
        };
        Ok(LossTerms {
            nll: NllTerm {
                sum: nll_sum,
                count,
            },
            nce,
        })
    }

    /// Contrastive term: for every agent with a complete future, the history
    /// embedding is contrasted against its own interpolated future positions
    /// (positives) and points inside other agents' collision zones at the same
    /// instants (negatives). Positions are relative to the agent's last
    /// observed position.
    fn nce_term(
        &self,
        ctx: &Ctx,
        window: &TrajectoryWindow,
        groups: &[GroupOutput],
    ) -> Result<Option<(Var, usize)>> {
        let t = ctx.tape;
        let cfg = &self.config.nce;
        let t_pred = self.config.t_pred;
        let complete: Vec<usize> = (0..window.agent_count())
            .filter(|&i| {
                let tr = &window.tracks[i];
                tr.last_observed().is_some()
                    && tr.future.len() == t_pred
                    && tr.future.iter().all(Option::is_some)
            })
            .collect();
        if complete.len() < 2 {
            return Ok(None);
        }
        // Masked mean of encoder memory per track, stacked over groups.
        let mut pooled_parts = Vec::new();
        let mut order = Vec::new();
        for g in groups {
            let s = t.shape(g.memory.hidden);
            let (b, t_obs) = (s[0], s[1]);
            let inv: Vec<f64> = (0..b)
                .map(|bi| {
                    1.0 / g.memory.valid[bi * t_obs..][..t_obs]
                        .iter()
                        .filter(|&&v| v)
                        .count() as f64
                })
                .collect();
            let summed = t.sum_axis(g.memory.hidden, 1, false)?;
            pooled_parts.push(t.mul(summed, t.constant(Array::new(vec![b, 1], inv)?))?);
            order.extend_from_slice(&g.tracks);
        }
        let pooled = if pooled_parts.len() == 1 {
            pooled_parts[0]
        } else {
            t.concat(&pooled_parts, 0)?
        };
        let rows: Vec<usize> = complete
            .iter()
            .map(|c| {
                order
                    .iter()
                    .position(|o| o == c)
                    .expect("every track is in a group")
            })
            .collect();
        let query = self.nce.history(ctx, t.index_select(pooled, 0, &rows)?)?;

        let spf = cfg.samples_per_frame;
        let s_len = t_pred * spf;
        let m_len = 1 + cfg.negatives_per_agent * (complete.len() - 1);
        let path = |i: usize, s: usize| -> Point {
            let tr = &window.tracks[i];
            let (j, f) = (s / spf, (s % spf + 1) as f64 / spf as f64);
            let from = if j == 0 {
                tr.last_observed()
            } else {
                tr.future[j - 1]
            }
            .expect("complete track");
            let to = tr.future[j].expect("complete track");
            [
                from[0] + f * (to[0] - from[0]),
                from[1] + f * (to[1] - from[1]),
            ]
        };
        let r = 0.5 * cfg.collision_radius;
        let mut pts = Vec::with_capacity(complete.len() * s_len * m_len * 2);
        for &qi in &complete {
            let origin = window.tracks[qi].last_observed().expect("complete track");
            for s in 0..s_len {
                let p = path(qi, s);
                pts.extend([p[0] - origin[0], p[1] - origin[1]]);
                for &oi in complete.iter().filter(|&&o| o != qi) {
                    let c = path(oi, s);
                    for n in 0..cfg.negatives_per_agent {
                        let theta =
                            std::f64::consts::TAU * n as f64 / cfg.negatives_per_agent as f64;
                        pts.extend([
                            c[0] + r * theta.cos() - origin[0],
                            c[1] + r * theta.sin() - origin[1],
                        ]);
                    }
                }
            }
        }
        let points = t.constant(Array::new(vec![complete.len(), s_len, m_len, 2], pts)?);
        let keys = self.nce.points(ctx, points)?;
        let loss = gauss_head::nce_loss(ctx, query, keys, cfg.temperature)?;
        Ok(Some((loss, complete.len() * s_len)))
    }

    /// Autoregressive forecasts for every agent present at the last observed
    /// frame, in track order.
    pub fn predict(&self, window: &TrajectoryWindow) -> Result<Vec<AgentForecast>> {
        let tape = crate::diffarray::Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let groups = self.forward(
            &ctx,
            window,
            Mode::Autoregressive,
            &ForwardOptions::default(),
        )?;
        let mut out = Vec::new();
        for g in &groups {
            let field = g.field.to_field(&ctx)?;
            for (bi, &tr) in g.tracks.iter().enumerate() {
                let track = &window.tracks[tr];
                if let Some(last) = track.last_observed() {
                    out.push(AgentForecast {
                        track: tr,
                        id: track.id,
                        last,
                        steps: field[bi].clone(),
                    });
                }
            }
        }
        out.sort_by_key(|a| a.track);
        Ok(out)
    }

    pub fn predict_multimodal(
        &self,
        window: &TrajectoryWindow,
        n: usize,
        seed: u64,
    ) -> Result<Prediction> {
        let agents = self.predict(window)?;
        let fields: Vec<Vec<Bivariate>> = agents.iter().map(|a| a.steps.clone()).collect();
        let last: Vec<Point> = agents.iter().map(|a| a.last).collect();
        let samples = gauss_head::sample_trajectories(&fields, &last, n, seed)?;
        Ok(Prediction { agents, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        Checkpoint::from_store(&self.params).write_to(BufWriter::new(f))
    }

    /// Loads parameters saved from a model with the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path)?;
        Checkpoint::read_from(BufReader::new(f))?.apply_to(&mut self.params)
    }
}

/// Per-track future displacements `[track][step]` (step 0 is measured from
/// the last observed position) and whether any step is valid.
pub fn future_displacements(
    window: &TrajectoryWindow,
    t_pred: usize,
) -> Result<(Vec<Vec<Option<Point>>>, bool)> {
    if !window.has_future() || window.t_pred != t_pred {
        return Err(Error::invalid(format!(
            "teacher forcing needs {t_pred} future frames of ground truth, window has {}",
            window.t_pred
        )));
    }
    let mut any = false;
    let disp = window
        .tracks
        .iter()
        .map(|tr| {
            (0..t_pred)
                .map(|j| {
                    let from = if j == 0 {
                        tr.last_observed()
                    } else {
                        tr.future[j - 1]
                    };
                    let d = from
                        .zip(tr.future[j])
                        .map(|(a, b)| [b[0] - a[0], b[1] - a[1]]);
                    any |= d.is_some();
                    d
                })
                .collect()
        })
        .collect();
    Ok((disp, any))
}

/// Seed for item `index` of a run seeded with `base` (SplitMix64 finaliser),
/// so parallel per-window sampling stays reproducible.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
