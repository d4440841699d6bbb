//! The two-branch network: a convolutional backbone producing the feature
//! map, a residual global branch, and a recurrent local branch that encodes
//! `T` cropped glimpses into a GRU state. Both feature vectors are fused and
//! classified into `[bona_fide, attack]`.

pub mod config;
pub mod crop;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Label, RgbImage};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::policy::{
    compute_reward, cumulative_reward, initial_location, random_selector, reinforce_loss, Action, PatchScorer,
    PolicyHead, SampleMode, Selector, Trajectory, TrajectoryStep,
};
use crate::tensor::{softmax, Tensor};

pub use config::{Fusion, ModelConfig, BACKBONE_STRIDE};
pub use crop::{crop_window, window_center, Window};
use layers::{Conv2d, GruCell, Linear, Stage};

/// Which feature paths feed the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    GlobalOnly,
    LocalOnly,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::GlobalOnly => "global_only",
            Ablation::LocalOnly => "local_only",
        }
    }

    pub fn uses_local(self) -> bool {
        self != Ablation::GlobalOnly
    }

    pub fn uses_global(self) -> bool {
        self != Ablation::LocalOnly
    }
}

/// Stem convolution, 2×2 max pool and two strided residual stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stage_a: Stage,
    pub stage_b: Stage,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let ch = &cfg.backbone_channels;
        let k = cfg.stem_kernel;
        Self {
            stem: Conv2d::new(store, "backbone.stem", ch[0], ch[1], k, 1, k / 2, rng),
            stage_a: Stage::new(store, "backbone.stage_a", ch[1], ch[2], 2, cfg.blocks_per_stage, rng),
            stage_b: Stage::new(store, "backbone.stage_b", ch[2], ch[3], 2, cfg.blocks_per_stage, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Var {
        let x = self.stem.forward(tape, store, image);
        let x = tape.relu(x);
        let x = tape.max_pool2(x);
        let x = self.stage_a.forward(tape, store, x);
        self.stage_b.forward(tape, store, x)
    }

    pub fn macs(&self, input: usize) -> u64 {
        let stem = self.stem.macs(input);
        let pooled = self.stem.out_side(input) / 2;
        let a = self.stage_a.macs(pooled);
        let side_a = self.stage_a.out_side(pooled);
        stem + a + self.stage_b.macs(side_a)
    }
}

/// Residual stages at feature-map resolution followed by global average pooling.
#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub stages: Vec<Stage>,
}

impl GlobalBranch {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut cin = cfg.feature_channels();
        let stages = cfg
            .branch1_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let s = Stage::new(store, &format!("{name}.stage{i}"), cin, cout, 1, cfg.blocks_per_stage, rng);
                cin = cout;
                s
            })
            .collect();
        Self { stages }
    }

    /// The pre-pool activation map (`D×H_f×W_f`).
    pub fn activation(&self, tape: &mut Tape, store: &ParamStore, fmap: Var) -> Var {
        self.stages.iter().fold(fmap, |x, s| s.forward(tape, store, x))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fmap: Var) -> Var {
        let a = self.activation(tape, store, fmap);
        tape.gap(a)
    }

    pub fn macs(&self, side: usize) -> u64 {
        self.stages.iter().map(|s| s.macs(side)).sum()
    }
}

/// Encodes a cropped patch and its location into a glimpse feature:
/// `f = relu(L24 φ_p + L25 φ_l)`, `φ_p = relu(L22 GAP(relu(L21 ∗ patch)))`,
/// `φ_l = relu(L23 loc)`.
#[derive(Clone, Debug)]
pub struct GlimpseEncoder {
    pub patch_conv: Conv2d,
    pub patch_fc: Linear,
    pub loc_fc: Linear,
    pub patch_out: Linear,
    pub loc_out: Linear,
}

impl GlimpseEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.feature_dim;
        let g = cfg.glimpse_channels;
        Self {
            patch_conv: Conv2d::new(store, "glimpse.l21", cfg.feature_channels(), g, cfg.glimpse_kernel(), 1, 0, rng),
            patch_fc: Linear::new(store, "glimpse.l22", g, d, rng),
            loc_fc: Linear::new(store, "glimpse.l23", 2, d, rng),
            patch_out: Linear::new(store, "glimpse.l24", d, d, rng),
            loc_out: Linear::new(store, "glimpse.l25", d, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patch: Var, loc: Var) -> Var {
        let c = self.patch_conv.forward(tape, store, patch);
        let c = tape.relu(c);
        let pooled = tape.gap(c);
        let phi_p = self.patch_fc.forward(tape, store, pooled);
        let phi_p = tape.relu(phi_p);
        let phi_l = self.loc_fc.forward(tape, store, loc);
        let phi_l = tape.relu(phi_l);
        let a = self.patch_out.forward(tape, store, phi_p);
        let b = self.loc_out.forward(tape, store, phi_l);
        let s = tape.add(a, b);
        tape.relu(s)
    }

    pub fn macs(&self, p: usize) -> u64 {
        self.patch_conv.macs(p) + self.patch_fc.macs() + self.loc_fc.macs() + self.patch_out.macs() + self.loc_out.macs()
    }
}

/// Fusion of a global and a local vector with pure values.
///
/// `weights` is only used by [`Fusion::WeightedAverage`] and must sum to one.
pub fn fuse_values(global: &[f64], local: &[f64], method: Fusion, weights: [f64; 2]) -> Result<Vec<f64>> {
    match method {
        Fusion::Concat => Ok(global.iter().chain(local).copied().collect()),
        Fusion::Average | Fusion::WeightedAverage => {
            if global.len() != local.len() {
                return Err(Error::Shape(format!(
                    "cannot average vectors of length {} and {}",
                    global.len(),
                    local.len()
                )));
            }
            let (a, b) = if method == Fusion::Average { (0.5, 0.5) } else { (weights[0], weights[1]) };
            Ok(global.iter().zip(local).map(|(g, l)| a * g + b * l).collect())
        }
    }
}

/// Record of one episode; see [`Network::forward_episode`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutput {
    pub global_feature: Vec<f64>,
    pub trajectory: Trajectory,
    pub windows: Vec<Window>,
    pub final_hidden: Vec<f64>,
    pub logits: [f64; 2],
    /// `[P(bona_fide), P(attack)]`.
    pub probs: [f64; 2],
    /// `c_t = P(bona_fide)` from classifying `fuse(f_g, h_t)` after each step.
    pub step_confidences: Vec<f64>,
    /// Per-step delayed rewards; empty when no label was supplied.
    pub rewards: Vec<f64>,
    /// `R = Σ r_t`, present when a label was supplied.
    pub reward: Option<f64>,
}

impl EpisodeOutput {
    pub fn score(&self) -> f64 {
        self.probs[Label::BonaFide.index()]
    }
}

/// Tape handles and values produced by [`Network::episode_on_tape`].
#[derive(Debug)]
pub struct EpisodeTrace {
    pub global: Option<Var>,
    pub hidden: Option<Var>,
    pub logits: Var,
    /// Log-densities of policy-drawn actions; empty unless the policy sampled.
    pub policy_log_probs: Vec<Var>,
    pub trajectory: Trajectory,
    pub windows: Vec<Window>,
    pub step_probs: Vec<[f64; 2]>,
}

/// Loss pieces for one training sample.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub rl_loss: f64,
    pub total: f64,
    pub reward: f64,
    pub rewards: Vec<f64>,
    pub probs: [f64; 2],
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub selector: Selector,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub branch1: GlobalBranch,
    pub glimpse: GlimpseEncoder,
    pub gru: GruCell,
    pub policy: PolicyHead,
    pub fusion_logits: Option<ParamId>,
    pub classifier: Linear,
    pub scorer: Option<PatchScorer>,
}

impl Network {
    pub fn new(config: ModelConfig, ablation: Ablation, selector: Selector, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, rng);
        let branch1 = GlobalBranch::new(&mut store, "branch1", &config, rng);
        let glimpse = GlimpseEncoder::new(&mut store, &config, rng);
        let d = config.feature_dim;
        let gru = GruCell::new(&mut store, "gru", d, d, rng);
        let policy = PolicyHead::new(&mut store, "policy", d, config.policy_hidden, config.policy_sigma, rng);
        let fusion_logits = (config.fusion == Fusion::WeightedAverage)
            .then(|| store.register("fusion.logits", Tensor::zeros(&[2])));
        let fused = config.fused_dim();
        let classifier = Linear::uniform(
            &mut store,
            "classifier",
            fused,
            2,
            1.0 / (fused as f64).sqrt(),
            true,
            rng,
        );
        Ok(Self {
            config,
            ablation,
            selector,
            store,
            backbone,
            branch1,
            glimpse,
            gru,
            policy,
            fusion_logits,
            classifier,
            scorer: None,
        })
    }

    pub fn input_tensor(&self, image: &RgbImage) -> Result<Tensor> {
        let s = self.config.input_size;
        if image.height != s || image.width != s {
            return Err(Error::Shape(format!(
                "image is {}×{}, model expects {s}×{s}",
                image.height, image.width
            )));
        }
        // Pixels in [0, 1] are fed to the network centred on [-1, 1].
        Ok(image.to_chw().map(|v| 2.0 * v - 1.0))
    }

    /// Feature map `F` for an image.
    pub fn backbone_embed(&self, image: &RgbImage) -> Result<Tensor> {
        let x = self.input_tensor(image)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = self.backbone.forward(&mut tape, &self.store, xv);
        Ok(tape.value(f).clone())
    }

    fn check_fmap(&self, fmap: &Tensor) -> Result<()> {
        let (c, h, w) = fmap.chw()?;
        let side = self.config.feature_side();
        if c != self.config.feature_channels() || h != side || w != side {
            return Err(Error::Shape(format!(
                "feature map {c}×{h}×{w} does not match {}×{side}×{side}",
                self.config.feature_channels()
            )));
        }
        Ok(())
    }

    /// Global feature `f_g` for a feature map.
    pub fn global_branch(&self, fmap: &Tensor) -> Result<Vec<f64>> {
        self.check_fmap(fmap)?;
        let mut tape = Tape::new();
        let f = tape.constant(fmap.clone());
        let g = self.branch1.forward(&mut tape, &self.store, f);
        Ok(tape.value(g).data().to_vec())
    }

    /// Pre-pool global-branch activations (`D×H_f×W_f`).
    pub fn global_activation(&self, fmap: &Tensor) -> Result<Tensor> {
        self.check_fmap(fmap)?;
        let mut tape = Tape::new();
        let f = tape.constant(fmap.clone());
        let a = self.branch1.activation(&mut tape, &self.store, f);
        Ok(tape.value(a).clone())
    }

    pub fn crop_patch(&self, fmap: &Tensor, loc: Action) -> Result<Tensor> {
        crop_patch(fmap, loc, self.config.patch_size)
    }

    pub fn glimpse_encode(&self, patch: &Tensor, loc: Action) -> Result<Vec<f64>> {
        let p = self.config.patch_size;
        if patch.shape() != [self.config.feature_channels(), p, p] {
            return Err(Error::Shape(format!("patch shape {:?}", patch.shape())));
        }
        let mut tape = Tape::new();
        let pv = tape.constant(patch.clone());
        let lv = tape.constant(Tensor::vector(vec![loc.x, loc.y]));
        let f = self.glimpse.forward(&mut tape, &self.store, pv, lv);
        Ok(tape.value(f).data().to_vec())
    }

    pub fn gru_step(&self, glimpse: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.feature_dim;
        if glimpse.len() != d || hidden.len() != d {
            return Err(Error::Shape(format!(
                "gru step expects two vectors of length {d}, got {} and {}",
                glimpse.len(),
                hidden.len()
            )));
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::vector(glimpse.to_vec()));
        let h = tape.constant(Tensor::vector(hidden.to_vec()));
        let out = self.gru.step(&mut tape, &self.store, f, h);
        Ok(tape.value(out.hidden).data().to_vec())
    }

    /// Current convex fusion weights (softmax of the two learnable logits).
    pub fn fusion_weights(&self) -> [f64; 2] {
        match self.fusion_logits {
            Some(id) => {
                let w = softmax(self.store.get(id).data());
                [w[0], w[1]]
            }
            None => [0.5, 0.5],
        }
    }

    pub fn fuse(&self, global: &[f64], local: &[f64]) -> Result<Vec<f64>> {
        fuse_values(global, local, self.config.fusion, self.fusion_weights())
    }

    /// Logits and probabilities for a fused vector.
    pub fn classify(&self, fused: &[f64]) -> Result<([f64; 2], [f64; 2])> {
        if fused.len() != self.config.fused_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} inputs, got {}",
                self.config.fused_dim(),
                fused.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(fused.to_vec()));
        let l = self.classifier.forward(&mut tape, &self.store, x);
        let logits = tape.value(l).data();
        let p = softmax(logits);
        Ok(([logits[0], logits[1]], [p[0], p[1]]))
    }

    fn fuse_var(&self, tape: &mut Tape, global: Var, local: Var) -> Var {
        match self.config.fusion {
            Fusion::Concat => tape.concat(global, local),
            Fusion::Average => {
                let s = tape.add(global, local);
                tape.scale(s, 0.5)
            }
            Fusion::WeightedAverage => {
                let logits = tape.param(&self.store, self.fusion_logits.expect("weighted fusion has logits"));
                let w = tape.softmax(logits);
                let w1 = tape.pick(w, 0);
                let w2 = tape.pick(w, 1);
                let a = tape.scale_by(global, w1);
                let b = tape.scale_by(local, w2);
                tape.add(a, b)
            }
        }
    }

    fn head_var(&self, tape: &mut Tape, global: Option<Var>, local: Option<Var>) -> Var {
        let zeros = |tape: &mut Tape| tape.constant(Tensor::zeros(&[self.config.feature_dim]));
        let g = global.unwrap_or_else(|| zeros(tape));
        let l = local.unwrap_or_else(|| zeros(tape));
        let fused = self.fuse_var(tape, g, l);
        self.classifier.forward(tape, &self.store, fused)
    }

    fn probs_of(tape: &Tape, logits: Var) -> [f64; 2] {
        let p = softmax(tape.value(logits).data());
        [p[0], p[1]]
    }

    /// Feature map on the tape: either recomputed through the backbone or
    /// supplied as a cached constant.
    pub fn fmap_var(&self, tape: &mut Tape, input: FeatureInput<'_>) -> Result<Var> {
        match input {
            FeatureInput::Image(img) => {
                let x = self.input_tensor(img)?;
                let xv = tape.constant(x);
                Ok(self.backbone.forward(tape, &self.store, xv))
            }
            FeatureInput::Cached(f) => {
                self.check_fmap(f)?;
                Ok(tape.constant(f.clone()))
            }
        }
    }

    /// Records one episode on `tape`.
    ///
    /// Locations come from `fixed` when given, otherwise from the configured
    /// selector. Under the learned policy the first location is drawn from
    /// the centred prior and each later one from `π(· | h_t)` with `h_t`
    /// detached, so cross-entropy gradients never pass through sampling.
    pub fn episode_on_tape(
        &self,
        tape: &mut Tape,
        fmap: Var,
        mode: SampleMode,
        fixed: Option<&[Action]>,
        rng: &mut impl Rng,
    ) -> Result<EpisodeTrace> {
        let global = self
            .ablation
            .uses_global()
            .then(|| self.branch1.forward(tape, &self.store, fmap));
        if !self.ablation.uses_local() {
            let logits = self.head_var(tape, global, None);
            return Ok(EpisodeTrace {
                global,
                hidden: None,
                logits,
                policy_log_probs: Vec::new(),
                trajectory: Vec::new(),
                windows: Vec::new(),
                step_probs: Vec::new(),
            });
        }

        let steps = self.config.steps;
        let p = self.config.patch_size;
        let side = self.config.feature_side();
        let precomputed: Option<Vec<Action>> = match (fixed, self.selector) {
            (Some(locs), _) => {
                if locs.len() < steps {
                    return Err(Error::Contract(format!("{} fixed locations for {steps} steps", locs.len())));
                }
                Some(locs[..steps].to_vec())
            }
            (None, Selector::MaxScores) => {
                let scorer = self
                    .scorer
                    .as_ref()
                    .ok_or_else(|| Error::Contract("max-scores selector without a patch scorer".into()))?;
                let fval = tape.value(fmap).clone();
                Some(crate::policy::max_scores_selector(&fval, scorer, p, steps)?)
            }
            (None, _) => None,
        };

        let mut hidden = match global {
            Some(g) => g,
            None => tape.constant(Tensor::zeros(&[self.config.feature_dim])),
        };
        let mut trajectory = Vec::with_capacity(steps);
        let mut windows = Vec::with_capacity(steps);
        let mut step_probs = Vec::with_capacity(steps);
        let mut policy_log_probs = Vec::new();

        let (mut loc, mut log_prob) = match (&precomputed, self.selector) {
            (Some(locs), _) => (locs[0], 0.0),
            (None, Selector::Random) => (random_selector(rng), 0.0),
            (None, _) => initial_location(self.config.initial_location_sigma, mode, rng),
        };
        for t in 1..=steps {
            let state = tape.value(hidden).data().to_vec();
            let window = crop_window(loc, side, p)?;
            let patch = tape.crop(fmap, window.top, window.left, p);
            let loc_var = tape.constant(Tensor::vector(vec![loc.x, loc.y]));
            let f_t = self.glimpse.forward(tape, &self.store, patch, loc_var);
            hidden = self.gru.step(tape, &self.store, f_t, hidden).hidden;
            trajectory.push(TrajectoryStep {
                state,
                action: loc,
                log_prob,
            });
            windows.push(window);
            let logits_t = self.head_var(tape, global, Some(hidden));
            step_probs.push(Self::probs_of(tape, logits_t));

            if t == steps {
                break;
            }
            (loc, log_prob) = match (&precomputed, self.selector) {
                (Some(locs), _) => (locs[t], 0.0),
                (None, Selector::Random) => (random_selector(rng), 0.0),
                (None, _) => {
                    let state = tape.detach(hidden);
                    let mean = self.policy.mean_var(tape, &self.store, state);
                    let mv = tape.value(mean).data();
                    let (a, lp) = crate::policy::sample_location(
                        Action { x: mv[0], y: mv[1] },
                        self.policy.sigma,
                        mode,
                        rng,
                    )?;
                    if mode == SampleMode::TrainStochastic {
                        policy_log_probs.push(tape.gauss_log_prob(mean, &a.as_array(), self.policy.sigma));
                    }
                    (a, lp)
                }
            };
        }
        // The last step's classification is the episode's output.
        let logits = self.head_var(tape, global, Some(hidden));
        Ok(EpisodeTrace {
            global,
            hidden: Some(hidden),
            logits,
            policy_log_probs,
            trajectory,
            windows,
            step_probs,
        })
    }

    /// Runs one episode on an image and collects its values.
    pub fn forward_episode(
        &self,
        image: &RgbImage,
        mode: SampleMode,
        label: Option<Label>,
        rng: &mut impl Rng,
    ) -> Result<EpisodeOutput> {
        self.run_episode(FeatureInput::Image(image), mode, label, None, rng)
    }

    pub fn run_episode(
        &self,
        input: FeatureInput<'_>,
        mode: SampleMode,
        label: Option<Label>,
        fixed: Option<&[Action]>,
        rng: &mut impl Rng,
    ) -> Result<EpisodeOutput> {
        let mut tape = Tape::new();
        let fmap = self.fmap_var(&mut tape, input)?;
        let trace = self.episode_on_tape(&mut tape, fmap, mode, fixed, rng)?;
        let l = tape.value(trace.logits).data();
        let logits = [l[0], l[1]];
        let probs = Self::probs_of(&tape, trace.logits);
        let (rewards, reward) = match label {
            Some(y) => {
                let r = self.step_rewards(&trace, probs, y)?;
                let total = cumulative_reward(&r);
                (r, Some(total))
            }
            None => (Vec::new(), None),
        };
        let vec_of = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        Ok(EpisodeOutput {
            global_feature: vec_of(trace.global),
            final_hidden: vec_of(trace.hidden),
            step_confidences: trace.step_probs.iter().map(|p| p[Label::BonaFide.index()]).collect(),
            trajectory: trace.trajectory,
            windows: trace.windows,
            logits,
            probs,
            rewards,
            reward,
        })
    }

    fn step_rewards(&self, trace: &EpisodeTrace, final_probs: [f64; 2], label: Label) -> Result<Vec<f64>> {
        let steps = trace.step_probs.len();
        if steps == 0 {
            return Ok(vec![compute_reward(&final_probs, label.index(), 1, 1)?]);
        }
        let mut rewards = Vec::with_capacity(steps);
        for (i, probs) in trace.step_probs.iter().enumerate() {
            let probs = if i + 1 == steps { &final_probs } else { probs };
            let r = compute_reward(probs, label.index(), i + 1, steps)?;
            debug_assert!(i + 1 == steps || r == 0.0, "reward before the final step");
            rewards.push(r);
        }
        Ok(rewards)
    }

    /// Records the joint loss `CE + λ · REINFORCE` for one sample and
    /// back-propagates it into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_loss(
        &self,
        input: FeatureInput<'_>,
        label: Label,
        rl_weight: f64,
        baseline: f64,
        fixed: Option<&[Action]>,
        rng: &mut impl Rng,
        grads: &mut Gradients,
    ) -> Result<LossParts> {
        let mut tape = Tape::new();
        let fmap = self.fmap_var(&mut tape, input)?;
        let trace = self.episode_on_tape(&mut tape, fmap, SampleMode::TrainStochastic, fixed, rng)?;
        let log_probs = tape.log_softmax(trace.logits);
        let picked = tape.pick(log_probs, label.index());
        let ce = tape.scale(picked, -1.0);
        let probs = Self::probs_of(&tape, trace.logits);
        let rewards = self.step_rewards(&trace, probs, label)?;
        let reward = cumulative_reward(&rewards);

        let ce_value = tape.value(ce).item();
        let (total, rl_value) = if rl_weight != 0.0 && !trace.policy_log_probs.is_empty() {
            let rl = reinforce_loss(&mut tape, &trace.policy_log_probs, reward - baseline)?;
            let rl_value = tape.value(rl).item();
            let weighted = tape.scale(rl, rl_weight);
            (tape.add(ce, weighted), rl_value)
        } else {
            (ce, 0.0)
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total_value}")));
        }
        tape.backward(total, grads);
        Ok(LossParts {
            cross_entropy: ce_value,
            rl_loss: rl_value,
            total: total_value,
            reward,
            rewards,
            probs,
            trajectory: trace.trajectory,
        })
    }
}

/// Where an episode's feature map comes from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureInput<'a> {
    Image(&'a RgbImage),
    Cached(&'a Tensor),
}

/// `C×p×p` window of `fmap` for a normalized location.
pub fn crop_patch(fmap: &Tensor, loc: Action, p: usize) -> Result<Tensor> {
    let (c, h, w) = fmap.chw()?;
    if h != w {
        return Err(Error::Shape(format!("feature map must be square, got {h}×{w}")));
    }
    let win = crop_window(loc, h, p)?;
    let data = fmap.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for y in win.rows() {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&data[row + win.left..row + win.left + p]);
        }
    }
    Tensor::new(vec![c, p, p], out)
}

#[cfg(test)]
mod tests;
