//! Optimization schemes: backbone pretraining, the frozen-backbone joint
//! stage, the one-stage baseline, the patch scorer behind the max-scores
//! selector, and deterministic scoring.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::StageTag;
use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::metrics::ScoreRecord;
use crate::model::{crop_patch, Ablation, FeatureInput, LossParts, ModelConfig, Network};
use crate::params::{Adam, Gradients};
use crate::policy::{random_selector, Action, PatchScorer, SampleMode, Selector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Pretrain and freeze the backbone, then train everything else from scratch.
    #[default]
    TwoStage,
    /// Train the whole network jointly from random initialization.
    EndToEnd,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TwoStage => "two_stage",
            Scheme::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Epochs of the one-stage scheme; defaults to the two stages combined.
    pub epochs_end_to_end: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight λ of the policy-gradient surrogate in the joint loss.
    pub rl_loss_weight: f64,
    pub seed: u64,
    pub selector: Selector,
    pub ablation: Ablation,
    pub scheme: Scheme,
    /// Subtract a running mean of past returns from `R` in the surrogate.
    pub reward_baseline: bool,
    pub baseline_momentum: f64,
    pub scorer_epochs: usize,
    pub scorer_width: usize,
    pub scorer_patches_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 20,
            epochs_stage2: 30,
            epochs_end_to_end: None,
            batch_size: 16,
            learning_rate: 1e-3,
            rl_loss_weight: 1.0,
            seed: 0,
            selector: Selector::Drl,
            ablation: Ablation::Full,
            scheme: Scheme::TwoStage,
            reward_baseline: false,
            baseline_momentum: 0.9,
            scorer_epochs: 5,
            scorer_width: 16,
            scorer_patches_per_image: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("train.learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.rl_loss_weight >= 0.0 && self.rl_loss_weight.is_finite()) {
            return fail(format!("train.rl_loss_weight {} must be non-negative", self.rl_loss_weight));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return fail("train.baseline_momentum must lie in [0, 1)".into());
        }
        if self.scorer_width == 0 || self.scorer_patches_per_image == 0 {
            return fail("train.scorer_width and train.scorer_patches_per_image must be positive".into());
        }
        if self.scheme == Scheme::EndToEnd && self.selector == Selector::MaxScores {
            return fail("the max-scores selector needs a pretrained backbone (scheme two_stage)".into());
        }
        Ok(())
    }

    pub fn end_to_end_epochs(&self) -> usize {
        self.epochs_end_to_end.unwrap_or(self.epochs_stage1 + self.epochs_stage2)
    }
}

/// Independent generator for one purpose of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT_STAGE1: u64 = 1;
const STREAM_INIT_STAGE2: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_EPISODES: u64 = 4;
const STREAM_SCORER: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_INIT_END_TO_END: u64 = 7;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub ce_loss: f64,
    pub rl_loss: f64,
    pub total_loss: f64,
    pub reward_mean: f64,
    pub train_accuracy: f64,
}

/// Hooks called during training; the defaults do nothing.
pub trait TrainObserver {
    fn on_sample(&mut self, _stage: StageTag, _sample: &Sample, _parts: &LossParts) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Writes every epoch record as one JSON line.
pub struct JsonLog<W: Write> {
    pub out: W,
}

impl<W: Write> TrainObserver for JsonLog<W> {
    fn on_epoch(&mut self, log: &EpochLog) -> Result<()> {
        serde_json::to_writer(&mut self.out, log)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        Ok(())
    }
}

/// Forwards to two observers in turn.
pub struct Both<'a, 'b>(pub &'a mut dyn TrainObserver, pub &'b mut dyn TrainObserver);

impl TrainObserver for Both<'_, '_> {
    fn on_sample(&mut self, stage: StageTag, sample: &Sample, parts: &LossParts) -> Result<()> {
        self.0.on_sample(stage, sample, parts)?;
        self.1.on_sample(stage, sample, parts)
    }

    fn on_epoch(&mut self, log: &EpochLog) -> Result<()> {
        self.0.on_epoch(log)?;
        self.1.on_epoch(log)
    }
}

fn require_labels(data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for l in Label::ALL {
        if !data.iter().any(|s| s.label == l) {
            return Err(Error::Dataset(format!("training set has no `{l}` samples")));
        }
    }
    Ok(())
}

/// Minibatch loop shared by every scheme. `features` holds cached feature
/// maps aligned with `data` when the backbone is frozen.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut Network,
    data: &[Sample],
    features: Option<&[Tensor]>,
    epochs: usize,
    cfg: &TrainConfig,
    stage: StageTag,
    order_rng: &mut ChaCha8Rng,
    episode_rng: &mut ChaCha8Rng,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochLog>> {
    let mut adam = Adam::new(&net.store, cfg.learning_rate);
    let mut grads = Gradients::new(&net.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut baseline: Option<f64> = None;
    let rl_weight = if net.selector == Selector::Drl { cfg.rl_loss_weight } else { 0.0 };
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(order_rng);
        let (mut ce, mut rl, mut total, mut reward, mut correct) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let input = match features {
                    Some(f) => FeatureInput::Cached(&f[i]),
                    None => FeatureInput::Image(&data[i].image),
                };
                let b = if cfg.reward_baseline { baseline.unwrap_or(0.0) } else { 0.0 };
                let parts = net
                    .accumulate_loss(input, data[i].label, rl_weight, b, None, episode_rng, &mut grads)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!(
                            "{} epoch {epoch}, sample `{}`: {m}",
                            stage.name(),
                            data[i].id
                        )),
                        other => other,
                    })?;
                observer.on_sample(stage, &data[i], &parts)?;
                if cfg.reward_baseline {
                    baseline = Some(match baseline {
                        None => parts.reward,
                        Some(b) => cfg.baseline_momentum * b + (1.0 - cfg.baseline_momentum) * parts.reward,
                    });
                }
                ce += parts.cross_entropy;
                rl += parts.rl_loss;
                total += parts.total;
                reward += parts.reward;
                let predicted = if parts.probs[0] >= parts.probs[1] { Label::BonaFide } else { Label::Attack };
                correct += (predicted == data[i].label) as usize;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("{} epoch {epoch}: non-finite gradient", stage.name())));
            }
            adam.step(&mut net.store, &grads);
        }
        let n = data.len() as f64;
        let log = EpochLog {
            stage: stage.name().to_string(),
            epoch,
            ce_loss: ce / n,
            rl_loss: rl / n,
            total_loss: total / n,
            reward_mean: reward / n,
            train_accuracy: correct as f64 / n,
        };
        log::info!(
            "{} epoch {epoch}: ce {:.4} rl {:.4} R {:.4} acc {:.3}",
            log.stage,
            log.ce_loss,
            log.rl_loss,
            log.reward_mean,
            log.train_accuracy
        );
        observer.on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trains backbone, global branch and a temporary classifier with cross-entropy.
pub fn pretrain_stage1(
    train: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    require_labels(train)?;
    let mut init = stream_rng(cfg.seed, STREAM_INIT_STAGE1);
    let mut net = Network::new(model_cfg.clone(), Ablation::GlobalOnly, Selector::Drl, &mut init)?;
    let mut order = stream_rng(cfg.seed, STREAM_ORDER);
    let mut episodes = stream_rng(cfg.seed, STREAM_EPISODES);
    let logs = fit(
        &mut net,
        train,
        None,
        cfg.epochs_stage1,
        cfg,
        StageTag::Stage1,
        &mut order,
        &mut episodes,
        observer,
    )?;
    Ok((net, logs))
}

/// Fresh network whose backbone is copied from `stage1` and frozen.
pub fn build_stage2_model(stage1: &Network, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Network> {
    if stage1.config.backbone_channels != model_cfg.backbone_channels
        || stage1.config.stem_kernel != model_cfg.stem_kernel
        || stage1.config.blocks_per_stage != model_cfg.blocks_per_stage
        || stage1.config.input_size != model_cfg.input_size
    {
        return Err(Error::Load("stage-1 backbone does not match the model configuration".into()));
    }
    let mut init = stream_rng(cfg.seed, STREAM_INIT_STAGE2);
    let mut net = Network::new(model_cfg.clone(), cfg.ablation, cfg.selector, &mut init)?;
    let mut problems = Vec::new();
    for (_, name, value) in stage1.store.iter().filter(|(_, n, _)| n.starts_with("backbone.")) {
        if let Err(e) = net.store.set(name, value.clone()) {
            problems.push(e.to_string());
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems.join("; ")));
    }
    net.store.freeze_prefix("backbone.");
    Ok(net)
}

/// Feature maps of every sample under the (frozen) backbone.
pub fn cache_features(net: &Network, data: &[Sample]) -> Result<Vec<Tensor>> {
    data.iter().map(|s| net.backbone_embed(&s.image)).collect()
}

/// Joint training on the frozen backbone: `CE + λ · REINFORCE` per sample.
pub fn train_stage2(
    net: &mut Network,
    train: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    require_labels(train)?;
    if net.store.iter().any(|(id, n, _)| n.starts_with("backbone.") && net.store.is_trainable(id)) {
        return Err(Error::Contract("stage 2 requires a frozen backbone".into()));
    }
    let features = cache_features(net, train)?;
    let mut order = stream_rng(cfg.seed, STREAM_ORDER);
    order.set_word_pos(1 << 40);
    let mut episodes = stream_rng(cfg.seed, STREAM_EPISODES);
    episodes.set_word_pos(1 << 40);
    fit(
        net,
        train,
        Some(&features),
        cfg.epochs_stage2,
        cfg,
        StageTag::Stage2,
        &mut order,
        &mut episodes,
        observer,
    )
}

/// One-stage baseline: the full network trained jointly from scratch.
pub fn train_end_to_end(
    train: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    require_labels(train)?;
    let mut init = stream_rng(cfg.seed, STREAM_INIT_END_TO_END);
    let mut net = Network::new(model_cfg.clone(), cfg.ablation, cfg.selector, &mut init)?;
    let mut order = stream_rng(cfg.seed, STREAM_ORDER);
    let mut episodes = stream_rng(cfg.seed, STREAM_EPISODES);
    let logs = fit(
        &mut net,
        train,
        None,
        cfg.end_to_end_epochs(),
        cfg,
        StageTag::EndToEnd,
        &mut order,
        &mut episodes,
        observer,
    )?;
    Ok((net, logs))
}

/// Trains the max-scores patch classifier on random `p×p` windows of the
/// frozen feature maps, each labeled with its image's label. Returns the
/// scorer and its final-epoch training accuracy.
pub fn pretrain_patch_scorer(net: &Network, train: &[Sample], cfg: &TrainConfig) -> Result<(PatchScorer, f64)> {
    require_labels(train)?;
    let features = cache_features(net, train)?;
    pretrain_patch_scorer_on(&features, train, net.config.patch_size, cfg)
}

pub fn pretrain_patch_scorer_on(
    features: &[Tensor],
    train: &[Sample],
    p: usize,
    cfg: &TrainConfig,
) -> Result<(PatchScorer, f64)> {
    let mut rng = stream_rng(cfg.seed, STREAM_SCORER);
    let channels = features.first().ok_or_else(|| Error::Dataset("no features".into()))?.chw()?.0;
    let mut scorer = PatchScorer::new(channels, p, cfg.scorer_width, &mut rng);
    let mut adam = Adam::new(&scorer.store, cfg.learning_rate);
    let mut grads = Gradients::new(&scorer.store);
    let mut items: Vec<(usize, Action)> = Vec::new();
    let mut accuracy = 0.0;
    for epoch in 1..=cfg.scorer_epochs {
        items.clear();
        for i in 0..train.len() {
            for _ in 0..cfg.scorer_patches_per_image {
                items.push((i, random_selector(&mut rng)));
            }
        }
        items.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in items.chunks(cfg.batch_size) {
            grads.clear();
            for &(i, loc) in batch {
                let patch = crop_patch(&features[i], loc, p)?;
                let mut tape = Tape::new();
                let x = tape.constant(patch);
                let logits = scorer.logits_var(&mut tape, x);
                let lp = tape.log_softmax(logits);
                let picked = tape.pick(lp, train[i].label.index());
                let ce = tape.scale(picked, -1.0);
                let l = tape.value(ce).item();
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("patch scorer epoch {epoch}: non-finite loss")));
                }
                loss += l;
                let lv = tape.value(logits).data();
                let predicted = if lv[0] >= lv[1] { Label::BonaFide } else { Label::Attack };
                correct += (predicted == train[i].label) as usize;
                tape.backward(ce, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut scorer.store, &grads);
        }
        accuracy = correct as f64 / items.len() as f64;
        log::info!("scorer epoch {epoch}: ce {:.4} acc {accuracy:.3}", loss / items.len() as f64);
    }
    scorer.trained = true;
    Ok((scorer, accuracy))
}

/// Generator used when scoring the `index`-th sample of an evaluation set.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, STREAM_EVAL);
    rng.set_word_pos((index as u128) << 20);
    rng
}

/// One deterministic episode per sample. Selectors that draw locations
/// (random) use a per-sample generator derived from `seed`, so repeated calls
/// give identical scores.
pub fn evaluate(net: &Network, data: &[Sample], seed: u64) -> Result<Vec<ScoreRecord>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = eval_rng(seed, i);
            let out = net.forward_episode(&s.image, SampleMode::EvalDeterministic, None, &mut rng)?;
            Ok(ScoreRecord {
                id: s.id.clone(),
                group_id: s.group_id.clone(),
                label: s.label,
                pai_type: s.pai_type.clone(),
                score: out.score(),
            })
        })
        .collect()
}

/// Result of a complete training run.
#[derive(Debug)]
pub struct TrainedRun {
    pub stage1: Option<Network>,
    pub model: Network,
    pub logs: Vec<EpochLog>,
}

/// Runs the configured scheme end to end. A stage-1 network may be passed in
/// to share pretraining across runs with the same seed and backbone.
pub fn train(
    train: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stage1: Option<Network>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    match cfg.scheme {
        Scheme::EndToEnd => {
            let (model, logs) = train_end_to_end(train, model_cfg, cfg, observer)?;
            Ok(TrainedRun {
                stage1: None,
                model,
                logs,
            })
        }
        Scheme::TwoStage => {
            let (stage1, mut logs) = match stage1 {
                Some(s) => (s, Vec::new()),
                None => pretrain_stage1(train, model_cfg, cfg, observer)?,
            };
            let mut model = build_stage2_model(&stage1, model_cfg, cfg)?;
            if cfg.selector == Selector::MaxScores {
                let (scorer, acc) = pretrain_patch_scorer(&model, train, cfg)?;
                log::info!("patch scorer training accuracy {acc:.3}");
                model.scorer = Some(scorer);
            }
            logs.extend(train_stage2(&mut model, train, cfg, observer)?);
            Ok(TrainedRun {
                stage1: Some(stage1),
                model,
                logs,
            })
        }
    }
}
