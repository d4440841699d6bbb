//! The glimpse-location agent: a Gaussian policy over normalized map
//! coordinates, the delayed log-likelihood reward, the score-function
//! surrogate loss, and the two non-learned selectors used as baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{gaussian_log_density, Tape, Var};
use crate::error::{Error, Result};
use crate::model::crop::window_center;
use crate::model::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::{softmax, Tensor};

/// Smallest probability fed to the log in the terminal reward.
pub const REWARD_PROB_FLOOR: f64 = 1e-12;

/// A glimpse location `(l_x, l_y)`; `x` is horizontal, `y` vertical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub x: f64,
    pub y: f64,
}

impl Action {
    pub fn as_array(self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    TrainStochastic,
    EvalDeterministic,
}

/// How glimpse locations are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Drl,
    Random,
    MaxScores,
}

impl Selector {
    pub fn name(self) -> &'static str {
        match self {
            Selector::Drl => "drl",
            Selector::Random => "random",
            Selector::MaxScores => "max_scores",
        }
    }
}

/// One step of an episode: the state the action was chosen from, the action
/// and its log-density under the distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub state: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
}

pub type Trajectory = Vec<TrajectoryStep>;

/// `D → hidden → 2` head producing the tanh-squashed mean location.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub hidden: Linear,
    pub mean: Linear,
    pub sigma: f64,
}

impl PolicyHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        let hidden_layer = Linear::new(store, &format!("{name}.hidden"), dim, hidden, rng);
        let mean = Linear::uniform(store, &format!("{name}.mean"), hidden, 2, 1e-2, true, rng);
        Self {
            hidden: hidden_layer,
            mean,
            sigma,
        }
    }

    /// Records `μ = tanh(head(state))` on the tape.
    pub fn mean_var(&self, tape: &mut Tape, store: &ParamStore, state: Var) -> Var {
        let h = self.hidden.forward(tape, store, state);
        let h = tape.relu(h);
        let m = self.mean.forward(tape, store, h);
        tape.tanh(m)
    }

    pub fn mean(&self, store: &ParamStore, state: &[f64]) -> Action {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(state.to_vec()));
        let m = self.mean_var(&mut tape, store, s);
        let v = tape.value(m).data();
        Action { x: v[0], y: v[1] }
    }

    /// Draws the next location for `state`; see [`sample_location`].
    pub fn sample(&self, store: &ParamStore, state: &[f64], mode: SampleMode, rng: &mut impl Rng) -> Result<(Action, f64)> {
        sample_location(self.mean(store, state), self.sigma, mode, rng)
    }

    pub fn macs(&self) -> u64 {
        self.hidden.macs() + self.mean.macs()
    }
}

/// Samples around `mean` with standard deviation `sigma` and returns the exact
/// log-density of the (unclamped) sample. In deterministic mode the mean is
/// returned with a log-probability of 0.
pub fn sample_location(mean: Action, sigma: f64, mode: SampleMode, rng: &mut impl Rng) -> Result<(Action, f64)> {
    if !(sigma > 1e-6) {
        return Err(Error::Config(format!("policy sigma {sigma} must exceed 1e-6")));
    }
    match mode {
        SampleMode::EvalDeterministic => Ok((mean, 0.0)),
        SampleMode::TrainStochastic => {
            let ex: f64 = StandardNormal.sample(rng);
            let ey: f64 = StandardNormal.sample(rng);
            let a = Action {
                x: mean.x + sigma * ex,
                y: mean.y + sigma * ey,
            };
            let lp = gaussian_log_density(&mean.as_array(), &a.as_array(), sigma);
            Ok((a, lp))
        }
    }
}

/// First glimpse location: a normal prior centred on the map centre.
/// Deterministic evaluation uses the centre itself.
pub fn initial_location(sigma: f64, mode: SampleMode, rng: &mut impl Rng) -> (Action, f64) {
    match mode {
        SampleMode::EvalDeterministic => (Action::default(), 0.0),
        SampleMode::TrainStochastic if sigma == 0.0 => (Action::default(), 0.0),
        SampleMode::TrainStochastic => {
            let dist = Normal::new(0.0, sigma).expect("validated sigma");
            let a = Action {
                x: dist.sample(rng),
                y: dist.sample(rng),
            };
            (a, gaussian_log_density(&[0.0, 0.0], &a.as_array(), sigma))
        }
    }
}

/// Delayed reward: zero before the last step, `ln P(y_gt)` at step `T`.
pub fn compute_reward(probs: &[f64], label_index: usize, t: usize, steps: usize) -> Result<f64> {
    if t == 0 || t > steps {
        return Err(Error::Contract(format!("step {t} outside 1..={steps}")));
    }
    if label_index >= probs.len() {
        return Err(Error::Contract(format!("label index {label_index} out of range")));
    }
    if t < steps {
        Ok(0.0)
    } else {
        Ok(probs[label_index].max(REWARD_PROB_FLOOR).ln())
    }
}

pub fn cumulative_reward(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Score-function surrogate `−(Σ_t log π(a_t | s_t)) · R`.
///
/// `reward` enters as a plain number, so no gradient reaches whatever produced
/// it; minimizing the surrogate ascends the expected return.
pub fn reinforce_loss(tape: &mut Tape, log_probs: &[Var], reward: f64) -> Result<Var> {
    if !reward.is_finite() {
        return Err(Error::Numeric(format!("non-finite return {reward}")));
    }
    let mut total: Option<Var> = None;
    for &lp in log_probs {
        let v = tape.value(lp).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite log-probability {v}")));
        }
        total = Some(match total {
            None => lp,
            Some(acc) => tape.add(acc, lp),
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, -reward))
}

/// RANDOM baseline: uniform over `[-1, 1]²`.
pub fn random_selector(rng: &mut impl Rng) -> Action {
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    Action {
        x: u.sample(rng),
        y: u.sample(rng),
    }
}

/// Anything that scores a `C×p×p` patch with an attack probability.
pub trait PatchScore {
    fn attack_score(&self, patch: &Tensor) -> Result<f64>;
}

/// MAX-SCORES baseline: scores the stride-`p` grid of `p×p` patches and
/// returns the `k` highest attack scores in descending order. Ties keep
/// row-major grid order; if `k` exceeds the grid the ranking repeats.
pub fn max_scores_selector(fmap: &Tensor, scorer: &dyn PatchScore, p: usize, k: usize) -> Result<Vec<Action>> {
    let (c, h, w) = fmap.chw()?;
    if p == 0 || p > h || p > w {
        return Err(Error::Config(format!("patch size {p} does not fit a {h}×{w} map")));
    }
    let data = fmap.data();
    let mut cells = Vec::new();
    for gy in 0..h / p {
        for gx in 0..w / p {
            let (top, left) = (gy * p, gx * p);
            let mut patch = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for y in top..top + p {
                    let row = (ch * h + y) * w;
                    patch.extend_from_slice(&data[row + left..row + left + p]);
                }
            }
            let score = scorer.attack_score(&Tensor::new(vec![c, p, p], patch)?)?;
            cells.push((score, top, left));
        }
    }
    // Stable sort keeps raster order among equal scores.
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((0..k)
        .map(|i| {
            let (_, top, left) = cells[i % cells.len()];
            window_center(top, left, h, p)
        })
        .collect())
}

/// Small patch classifier used by the MAX-SCORES baseline:
/// full-patch convolution, rectifier, global pooling, linear to two logits.
#[derive(Clone, Debug)]
pub struct PatchScorer {
    pub store: ParamStore,
    pub conv: Conv2d,
    pub head: Linear,
    pub trained: bool,
}

impl PatchScorer {
    pub fn new(channels: usize, p: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "scorer.conv", channels, width, p, 1, 0, rng);
        let head = Linear::new(&mut store, "scorer.head", width, 2, rng);
        Self {
            store,
            conv,
            head,
            trained: false,
        }
    }

    pub fn logits_var(&self, tape: &mut Tape, patch: Var) -> Var {
        let y = self.conv.forward(tape, &self.store, patch);
        let y = tape.relu(y);
        let g = tape.gap(y);
        self.head.forward(tape, &self.store, g)
    }

    /// `[P(bona_fide), P(attack)]` for one patch.
    pub fn probs(&self, patch: &Tensor) -> [f64; 2] {
        let mut tape = Tape::new();
        let x = tape.constant(patch.clone());
        let l = self.logits_var(&mut tape, x);
        let p = softmax(tape.value(l).data());
        [p[0], p[1]]
    }
}

impl PatchScore for PatchScorer {
    fn attack_score(&self, patch: &Tensor) -> Result<f64> {
        if !self.trained {
            return Err(Error::Contract("patch scorer has not been trained".into()));
        }
        Ok(self.probs(patch)[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delayed_reward() {
        assert_eq!(compute_reward(&[0.3, 0.7], 0, 3, 8).unwrap(), 0.0);
        assert_eq!(compute_reward(&[1.0, 0.0], 0, 8, 8).unwrap(), 0.0);
        let e = (-1f64).exp();
        assert!((compute_reward(&[1.0 - e, e], 1, 8, 8).unwrap() + 1.0).abs() < 1e-15);
        assert!(compute_reward(&[0.0, 1.0], 0, 8, 8).unwrap().is_finite());
        assert!(matches!(compute_reward(&[0.5, 0.5], 0, 9, 8), Err(Error::Contract(_))));
        assert!(matches!(compute_reward(&[0.5, 0.5], 0, 0, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn cumulative_reward_sums() {
        assert_eq!(cumulative_reward(&[0.0, 0.0, 0.0, -0.5]), -0.5);
        assert_eq!(cumulative_reward(&[0.0; 8]), 0.0);
    }

    #[test]
    fn sampling_guards_and_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = Action { x: 0.2, y: -0.3 };
        assert!(sample_location(mean, 1e-7, SampleMode::TrainStochastic, &mut rng).is_err());
        let (a, lp) = sample_location(mean, 0.1, SampleMode::EvalDeterministic, &mut rng).unwrap();
        assert_eq!((a, lp), (mean, 0.0));
        // As sigma shrinks the sample collapses onto the mean.
        let (a, _) = sample_location(mean, 1e-5, SampleMode::TrainStochastic, &mut rng).unwrap();
        assert!((a.x - mean.x).abs() < 1e-3 && (a.y - mean.y).abs() < 1e-3);
    }

    #[test]
    fn zero_head_points_at_the_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = PolicyHead::new(&mut store, "policy", 4, 4, 0.1, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(head.mean(&store, &[1.0, -2.0, 0.5, 3.0]), Action { x: 0.0, y: 0.0 });
    }

    #[test]
    fn reinforce_loss_scales_with_return() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let lp = tape.gauss_log_prob(m, &[0.15, 0.1], 0.1);
        let l0 = reinforce_loss(&mut tape, &[lp], 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        let l1 = reinforce_loss(&mut tape, &[lp], -0.7).unwrap();
        let l2 = reinforce_loss(&mut tape, &[lp], -1.4).unwrap();
        assert_eq!(2.0 * tape.value(l1).item(), tape.value(l2).item());
        assert!(matches!(reinforce_loss(&mut tape, &[lp], f64::NAN), Err(Error::Numeric(_))));
    }

    #[test]
    fn reinforce_loss_with_zero_return_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let head = PolicyHead::new(&mut store, "policy", 3, 4, 0.2, &mut rng);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.3, -0.1, 0.8]));
        let mu = head.mean_var(&mut tape, &store, s);
        let lp = tape.gauss_log_prob(mu, &[0.4, -0.2], 0.2);
        let loss = reinforce_loss(&mut tape, &[lp], 0.0).unwrap();
        let mut grads = crate::params::Gradients::new(&store);
        tape.backward(loss, &mut grads);
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn random_selector_covers_quadrants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hit = [false; 4];
        for _ in 0..100 {
            let a = random_selector(&mut rng);
            assert!((-1.0..=1.0).contains(&a.x) && (-1.0..=1.0).contains(&a.y));
            hit[(a.x >= 0.0) as usize * 2 + (a.y >= 0.0) as usize] = true;
        }
        assert!(hit.iter().all(|&h| h));
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(random_selector(&mut r1), random_selector(&mut r2));
    }

    #[test]
    fn random_selector_mean_is_central() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let a = random_selector(&mut rng);
            sx += a.x;
            sy += a.y;
        }
        assert!((sx / n as f64).abs() < 0.02 && (sy / n as f64).abs() < 0.02);
    }

    #[test]
    fn initial_location_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let (a, _) = initial_location(0.25, SampleMode::TrainStochastic, &mut rng);
            sx += a.x;
            sy += a.y;
        }
        assert!((sx / n as f64).abs() < 0.02 && (sy / n as f64).abs() < 0.02);
        assert_eq!(
            initial_location(0.25, SampleMode::EvalDeterministic, &mut rng).0,
            Action { x: 0.0, y: 0.0 }
        );
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            initial_location(0.25, SampleMode::TrainStochastic, &mut a),
            initial_location(0.25, SampleMode::TrainStochastic, &mut b)
        );
    }

    #[test]
    fn log_density_integrates_to_one() {
        let sigma = 0.1;
        let mean = [0.05, -0.1];
        let n = 401;
        let lo = -0.6;
        let step = 1.2 / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = [lo + i as f64 * step, lo + j as f64 * step];
                total += gaussian_log_density(&mean, &a, sigma).exp() * step * step;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    /// Lookup-table scorer keyed by the patch's first value.
    struct Table;
    impl PatchScore for Table {
        fn attack_score(&self, patch: &Tensor) -> Result<f64> {
            Ok(patch.data()[0])
        }
    }

    struct Constant;
    impl PatchScore for Constant {
        fn attack_score(&self, _: &Tensor) -> Result<f64> {
            Ok(0.5)
        }
    }

    #[test]
    fn max_scores_picks_the_planted_cell_first() {
        let mut fmap = Tensor::zeros(&[1, 8, 8]);
        fmap.data_mut()[4 * 8 + 6] = 0.9; // cell (row 2, col 3) for p = 2
        fmap.data_mut()[0] = 0.4;
        let picks = max_scores_selector(&fmap, &Table, 2, 2).unwrap();
        let w = crate::model::crop::crop_window(picks[0], 8, 2).unwrap();
        assert_eq!((w.top, w.left), (4, 6));
        let w = crate::model::crop::crop_window(picks[1], 8, 2).unwrap();
        assert_eq!((w.top, w.left), (0, 0));
    }

    #[test]
    fn max_scores_ties_follow_raster_order_and_cover_the_grid() {
        let fmap = Tensor::zeros(&[2, 8, 8]);
        let picks = max_scores_selector(&fmap, &Constant, 4, 4).unwrap();
        let windows: Vec<_> = picks
            .iter()
            .map(|&a| {
                let w = crate::model::crop::crop_window(a, 8, 4).unwrap();
                (w.top, w.left)
            })
            .collect();
        assert_eq!(windows, vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
    }

    #[test]
    fn untrained_scorer_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scorer = PatchScorer::new(2, 2, 4, &mut rng);
        let fmap = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            max_scores_selector(&fmap, &scorer, 2, 1),
            Err(Error::Contract(_))
        ));
    }
}
