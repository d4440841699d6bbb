use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::RgbImage;
use crate::tensor::log_softmax;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_all(net: &mut Network) {
    for id in net.store.ids().collect::<Vec<_>>() {
        net.store.get_mut(id).data_mut().fill(0.0);
    }
}

fn random_image(size: usize, r: &mut impl Rng) -> RgbImage {
    RgbImage {
        height: size,
        width: size,
        data: (0..size * size * 3).map(|_| r.random_range(0.0..1.0)).collect(),
    }
}

fn net(cfg: ModelConfig, seed: u64) -> Network {
    Network::new(cfg, Ablation::Full, Selector::Drl, &mut rng(seed)).unwrap()
}

#[test]
fn feature_map_shapes() {
    let n = net(ModelConfig::desk(), 0);
    let f = n.backbone_embed(&random_image(64, &mut rng(1))).unwrap();
    assert_eq!(f.shape(), &[16, 8, 8]);
    assert!(f.is_finite());
    assert!(matches!(n.backbone_embed(&RgbImage::filled(32, 32, 0.0)), Err(Error::Shape(_))));

    let g = n.global_branch(&f).unwrap();
    assert_eq!(g.len(), 32);
    assert!(g.iter().all(|&v| v >= 0.0));
}

#[test]
fn zero_parameters_give_zero_features() {
    let mut n = net(ModelConfig::desk(), 0);
    zero_all(&mut n);
    let f = n.backbone_embed(&RgbImage::filled(64, 64, 0.0)).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
    assert!(n.global_branch(&f).unwrap().iter().all(|&v| v == 0.0));
    let patch = Tensor::zeros(&[16, 2, 2]);
    assert!(n.glimpse_encode(&patch, Action::default()).unwrap().iter().all(|&v| v == 0.0));
    let fused = vec![0.3; n.config.fused_dim()];
    assert_eq!(n.classify(&fused).unwrap().1, [0.5, 0.5]);
}

#[test]
fn glimpse_encoding_depends_on_location_order() {
    let n = net(ModelConfig::desk(), 3);
    let mut r = rng(4);
    let patch = Tensor::new(vec![16, 2, 2], (0..64).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let a = n.glimpse_encode(&patch, Action { x: 0.7, y: -0.4 }).unwrap();
    let b = n.glimpse_encode(&patch, Action { x: -0.4, y: 0.7 }).unwrap();
    assert_eq!(a.len(), 32);
    assert_ne!(a, b);
}

#[test]
fn gru_zero_parameters_halve_the_state() {
    let mut n = net(ModelConfig::desk(), 0);
    zero_all(&mut n);
    let h: Vec<f64> = (0..32).map(|i| i as f64 - 16.0).collect();
    let out = n.gru_step(&vec![1.0; 32], &h).unwrap();
    for (o, h) in out.iter().zip(&h) {
        assert_eq!(*o, 0.5 * h);
    }
    assert!(matches!(n.gru_step(&[0.0; 3], &h), Err(Error::Shape(_))));
}

#[test]
fn gru_saturated_update_gate_keeps_the_state() {
    let mut n = net(ModelConfig::desk(), 5);
    let bias = n.gru.w_z.bias.unwrap();
    n.store.get_mut(bias).data_mut().fill(60.0);
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let out = n.gru_step(&vec![0.5; 32], &h).unwrap();
    for (o, h) in out.iter().zip(&h) {
        assert!((o - h).abs() < 1e-12);
    }
}

fn gru_fixture() -> (ParamStore, GruCell) {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 6, 6, &mut rng(0));
    (store, cell)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn gru_gates_and_contraction(
        seed in any::<u64>(),
        scale in 0.1f64..20.0,
        f in proptest::collection::vec(-50.0f64..50.0, 6),
        h in proptest::collection::vec(-5.0f64..5.0, 6),
    ) {
        let (mut store, cell) = gru_fixture();
        let mut r = rng(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::vector(f));
        let hv = tape.constant(Tensor::vector(h.clone()));
        let out = cell.step(&mut tape, &store, fv, hv);
        for gate in [out.update, out.reset] {
            prop_assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0 || g == 0.0 || g == 1.0));
        }
        for (o, hp) in tape.value(out.hidden).data().iter().zip(&h) {
            prop_assert!(o.abs() <= hp.abs().max(1.0) + 1e-12);
        }
    }

    #[test]
    fn concat_fusion_is_lossless(
        g in proptest::collection::vec(-1e3f64..1e3, 1..16),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let l: Vec<f64> = g.iter().map(|_| r.random_range(-1e3..1e3)).collect();
        let fused = fuse_values(&g, &l, Fusion::Concat, [0.5, 0.5]).unwrap();
        prop_assert_eq!(&fused[..g.len()], &g[..]);
        prop_assert_eq!(&fused[g.len()..], &l[..]);
    }

    #[test]
    fn classify_probs_are_a_distribution(shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut n = net(ModelConfig::reduced(), seed);
        let b = n.classifier.bias.unwrap();
        let fused = vec![0.25; n.config.fused_dim()];
        let (_, p0) = n.classify(&fused).unwrap();
        prop_assert!((p0[0] + p0[1] - 1.0).abs() < 1e-6);
        for v in n.store.get_mut(b).data_mut() {
            *v += shift;
        }
        let (_, p1) = n.classify(&fused).unwrap();
        prop_assert!((p0[0] - p1[0]).abs() < 1e-9);
    }
}

#[test]
fn gate_ranges_are_open_for_moderate_inputs() {
    let (store, cell) = gru_fixture();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::vector(vec![0.3; 6]));
    let h = tape.constant(Tensor::vector(vec![-0.2; 6]));
    let out = cell.step(&mut tape, &store, f, h);
    for gate in [out.update, out.reset] {
        assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn fusion_examples() {
    let a = vec![1.0, -2.0, 3.5];
    assert_eq!(fuse_values(&a, &a, Fusion::Average, [0.5, 0.5]).unwrap(), a);
    let b = vec![9.0, 9.0, 9.0];
    assert_eq!(fuse_values(&a, &b, Fusion::WeightedAverage, [1.0, 0.0]).unwrap(), a);
    assert!(matches!(fuse_values(&a, &b[..2], Fusion::Average, [0.5, 0.5]), Err(Error::Shape(_))));
    assert_eq!(fuse_values(&a, &b, Fusion::Concat, [0.5, 0.5]).unwrap().len(), 6);

    let mut cfg = ModelConfig::desk();
    cfg.fusion = Fusion::WeightedAverage;
    let n = net(cfg, 0);
    let w = n.fusion_weights();
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
}

#[test]
fn classify_closed_forms() {
    let mut n = net(ModelConfig::reduced(), 0);
    zero_all(&mut n);
    let b = n.classifier.bias.unwrap();
    n.store.get_mut(b).data_mut().copy_from_slice(&[3f64.ln(), 0.0]);
    let (logits, probs) = n.classify(&vec![1.0; n.config.fused_dim()]).unwrap();
    assert_eq!(logits, [3f64.ln(), 0.0]);
    assert!((probs[0] - 0.75).abs() < 1e-15 && (probs[1] - 0.25).abs() < 1e-15);
    assert!(n.classify(&[1.0]).is_err());
}

#[test]
fn single_step_episode_unrolls_once() {
    let mut cfg = ModelConfig::desk();
    cfg.steps = 1;
    let n = net(cfg, 7);
    let img = random_image(64, &mut rng(8));
    let out = n.forward_episode(&img, SampleMode::EvalDeterministic, Some(Label::Attack), &mut rng(0)).unwrap();
    assert_eq!(out.trajectory.len(), 1);
    assert_eq!(out.trajectory[0].action, Action::default());
    let f = n.backbone_embed(&img).unwrap();
    let fg = n.global_branch(&f).unwrap();
    assert_eq!(out.global_feature, fg);
    let patch = n.crop_patch(&f, Action::default()).unwrap();
    let ft = n.glimpse_encode(&patch, Action::default()).unwrap();
    assert_eq!(out.final_hidden, n.gru_step(&ft, &fg).unwrap());
    assert_eq!(out.trajectory[0].state, fg);
}

#[test]
fn deterministic_episodes_repeat_exactly() {
    let n = net(ModelConfig::desk(), 9);
    let img = random_image(64, &mut rng(10));
    let a = n.forward_episode(&img, SampleMode::EvalDeterministic, Some(Label::BonaFide), &mut rng(1)).unwrap();
    let b = n.forward_episode(&img, SampleMode::EvalDeterministic, Some(Label::BonaFide), &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.step_confidences.len(), 8);
    assert_eq!(*a.step_confidences.last().unwrap(), a.score());
    assert!((a.probs[0] + a.probs[1] - 1.0).abs() < 1e-12);
    assert_eq!(a.reward.unwrap(), a.probs[0].ln());
    assert!(a.rewards[..7].iter().all(|&r| r == 0.0));
}

#[test]
fn stochastic_episodes_follow_the_rng() {
    let n = net(ModelConfig::desk(), 9);
    let img = random_image(64, &mut rng(10));
    let a = n.forward_episode(&img, SampleMode::TrainStochastic, None, &mut rng(1)).unwrap();
    let b = n.forward_episode(&img, SampleMode::TrainStochastic, None, &mut rng(1)).unwrap();
    let c = n.forward_episode(&img, SampleMode::TrainStochastic, None, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.trajectory, c.trajectory);
    assert!(a.trajectory.iter().all(|s| s.log_prob.is_finite() && s.action.is_finite()));
    assert!(a.reward.is_none());
}

#[test]
fn ablations_bypass_one_branch() {
    let img = random_image(64, &mut rng(3));
    let g = Network::new(ModelConfig::desk(), Ablation::GlobalOnly, Selector::Drl, &mut rng(0)).unwrap();
    let out = g.forward_episode(&img, SampleMode::TrainStochastic, None, &mut rng(0)).unwrap();
    assert!(out.trajectory.is_empty() && out.final_hidden.is_empty());
    let f = g.backbone_embed(&img).unwrap();
    let fused = g.fuse(&g.global_branch(&f).unwrap(), &[0.0; 32]).unwrap();
    assert_eq!(out.probs, g.classify(&fused).unwrap().1);

    let l = Network::new(ModelConfig::desk(), Ablation::LocalOnly, Selector::Drl, &mut rng(0)).unwrap();
    let out = l.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut rng(0)).unwrap();
    assert!(out.global_feature.is_empty());
    assert_eq!(out.trajectory.len(), 8);
    assert!(out.trajectory[0].state.iter().all(|&v| v == 0.0));
    let fused = l.fuse(&[0.0; 32], &out.final_hidden).unwrap();
    assert_eq!(out.probs, l.classify(&fused).unwrap().1);
}

#[test]
fn random_selector_draws_every_location() {
    let n = Network::new(ModelConfig::desk(), Ablation::Full, Selector::Random, &mut rng(0)).unwrap();
    let img = random_image(64, &mut rng(3));
    let out = n.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut rng(4)).unwrap();
    assert!(out.trajectory.iter().all(|s| s.log_prob == 0.0));
    assert_ne!(out.trajectory[0].action, Action::default());
}

#[test]
fn max_scores_selector_needs_a_scorer() {
    let n = Network::new(ModelConfig::desk(), Ablation::Full, Selector::MaxScores, &mut rng(0)).unwrap();
    let img = random_image(64, &mut rng(3));
    assert!(matches!(
        n.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut rng(4)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn episode_windows_match_crop_patch() {
    let n = net(ModelConfig::desk(), 1);
    let img = random_image(64, &mut rng(2));
    let out = n.forward_episode(&img, SampleMode::TrainStochastic, None, &mut rng(3)).unwrap();
    for (w, s) in out.windows.iter().zip(&out.trajectory) {
        assert_eq!(*w, crop_window(s.action, 8, 2).unwrap());
    }
}

fn ce_at(n: &Network, img: &RgbImage, label: Label, locs: &[Action]) -> f64 {
    let out = n
        .run_episode(FeatureInput::Image(img), SampleMode::EvalDeterministic, None, Some(locs), &mut rng(0))
        .unwrap();
    -log_softmax(&out.logits)[label.index()]
}

#[test]
fn cross_entropy_gradient_matches_finite_differences_on_a_sample_of_entries() {
    let mut n = net(ModelConfig::reduced(), 21);
    let img = random_image(16, &mut rng(22));
    let locs = [Action { x: -0.3, y: 0.5 }, Action { x: 0.8, y: -0.9 }];
    let mut grads = Gradients::new(&n.store);
    let parts = n
        .accumulate_loss(FeatureInput::Image(&img), Label::Attack, 0.0, 0.0, Some(&locs), &mut rng(0), &mut grads)
        .unwrap();
    assert!((parts.cross_entropy - ce_at(&n, &img, Label::Attack, &locs)).abs() < 1e-12);
    let h = 1e-5;
    for id in n.store.ids().collect::<Vec<_>>() {
        let len = n.store.get(id).len();
        for k in [0, len / 2, len - 1] {
            let orig = n.store.get(id).data()[k];
            n.store.get_mut(id).data_mut()[k] = orig + h;
            let up = ce_at(&n, &img, Label::Attack, &locs);
            n.store.get_mut(id).data_mut()[k] = orig - h;
            let down = ce_at(&n, &img, Label::Attack, &locs);
            n.store.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "{} [{k}]: fd {fd} vs {an}", n.store.name(id));
        }
    }
}
