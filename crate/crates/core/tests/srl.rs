use proptest::prelude::*;
use rand::Rng;
use srlab::corrective::{synthesize_gain, FeedbackGain, LqrWeights, RecoveryOptions};
use srlab::dynamics::*;
use srlab::embedding::{Embedding, TsneConfig};
use srlab::region::SafeRegionModel;
use srlab::rng::task_rng;
use srlab::safety::StateRanges;
use srlab::srl::ppo::*;
use srlab::srl::*;

#[test]
fn target_circle() {
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
    assert!(close(target_position(0.0), (0.0, 3.0)));
    assert!(close(target_position(1.0), (0.0, 2.4)));
    assert!(close(target_position(2.0), (0.0, 3.0)));
    assert!(close(target_position(0.5), (0.3, 2.7)));
    let p = PendulumParams::nominal();
    assert!((reward(&SystemState::UPRIGHT, 0.0, &p) - 2.0).abs() < 1e-12);
    // A tip 0.2 away from the target earns nothing.
    let (x, y) = forward_kinematics(&SystemState::UPRIGHT, &p);
    assert!((x, y) == (0.0, 3.0));
    let t = (0.2f64 / 0.3).asin() / std::f64::consts::PI;
    let (tx, ty) = target_position(t);
    let d = ((tx - x).powi(2) + (ty - y).powi(2)).sqrt();
    assert!((reward(&SystemState::UPRIGHT, t, &p) - (2.0 - 10.0 * d)).abs() < 1e-12);
}

#[test]
fn gae_hand_example() {
    let steps: Vec<StepValues> = (0..3)
        .map(|t| StepValues {
            reward: 1.0,
            value: 0.0,
            next_value: 0.0,
            terminal: t == 2,
            segment_end: t == 2,
        })
        .collect();
    let (adv, _) = gae(&steps, 0.99, 0.95);
    let c = 0.99 * 0.95;
    let a3 = 1.0;
    let a2 = 1.0 + c * a3;
    let a1 = 1.0 + c * a2;
    assert!((adv[0] - a1).abs() < 1e-9 && (adv[1] - a2).abs() < 1e-9 && (adv[2] - a3).abs() < 1e-9);
    assert!((adv[1] - 1.9405).abs() < 1e-9);
}

#[test]
fn gae_matches_discounted_sums() {
    // With lambda = 1 and zero values, advantages are plain discounted returns.
    let mut rng = task_rng(2, 0, 0);
    let r: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let steps: Vec<StepValues> = r
        .iter()
        .enumerate()
        .map(|(t, &reward)| StepValues {
            reward,
            value: 0.0,
            next_value: 0.0,
            terminal: t == 39,
            segment_end: t == 39,
        })
        .collect();
    let (adv, targets) = gae(&steps, 0.9, 1.0);
    for t in 0..40 {
        let ret: f64 = (t..40).map(|s| 0.9f64.powi((s - t) as i32) * r[s]).sum();
        assert!((adv[t] - ret).abs() < 1e-12);
        assert_eq!(targets[t], adv[t]);
    }
}

fn toy_batch(ac: &ActorCritic, seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = task_rng(seed, 1, 0);
    let mut ws = Workspace::default();
    (0..n)
        .map(|_| {
            let obs: Vec<f64> = (0..ac.obs_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (action, old_log_prob, _) = ac.act(&obs, &mut ws, &mut rng);
            Sample {
                obs,
                action,
                // Shift so the ratio is away from 1 and some samples clip.
                old_log_prob: old_log_prob + rng.random_range(-0.3..0.3),
                advantage: rng.random_range(-1.0..1.0),
                value_target: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

fn coefficients() -> LossCoefficients {
    LossCoefficients {
        clip_range: 0.2,
        vf_coef: 1.0,
        ent_coef: 0.01,
        normalize_advantage: true,
    }
}

#[test]
fn gradient_check_on_a_four_unit_policy() {
    for seed in 0..10 {
        let ac = ActorCritic::new(3, 2, &[4], -0.5, &mut task_rng(seed, 0, 0));
        let batch = toy_batch(&ac, seed, 8);
        let err = policy_gradient_check(&ac, &batch, &coefficients(), 1e-5);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn no_signal_means_no_gradient() {
    let ac = ActorCritic::new(3, 2, &[4], -0.5, &mut task_rng(1, 0, 0));
    let mut ws = Workspace::default();
    let batch: Vec<Sample> = toy_batch(&ac, 1, 8)
        .into_iter()
        .map(|mut s| {
            s.advantage = 0.0;
            s.value_target = ac.value(&s.obs, &mut ws);
            s
        })
        .collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let coef = LossCoefficients {
        ent_coef: 0.0,
        normalize_advantage: false,
        ..coefficients()
    };
    let mut grad = vec![0.0; ac.param_count()];
    loss_and_grad(&ac, &refs, &coef, &mut ws, &mut grad);
    assert!(grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-10);
}

#[test]
fn value_gradient_scales_with_its_coefficient() {
    let ac = ActorCritic::new(3, 2, &[4], -0.5, &mut task_rng(2, 0, 0));
    let batch = toy_batch(&ac, 2, 8);
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut ws = Workspace::default();
    let mut g1 = vec![0.0; ac.param_count()];
    let mut g2 = vec![0.0; ac.param_count()];
    loss_and_grad(&ac, &refs, &coefficients(), &mut ws, &mut g1);
    let doubled = LossCoefficients {
        vf_coef: 2.0,
        ..coefficients()
    };
    loss_and_grad(&ac, &refs, &doubled, &mut ws, &mut g2);
    for i in ac.value_block() {
        assert!((g2[i] - 2.0 * g1[i]).abs() <= 1e-12 * (1.0 + g1[i].abs()));
    }
    for i in ac.policy_block() {
        assert_eq!(g1[i], g2[i]);
    }
}

/// Safe only near the upright state.
fn local_model(gain: FeedbackGain) -> SafeRegionModel {
    let emb = Embedding {
        source_states: vec![
            SystemState::UPRIGHT,
            SystemState([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]),
            SystemState([1.2, 2.0, -2.0, 8.0, 15.0, -15.0]),
            SystemState([-1.2, -2.0, 2.0, -8.0, -15.0, 15.0]),
        ],
        labels: vec![1, 1, 0, 0],
        points: vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![5.0, 0.0], vec![-5.0, 0.0]],
        bandwidths: vec![0.05; 4],
        final_kl: 0.0,
        kl_trace: vec![],
        config: TsneConfig::default(),
    };
    SafeRegionModel::new(emb, Some(0.5), 0.8, StateRanges::default(), gain).unwrap()
}

fn small_policy() -> PolicyConfig {
    PolicyConfig {
        hidden: vec![16, 16],
        n_steps: 256,
        n_minibatches: 8,
        n_epochs: 2,
        horizon: 100,
        ..PolicyConfig::default()
    }
}

#[test]
fn supervised_runs_stop_early_and_log_consistently() {
    let params = PendulumParams::nominal();
    let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
    let model = local_model(gain.clone());
    let cfg = small_policy();
    let setup = TrainSetup {
        policy: &cfg,
        model: Some(&model),
        params_real: PendulumParams::real(1.5),
        sim: SimConfig::default(),
        gain,
        recovery: RecoveryOptions::default(),
        ranges: StateRanges::default(),
    };
    let out = train(&setup, 1024, 5).unwrap();
    let m = &out.metrics;
    assert!(!out.start_rejected);
    assert!(m.failures <= m.activations && m.activations > 0);
    let mean_len = out.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / out.episodes.len() as f64;
    assert!(mean_len <= cfg.horizon as f64);
    assert!(out.episodes.iter().any(|e| e.steps < cfg.horizon));

    // Every prediction in the log is what the model says about the visited
    // state, and the learner acted only where that was 1.
    let predictions: Vec<u8> = out
        .traces
        .iter()
        .flat_map(|t| t.decisions.iter().filter_map(|d| d.prediction))
        .collect();
    assert_eq!(predictions.len(), out.visited.len());
    for (x, &p) in out.visited.iter().zip(&predictions) {
        assert_eq!(supervisor_prediction(&model, x), p);
    }
    for t in &out.traces {
        assert!(t.supervisor_invariant_holds());
        if let Some(s) = t.switch_index() {
            assert!(t.decisions[s + 1..].iter().all(|d| d.controller == Controller::Corrective));
        }
    }
    let last = m.updates.last().unwrap();
    assert_eq!(last.activations, m.activations);
    assert!(m.updates.iter().all(|u| u.failures <= u.activations));
}

#[test]
fn identical_seeds_identical_metrics() {
    let params = PendulumParams::nominal();
    let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
    let cfg = small_policy();
    let setup = TrainSetup {
        policy: &cfg,
        model: None,
        params_real: params,
        sim: SimConfig::default(),
        gain,
        recovery: RecoveryOptions::default(),
        ranges: StateRanges::default(),
    };
    let a = train(&setup, 512, 9).unwrap();
    let b = train(&setup, 512, 9).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.policy.theta, b.policy.theta);
    let c = train(&setup, 512, 10).unwrap();
    assert_ne!(a.policy.theta, c.policy.theta);
}

proptest! {
    #[test]
    fn reward_never_exceeds_the_safe_constant(
        s in proptest::array::uniform6(-10.0f64..10.0),
        t in 0.0f64..100.0,
    ) {
        prop_assert!(reward(&SystemState(s), t, &PendulumParams::nominal()) <= 2.0 + 1e-12);
    }
}
