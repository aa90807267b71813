use rand::Rng;
use refgame::attrspace::{synth_features, AttributeSpace, FeatureStore, ImagePair, Role};
use refgame::diffkit::{Adam, AdamConfig};
use refgame::listenerpop::{Levels, ListenerSpec};
use refgame::rng::{rng_from_seed, SeedTree};
use refgame::speaker::{Phase, SpeakerBundle, SpeakerConfig, SpeakerModel, SpeakerParams, SpeakerState};
use refgame::trainer::{active_policy_loss, run_sequence, train, EpisodeRecord, SequenceConfig, SequenceRecord, TrainContext, TrainSettings};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn episode(k: usize, state: &SpeakerState<f64>, attribute: usize, reward: i8, phase: Phase) -> EpisodeRecord<f64> {
    EpisodeRecord {
        k,
        pair: ImagePair {
            target_id: 0,
            confounder_id: 1,
        },
        state: state.clone(),
        attribute,
        guess: if reward > 0 { 0 } else { 1 },
        reward,
        phase,
        updated_embedding: phase == Phase::Practice,
    }
}

/// Two arms. Probing arm 0 makes every evaluation reward agree with the sign
/// of V; probing arm 1 leaves it a coin flip. REINFORCE should find arm 0.
#[test]
fn reinforce_finds_the_informative_arm() {
    let cfg = SpeakerConfig {
        policy: "active".into(),
        epsilon: None,
        embedding_dim: 2,
        value_hidden: vec![4],
        policy_hidden: vec![4],
        ..SpeakerConfig::default()
    };
    let model = SpeakerModel::new(&cfg, 2).unwrap();
    let mut rng = rng_from_seed(9);
    let mut params = SpeakerParams::<f64>::init(&model, &mut rng);
    // a 4-unit ReLU layer can be dead on this state; move V off zero
    for w in params.value.values_mut() {
        *w += rng.random_range(-0.5..0.5);
    }
    let practice_state = SpeakerState::new(&[0.4, -0.3], &[0.0, 0.0]);
    let eval_state = SpeakerState::new(&[0.2, 0.7], &[0.1, -0.2]);
    let v = model.value_estimate(&eval_state, &params.value).unwrap();
    let eval_attr = model.greedy(&eval_state, &params.value).unwrap();
    let informed: i8 = if v[eval_attr] >= 0.0 { 1 } else { -1 };

    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
        params.policy.len(),
    )
    .unwrap();
    let mut baseline: Option<f64> = None;
    for _ in 0..300 {
        let probs = softmax(&model.policy_logits(&practice_state, &params.policy).unwrap());
        let mut grads = params.zeros_like();
        let mut r_sum = 0.0;
        let batch = 16;
        for _ in 0..batch {
            let arm = usize::from(rng.random::<f64>() >= probs[0]);
            let mut episodes = vec![episode(0, &practice_state, arm, 1, Phase::Practice)];
            for k in 1..5 {
                let r = if arm == 0 {
                    informed
                } else if rng.random::<bool>() {
                    1
                } else {
                    -1
                };
                episodes.push(episode(k, &eval_state, eval_attr, r, Phase::Evaluation));
            }
            let rec = SequenceRecord {
                cluster_id: 0,
                listener_index: 0,
                episodes,
                h_final: vec![0.0, 0.0],
            };
            let out = active_policy_loss(&rec, &model, &params, baseline.unwrap_or(0.0)).unwrap();
            grads.add_scaled(1.0 / batch as f64, &out.grads).unwrap();
            r_sum += out.ret;
        }
        opt.step(&mut params.policy, &grads.policy).unwrap();
        let r_mean = r_sum / batch as f64;
        baseline = Some(baseline.map_or(r_mean, |b| 0.99 * b + 0.01 * r_mean));
    }
    let p0 = softmax(&model.policy_logits(&practice_state, &params.policy).unwrap())[0];
    assert!(p0 > 0.9, "mass on informative arm {p0}");
}

/// A listener that perceives attribute 3 inverted: a rational listener with
/// this perception always picks the confounder when the speaker relies on it.
fn inverted_attribute_world(n_attr: usize, bad: usize) -> (FeatureStore<f64>, FeatureStore<f64>) {
    let s = synth_features::<f64>(10, 200, &AttributeSpace::indexed(n_attr).unwrap(), 0.05, 4).unwrap();
    let rows = s
        .rows()
        .map(|r| {
            let mut r = r.to_vec();
            r[bad] = 1.0 - r[bad];
            r
        })
        .collect();
    let l = FeatureStore::from_rows(Role::Listener, n_attr, rows).unwrap();
    (s, l)
}

#[test]
fn trained_speaker_avoids_the_failing_attribute() {
    let (n_attr, bad) = (8, 3);
    let (s, l) = inverted_attribute_world(n_attr, bad);
    let listener = ListenerSpec::from_mask(0, vec![true; n_attr], &Levels::default());
    let pop = vec![listener.clone()];
    let cfg = SpeakerConfig {
        policy: "epsilon_greedy".into(),
        epsilon: Some(0.3),
        embedding_dim: 4,
        value_hidden: vec![32],
        policy_hidden: vec![8],
        ..SpeakerConfig::default()
    };
    let mut b = SpeakerBundle::<f64>::init(&cfg, n_attr, &mut rng_from_seed(1)).unwrap();
    let seq = SequenceConfig::new(2, 5).unwrap();
    let ctx = TrainContext {
        speaker_store: &s,
        listener_store: &l,
        population: &pop,
        sequence: seq,
        seeds: SeedTree::new(2),
    };
    let settings = TrainSettings {
        budget: 2000,
        batch_size: 8,
        lr: 3e-3,
        ..TrainSettings::default()
    };
    train(&settings, &mut b, &ctx, |_, _| Ok(())).unwrap();

    let mut rng = rng_from_seed(77);
    let (mut eligible, mut chose_bad) = (0usize, 0usize);
    let (mut v_bad, mut n_bad, mut v_good, mut n_good) = (0.0, 0usize, 0.0, 0usize);
    for _ in 0..300 {
        let rec = run_sequence(&listener, 0, &b, &s, &l, seq, &mut rng).unwrap();
        for ep in rec.episodes.iter().filter(|e| e.phase == Phase::Evaluation) {
            let d = ep.state.difference();
            if (0..n_attr).any(|a| a != bad && d[a] > 0.1) {
                eligible += 1;
                chose_bad += usize::from(ep.attribute == bad);
            }
            let v = b.model.value_estimate(&ep.state, &b.params.value).unwrap();
            for a in 0..n_attr {
                if d[a] > 0.1 {
                    if a == bad {
                        v_bad += v[a];
                        n_bad += 1;
                    } else {
                        v_good += v[a];
                        n_good += 1;
                    }
                }
            }
        }
    }
    let rate = chose_bad as f64 / eligible as f64;
    assert!(rate < 0.05, "failing attribute chosen at rate {rate}");
    let (v_bad, v_good) = (v_bad / n_bad as f64, v_good / n_good as f64);
    assert!(v_bad < 0.0 && 0.0 < v_good, "V bad {v_bad}, V good {v_good}");
}
