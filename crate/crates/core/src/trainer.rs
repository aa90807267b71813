//! Sequence rollouts, the value and active-policy losses, and the training loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attrspace::{sample_pair, FeatureStore, ImagePair};
use crate::diffkit::{mse, softmax_logprob_grad, Adam, AdamConfig, LstmTape};
use crate::listenerpop::{listener_guess, ListenerSpec};
use crate::rng::{Purpose, SeedTree, StreamRng};
use crate::speaker::{
    make_observation, Phase, SelectionHistory, SpeakerBundle, SpeakerModel, SpeakerParams, SpeakerState,
};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub n_practice: usize,
    pub m_eval: usize,
}

impl SequenceConfig {
    pub fn new(n_practice: usize, m_eval: usize) -> Result<Self> {
        if m_eval == 0 {
            return Err(Error::invalid("a sequence needs at least one evaluation episode"));
        }
        Ok(SequenceConfig { n_practice, m_eval })
    }
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            n_practice: 20,
            m_eval: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord<F> {
    pub k: usize,
    pub pair: ImagePair,
    pub state: SpeakerState<F>,
    pub attribute: usize,
    pub guess: usize,
    pub reward: i8,
    pub phase: Phase,
    /// Whether this episode's observation was fed to the embedding.
    pub updated_embedding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord<F> {
    /// Ground truth for evaluation only; never visible to the speaker.
    pub cluster_id: usize,
    pub listener_index: usize,
    pub episodes: Vec<EpisodeRecord<F>>,
    /// Embedding after the practice episodes.
    pub h_final: Vec<F>,
}

impl<F: Scalar> SequenceRecord<F> {
    pub fn n_practice(&self) -> usize {
        self.episodes.iter().filter(|e| e.phase == Phase::Practice).count()
    }

    pub fn mean_eval_reward(&self) -> f64 {
        mean_reward(self.episodes.iter().filter(|e| e.phase == Phase::Evaluation))
    }

    pub fn mean_practice_reward(&self) -> f64 {
        mean_reward(self.episodes.iter().filter(|e| e.phase == Phase::Practice))
    }
}

fn mean_reward<'a, F: 'a>(eps: impl Iterator<Item = &'a EpisodeRecord<F>>) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for e in eps {
        total += f64::from(e.reward);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Plays `n_practice` practice then `m_eval` evaluation episodes against one
/// listener. `listener_index` is carried into the record untouched.
pub fn run_sequence<F: Scalar>(
    listener: &ListenerSpec<F>,
    listener_index: usize,
    speaker: &SpeakerBundle<F>,
    speaker_store: &FeatureStore<F>,
    listener_store: &FeatureStore<F>,
    cfg: SequenceConfig,
    rng: &mut StreamRng,
) -> Result<SequenceRecord<F>> {
    if speaker_store.len() != listener_store.len() {
        return Err(Error::invalid(format!(
            "speaker and listener stores cover different image sets ({} vs {})",
            speaker_store.len(),
            listener_store.len()
        )));
    }
    let model = &speaker.model;
    let n_attr = model.n_attributes;
    let mut embedding = model.initial_state::<F>();
    let mut history = SelectionHistory::new(n_attr);
    let mut episodes = Vec::with_capacity(cfg.n_practice + cfg.m_eval);
    let mut h_final = embedding.h.clone();
    for k in 0..cfg.n_practice + cfg.m_eval {
        let phase = if k < cfg.n_practice {
            Phase::Practice
        } else {
            Phase::Evaluation
        };
        if k == cfg.n_practice {
            h_final = embedding.h.clone();
        }
        let pair = sample_pair(speaker_store, rng)?;
        let diff = speaker_store.pair_difference(pair)?;
        let state = model.speaker_state(&diff, &embedding)?;
        let attribute = model.select_attribute(phase, &state, &speaker.params, &mut history, rng)?;
        let guess = listener_guess(listener, attribute, listener_store, pair, rng)?.guess;
        let reward: i8 = if guess == pair.target_id { 1 } else { -1 };
        history.record(attribute, reward);
        let updated_embedding = model.use_embedding && (phase == Phase::Practice || model.embed_during_eval);
        if phase == Phase::Practice || model.embed_during_eval {
            let obs = make_observation(n_attr, attribute, reward)?;
            embedding = model.embed_update(&embedding, &obs, &speaker.params.embed)?;
        }
        episodes.push(EpisodeRecord {
            k,
            pair,
            state,
            attribute,
            guess,
            reward,
            phase,
            updated_embedding,
        });
    }
    if cfg.m_eval == 0 {
        h_final = embedding.h.clone();
    }
    Ok(SequenceRecord {
        cluster_id: listener.cluster_id,
        listener_index,
        episodes,
        h_final,
    })
}

/// Rollout of the practice phase only; used to probe embeddings.
pub fn run_practice<F: Scalar>(
    listener: &ListenerSpec<F>,
    listener_index: usize,
    speaker: &SpeakerBundle<F>,
    speaker_store: &FeatureStore<F>,
    listener_store: &FeatureStore<F>,
    n_practice: usize,
    rng: &mut StreamRng,
) -> Result<SequenceRecord<F>> {
    let cfg = SequenceConfig {
        n_practice,
        m_eval: 0,
    };
    run_sequence(listener, listener_index, speaker, speaker_store, listener_store, cfg, rng)
}

/// Loss value with gradients for every parameter block.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub loss: F,
    pub grads: SpeakerParams<F>,
}

/// Mean squared error between `V(s_k)[a_k]` and `r_k` over every episode.
///
/// The embedding is recomputed from the recorded observations so the
/// gradient reaches the LSTM through `h` inside each `s_k`, back through
/// the whole unrolled practice sequence.
pub fn value_loss<F: Scalar>(
    record: &SequenceRecord<F>,
    model: &SpeakerModel,
    params: &SpeakerParams<F>,
) -> Result<LossOutput<F>> {
    let n_attr = model.n_attributes;
    let e = model.embedding_dim();
    let n_ep = record.episodes.len();
    if n_ep == 0 {
        return Err(Error::invalid("empty sequence record"));
    }
    let mut grads = params.zeros_like();
    let scale = F::one() / F::of(n_ep as f64);

    let mut h = vec![F::zero(); e];
    let mut c = vec![F::zero(); e];
    let mut tapes: Vec<LstmTape<F>> = Vec::new();
    // dh_acc[j]: gradient reaching h_j directly from the value head
    let mut dh_acc: Vec<Vec<F>> = vec![vec![F::zero(); e]];
    let mut loss = F::zero();
    let mut input = Vec::with_capacity(n_attr + e);
    for ep in &record.episodes {
        input.clear();
        input.extend_from_slice(ep.state.difference());
        if model.use_embedding {
            input.extend_from_slice(&h);
        } else {
            input.extend(std::iter::repeat_n(F::zero(), e));
        }
        let (v, tape) = model.value_net.forward(&params.value, &input)?;
        let (l, dl) = mse(v[ep.attribute], F::of(f64::from(ep.reward)));
        loss += l * scale;
        let mut dv = vec![F::zero(); n_attr];
        dv[ep.attribute] = dl * scale;
        let ds = model.value_net.backward(&params.value, &tape, &dv, &mut grads.value)?;
        if model.use_embedding {
            let j = tapes.len();
            for (acc, d) in dh_acc[j].iter_mut().zip(&ds[n_attr..]) {
                *acc += *d;
            }
            if ep.updated_embedding {
                let obs = make_observation::<F>(n_attr, ep.attribute, ep.reward)?;
                let (h2, c2, t) = model.embed.step(&params.embed, &h, &c, obs.as_slice())?;
                h = h2;
                c = c2;
                tapes.push(t);
                dh_acc.push(vec![F::zero(); e]);
            }
        }
    }
    if model.use_embedding && !tapes.is_empty() {
        let mut dh = vec![F::zero(); e];
        let mut dc = vec![F::zero(); e];
        for j in (0..tapes.len()).rev() {
            for (d, a) in dh.iter_mut().zip(&dh_acc[j + 1]) {
                *d += *a;
            }
            let (dh_prev, dc_prev, _) = model.embed.backward(&params.embed, &tapes[j], &dh, &dc, &mut grads.embed)?;
            dh = dh_prev;
            dc = dc_prev;
        }
    }
    Ok(LossOutput { loss, grads })
}

/// `R = −(1/M) Σ_eval (V(s_k)[a_k] − r_k)²`, with V treated as a fixed function.
pub fn evaluation_return<F: Scalar>(
    record: &SequenceRecord<F>,
    model: &SpeakerModel,
    value_params: &crate::diffkit::ParamBlock<F>,
) -> Result<F> {
    let mut total = F::zero();
    let mut m = 0usize;
    for ep in record.episodes.iter().filter(|e| e.phase == Phase::Evaluation) {
        let v = model.value_estimate(&ep.state, value_params)?;
        total += mse(v[ep.attribute], F::of(f64::from(ep.reward))).0;
        m += 1;
    }
    if m == 0 {
        return Err(Error::invalid("no evaluation episodes in record"));
    }
    Ok(-total / F::of(m as f64))
}

#[derive(Debug, Clone)]
pub struct PolicyLossOutput<F> {
    pub loss: F,
    pub grads: SpeakerParams<F>,
    pub ret: F,
}

/// REINFORCE loss `(1/N) Σ_practice −(R − b) log π_S(s_t)[a_t]`.
///
/// `R` comes from [`evaluation_return`] and is a constant here, as are the
/// recorded states `s_t`: only the policy block receives gradient.
pub fn active_policy_loss<F: Scalar>(
    record: &SequenceRecord<F>,
    model: &SpeakerModel,
    params: &SpeakerParams<F>,
    baseline: F,
) -> Result<PolicyLossOutput<F>> {
    let n = record.n_practice();
    if n == 0 {
        return Err(Error::invalid("active policy loss needs at least one practice episode"));
    }
    let ret = evaluation_return(record, model, &params.value)?;
    let advantage = ret - baseline;
    let scale = F::one() / F::of(n as f64);
    let mut grads = params.zeros_like();
    let mut loss = F::zero();
    for ep in record.episodes.iter().filter(|e| e.phase == Phase::Practice) {
        let (logits, tape) = model.policy_net.forward(&params.policy, ep.state.as_slice())?;
        let (logp, dlogp) = softmax_logprob_grad(&logits, ep.attribute)?;
        loss -= advantage * logp * scale;
        let dlogits: Vec<F> = dlogp.iter().map(|&g| -advantage * g * scale).collect();
        model.policy_net.backward(&params.policy, &tape, &dlogits, &mut grads.policy)?;
    }
    Ok(PolicyLossOutput { loss, grads, ret })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    MovingAverage,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Total number of training sequences.
    pub budget: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub baseline: BaselineMode,
    pub baseline_decay: f64,
    /// Optimizer steps per log row.
    pub log_interval: usize,
    /// Optimizer steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSettings {
            budget: 20_000,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            baseline: BaselineMode::MovingAverage,
            baseline_decay: 0.99,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub mean_eval_reward: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub r_mean: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,mean_eval_reward,value_loss,policy_loss,R_mean";

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.mean_eval_reward, self.value_loss, self.policy_loss, self.r_mean
        )
    }
}

pub struct TrainContext<'a, F> {
    pub speaker_store: &'a FeatureStore<F>,
    pub listener_store: &'a FeatureStore<F>,
    pub population: &'a [ListenerSpec<F>],
    pub sequence: SequenceConfig,
    pub seeds: SeedTree,
}

struct SequenceOutcome<F> {
    eval_reward: f64,
    value_loss: F,
    policy_loss: F,
    ret: F,
    grads: SpeakerParams<F>,
}

/// Trains `speaker` in place on listeners drawn from `ctx.population`.
///
/// Each optimizer step rolls out a minibatch of sequences (in parallel when
/// a rayon pool with several threads is active), then sums their gradients
/// in sequence order, so results do not depend on the thread count.
/// `on_checkpoint` is called every `checkpoint_interval` steps.
pub fn train<F: Scalar>(
    settings: &TrainSettings,
    speaker: &mut SpeakerBundle<F>,
    ctx: &TrainContext<'_, F>,
    mut on_checkpoint: impl FnMut(usize, &SpeakerBundle<F>) -> Result<()>,
) -> Result<Vec<TrainLogRow>> {
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if ctx.population.is_empty() {
        return Err(Error::invalid("empty training population"));
    }
    let model = speaker.model.clone();
    let active = matches!(model.kind, crate::PolicyKind::Active);
    let adam = settings.adam();
    let mut opt_embed = Adam::new(adam, speaker.params.embed.len())?;
    let mut opt_value = Adam::new(adam, speaker.params.value.len())?;
    let mut opt_policy = Adam::new(adam, speaker.params.policy.len())?;
    let mut baseline: Option<F> = match settings.baseline {
        BaselineMode::Raw => Some(F::zero()),
        BaselineMode::MovingAverage => None,
    };
    let decay = F::of(settings.baseline_decay);

    let n_steps = settings.budget.div_ceil(settings.batch_size);
    let mut log = Vec::new();
    let mut acc = [0.0f64; 4];
    let mut acc_n = 0usize;
    let mut acc_steps = 0usize;
    for step in 0..n_steps {
        let lo = step * settings.batch_size;
        let hi = (lo + settings.batch_size).min(settings.budget);
        let params = &speaker.params;
        let records: Vec<SequenceRecord<F>> = (lo..hi)
            .into_par_iter()
            .map(|i| {
                let mut rng = ctx.seeds.stream(Purpose::TrainSequence, i as u64);
                let li = rng.random_range(0..ctx.population.len());
                let bundle = SpeakerBundle {
                    model: model.clone(),
                    params: params.clone(),
                };
                run_sequence(
                    &ctx.population[li],
                    li,
                    &bundle,
                    ctx.speaker_store,
                    ctx.listener_store,
                    ctx.sequence,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        let b = match (baseline, active) {
            (Some(b), _) => b,
            (None, true) => {
                let rs = records
                    .iter()
                    .map(|r| evaluation_return(r, &model, &params.value))
                    .collect::<Result<Vec<F>>>()?;
                rs.iter().copied().sum::<F>() / F::of(rs.len() as f64)
            }
            (None, false) => F::zero(),
        };

        let outcomes: Vec<SequenceOutcome<F>> = records
            .par_iter()
            .map(|rec| {
                let v = value_loss(rec, &model, params)?;
                let mut grads = v.grads;
                let (policy_loss, ret) = if active && rec.n_practice() > 0 {
                    let p = active_policy_loss(rec, &model, params, b)?;
                    grads.policy = p.grads.policy;
                    (p.loss, p.ret)
                } else {
                    (F::zero(), evaluation_return(rec, &model, &params.value)?)
                };
                Ok(SequenceOutcome {
                    eval_reward: rec.mean_eval_reward(),
                    value_loss: v.loss,
                    policy_loss,
                    ret,
                    grads,
                })
            })
            .collect::<Result<_>>()?;

        let inv = F::one() / F::of(outcomes.len() as f64);
        let mut total = speaker.params.zeros_like();
        let mut ret_sum = F::zero();
        for o in &outcomes {
            if !o.value_loss.is_finite() || !o.policy_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    diagnostics: format!(
                        "value_loss={} policy_loss={} R={}",
                        o.value_loss, o.policy_loss, o.ret
                    ),
                });
            }
            total.add_scaled(inv, &o.grads)?;
            ret_sum += o.ret;
            acc[0] += o.eval_reward;
            acc[1] += o.value_loss.as_f64();
            acc[2] += o.policy_loss.as_f64();
            acc[3] += o.ret.as_f64();
            acc_n += 1;
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                diagnostics: "non-finite gradient".into(),
            });
        }
        opt_value.step(&mut speaker.params.value, &total.value)?;
        if model.use_embedding {
            opt_embed.step(&mut speaker.params.embed, &total.embed)?;
        }
        if active {
            opt_policy.step(&mut speaker.params.policy, &total.policy)?;
        }
        if settings.baseline == BaselineMode::MovingAverage && active {
            let batch_mean = ret_sum * inv;
            baseline = Some(match baseline {
                None => batch_mean,
                Some(old) => decay * old + (F::one() - decay) * batch_mean,
            });
        }

        acc_steps += 1;
        if acc_steps == settings.log_interval.max(1) || step + 1 == n_steps {
            let n = acc_n as f64;
            log.push(TrainLogRow {
                step: step + 1,
                mean_eval_reward: acc[0] / n,
                value_loss: acc[1] / n,
                policy_loss: acc[2] / n,
                r_mean: acc[3] / n,
            });
            log::debug!("step {} mean eval reward {:.4} value loss {:.4}", step + 1, acc[0] / n, acc[1] / n);
            acc = [0.0; 4];
            acc_n = 0;
            acc_steps = 0;
        }
        if settings.checkpoint_interval > 0 && (step + 1) % settings.checkpoint_interval == 0 {
            on_checkpoint(step + 1, speaker)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrspace::{synth_features, AttributeSpace, Role};
    use crate::diffkit::grad_check;
    use crate::listenerpop::Levels;
    use crate::rng::rng_from_seed;
    use crate::speaker::SpeakerConfig;
    use crate::PolicyKind;

    fn small_config(policy: &str, eps: Option<f64>) -> SpeakerConfig {
        SpeakerConfig {
            policy: policy.into(),
            epsilon: eps,
            embedding_dim: 4,
            value_hidden: vec![6],
            policy_hidden: vec![5],
            ..SpeakerConfig::default()
        }
    }

    fn world(n_attr: usize) -> (FeatureStore<f64>, FeatureStore<f64>) {
        let s = synth_features::<f64>(6, 30, &AttributeSpace::indexed(n_attr).unwrap(), 0.05, 3).unwrap();
        let l = s.clone().with_role(Role::Listener);
        (s, l)
    }

    fn listener(mask: Vec<bool>) -> ListenerSpec<f64> {
        ListenerSpec::from_mask(0, mask, &Levels::default())
    }

    fn random_record(policy: &str, eps: Option<f64>, seed: u64) -> (SpeakerBundle<f64>, SequenceRecord<f64>) {
        let (s, l) = world(5);
        let b = SpeakerBundle::init(&small_config(policy, eps), 5, &mut rng_from_seed(seed)).unwrap();
        let lis = listener(vec![true, false, true, false, true]);
        let rec = run_sequence(&lis, 0, &b, &s, &l, SequenceConfig::new(4, 3).unwrap(), &mut rng_from_seed(seed + 100)).unwrap();
        (b, rec)
    }

    #[test]
    fn sequence_structure() {
        let (_, rec) = random_record("epsilon_greedy", Some(0.3), 1);
        assert_eq!(rec.episodes.len(), 7);
        assert!(rec.episodes[..4].iter().all(|e| e.phase == Phase::Practice && e.updated_embedding));
        assert!(rec.episodes[4..].iter().all(|e| e.phase == Phase::Evaluation && !e.updated_embedding));
        for e in &rec.episodes {
            assert_eq!(e.reward == 1, e.guess == e.pair.target_id);
            assert_eq!(e.state.embedding().len(), 4);
        }
        // evaluation episodes all see the frozen post-practice embedding
        for e in &rec.episodes[4..] {
            assert_eq!(e.state.embedding(), rec.h_final.as_slice());
        }
    }

    #[test]
    fn no_practice_means_zero_embedding() {
        let (s, l) = world(5);
        let b = SpeakerBundle::<f64>::init(&small_config("epsilon_greedy", Some(0.3)), 5, &mut rng_from_seed(1)).unwrap();
        let lis = listener(vec![true; 5]);
        let rec = run_sequence(&lis, 0, &b, &s, &l, SequenceConfig::new(0, 5).unwrap(), &mut rng_from_seed(2)).unwrap();
        assert!(rec.episodes.iter().all(|e| e.state.embedding().iter().all(|&v| v == 0.0)));
        assert_eq!(rec.h_final, vec![0.0; 4]);
    }

    #[test]
    fn rollouts_ignore_cluster_id() {
        let (s, l) = world(5);
        let b = SpeakerBundle::<f64>::init(&small_config("active", None), 5, &mut rng_from_seed(1)).unwrap();
        let a = ListenerSpec::from_mask(0, vec![true, false, true, true, false], &Levels::default());
        let mut z = a.clone();
        z.cluster_id = 17;
        let cfg = SequenceConfig::new(6, 4).unwrap();
        let ra = run_sequence(&a, 0, &b, &s, &l, cfg, &mut rng_from_seed(5)).unwrap();
        let rz = run_sequence(&z, 0, &b, &s, &l, cfg, &mut rng_from_seed(5)).unwrap();
        assert_eq!(ra.episodes, rz.episodes);
        assert_eq!(rz.cluster_id, 17);
    }

    #[test]
    fn omniscient_listener_with_oracle_choice_always_wins() {
        let (s, l) = world(6);
        let lis = ListenerSpec::from_mask(0, vec![true; 6], &Levels::default());
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let pair = sample_pair(&s, &mut rng).unwrap();
            let diff = s.pair_difference(pair).unwrap();
            let a = crate::diffkit::argmax(&diff).unwrap();
            if diff[a] <= 0.02 {
                continue;
            }
            let g = listener_guess(&lis, a, &l, pair, &mut rng).unwrap();
            assert_eq!(g.guess, pair.target_id);
        }
    }

    #[test]
    fn random_listener_is_zero_mean() {
        let (s, l) = world(5);
        let levels = Levels {
            understood: crate::listenerpop::UnderstandingLevel { delta: 1.0, p: 1.0 },
            misunderstood: crate::listenerpop::UnderstandingLevel { delta: 1.0, p: 0.25 },
        };
        let lis = ListenerSpec::from_mask(0, vec![false; 5], &levels);
        let b = SpeakerBundle::<f64>::init(&small_config("epsilon_greedy", Some(0.3)), 5, &mut rng_from_seed(1)).unwrap();
        let cfg = SequenceConfig::new(0, 100).unwrap();
        let mut total = 0.0;
        for i in 0..100 {
            let rec = run_sequence(&lis, 0, &b, &s, &l, cfg, &mut rng_from_seed(i)).unwrap();
            total += rec.episodes.iter().map(|e| f64::from(e.reward)).sum::<f64>();
        }
        let mean = total / 10_000.0;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn value_loss_trivial_cases() {
        let (b0, mut rec) = random_record("epsilon_greedy", Some(0.3), 4);
        let zero = SpeakerParams::zeros(&b0.model);
        for e in &mut rec.episodes {
            e.reward = 1;
        }
        assert!((value_loss(&rec, &b0.model, &zero).unwrap().loss - 1.0).abs() < 1e-12);

        // a value head whose output bias equals the reward is exact
        let mut exact = zero.clone();
        for v in exact.value.tensor_mut("b1").unwrap() {
            *v = 1.0;
        }
        assert_eq!(value_loss(&rec, &b0.model, &exact).unwrap().loss, 0.0);
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (b, rec) = random_record("epsilon_greedy", Some(0.5), seed);
            let out = value_loss(&rec, &b.model, &b.params).unwrap();
            assert!(out.grads.policy.values().iter().all(|&g| g == 0.0));
            let rv = grad_check(&b.params.value, &out.grads.value, 1e-5, |q| {
                let p = SpeakerParams { value: q.clone(), ..b.params.clone() };
                Ok(value_loss(&rec, &b.model, &p)?.loss)
            })
            .unwrap();
            assert!(rv.max_rel_err < 1e-4, "value {rv:?}");
            let re = grad_check(&b.params.embed, &out.grads.embed, 1e-5, |q| {
                let p = SpeakerParams { embed: q.clone(), ..b.params.clone() };
                Ok(value_loss(&rec, &b.model, &p)?.loss)
            })
            .unwrap();
            assert!(re.max_rel_err < 1e-4, "embed {re:?}");
        }
    }

    #[test]
    fn embedding_gradient_with_updates_during_evaluation() {
        let (s, l) = world(5);
        let mut cfg = small_config("epsilon_greedy", Some(0.5));
        cfg.embed_during_eval = true;
        let b = SpeakerBundle::<f64>::init(&cfg, 5, &mut rng_from_seed(8)).unwrap();
        let lis = listener(vec![true, false, true, false, true]);
        let rec = run_sequence(&lis, 0, &b, &s, &l, SequenceConfig::new(3, 3).unwrap(), &mut rng_from_seed(9)).unwrap();
        assert!(rec.episodes.iter().all(|e| e.updated_embedding));
        let out = value_loss(&rec, &b.model, &b.params).unwrap();
        let re = grad_check(&b.params.embed, &out.grads.embed, 1e-5, |q| {
            let p = SpeakerParams { embed: q.clone(), ..b.params.clone() };
            Ok(value_loss(&rec, &b.model, &p)?.loss)
        })
        .unwrap();
        assert!(re.max_rel_err < 1e-4, "{re:?}");
    }

    #[test]
    fn policy_loss_only_touches_policy() {
        let (b, rec) = random_record("active", None, 2);
        let out = active_policy_loss(&rec, &b.model, &b.params, 0.1).unwrap();
        assert!(out.ret <= 0.0);
        assert!(out.grads.value.values().iter().all(|&g| g == 0.0));
        assert!(out.grads.embed.values().iter().all(|&g| g == 0.0));
        let r = grad_check(&b.params.policy, &out.grads.policy, 1e-5, |q| {
            let p = SpeakerParams { policy: q.clone(), ..b.params.clone() };
            Ok(active_policy_loss(&rec, &b.model, &p, 0.1)?.loss)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn perfect_value_gives_zero_policy_gradient() {
        let (b, mut rec) = random_record("active", None, 3);
        let mut params = b.params.clone();
        params.value.fill_zero();
        for v in params.value.tensor_mut("b1").unwrap() {
            *v = 1.0;
        }
        for e in &mut rec.episodes {
            e.reward = 1;
        }
        let out = active_policy_loss(&rec, &b.model, &params, 0.0).unwrap();
        assert_eq!(out.ret, 0.0);
        assert!(out.grads.policy.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn policy_loss_needs_practice() {
        let (s, l) = world(5);
        let b = SpeakerBundle::<f64>::init(&small_config("active", None), 5, &mut rng_from_seed(1)).unwrap();
        let rec = run_sequence(&listener(vec![true; 5]), 0, &b, &s, &l, SequenceConfig::new(0, 2).unwrap(), &mut rng_from_seed(1)).unwrap();
        assert!(active_policy_loss(&rec, &b.model, &b.params, 0.0).is_err());
    }

    fn tiny_settings(budget: usize) -> TrainSettings {
        TrainSettings {
            budget,
            batch_size: 4,
            lr: 1e-2,
            log_interval: 2,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let (s, l) = world(5);
        let pop = vec![listener(vec![true; 5])];
        let mut b = SpeakerBundle::<f64>::init(&small_config("active", None), 5, &mut rng_from_seed(1)).unwrap();
        let before = b.params.clone();
        let ctx = TrainContext {
            speaker_store: &s,
            listener_store: &l,
            population: &pop,
            sequence: SequenceConfig::default(),
            seeds: SeedTree::new(1),
        };
        let log = train(&tiny_settings(0), &mut b, &ctx, |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(b.params, before);
    }

    #[test]
    fn training_is_deterministic_and_respects_policy_kind() {
        let (s, l) = world(5);
        let pop = vec![listener(vec![true, false, true, true, false]), listener(vec![false, true, true, false, true])];
        let run = |policy: &str, eps| {
            let mut b = SpeakerBundle::<f64>::init(&small_config(policy, eps), 5, &mut rng_from_seed(1)).unwrap();
            let before = b.params.clone();
            let ctx = TrainContext {
                speaker_store: &s,
                listener_store: &l,
                population: &pop,
                sequence: SequenceConfig::new(3, 2).unwrap(),
                seeds: SeedTree::new(9),
            };
            let mut ck = 0;
            let mut settings = tiny_settings(24);
            settings.checkpoint_interval = 3;
            let log = train(&settings, &mut b, &ctx, |_, _| {
                ck += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(ck, 2);
            (before, b, log)
        };
        let (_, a1, l1) = run("active", None);
        let (_, a2, l2) = run("active", None);
        assert_eq!(l1, l2);
        assert_eq!(a1.params, a2.params);
        assert_eq!(l1.len(), 3);
        assert_eq!(l1.last().unwrap().step, 6);

        let (before, r, _) = run("random_agent", None);
        assert_eq!(r.params.policy, before.policy);
        assert_ne!(r.params.value, before.value);
        assert!(matches!(r.model.kind, PolicyKind::RandomAgent));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (s, l) = world(5);
        let pop = vec![listener(vec![true, false, true, true, false])];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut b = SpeakerBundle::<f64>::init(&small_config("epsilon_greedy", Some(0.3)), 5, &mut rng_from_seed(2)).unwrap();
                let ctx = TrainContext {
                    speaker_store: &s,
                    listener_store: &l,
                    population: &pop,
                    sequence: SequenceConfig::new(3, 2).unwrap(),
                    seeds: SeedTree::new(4),
                };
                train(&tiny_settings(16), &mut b, &ctx, |_, _| Ok(())).unwrap();
                b.params
            })
        };
        assert_eq!(run(1), run(3));
    }
}
