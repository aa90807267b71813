//! The speaker: recurrent agent embedding, per-attribute value head, policy
//! head, and the five attribute-selection policies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{
    argmax, softmax, Checkpoint, LstmCell, LstmSpec, Mlp, MlpSpec, ParamBlock,
};
use crate::{Error, Result, Scalar};

/// How the speaker picks attributes during practice episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    RandomAgent,
    Reactive,
    RandomSampling,
    EpsilonGreedy { epsilon: f64 },
    Active,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::RandomAgent => "random_agent",
            PolicyKind::Reactive => "reactive",
            PolicyKind::RandomSampling => "random_sampling",
            PolicyKind::EpsilonGreedy { .. } => "epsilon_greedy",
            PolicyKind::Active => "active",
        }
    }

    /// Builds a kind from its name; `epsilon` is required for and only
    /// accepted by `epsilon_greedy`.
    pub fn from_name(name: &str, epsilon: Option<f64>) -> Result<Self> {
        let kind = match name {
            "random_agent" => PolicyKind::RandomAgent,
            "reactive" => PolicyKind::Reactive,
            "random_sampling" => PolicyKind::RandomSampling,
            "active" => PolicyKind::Active,
            "epsilon_greedy" => {
                let epsilon = epsilon
                    .ok_or_else(|| Error::invalid("epsilon_greedy needs an epsilon"))?;
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(Error::invalid(format!("epsilon {epsilon} outside [0,1]")));
                }
                return Ok(PolicyKind::EpsilonGreedy { epsilon });
            }
            other => return Err(Error::invalid(format!("unknown policy kind {other:?}"))),
        };
        if epsilon.is_some() {
            return Err(Error::invalid(format!("epsilon is only valid for epsilon_greedy, not {name}")));
        }
        Ok(kind)
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            PolicyKind::EpsilonGreedy { epsilon } => Some(*epsilon),
            _ => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Practice,
    Evaluation,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "practice" => Ok(Phase::Practice),
            "evaluation" => Ok(Phase::Evaluation),
            _ => Err(Error::invalid(format!("unknown phase {s:?}"))),
        }
    }
}

/// One-hot observation of the last game: `reward` at index `attribute`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector<F>(Vec<F>);

impl<F: Scalar> ObservationVector<F> {
    pub fn as_slice(&self) -> &[F] {
        &self.0
    }
}

pub fn make_observation<F: Scalar>(
    n_attributes: usize,
    attribute: usize,
    reward: i8,
) -> Result<ObservationVector<F>> {
    if attribute >= n_attributes {
        return Err(Error::OutOfRange {
            what: "attribute",
            index: attribute,
            len: n_attributes,
        });
    }
    if reward != 1 && reward != -1 {
        return Err(Error::invalid(format!("reward must be -1 or +1, got {reward}")));
    }
    let mut v = vec![F::zero(); n_attributes];
    v[attribute] = F::of(f64::from(reward));
    Ok(ObservationVector(v))
}

/// Recurrent summary of the listener's behaviour so far in a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEmbeddingState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
    pub step: usize,
}

impl<F: Scalar> AgentEmbeddingState<F> {
    pub fn initial(dim: usize) -> Self {
        AgentEmbeddingState {
            h: vec![F::zero(); dim],
            c: vec![F::zero(); dim],
            step: 0,
        }
    }
}

/// `[φ_S(target) − φ_S(confounder); h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerState<F> {
    values: Vec<F>,
    n_attributes: usize,
}

impl<F: Scalar> SpeakerState<F> {
    pub fn new(difference: &[F], h: &[F]) -> Self {
        let mut values = Vec::with_capacity(difference.len() + h.len());
        values.extend_from_slice(difference);
        values.extend_from_slice(h);
        SpeakerState {
            values,
            n_attributes: difference.len(),
        }
    }

    pub fn as_slice(&self) -> &[F] {
        &self.values
    }

    pub fn difference(&self) -> &[F] {
        &self.values[..self.n_attributes]
    }

    pub fn embedding(&self) -> &[F] {
        &self.values[self.n_attributes..]
    }
}

/// Per-sequence memory used by the reactive baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionHistory {
    current: Option<usize>,
    failed: Vec<bool>,
}

impl SelectionHistory {
    pub fn new(n_attributes: usize) -> Self {
        SelectionHistory {
            current: None,
            failed: vec![false; n_attributes],
        }
    }

    /// Records the outcome of using `attribute`. A negative reward marks the
    /// attribute failed and drops it as the current choice.
    pub fn record(&mut self, attribute: usize, reward: i8) {
        if reward < 0 {
            self.failed[attribute] = true;
            if self.current == Some(attribute) {
                self.current = None;
            }
        }
    }

    pub fn is_failed(&self, attribute: usize) -> bool {
        self.failed[attribute]
    }

    fn reactive_choice<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if let Some(a) = self.current {
            return a;
        }
        if self.failed.iter().all(|&f| f) {
            self.failed.iter_mut().for_each(|f| *f = false);
        }
        let open: Vec<usize> = (0..self.failed.len()).filter(|&a| !self.failed[a]).collect();
        let a = open[rng.random_range(0..open.len())];
        self.current = Some(a);
        a
    }
}

/// Architecture and switches, serializable as part of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerConfig {
    pub policy: String,
    pub epsilon: Option<f64>,
    pub embedding_dim: usize,
    pub value_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    /// When false, the speaker always sees `h = 0`.
    pub use_embedding: bool,
    /// Keep updating the embedding during evaluation episodes.
    pub embed_during_eval: bool,
    /// Reactive baseline keeps its rule in evaluation instead of acting greedily on V.
    pub reactive_in_eval: bool,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            policy: "epsilon_greedy".into(),
            epsilon: Some(0.3),
            embedding_dim: 64,
            value_hidden: vec![128, 128],
            policy_hidden: vec![128, 128],
            use_embedding: true,
            embed_during_eval: false,
            reactive_in_eval: false,
        }
    }
}

impl SpeakerConfig {
    pub fn kind(&self) -> Result<PolicyKind> {
        let eps = if self.policy == "epsilon_greedy" { self.epsilon } else { None };
        PolicyKind::from_name(&self.policy, eps)
    }
}

/// The speaker's networks without parameters.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub kind: PolicyKind,
    pub n_attributes: usize,
    pub use_embedding: bool,
    pub embed_during_eval: bool,
    pub reactive_in_eval: bool,
    pub embed: LstmCell,
    pub value_net: Mlp,
    pub policy_net: Mlp,
}

impl SpeakerModel {
    pub fn new(config: &SpeakerConfig, n_attributes: usize) -> Result<Self> {
        let kind = config.kind()?;
        if n_attributes == 0 {
            return Err(Error::invalid("empty attribute space"));
        }
        let e = config.embedding_dim;
        let embed = LstmCell::new(LstmSpec {
            input_dim: n_attributes,
            hidden_dim: e,
        })?;
        let head = |hidden: &[usize]| {
            Mlp::new(MlpSpec {
                input_dim: n_attributes + e,
                hidden_dims: hidden.to_vec(),
                output_dim: n_attributes,
            })
        };
        Ok(SpeakerModel {
            kind,
            n_attributes,
            use_embedding: config.use_embedding,
            embed_during_eval: config.embed_during_eval,
            reactive_in_eval: config.reactive_in_eval,
            embed,
            value_net: head(&config.value_hidden)?,
            policy_net: head(&config.policy_hidden)?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed.spec().hidden_dim
    }

    pub fn config(&self) -> SpeakerConfig {
        SpeakerConfig {
            policy: self.kind.name().into(),
            epsilon: self.kind.epsilon(),
            embedding_dim: self.embedding_dim(),
            value_hidden: self.value_net.spec().hidden_dims.clone(),
            policy_hidden: self.policy_net.spec().hidden_dims.clone(),
            use_embedding: self.use_embedding,
            embed_during_eval: self.embed_during_eval,
            reactive_in_eval: self.reactive_in_eval,
        }
    }

    pub fn initial_state<F: Scalar>(&self) -> AgentEmbeddingState<F> {
        AgentEmbeddingState::initial(self.embedding_dim())
    }

    /// One LSTM step on the observation. With embeddings disabled the state
    /// stays at zero and only the step counter advances.
    pub fn embed_update<F: Scalar>(
        &self,
        state: &AgentEmbeddingState<F>,
        obs: &ObservationVector<F>,
        embed_params: &ParamBlock<F>,
    ) -> Result<AgentEmbeddingState<F>> {
        if !self.use_embedding {
            if obs.0.len() != self.n_attributes {
                return Err(Error::DimensionMismatch {
                    context: "observation",
                    expected: self.n_attributes,
                    got: obs.0.len(),
                });
            }
            return Ok(AgentEmbeddingState {
                step: state.step + 1,
                ..state.clone()
            });
        }
        let (h, c, _) = self.embed.step(embed_params, &state.h, &state.c, &obs.0)?;
        Ok(AgentEmbeddingState {
            h,
            c,
            step: state.step + 1,
        })
    }

    pub fn speaker_state<F: Scalar>(
        &self,
        difference: &[F],
        embedding: &AgentEmbeddingState<F>,
    ) -> Result<SpeakerState<F>> {
        if difference.len() != self.n_attributes {
            return Err(Error::DimensionMismatch {
                context: "image-pair difference",
                expected: self.n_attributes,
                got: difference.len(),
            });
        }
        if self.use_embedding {
            Ok(SpeakerState::new(difference, &embedding.h))
        } else {
            Ok(SpeakerState::new(difference, &vec![F::zero(); self.embedding_dim()]))
        }
    }

    /// All `|A|` attribute values in one pass.
    pub fn value_estimate<F: Scalar>(&self, s: &SpeakerState<F>, value_params: &ParamBlock<F>) -> Result<Vec<F>> {
        self.value_net.predict(value_params, s.as_slice())
    }

    pub fn policy_logits<F: Scalar>(&self, s: &SpeakerState<F>, policy_params: &ParamBlock<F>) -> Result<Vec<F>> {
        self.policy_net.predict(policy_params, s.as_slice())
    }

    pub fn greedy<F: Scalar>(&self, s: &SpeakerState<F>, value_params: &ParamBlock<F>) -> Result<usize> {
        let v = self.value_estimate(s, value_params)?;
        argmax(&v).ok_or_else(|| Error::NonFinite("value estimates".into()))
    }

    pub fn select_attribute<F: Scalar, R: Rng + ?Sized>(
        &self,
        phase: Phase,
        s: &SpeakerState<F>,
        params: &SpeakerParams<F>,
        history: &mut SelectionHistory,
        rng: &mut R,
    ) -> Result<usize> {
        let n = self.n_attributes;
        match (self.kind, phase) {
            (PolicyKind::RandomAgent, _) | (PolicyKind::RandomSampling, Phase::Practice) => {
                Ok(rng.random_range(0..n))
            }
            (PolicyKind::Reactive, Phase::Practice) => Ok(history.reactive_choice(rng)),
            (PolicyKind::Reactive, Phase::Evaluation) if self.reactive_in_eval => {
                Ok(history.reactive_choice(rng))
            }
            (PolicyKind::EpsilonGreedy { epsilon }, Phase::Practice) => {
                if rng.random::<f64>() < epsilon {
                    Ok(rng.random_range(0..n))
                } else {
                    self.greedy(s, &params.value)
                }
            }
            (PolicyKind::Active, Phase::Practice) => {
                let probs = softmax(&self.policy_logits(s, &params.policy)?);
                Ok(sample_categorical(&probs, rng))
            }
            (_, Phase::Evaluation) => self.greedy(s, &params.value),
        }
    }
}

fn sample_categorical<F: Scalar, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> usize {
    let u = F::of(rng.random::<f64>());
    let mut acc = F::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Parameters of the three trainable modules.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerParams<F> {
    pub embed: ParamBlock<F>,
    pub value: ParamBlock<F>,
    pub policy: ParamBlock<F>,
}

impl<F: Scalar> SpeakerParams<F> {
    pub fn zeros(model: &SpeakerModel) -> Self {
        SpeakerParams {
            embed: model.embed.zero_params(),
            value: model.value_net.zero_params(),
            policy: model.policy_net.zero_params(),
        }
    }

    pub fn init<R: Rng + ?Sized>(model: &SpeakerModel, rng: &mut R) -> Self {
        SpeakerParams {
            embed: model.embed.init_params(rng),
            value: model.value_net.init_params(rng),
            policy: model.policy_net.init_params(rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SpeakerParams {
            embed: self.embed.zeros_like(),
            value: self.value.zeros_like(),
            policy: self.policy.zeros_like(),
        }
    }

    pub fn add_scaled(&mut self, alpha: F, other: &Self) -> Result<()> {
        self.embed.add_scaled(alpha, &other.embed)?;
        self.value.add_scaled(alpha, &other.value)?;
        self.policy.add_scaled(alpha, &other.policy)
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite() && self.value.is_finite() && self.policy.is_finite()
    }
}

/// A speaker model with its parameters; what a checkpoint stores.
#[derive(Debug, Clone)]
pub struct SpeakerBundle<F> {
    pub model: SpeakerModel,
    pub params: SpeakerParams<F>,
}

impl<F: Scalar> SpeakerBundle<F> {
    pub fn init<R: Rng + ?Sized>(config: &SpeakerConfig, n_attributes: usize, rng: &mut R) -> Result<Self> {
        let model = SpeakerModel::new(config, n_attributes)?;
        let params = SpeakerParams::init(&model, rng);
        Ok(SpeakerBundle { model, params })
    }

    pub fn zeroed(config: &SpeakerConfig, n_attributes: usize) -> Result<Self> {
        let model = SpeakerModel::new(config, n_attributes)?;
        let params = SpeakerParams::zeros(&model);
        Ok(SpeakerBundle { model, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = self.model.config();
        let mut ck = Checkpoint::new();
        ck.set_meta("policy", cfg.policy);
        if let Some(e) = cfg.epsilon {
            ck.set_meta("epsilon", format!("{e:?}"));
        }
        ck.set_meta("n_attributes", self.model.n_attributes);
        ck.set_meta("embedding_dim", cfg.embedding_dim);
        ck.set_meta("value_hidden", join_dims(&cfg.value_hidden));
        ck.set_meta("policy_hidden", join_dims(&cfg.policy_hidden));
        ck.set_meta("use_embedding", cfg.use_embedding);
        ck.set_meta("embed_during_eval", cfg.embed_during_eval);
        ck.set_meta("reactive_in_eval", cfg.reactive_in_eval);
        ck.insert_block("embed", &self.params.embed);
        ck.insert_block("value", &self.params.value);
        ck.insert_block("policy", &self.params.policy);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parse_bool = |k: &str| -> Result<bool> {
            ck.meta(k)?.parse().map_err(|_| Error::invalid(format!("checkpoint `{k}` is not a bool")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            ck.meta(k)?.parse().map_err(|_| Error::invalid(format!("checkpoint `{k}` is not an integer")))
        };
        let epsilon = match ck.meta.get("epsilon") {
            Some(e) => Some(e.parse().map_err(|_| Error::invalid("checkpoint epsilon is not a number"))?),
            None => None,
        };
        let config = SpeakerConfig {
            policy: ck.meta("policy")?.to_string(),
            epsilon,
            embedding_dim: parse_usize("embedding_dim")?,
            value_hidden: split_dims(ck.meta("value_hidden")?)?,
            policy_hidden: split_dims(ck.meta("policy_hidden")?)?,
            use_embedding: parse_bool("use_embedding")?,
            embed_during_eval: parse_bool("embed_during_eval")?,
            reactive_in_eval: parse_bool("reactive_in_eval")?,
        };
        let model = SpeakerModel::new(&config, parse_usize("n_attributes")?)?;
        let params = SpeakerParams {
            embed: ck.block("embed", model.embed.layout())?,
            value: ck.block("value", model.value_net.layout())?,
            policy: ck.block("policy", model.policy_net.layout())?,
        };
        Ok(SpeakerBundle { model, params })
    }
}

fn join_dims(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

fn split_dims(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::invalid(format!("bad layer sizes {s:?}"))))
        .collect()
}
