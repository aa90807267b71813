//! Finite-difference checks of every analytic gradient the trainer uses.

use std::sync::Arc;

use rand::Rng;

use crate::attrspace::{synth_features, AttributeSpace, Role};
use crate::diffkit::{grad_check, softmax_logprob_grad, GradCheckReport, Layout, LstmCell, LstmSpec, Mlp, MlpSpec, ParamBlock};
use crate::listenerpop::{Levels, ListenerSpec};
use crate::rng::{Purpose, SeedTree, StreamRng};
use crate::speaker::{SpeakerBundle, SpeakerConfig, SpeakerParams};
use crate::trainer::{active_policy_loss, run_sequence, value_loss, SequenceConfig};
use crate::{Error, Result};

use super::config::GradcheckConfig;

/// Relative error at or above which a check fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn uniform_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds small uniform offsets to every parameter. Zero-initialized biases
/// can leave ReLU pre-activations exactly at the kink, where central
/// differences do not measure the one-sided derivative.
fn jitter(p: &mut ParamBlock<f64>, rng: &mut StreamRng) {
    for v in p.values_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
}

fn check_mlp(g: &GradcheckConfig, rng: &mut StreamRng) -> Result<GradCheckReport> {
    let net = Mlp::new(MlpSpec {
        input_dim: g.n_attributes + g.embedding_dim,
        hidden_dims: g.hidden.clone(),
        output_dim: g.n_attributes,
    })?;
    let mut params: ParamBlock<f64> = net.init_params(rng);
    jitter(&mut params, rng);
    let x = uniform_vec(rng, net.spec().input_dim);
    let w = uniform_vec(rng, g.n_attributes);
    let (_, tape) = net.forward(&params, &x)?;
    let mut grads = params.zeros_like();
    net.backward(&params, &tape, &w, &mut grads)?;
    grad_check(&params, &grads, g.epsilon, |q| Ok(dot(&net.predict(q, &x)?, &w)))
}

fn check_lstm(g: &GradcheckConfig, rng: &mut StreamRng) -> Result<GradCheckReport> {
    let e = g.embedding_dim;
    let cell = LstmCell::new(LstmSpec {
        input_dim: g.n_attributes,
        hidden_dim: e,
    })?;
    let params: ParamBlock<f64> = cell.init_params(rng);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| uniform_vec(rng, g.n_attributes)).collect();
    let coef: Vec<Vec<f64>> = (0..3).map(|_| uniform_vec(rng, e)).collect();
    let loss = |q: &ParamBlock<f64>| -> Result<f64> {
        let (mut h, mut c) = (vec![0.0; e], vec![0.0; e]);
        let mut total = 0.0;
        for (x, a) in xs.iter().zip(&coef) {
            let (h2, c2, _) = cell.step(q, &h, &c, x)?;
            total += dot(&h2, a);
            h = h2;
            c = c2;
        }
        Ok(total)
    };
    let (mut h, mut c) = (vec![0.0; e], vec![0.0; e]);
    let mut tapes = Vec::new();
    for x in &xs {
        let (h2, c2, t) = cell.step(&params, &h, &c, x)?;
        tapes.push(t);
        h = h2;
        c = c2;
    }
    let mut grads = params.zeros_like();
    let (mut dh, mut dc) = (vec![0.0; e], vec![0.0; e]);
    for (t, a) in tapes.iter().zip(&coef).rev() {
        for (d, v) in dh.iter_mut().zip(a) {
            *d += v;
        }
        let (dh_prev, dc_prev, _) = cell.backward(&params, t, &dh, &dc, &mut grads)?;
        dh = dh_prev;
        dc = dc_prev;
    }
    grad_check(&params, &grads, g.epsilon, loss)
}

fn check_softmax(g: &GradcheckConfig, rng: &mut StreamRng) -> Result<GradCheckReport> {
    let layout = Arc::new(Layout::new(vec![("logits".into(), vec![g.n_attributes])]));
    let logits = ParamBlock::from_values(layout, uniform_vec(rng, g.n_attributes).iter().map(|v| 3.0 * v).collect())?;
    let target = rng.random_range(0..g.n_attributes);
    let (_, grad) = softmax_logprob_grad(logits.values(), target)?;
    let grads = ParamBlock::from_values(logits.layout().clone(), grad)?;
    grad_check(&logits, &grads, g.epsilon, |q| Ok(softmax_logprob_grad(q.values(), target)?.0))
}

fn speaker(g: &GradcheckConfig, policy: &str, rng: &mut StreamRng) -> Result<SpeakerBundle<f64>> {
    let cfg = SpeakerConfig {
        policy: policy.into(),
        epsilon: (policy == "epsilon_greedy").then_some(0.5),
        embedding_dim: g.embedding_dim,
        value_hidden: g.hidden.clone(),
        policy_hidden: g.hidden.clone(),
        ..SpeakerConfig::default()
    };
    let mut b = SpeakerBundle::init(&cfg, g.n_attributes, rng)?;
    jitter(&mut b.params.embed, rng);
    jitter(&mut b.params.value, rng);
    jitter(&mut b.params.policy, rng);
    Ok(b)
}

fn sequence(
    g: &GradcheckConfig,
    bundle: &SpeakerBundle<f64>,
    rng: &mut StreamRng,
) -> Result<crate::trainer::SequenceRecord<f64>> {
    let space = AttributeSpace::indexed(g.n_attributes)?;
    let store = synth_features::<f64>(4, 24, &space, 0.05, rng.random())?;
    let listener_store = store.clone().with_role(Role::Listener);
    let mask = (0..g.n_attributes).map(|_| rng.random::<bool>()).collect();
    let listener = ListenerSpec::from_mask(0, mask, &Levels::default());
    let cfg = SequenceConfig::new(g.n_practice, g.m_eval)?;
    run_sequence(&listener, 0, bundle, &store, &listener_store, cfg, rng)
}

/// Joint value loss: value head and recurrent cell, each block checked
/// with the other held fixed.
fn check_value_loss(g: &GradcheckConfig, rng: &mut StreamRng) -> Result<(GradCheckReport, GradCheckReport)> {
    let b = speaker(g, "epsilon_greedy", rng)?;
    let rec = sequence(g, &b, rng)?;
    let out = value_loss(&rec, &b.model, &b.params)?;
    let value = grad_check(&b.params.value, &out.grads.value, g.epsilon, |q| {
        let p = SpeakerParams {
            value: q.clone(),
            ..b.params.clone()
        };
        Ok(value_loss(&rec, &b.model, &p)?.loss)
    })?;
    let embed = grad_check(&b.params.embed, &out.grads.embed, g.epsilon, |q| {
        let p = SpeakerParams {
            embed: q.clone(),
            ..b.params.clone()
        };
        Ok(value_loss(&rec, &b.model, &p)?.loss)
    })?;
    Ok((value, embed))
}

fn check_policy_loss(g: &GradcheckConfig, rng: &mut StreamRng) -> Result<GradCheckReport> {
    let b = speaker(g, "active", rng)?;
    let rec = sequence(g, &b, rng)?;
    let baseline = rng.random_range(-1.0..0.0);
    let out = active_policy_loss(&rec, &b.model, &b.params, baseline)?;
    grad_check(&b.params.policy, &out.grads.policy, g.epsilon, |q| {
        let p = SpeakerParams {
            policy: q.clone(),
            ..b.params.clone()
        };
        Ok(active_policy_loss(&rec, &b.model, &p, baseline)?.loss)
    })
}

/// Runs every check; each draws from its own stream under `seed`.
pub fn run_gradcheck_suite(g: &GradcheckConfig, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let tree = SeedTree::new(seed);
    let stream = |i| tree.stream(Purpose::GradCheck, i);
    let mut out = vec![
        ("mlp".to_string(), check_mlp(g, &mut stream(0))?),
        ("lstm_unroll3".to_string(), check_lstm(g, &mut stream(1))?),
        ("softmax_logprob".to_string(), check_softmax(g, &mut stream(2))?),
    ];
    let (value, embed) = check_value_loss(g, &mut stream(3))?;
    out.push(("value_loss.value".to_string(), value));
    out.push(("value_loss.embedding".to_string(), embed));
    out.push(("policy_loss".to_string(), check_policy_loss(g, &mut stream(4))?));
    Ok(out)
}

/// The worst check as an error when it reaches [`GRADCHECK_TOLERANCE`].
pub fn gradcheck_verdict(reports: &[(String, GradCheckReport)]) -> Result<()> {
    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err));
    match worst {
        Some((name, r)) if !(r.max_rel_err < GRADCHECK_TOLERANCE) => Err(Error::GradCheck {
            max_rel_err: r.max_rel_err,
            worst: format!("{name}:{}", r.worst),
        }),
        _ => Ok(()),
    }
}
