//! In-memory experiment stages. The CLI commands wrap these and persist
//! their results; tests call them directly.

use std::collections::BTreeMap;

use crate::attrspace::{distort_features, load_features, synth_features, AttributeSpace, FeatureStore, Role};
use crate::evalkit::{
    collect_embeddings, kmeans, mean, misunderstood_usage_rate, random_cluster_baseline, reward_curve, rollouts,
    variation_of_information, EmbeddingDataset, EvalWorld, RewardCurve, ViRow,
};
use crate::listenerpop::{make_clusters, sample_population, ClusterSpec, ListenerSpec};
use crate::rng::{Purpose, SeedTree};
use crate::speaker::SpeakerBundle;
use crate::trainer::{train, TrainContext, TrainLogRow};
use crate::{Error, Result};

use super::config::{ExperimentConfig, FeatureSource};

/// Speaker and listener feature tables with a description of where they came from.
#[derive(Debug, Clone)]
pub struct Features {
    pub space: AttributeSpace,
    pub speaker: FeatureStore<f64>,
    pub listener: FeatureStore<f64>,
    pub provenance: BTreeMap<String, String>,
}

pub fn build_features(cfg: &ExperimentConfig) -> Result<Features> {
    let f = &cfg.features;
    let space = f.attribute_space()?;
    let data = SeedTree::new(cfg.data_seed);
    let mut provenance = BTreeMap::new();
    let speaker = match f.source {
        FeatureSource::Synthetic => {
            provenance.insert(
                "speaker_features".into(),
                format!(
                    "synth_features(n_classes={}, n_images={}, noise_sigma={}, seed={})",
                    f.n_classes,
                    f.n_images,
                    f.noise_sigma,
                    data.seed(Purpose::SpeakerFeatures)
                ),
            );
            synth_features(f.n_classes, f.n_images, &space, f.noise_sigma, data.seed(Purpose::SpeakerFeatures))?
        }
        FeatureSource::Files => {
            let path = f.speaker_file.as_ref().ok_or_else(|| Error::config("features.speaker_file", "missing"))?;
            provenance.insert("speaker_features".into(), format!("file {}", path.display()));
            load_features(path, Role::Speaker, &space)?
        }
    };
    let listener = if f.mismatch {
        let seed = data.seed(Purpose::ListenerFeatures);
        provenance.insert(
            "listener_features".into(),
            format!(
                "distort_features(warp_strength={}, noise_sigma={}, seed={seed})",
                f.warp_strength, f.mismatch_noise
            ),
        );
        distort_features(&speaker, f.warp_strength, f.mismatch_noise, seed)?
    } else if let Some(path) = &f.listener_file {
        provenance.insert("listener_features".into(), format!("file {}", path.display()));
        let l = load_features(path, Role::Listener, &space)?;
        if l.len() != speaker.len() {
            return Err(Error::config(
                "features.listener_file",
                format!("{} images, speaker file has {}", l.len(), speaker.len()),
            ));
        }
        l
    } else {
        provenance.insert("listener_features".into(), "identical to speaker features".into());
        speaker.clone().with_role(Role::Listener)
    };
    Ok(Features {
        space,
        speaker,
        listener,
        provenance,
    })
}

#[derive(Debug, Clone)]
pub struct Populations {
    pub clusters: Vec<ClusterSpec>,
    pub train: Vec<ListenerSpec<f64>>,
    /// Novel listeners from the same clusters, used for every evaluation.
    pub test: Vec<ListenerSpec<f64>>,
}

pub fn build_populations(cfg: &ExperimentConfig, space: &AttributeSpace) -> Result<Populations> {
    let p = &cfg.population;
    let data = SeedTree::new(cfg.data_seed);
    let clusters = make_clusters(p.n_clusters, space, p.q_low, p.q_high, p.mode, data.seed(Purpose::Clusters))?;
    let levels = p.levels();
    let train = sample_population(&clusters, p.per_cluster, &levels, data.seed(Purpose::TrainPopulation))?;
    let test = sample_population(&clusters, p.test_per_cluster, &levels, data.seed(Purpose::TestPopulation))?;
    Ok(Populations { clusters, train, test })
}

/// Everything a run needs besides the trained speakers.
#[derive(Debug, Clone)]
pub struct World {
    pub features: Features,
    pub populations: Populations,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let features = build_features(cfg)?;
        let populations = build_populations(cfg, &features.space)?;
        Ok(World { features, populations })
    }

    pub fn eval(&self) -> EvalWorld<'_, f64> {
        EvalWorld {
            speaker_store: &self.features.speaker,
            listener_store: &self.features.listener,
            population: &self.populations.test,
        }
    }
}

/// Trains the speaker for one seed. `on_checkpoint` receives intermediate
/// snapshots as configured by `training.checkpoint_interval`.
pub fn train_seed(
    cfg: &ExperimentConfig,
    features: &Features,
    train_population: &[ListenerSpec<f64>],
    seed: u64,
    on_checkpoint: impl FnMut(usize, &SpeakerBundle<f64>) -> Result<()>,
) -> Result<(SpeakerBundle<f64>, Vec<TrainLogRow>)> {
    let tree = SeedTree::new(seed);
    let mut init_rng = tree.stream(Purpose::Init, 0);
    let mut bundle = SpeakerBundle::init(&cfg.speaker, features.space.count(), &mut init_rng)?;
    let ctx = TrainContext {
        speaker_store: &features.speaker,
        listener_store: &features.listener,
        population: train_population,
        sequence: cfg.game,
        seeds: tree,
    };
    let log = train(&cfg.training, &mut bundle, &ctx, on_checkpoint)?;
    Ok((bundle, log))
}

pub fn evaluate_reward_curve(
    cfg: &ExperimentConfig,
    world: EvalWorld<'_, f64>,
    models: &[(u64, &SpeakerBundle<f64>)],
) -> Result<RewardCurve> {
    reward_curve(
        models,
        world,
        &cfg.evaluation.n_practice_grid,
        cfg.game.m_eval,
        cfg.evaluation.sequences_per_point,
    )
}

/// Stream tag for embedding collection at `n_practice`, distinct from the
/// reward-curve tags (which are the raw `n_practice` values).
fn embedding_tag(n_practice: usize) -> u64 {
    (1u64 << 32) | n_practice as u64
}

const USAGE_TAG: u64 = 2u64 << 32;

#[derive(Debug, Clone)]
pub struct ClusterEval {
    pub rows: Vec<ViRow>,
    /// Embeddings of the first model at the largest practice length.
    pub sample: Option<EmbeddingDataset<f64>>,
}

/// K-Means (k = number of clusters) on post-practice embeddings, scored by
/// VI against the true clusters, for every model and practice length; then
/// one `all` row per length averaging over models. One trained model is
/// probed at every length.
pub fn evaluate_clusters(
    cfg: &ExperimentConfig,
    world: EvalWorld<'_, f64>,
    models: &[(u64, &SpeakerBundle<f64>)],
) -> Result<ClusterEval> {
    let label = cfg.series_label();
    let k = cfg.population.n_clusters;
    let ev = &cfg.evaluation;
    let mut rows = Vec::new();
    let mut sample = None;
    for &n in &ev.cluster_n_practice {
        let mut vis = Vec::new();
        let mut bases = Vec::new();
        for (i, &(seed, bundle)) in models.iter().enumerate() {
            let tree = SeedTree::new(seed);
            let data = collect_embeddings(bundle, world, n, ev.embedding_sequences, &tree.child(embedding_tag(n)))?;
            let truth = data.truth()?;
            let fit = kmeans(&data.points(), k, &ev.kmeans, tree.seed(Purpose::KMeans))?;
            let vi = variation_of_information(&truth, &fit.partition)?;
            let (base, _) = random_cluster_baseline(k, &truth, ev.random_baseline_trials, tree.seed(Purpose::RandomBaseline))?;
            rows.push(ViRow {
                policy: label.clone(),
                seed: seed.to_string(),
                n_practice: n,
                vi,
                vi_random_baseline: base,
            });
            vis.push(vi);
            bases.push(base);
            if i == 0 && Some(&n) == ev.cluster_n_practice.last() {
                sample = Some(data);
            }
        }
        rows.push(ViRow {
            policy: label.clone(),
            seed: "all".into(),
            n_practice: n,
            vi: mean(&vis),
            vi_random_baseline: mean(&bases),
        });
    }
    Ok(ClusterEval { rows, sample })
}

/// Misunderstood-attribute rate per episode position, pooled over models.
pub fn evaluate_usage(
    cfg: &ExperimentConfig,
    world: EvalWorld<'_, f64>,
    models: &[(u64, &SpeakerBundle<f64>)],
) -> Result<Vec<f64>> {
    let mut pooled: Vec<f64> = Vec::new();
    for &(seed, bundle) in models {
        let recs = rollouts(
            bundle,
            world,
            cfg.game,
            cfg.evaluation.usage_sequences,
            &SeedTree::new(seed).child(USAGE_TAG),
        )?;
        let rates = misunderstood_usage_rate(&recs, world.population)?;
        if pooled.is_empty() {
            pooled = vec![0.0; rates.len()];
        }
        for (p, r) in pooled.iter_mut().zip(&rates) {
            *p += r / models.len() as f64;
        }
    }
    Ok(pooled)
}
