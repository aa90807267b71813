use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attrspace::AttributeSpace;
use crate::evalkit::KMeansConfig;
use crate::listenerpop::{ClusterMode, Levels, UnderstandingLevel};
use crate::speaker::SpeakerConfig;
use crate::trainer::{SequenceConfig, TrainSettings};
use crate::{Error, PolicyKind, Result};

/// Everything an experiment depends on. Only `seeds` is required; every
/// other key has a default, and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Series name in CSV outputs; defaults to the policy name, with a
    /// `_no_embedding` suffix when the embedding is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// One trained speaker per seed.
    pub seeds: Vec<u64>,
    /// Seed for features, clusters and listener populations, shared by all
    /// training seeds.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub features: FeaturesConfig,
    #[serde(default)]
    pub speaker: SpeakerConfig,
    #[serde(default)]
    pub game: SequenceConfig,
    #[serde(default)]
    pub training: TrainSettings,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub delta: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_clusters: usize,
    /// Training listeners per cluster.
    pub per_cluster: usize,
    /// Novel evaluation listeners per cluster, sampled from the same clusters.
    pub test_per_cluster: usize,
    pub q_low: f64,
    pub q_high: f64,
    pub mode: ClusterMode,
    pub understood: LevelConfig,
    pub misunderstood: LevelConfig,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        let l = Levels::<f64>::default();
        PopulationConfig {
            n_clusters: 5,
            per_cluster: 20,
            test_per_cluster: 20,
            q_low: 0.05,
            q_high: 0.95,
            mode: ClusterMode::Random,
            understood: LevelConfig {
                delta: l.understood.delta,
                p: l.understood.p,
            },
            misunderstood: LevelConfig {
                delta: l.misunderstood.delta,
                p: l.misunderstood.p,
            },
        }
    }
}

impl PopulationConfig {
    pub fn levels(&self) -> Levels<f64> {
        Levels {
            understood: UnderstandingLevel {
                delta: self.understood.delta,
                p: self.understood.p,
            },
            misunderstood: UnderstandingLevel {
                delta: self.misunderstood.delta,
                p: self.misunderstood.p,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    pub source: FeatureSource,
    pub n_attributes: usize,
    /// Type tags assigned to contiguous, near-equal attribute blocks.
    pub attribute_types: Vec<String>,
    pub n_classes: usize,
    pub n_images: usize,
    pub noise_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker_file: Option<PathBuf>,
    /// Without a listener file the listener sees the speaker's features
    /// (or their distortion when `mismatch` is set).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub listener_file: Option<PathBuf>,
    /// Listener features are a distortion of the speaker features.
    pub mismatch: bool,
    pub warp_strength: f64,
    pub mismatch_noise: f64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            source: FeatureSource::Synthetic,
            n_attributes: 32,
            attribute_types: Vec::new(),
            n_classes: 20,
            n_images: 500,
            noise_sigma: 0.05,
            speaker_file: None,
            listener_file: None,
            mismatch: false,
            warp_strength: 0.5,
            mismatch_noise: 0.05,
        }
    }
}

impl FeaturesConfig {
    pub fn attribute_space(&self) -> Result<AttributeSpace> {
        if self.attribute_types.is_empty() {
            AttributeSpace::indexed(self.n_attributes)
        } else {
            let tags: Vec<&str> = self.attribute_types.iter().map(String::as_str).collect();
            AttributeSpace::indexed_with_type_blocks(self.n_attributes, &tags)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub n_practice_grid: Vec<usize>,
    pub sequences_per_point: usize,
    /// Practice lengths at which embeddings are collected and clustered.
    pub cluster_n_practice: Vec<usize>,
    pub embedding_sequences: usize,
    pub kmeans: KMeansConfig,
    pub random_baseline_trials: usize,
    pub usage_sequences: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_practice_grid: vec![0, 1, 2, 5, 10, 20],
            sequences_per_point: 1000,
            cluster_n_practice: vec![1, 5, 10, 20],
            embedding_sequences: 5000,
            kmeans: KMeansConfig::default(),
            random_baseline_trials: 20,
            usage_sequences: 2000,
        }
    }
}

/// Small model used by the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_attributes: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub n_practice: usize,
    pub m_eval: usize,
    pub epsilon: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n_attributes: 6,
            embedding_dim: 5,
            hidden: vec![8, 7],
            n_practice: 5,
            m_eval: 3,
            epsilon: 1e-5,
        }
    }
}

fn range_err(key: &str, msg: impl Into<String>) -> Error {
    Error::config(key, msg)
}

fn check_unit(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(range_err(key, format!("{v} is outside [0, 1]")))
    }
}

fn check_positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(range_err(key, "must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map_or_else(String::new, |s| {
                text.get(s).map(|k| k.trim().to_string()).unwrap_or_default()
            });
            Error::config(key, e.message().to_string())
        })?;
        Ok(cfg)
    }

    /// Series name used in CSV outputs.
    pub fn series_label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None if self.speaker.use_embedding => self.speaker.policy.clone(),
            None => format!("{}_no_embedding", self.speaker.policy),
        }
    }

    /// Checks every range and cross-section constraint. Relative file paths
    /// are resolved against `base_dir` and replaced by absolute ones.
    pub fn validate(&mut self, base_dir: &Path) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(range_err("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(range_err("seeds", "seeds must be distinct"));
        }

        let p = &self.population;
        check_positive("population.n_clusters", p.n_clusters)?;
        check_positive("population.per_cluster", p.per_cluster)?;
        check_positive("population.test_per_cluster", p.test_per_cluster)?;
        check_unit("population.q_low", p.q_low)?;
        check_unit("population.q_high", p.q_high)?;
        for (key, l) in [("population.understood", p.understood), ("population.misunderstood", p.misunderstood)] {
            if !(l.delta >= 0.0 && l.delta.is_finite()) {
                return Err(range_err(&format!("{key}.delta"), format!("{} must be finite and >= 0", l.delta)));
            }
            check_unit(&format!("{key}.p"), l.p)?;
        }

        let f = &mut self.features;
        if f.n_attributes < 2 {
            return Err(range_err("features.n_attributes", "need at least 2 attributes"));
        }
        if f.attribute_types.len() > f.n_attributes {
            return Err(range_err("features.attribute_types", "more type tags than attributes"));
        }
        check_positive("features.n_classes", f.n_classes)?;
        if f.n_images < f.n_classes.max(2) {
            return Err(range_err("features.n_images", "need at least max(n_classes, 2) images"));
        }
        for (key, v) in [
            ("features.noise_sigma", f.noise_sigma),
            ("features.warp_strength", f.warp_strength),
            ("features.mismatch_noise", f.mismatch_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(range_err(key, format!("{v} must be finite and >= 0")));
            }
        }
        match f.source {
            FeatureSource::Synthetic => {
                if f.speaker_file.is_some() || f.listener_file.is_some() {
                    return Err(range_err("features.source", "feature files given but source is `synthetic`"));
                }
            }
            FeatureSource::Files => {
                let Some(sf) = &f.speaker_file else {
                    return Err(range_err("features.speaker_file", "required when source = \"files\""));
                };
                f.speaker_file = Some(resolve("features.speaker_file", base_dir, sf)?);
                if let Some(lf) = &f.listener_file {
                    if f.mismatch {
                        return Err(range_err(
                            "features.listener_file",
                            "a listener file and mismatch = true are mutually exclusive",
                        ));
                    }
                    f.listener_file = Some(resolve("features.listener_file", base_dir, lf)?);
                }
            }
        }
        if p.mode == ClusterMode::ByAttributeType {
            if f.attribute_types.is_empty() {
                return Err(range_err(
                    "population.mode",
                    "by_attribute_type needs features.attribute_types to tag the attributes",
                ));
            }
            let distinct: std::collections::BTreeSet<_> = f.attribute_types.iter().collect();
            if distinct.len() != p.n_clusters {
                return Err(range_err(
                    "population.n_clusters",
                    format!(
                        "by_attribute_type needs one cluster per type tag ({} tags, {} clusters)",
                        distinct.len(),
                        p.n_clusters
                    ),
                ));
            }
        }

        let s = &self.speaker;
        if let Some(e) = s.epsilon {
            check_unit("speaker.epsilon", e)?;
        }
        match s.policy.as_str() {
            "epsilon_greedy" if s.epsilon.is_none() => {
                return Err(range_err("speaker.epsilon", "required for epsilon_greedy"))
            }
            "epsilon_greedy" => {}
            _ => self.speaker.epsilon = None,
        }
        PolicyKind::from_name(&self.speaker.policy, self.speaker.epsilon)
            .map_err(|e| range_err("speaker.policy", e.to_string()))?;
        check_positive("speaker.embedding_dim", self.speaker.embedding_dim)?;
        for (key, dims) in [("speaker.value_hidden", &self.speaker.value_hidden), ("speaker.policy_hidden", &self.speaker.policy_hidden)] {
            if dims.contains(&0) {
                return Err(range_err(key, "layer sizes must be positive"));
            }
        }

        check_positive("game.m_eval", self.game.m_eval)?;
        if self.speaker.policy == "active" && self.game.n_practice == 0 {
            return Err(range_err("game.n_practice", "the active policy learns from practice episodes; need n_practice >= 1"));
        }

        let t = &self.training;
        check_positive("training.batch_size", t.batch_size)?;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(range_err("training.lr", format!("{} must be positive", t.lr)));
        }
        for (key, b) in [("training.beta1", t.beta1), ("training.beta2", t.beta2), ("training.baseline_decay", t.baseline_decay)] {
            if !(0.0..1.0).contains(&b) {
                return Err(range_err(key, format!("{b} is outside [0, 1)")));
            }
        }
        if !(t.eps > 0.0) {
            return Err(range_err("training.eps", "must be positive"));
        }

        let ev = &self.evaluation;
        if ev.n_practice_grid.is_empty() {
            return Err(range_err("evaluation.n_practice_grid", "must not be empty"));
        }
        if ev.n_practice_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(range_err("evaluation.n_practice_grid", "must be strictly increasing"));
        }
        if ev.cluster_n_practice.windows(2).any(|w| w[0] >= w[1]) {
            return Err(range_err("evaluation.cluster_n_practice", "must be strictly increasing"));
        }
        check_positive("evaluation.sequences_per_point", ev.sequences_per_point)?;
        check_positive("evaluation.random_baseline_trials", ev.random_baseline_trials)?;
        check_positive("evaluation.usage_sequences", ev.usage_sequences)?;
        check_positive("evaluation.kmeans.restarts", ev.kmeans.restarts)?;
        if ev.embedding_sequences < p.n_clusters {
            return Err(range_err("evaluation.embedding_sequences", "need at least one sequence per cluster"));
        }

        let g = &self.gradcheck;
        if g.n_attributes < 2 {
            return Err(range_err("gradcheck.n_attributes", "need at least 2 attributes"));
        }
        check_positive("gradcheck.embedding_dim", g.embedding_dim)?;
        check_positive("gradcheck.m_eval", g.m_eval)?;
        check_positive("gradcheck.n_practice", g.n_practice)?;
        if !(g.epsilon > 0.0 && g.epsilon <= 1e-2) {
            return Err(range_err("gradcheck.epsilon", "must lie in (0, 1e-2]"));
        }
        Ok(())
    }

    /// Canonical TOML of the fully materialized config.
    pub fn lock_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("", e.to_string()))
    }

    /// SHA-256 of [`Self::lock_text`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.lock_text()?.as_bytes())))
    }
}

fn resolve(key: &str, base: &Path, p: &Path) -> Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.is_file() {
        return Err(range_err(key, format!("file {} does not exist", full.display())));
    }
    Ok(full)
}

/// Parses and validates a config file. Relative paths inside it are resolved
/// against the file's directory.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.validate(base)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::from_toml(text)?;
        c.validate(Path::new("."))?;
        Ok(c)
    }

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_materializes_defaults() {
        let c = parse("seeds = [1, 2, 3]\n").unwrap();
        assert_eq!(c.population, PopulationConfig::default());
        assert_eq!(c.speaker, SpeakerConfig::default());
        assert_eq!(c.game, SequenceConfig::default());
        let lock = c.lock_text().unwrap();
        assert!(lock.contains("[population]"));
        assert!(lock.contains("[speaker]"));
        assert!(lock.contains("[training]"));
        assert!(lock.contains("[evaluation.kmeans]"));
        let again = parse(&lock).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn seeds_are_required() {
        assert!(parse("").is_err());
        assert_eq!(key_of(parse("seeds = []").unwrap_err()), "seeds");
    }

    #[test]
    fn epsilon_out_of_range_names_the_key() {
        let e = parse("seeds = [1]\n[speaker]\nepsilon = 1.5\n").unwrap_err();
        assert_eq!(key_of(e), "speaker.epsilon");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse("seeds = [1]\n[speaker]\nepsilonn = 0.1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("epsilonn"), "{msg}");
        assert!(parse("seeds = [1]\n[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn by_attribute_type_needs_tags() {
        let e = parse("seeds = [1]\n[population]\nmode = \"by_attribute_type\"\n").unwrap_err();
        assert_eq!(key_of(e), "population.mode");
        let ok = parse(
            "seeds = [1]\n[population]\nmode = \"by_attribute_type\"\nn_clusters = 2\n[features]\nattribute_types = [\"color\", \"shape\"]\n",
        );
        assert!(ok.is_ok());
        let e = parse(
            "seeds = [1]\n[population]\nmode = \"by_attribute_type\"\n[features]\nattribute_types = [\"color\", \"shape\"]\n",
        )
        .unwrap_err();
        assert_eq!(key_of(e), "population.n_clusters");
    }

    #[test]
    fn missing_feature_file_is_reported() {
        let e = parse("seeds = [1]\n[features]\nsource = \"files\"\nspeaker_file = \"nope.csv\"\n").unwrap_err();
        assert_eq!(key_of(e), "features.speaker_file");
    }

    #[test]
    fn epsilon_dropped_for_other_policies() {
        let c = parse("seeds = [1]\n[speaker]\npolicy = \"active\"\n").unwrap();
        assert_eq!(c.speaker.epsilon, None);
        assert_eq!(c.series_label(), "active");
        let c = parse("seeds = [1]\n[speaker]\nuse_embedding = false\n").unwrap();
        assert_eq!(c.series_label(), "epsilon_greedy_no_embedding");
    }

    #[test]
    fn other_ranges() {
        for (text, key) in [
            ("seeds = [1, 1]", "seeds"),
            ("seeds = [1]\n[population]\nq_low = -0.1", "population.q_low"),
            ("seeds = [1]\n[training]\nbatch_size = 0", "training.batch_size"),
            ("seeds = [1]\n[evaluation]\nn_practice_grid = [5, 1]", "evaluation.n_practice_grid"),
            ("seeds = [1]\n[game]\nn_practice = 3\nm_eval = 0", "game.m_eval"),
            ("seeds = [1]\n[speaker]\npolicy = \"telepathy\"", "speaker.policy"),
        ] {
            assert_eq!(key_of(parse(text).unwrap_err()), key, "{text}");
        }
    }
}
