use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attrspace::{load_features, save_features, Role};
use crate::diffkit::Checkpoint;
use crate::evalkit::{append_reward_curve_rows, write_embeddings_csv, write_usage_csv, write_vi_csv};
use crate::listenerpop::{load_population, save_population};
use crate::speaker::SpeakerBundle;
use crate::trainer::TRAIN_LOG_HEADER;
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::gradsuite::{gradcheck_verdict, run_gradcheck_suite};
use super::manifest::{sha256_file, CommandRecord, Manifest};
use super::pipeline::{
    build_features, build_populations, evaluate_clusters, evaluate_reward_curve, evaluate_usage, train_seed, Features,
    Populations, World,
};

pub const LOCK_FILE: &str = "config.lock.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenFeatures,
    GenPopulation,
    Train,
    RewardCurve,
    ClusterEval,
    UsageRate,
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenFeatures,
        Command::GenPopulation,
        Command::Train,
        Command::RewardCurve,
        Command::ClusterEval,
        Command::UsageRate,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenFeatures => "gen-features",
            Command::GenPopulation => "gen-population",
            Command::Train => "train",
            Command::RewardCurve => "reward-curve",
            Command::ClusterEval => "cluster-eval",
            Command::UsageRate => "usage-rate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
}

/// Relative artifact paths inside an output directory.
pub mod paths {
    pub const SPEAKER_FEATURES: &str = "features/speaker.csv";
    pub const LISTENER_FEATURES: &str = "features/listener.csv";
    pub const CLUSTERS: &str = "population/clusters.json";
    pub const TRAIN_POPULATION: &str = "population/train.csv";
    pub const TEST_POPULATION: &str = "population/test.csv";
    pub const REWARD_CURVE: &str = "reward_curve.csv";
    pub const VI_CURVE: &str = "vi_curve.csv";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const USAGE_RATE: &str = "usage_rate.csv";
    pub const GRADCHECK: &str = "gradcheck.csv";

    pub fn checkpoint(seed: u64) -> String {
        format!("train/seed_{seed}/checkpoint.txt")
    }

    pub fn intermediate_checkpoint(seed: u64, step: usize) -> String {
        format!("train/seed_{seed}/checkpoint_step_{step}.txt")
    }

    pub fn train_log(seed: u64) -> String {
        format!("train/seed_{seed}/train_log.csv")
    }
}

fn outputs(cmd: Command, cfg: &ExperimentConfig) -> Vec<String> {
    match cmd {
        Command::GenFeatures => vec![paths::SPEAKER_FEATURES.into(), paths::LISTENER_FEATURES.into()],
        Command::GenPopulation => vec![
            paths::CLUSTERS.into(),
            paths::TRAIN_POPULATION.into(),
            paths::TEST_POPULATION.into(),
        ],
        Command::Train => {
            let t = &cfg.training;
            let steps = t.budget.div_ceil(t.batch_size);
            let mut v = Vec::new();
            for &s in &cfg.seeds {
                v.push(paths::checkpoint(s));
                v.push(paths::train_log(s));
                if t.checkpoint_interval > 0 {
                    for step in (t.checkpoint_interval..=steps).step_by(t.checkpoint_interval) {
                        v.push(paths::intermediate_checkpoint(s, step));
                    }
                }
            }
            v
        }
        Command::RewardCurve => vec![paths::REWARD_CURVE.into()],
        Command::ClusterEval => vec![paths::VI_CURVE.into(), paths::EMBEDDINGS.into()],
        Command::UsageRate => vec![paths::USAGE_RATE.into()],
        Command::Gradcheck => vec![paths::GRADCHECK.into()],
    }
}

/// Validated config, output directory and manifest for one invocation.
struct Session<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    manifest: Manifest,
}

impl Session<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn features(&self) -> Result<Features> {
        let speaker_path = self.require(paths::SPEAKER_FEATURES)?;
        let listener_path = self.require(paths::LISTENER_FEATURES)?;
        let space = self.cfg.features.attribute_space()?;
        let speaker = load_features(&speaker_path, Role::Speaker, &space)?;
        let listener = load_features(&listener_path, Role::Listener, &space)?;
        let provenance = self
            .manifest
            .commands
            .get(Command::GenFeatures.name())
            .map(|r| r.provenance.clone())
            .unwrap_or_default();
        Ok(Features {
            space,
            speaker,
            listener,
            provenance,
        })
    }

    fn world(&self) -> Result<World> {
        let features = self.features()?;
        let clusters_path = self.require(paths::CLUSTERS)?;
        let clusters = serde_json::from_str(&std::fs::read_to_string(&clusters_path)?).map_err(|e| Error::Schema {
            path: clusters_path,
            message: e.to_string(),
        })?;
        let levels = self.cfg.population.levels();
        let n = features.space.count();
        let train = load_population(&self.require(paths::TRAIN_POPULATION)?, n, &levels)?;
        let test = load_population(&self.require(paths::TEST_POPULATION)?, n, &levels)?;
        Ok(World {
            features,
            populations: Populations { clusters, train, test },
        })
    }

    fn models(&self) -> Result<Vec<(u64, SpeakerBundle<f64>)>> {
        self.cfg
            .seeds
            .iter()
            .map(|&s| {
                let ck = Checkpoint::load(&self.require(&paths::checkpoint(s))?)?;
                Ok((s, SpeakerBundle::from_checkpoint(&ck)?))
            })
            .collect()
    }
}

fn borrow_models(models: &[(u64, SpeakerBundle<f64>)]) -> Vec<(u64, &SpeakerBundle<f64>)> {
    models.iter().map(|(s, b)| (*s, b)).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes the lockfile, or checks it against an existing one. A different
/// lockfile means the directory holds another experiment: that needs `force`
/// and discards the old manifest.
fn prepare(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let lock = cfg.lock_text()?;
    let hash = cfg.hash()?;
    let lock_path = out.join(LOCK_FILE);
    let fresh = || Manifest {
        config_sha256: hash.clone(),
        data_seed: cfg.data_seed,
        seeds: cfg.seeds.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        commands: BTreeMap::new(),
    };
    let same_lock = lock_path.is_file() && std::fs::read_to_string(&lock_path)? == lock;
    if lock_path.is_file() && !same_lock && !opts.force {
        return Err(Error::WouldOverwrite(lock_path));
    }
    std::fs::write(&lock_path, &lock)?;
    match Manifest::load(out)? {
        Some(m) if same_lock && m.config_sha256 == hash => Ok(m),
        _ => Ok(fresh()),
    }
}

/// Runs one subcommand: checks prerequisites, refuses to overwrite outputs
/// unless `opts.force`, writes artifacts and records their checksums in
/// `manifest.json`.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<()> {
    let manifest = prepare(cfg, out, opts)?;
    let targets = outputs(cmd, cfg);
    if !opts.force {
        if let Some(existing) = targets.iter().map(|t| out.join(t)).find(|p| p.exists()) {
            return Err(Error::WouldOverwrite(existing));
        }
    }
    let mut session = Session { cfg, out, manifest };
    let mut provenance = BTreeMap::new();
    provenance.insert("config_sha256".to_string(), session.manifest.config_sha256.clone());
    let verdict = execute(cmd, &mut session, &mut provenance)?;
    let mut artifacts = BTreeMap::new();
    for t in &targets {
        let p = out.join(t);
        if p.is_file() {
            artifacts.insert(t.clone(), sha256_file(&p)?);
        }
    }
    let recorded = session.manifest.record(cmd.name(), CommandRecord { artifacts, provenance });
    session.manifest.save(out)?;
    recorded?;
    verdict
}

/// Does the work of `cmd`. The outer error aborts without touching the
/// manifest; the inner result is a verdict reported after artifacts are
/// recorded.
fn execute(cmd: Command, s: &mut Session<'_>, provenance: &mut BTreeMap<String, String>) -> Result<Result<()>> {
    let cfg = s.cfg;
    match cmd {
        Command::GenFeatures => {
            let f = build_features(cfg)?;
            let sp = s.path(paths::SPEAKER_FEATURES);
            ensure_parent(&sp)?;
            save_features(&f.speaker, &sp)?;
            save_features(&f.listener, &s.path(paths::LISTENER_FEATURES))?;
            provenance.extend(f.provenance);
            provenance.insert("mismatch".into(), cfg.features.mismatch.to_string());
        }
        Command::GenPopulation => {
            let space = cfg.features.attribute_space()?;
            let pops = build_populations(cfg, &space)?;
            let cp = s.path(paths::CLUSTERS);
            ensure_parent(&cp)?;
            let mut json = serde_json::to_string_pretty(&pops.clusters).map_err(|e| Error::invalid(e.to_string()))?;
            json.push('\n');
            std::fs::write(&cp, json)?;
            save_population(&pops.train, &s.path(paths::TRAIN_POPULATION))?;
            save_population(&pops.test, &s.path(paths::TEST_POPULATION))?;
            provenance.insert("mode".into(), format!("{:?}", cfg.population.mode));
            provenance.insert("data_seed".into(), cfg.data_seed.to_string());
        }
        Command::Train => {
            let world = s.world()?;
            for &seed in &cfg.seeds {
                let out = s.out;
                let (bundle, log) = train_seed(cfg, &world.features, &world.populations.train, seed, |step, b| {
                    let p = out.join(paths::intermediate_checkpoint(seed, step));
                    ensure_parent(&p)?;
                    b.to_checkpoint().save(&p)
                })?;
                let ck = s.path(&paths::checkpoint(seed));
                ensure_parent(&ck)?;
                bundle.to_checkpoint().save(&ck)?;
                let mut w = create(&s.path(&paths::train_log(seed)))?;
                writeln!(w, "{TRAIN_LOG_HEADER}")?;
                for row in &log {
                    writeln!(w, "{}", row.csv_line())?;
                }
                w.flush()?;
                log::info!("trained seed {seed}: {} log rows", log.len());
            }
            provenance.insert("policy".into(), cfg.speaker.policy.clone());
            provenance.insert("budget".into(), cfg.training.budget.to_string());
        }
        Command::RewardCurve => {
            let world = s.world()?;
            let models = s.models()?;
            let curve = evaluate_reward_curve(cfg, world.eval(), &borrow_models(&models))?;
            let mut w = create(&s.path(paths::REWARD_CURVE))?;
            writeln!(w, "policy,seed,n_practice,mean_reward,std")?;
            append_reward_curve_rows(&mut w, &cfg.series_label(), &curve)?;
            w.flush()?;
            provenance.extend(world.features.provenance.clone());
            provenance.insert(
                "std".into(),
                "per-seed rows: across sequences; `all` rows: across seeds (n - 1 denominator)".into(),
            );
        }
        Command::ClusterEval => {
            let world = s.world()?;
            let models = s.models()?;
            let res = evaluate_clusters(cfg, world.eval(), &borrow_models(&models))?;
            write_vi_csv(&s.path(paths::VI_CURVE), &res.rows)?;
            if let Some(sample) = &res.sample {
                write_embeddings_csv(&s.path(paths::EMBEDDINGS), sample)?;
            }
            provenance.insert(
                "vi_curve".into(),
                "one trained model per seed probed at every n_practice".into(),
            );
            provenance.insert(
                "embeddings".into(),
                format!(
                    "seed {} at n_practice {}",
                    cfg.seeds[0],
                    cfg.evaluation.cluster_n_practice.last().copied().unwrap_or(0)
                ),
            );
        }
        Command::UsageRate => {
            let world = s.world()?;
            let models = s.models()?;
            let rates = evaluate_usage(cfg, world.eval(), &borrow_models(&models))?;
            write_usage_csv(&s.path(paths::USAGE_RATE), &[(cfg.series_label(), rates)])?;
        }
        Command::Gradcheck => {
            let reports = run_gradcheck_suite(&cfg.gradcheck, cfg.seeds[0])?;
            let mut w = create(&s.path(paths::GRADCHECK))?;
            writeln!(w, "check,max_rel_err,worst,analytic,numeric,n_coords")?;
            for (name, r) in &reports {
                writeln!(
                    w,
                    "{name},{:e},{},{:e},{:e},{}",
                    r.max_rel_err, r.worst, r.analytic, r.numeric, r.n_coords
                )?;
            }
            w.flush()?;
            return Ok(gradcheck_verdict(&reports));
        }
    }
    Ok(Ok(()))
}
