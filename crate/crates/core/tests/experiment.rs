use std::path::Path;

use refgame::experiment::{paths, run_command, Command, ExperimentConfig, Manifest, RunOptions, LOCK_FILE};
use refgame::Error;

const TINY: &str = r#"
seeds = [11, 12]
data_seed = 5

[population]
n_clusters = 2
per_cluster = 4
test_per_cluster = 3

[features]
n_attributes = 6
n_classes = 4
n_images = 30

[speaker]
embedding_dim = 4
value_hidden = [8]
policy_hidden = [8]

[game]
n_practice = 3
m_eval = 2

[training]
budget = 24
batch_size = 8
checkpoint_interval = 2

[evaluation]
n_practice_grid = [0, 2]
sequences_per_point = 20
cluster_n_practice = [1, 3]
embedding_sequences = 12
random_baseline_trials = 3
usage_sequences = 10
"#;

fn config(text: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(text).unwrap();
    c.validate(Path::new(".")).unwrap();
    c
}

fn run_all(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<(), Error> {
    for cmd in &Command::ALL[..6] {
        run_command(*cmd, cfg, out, RunOptions { force })?;
    }
    Ok(())
}

fn read(out: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(out.join(rel)).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = config(TINY);
    run_all(&cfg, out, false).unwrap();
    for rel in [
        LOCK_FILE,
        paths::SPEAKER_FEATURES,
        paths::LISTENER_FEATURES,
        paths::CLUSTERS,
        paths::TRAIN_POPULATION,
        paths::TEST_POPULATION,
        paths::REWARD_CURVE,
        paths::VI_CURVE,
        paths::EMBEDDINGS,
        paths::USAGE_RATE,
    ] {
        assert!(out.join(rel).is_file(), "{rel}");
    }
    for s in [11, 12] {
        assert!(out.join(paths::checkpoint(s)).is_file());
        assert!(out.join(paths::train_log(s)).is_file());
        assert!(out.join(paths::intermediate_checkpoint(s, 2)).is_file());
    }
    let curve = String::from_utf8(read(out, paths::REWARD_CURVE)).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "policy,seed,n_practice,mean_reward,std");
    // 2 seeds x 2 grid points, plus one aggregate row per point
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines.iter().any(|l| l.starts_with("epsilon_greedy,all,2,")));

    let vi = String::from_utf8(read(out, paths::VI_CURVE)).unwrap();
    assert!(vi.starts_with("policy,seed,n_practice,vi,vi_random_baseline\n"));
    let emb = String::from_utf8(read(out, paths::EMBEDDINGS)).unwrap();
    assert!(emb.starts_with("sequence_id,true_cluster,h_0,h_1,h_2,h_3\n"));
    assert_eq!(emb.lines().count(), 13);
    let usage = String::from_utf8(read(out, paths::USAGE_RATE)).unwrap();
    assert_eq!(usage.lines().count(), 1 + 5);

    let log = String::from_utf8(read(out, &paths::train_log(11))).unwrap();
    assert!(log.starts_with("step,mean_eval_reward,value_loss,policy_loss,R_mean\n"));

    let m = Manifest::load(out).unwrap().unwrap();
    assert_eq!(m.config_sha256, cfg.hash().unwrap());
    assert_eq!(m.seeds, vec![11, 12]);
    assert!(m.commands["reward-curve"].artifacts.contains_key(paths::REWARD_CURVE));
}

#[test]
fn never_overwrites_without_force_and_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    run_all(&cfg, a.path(), false).unwrap();
    run_all(&cfg, b.path(), false).unwrap();
    for rel in [
        paths::REWARD_CURVE,
        paths::VI_CURVE,
        paths::EMBEDDINGS,
        paths::USAGE_RATE,
        paths::SPEAKER_FEATURES,
        paths::TRAIN_POPULATION,
    ] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
    }
    assert_eq!(read(a.path(), &paths::train_log(12)), read(b.path(), &paths::train_log(12)));
    assert_eq!(read(a.path(), &paths::checkpoint(12)), read(b.path(), &paths::checkpoint(12)));

    let e = run_command(Command::RewardCurve, &cfg, a.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(e, Error::WouldOverwrite(_)), "{e}");
    // a forced rerun under the same config checks checksums against the manifest
    run_command(Command::RewardCurve, &cfg, a.path(), RunOptions { force: true }).unwrap();
}

#[test]
fn tampered_artifact_is_reported_as_nondeterminism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    run_command(Command::GenFeatures, &cfg, dir.path(), RunOptions::default()).unwrap();
    let mut m = Manifest::load(dir.path()).unwrap().unwrap();
    m.commands
        .get_mut("gen-features")
        .unwrap()
        .artifacts
        .insert(paths::SPEAKER_FEATURES.into(), "0".repeat(64));
    m.save(dir.path()).unwrap();
    let e = run_command(Command::GenFeatures, &cfg, dir.path(), RunOptions { force: true }).unwrap_err();
    assert!(matches!(e, Error::Nondeterministic { ref artifact } if artifact == paths::SPEAKER_FEATURES));
}

#[test]
fn prerequisites_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    let e = run_command(Command::Train, &cfg, dir.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact(_)), "{e}");
    run_command(Command::GenFeatures, &cfg, dir.path(), RunOptions::default()).unwrap();
    run_command(Command::GenPopulation, &cfg, dir.path(), RunOptions::default()).unwrap();
    let e = run_command(Command::RewardCurve, &cfg, dir.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact(ref p) if p.ends_with("checkpoint.txt")), "{e}");
}

#[test]
fn changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    run_command(Command::GenFeatures, &config(TINY), dir.path(), RunOptions::default()).unwrap();
    let other = config(&TINY.replace("data_seed = 5", "data_seed = 6"));
    let e = run_command(Command::GenPopulation, &other, dir.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(e, Error::WouldOverwrite(ref p) if p.ends_with(LOCK_FILE)), "{e}");
    run_command(Command::GenFeatures, &other, dir.path(), RunOptions { force: true }).unwrap();
    let m = Manifest::load(dir.path()).unwrap().unwrap();
    assert_eq!(m.config_sha256, other.hash().unwrap());
}

#[test]
fn mismatch_is_recorded_in_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&TINY.replace("n_images = 30", "n_images = 30\nmismatch = true"));
    run_command(Command::GenFeatures, &cfg, dir.path(), RunOptions::default()).unwrap();
    let m = Manifest::load(dir.path()).unwrap().unwrap();
    let prov = &m.commands["gen-features"].provenance;
    assert!(prov["listener_features"].starts_with("distort_features(warp_strength=0.5, noise_sigma=0.05"));
    assert_ne!(read(dir.path(), paths::SPEAKER_FEATURES), read(dir.path(), paths::LISTENER_FEATURES));
}

#[test]
fn gradcheck_command_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    run_command(Command::Gradcheck, &config(TINY), dir.path(), RunOptions::default()).unwrap();
    let text = String::from_utf8(read(dir.path(), paths::GRADCHECK)).unwrap();
    assert!(text.starts_with("check,max_rel_err,worst,analytic,numeric,n_coords\n"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn cluster_eval_rejects_speaker_without_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&TINY.replace("policy_hidden = [8]", "policy_hidden = [8]\nuse_embedding = false"));
    for cmd in [Command::GenFeatures, Command::GenPopulation, Command::Train] {
        run_command(cmd, &cfg, dir.path(), RunOptions::default()).unwrap();
    }
    assert!(run_command(Command::ClusterEval, &cfg, dir.path(), RunOptions::default()).is_err());
}

#[test]
fn feature_files_are_imported() {
    let src = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    run_command(Command::GenFeatures, &cfg, src.path(), RunOptions::default()).unwrap();
    let cfg_path = src.path().join("files.toml");
    std::fs::write(
        &cfg_path,
        TINY.replace(
            "n_images = 30",
            "n_images = 30\nsource = \"files\"\nspeaker_file = \"features/speaker.csv\"",
        ),
    )
    .unwrap();
    let files_cfg = refgame::experiment::validate_config(&cfg_path).unwrap();
    let out = tempfile::tempdir().unwrap();
    run_command(Command::GenFeatures, &files_cfg, out.path(), RunOptions::default()).unwrap();
    assert_eq!(read(out.path(), paths::SPEAKER_FEATURES), read(src.path(), paths::SPEAKER_FEATURES));
}
