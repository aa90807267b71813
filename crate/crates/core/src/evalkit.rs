//! Evaluation: reward curves, embedding collection, K-Means, variation of
//! information and misunderstood-attribute usage.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::attrspace::{sample_pair, FeatureStore};
use crate::listenerpop::{expected_reward_oracle, ListenerSpec};
use crate::rng::{Purpose, SeedTree};
use crate::speaker::SpeakerBundle;
use crate::trainer::{run_sequence, SequenceConfig, SequenceRecord};
use crate::{Error, Result, Scalar};

/// Feature stores and the listeners evaluation draws from.
#[derive(Clone, Copy)]
pub struct EvalWorld<'a, F> {
    pub speaker_store: &'a FeatureStore<F>,
    pub listener_store: &'a FeatureStore<F>,
    pub population: &'a [ListenerSpec<F>],
}

/// Plays `n_sequences` sequences, each against a listener drawn uniformly
/// from the population. Sequence `i` uses its own stream, so the output does
/// not depend on the thread count.
pub fn rollouts<F: Scalar>(
    speaker: &SpeakerBundle<F>,
    world: EvalWorld<'_, F>,
    cfg: SequenceConfig,
    n_sequences: usize,
    seeds: &SeedTree,
) -> Result<Vec<SequenceRecord<F>>> {
    if world.population.is_empty() {
        return Err(Error::invalid("empty evaluation population"));
    }
    (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(Purpose::EvalSequence, i as u64);
            let li = rng.random_range(0..world.population.len());
            run_sequence(
                &world.population[li],
                li,
                speaker,
                world.speaker_store,
                world.listener_store,
                cfg,
                &mut rng,
            )
        })
        .collect()
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub n_practice: usize,
    pub mean_reward: f64,
    pub std_across_seeds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPoint {
    pub seed: u64,
    pub n_practice: usize,
    pub mean_reward: f64,
    /// Spread of per-sequence mean evaluation reward within this seed.
    pub std_within: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardCurve {
    pub points: Vec<CurvePoint>,
    pub per_seed: Vec<SeedPoint>,
}

/// Mean evaluation reward at each `N` of `grid`.
///
/// `models` pairs each seed with the speaker evaluated under it; pass the
/// same speaker several times to measure evaluation noise alone.
pub fn reward_curve<F: Scalar>(
    models: &[(u64, &SpeakerBundle<F>)],
    world: EvalWorld<'_, F>,
    grid: &[usize],
    m_eval: usize,
    sequences_per_point: usize,
) -> Result<RewardCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("n_practice grid is empty"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("n_practice grid must be strictly increasing"));
    }
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    if sequences_per_point == 0 {
        return Err(Error::invalid("sequences_per_point must be positive"));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut per_seed = Vec::new();
    for &n in grid {
        let cfg = SequenceConfig::new(n, m_eval)?;
        let mut seed_means = Vec::with_capacity(models.len());
        for &(seed, speaker) in models {
            let tree = SeedTree::new(seed).child(n as u64);
            let recs = rollouts(speaker, world, cfg, sequences_per_point, &tree)?;
            let per_seq: Vec<f64> = recs.iter().map(|r| r.mean_eval_reward()).collect();
            let m = mean(&per_seq);
            seed_means.push(m);
            per_seed.push(SeedPoint {
                seed,
                n_practice: n,
                mean_reward: m,
                std_within: sample_std(&per_seq),
            });
        }
        points.push(CurvePoint {
            n_practice: n,
            mean_reward: mean(&seed_means),
            std_across_seeds: sample_std(&seed_means),
        });
    }
    Ok(RewardCurve { points, per_seed })
}

/// Expected reward of a speaker that knows each listener's parameters and
/// names the best attribute for every pair.
pub fn oracle_optimum<F: Scalar>(world: EvalWorld<'_, F>, n_pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = SeedTree::new(seed).stream(Purpose::EvalSequence, u64::MAX);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let li = rng.random_range(0..world.population.len());
        let l = &world.population[li];
        let pair = sample_pair(world.speaker_store, &mut rng)?;
        let z = world.listener_store.pair_difference(pair)?;
        let mut best = f64::NEG_INFINITY;
        for (a, &za) in z.iter().enumerate() {
            best = best.max(expected_reward_oracle(l, a, za)?.as_f64());
        }
        total += best;
    }
    Ok(total / n_pairs.max(1) as f64)
}

/// Expected reward of the best speaker that sees the pair but not the
/// listener: per pair it names the attribute with the highest expected reward
/// averaged over the whole population.
pub fn population_blind_optimum<F: Scalar>(world: EvalWorld<'_, F>, n_pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = SeedTree::new(seed).stream(Purpose::EvalSequence, u64::MAX - 1);
    let n_attr = world.speaker_store.n_attributes();
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let pair = sample_pair(world.speaker_store, &mut rng)?;
        let z = world.listener_store.pair_difference(pair)?;
        let mut by_attr = vec![0.0; n_attr];
        for l in world.population {
            for (a, &za) in z.iter().enumerate() {
                by_attr[a] += expected_reward_oracle(l, a, za)?.as_f64();
            }
        }
        total += by_attr.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / world.population.len() as f64;
    }
    Ok(total / n_pairs.max(1) as f64)
}

/// Expected reward of a speaker that knows each listener's cluster but not
/// the listener's own attribute draws: per pair and cluster, the attribute
/// with the best mean expected reward over that cluster's listeners. Upper
/// bound for a speaker whose embedding identifies the cluster.
pub fn cluster_aware_optimum<F: Scalar>(world: EvalWorld<'_, F>, n_pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = SeedTree::new(seed).stream(Purpose::EvalSequence, u64::MAX - 2);
    let n_attr = world.speaker_store.n_attributes();
    let n_clusters = world.population.iter().map(|l| l.cluster_id + 1).max().unwrap_or(0);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let pair = sample_pair(world.speaker_store, &mut rng)?;
        let z = world.listener_store.pair_difference(pair)?;
        let mut by_cluster = vec![vec![0.0; n_attr]; n_clusters];
        for l in world.population {
            for (a, &za) in z.iter().enumerate() {
                by_cluster[l.cluster_id][a] += expected_reward_oracle(l, a, za)?.as_f64();
            }
        }
        // sum over clusters of (cluster total at its best attribute)
        total += by_cluster
            .iter()
            .map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .filter(|v| v.is_finite())
            .sum::<f64>()
            / world.population.len() as f64;
    }
    Ok(total / n_pairs.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset<F> {
    pub dim: usize,
    pub rows: Vec<(Vec<F>, usize)>,
}

impl<F: Scalar> EmbeddingDataset<F> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|(h, _)| h.iter().map(|v| v.as_f64()).collect()).collect()
    }

    pub fn truth(&self) -> Result<Partition> {
        Partition::new(self.rows.iter().map(|r| r.1).collect())
    }
}

/// Post-practice embeddings paired with each listener's true cluster.
pub fn collect_embeddings<F: Scalar>(
    speaker: &SpeakerBundle<F>,
    world: EvalWorld<'_, F>,
    n_practice: usize,
    n_sequences: usize,
    seeds: &SeedTree,
) -> Result<EmbeddingDataset<F>> {
    if !speaker.model.use_embedding {
        return Err(Error::invalid("speaker was built without an agent embedding"));
    }
    let cfg = SequenceConfig {
        n_practice,
        m_eval: 0,
    };
    let recs = rollouts(speaker, world, cfg, n_sequences, seeds)?;
    Ok(EmbeddingDataset {
        dim: speaker.model.embedding_dim(),
        rows: recs.into_iter().map(|r| (r.h_final, r.cluster_id)).collect(),
    })
}

/// Cluster labels over `n` items, with `k` = max label + 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Partition { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative decrease of the objective below which Lloyd's loop stops.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 10,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
    /// Objective after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centroids = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx].clone();
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(data: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let dim = data[0].len();
    let k = centroids.len();
    let mut labels = vec![0usize; data.len()];
    let mut trace = Vec::new();
    loop {
        let mut obj = 0.0;
        for (l, x) in labels.iter_mut().zip(data) {
            let (j, d) = nearest(x, &centroids);
            *l = j;
            obj += d;
        }
        let prev = trace.last().copied();
        trace.push(obj);
        let converged = prev.is_some_and(|p: f64| p - obj <= cfg.tol * p.abs());
        if converged || trace.len() > cfg.max_iters {
            return KMeansResult {
                partition: Partition { labels, k },
                centroids,
                objective: obj,
                trace,
            };
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, x) in labels.iter().zip(data) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            // an empty cluster keeps its centroid
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
            }
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// objective wins, ties going to the earlier restart.
pub fn kmeans(data: &[Vec<f64>], k: usize, cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > data.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} data points", data.len())));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("points have differing dimensions"));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let tree = SeedTree::new(seed);
    let mut best: Option<KMeansResult> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = tree.stream(Purpose::KMeans, r as u64);
        let res = lloyd(data, kmeans_pp(data, k, &mut rng), cfg);
        if best.as_ref().is_none_or(|b| res.objective < b.objective) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `VI(C, C') = H(C) + H(C') − 2 I(C, C')` in nats.
pub fn variation_of_information(c: &Partition, c_prime: &Partition) -> Result<f64> {
    if c.len() != c_prime.len() {
        return Err(Error::DimensionMismatch {
            context: "variation_of_information",
            expected: c.len(),
            got: c_prime.len(),
        });
    }
    let n = c.len();
    if n == 0 {
        return Ok(0.0);
    }
    let (ka, kb) = (c.k, c_prime.k);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&a, &b) in c.labels.iter().zip(&c_prime.labels) {
        joint[a * kb + b] += 1;
        ca[a] += 1;
        cb[b] += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&m| m > 0)
            .map(|&m| {
                let p = m as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let mut mi = 0.0;
    for a in 0..ka {
        for b in 0..kb {
            let m = joint[a * kb + b];
            if m > 0 {
                let p = m as f64 / nf;
                mi += p * (m as f64 * nf / (ca[a] as f64 * cb[b] as f64)).ln();
            }
        }
    }
    Ok((entropy(&ca) + entropy(&cb) - 2.0 * mi).max(0.0))
}

/// Mean and sample std of VI between `truth` and uniform random `k`-label
/// assignments.
pub fn random_cluster_baseline(k: usize, truth: &Partition, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials == 0 || k == 0 {
        return Err(Error::invalid("random baseline needs k ≥ 1 and trials ≥ 1"));
    }
    let tree = SeedTree::new(seed);
    let mut vis = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = tree.stream(Purpose::RandomBaseline, t as u64);
        let labels: Vec<usize> = (0..truth.len()).map(|_| rng.random_range(0..k)).collect();
        let p = Partition { labels, k };
        vis.push(variation_of_information(truth, &p)?);
    }
    Ok((mean(&vis), sample_std(&vis)))
}

/// Fraction of sequences whose attribute at position `k` is misunderstood by
/// that sequence's listener, for every position.
pub fn misunderstood_usage_rate<F: Scalar>(
    records: &[SequenceRecord<F>],
    population: &[ListenerSpec<F>],
) -> Result<Vec<f64>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let len = first.episodes.len();
    let mut counts = vec![0usize; len];
    for (i, r) in records.iter().enumerate() {
        let l = population.get(r.listener_index).ok_or(Error::OutOfRange {
            what: "listener",
            index: r.listener_index,
            len: population.len(),
        })?;
        if l.cluster_id != r.cluster_id {
            return Err(Error::invalid(format!(
                "record {i} names listener {} of cluster {} but the population has cluster {}",
                r.listener_index, r.cluster_id, l.cluster_id
            )));
        }
        if r.episodes.len() != len {
            return Err(Error::invalid("records have differing sequence lengths"));
        }
        for (c, e) in counts.iter_mut().zip(&r.episodes) {
            if !l.understands(e.attribute) {
                *c += 1;
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / records.len() as f64).collect())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `policy,seed,n_practice,mean_reward,std`: one row per seed and point
/// (std within the seed), then one `all` row per point (std across seeds).
pub fn write_reward_curve_csv(path: &Path, policy: &str, curve: &RewardCurve) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "policy,seed,n_practice,mean_reward,std")?;
    append_reward_curve_rows(&mut w, policy, curve)?;
    w.flush()?;
    Ok(())
}

pub fn append_reward_curve_rows(w: &mut impl Write, policy: &str, curve: &RewardCurve) -> Result<()> {
    for p in &curve.per_seed {
        writeln!(w, "{policy},{},{},{},{}", p.seed, p.n_practice, p.mean_reward, p.std_within)?;
    }
    for p in &curve.points {
        writeln!(w, "{policy},all,{},{},{}", p.n_practice, p.mean_reward, p.std_across_seeds)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViRow {
    pub policy: String,
    pub seed: String,
    pub n_practice: usize,
    pub vi: f64,
    pub vi_random_baseline: f64,
}

pub fn write_vi_csv(path: &Path, rows: &[ViRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "policy,seed,n_practice,vi,vi_random_baseline")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.policy, r.seed, r.n_practice, r.vi, r.vi_random_baseline)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings_csv<F: Scalar>(path: &Path, data: &EmbeddingDataset<F>) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "sequence_id,true_cluster")?;
    for j in 0..data.dim {
        write!(w, ",h_{j}")?;
    }
    writeln!(w)?;
    for (i, (h, c)) in data.rows.iter().enumerate() {
        write!(w, "{i},{c}")?;
        for v in h {
            write!(w, ",{}", v.as_f64())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_usage_csv(path: &Path, series: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "policy,episode_index,misunderstood_rate")?;
    for (policy, rates) in series {
        for (k, r) in rates.iter().enumerate() {
            writeln!(w, "{policy},{k},{r}")?;
        }
    }
    w.flush()?;
    Ok(())
}
