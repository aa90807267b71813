//! Listener population: clusters of correlated attribute understanding and
//! the threshold/rationality guessing rule.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attrspace::{csv_io, AttributeSpace, FeatureStore, ImagePair};
use crate::rng::rng_from_seed;
use crate::{Error, Result, Scalar};

/// A `(δ, p)` pair: attribute-difference threshold and probability of
/// playing rationally once the threshold is met.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingLevel<F> {
    pub delta: F,
    pub p: F,
}

impl<F: Scalar> UnderstandingLevel<F> {
    pub fn new(delta: F, p: F) -> Result<Self> {
        let unit = |v: F| v >= F::zero() && v <= F::one();
        if !unit(delta) || !unit(p) {
            return Err(Error::invalid(format!(
                "understanding level ({delta}, {p}) must lie in [0,1]^2"
            )));
        }
        Ok(UnderstandingLevel { delta, p })
    }
}

/// The understood (`u`) and misunderstood (`ū`) levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levels<F = f64> {
    pub understood: UnderstandingLevel<F>,
    pub misunderstood: UnderstandingLevel<F>,
}

impl<F: Scalar> Default for Levels<F> {
    fn default() -> Self {
        Levels {
            understood: UnderstandingLevel {
                delta: F::of(0.02),
                p: F::one(),
            },
            misunderstood: UnderstandingLevel {
                delta: F::of(0.40),
                p: F::of(0.25),
            },
        }
    }
}

impl<F: Scalar> Levels<F> {
    pub fn validate(&self) -> Result<()> {
        UnderstandingLevel::new(self.understood.delta, self.understood.p)?;
        UnderstandingLevel::new(self.misunderstood.delta, self.misunderstood.p)?;
        Ok(())
    }

    fn level(&self, understood: bool) -> UnderstandingLevel<F> {
        if understood {
            self.understood
        } else {
            self.misunderstood
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    #[default]
    Random,
    ByAttributeType,
}

/// Per-attribute probability that a listener of this cluster understands it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub cluster_id: usize,
    pub label: String,
    pub understand_prob: Vec<f64>,
}

/// Draws the clusters. In `Random` mode every (cluster, attribute) entry is
/// `q_low` or `q_high` with equal probability; in `ByAttributeType` mode
/// cluster `c` gets `q_low` on the attributes of the `c`-th type tag and
/// `q_high` elsewhere.
pub fn make_clusters(
    n_clusters: usize,
    attr_space: &AttributeSpace,
    q_low: f64,
    q_high: f64,
    mode: ClusterMode,
    seed: u64,
) -> Result<Vec<ClusterSpec>> {
    for (name, q) in [("q_low", q_low), ("q_high", q_high)] {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("{name} = {q} outside [0,1]")));
        }
    }
    if n_clusters == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    let n_attr = attr_space.count();
    match mode {
        ClusterMode::Random => {
            let mut rng = rng_from_seed(seed);
            Ok((0..n_clusters)
                .map(|c| ClusterSpec {
                    cluster_id: c,
                    label: format!("cluster_{c}"),
                    understand_prob: (0..n_attr)
                        .map(|_| if rng.random::<bool>() { q_high } else { q_low })
                        .collect(),
                })
                .collect())
        }
        ClusterMode::ByAttributeType => {
            if !attr_space.has_types() {
                return Err(Error::invalid(
                    "by_attribute_type clusters need attribute type tags",
                ));
            }
            let types = attr_space.distinct_types();
            if types.len() != n_clusters {
                return Err(Error::invalid(format!(
                    "by_attribute_type needs one cluster per type tag: {} tags, {n_clusters} clusters",
                    types.len()
                )));
            }
            Ok(types
                .into_iter()
                .enumerate()
                .map(|(c, tag)| ClusterSpec {
                    cluster_id: c,
                    understand_prob: (0..n_attr)
                        .map(|a| {
                            if attr_space.type_of(a) == Some(tag.as_str()) {
                                q_low
                            } else {
                                q_high
                            }
                        })
                        .collect(),
                    label: tag,
                })
                .collect())
        }
    }
}

/// One listener: per-attribute `δ_l` and `p_l`, each component equal to the
/// understood or the misunderstood level.
#[derive(Debug, Clone, PartialEq)]
pub struct ListenerSpec<F> {
    pub cluster_id: usize,
    pub delta: Vec<F>,
    pub p: Vec<F>,
    understood: Vec<bool>,
}

impl<F: Scalar> ListenerSpec<F> {
    pub fn from_mask(cluster_id: usize, understood: Vec<bool>, levels: &Levels<F>) -> Self {
        let (delta, p) = understood
            .iter()
            .map(|&u| {
                let l = levels.level(u);
                (l.delta, l.p)
            })
            .unzip();
        ListenerSpec {
            cluster_id,
            delta,
            p,
            understood,
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.delta.len()
    }

    /// True when attribute `a` was assigned the understood level.
    pub fn understands(&self, a: usize) -> bool {
        self.understood[a]
    }

    pub fn understanding_mask(&self) -> &[bool] {
        &self.understood
    }
}

/// `per_cluster` listeners per cluster, each attribute independently
/// understood with the cluster's probability.
pub fn sample_population<F: Scalar>(
    clusters: &[ClusterSpec],
    per_cluster: usize,
    levels: &Levels<F>,
    seed: u64,
) -> Result<Vec<ListenerSpec<F>>> {
    if clusters.is_empty() {
        return Err(Error::invalid("cannot sample a population from zero clusters"));
    }
    if per_cluster == 0 {
        return Err(Error::invalid("per_cluster must be positive"));
    }
    levels.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(clusters.len() * per_cluster);
    for c in clusters {
        for _ in 0..per_cluster {
            let mask = c
                .understand_prob
                .iter()
                .map(|&q| rng.random::<f64>() < q)
                .collect();
            out.push(ListenerSpec::from_mask(c.cluster_id, mask, levels));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuessTrace<F> {
    /// `φ_L^a(target) − φ_L^a(confounder)`.
    pub z: F,
    /// `|z| >= δ` and `z != 0`.
    pub understood: bool,
    pub rational_roll: bool,
    pub guess: usize,
}

/// Simulates one listener guess for attribute `a`.
pub fn listener_guess<F: Scalar, R: Rng + ?Sized>(
    l: &ListenerSpec<F>,
    a: usize,
    listener_store: &FeatureStore<F>,
    pair: ImagePair,
    rng: &mut R,
) -> Result<GuessTrace<F>> {
    if a >= l.n_attributes() {
        return Err(Error::OutOfRange {
            what: "attribute",
            index: a,
            len: l.n_attributes(),
        });
    }
    let t = listener_store.get(pair.target_id)?;
    let c = listener_store.get(pair.confounder_id)?;
    let z = t[a] - c[a];
    Ok(guess_from_difference(l, a, z, pair, rng))
}

pub(crate) fn guess_from_difference<F: Scalar, R: Rng + ?Sized>(
    l: &ListenerSpec<F>,
    a: usize,
    z: F,
    pair: ImagePair,
    rng: &mut R,
) -> GuessTrace<F> {
    // a zero difference has no argmax, so it is never "understood"
    let understood = z != F::zero() && z.abs() >= l.delta[a];
    let rational_roll = understood && rng.random::<f64>() < l.p[a].as_f64();
    let guess = if rational_roll {
        if z > F::zero() {
            pair.target_id
        } else {
            pair.confounder_id
        }
    } else if rng.random::<bool>() {
        pair.target_id
    } else {
        pair.confounder_id
    };
    GuessTrace {
        z,
        understood,
        rational_roll,
        guess,
    }
}

/// Closed-form expected reward (+1 correct, −1 wrong) of describing with
/// attribute `a` when the listener sees difference `z`.
pub fn expected_reward_oracle<F: Scalar>(l: &ListenerSpec<F>, a: usize, z: F) -> Result<F> {
    if a >= l.n_attributes() {
        return Err(Error::OutOfRange {
            what: "attribute",
            index: a,
            len: l.n_attributes(),
        });
    }
    if !(z >= -F::one() && z <= F::one()) {
        return Err(Error::invalid(format!("z = {z} outside [-1,1]")));
    }
    if z == F::zero() || z.abs() < l.delta[a] {
        return Ok(F::zero());
    }
    Ok(l.p[a] * z.signum())
}

/// Writes `listener_id,cluster_id,delta_0..,p_0..`.
pub fn save_population<F: Scalar>(pop: &[ListenerSpec<F>], path: &Path) -> Result<()> {
    let n_attr = pop.first().map_or(0, |l| l.n_attributes());
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "listener_id,cluster_id")?;
    for a in 0..n_attr {
        write!(w, ",delta_{a}")?;
    }
    for a in 0..n_attr {
        write!(w, ",p_{a}")?;
    }
    writeln!(w)?;
    for (i, l) in pop.iter().enumerate() {
        write!(w, "{i},{}", l.cluster_id)?;
        for v in l.delta.iter().chain(&l.p) {
            write!(w, ",{}", v.as_f64())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a population file. Each `(δ, p)` component must match one of
/// `levels`; that match recovers the understanding mask.
pub fn load_population<F: Scalar>(
    path: &Path,
    n_attributes: usize,
    levels: &Levels<F>,
) -> Result<Vec<ListenerSpec<F>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let width = 2 + 2 * n_attributes;
    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.len() != width {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected {width} columns, header has {}", header.len()),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let cell = |col: usize| -> Result<f64> {
            rec[col].trim().parse::<f64>().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                row,
                column: header[col].to_string(),
                message: format!("{:?} is not numeric", &rec[col]),
            })
        };
        let cluster_id = cell(1)? as usize;
        let mut mask = Vec::with_capacity(n_attributes);
        for a in 0..n_attributes {
            let (d, p) = (F::of(cell(2 + a)?), F::of(cell(2 + n_attributes + a)?));
            let u = levels.understood;
            let m = levels.misunderstood;
            if d == u.delta && p == u.p {
                mask.push(true);
            } else if d == m.delta && p == m.p {
                mask.push(false);
            } else {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: header[2 + a].to_string(),
                    message: format!("({d}, {p}) matches neither understanding level"),
                });
            }
        }
        out.push(ListenerSpec::from_mask(cluster_id, mask, levels));
    }
    Ok(out)
}
