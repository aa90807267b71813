//! Attribute vocabulary, per-role feature tables and image-pair sampling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result, Scalar};

/// Which agent a feature table belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Speaker,
    Listener,
}

/// The attribute vocabulary shared by every agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpace {
    names: Vec<String>,
    type_of: Option<Vec<String>>,
}

impl AttributeSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Self::build(names, None)
    }

    pub fn with_types(names: Vec<String>, types: Vec<String>) -> Result<Self> {
        Self::build(names, Some(types))
    }

    /// `count` attributes named `a_0 .. a_{count-1}`.
    pub fn indexed(count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| format!("a_{i}")).collect())
    }

    /// Indexed attributes split into contiguous, near-equal blocks, one per
    /// type tag in `tags`.
    pub fn indexed_with_type_blocks(count: usize, tags: &[&str]) -> Result<Self> {
        if tags.is_empty() || tags.len() > count {
            return Err(Error::invalid(format!(
                "cannot split {count} attributes into {} type blocks",
                tags.len()
            )));
        }
        let types = (0..count)
            .map(|i| tags[i * tags.len() / count].to_string())
            .collect();
        let names = (0..count).map(|i| format!("a_{i}")).collect();
        Self::with_types(names, types)
    }

    fn build(names: Vec<String>, type_of: Option<Vec<String>>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid(format!(
                "attribute space needs at least 2 attributes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate attribute name {n:?}")));
            }
        }
        if let Some(t) = &type_of {
            if t.len() != names.len() {
                return Err(Error::DimensionMismatch {
                    context: "attribute type tags",
                    expected: names.len(),
                    got: t.len(),
                });
            }
        }
        Ok(AttributeSpace { names, type_of })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn type_of(&self, a: usize) -> Option<&str> {
        self.type_of.as_ref().map(|t| t[a].as_str())
    }

    pub fn has_types(&self) -> bool {
        self.type_of.is_some()
    }

    /// Distinct type tags in order of first appearance.
    pub fn distinct_types(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.type_of.iter().flatten() {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}

/// Two distinct images; the speaker must get the listener to pick `target_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImagePair {
    pub target_id: usize,
    pub confounder_id: usize,
}

/// Per-image attribute features in `[0,1]^|A|` for one perception role.
///
/// Image ids are the dense row indices `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore<F> {
    role: Role,
    n_attributes: usize,
    data: Vec<F>,
}

impl<F: Scalar> FeatureStore<F> {
    pub fn from_rows(role: Role, n_attributes: usize, rows: Vec<Vec<F>>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * n_attributes);
        for (id, row) in rows.into_iter().enumerate() {
            if row.len() != n_attributes {
                return Err(Error::DimensionMismatch {
                    context: "feature vector",
                    expected: n_attributes,
                    got: row.len(),
                });
            }
            if let Some(v) = row.iter().find(|v| !(**v >= F::zero() && **v <= F::one())) {
                return Err(Error::invalid(format!(
                    "feature of image {id} is {v}, outside [0,1]"
                )));
            }
            data.extend(row);
        }
        Ok(FeatureStore {
            role,
            n_attributes,
            data,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.n_attributes).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&[F]> {
        if id >= self.len() {
            return Err(Error::UnknownImage(id));
        }
        Ok(self.row(id))
    }

    /// Panics on an unknown id; use [`get`](Self::get) for checked access.
    pub fn row(&self, id: usize) -> &[F] {
        &self.data[id * self.n_attributes..(id + 1) * self.n_attributes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.n_attributes)
    }

    /// `φ(target) − φ(confounder)`, every entry in `[-1, 1]`.
    pub fn pair_difference(&self, pair: ImagePair) -> Result<Vec<F>> {
        let t = self.get(pair.target_id)?;
        let c = self.get(pair.confounder_id)?;
        Ok(t.iter().zip(c).map(|(a, b)| *a - *b).collect())
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

fn normal(sigma: f64) -> Result<Option<Normal<f64>>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, sigma)
        .map(Some)
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Synthetic speaker-role features: class prototypes drawn uniformly in the
/// unit cube, images assigned to classes round-robin (`class = id % n_classes`),
/// each image its prototype plus clamped Gaussian noise.
pub fn synth_features<F: Scalar>(
    n_classes: usize,
    n_images: usize,
    attr_space: &AttributeSpace,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureStore<F>> {
    let noise = normal(noise_sigma)?;
    let n_attr = attr_space.count();
    if n_attr < 2 {
        return Err(Error::invalid("attribute space needs at least 2 attributes"));
    }
    if n_classes == 0 || n_images < n_classes {
        return Err(Error::invalid(format!(
            "need n_images >= n_classes >= 1, got n_images={n_images}, n_classes={n_classes}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let prototypes: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_attr).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n_images * n_attr);
    for id in 0..n_images {
        for &p in &prototypes[id % n_classes] {
            let v = match &noise {
                Some(n) => (p + n.sample(&mut rng)).clamp(0.0, 1.0),
                None => p,
            };
            data.push(F::of(v));
        }
    }
    Ok(FeatureStore {
        role: Role::Speaker,
        n_attributes: n_attr,
        data,
    })
}

/// Listener-role copy of `base` seen through a different perceptual module:
/// each attribute is warped by `x^γ_a` with a fixed log-uniform exponent
/// `γ_a ∈ [1/(1+w), 1+w]`, then perturbed by Gaussian noise and clamped.
pub fn distort_features<F: Scalar>(
    base: &FeatureStore<F>,
    warp_strength: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureStore<F>> {
    if base.is_empty() {
        return Err(Error::invalid("cannot distort an empty feature store"));
    }
    if !(warp_strength >= 0.0) || !warp_strength.is_finite() {
        return Err(Error::invalid(format!("warp strength must be >= 0, got {warp_strength}")));
    }
    let noise = normal(noise_sigma)?;
    let mut rng = rng_from_seed(seed);
    let log_hi = (1.0 + warp_strength).ln();
    let exponents: Vec<f64> = (0..base.n_attributes)
        .map(|_| {
            if warp_strength == 0.0 {
                1.0
            } else {
                rng.random_range(-log_hi..=log_hi).exp()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(base.data.len());
    for row in base.rows() {
        for (x, &g) in row.iter().zip(&exponents) {
            let x = x.as_f64();
            let warped = if g == 1.0 { x } else { x.powf(g) };
            let v = match &noise {
                Some(n) => (warped + n.sample(&mut rng)).clamp(0.0, 1.0),
                None => warped,
            };
            data.push(F::of(v));
        }
    }
    Ok(FeatureStore {
        role: Role::Listener,
        n_attributes: base.n_attributes,
        data,
    })
}

/// Read a feature CSV (`image_id,a_0,...,a_{|A|-1}`). Out-of-range values are
/// rejected, never clamped.
pub fn load_features<F: Scalar>(
    path: &Path,
    role: Role,
    attr_space: &AttributeSpace,
) -> Result<FeatureStore<F>> {
    let n_attr = attr_space.count();
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.len() != n_attr + 1 {
        return Err(schema(format!(
            "header has {} columns, expected image_id plus {n_attr} attributes",
            header.len()
        )));
    }
    if header.get(0).map(str::trim) != Some("image_id") {
        return Err(schema("first column must be image_id".into()));
    }
    let mut rows: Vec<Option<Vec<F>>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 1;
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if rec.len() != n_attr + 1 {
            return Err(schema(format!(
                "row {row_no} has {} columns, expected {}",
                rec.len(),
                n_attr + 1
            )));
        }
        let cell_err = |col: usize, message: String| Error::Csv {
            path: path.to_path_buf(),
            row: row_no,
            column: header.get(col).unwrap_or("?").to_string(),
            message,
        };
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| cell_err(0, format!("image_id {:?} is not a non-negative integer", &rec[0])))?;
        let mut values = Vec::with_capacity(n_attr);
        for col in 1..=n_attr {
            let v: f64 = rec[col]
                .trim()
                .parse()
                .map_err(|_| cell_err(col, format!("{:?} is not numeric", &rec[col])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(cell_err(col, format!("value {v} outside [0,1]")));
            }
            values.push(F::of(v));
        }
        if rows.len() <= id {
            rows.resize(id + 1, None);
        }
        if rows[id].is_some() {
            return Err(cell_err(0, format!("duplicate image_id {id}")));
        }
        rows[id] = Some(values);
    }
    let mut dense = Vec::with_capacity(rows.len());
    for (id, r) in rows.into_iter().enumerate() {
        dense.push(r.ok_or_else(|| schema(format!("image ids must be dense; {id} is missing")))?);
    }
    FeatureStore::from_rows(role, n_attr, dense)
}

pub fn save_features<F: Scalar>(store: &FeatureStore<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "image_id")?;
    for a in 0..store.n_attributes {
        write!(w, ",a_{a}")?;
    }
    writeln!(w)?;
    for (id, row) in store.rows().enumerate() {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{}", v.as_f64())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Two distinct images drawn uniformly without replacement. The first draw is
/// the target, which makes the target role uniform over the pair.
pub fn sample_pair<F, R: Rng + ?Sized>(store: &FeatureStore<F>, rng: &mut R) -> Result<ImagePair>
where
    F: Scalar,
{
    let n = store.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 images to sample a pair, have {n}")));
    }
    let target_id = rng.random_range(0..n);
    let mut confounder_id = rng.random_range(0..n - 1);
    if confounder_id >= target_id {
        confounder_id += 1;
    }
    Ok(ImagePair {
        target_id,
        confounder_id,
    })
}
