//! Episodic data: examples, N-way K-shot episodes with disjoint support and
//! query sets, a synthetic biased task family, and the dataset file format.
//!
//! Dataset file (UTF-8, LF line endings):
//!
//! ```text
//! #fairmeta-dataset v1 dim=<d>
//! uid,class_id,s,f1,...,fd
//! ```
//!
//! One record per line after the header; `s` is 0 or 1 and features are
//! decimal literals. The protected attribute is stored next to, never
//! inside, the feature vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::ProtectedVector;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "#fairmeta-dataset";
pub const DATASET_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Explanatory features; the protected attribute is not among them.
    pub features: Vec<f64>,
    /// Class index in context: the global class id inside a dataset, the
    /// remapped `0..N` index inside an episode.
    pub label: usize,
    pub class_id: u32,
    pub s: u8,
    pub uid: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub query_shots: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, query_shots: usize) -> Result<Self> {
        let spec = EpisodeSpec {
            ways,
            shots,
            query_shots,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::config("ways", "must be at least 2"));
        }
        if self.shots < 1 {
            return Err(Error::config("shots", "must be at least 1"));
        }
        if self.query_shots < 1 {
            return Err(Error::config("query-shots", "must be at least 1"));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.shots + self.query_shots
    }
}

/// Features, episode labels and protected attributes of one set, ready for
/// the model.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub s: ProtectedVector,
}

impl LabeledSet {
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InsufficientData("empty example set".into()))?;
        let dim = first.features.len();
        let mut data = Vec::with_capacity(examples.len() * dim);
        for e in examples {
            if e.features.len() != dim {
                return Err(Error::shape("labeled_set", format!("example {} has {} features, expected {dim}", e.uid, e.features.len())));
            }
            data.extend_from_slice(&e.features);
        }
        Ok(LabeledSet {
            x: Tensor::matrix(examples.len(), dim, data)?,
            labels: examples.iter().map(|e| e.label).collect(),
            s: ProtectedVector::new(examples.iter().map(|e| e.s).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// Global class id to episode label.
    pub episode_labels: BTreeMap<u32, usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.episode_labels.len()
    }

    pub fn support_set(&self) -> Result<LabeledSet> {
        LabeledSet::from_examples(&self.support)
    }

    pub fn query_set(&self) -> Result<LabeledSet> {
        LabeledSet::from_examples(&self.query)
    }

    /// Copy with every protected attribute flipped and features unchanged.
    pub fn with_flipped_protected(&self) -> Episode {
        let flip = |v: &[Example]| {
            v.iter()
                .map(|e| Example {
                    s: 1 - e.s,
                    ..e.clone()
                })
                .collect()
        };
        Episode {
            support: flip(&self.support),
            query: flip(&self.query),
            episode_labels: self.episode_labels.clone(),
        }
    }
}

/// Anything episodes can be drawn from.
pub trait EpisodeSource: Sync {
    fn feature_dim(&self) -> usize;

    fn class_ids(&self) -> Vec<u32>;

    /// Draws an N-way episode; deterministic given `seed`.
    fn sample_episode(&self, spec: &EpisodeSpec, seed: u64) -> Result<Episode>;
}

/// Gaussian cluster of one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub class_id: u32,
    pub mean: Vec<f64>,
    /// Unit direction along which `s = 1` shifts the cluster.
    pub shift: Vec<f64>,
    /// `P(s = 1)` for this class.
    pub protected_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub classes: Vec<ClassDistribution>,
    pub feature_dim: usize,
    pub sigma: f64,
    pub bias_strength: f64,
    pub seed: u64,
}

pub const CLUSTER_SIGMA: f64 = 0.7;
pub const MEAN_RANGE: f64 = 3.0;

/// Synthetic family of Gaussian classes whose protected attribute is both
/// unevenly distributed across classes and leaks into the features.
///
/// Per class: mean uniform in `[-3, 3]^dim`, isotropic sigma 0.7,
/// `P(s = 1)` uniform in `0.5 ± 0.4 * bias_strength`, and `s = 1` examples
/// shifted by `bias_strength` along a fixed unit direction.
pub fn generate_synthetic_family(
    num_classes: usize,
    feature_dim: usize,
    bias_strength: f64,
    seed: u64,
) -> Result<TaskFamily> {
    if num_classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if feature_dim < 2 {
        return Err(Error::config("feature-dim", "need at least 2 features"));
    }
    if !(0.0..=1.0).contains(&bias_strength) {
        return Err(Error::config("bias-strength", format!("must lie in [0, 1], got {bias_strength}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = 0.4 * bias_strength;
    let classes = (0..num_classes)
        .map(|c| {
            let mean = (0..feature_dim)
                .map(|_| rng.random_range(-MEAN_RANGE..MEAN_RANGE))
                .collect();
            let mut shift: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
            shift.iter_mut().for_each(|v| *v /= norm);
            let u: f64 = rng.random();
            ClassDistribution {
                class_id: c as u32,
                mean,
                shift,
                protected_prob: 0.5 - half_width + 2.0 * half_width * u,
            }
        })
        .collect();
    Ok(TaskFamily {
        classes,
        feature_dim,
        sigma: CLUSTER_SIGMA,
        bias_strength,
        seed,
    })
}

impl TaskFamily {
    fn draw(&self, class: &ClassDistribution, rng: &mut ChaCha8Rng, uid: u64) -> Example {
        let s = u8::from(rng.random::<f64>() < class.protected_prob);
        let offset = f64::from(s) * self.bias_strength;
        let features = class
            .mean
            .iter()
            .zip(&class.shift)
            .map(|(&m, &d)| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.sigma * z + offset * d
            })
            .collect();
        Example {
            features,
            label: class.class_id as usize,
            class_id: class.class_id,
            s,
            uid,
        }
    }

    /// Draws `per_class` examples of every class into a finite dataset.
    pub fn materialize(&self, per_class: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uid = 0;
        let mut examples = Vec::with_capacity(per_class * self.classes.len());
        for class in &self.classes {
            for _ in 0..per_class {
                examples.push(self.draw(class, &mut rng, uid));
                uid += 1;
            }
        }
        Dataset {
            dim: self.feature_dim,
            examples,
        }
    }

    /// Family restricted to the given class ids (in this family's order).
    pub fn restrict(&self, class_ids: &[u32]) -> TaskFamily {
        TaskFamily {
            classes: self
                .classes
                .iter()
                .filter(|c| class_ids.contains(&c.class_id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn class(&self, class_id: u32) -> Option<&ClassDistribution> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

fn check_ways(available: usize, spec: &EpisodeSpec) -> Result<()> {
    spec.validate()?;
    if available < spec.ways {
        return Err(Error::InsufficientData(format!(
            "{} classes with at least {} examples each, episode needs {}",
            available,
            spec.per_class(),
            spec.ways
        )));
    }
    Ok(())
}

impl EpisodeSource for TaskFamily {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Fresh draws from the chosen class distributions; uids are unique
    /// within the episode.
    fn sample_episode(&self, spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
        check_ways(self.classes.len(), spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = index::sample(&mut rng, self.classes.len(), spec.ways).into_vec();
        let mut episode = Episode {
            support: Vec::with_capacity(spec.ways * spec.shots),
            query: Vec::with_capacity(spec.ways * spec.query_shots),
            episode_labels: BTreeMap::new(),
        };
        let mut uid = 0;
        for (label, &c) in chosen.iter().enumerate() {
            let class = &self.classes[c];
            episode.episode_labels.insert(class.class_id, label);
            for k in 0..spec.per_class() {
                let mut e = self.draw(class, &mut rng, uid);
                uid += 1;
                e.label = label;
                if k < spec.shots {
                    episode.support.push(e);
                } else {
                    episode.query.push(e);
                }
            }
        }
        Ok(episode)
    }
}

/// A finite labelled dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(dim: usize, examples: Vec<Example>) -> Result<Self> {
        let mut uids = BTreeSet::new();
        for e in &examples {
            if e.features.len() != dim {
                return Err(Error::shape("dataset", format!("example {} has {} features, expected {dim}", e.uid, e.features.len())));
            }
            if e.s > 1 {
                return Err(Error::domain("dataset", format!("example {} has protected attribute {}", e.uid, e.s)));
            }
            if !uids.insert(e.uid) {
                return Err(Error::domain("dataset", format!("duplicate uid {}", e.uid)));
            }
        }
        Ok(Dataset { dim, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices grouped by class id.
    pub fn by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            groups.entry(e.class_id).or_default().push(i);
        }
        groups
    }

    pub fn restrict(&self, class_ids: &[u32]) -> Dataset {
        Dataset {
            dim: self.dim,
            examples: self
                .examples
                .iter()
                .filter(|e| class_ids.contains(&e.class_id))
                .cloned()
                .collect(),
        }
    }
}

impl EpisodeSource for Dataset {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn class_ids(&self) -> Vec<u32> {
        self.by_class().into_keys().collect()
    }

    fn sample_episode(&self, spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
        let groups = self.by_class();
        let eligible: Vec<(&u32, &Vec<usize>)> = groups
            .iter()
            .filter(|(_, idx)| idx.len() >= spec.per_class())
            .collect();
        check_ways(eligible.len(), spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = index::sample(&mut rng, eligible.len(), spec.ways).into_vec();
        let mut episode = Episode {
            support: Vec::with_capacity(spec.ways * spec.shots),
            query: Vec::with_capacity(spec.ways * spec.query_shots),
            episode_labels: BTreeMap::new(),
        };
        for (label, &c) in chosen.iter().enumerate() {
            let (&class_id, members) = eligible[c];
            episode.episode_labels.insert(class_id, label);
            let picks = index::sample(&mut rng, members.len(), spec.per_class());
            for (k, p) in picks.into_iter().enumerate() {
                let mut e = self.examples[members[p]].clone();
                e.label = label;
                if k < spec.shots {
                    episode.support.push(e);
                } else {
                    episode.query.push(e);
                }
            }
        }
        Ok(episode)
    }
}

/// Serializes `dataset` in the text format described in the module docs.
pub fn format_dataset(dataset: &Dataset) -> String {
    let mut out = format!("{DATASET_MAGIC} {DATASET_VERSION} dim={}\n", dataset.dim);
    for e in &dataset.examples {
        let _ = write!(out, "{},{},{}", e.uid, e.class_id, e.s);
        for f in &e.features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_dataset(dataset).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_dataset(&text, path)
}

/// Parses the text format; `origin` only labels error messages.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header line".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(DATASET_MAGIC) {
        return Err(err(1, format!("header must start with `{DATASET_MAGIC}`")));
    }
    match tokens.next() {
        Some(DATASET_VERSION) => {}
        other => return Err(err(1, format!("unsupported version {other:?}"))),
    }
    let mut dim = None;
    for tok in tokens {
        match tok.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(v.parse::<usize>().map_err(|_| err(1, format!("bad dim `{v}`")))?);
            }
            _ => return Err(err(1, format!("unknown header field `{tok}`"))),
        }
    }
    let dim = dim.ok_or_else(|| err(1, "header lacks dim=<d>".into()))?;

    let mut examples = Vec::new();
    let mut uids = BTreeSet::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + dim {
            return Err(err(n, format!("expected {} fields, found {}", 3 + dim, fields.len())));
        }
        let uid: u64 = fields[0].trim().parse().map_err(|_| err(n, format!("bad uid `{}`", fields[0])))?;
        let class_id: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(n, format!("bad class_id `{}`", fields[1])))?;
        let s = match fields[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(n, format!("protected attribute must be 0 or 1, found `{other}`"))),
        };
        let features = fields[3..]
            .iter()
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(n, format!("bad feature `{f}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if !uids.insert(uid) {
            return Err(err(n, format!("duplicate uid {uid}")));
        }
        examples.push(Example {
            features,
            label: class_id as usize,
            class_id,
            s,
            uid,
        });
    }
    Ok(Dataset { dim, examples })
}
