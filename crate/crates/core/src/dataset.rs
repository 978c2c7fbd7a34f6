//! Samples, datasets, the embedding file format, the synthetic benchmark and
//! episode sampling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "r")]
    Rgb,
    #[serde(rename = "f")]
    Flow,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Flow,
            Modality::Flow => Modality::Rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord<T> {
    pub id: String,
    pub label: usize,
    pub rgb: Vec<T>,
    pub flow: Vec<T>,
    /// Ground-truth reliable modality; only synthetic data carries it.
    pub dominant: Option<Modality>,
}

impl<T: Scalar> EmbeddingRecord<T> {
    pub fn modality(&self, m: Modality) -> &[T] {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub dim_rgb: usize,
    pub dim_flow: usize,
    pub num_classes: usize,
    pub num_records: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset<T> {
    meta: DatasetMeta,
    records: Vec<EmbeddingRecord<T>>,
    by_class: Vec<Vec<usize>>,
}

impl<T: Scalar> MultimodalDataset<T> {
    /// Validates every dataset invariant and indexes records by class.
    pub fn new(
        dim_rgb: usize,
        dim_flow: usize,
        num_classes: usize,
        records: Vec<EmbeddingRecord<T>>,
    ) -> Result<Self> {
        if dim_rgb == 0 || dim_flow == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(
                "dimensions and class count must be >= 1".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, r) in records.iter().enumerate() {
            validate_record(r, dim_rgb, dim_flow, num_classes)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            by_class[r.label].push(i);
        }
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass(k));
        }
        let meta = DatasetMeta {
            dim_rgb,
            dim_flow,
            num_classes,
            num_records: records.len(),
        };
        Ok(Self {
            meta,
            records,
            by_class,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        self.meta
    }

    pub fn records(&self) -> &[EmbeddingRecord<T>] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &EmbeddingRecord<T> {
        &self.records[index]
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// Keeps the listed classes, relabelling them `0..classes.len()` in the
    /// given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut records = Vec::new();
        for (new_label, &c) in classes.iter().enumerate() {
            if c >= self.meta.num_classes {
                return Err(Error::InvalidConfig(format!("class {c} out of range")));
            }
            for &i in &self.by_class[c] {
                let mut r = self.records[i].clone();
                r.label = new_label;
                records.push(r);
            }
        }
        Self::new(
            self.meta.dim_rgb,
            self.meta.dim_flow,
            classes.len(),
            records,
        )
    }
}

fn validate_record<T: Scalar>(
    r: &EmbeddingRecord<T>,
    dim_rgb: usize,
    dim_flow: usize,
    num_classes: usize,
) -> Result<()> {
    let dim_err = |field, expected, found| Error::DimensionMismatch {
        id: r.id.clone(),
        field,
        expected,
        found,
    };
    if r.rgb.len() != dim_rgb {
        return Err(dim_err("rgb", dim_rgb, r.rgb.len()));
    }
    if r.flow.len() != dim_flow {
        return Err(dim_err("flow", dim_flow, r.flow.len()));
    }
    if r.label >= num_classes {
        return Err(Error::LabelOutOfRange {
            id: r.id.clone(),
            label: r.label,
            num_classes,
        });
    }
    for (field, v) in [("rgb", &r.rgb), ("flow", &r.flow)] {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteValue {
                id: r.id.clone(),
                field,
            });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    kind: String,
    dim_rgb: usize,
    dim_flow: usize,
    num_classes: usize,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    label: usize,
    rgb: Vec<f64>,
    flow: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dominant: Option<Modality>,
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<MultimodalDataset<T>> {
    read_dataset(File::open(path)?)
}

pub fn read_dataset<T: Scalar>(reader: impl Read) -> Result<MultimodalDataset<T>> {
    let mut lines = BufReader::new(reader)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l));
    let mut meta = None;
    let mut records = Vec::new();
    for (line_no, line) in &mut lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        };
        match meta {
            None => {
                let m: MetaLine = serde_json::from_str(&line).map_err(malformed)?;
                if m.kind != "meta" {
                    return Err(Error::Malformed {
                        line: line_no,
                        message: format!("expected metadata record, found kind `{}`", m.kind),
                    });
                }
                if m.format_version != FORMAT_VERSION {
                    return Err(Error::Malformed {
                        line: line_no,
                        message: format!("unsupported format_version {}", m.format_version),
                    });
                }
                meta = Some(m);
            }
            Some(_) => {
                let r: RecordLine = serde_json::from_str(&line).map_err(malformed)?;
                records.push(EmbeddingRecord {
                    id: r.id,
                    label: r.label,
                    rgb: r.rgb.into_iter().map(T::lit).collect(),
                    flow: r.flow.into_iter().map(T::lit).collect(),
                    dominant: r.dominant,
                });
            }
        }
    }
    let meta = meta.ok_or(Error::Malformed {
        line: 1,
        message: "missing metadata record".into(),
    })?;
    MultimodalDataset::new(meta.dim_rgb, meta.dim_flow, meta.num_classes, records)
}

pub fn save_dataset<T: Scalar>(dataset: &MultimodalDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<T: Scalar>(dataset: &MultimodalDataset<T>, mut w: impl Write) -> Result<()> {
    let meta = MetaLine {
        kind: "meta".into(),
        dim_rgb: dataset.meta.dim_rgb,
        dim_flow: dataset.meta.dim_flow,
        num_classes: dataset.meta.num_classes,
        format_version: FORMAT_VERSION,
    };
    writeln!(w, "{}", to_json(&meta))?;
    for r in &dataset.records {
        let line = RecordLine {
            id: r.id.clone(),
            label: r.label,
            rgb: r.rgb.iter().map(|v| v.as_f64()).collect(),
            flow: r.flow.iter().map(|v| v.as_f64()).collect(),
            dominant: r.dominant,
        };
        writeln!(w, "{}", to_json(&line))?;
    }
    Ok(())
}

pub(crate) fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string(value).expect("plain data always serializes")
}

/// Parameters of the synthetic two-modality benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim_rgb: usize,
    pub dim_flow: usize,
    pub sep: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub p_rgb_dominant: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 24,
            per_class: 40,
            dim_rgb: 64,
            dim_flow: 64,
            sep: 1.0,
            sigma_low: 0.2,
            sigma_high: 1.0,
            p_rgb_dominant: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes == 0 || self.per_class == 0 {
            return fail("num_classes and per_class must be >= 1");
        }
        if self.dim_rgb == 0 || self.dim_flow == 0 {
            return fail("dimensions must be >= 1");
        }
        if !(self.sigma_low >= 0.0 && self.sigma_low < self.sigma_high && self.sigma_high.is_finite()) {
            return fail("need 0 <= sigma_low < sigma_high");
        }
        if !(0.0..=1.0).contains(&self.p_rgb_dominant) {
            return fail("p_rgb_dominant must lie in [0, 1]");
        }
        if !(self.sep.is_finite() && self.sep >= 0.0) {
            return fail("sep must be finite and >= 0");
        }
        Ok(())
    }
}

/// Draws the synthetic benchmark. Class means are fixed per dataset; each
/// sample's dominant modality gets `sigma_low` noise and the other
/// `sigma_high`.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<MultimodalDataset<T>> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let gaussian = |rng: &mut Rng, dim: usize, scale: f64| -> Vec<f64> {
        (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let means_rgb: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian(&mut rng, spec.dim_rgb, spec.sep))
        .collect();
    let means_flow: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian(&mut rng, spec.dim_flow, spec.sep))
        .collect();

    let mut records = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        for j in 0..spec.per_class {
            let rgb_dominant = rng.random::<f64>() < spec.p_rgb_dominant;
            let (s_rgb, s_flow) = if rgb_dominant {
                (spec.sigma_low, spec.sigma_high)
            } else {
                (spec.sigma_high, spec.sigma_low)
            };
            let noise_rgb = gaussian(&mut rng, spec.dim_rgb, s_rgb);
            let noise_flow = gaussian(&mut rng, spec.dim_flow, s_flow);
            let add = |mean: &[f64], noise: Vec<f64>| -> Vec<T> {
                mean.iter().zip(noise).map(|(m, n)| T::lit(m + n)).collect()
            };
            records.push(EmbeddingRecord {
                id: format!("c{class:03}_{j:04}"),
                label: class,
                rgb: add(&means_rgb[class], noise_rgb),
                flow: add(&means_flow[class], noise_flow),
                dominant: Some(if rgb_dominant {
                    Modality::Rgb
                } else {
                    Modality::Flow
                }),
            });
        }
    }
    MultimodalDataset::new(spec.dim_rgb, spec.dim_flow, spec.num_classes, records)
}

/// Splits classes into two disjoint datasets; `train_fraction` of the classes
/// (rounded, at least one per side) go to the first.
pub fn split_by_class<T: Scalar>(
    dataset: &MultimodalDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(MultimodalDataset<T>, MultimodalDataset<T>)> {
    let c = dataset.meta.num_classes;
    if c < 2 {
        return Err(Error::InvalidConfig("split needs at least 2 classes".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig("train fraction must lie in (0, 1)".into()));
    }
    let n_train = ((c as f64 * train_fraction).round() as usize).clamp(1, c - 1);
    let mut rng = rng::substream(seed, rng::DOMAIN_SPLIT, 0);
    let order = index::sample(&mut rng, c, c).into_vec();
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.select_classes(&train)?, dataset.select_classes(&test)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_per_class: 5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::InvalidConfig(
                "n_way, k_shot and q_per_class must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A record reference with its episode-local label in `0..n_way`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    pub record: usize,
    pub label: usize,
}

/// An N-way K-shot task. Support and query are stored class-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub config: EpisodeConfig,
    /// Global class of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

pub fn sample_episode<T: Scalar>(
    dataset: &MultimodalDataset<T>,
    config: EpisodeConfig,
    rng: &mut Rng,
) -> Result<Episode> {
    config.validate()?;
    let available = dataset.meta.num_classes;
    if available < config.n_way {
        return Err(Error::InsufficientClasses {
            needed: config.n_way,
            available,
        });
    }
    let per_class = config.k_shot + config.q_per_class;
    let classes = index::sample(rng, available, config.n_way).into_vec();
    let mut support = Vec::with_capacity(config.n_way * config.k_shot);
    let mut query = Vec::with_capacity(config.n_way * config.q_per_class);
    for (label, &class) in classes.iter().enumerate() {
        let members = dataset.class_members(class);
        if members.len() < per_class {
            return Err(Error::InsufficientRecords {
                class,
                needed: per_class,
                available: members.len(),
            });
        }
        let picks = index::sample(rng, members.len(), per_class);
        for (j, p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                record: members[p],
                label,
            };
            if j < config.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        config,
        classes,
        support,
        query,
    })
}

/// Borrowed record views of an episode, ready for the numeric pipeline.
#[derive(Clone, Debug)]
pub struct EpisodeView<'a, T> {
    pub n_way: usize,
    pub support: Vec<&'a EmbeddingRecord<T>>,
    pub support_labels: Vec<usize>,
    pub query: Vec<&'a EmbeddingRecord<T>>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn view<'a, T: Scalar>(&self, dataset: &'a MultimodalDataset<T>) -> EpisodeView<'a, T> {
        EpisodeView {
            n_way: self.config.n_way,
            support: self.support.iter().map(|i| dataset.record(i.record)).collect(),
            support_labels: self.support.iter().map(|i| i.label).collect(),
            query: self.query.iter().map(|i| dataset.record(i.record)).collect(),
            query_labels: self.query.iter().map(|i| i.label).collect(),
        }
    }
}

impl<'a, T: Scalar> EpisodeView<'a, T> {
    pub fn support_inputs(&self, m: Modality) -> Vec<&'a [T]> {
        self.support.iter().map(|r| r.modality(m)).collect()
    }

    pub fn query_inputs(&self, m: Modality) -> Vec<&'a [T]> {
        self.query.iter().map(|r| r.modality(m)).collect()
    }
}
