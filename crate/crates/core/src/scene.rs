//! Scene-side data ingestion and synthetic corpus generation.
//!
//! Scenes arrive as precomputed BEV feature sequences in the tensor
//! container format; captions arrive as JSONL. For desk-scale experiments
//! `synth_corpus` fabricates a paired corpus with controllable class
//! separability plus a companion toy knowledge graph whose entities match
//! the caption keywords, so graph-prompted text encoding is exercisable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::captions::{
    build_easy_caption, read_caption_jsonl, write_caption_jsonl, CaptionLevel, ObjectCount,
    SceneAnnotation,
};
use crate::error::{Error, Result};
use crate::kg::SynonymMap;
use crate::tensor::io::{read_container, write_container};
use crate::tensor::Tensor;

/// One scene: an id and its BEV feature sequence, shape `[n × d_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub sample_id: String,
    pub bev_sequence: Tensor,
}

impl SceneRecord {
    /// Checks the record invariants: matrix shape, at least one row,
    /// finite values.
    pub fn validate(&self) -> Result<()> {
        if self.bev_sequence.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "sample {}: BEV sequence must be a matrix, got shape {:?}",
                self.sample_id,
                self.bev_sequence.shape()
            )));
        }
        if self.bev_sequence.shape()[0] == 0 {
            return Err(Error::Data(format!(
                "sample {}: BEV sequence has no rows",
                self.sample_id
            )));
        }
        self.bev_sequence
            .validate_finite(&format!("sample {}", self.sample_id))
    }
}

/// Train/validation assignment over sample ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Scenes and captions paired by sample id, with a split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    pub scenes: Vec<SceneRecord>,
    /// `(sample_id, caption)` pairs.
    pub texts: Vec<(String, String)>,
    pub split: Split,
}

impl PairedCorpus {
    /// Checks the pairing invariants: scene ids and text ids are each
    /// unique and form the same set, and the split partitions that set.
    pub fn validate(&self) -> Result<()> {
        let mut scene_ids = BTreeSet::new();
        for scene in &self.scenes {
            scene.validate()?;
            if !scene_ids.insert(scene.sample_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate scene sample_id {:?}",
                    scene.sample_id
                )));
            }
        }
        let mut text_ids = BTreeSet::new();
        for (id, _) in &self.texts {
            if !text_ids.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate text sample_id {id:?}")));
            }
        }
        if scene_ids != text_ids {
            for id in text_ids.difference(&scene_ids) {
                return Err(Error::Data(format!("text {id:?} has no paired scene")));
            }
            for id in scene_ids.difference(&text_ids) {
                return Err(Error::Data(format!("scene {id:?} has no paired text")));
            }
        }
        let mut assigned = BTreeSet::new();
        for id in self.split.train.iter().chain(&self.split.validation) {
            if !scene_ids.contains(id.as_str()) {
                return Err(Error::Data(format!(
                    "split references unknown sample_id {id:?}"
                )));
            }
            if !assigned.insert(id.as_str()) {
                return Err(Error::Data(format!(
                    "sample_id {id:?} appears in both splits"
                )));
            }
        }
        if assigned.len() != scene_ids.len() {
            let missing = scene_ids.difference(&assigned).next().unwrap();
            return Err(Error::Data(format!(
                "sample_id {missing:?} is in neither split"
            )));
        }
        Ok(())
    }

    pub fn scene_by_id(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.sample_id == id)
    }

    pub fn caption_by_id(&self, id: &str) -> Option<&str> {
        self.texts
            .iter()
            .find(|(sid, _)| sid == id)
            .map(|(_, c)| c.as_str())
    }
}

/// Reads a tensor container of BEV sequences into scene records, sorted
/// by sample id. All samples must share one `[n × d_b]` shape and be
/// finite. An empty container is a valid empty list.
pub fn load_bev_features(path: &Path) -> Result<Vec<SceneRecord>> {
    let container = read_container(path)?;
    let mut records = Vec::with_capacity(container.len());
    let mut expected_shape: Option<Vec<usize>> = None;
    for (sample_id, bev_sequence) in container {
        let record = SceneRecord {
            sample_id,
            bev_sequence,
        };
        record.validate()?;
        match &expected_shape {
            None => expected_shape = Some(record.bev_sequence.shape().to_vec()),
            Some(shape) => {
                if record.bev_sequence.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "sample {}: shape {:?} disagrees with {:?}",
                        record.sample_id,
                        record.bev_sequence.shape(),
                        shape
                    )));
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes scene records as a tensor container keyed by sample id.
pub fn save_bev_features(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut container = BTreeMap::new();
    for record in records {
        record.validate()?;
        if container
            .insert(record.sample_id.clone(), record.bev_sequence.clone())
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate scene sample_id {:?}",
                record.sample_id
            )));
        }
    }
    write_container(path, &container)
}

/// Parameters for synthetic corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Rows per BEV sequence.
    pub n: usize,
    /// Feature width per BEV row.
    pub d_b: usize,
    /// Standard deviation of the per-sample Gaussian perturbation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            samples_per_class: 4,
            n: 16,
            d_b: 32,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

const ACTIONS: [&str; 8] = [
    "drive through the intersection",
    "wait at the crosswalk",
    "merge onto the highway",
    "turn left at the junction",
    "cruise down the avenue",
    "stop before the roundabout",
    "follow the main road",
    "reverse into the parking bay",
];

const CATEGORIES: [&str; 8] = [
    "car",
    "truck",
    "bus",
    "pedestrian",
    "bicycle",
    "motorcycle",
    "traffic cone",
    "barrier",
];

const LOCATIONS: [&str; 8] = [
    "intersection",
    "crosswalk",
    "highway",
    "junction",
    "avenue",
    "roundabout",
    "road",
    "parking bay",
];

const COUNT_CHOICES: [u32; 3] = [1, 3, 7];

/// Largest number of classes the caption scheme keeps pairwise distinct.
pub const MAX_SYNTH_CLASSES: usize = CATEGORIES.len() * ACTIONS.len() * COUNT_CHOICES.len();

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data("num_classes must be at least 2".into()));
        }
        if self.num_classes > MAX_SYNTH_CLASSES {
            return Err(Error::Data(format!(
                "num_classes {} exceeds the distinct-caption limit {MAX_SYNTH_CLASSES}",
                self.num_classes
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Data("samples_per_class must be at least 2".into()));
        }
        if self.n == 0 || self.d_b == 0 {
            return Err(Error::Data("n and d_b must be positive".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Data("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Caption for one synthetic class: an action phrase plus two counted
/// object mentions. The (category, action, count) triple is unique per
/// class index, so captions are pairwise distinct across classes.
fn class_caption(class: usize) -> String {
    let k = CATEGORIES.len();
    let a = ACTIONS.len();
    let primary = CATEGORIES[class % k];
    let action = ACTIONS[(class / k) % a];
    let primary_count = COUNT_CHOICES[(class / (k * a)) % COUNT_CHOICES.len()];
    let secondary = CATEGORIES[(class + 3) % k];
    let secondary_count = COUNT_CHOICES[(class + 1) % COUNT_CHOICES.len()];
    let ann = SceneAnnotation {
        sample_id: format!("class{class}"),
        base_caption: action.to_string(),
        object_counts: vec![
            ObjectCount {
                category: primary.to_string(),
                count: primary_count,
            },
            ObjectCount {
                category: secondary.to_string(),
                count: secondary_count,
            },
        ],
        qa_pairs: None,
    };
    build_easy_caption(&ann).expect("synthetic counts are positive")
}

/// Generates a paired corpus: one Gaussian prototype sequence per class,
/// samples as prototype plus `noise_sigma`-scaled Gaussian noise, one
/// caption string shared by all samples of a class. The last quarter of
/// each class (at least one sample) forms the validation split. Output is
/// a pure function of `spec`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<PairedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::new();
    let mut texts = Vec::new();
    let mut split = Split::default();
    let val_per_class = (spec.samples_per_class / 4).max(1);
    for class in 0..spec.num_classes {
        let caption = class_caption(class);
        let prototype: Vec<f64> = (0..spec.n * spec.d_b)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for sample in 0..spec.samples_per_class {
            let sample_id = format!("c{class:02}_s{sample:02}");
            let data: Vec<f64> = prototype
                .iter()
                .map(|p| p + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            scenes.push(SceneRecord {
                sample_id: sample_id.clone(),
                bev_sequence: Tensor::new(vec![spec.n, spec.d_b], data)?,
            });
            texts.push((sample_id.clone(), caption.clone()));
            if sample >= spec.samples_per_class - val_per_class {
                split.validation.push(sample_id);
            } else {
                split.train.push(sample_id);
            }
        }
    }
    let corpus = PairedCorpus {
        scenes,
        texts,
        split,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Toy knowledge graph whose entities are the caption keywords: object
/// categories under a small taxonomy, co-occurrence links between
/// categories, and the scene locations each category passes.
pub fn companion_kg_triples() -> Vec<(String, String, String)> {
    let mut triples = Vec::new();
    let parents = [
        ("car", "vehicle"),
        ("truck", "vehicle"),
        ("bus", "vehicle"),
        ("bicycle", "vehicle"),
        ("motorcycle", "vehicle"),
        ("pedestrian", "road user"),
        ("traffic cone", "obstacle"),
        ("barrier", "obstacle"),
    ];
    for (child, parent) in parents {
        triples.push((child.to_string(), "is_a".to_string(), parent.to_string()));
    }
    for i in 0..CATEGORIES.len() {
        let next = CATEGORIES[(i + 1) % CATEGORIES.len()];
        triples.push((
            CATEGORIES[i].to_string(),
            "shares_road_with".to_string(),
            next.to_string(),
        ));
        triples.push((
            CATEGORIES[i].to_string(),
            "passes".to_string(),
            LOCATIONS[i].to_string(),
        ));
    }
    triples
}

/// Synonym table matching the caption surface forms (plurals and a few
/// alternate names) to the companion graph's entity names.
pub fn companion_synonyms() -> SynonymMap {
    let entries = [
        ("cars", "car"),
        ("trucks", "truck"),
        ("buses", "bus"),
        ("pedestrians", "pedestrian"),
        ("bicycles", "bicycle"),
        ("motorcycles", "motorcycle"),
        ("traffic cones", "traffic cone"),
        ("barriers", "barrier"),
        ("automobile", "car"),
        ("automobiles", "car"),
        ("lorry", "truck"),
        ("lorries", "truck"),
        ("bike", "bicycle"),
        ("bikes", "bicycle"),
    ];
    let mut map = BTreeMap::new();
    for (alias, canonical) in entries {
        map.insert(alias.to_string(), canonical.to_string());
    }
    SynonymMap::new(map)
}

const FEATURES_FILE: &str = "features.tsr";
const CAPTIONS_FILE: &str = "captions.jsonl";
const SPLIT_FILE: &str = "split.json";

/// Writes a corpus as three files in `dir`: the feature container, the
/// caption JSONL (tagged with `level`), and the split JSON.
pub fn save_corpus(dir: &Path, corpus: &PairedCorpus, level: CaptionLevel) -> Result<()> {
    corpus.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_bev_features(&dir.join(FEATURES_FILE), &corpus.scenes)?;
    write_caption_jsonl(&dir.join(CAPTIONS_FILE), &corpus.texts, level)?;
    let split_path = dir.join(SPLIT_FILE);
    let split_json = serde_json::to_string_pretty(&corpus.split)
        .map_err(|e| Error::Data(format!("split serialization failed: {e}")))?;
    std::fs::write(&split_path, split_json).map_err(|e| Error::io(&split_path, e))?;
    Ok(())
}

/// Reads a corpus written by [`save_corpus`] and validates the pairing.
/// Scenes come back sorted by sample id; texts keep caption-file order.
pub fn load_corpus(dir: &Path) -> Result<PairedCorpus> {
    let scenes = load_bev_features(&dir.join(FEATURES_FILE))?;
    let records = read_caption_jsonl(&dir.join(CAPTIONS_FILE))?;
    let texts = records
        .into_iter()
        .map(|r| (r.sample_id, r.caption))
        .collect();
    let split_path = dir.join(SPLIT_FILE);
    let split_json = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split: Split = serde_json::from_str(&split_json)
        .map_err(|e| Error::parse_at(format!("invalid split JSON: {e}"), &split_path, None))?;
    let corpus = PairedCorpus {
        scenes,
        texts,
        split,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Nearest-prototype classification accuracy of raw features, used to
/// sanity-check synthetic class separability.
pub fn nearest_prototype_accuracy(corpus: &PairedCorpus, spec: &SynthSpec) -> Result<f64> {
    let mut class_means: HashMap<String, (Vec<f64>, usize)> = HashMap::new();
    let caption_of: HashMap<&str, &str> = corpus
        .texts
        .iter()
        .map(|(id, c)| (id.as_str(), c.as_str()))
        .collect();
    for scene in &corpus.scenes {
        let caption = caption_of
            .get(scene.sample_id.as_str())
            .ok_or_else(|| Error::Data(format!("unpaired scene {:?}", scene.sample_id)))?;
        let entry = class_means
            .entry(caption.to_string())
            .or_insert_with(|| (vec![0.0; spec.n * spec.d_b], 0));
        for (acc, v) in entry.0.iter_mut().zip(scene.bev_sequence.data()) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let means: Vec<(String, Vec<f64>)> = class_means
        .into_iter()
        .map(|(caption, (sum, count))| {
            let mean = sum.iter().map(|v| v / count as f64).collect();
            (caption, mean)
        })
        .collect();
    let mut correct = 0usize;
    for scene in &corpus.scenes {
        let truth = caption_of[scene.sample_id.as_str()];
        let mut best: Option<(&str, f64)> = None;
        for (caption, mean) in &means {
            let dist: f64 = scene
                .bev_sequence
                .data()
                .iter()
                .zip(mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((caption, dist));
            }
        }
        if best.map(|(c, _)| c) == Some(truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.scenes.len() as f64)
}
