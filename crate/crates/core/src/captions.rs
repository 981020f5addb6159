//! Caption construction from perception annotations.
//!
//! Scene annotations carry a base description plus per-category object
//! counts and optional question/answer pairs. Two caption variants are
//! built from them: the easy variant appends quantity-descriptor object
//! summaries ("many cars, several trucks, one bus"), the hard variant
//! further appends the QA pairs. All fragments are joined with ", ".

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One counted object category in a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCount {
    pub category: String,
    /// Number of instances observed; must be at least 1.
    pub count: u32,
}

/// One question/answer pair attached to a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// A scene's annotation: base description, ordered object counts, and
/// optional QA pairs. Category order is preserved in built captions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub sample_id: String,
    pub base_caption: String,
    #[serde(default)]
    pub object_counts: Vec<ObjectCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_pairs: Option<Vec<QaPair>>,
}

impl SceneAnnotation {
    /// Checks the structural invariants: non-empty sample id, counts at
    /// least 1, non-empty category names.
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::Data("annotation has an empty sample_id".into()));
        }
        for oc in &self.object_counts {
            if oc.category.is_empty() {
                return Err(Error::Data(format!(
                    "annotation {}: empty object category",
                    self.sample_id
                )));
            }
            if oc.count == 0 {
                return Err(Error::Data(format!(
                    "annotation {}: category {:?} has count 0",
                    self.sample_id, oc.category
                )));
            }
        }
        Ok(())
    }
}

/// Which caption variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLevel {
    Easy,
    Hard,
}

impl fmt::Display for CaptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionLevel::Easy => f.write_str("easy"),
            CaptionLevel::Hard => f.write_str("hard"),
        }
    }
}

impl FromStr for CaptionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(CaptionLevel::Easy),
            "hard" => Ok(CaptionLevel::Hard),
            other => Err(Error::Data(format!(
                "unknown caption level {other:?} (expected \"easy\" or \"hard\")"
            ))),
        }
    }
}

/// Maps an object count to its quantity word: 1 is "one", 2 through 4 are
/// "several", 5 and above are "many". Zero is rejected.
pub fn quantity_descriptor(count: u32) -> Result<&'static str> {
    match count {
        0 => Err(Error::Data("quantity descriptor undefined for count 0".into())),
        1 => Ok("one"),
        2..=4 => Ok("several"),
        _ => Ok("many"),
    }
}

/// Irregular plural forms; everything else takes a plain "s" suffix.
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("bus", "buses"),
    ("person", "people"),
    ("child", "children"),
];

/// Returns the category name pluralized for the given count. Counts of 1
/// keep the singular form.
pub fn pluralize(category: &str, count: u32) -> String {
    if count <= 1 {
        return category.to_string();
    }
    for (singular, plural) in IRREGULAR_PLURALS {
        if category == *singular {
            return (*plural).to_string();
        }
    }
    format!("{category}s")
}

/// Builds the easy caption: the base caption followed by one
/// "descriptor category" fragment per object count, joined with ", ".
/// An empty count list yields the base caption verbatim.
pub fn build_easy_caption(ann: &SceneAnnotation) -> Result<String> {
    let mut caption = ann.base_caption.clone();
    for oc in &ann.object_counts {
        let descriptor = quantity_descriptor(oc.count)?;
        caption.push_str(", ");
        caption.push_str(descriptor);
        caption.push(' ');
        caption.push_str(&pluralize(&oc.category, oc.count));
    }
    Ok(caption)
}

/// Builds the hard caption: the easy caption followed by each
/// "question answer" fragment in order, joined with ", ". Without QA
/// pairs this is exactly the easy caption.
pub fn build_hard_caption(ann: &SceneAnnotation) -> Result<String> {
    let mut caption = build_easy_caption(ann)?;
    if let Some(pairs) = &ann.qa_pairs {
        for qa in pairs {
            caption.push_str(", ");
            caption.push_str(&qa.question);
            caption.push(' ');
            caption.push_str(&qa.answer);
        }
    }
    Ok(caption)
}

/// Captions built for a corpus, plus the number of distinct caption
/// strings (a dataset diversity statistic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusCaptions {
    /// `(sample_id, caption)` in annotation order.
    pub captions: Vec<(String, String)>,
    pub distinct: usize,
}

/// Builds the chosen caption variant for every annotation. Sample ids
/// must be unique across the corpus.
pub fn build_corpus_captions(
    annotations: &[SceneAnnotation],
    level: CaptionLevel,
) -> Result<CorpusCaptions> {
    let mut seen = HashSet::with_capacity(annotations.len());
    let mut captions = Vec::with_capacity(annotations.len());
    let mut distinct = BTreeSet::new();
    for ann in annotations {
        ann.validate()?;
        if !seen.insert(ann.sample_id.as_str()) {
            return Err(Error::Data(format!(
                "duplicate sample_id {:?} in annotation corpus",
                ann.sample_id
            )));
        }
        let caption = match level {
            CaptionLevel::Easy => build_easy_caption(ann)?,
            CaptionLevel::Hard => build_hard_caption(ann)?,
        };
        distinct.insert(caption.clone());
        captions.push((ann.sample_id.clone(), caption));
    }
    Ok(CorpusCaptions {
        captions,
        distinct: distinct.len(),
    })
}

/// One line of a caption JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub caption: String,
    pub level: CaptionLevel,
}

/// Reads a JSON array of scene annotations and validates each entry.
pub fn read_annotations(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let annotations: Vec<SceneAnnotation> = serde_json::from_str(&text)
        .map_err(|e| Error::parse_at(format!("invalid annotation JSON: {e}"), path, None))?;
    for ann in &annotations {
        ann.validate().map_err(|e| match e {
            Error::Data(msg) => Error::parse_at(msg, path, None),
            other => other,
        })?;
    }
    Ok(annotations)
}

/// Writes captions as JSONL, one `{"sample_id", "caption", "level"}`
/// object per line. Output bytes are deterministic for a given input.
pub fn write_caption_jsonl(
    path: &Path,
    captions: &[(String, String)],
    level: CaptionLevel,
) -> Result<()> {
    let mut out = String::new();
    for (sample_id, caption) in captions {
        let record = CaptionRecord {
            sample_id: sample_id.clone(),
            caption: caption.clone(),
            level,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Data(format!("caption serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a caption JSONL file written by [`write_caption_jsonl`].
pub fn read_caption_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse_line(format!("invalid caption record: {e}"), idx + 1))
            .map_err(|e| e.with_path(path))?;
        records.push(record);
    }
    Ok(records)
}
