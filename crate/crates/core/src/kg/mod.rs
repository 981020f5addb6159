//! Knowledge graph storage, embedding models, and their file formats.

pub mod eval;
pub mod fixtures;
pub mod score;
pub mod train;

pub use eval::{evaluate_link_prediction, LinkPredictionReport};
pub use score::{score_distmult, score_transe, Scorer};
pub use train::{train_kge, KgeTrainConfig, KgeTrainResult};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

/// A triple store with interned entity and relation names.
///
/// Ids are assigned in first-appearance order, so a graph's layout is a pure
/// function of its input sequence.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
    triples: Vec<(usize, usize, usize)>,
    triple_set: HashSet<(usize, usize, usize)>,
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn contains_triple(&self, t: (usize, usize, usize)) -> bool {
        self.triple_set.contains(&t)
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_names[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relation_names[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entity_names.len();
        self.entity_names.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        id
    }

    fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relation_names.len();
        self.relation_names.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    fn insert(&mut self, head: &str, relation: &str, tail: &str, line: usize) -> Result<bool> {
        for (field, value) in [("head", head), ("relation", relation), ("tail", tail)] {
            if value.is_empty() {
                return Err(Error::parse_line(format!("empty {field} in triple"), line));
            }
        }
        let h = self.intern_entity(head);
        let r = self.intern_relation(relation);
        let t = self.intern_entity(tail);
        let fresh = self.triple_set.insert((h, r, t));
        if fresh {
            self.triples.push((h, r, t));
        }
        Ok(fresh)
    }
}

/// Build a graph from `(head, relation, tail)` records. Duplicate triples
/// are dropped; the count of drops is returned alongside the graph.
pub fn load_graph<S: AsRef<str>>(records: &[(S, S, S)]) -> Result<(KnowledgeGraph, usize)> {
    if records.is_empty() {
        return Err(Error::Data("graph requires at least one triple".into()));
    }
    let mut g = KnowledgeGraph::default();
    let mut dropped = 0;
    for (i, (h, r, t)) in records.iter().enumerate() {
        if !g.insert(h.as_ref(), r.as_ref(), t.as_ref(), i + 1)? {
            dropped += 1;
        }
    }
    Ok((g, dropped))
}

/// Parse a tab-separated triple file: `head<TAB>relation<TAB>tail` per line,
/// `#` starts a comment line, blank lines ignored.
pub fn read_triple_records(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse_at(
                format!("expected 3 tab-separated fields, got {}", fields.len()),
                path,
                Some(idx + 1),
            ));
        }
        records.push((
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
        ));
    }
    Ok(records)
}

/// Load a triple file directly into a graph.
pub fn load_graph_file(path: &Path) -> Result<(KnowledgeGraph, usize)> {
    let records = read_triple_records(path)?;
    load_graph(&records).map_err(|e| e.with_path(path))
}

/// Surface-form → canonical-entity-name table.
///
/// Lookups that miss the table pass through unchanged, so an empty map is
/// the identity normalization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynonymMap(BTreeMap<String, String>);

impl SynonymMap {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        SynonymMap(pairs.into_iter().collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Canonical name for a surface form.
    /// `(surface form, entity name)` pairs in sorted surface order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn normalize<'a>(&'a self, surface: &'a str) -> &'a str {
        self.0.get(surface).map(String::as_str).unwrap_or(surface)
    }

    /// Parse `surface_form<TAB>entity_name` lines; `#` comments allowed.
    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::parse_at(
                    "expected `surface<TAB>entity` with non-empty fields",
                    path,
                    Some(idx + 1),
                ));
            }
            map.insert(fields[0].trim().to_string(), fields[1].trim().to_string());
        }
        Ok(SynonymMap(map))
    }
}

/// Trained embedding tables for one graph.
#[derive(Debug, Clone)]
pub struct KgeModel {
    /// `[num_entities × d_kg]`.
    pub entities: Tensor,
    /// `[num_relations × d_kg]`.
    pub relations: Tensor,
    pub scorer: Scorer,
}

impl KgeModel {
    pub fn d_kg(&self) -> usize {
        self.entities.cols()
    }

    pub fn entity_vec(&self, id: usize) -> &[f64] {
        self.entities.row(id)
    }

    pub fn relation_vec(&self, id: usize) -> &[f64] {
        self.relations.row(id)
    }

    pub fn score_ids(&self, h: usize, r: usize, t: usize) -> Result<f64> {
        self.scorer
            .score(self.entity_vec(h), self.relation_vec(r), self.entity_vec(t))
    }
}

/// Embedding row for a keyword, after synonym normalization and exact entity
/// name match. Absence is a normal outcome.
pub fn lookup_embedding<'m>(
    model: &'m KgeModel,
    graph: &KnowledgeGraph,
    synonyms: &SynonymMap,
    keyword: &str,
) -> Option<&'m [f64]> {
    let canonical = synonyms.normalize(keyword);
    graph.entity_id(canonical).map(|id| model.entity_vec(id))
}

#[derive(Debug, Serialize, Deserialize)]
struct KgeHeader {
    scorer: Scorer,
    d_kg: usize,
    entities: Vec<String>,
    relations: Vec<String>,
}

/// Write `<base>.tsr` (embedding tables) and `<base>.json` (scorer + vocab).
pub fn save_kge_checkpoint(base: &Path, model: &KgeModel, graph: &KnowledgeGraph) -> Result<()> {
    let header = KgeHeader {
        scorer: model.scorer,
        d_kg: model.d_kg(),
        entities: graph.entity_names().to_vec(),
        relations: graph.relation_names().to_vec(),
    };
    let mut tensors = BTreeMap::new();
    tensors.insert("entities".to_string(), model.entities.clone());
    tensors.insert("relations".to_string(), model.relations.clone());
    io::write_container(&base.with_extension("tsr"), &tensors)?;
    let header_path = base.with_extension("json");
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&header_path, json + "\n").map_err(|e| Error::io(&header_path, e))
}

/// Inverse of [`save_kge_checkpoint`]; returns the model with its vocab.
pub fn load_kge_checkpoint(base: &Path) -> Result<(KgeModel, Vec<String>, Vec<String>)> {
    let header_path = base.with_extension("json");
    let raw = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: KgeHeader = serde_json::from_str(&raw)
        .map_err(|e| Error::parse(format!("embedding header: {e}")).with_path(&header_path))?;
    let mut tensors = io::read_container(&base.with_extension("tsr"))?;
    let entities = tensors
        .remove("entities")
        .ok_or_else(|| Error::parse("checkpoint missing `entities` tensor"))?;
    let relations = tensors
        .remove("relations")
        .ok_or_else(|| Error::parse("checkpoint missing `relations` tensor"))?;
    for (t, names, what) in [
        (&entities, header.entities.len(), "entity"),
        (&relations, header.relations.len(), "relation"),
    ] {
        if t.shape() != [names, header.d_kg] {
            return Err(Error::Shape(format!(
                "{what} table shape {:?} disagrees with header [{} × {}]",
                t.shape(),
                names,
                header.d_kg
            )));
        }
    }
    Ok((
        KgeModel { entities, relations, scorer: header.scorer },
        header.entities,
        header.relations,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triple_counts() {
        let (g, dropped) = load_graph(&[("scene", "includes", "car")]).unwrap();
        assert_eq!(g.num_entities(), 2);
        assert_eq!(g.num_relations(), 1);
        assert_eq!(g.triples().len(), 1);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn duplicates_drop_with_count() {
        let (g, dropped) =
            load_graph(&[("scene", "includes", "car"), ("scene", "includes", "car")]).unwrap();
        assert_eq!(g.triples().len(), 1);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn first_appearance_ids() {
        let (g, _) = load_graph(&[("a", "r", "b"), ("b", "r", "c")]).unwrap();
        assert_eq!(g.entity_id("a"), Some(0));
        assert_eq!(g.entity_id("b"), Some(1));
        assert_eq!(g.entity_id("c"), Some(2));
    }

    #[test]
    fn empty_component_reports_record_number() {
        let err = load_graph(&[("a", "r", "b"), ("", "r", "c")]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(load_graph::<&str>(&[]).is_err());
    }

    #[test]
    fn triple_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.tsv");
        std::fs::write(
            &path,
            "# toy graph\nscene\tincludes\tcar\n\nscene\tincludes\ttruck\n",
        )
        .unwrap();
        let (g, dropped) = load_graph_file(&path).unwrap();
        assert_eq!(g.num_entities(), 3);
        assert_eq!(dropped, 0);

        std::fs::write(&path, "scene\tincludes\n").unwrap();
        let err = load_graph_file(&path).unwrap_err();
        assert!(err.to_string().contains("kg.tsv:1"), "{err}");
    }

    #[test]
    fn synonym_normalization_and_lookup() {
        let (g, _) = load_graph(&[("car", "is_a", "vehicle")]).unwrap();
        let model = KgeModel {
            entities: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            relations: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            scorer: Scorer::TranseL2,
        };
        let syn = SynonymMap::new([("automobile".to_string(), "car".to_string())]);
        assert_eq!(lookup_embedding(&model, &g, &syn, "car"), Some(&[1.0, 2.0][..]));
        assert_eq!(
            lookup_embedding(&model, &g, &syn, "automobile"),
            Some(&[1.0, 2.0][..])
        );
        assert_eq!(lookup_embedding(&model, &g, &syn, "unicorn"), None);
    }

    #[test]
    fn synonym_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.tsv");
        std::fs::write(&path, "# synonyms\nautomobile\tcar\nlorry\ttruck\n").unwrap();
        let syn = SynonymMap::read_file(&path).unwrap();
        assert_eq!(syn.len(), 2);
        assert_eq!(syn.normalize("lorry"), "truck");
        assert_eq!(syn.normalize("bus"), "bus");

        std::fs::write(&path, "only_one_field\n").unwrap();
        assert!(SynonymMap::read_file(&path).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_stable() {
        let (g, _) = load_graph(&[("a", "r", "b"), ("b", "r", "c")]).unwrap();
        let model = KgeModel {
            entities: Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            relations: Tensor::matrix(1, 2, vec![0.7, 0.8]).unwrap(),
            scorer: Scorer::TranseL1,
        };
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("kge");
        save_kge_checkpoint(&base, &model, &g).unwrap();
        let first = std::fs::read(base.with_extension("tsr")).unwrap();
        save_kge_checkpoint(&base, &model, &g).unwrap();
        assert_eq!(first, std::fs::read(base.with_extension("tsr")).unwrap());

        let (back, entities, relations) = load_kge_checkpoint(&base).unwrap();
        assert_eq!(back.scorer, Scorer::TranseL1);
        assert_eq!(back.entities.data(), model.entities.data());
        assert_eq!(entities, g.entity_names());
        assert_eq!(relations, g.relation_names());
    }
}
