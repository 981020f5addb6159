//! Small deterministic graphs for demos, benchmarks, and tests.

use std::collections::BTreeMap;

/// Three-generation family tree: 16 people, 4 relations, 96 triples.
///
/// All four relations are antisymmetric and every within-couple ambiguity
/// (two parents of the same child, siblings sharing both parents) is itself
/// a true triple, which makes the graph a clean target for filtered
/// link-prediction ranking.
pub fn family_triples() -> Vec<(String, String, String)> {
    let families: &[(&str, &str, &[&str])] = &[
        ("adam", "beth", &["eve", "frank", "pete"]),
        ("carl", "dana", &["gina", "hugo", "opal"]),
        ("eve", "hugo", &["ivan", "judy", "kate"]),
        ("frank", "gina", &["liam", "mona", "noel"]),
    ];

    let mut triples = Vec::new();
    let mut parents_of: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (father, mother, kids) in families {
        for kid in *kids {
            for parent in [*father, *mother] {
                triples.push((parent.to_string(), "parent_of".to_string(), kid.to_string()));
                triples.push((kid.to_string(), "child_of".to_string(), parent.to_string()));
            }
            parents_of.entry(kid).or_default().extend([*father, *mother]);
        }
    }
    for (father, mother, kids) in families {
        for parent in [*father, *mother] {
            let Some(grandparents) = parents_of.get(parent) else { continue };
            for gp in grandparents {
                for kid in *kids {
                    triples.push((gp.to_string(), "grandparent_of".to_string(), kid.to_string()));
                    triples.push((kid.to_string(), "grandchild_of".to_string(), gp.to_string()));
                }
            }
        }
    }
    triples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_graph;

    #[test]
    fn family_graph_shape() {
        let records = family_triples();
        let (g, dropped) = load_graph(&records).unwrap();
        assert_eq!(g.num_entities(), 16);
        assert_eq!(g.num_relations(), 4);
        assert_eq!(g.triples().len(), 96);
        assert_eq!(dropped, 0);
    }
}
