//! In-memory radiology ontology: concepts with a class, parent links, synonyms
//! and optional anatomical-site links.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::tokenizer::normalize_surface;

pub const ANATOMICAL_ENTITY: &str = "anatomical entity";
/// Label of the concept whose immediate children partition disorders by body system.
pub const BODY_SYSTEM_ROOT: &str = "body-system-specific disorder";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("duplicate concept id {0}")]
    DuplicateId(String),
    #[error("duplicate preferred label `{label}` on {first} and {second}")]
    DuplicateLabel {
        label: String,
        first: String,
        second: String,
    },
    #[error("concept {concept} references unknown id {missing}")]
    DanglingReference { concept: String, missing: String },
    #[error("concept {concept} has anatomical site {site} of class `{class}`")]
    SiteNotAnatomical {
        concept: String,
        site: String,
        class: String,
    },
    #[error("parent cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown concept id {0}")]
    UnknownConcept(String),
}

/// One ontology line: `{"id","label","synonyms","class","parents","anatomical_site"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    #[serde(rename = "label")]
    pub preferred_label: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(rename = "class")]
    pub radlex_class: String,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default)]
    pub anatomical_site: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    concepts: BTreeMap<String, Concept>,
    /// Normalized surface form to concept ids, in file order.
    surface_index: HashMap<String, Vec<String>>,
    class_roots: BTreeMap<String, String>,
    order: Vec<String>,
    body_system_children: BTreeSet<String>,
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_concepts(jsonl::read(path)?)
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self, TaxonomyError> {
        Self::from_concepts(jsonl::parse_str(text, "<taxonomy>")?)
    }

    /// Validates ids, labels, references and acyclicity, then builds the indexes.
    pub fn from_concepts(list: Vec<Concept>) -> Result<Self, TaxonomyError> {
        let mut concepts = BTreeMap::new();
        let mut order = Vec::with_capacity(list.len());
        let mut labels: HashMap<String, String> = HashMap::new();
        for mut c in list {
            c.preferred_label = c.preferred_label.to_lowercase();
            for s in &mut c.synonyms {
                *s = s.to_lowercase();
            }
            if let Some(first) = labels.insert(c.preferred_label.clone(), c.id.clone()) {
                return Err(TaxonomyError::DuplicateLabel {
                    label: c.preferred_label,
                    first,
                    second: c.id,
                });
            }
            order.push(c.id.clone());
            if let Some(prev) = concepts.insert(c.id.clone(), c) {
                return Err(TaxonomyError::DuplicateId(prev.id));
            }
        }
        for c in concepts.values() {
            for p in &c.parents {
                if !concepts.contains_key(p) {
                    return Err(TaxonomyError::DanglingReference {
                        concept: c.id.clone(),
                        missing: p.clone(),
                    });
                }
            }
            for s in &c.anatomical_site {
                let site = concepts.get(s).ok_or_else(|| TaxonomyError::DanglingReference {
                    concept: c.id.clone(),
                    missing: s.clone(),
                })?;
                if site.radlex_class != ANATOMICAL_ENTITY {
                    return Err(TaxonomyError::SiteNotAnatomical {
                        concept: c.id.clone(),
                        site: s.clone(),
                        class: site.radlex_class.clone(),
                    });
                }
            }
        }
        check_acyclic(&concepts, &order)?;

        let mut surface_index: HashMap<String, Vec<String>> = HashMap::new();
        let mut class_roots = BTreeMap::new();
        for id in &order {
            let c = &concepts[id];
            let mut forms: Vec<String> = std::iter::once(&c.preferred_label)
                .chain(&c.synonyms)
                .map(|s| normalize_surface(s))
                .collect();
            forms.dedup();
            for form in forms {
                let ids = surface_index.entry(form).or_default();
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
            if c.parents.is_empty() {
                class_roots.entry(c.radlex_class.clone()).or_insert_with(|| id.clone());
            }
        }
        let mut tax = Taxonomy {
            concepts,
            surface_index,
            class_roots,
            order,
            body_system_children: BTreeSet::new(),
        };
        if let Some(root) = tax.by_label(BODY_SYSTEM_ROOT).map(|c| c.id.clone()) {
            tax.body_system_children = tax
                .concepts
                .values()
                .filter(|c| c.parents.contains(&root))
                .map(|c| c.id.clone())
                .collect();
        }
        Ok(tax)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id)
    }

    /// Concepts in file order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.order.iter().map(|id| &self.concepts[id])
    }

    pub fn class_roots(&self) -> &BTreeMap<String, String> {
        &self.class_roots
    }

    pub fn by_label(&self, label: &str) -> Option<&Concept> {
        let key = normalize_surface(label);
        self.surface_index
            .get(&key)?
            .iter()
            .map(|id| &self.concepts[id])
            .find(|c| normalize_surface(&c.preferred_label) == key)
    }

    /// Exact match of the normalized surface against labels and synonyms.
    pub fn lookup(&self, surface: &str) -> Option<Vec<&Concept>> {
        self.lookup_normalized(&normalize_surface(surface))
    }

    /// Like [`Taxonomy::lookup`] for a key already in normalized form.
    pub fn lookup_normalized(&self, key: &str) -> Option<Vec<&Concept>> {
        let ids = self.surface_index.get(key)?;
        Some(ids.iter().map(|id| &self.concepts[id]).collect())
    }

    pub fn contains_surface(&self, surface: &str) -> bool {
        self.surface_index.contains_key(&normalize_surface(surface))
    }

    pub fn class_of(&self, id: &str) -> Result<&str, TaxonomyError> {
        self.concepts
            .get(id)
            .map(|c| c.radlex_class.as_str())
            .ok_or_else(|| TaxonomyError::UnknownConcept(id.to_string()))
    }

    /// The concept and all its ancestors.
    pub fn ancestors_inclusive(&self, id: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            if let Some(c) = self.concepts.get(&cur) {
                if seen.insert(cur) {
                    stack.extend(c.parents.iter().cloned());
                }
            }
        }
        seen
    }

    /// Declared sites, or those of the nearest ancestors that declare any.
    /// Breadth-first: every ancestor at the first depth carrying a declaration
    /// contributes.
    pub fn anatomical_sites(&self, id: &str) -> BTreeSet<String> {
        let mut frontier = vec![id.to_string()];
        let mut seen = BTreeSet::new();
        while !frontier.is_empty() {
            let mut found = BTreeSet::new();
            let mut next = Vec::new();
            for cur in frontier {
                let Some(c) = self.concepts.get(&cur) else { continue };
                if !seen.insert(cur) {
                    continue;
                }
                found.extend(c.anatomical_site.iter().cloned());
                next.extend(c.parents.iter().cloned());
            }
            if !found.is_empty() {
                return found;
            }
            frontier = next;
        }
        BTreeSet::new()
    }

    /// Immediate children of the body-system root that the concept descends from.
    pub fn body_systems(&self, id: &str) -> BTreeSet<String> {
        if self.body_system_children.is_empty() {
            return BTreeSet::new();
        }
        self.ancestors_inclusive(id)
            .into_iter()
            .filter(|a| self.body_system_children.contains(a))
            .collect()
    }

    /// True iff both concepts descend from a common immediate child of the
    /// body-system-specific disorder root.
    pub fn same_body_system(&self, a: &str, b: &str) -> bool {
        let sa = self.body_systems(a);
        !sa.is_empty() && self.body_systems(b).iter().any(|s| sa.contains(s))
    }
}

fn check_acyclic(concepts: &BTreeMap<String, Concept>, order: &[String]) -> Result<(), TaxonomyError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: HashMap<&str, Mark> = HashMap::new();
    for root in order {
        if marks.contains_key(root.as_str()) {
            continue;
        }
        // iterative DFS; the path stack doubles as the cycle witness
        let mut path: Vec<(&str, usize)> = vec![(root.as_str(), 0)];
        marks.insert(root.as_str(), Mark::Open);
        while let Some(&mut (node, ref mut next)) = path.last_mut() {
            let parents = &concepts[node].parents;
            if *next < parents.len() {
                let p = parents[*next].as_str();
                *next += 1;
                match marks.get(p) {
                    Some(Mark::Open) => {
                        let start = path.iter().position(|(n, _)| *n == p).unwrap();
                        let mut cycle: Vec<String> = path[start..].iter().map(|(n, _)| n.to_string()).collect();
                        cycle.push(p.to_string());
                        return Err(TaxonomyError::Cycle(cycle));
                    }
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(p, Mark::Open);
                        path.push((p, 0));
                    }
                }
            } else {
                marks.insert(node, Mark::Done);
                path.pop();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(id: &str, label: &str, class: &str, parents: &[&str], sites: &[&str]) -> Concept {
        Concept {
            id: id.into(),
            preferred_label: label.into(),
            synonyms: vec![],
            radlex_class: class.into(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            anatomical_site: sites.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn id_of(tax: &Taxonomy, label: &str) -> String {
        tax.by_label(label).unwrap().id.clone()
    }

    #[test]
    fn bundled_fixture_loads() {
        let tax = crate::fixtures::taxonomy();
        assert!(tax.len() >= 120);
        for class in [
            "anatomical entity",
            "clinical finding",
            "procedure",
            "imaging observation",
            "RadLex descriptor",
            "symptom",
        ] {
            assert!(tax.class_roots().contains_key(class), "{class}");
        }
        assert!(tax.by_label(BODY_SYSTEM_ROOT).is_some());
    }

    #[test]
    fn lookup_examples() {
        let tax = crate::fixtures::taxonomy();
        let p = tax.lookup("pneumonia").unwrap();
        assert_eq!(p[0].radlex_class, "clinical finding");
        let l = tax.lookup("Lungs").unwrap();
        assert_eq!(l[0].radlex_class, "anatomical entity");
        assert!(tax.lookup("zzzz").is_none());
        // synonyms resolve to the same concept
        assert_eq!(tax.lookup("lung").unwrap()[0].id, l[0].id);
        assert_eq!(tax.lookup("  Lung   Base ").unwrap()[0].preferred_label, "lung base");
    }

    #[test]
    fn class_of_examples() {
        let tax = crate::fixtures::taxonomy();
        assert_eq!(tax.class_of(&id_of(&tax, "pneumonia")).unwrap(), "clinical finding");
        assert_eq!(tax.class_of(&id_of(&tax, "left")).unwrap(), "location descriptor");
        assert!(matches!(tax.class_of("RX-none"), Err(TaxonomyError::UnknownConcept(_))));
    }

    #[test]
    fn anatomical_sites_and_inheritance() {
        let tax = crate::fixtures::taxonomy();
        let lungs = id_of(&tax, "lungs");
        let pneumonia = id_of(&tax, "pneumonia");
        assert_eq!(tax.anatomical_sites(&pneumonia), BTreeSet::from([lungs.clone()]));
        // lobar pneumonia declares nothing and inherits from pneumonia
        let lobar = id_of(&tax, "lobar pneumonia");
        assert!(tax.get(&lobar).unwrap().anatomical_site.is_empty());
        assert_eq!(tax.anatomical_sites(&lobar), BTreeSet::from([lungs]));
        assert!(tax.anatomical_sites(&id_of(&tax, "cough")).is_empty());
        assert!(tax.anatomical_sites("unknown").is_empty());
    }

    #[test]
    fn nearest_declaration_wins() {
        let tax = Taxonomy::from_concepts(vec![
            concept("a", "anatomy", ANATOMICAL_ENTITY, &[], &[]),
            concept("s1", "site one", ANATOMICAL_ENTITY, &["a"], &[]),
            concept("s2", "site two", ANATOMICAL_ENTITY, &["a"], &[]),
            concept("g", "grand", "clinical finding", &[], &["s1"]),
            concept("p", "parent", "clinical finding", &["g"], &["s2"]),
            concept("c", "child", "clinical finding", &["p"], &[]),
        ])
        .unwrap();
        assert_eq!(tax.anatomical_sites("c"), BTreeSet::from(["s2".to_string()]));
    }

    #[test]
    fn body_system_membership() {
        let tax = crate::fixtures::taxonomy();
        let pneumonia = id_of(&tax, "pneumonia");
        let atelectasis = id_of(&tax, "atelectasis");
        let fracture = id_of(&tax, "fracture");
        let basilar = id_of(&tax, "basilar atelectasis");
        assert!(tax.same_body_system(&pneumonia, &atelectasis));
        assert!(tax.same_body_system(&basilar, &pneumonia));
        assert!(!tax.same_body_system(&pneumonia, &fracture));
        assert!(tax.same_body_system(&fracture, &fracture));
        assert!(!tax.same_body_system(&id_of(&tax, "lungs"), &id_of(&tax, "lungs")));
    }

    #[test]
    fn dangling_parent_is_rejected() {
        let err = Taxonomy::from_concepts(vec![concept("x", "x", "symptom", &["missing"], &[])]).unwrap_err();
        match err {
            TaxonomyError::DanglingReference { missing, .. } => assert_eq!(missing, "missing"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cycle_is_named() {
        let err = Taxonomy::from_concepts(vec![
            concept("a", "a", "symptom", &["c"], &[]),
            concept("b", "b", "symptom", &["a"], &[]),
            concept("c", "c", "symptom", &["b"], &[]),
        ])
        .unwrap_err();
        match err {
            TaxonomyError::Cycle(path) => {
                assert_eq!(path.first(), path.last());
                assert_eq!(path.len(), 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_label_and_bad_site_rejected() {
        let err = Taxonomy::from_concepts(vec![
            concept("a", "same", "symptom", &[], &[]),
            concept("b", "Same", "symptom", &[], &[]),
        ])
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::DuplicateLabel { .. }));
        let err = Taxonomy::from_concepts(vec![
            concept("a", "cough", "symptom", &[], &[]),
            concept("b", "pneumonia", "clinical finding", &[], &["a"]),
        ])
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::SiteNotAnatomical { .. }));
    }

    #[test]
    fn empty_taxonomy_answers_none() {
        let tax = Taxonomy::from_jsonl_str("").unwrap();
        assert!(tax.is_empty());
        assert!(tax.lookup("pneumonia").is_none());
        assert!(!tax.same_body_system("a", "a"));
    }
}
