//! Trait hierarchy and trait-relevant statement (TRS) sets.
//!
//! A [`TraitTaxonomy`] is a two-level hierarchy of domains and facets. Every
//! statement in a [`TrsSet`] points at one facet and carries a key: `+1` when
//! agreeing with it indicates high expression of the facet, `-1` when it
//! indicates low expression. Sets are immutable values; [`expand`] and
//! [`deactivate`] return child sets that keep every parent item.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const IPIP_NEO_300: &str = include_str!("../data/ipip_neo_300.jsonl");
const PROPER_NOUNS: &str = include_str!("../data/proper_nouns.txt");

/// Polarity linking a statement to its facet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Positive,
    Negative,
}

impl Key {
    pub fn sign(self) -> i64 {
        match self {
            Key::Positive => 1,
            Key::Negative => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Key> {
        match sign {
            1 => Some(Key::Positive),
            -1 => Some(Key::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Key {
        match self {
            Key::Positive => Key::Negative,
            Key::Negative => Key::Positive,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Key::Positive => "+1",
            Key::Negative => "-1",
        })
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_i64(self.sign())
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let sign = i64::deserialize(deserializer)?;
        Key::from_sign(sign)
            .ok_or_else(|| serde::de::Error::custom(format!("key must be 1 or -1, got {sign}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Inventory,
    Expert,
    Generated,
    Promoted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// Short code accepted wherever a domain is named (`E` for Extraversion).
    pub code: String,
    pub facets: Vec<String>,
}

/// Index of a facet in taxonomy order (domains in order, facets within).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FacetId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitTaxonomy {
    domains: Vec<Domain>,
}

impl TraitTaxonomy {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut codes = HashSet::new();
        for domain in &domains {
            if domain.name.trim().is_empty() {
                return Err(Error::Taxonomy("empty domain name".into()));
            }
            if !names.insert(domain.name.to_lowercase()) {
                return Err(Error::Taxonomy(format!("duplicate domain {:?}", domain.name)));
            }
            if !codes.insert(domain.code.to_lowercase()) {
                return Err(Error::Taxonomy(format!("duplicate domain code {:?}", domain.code)));
            }
            let mut facets = HashSet::new();
            for facet in &domain.facets {
                if facet.trim().is_empty() {
                    return Err(Error::Taxonomy(format!("empty facet name in {}", domain.name)));
                }
                if !facets.insert(facet.to_lowercase()) {
                    return Err(Error::Taxonomy(format!(
                        "duplicate facet {:?} in {}",
                        facet, domain.name
                    )));
                }
            }
        }
        Ok(TraitTaxonomy { domains })
    }

    /// The Big Five hierarchy with the thirty IPIP-NEO facets.
    pub fn big_five() -> Self {
        let d = |name: &str, code: &str, facets: [&str; 6]| Domain {
            name: name.into(),
            code: code.into(),
            facets: facets.iter().map(|f| f.to_string()).collect(),
        };
        TraitTaxonomy {
            domains: vec![
                d(
                    "Neuroticism",
                    "N",
                    ["Anxiety", "Anger", "Depression", "Self-Consciousness", "Immoderation", "Vulnerability"],
                ),
                d(
                    "Extraversion",
                    "E",
                    [
                        "Friendliness",
                        "Gregariousness",
                        "Assertiveness",
                        "Activity Level",
                        "Excitement-Seeking",
                        "Cheerfulness",
                    ],
                ),
                d(
                    "Openness",
                    "O",
                    [
                        "Imagination",
                        "Artistic Interests",
                        "Emotionality",
                        "Adventurousness",
                        "Intellect",
                        "Liberalism",
                    ],
                ),
                d(
                    "Agreeableness",
                    "A",
                    ["Trust", "Morality", "Altruism", "Cooperation", "Modesty", "Sympathy"],
                ),
                d(
                    "Conscientiousness",
                    "C",
                    [
                        "Self-Efficacy",
                        "Orderliness",
                        "Dutifulness",
                        "Achievement-Striving",
                        "Self-Discipline",
                        "Cautiousness",
                    ],
                ),
            ],
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: TraitTaxonomy = serde_json::from_str(&text)?;
        TraitTaxonomy::new(raw.domains)
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn facet_count(&self) -> usize {
        self.domains.iter().map(|d| d.facets.len()).sum()
    }

    /// Resolves a domain by name or code, case-insensitively.
    pub fn domain_index(&self, name_or_code: &str) -> Option<usize> {
        self.domains.iter().position(|d| {
            d.name.eq_ignore_ascii_case(name_or_code) || d.code.eq_ignore_ascii_case(name_or_code)
        })
    }

    pub fn facet_id(&self, domain: &str, facet: &str) -> Option<FacetId> {
        let di = self.domain_index(domain)?;
        let offset: usize = self.domains[..di].iter().map(|d| d.facets.len()).sum();
        self.domains[di]
            .facets
            .iter()
            .position(|f| f.eq_ignore_ascii_case(facet))
            .map(|fi| FacetId(offset + fi))
    }

    /// Domain index and facet name for a facet id.
    pub fn facet(&self, id: FacetId) -> Option<(usize, &str)> {
        let mut rest = id.0;
        for (di, d) in self.domains.iter().enumerate() {
            if rest < d.facets.len() {
                return Some((di, &d.facets[rest]));
            }
            rest -= d.facets.len();
        }
        None
    }

    /// Facet ids of one domain, in taxonomy order.
    pub fn domain_facets(&self, domain: usize) -> std::ops::Range<usize> {
        let offset: usize = self.domains[..domain].iter().map(|d| d.facets.len()).sum();
        offset..offset + self.domains[domain].facets.len()
    }
}

impl Default for TraitTaxonomy {
    fn default() -> Self {
        TraitTaxonomy::big_five()
    }
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

/// A trait-relevant statement. Serializes as one record of the line-delimited
/// TRS file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trs {
    pub id: String,
    pub text: String,
    pub domain: String,
    pub facet: String,
    pub key: Key,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_trs: Option<String>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub active: bool,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub generation: u32,
}

impl Trs {
    /// Checks the record against the taxonomy. Referential checks on
    /// `source_trs` need the whole set and happen in [`TrsSet::new`].
    pub fn validate(&self, taxonomy: &TraitTaxonomy) -> Result<()> {
        let invalid = |message: String| Error::InvalidTrs {
            id: self.id.clone(),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(invalid("empty text".into()));
        }
        if taxonomy.facet_id(&self.domain, &self.facet).is_none() {
            return Err(invalid(format!(
                "unknown facet {:?} in domain {:?}",
                self.facet, self.domain
            )));
        }
        match (self.provenance, &self.source_trs) {
            (Provenance::Promoted, None) => Err(invalid("promoted item without source_trs".into())),
            (Provenance::Promoted, Some(_)) if self.generation == 0 => {
                Err(invalid("promoted item must have generation >= 1".into()))
            }
            (p, Some(_)) if p != Provenance::Promoted => {
                Err(invalid("source_trs is only allowed on promoted items".into()))
            }
            _ => Ok(()),
        }
    }
}

/// An immutable, validated collection of statements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrsSet {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    items: Vec<Trs>,
}

impl TrsSet {
    pub fn new(
        name: impl Into<String>,
        parent: Option<String>,
        items: Vec<Trs>,
        taxonomy: &TraitTaxonomy,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(items.len());
        for item in &items {
            item.validate(taxonomy)?;
            if !ids.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        for item in &items {
            if let Some(src) = &item.source_trs {
                if !ids.contains(src.as_str()) {
                    return Err(Error::InvalidTrs {
                        id: item.id.clone(),
                        message: format!("source_trs {src:?} does not exist"),
                    });
                }
            }
        }
        Ok(TrsSet {
            name: name.into(),
            parent,
            items,
        })
    }

    /// The bundled 300-item IPIP-NEO inventory, rewritten in the first person.
    pub fn ipip_neo() -> Self {
        let taxonomy = TraitTaxonomy::big_five();
        let items = parse_trs_records(IPIP_NEO_300, "ipip_neo_300.jsonl")
            .expect("bundled inventory parses");
        let nouns = ProperNouns::bundled().with_inventory(items.iter().map(|t| t.text.as_str()));
        let items = items
            .into_iter()
            .map(|mut t| {
                t.text = nouns.self_referentialize(&t.text);
                t
            })
            .collect();
        TrsSet::new("ipip_neo", None, items, &taxonomy).expect("bundled inventory validates")
    }

    pub fn items(&self) -> &[Trs] {
        &self.items
    }

    pub fn active(&self) -> impl Iterator<Item = &Trs> {
        self.items.iter().filter(|t| t.active)
    }

    pub fn get(&self, id: &str) -> Option<&Trs> {
        self.items.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_generation(&self) -> u32 {
        self.items.iter().map(|t| t.generation).max().unwrap_or(0)
    }

    /// Follows `source_trs` links from `id` back to a non-promoted item.
    /// The first element is `id` itself.
    pub fn source_chain(&self, id: &str) -> Result<Vec<&Trs>> {
        let mut chain = Vec::new();
        let mut seen = HashSet::new();
        let mut cur = id;
        loop {
            let item = self.get(cur).ok_or_else(|| Error::UnknownTrs(cur.to_string()))?;
            if !seen.insert(cur) {
                return Err(Error::InvalidTrs {
                    id: id.to_string(),
                    message: "cyclic source_trs chain".into(),
                });
            }
            chain.push(item);
            match &item.source_trs {
                Some(src) => cur = src,
                None => return Ok(chain),
            }
        }
    }

    pub fn stats(&self, taxonomy: &TraitTaxonomy) -> TrsStats {
        let mut stats = TrsStats {
            name: self.name.clone(),
            parent: self.parent.clone(),
            total: self.items.len(),
            active: 0,
            by_provenance: BTreeMap::new(),
            by_domain: BTreeMap::new(),
            by_facet: Vec::new(),
        };
        let mut facet_counts = vec![(0usize, 0usize); taxonomy.facet_count()];
        for item in &self.items {
            *stats
                .by_provenance
                .entry(format!("{:?}", item.provenance).to_lowercase())
                .or_default() += 1;
            if !item.active {
                continue;
            }
            stats.active += 1;
            if let Some(id) = taxonomy.facet_id(&item.domain, &item.facet) {
                let (di, _) = taxonomy.facet(id).expect("valid facet id");
                *stats
                    .by_domain
                    .entry(taxonomy.domains()[di].name.clone())
                    .or_default() += 1;
                match item.key {
                    Key::Positive => facet_counts[id.0].0 += 1,
                    Key::Negative => facet_counts[id.0].1 += 1,
                }
            }
        }
        for (i, (pos, neg)) in facet_counts.into_iter().enumerate() {
            let (di, facet) = taxonomy.facet(FacetId(i)).expect("valid facet id");
            stats.by_facet.push(FacetCount {
                domain: taxonomy.domains()[di].name.clone(),
                facet: facet.to_string(),
                positive: pos,
                negative: neg,
            });
        }
        stats
    }

    /// Writes the set as TRS file records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("trs serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FacetCount {
    pub domain: String,
    pub facet: String,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrsStats {
    pub name: String,
    pub parent: Option<String>,
    pub total: usize,
    pub active: usize,
    pub by_provenance: BTreeMap<String, usize>,
    pub by_domain: BTreeMap<String, usize>,
    pub by_facet: Vec<FacetCount>,
}

/// Parses one TRS file record.
pub fn parse_trs_line(line: &str) -> Result<Trs, serde_json::Error> {
    serde_json::from_str(line)
}

/// Parses line-delimited TRS records. Blank lines are skipped; `source`
/// names the input in error messages.
pub fn parse_trs_records(text: &str, source: &str) -> Result<Vec<Trs>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_trs_line(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Loads a TRS file into a set named after the file stem. Inventory items are
/// rewritten in the first person.
pub fn load_inventory(path: &Path, taxonomy: &TraitTaxonomy) -> Result<TrsSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trs".into());
    let source = path.display().to_string();
    let mut items = parse_trs_records(&text, &source)?;
    for (line, item) in items.iter().enumerate() {
        item.validate(taxonomy).map_err(|e| Error::Parse {
            path: source.clone(),
            line: line + 1,
            message: e.to_string(),
        })?;
    }
    let nouns = ProperNouns::bundled().with_inventory(items.iter().map(|t| t.text.as_str()));
    for item in items.iter_mut().filter(|t| t.provenance == Provenance::Inventory) {
        item.text = nouns.self_referentialize(&item.text);
    }
    if items.is_empty() {
        log::warn!("{source}: no statements loaded");
    }
    let set = TrsSet::new(name, None, items, taxonomy)?;
    log::info!("{source}: loaded {} statements", set.len());
    Ok(set)
}

const FIRST_PERSON: [&str; 5] = ["I", "I'm", "I've", "I'd", "I'll"];

/// Words that keep their capital letter when a statement is rewritten in the
/// first person.
#[derive(Debug, Clone, Default)]
pub struct ProperNouns {
    words: HashSet<String>,
}

impl ProperNouns {
    pub fn bundled() -> Self {
        ProperNouns {
            words: PROPER_NOUNS
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        }
    }

    /// Adds every word that appears capitalized in a non-initial position of
    /// some item.
    pub fn with_inventory<'a>(mut self, items: impl IntoIterator<Item = &'a str>) -> Self {
        for item in items {
            for word in item.split_whitespace().skip(1) {
                let word = word.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
                if word.chars().next().is_some_and(char::is_uppercase) && !is_first_person(word) {
                    self.words.insert(word.to_string());
                }
            }
        }
        self
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    /// Prepends `I` unless the statement already starts with a first-person
    /// subject. Idempotent.
    pub fn self_referentialize(&self, text: &str) -> String {
        let text = text.trim();
        let first = text.split_whitespace().next().unwrap_or("");
        let first_word = first.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        if is_first_person(first_word) {
            return text.to_string();
        }
        if text.is_empty() {
            return String::new();
        }
        let mut out = String::with_capacity(text.len() + 2);
        out.push_str("I ");
        if self.contains(first_word) {
            out.push_str(text);
        } else {
            let mut chars = text.chars();
            let head = chars.next().expect("non-empty");
            out.extend(head.to_lowercase());
            out.push_str(chars.as_str());
        }
        out
    }
}

fn is_first_person(word: &str) -> bool {
    let word = word.replace('\u{2019}', "'");
    FIRST_PERSON.contains(&word.as_str())
}

/// [`ProperNouns::self_referentialize`] with the bundled allowlist.
pub fn self_referentialize(item_text: &str) -> String {
    ProperNouns::bundled().self_referentialize(item_text)
}

/// Returns a child set holding every parent item plus `new_items`. New items
/// get generation `parent.max_generation() + 1`.
pub fn expand(
    parent: &TrsSet,
    new_items: Vec<Trs>,
    child_name: impl Into<String>,
    taxonomy: &TraitTaxonomy,
) -> Result<TrsSet> {
    let generation = parent.max_generation() + 1;
    let existing: HashMap<&str, &Trs> = parent.items.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut incoming = HashSet::new();
    for item in &new_items {
        if existing.contains_key(item.id.as_str()) || !incoming.insert(item.id.as_str()) {
            return Err(Error::DuplicateId(item.id.clone()));
        }
    }
    if new_items.is_empty() {
        log::warn!("expanding {} with no new items", parent.name);
    }
    let mut items = parent.items.clone();
    items.extend(new_items.into_iter().map(|mut t| {
        t.generation = generation;
        t
    }));
    TrsSet::new(child_name, Some(parent.name.clone()), items, taxonomy)
}

/// Returns a child set where the listed items are inactive. Items are never
/// removed so earlier passes stay reproducible.
pub fn deactivate(parent: &TrsSet, ids: &[&str], child_name: impl Into<String>) -> Result<TrsSet> {
    for id in ids {
        if parent.get(id).is_none() {
            return Err(Error::UnknownTrs(id.to_string()));
        }
    }
    let items = parent
        .items
        .iter()
        .cloned()
        .map(|mut t| {
            if ids.contains(&t.id.as_str()) {
                t.active = false;
            }
            t
        })
        .collect();
    Ok(TrsSet {
        name: child_name.into(),
        parent: Some(parent.name.clone()),
        items,
    })
}

/// Lowercased, whitespace-collapsed form used to deduplicate statements.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}
