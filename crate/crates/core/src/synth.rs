//! Seeded synthetic benchmark: one general route plus private key/value
//! domains whose questions come from disjoint surface vocabularies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, QaRecord};
use crate::error::{GagError, Result};

/// Syllables that private answer codes are spelled with.
pub const CODE_SYLLABLES: [&str; 16] = [
    "ka", "ri", "mo", "te", "lu", "sa", "no", "vi", "pe", "du", "ga", "zo", "fi", "he", "bu", "ja",
];

const GENERAL_ANSWERS: [&str; 24] = [
    "apple", "river", "stone", "cloud", "green", "horse", "table", "music", "light", "bread", "paper", "glass",
    "chair", "ocean", "tiger", "candle", "silver", "garden", "winter", "copper", "honey", "marble", "velvet",
    "thunder",
];

struct CatalogRoute {
    name: &'static str,
    phrases: [&'static str; 8],
    templates: [&'static str; 4],
}

/// The general route followed by six private domains, each with its own
/// phrase pool and question wording.
const CATALOG: [CatalogRoute; 7] = [
    CatalogRoute {
        name: "general",
        phrases: [
            "town", "village", "island", "valley", "harbor", "castle", "forest", "market",
        ],
        templates: [
            "{key}: {phrase}, known for?",
            "{key} the {phrase} is known for what?",
            "{key}, the {phrase}, known for?",
            "{key} ({phrase}) is known for what?",
        ],
    },
    CatalogRoute {
        name: "adjuvant",
        phrases: [
            "adjuvant", "antigen", "vaccine", "booster", "serum", "dosage", "immune", "carrier",
        ],
        templates: [
            "{key}: {phrase} code?",
            "{key} has which {phrase} code?",
            "{key}, {phrase} code?",
            "{key} gets what {phrase} code?",
        ],
    },
    CatalogRoute {
        name: "materials",
        phrases: [
            "alloy",
            "polymer",
            "ceramic",
            "composite",
            "lattice",
            "crystal",
            "fiber",
            "resin",
        ],
        templates: [
            "{key} sample; {phrase} grade?",
            "{key} sample of {phrase}: grade?",
            "{key} sample; grade of the {phrase}?",
            "{key} sample ({phrase}) grade?",
        ],
    },
    CatalogRoute {
        name: "astronomy",
        phrases: [
            "orbit", "comet", "nebula", "quasar", "galaxy", "pulsar", "meteor", "stellar",
        ],
        templates: [
            "{key} survey / {phrase} catalog tag?",
            "{key} survey: tag in the {phrase} catalog?",
            "{key} survey, {phrase} catalog tag?",
            "{key} survey lists which {phrase} catalog tag?",
        ],
    },
    CatalogRoute {
        name: "finance",
        phrases: [
            "ledger", "tariff", "bond", "equity", "dividend", "audit", "escrow", "futures",
        ],
        templates: [
            "{key} account - {phrase} ticker?",
            "{key} account - ticker for {phrase}?",
            "{key} account: {phrase} ticker symbol?",
            "{key} account uses which {phrase} ticker?",
        ],
    },
    CatalogRoute {
        name: "biology",
        phrases: [
            "enzyme", "protein", "ribosome", "peptide", "codon", "genome", "plasmid", "mitosis",
        ],
        templates: [
            "{key} strain > {phrase} marker?",
            "{key} strain > marker of {phrase}?",
            "{key} strain carries what {phrase} marker?",
            "{key} strain, {phrase} marker id?",
        ],
    },
    CatalogRoute {
        name: "law",
        phrases: [
            "statute", "verdict", "clause", "tribunal", "appeal", "docket", "motion", "ruling",
        ],
        templates: [
            "{key} matter # {phrase} filing number?",
            "{key} matter # filing number of the {phrase}?",
            "{key} matter, {phrase} filing number?",
            "{key} matter got which {phrase} filing number?",
        ],
    },
];

/// Words mixed into every domain's pool when separability is lowered.
const SHARED_PHRASES: [&str; 8] = [
    "standard",
    "primary",
    "registered",
    "official",
    "current",
    "main",
    "listed",
    "assigned",
];

pub const MAX_CATALOG_ROUTES: usize = CATALOG.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AnswerSpace {
    /// Answers drawn from a fixed word list (repeats allowed).
    Words(Vec<String>),
    /// Distinct random codes of `length` syllables.
    Codes { syllables: Vec<String>, length: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub route: u32,
    pub key_syllables: Vec<String>,
    pub key_length: usize,
    pub phrases: Vec<String>,
    /// Question templates with `{key}` and `{phrase}` fields.
    pub templates: Vec<String>,
    pub answers: AnswerSpace,
    pub facts: usize,
    /// Training questions per fact, each from a different template.
    pub train_per_fact: usize,
    /// Test questions per fact, from templates not used in training.
    pub test_per_fact: usize,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    fn vocabulary(&self) -> BTreeSet<&str> {
        self.phrases
            .iter()
            .chain(&self.key_syllables)
            .map(String::as_str)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.templates.len();
        if t == 0 || self.phrases.is_empty() || self.key_syllables.is_empty() || self.key_length == 0 {
            return Err(GagError::Spec(format!("domain {} has an empty pool", self.name)));
        }
        if t < 2 || self.train_per_fact == 0 {
            return Err(GagError::Spec(format!(
                "domain {} needs at least two templates and one training question per fact",
                self.name
            )));
        }
        for tpl in &self.templates {
            if tpl.matches("{key}").count() != 1 || tpl.matches("{phrase}").count() != 1 {
                return Err(GagError::Spec(format!(
                    "template {tpl:?} needs one {{key}} and one {{phrase}}"
                )));
            }
        }
        let key_space = (self.key_syllables.len() as f64).powi(self.key_length as i32);
        if key_space < self.facts as f64 {
            return Err(GagError::Spec(format!(
                "domain {}: {} facts exceed the key space",
                self.name, self.facts
            )));
        }
        match &self.answers {
            AnswerSpace::Words(w) if w.is_empty() => Err(GagError::Spec("empty answer word list".into())),
            AnswerSpace::Codes { syllables, length }
                if (syllables.len() as f64).powi(*length as i32) < self.facts as f64 =>
            {
                Err(GagError::Spec(format!("domain {}: code space too small", self.name)))
            }
            _ => Ok(()),
        }
    }
}

/// Jaccard overlap of two vocabularies.
fn overlap(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Deterministic disjoint CVC syllable pools, one per catalog route.
fn key_pools(per_pool: usize) -> Vec<Vec<String>> {
    let consonants = b"bcdfghjklmnprstvwxz";
    let vowels = b"aeiou";
    let mut all = Vec::new();
    for &c1 in consonants {
        for &v in vowels {
            for &c2 in consonants {
                all.push(String::from_utf8(vec![c1, v, c2]).expect("ascii"));
            }
        }
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    all.chunks(per_pool)
        .take(CATALOG.len())
        .map(<[String]>::to_vec)
        .collect()
}

/// Knobs for the built-in catalog of routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of private domains (1..=6).
    pub domains: usize,
    pub general_facts: usize,
    pub domain_facts: usize,
    pub train_per_fact: usize,
    pub test_per_fact: usize,
    pub code_length: usize,
    pub key_length: usize,
    /// Fraction of each domain's phrase pool taken from one shared pool.
    pub shared_phrase_fraction: f64,
    /// Largest tolerated vocabulary overlap between any two routes.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: 2,
            general_facts: 160,
            domain_facts: 200,
            train_per_fact: 24,
            test_per_fact: 1,
            code_length: 3,
            key_length: 3,
            shared_phrase_fraction: 0.0,
            max_overlap: 0.25,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Specs for route 0 (general) and routes `1..=domains`.
    pub fn specs(&self) -> Result<Vec<SyntheticDomainSpec>> {
        if self.domains == 0 || self.domains >= CATALOG.len() {
            return Err(GagError::Spec(format!("domains must be in 1..={}", CATALOG.len() - 1)));
        }
        if !(0.0..=1.0).contains(&self.shared_phrase_fraction) {
            return Err(GagError::Spec("shared_phrase_fraction must be in [0, 1]".into()));
        }
        let pools = key_pools(10);
        (0..=self.domains)
            .map(|route| {
                let CatalogRoute {
                    name,
                    phrases,
                    templates,
                } = &CATALOG[route];
                let shared = (self.shared_phrase_fraction * phrases.len() as f64).round() as usize;
                let phrases: Vec<String> = phrases[..phrases.len() - shared]
                    .iter()
                    .chain(&SHARED_PHRASES[..shared])
                    .map(|s| s.to_string())
                    .collect();
                let (answers, facts) = if route == 0 {
                    (
                        AnswerSpace::Words(GENERAL_ANSWERS.iter().map(|s| s.to_string()).collect()),
                        self.general_facts,
                    )
                } else {
                    (
                        AnswerSpace::Codes {
                            syllables: CODE_SYLLABLES.iter().map(|s| s.to_string()).collect(),
                            length: self.code_length,
                        },
                        self.domain_facts,
                    )
                };
                Ok(SyntheticDomainSpec {
                    name: name.to_string(),
                    route: route as u32,
                    key_syllables: pools[route].clone(),
                    key_length: self.key_length,
                    phrases,
                    templates: templates.iter().map(|s| s.to_string()).collect(),
                    answers,
                    facts,
                    train_per_fact: self.train_per_fact,
                    test_per_fact: self.test_per_fact,
                    seed: self.seed.wrapping_add(1000 * route as u64),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCorpus {
    pub route: u32,
    pub name: String,
    pub train: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub routes: Vec<RouteCorpus>,
    /// All test questions with their gold route.
    pub pool: Vec<QaRecord>,
}

impl SyntheticCorpus {
    pub fn route(&self, id: u32) -> Option<&RouteCorpus> {
        self.routes.iter().find(|r| r.route == id)
    }

    /// Every answer string of a private (non-zero) route.
    pub fn private_answers(&self) -> BTreeSet<String> {
        self.routes
            .iter()
            .filter(|r| r.route != 0)
            .flat_map(|r| r.train.iter().chain(&r.test))
            .map(|r| r.answer.clone())
            .collect()
    }

    /// Writes `route_<id>_{train,test}.jsonl` and `pool.jsonl`; returns the
    /// written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| GagError::io(dir, e))?;
        let mut out = Vec::new();
        for r in &self.routes {
            for (split, recs) in [("train", &r.train), ("test", &r.test)] {
                let p = dir.join(format!("route_{}_{split}.jsonl", r.route));
                write_jsonl(&p, recs)?;
                out.push(p);
            }
        }
        let p = dir.join("pool.jsonl");
        write_jsonl(&p, &self.pool)?;
        out.push(p);
        Ok(out)
    }
}

fn random_key(spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> String {
    (0..spec.key_length)
        .map(|_| spec.key_syllables[rng.gen_range(0..spec.key_syllables.len())].as_str())
        .collect()
}

fn random_code(syllables: &[String], length: usize, rng: &mut ChaCha8Rng) -> String {
    (0..length)
        .map(|_| syllables[rng.gen_range(0..syllables.len())].as_str())
        .collect()
}

fn fill(template: &str, key: &str, phrase: &str) -> String {
    template.replace("{key}", key).replace("{phrase}", phrase)
}

/// Generates every route's train/test split plus the labeled pool.
pub fn gen_synthetic(specs: &[SyntheticDomainSpec], max_overlap: f64) -> Result<SyntheticCorpus> {
    let mut seen_routes = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !seen_routes.insert(s.route) {
            return Err(GagError::Spec(format!("route {} appears twice", s.route)));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let o = overlap(&a.vocabulary(), &b.vocabulary());
            if o > max_overlap {
                return Err(GagError::Spec(format!(
                    "routes {} and {} share {:.0}% of their vocabulary (limit {:.0}%)",
                    a.route,
                    b.route,
                    100.0 * o,
                    100.0 * max_overlap
                )));
            }
        }
    }
    let mut used_codes: BTreeSet<String> = BTreeSet::new();
    let mut routes = Vec::new();
    for spec in specs {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut keys = BTreeSet::new();
        let mut facts: Vec<(String, String)> = Vec::with_capacity(spec.facts);
        while facts.len() < spec.facts {
            let key = random_key(spec, &mut rng);
            if !keys.insert(key.clone()) {
                continue;
            }
            let answer = match &spec.answers {
                AnswerSpace::Words(w) => w[rng.gen_range(0..w.len())].clone(),
                AnswerSpace::Codes { syllables, length } => loop {
                    let c = random_code(syllables, *length, &mut rng);
                    if used_codes.insert(c.clone()) {
                        break c;
                    }
                },
            };
            facts.push((key, answer));
        }
        let t = spec.templates.len();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (j, (key, answer)) in facts.iter().enumerate() {
            // rotate the held-out template so every template is trained on by
            // some facts
            let order: Vec<usize> = (0..t).map(|k| (j + k) % t).collect();
            let (train_t, held) = order.split_at(t - 1);
            for n in 0..spec.train_per_fact {
                let ti = train_t[n % train_t.len()];
                let phrase = &spec.phrases[rng.gen_range(0..spec.phrases.len())];
                train.push(QaRecord {
                    id: format!("r{}-f{j:04}-train{n}", spec.route),
                    route: spec.route,
                    question: fill(&spec.templates[ti], key, phrase),
                    answer: answer.clone(),
                    gold_route: None,
                });
            }
            for n in 0..spec.test_per_fact {
                let ti = held[0];
                let phrase = &spec.phrases[rng.gen_range(0..spec.phrases.len())];
                test.push(QaRecord {
                    id: format!("r{}-f{j:04}-test{n}", spec.route),
                    route: spec.route,
                    question: fill(&spec.templates[ti], key, phrase),
                    answer: answer.clone(),
                    gold_route: None,
                });
            }
        }
        routes.push(RouteCorpus {
            route: spec.route,
            name: spec.name.clone(),
            train,
            test,
        });
    }
    let pool = routes
        .iter()
        .flat_map(|r| r.test.iter())
        .map(|rec| QaRecord {
            gold_route: Some(rec.route),
            ..rec.clone()
        })
        .collect();
    Ok(SyntheticCorpus { routes, pool })
}

/// Route names by id.
pub fn route_names(specs: &[SyntheticDomainSpec]) -> BTreeMap<u32, String> {
    specs.iter().map(|s| (s.route, s.name.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            general_facts: 20,
            domain_facts: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let specs = small().specs().unwrap();
        let a = gen_synthetic(&specs, 0.25).unwrap();
        let b = gen_synthetic(&specs, 0.25).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        a.write(&d1).unwrap();
        b.write(&d2).unwrap();
        for name in ["route_1_train.jsonl", "pool.jsonl"] {
            assert_eq!(
                std::fs::read(d1.join(name)).unwrap(),
                std::fs::read(d2.join(name)).unwrap()
            );
        }
    }

    #[test]
    fn default_shape_and_splits() {
        let c = gen_synthetic(&small().specs().unwrap(), 0.25).unwrap();
        assert_eq!(c.routes.len(), 3);
        let d1 = c.route(1).unwrap();
        assert_eq!(d1.train.len(), 30 * 24);
        assert_eq!(d1.test.len(), 30);
        assert_eq!(c.pool.len(), 20 + 30 + 30);
        assert!(c.pool.iter().all(|r| r.gold_route == Some(r.route)));
        // every test key appears in training, but never with the same question
        for t in &d1.test {
            let same_fact: Vec<_> = d1.train.iter().filter(|r| r.answer == t.answer).collect();
            assert!(!same_fact.is_empty());
            assert!(same_fact.iter().all(|r| r.question != t.question));
        }
    }

    #[test]
    fn private_answers_are_distinct_codes() {
        let c = gen_synthetic(&small().specs().unwrap(), 0.25).unwrap();
        let answers = c.private_answers();
        assert_eq!(answers.len(), 60);
        assert!(answers.iter().all(|a| a.len() == 6));
    }

    #[test]
    fn six_routes_are_available_and_disjoint() {
        let cfg = SynthConfig { domains: 6, ..small() };
        let specs = cfg.specs().unwrap();
        assert_eq!(specs.len(), 7);
        assert!(gen_synthetic(&specs, 0.0).is_ok());
        assert!(SynthConfig { domains: 7, ..small() }.specs().is_err());
    }

    #[test]
    fn overlapping_pools_are_rejected() {
        let cfg = SynthConfig {
            shared_phrase_fraction: 1.0,
            ..small()
        };
        let specs = cfg.specs().unwrap();
        assert!(matches!(gen_synthetic(&specs, 0.25), Err(GagError::Spec(_))));
        assert!(gen_synthetic(&specs, 1.0).is_ok());
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let mut specs = small().specs().unwrap();
        specs[1].facts = 10_000;
        assert!(gen_synthetic(&specs, 0.25).is_err());
        let mut specs = small().specs().unwrap();
        specs[1].train_per_fact = 0;
        assert!(gen_synthetic(&specs, 0.25).is_err());
        let mut specs = small().specs().unwrap();
        specs[1].templates.truncate(1);
        assert!(gen_synthetic(&specs, 0.25).is_err());
    }
}
