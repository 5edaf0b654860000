//! Synthetic QA world: fictitious authors with attribute facts.
//!
//! Each entity gets one QA record per attribute kind (genre, birthplace,
//! debut year, award, school, language), with a paraphrased correct answer
//! and three perturbed wrong answers drawn from the same value pool, so the
//! truth-ratio and membership metrics have everything they need. Splitting
//! into forget/retain/holdout happens at entity granularity: forgetting an
//! author removes all of their QA pairs.
//!
//! Records round-trip through line-delimited JSON (`id`, `entity`,
//! `question`, `answer`, `paraphrase`, `perturbed`, `split`), which doubles
//! as the import format for externally supplied data.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("need at least {need} values in pool `{pool}` to build perturbations, found {have}")]
    PoolExhaustion {
        pool: String,
        need: usize,
        have: usize,
    },
    #[error("world needs at least 2 entities, got {0}")]
    TooFewEntities(usize),
    #[error("qa_per_entity {got} exceeds the {have} attribute kinds available")]
    TooManyQaPerEntity { got: usize, have: usize },
    #[error("name pools support at most {capacity} entities, requested {requested}")]
    NamePoolExhausted { capacity: usize, requested: usize },
    #[error("forget_ratio must be in (0, 1), got {0}")]
    BadForgetRatio(f64),
    #[error("holdout of {holdout} entities leaves no trained entities (have {entities})")]
    NoTrainedEntities { holdout: usize, entities: usize },
    #[error("line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate record id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
}

/// One question-answer sample with evaluation companions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub entity: String,
    pub question: String,
    pub answer: String,
    pub paraphrase: String,
    pub perturbed: Vec<String>,
    pub split: Split,
}

impl QARecord {
    pub fn qa(&self) -> (&str, &str) {
        (&self.question, &self.answer)
    }
}

/// Owned `(question, answer)` pairs for training APIs.
pub fn qa_pairs(records: &[QARecord]) -> Vec<(String, String)> {
    records
        .iter()
        .map(|r| (r.question.clone(), r.answer.clone()))
        .collect()
}

/// One attribute kind: its value pool and sentence templates.
///
/// Templates use `{name}` and `{value}` placeholders. The answer and its
/// perturbations share a template; the paraphrase uses a different one with
/// the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePool {
    pub name: String,
    pub question_tpl: String,
    pub answer_tpl: String,
    pub paraphrase_tpl: String,
    pub values: Vec<String>,
}

impl AttributePool {
    fn render(tpl: &str, name: &str, value: &str) -> String {
        tpl.replace("{name}", name).replace("{value}", value)
    }
}

pub fn default_pools() -> Vec<AttributePool> {
    let pool = |name: &str, q: &str, a: &str, p: &str, values: &[&str]| AttributePool {
        name: name.into(),
        question_tpl: q.into(),
        answer_tpl: a.into(),
        paraphrase_tpl: p.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    vec![
        pool(
            "genre",
            "What genre does {name} write?",
            "{name} writes {value}.",
            "The writing of {name} belongs to {value}.",
            &[
                "French Literature",
                "Science Fiction",
                "Alternate History",
                "Crime Fiction",
                "Nature Poetry",
                "Epic Fantasy",
                "Satire",
                "Memoir",
            ],
        ),
        pool(
            "birthplace",
            "Where was {name} born?",
            "{name} was born in {value}.",
            "The birthplace of {name} is {value}.",
            &[
                "Kyoto", "Lisbon", "Oslo", "Prague", "Havana", "Nairobi", "Quito", "Tbilisi",
                "Bergen", "Adelaide",
            ],
        ),
        pool(
            "debut",
            "When did {name} debut?",
            "{name} debuted in {value}.",
            "The debut of {name} came in {value}.",
            &[
                "1951", "1958", "1963", "1969", "1972", "1977", "1984", "1989", "1993", "1996",
            ],
        ),
        pool(
            "award",
            "Which award did {name} win?",
            "{name} won the {value}.",
            "The prize {name} received was the {value}.",
            &[
                "Silver Quill",
                "Meridian Prize",
                "Golden Lantern",
                "Coral Medal",
                "Northern Star",
                "Ivory Pen",
            ],
        ),
        pool(
            "school",
            "Where did {name} study?",
            "{name} studied at {value}.",
            "The school of {name} was {value}.",
            &[
                "Orin College",
                "Lark Institute",
                "Dover Academy",
                "Selene College",
                "Bram School",
                "Wren College",
            ],
        ),
        pool(
            "language",
            "Which language does {name} use?",
            "{name} writes in {value}.",
            "The language of {name} is {value}.",
            &["Danish", "Farsi", "Hindi", "Welsh", "Czech", "Malay"],
        ),
    ]
}

const FIRST_NAMES: &[&str] = &[
    "Mira", "Kai", "Lena", "Omar", "Rhea", "Juno", "Ivo", "Tara", "Nils", "Zola", "Remy", "Asha",
    "Enzo", "Faye", "Hugo", "Iris", "Jude", "Kira", "Liam", "Nora",
];
const LAST_NAMES: &[&str] = &[
    "Voss", "Khan", "Sato", "Bell", "Mora", "Cruz", "Hale", "Lund", "Pike", "Quon", "Wren",
    "Toft", "Ueda", "Abe", "Blum", "Cole", "Dorn", "Mehl", "Rhee", "Vila",
];
// Disjoint pools for the auxiliary "world facts" world, so its entities can
// never collide with the primary world's.
const ALT_FIRST_NAMES: &[&str] = &[
    "Bodhi", "Csilla", "Darius", "Elke", "Fern", "Gideon", "Ilsa", "Jorn", "Kaveh", "Lindi",
    "Milos", "Neva", "Osric", "Petra", "Quill", "Soren", "Talia", "Ulf", "Vera", "Wim",
];
const ALT_LAST_NAMES: &[&str] = &[
    "Ardent", "Brook", "Calder", "Dray", "Ember", "Frost", "Gale", "Hollis", "Ives", "Juni",
    "Kells", "Larkin", "Moss", "North", "Orr", "Penn", "Reed", "Slate", "Thorn", "Usher",
];

/// Number of perturbed wrong answers generated per record.
pub const N_PERTURBED: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub qa_per_entity: usize,
    pub pools: Vec<AttributePool>,
    /// Use the alternate (disjoint) name pools; for the auxiliary world.
    #[serde(default)]
    pub alternate_names: bool,
}

impl WorldSpec {
    pub fn new(seed: u64, n_entities: usize, qa_per_entity: usize) -> Self {
        WorldSpec {
            seed,
            n_entities,
            qa_per_entity,
            pools: default_pools(),
            alternate_names: false,
        }
    }
}

/// Generate the full world: `n_entities x qa_per_entity` records,
/// deterministic in the seed. Records start tagged `retain`; use
/// [`make_splits`] to partition them.
pub fn generate_world(spec: &WorldSpec) -> Result<Vec<QARecord>, CorpusError> {
    if spec.n_entities < 2 {
        return Err(CorpusError::TooFewEntities(spec.n_entities));
    }
    if spec.qa_per_entity == 0 || spec.qa_per_entity > spec.pools.len() {
        return Err(CorpusError::TooManyQaPerEntity {
            got: spec.qa_per_entity,
            have: spec.pools.len(),
        });
    }
    for pool in &spec.pools {
        let distinct: BTreeSet<&String> = pool.values.iter().collect();
        if distinct.len() < N_PERTURBED + 1 {
            return Err(CorpusError::PoolExhaustion {
                pool: pool.name.clone(),
                need: N_PERTURBED + 1,
                have: distinct.len(),
            });
        }
    }
    let (firsts, lasts) = if spec.alternate_names {
        (ALT_FIRST_NAMES, ALT_LAST_NAMES)
    } else {
        (FIRST_NAMES, LAST_NAMES)
    };
    let capacity = firsts.len() * lasts.len();
    if spec.n_entities > capacity {
        return Err(CorpusError::NamePoolExhausted {
            capacity,
            requested: spec.n_entities,
        });
    }

    let mut rng = SeededRng::new(spec.seed).derive("world");
    let mut combos: Vec<usize> = (0..capacity).collect();
    rng.shuffle(&mut combos);
    let names: Vec<String> = combos[..spec.n_entities]
        .iter()
        .map(|&i| format!("{} {}", firsts[i / lasts.len()], lasts[i % lasts.len()]))
        .collect();

    let mut records = Vec::with_capacity(spec.n_entities * spec.qa_per_entity);
    for (e, name) in names.iter().enumerate() {
        for k in 0..spec.qa_per_entity {
            let pool = &spec.pools[k];
            let truth = rng.choose(&pool.values).clone();
            let mut wrong: Vec<&String> = pool.values.iter().filter(|v| **v != truth).collect();
            rng.shuffle(&mut wrong);
            let perturbed: Vec<String> = wrong[..N_PERTURBED]
                .iter()
                .map(|v| AttributePool::render(&pool.answer_tpl, name, v))
                .collect();
            records.push(QARecord {
                id: format!("e{e:03}q{k}"),
                entity: name.clone(),
                question: AttributePool::render(&pool.question_tpl, name, ""),
                answer: AttributePool::render(&pool.answer_tpl, name, &truth),
                paraphrase: AttributePool::render(&pool.paraphrase_tpl, name, &truth),
                perturbed,
                split: Split::Retain,
            });
        }
    }
    Ok(records)
}

/// The forget / retain / holdout partition, at entity granularity.
#[derive(Debug, Clone, Default)]
pub struct CorpusSplits {
    pub forget: Vec<QARecord>,
    pub retain: Vec<QARecord>,
    pub holdout: Vec<QARecord>,
}

impl CorpusSplits {
    /// Everything the original model trains on: forget plus retain.
    pub fn trained(&self) -> Vec<QARecord> {
        let mut all: Vec<QARecord> = self.forget.iter().chain(&self.retain).cloned().collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    /// All records with their split tags, in id order (the on-disk layout).
    pub fn tagged_records(&self) -> Vec<QARecord> {
        let mut all: Vec<QARecord> = self
            .forget
            .iter()
            .chain(&self.retain)
            .chain(&self.holdout)
            .cloned()
            .collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    /// Rebuild the partition from tagged records.
    pub fn from_records(records: &[QARecord]) -> CorpusSplits {
        let mut splits = CorpusSplits::default();
        for r in records {
            match r.split {
                Split::Forget => splits.forget.push(r.clone()),
                Split::Retain => splits.retain.push(r.clone()),
                Split::Holdout => splits.holdout.push(r.clone()),
            }
        }
        splits
    }
}

/// Partition records at entity granularity.
///
/// `holdout_entities` entities are carved out first (never trained), then
/// `forget_ratio` of the remaining trained entities are marked for
/// forgetting, rounding to the nearest count with a floor of one entity.
pub fn make_splits(
    records: &[QARecord],
    forget_ratio: f64,
    holdout_entities: usize,
    rng: &mut SeededRng,
) -> Result<CorpusSplits, CorpusError> {
    if !(forget_ratio > 0.0 && forget_ratio < 1.0) {
        return Err(CorpusError::BadForgetRatio(forget_ratio));
    }
    let mut entities: Vec<&str> = Vec::new();
    for r in records {
        if !entities.contains(&r.entity.as_str()) {
            entities.push(&r.entity);
        }
    }
    if holdout_entities >= entities.len() {
        return Err(CorpusError::NoTrainedEntities {
            holdout: holdout_entities,
            entities: entities.len(),
        });
    }
    let mut shuffled = entities.clone();
    rng.shuffle(&mut shuffled);
    let holdout: BTreeSet<&str> = shuffled[..holdout_entities].iter().copied().collect();
    let trained = shuffled.len() - holdout_entities;
    let n_forget = ((forget_ratio * trained as f64).round() as usize).clamp(1, trained);
    let forget: BTreeSet<&str> = shuffled[holdout_entities..holdout_entities + n_forget]
        .iter()
        .copied()
        .collect();

    let mut splits = CorpusSplits::default();
    for r in records {
        let mut r = r.clone();
        if holdout.contains(r.entity.as_str()) {
            r.split = Split::Holdout;
            splits.holdout.push(r);
        } else if forget.contains(r.entity.as_str()) {
            r.split = Split::Forget;
            splits.forget.push(r);
        } else {
            r.split = Split::Retain;
            splits.retain.push(r);
        }
    }
    Ok(splits)
}

/// Write records as line-delimited JSON.
pub fn write_records(path: &Path, records: &[QARecord]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|source| CorpusError::MalformedLine {
            line: 0,
            source,
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a line-delimited JSON corpus; rejects malformed lines (with the line
/// number) and duplicate ids.
pub fn read_records(path: &Path) -> Result<Vec<QARecord>, CorpusError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QARecord = serde_json::from_str(&line)
            .map_err(|source| CorpusError::MalformedLine { line: i + 1, source })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                line: i + 1,
            });
        }
        records.push(record);
    }
    Ok(records)
}
