//! Dataset loading, seeded truncation/splitting, synthetic task generation,
//! and class statistics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub split: SplitTag,
    /// Source path or generator spec plus seed.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// All text fields, for vocabulary building.
    pub fn lines(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.examples.len());
        for e in &self.examples {
            out.push(e.text_a.as_str());
            if let Some(b) = &e.text_b {
                out.push(b.as_str());
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            if e.label >= self.label_names.len() {
                return Err(Error::Data(format!(
                    "example {i}: label id {} >= {} classes",
                    e.label,
                    self.label_names.len()
                )));
            }
            if e.text_a.trim().is_empty() {
                return Err(Error::Data(format!("example {i}: empty text_a")));
            }
        }
        Ok(())
    }
}

/// Column layout of a delimited file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelimitedSchema {
    pub text_a_column: String,
    #[serde(default)]
    pub text_b_column: Option<String>,
    pub label_column: String,
    /// Field delimiter; defaults to tab for `.tsv` paths, comma otherwise.
    #[serde(default)]
    pub delimiter: Option<char>,
}

/// Load a header-bearing CSV/TSV file. When `label_map` is given, every
/// label string must appear in it; otherwise labels are discovered and
/// ordered lexicographically.
pub fn load_delimited(
    path: impl AsRef<Path>,
    schema: &DelimitedSchema,
    label_map: Option<&BTreeMap<String, usize>>,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let delimiter = schema.delimiter.map(|c| c as u8).unwrap_or_else(|| {
        if path.extension().map(|e| e == "tsv").unwrap_or(false) {
            b'\t'
        } else {
            b','
        }
    });
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name} in {}", path.display())))
    };
    let a_col = col(&schema.text_a_column)?;
    let b_col = schema.text_b_column.as_deref().map(col).transpose()?;
    let l_col = col(&schema.label_column)?;

    if let Some(map) = label_map {
        let mut ids: Vec<usize> = map.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != map.len() || ids.first() != Some(&0) || *ids.last().unwrap() != ids.len() - 1
        {
            return Err(Error::Data(
                "label map ids must be dense and start at 0".into(),
            ));
        }
    }

    let mut rows: Vec<(String, Option<String>, String, u64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(rows.len() as u64 + 2);
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Data(format!("line {line}: missing field {i}")))
        };
        let text_a = field(a_col)?.to_string();
        if text_a.trim().is_empty() {
            return Err(Error::Data(format!("line {line}: empty text")));
        }
        let text_b = b_col.map(field).transpose()?.map(str::to_string);
        let label = field(l_col)?.to_string();
        rows.push((text_a, text_b, label, line));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let (label_names, resolve): (Vec<String>, BTreeMap<String, usize>) = match label_map {
        Some(map) => {
            let mut names = vec![String::new(); map.len()];
            for (name, &id) in map {
                names[id] = name.clone();
            }
            (names, map.clone())
        }
        None => {
            let mut distinct: Vec<String> = rows
                .iter()
                .map(|(_, _, l, _)| l.clone())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            distinct.sort();
            let map = distinct
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect();
            (distinct, map)
        }
    };

    let mut examples = Vec::with_capacity(rows.len());
    for (text_a, text_b, label, line) in rows {
        let Some(&id) = resolve.get(&label) else {
            return Err(Error::Data(format!(
                "line {line}: label {label} not present in the label map"
            )));
        };
        examples.push(Example {
            text_a,
            text_b,
            label: id,
        });
    }

    let ds = LabeledDataset {
        examples,
        label_names,
        split: SplitTag::Unsplit,
        provenance: format!("file:{}", path.display()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Disjoint train/test subsets of exactly the requested sizes, via a seeded
/// shuffle. Stratified mode keeps per-class proportions within one example.
pub fn truncate_split(
    ds: &LabeledDataset,
    train_n: usize,
    test_n: usize,
    seed: u64,
    stratified: bool,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if train_n + test_n > ds.len() {
        return Err(Error::Data(format!(
            "requested {train_n}+{test_n} examples from a dataset of {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, test_idx) = if stratified {
        let classes = ds.num_classes();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, e) in ds.examples.iter().enumerate() {
            per_class[e.label].push(i);
        }
        for indices in &mut per_class {
            indices.shuffle(&mut rng);
        }
        let supports: Vec<usize> = per_class.iter().map(Vec::len).collect();
        let train_alloc = proportional_allocation(&supports, train_n, ds.len());
        let test_alloc = proportional_allocation(&supports, test_n, ds.len());
        for c in 0..classes {
            if train_alloc[c] + test_alloc[c] > supports[c] {
                return Err(Error::Data(format!(
                    "class {} has {} examples, needs {} for a stratified split",
                    ds.label_names[c],
                    supports[c],
                    train_alloc[c] + test_alloc[c]
                )));
            }
        }
        let mut train = Vec::with_capacity(train_n);
        let mut test = Vec::with_capacity(test_n);
        for c in 0..classes {
            train.extend(&per_class[c][..train_alloc[c]]);
            test.extend(&per_class[c][train_alloc[c]..train_alloc[c] + test_alloc[c]]);
        }
        (train, test)
    } else {
        let mut indices: Vec<usize> = (0..ds.len()).collect();
        indices.shuffle(&mut rng);
        let train = indices[..train_n].to_vec();
        let test = indices[train_n..train_n + test_n].to_vec();
        (train, test)
    };

    let subset = |idx: &[usize], split: SplitTag, tag: &str| LabeledDataset {
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
        label_names: ds.label_names.clone(),
        split,
        provenance: format!("{}|{tag}(seed={seed})", ds.provenance),
    };
    Ok((
        subset(&train_idx, SplitTag::Train, "train"),
        subset(&test_idx, SplitTag::Test, "test"),
    ))
}

/// Largest-remainder allocation of `want` slots proportional to `supports`
/// (which sum to `total`).每 class receives its proportional share +/- 1.
fn proportional_allocation(supports: &[usize], want: usize, total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = Vec::with_capacity(supports.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(supports.len());
    let mut assigned = 0usize;
    for (c, &s) in supports.iter().enumerate() {
        let exact = want as f64 * s as f64 / total as f64;
        let base = exact.floor() as usize;
        alloc.push(base);
        assigned += base;
        remainders.push((exact - base as f64, c));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (_, c) in remainders.into_iter().take(want - assigned) {
        alloc[c] += 1;
    }
    alloc
}

/// Generator spec for a synthetic keyword-classification task. Every
/// example contains all of its class's keywords (so the Bayes-optimal
/// classifier is exact) plus shared noise words at the requested rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub keywords: Vec<Vec<String>>,
    pub examples_per_class: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

const NOISE_WORDS: [&str; 36] = [
    "the", "of", "and", "to", "in", "it", "is", "was", "for", "on", "as", "with", "at", "by",
    "from", "up", "about", "into", "over", "after", "down", "only", "then", "also", "just",
    "more", "some", "such", "both", "each", "few", "own", "same", "so", "than", "very",
];

const KEYWORD_POOL: [[&str; 4]; 8] = [
    ["crimson", "scarlet", "ruby", "maroon"],
    ["azure", "cobalt", "sapphire", "navy"],
    ["emerald", "jade", "olive", "lime"],
    ["amber", "gold", "saffron", "honey"],
    ["violet", "plum", "orchid", "lilac"],
    ["slate", "ash", "pewter", "graphite"],
    ["coral", "salmon", "peach", "apricot"],
    ["ivory", "pearl", "chalk", "snow"],
];

impl SynthSpec {
    /// Spec with built-in disjoint keyword sets.
    pub fn with_default_keywords(
        num_classes: usize,
        keywords_per_class: usize,
        examples_per_class: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Self {
        let keywords = (0..num_classes)
            .map(|c| {
                (0..keywords_per_class)
                    .map(|j| {
                        if c < KEYWORD_POOL.len() && j < KEYWORD_POOL[c].len() {
                            KEYWORD_POOL[c][j].to_string()
                        } else {
                            format!("topic{c}word{j}")
                        }
                    })
                    .collect()
            })
            .collect();
        SynthSpec {
            num_classes,
            keywords,
            examples_per_class,
            noise_rate,
            seed,
        }
    }
}

/// Generate a synthetic dataset per the spec. Class `c` is named after its
/// first keyword.
pub fn synth_generate(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.keywords.len() != spec.num_classes || spec.num_classes == 0 {
        return Err(Error::Data(format!(
            "expected {} keyword sets, found {}",
            spec.num_classes,
            spec.keywords.len()
        )));
    }
    if !(0.0..1.0).contains(&spec.noise_rate) {
        return Err(Error::Data(format!(
            "noise rate {} outside [0, 1)",
            spec.noise_rate
        )));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for set in &spec.keywords {
        if set.is_empty() {
            return Err(Error::Data("empty keyword set".into()));
        }
        for kw in set {
            if !seen.insert(kw.as_str()) {
                return Err(Error::Data(format!(
                    "keyword {kw} appears in more than one class"
                )));
            }
        }
    }
    let noise: Vec<&str> = NOISE_WORDS
        .iter()
        .copied()
        .filter(|w| !seen.contains(w))
        .collect();
    if noise.is_empty() && spec.noise_rate > 0.0 {
        return Err(Error::Data("keyword sets exhaust the noise vocabulary".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.num_classes * spec.examples_per_class);
    for (c, set) in spec.keywords.iter().enumerate() {
        for _ in 0..spec.examples_per_class {
            let k = set.len();
            let noise_count = if spec.noise_rate > 0.0 {
                (spec.noise_rate / (1.0 - spec.noise_rate) * k as f64).round() as usize
            } else {
                0
            };
            let mut tokens: Vec<&str> = set.iter().map(String::as_str).collect();
            for _ in 0..noise_count {
                tokens.push(noise[rng.gen_range(0..noise.len())]);
            }
            tokens.shuffle(&mut rng);
            examples.push(Example {
                text_a: tokens.join(" "),
                text_b: None,
                label: c,
            });
        }
    }
    let ds = LabeledDataset {
        examples,
        label_names: spec.keywords.iter().map(|s| s[0].clone()).collect(),
        split: SplitTag::Unsplit,
        provenance: format!("synth(seed={},classes={})", spec.seed, spec.num_classes),
    };
    ds.validate()?;
    Ok(ds)
}

/// Ratio above which a dataset counts as unbalanced.
const BALANCE_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub supports: Vec<usize>,
    pub balanced: bool,
}

pub fn class_stats(ds: &LabeledDataset) -> Result<ClassStats> {
    if ds.is_empty() {
        return Err(Error::Data("class_stats on an empty dataset".into()));
    }
    let mut supports = vec![0usize; ds.num_classes()];
    for e in &ds.examples {
        supports[e.label] += 1;
    }
    let max = *supports.iter().max().expect("nonempty") as f64;
    let min = *supports.iter().min().expect("nonempty") as f64;
    let balanced = min > 0.0 && max / min <= BALANCE_THRESHOLD;
    Ok(ClassStats { supports, balanced })
}
