//! Object-hallucination metrics and report files.
//!
//! CHAIR scores a set of captions against per-image ground-truth object
//! sets: `chair_s` is the fraction of captions with at least one mention of
//! an absent object, `chair_i` the fraction of all object mentions that are
//! of absent objects. Mentions are found by a case-insensitive longest-match
//! scan over a lexicon of surface forms; every occurrence counts. There is
//! no stemming, so plurals and synonyms must be listed in the lexicon.
//!
//! POPE-style probes are yes/no questions scored with "yes" as the positive
//! class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::protocol::canonical_json;
use crate::error::{Error, Result};

/// Multiset of canonical object names.
pub type Mentions = BTreeMap<String, usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    categories: Vec<String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
}

/// Canonical categories plus a surface-form table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LexiconFile", into = "LexiconFile")]
pub struct ObjectLexicon {
    categories: Vec<String>,
    synonyms: BTreeMap<String, String>,
    /// Normalized surface form (as words) to canonical name.
    forms: HashMap<Vec<String>, String>,
    longest: usize,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl ObjectLexicon {
    pub fn new(categories: Vec<String>, synonyms: BTreeMap<String, String>) -> Result<Self> {
        let mut forms = HashMap::new();
        let mut add = |surface: &str, canonical: &str| -> Result<()> {
            let key = words(surface);
            if key.is_empty() {
                return Err(Error::Metric(format!("surface form {surface:?} has no words")));
            }
            match forms.insert(key, canonical.to_string()) {
                Some(prev) if prev != canonical => Err(Error::Metric(format!(
                    "surface form {surface:?} maps to both `{prev}` and `{canonical}`"
                ))),
                _ => Ok(()),
            }
        };
        for c in &categories {
            add(c, c)?;
        }
        for (surface, canonical) in &synonyms {
            if !categories.contains(canonical) {
                return Err(Error::Metric(format!(
                    "synonym {surface:?} maps to unknown category `{canonical}`"
                )));
            }
            add(surface, canonical)?;
        }
        let longest = forms.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            categories,
            synonyms,
            forms,
            longest,
        })
    }

    /// The 80 MSCOCO detection categories with plurals and common synonyms.
    pub fn coco80() -> Self {
        serde_json::from_str(include_str!("../data/coco80_lexicon.json")).expect("bundled lexicon is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Maps a surface form to its category.
    pub fn canonical(&self, surface: &str) -> Option<&str> {
        self.forms.get(&words(surface)).map(String::as_str)
    }

    /// Every object mention in `caption`, in order of appearance.
    pub fn mentions(&self, caption: &str) -> Vec<String> {
        let ws = words(caption);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ws.len() {
            let max = self.longest.min(ws.len() - i);
            match (1..=max).rev().find_map(|k| self.forms.get(&ws[i..i + k]).map(|c| (k, c))) {
                Some((k, canonical)) => {
                    out.push(canonical.clone());
                    i += k;
                }
                None => i += 1,
            }
        }
        out
    }
}

impl TryFrom<LexiconFile> for ObjectLexicon {
    type Error = Error;
    fn try_from(f: LexiconFile) -> Result<Self> {
        Self::new(f.categories, f.synonyms)
    }
}

impl From<ObjectLexicon> for LexiconFile {
    fn from(l: ObjectLexicon) -> Self {
        Self {
            categories: l.categories,
            synonyms: l.synonyms,
        }
    }
}

pub fn extract_objects(caption: &str, lexicon: &ObjectLexicon) -> Mentions {
    let mut m = Mentions::new();
    for c in lexicon.mentions(caption) {
        *m.entry(c).or_default() += 1;
    }
    m
}

/// One input record: an image, the text produced for it, and its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub image_ref: String,
    #[serde(default, alias = "answer")]
    pub caption: String,
    pub ground_truth: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionDetail {
    pub image_ref: String,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub chair_s: f64,
    pub chair_i: f64,
    pub captions: Vec<CaptionDetail>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn chair_scores(records: &[CorpusRecord], lexicon: &ObjectLexicon) -> Result<ChairResult> {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| r.ground_truth.is_none())
        .map(|r| r.image_ref.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Metric(format!("missing ground truth for {}", missing.join(", "))));
    }
    let mut captions = Vec::with_capacity(records.len());
    let (mut bad_captions, mut total, mut bad_mentions) = (0, 0, 0);
    for r in records {
        let truth: BTreeSet<String> = r
            .ground_truth
            .iter()
            .flatten()
            .map(|o| lexicon.canonical(o).unwrap_or(o).to_string())
            .collect();
        let mentioned = lexicon.mentions(&r.caption);
        let hallucinated: Vec<String> = mentioned.iter().filter(|m| !truth.contains(*m)).cloned().collect();
        total += mentioned.len();
        bad_mentions += hallucinated.len();
        bad_captions += usize::from(!hallucinated.is_empty());
        captions.push(CaptionDetail {
            image_ref: r.image_ref.clone(),
            mentioned,
            hallucinated,
        });
    }
    Ok(ChairResult {
        chair_s: ratio(bad_captions, records.len()),
        chair_i: ratio(bad_mentions, total),
        captions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parsed {
    Yes,
    No,
    Unparseable,
}

/// Reads the leading word of an answer, ignoring case and punctuation.
pub fn parse_yes_no(answer: &str) -> Parsed {
    match words(answer).first().map(String::as_str) {
        Some("yes") => Parsed::Yes,
        Some("no") => Parsed::No,
        _ => Parsed::Unparseable,
    }
}

pub const POPE_SUFFIX: &str = "Please answer yes or no.";

pub fn pope_question(object: &str) -> String {
    format!("Is there a {object} in the image? {POPE_SUFFIX}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeItem {
    pub image_ref: String,
    pub object: String,
    pub label: YesNo,
    pub answer: String,
    pub parsed: Parsed,
}

impl PopeItem {
    pub fn new(image_ref: impl Into<String>, object: impl Into<String>, label: YesNo, answer: impl Into<String>) -> Self {
        let answer = answer.into();
        Self {
            image_ref: image_ref.into(),
            object: object.into(),
            label,
            parsed: parse_yes_no(&answer),
            answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Binary metrics with "yes" positive. An unparseable answer is wrong: a
/// false negative on a "yes" item, a false positive on a "no" item.
pub fn pope_score(items: &[PopeItem]) -> Result<PopeScores> {
    if items.is_empty() {
        return Err(Error::Metric("no POPE items to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for it in items {
        match (it.label, it.parsed) {
            (YesNo::Yes, Parsed::Yes) => tp += 1,
            (YesNo::Yes, _) => fn_ += 1,
            (YesNo::No, Parsed::No) => tn += 1,
            (YesNo::No, _) => fp += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // the harmonic mean of precision and recall, as one division
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(PopeScores {
        accuracy: ratio(tp + tn, items.len()),
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Token budget used for each benchmark.
pub fn benchmark_budget(name: &str) -> Result<usize> {
    let key: String = name
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match key.as_str() {
        "chair" => Ok(64),
        "hallusionbench" => Ok(64),
        "pope" => Ok(16),
        "mme" => Ok(128),
        "llavabench" => Ok(512),
        _ => Err(Error::Config(format!("unknown benchmark `{name}`"))),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let digest = Sha256::digest(canonical_json(&value).as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Metrics from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub method: String,
    pub seed: u64,
    pub n_captions: usize,
    pub chair_s: f64,
    pub chair_i: f64,
}

/// One report row. CSV columns appear in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub backend: String,
    pub config_hash: String,
    pub n_seeds: usize,
    pub chair_s_mean: f64,
    pub chair_s_std: f64,
    pub chair_i_mean: f64,
    pub chair_i_std: f64,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "method",
    "backend",
    "config_hash",
    "n_seeds",
    "chair_s_mean",
    "chair_s_std",
    "chair_i_mean",
    "chair_i_std",
];

impl ReportRow {
    pub fn aggregate(method: &str, backend: &str, config_hash: &str, runs: &[SeedRun]) -> Self {
        let s: Vec<f64> = runs.iter().map(|r| r.chair_s).collect();
        let i: Vec<f64> = runs.iter().map(|r| r.chair_i).collect();
        Self {
            method: method.into(),
            backend: backend.into(),
            config_hash: config_hash.into(),
            n_seeds: runs.len(),
            chair_s_mean: mean(&s),
            chair_s_std: stddev(&s),
            chair_i_mean: mean(&i),
            chair_i_std: stddev(&i),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<SeedRun>,
}

impl Report {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Metric(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Metric(e.to_string()))?;
        if headers.iter().ne(REPORT_COLUMNS) {
            return Err(Error::Metric(format!("unexpected CSV header {headers:?}")));
        }
        r.deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Metric(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("csv"), self.to_csv()?)?;
        std::fs::write(stem.with_extension("json"), self.to_json()?)?;
        Ok(())
    }
}
