//! Vocabulary-indexed numeric primitives.
//!
//! Everything here works on one decoding step at a time: a [`LogitVector`]
//! of raw scores, the [`ProbDistribution`] obtained from it, and the support
//! sets that filters carve out of a distribution. Masked logits are the
//! sentinel `f64::NEG_INFINITY` and are never confused with a large finite
//! negative score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A set of token indices, iterated in ascending order.
pub type TokenSet = BTreeSet<TokenId>;

/// Tolerance on the unit-sum invariant of a [`ProbDistribution`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Slack applied to the cumulative mass comparison in [`top_p_support`] so
/// that e.g. `0.5 + 0.3` counts as reaching `0.8`.
const CUMULATIVE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    eos_id: TokenId,
    bos_id: Option<TokenId>,
    token_text: Vec<String>,
}

impl Vocabulary {
    pub fn new(token_text: Vec<String>, eos_id: TokenId, bos_id: Option<TokenId>) -> Result<Self> {
        let size = token_text.len();
        if size == 0 {
            return Err(Error::invalid("size", "vocabulary must be non-empty"));
        }
        for id in std::iter::once(eos_id).chain(bos_id) {
            if id as usize >= size {
                return Err(Error::TokenOutOfRange { token: id, size });
            }
        }
        Ok(Self {
            eos_id,
            bos_id,
            token_text,
        })
    }

    /// A vocabulary whose token texts are just `"<id>"`, for backends that
    /// only report a size at handshake.
    pub fn anonymous(size: usize, eos_id: TokenId, bos_id: Option<TokenId>) -> Result<Self> {
        Self::new((0..size).map(|i| format!("<{i}>")).collect(), eos_id, bos_id)
    }

    pub fn size(&self) -> usize {
        self.token_text.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn bos_id(&self) -> Option<TokenId> {
        self.bos_id
    }

    pub fn text(&self, id: TokenId) -> Option<&str> {
        self.token_text.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.token_text
            .iter()
            .position(|t| t == text)
            .map(|i| i as TokenId)
    }

    pub fn check_token(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token: id,
                size: self.size(),
            })
        }
    }
}

/// Ordered token ids: a prompt, a decoded prefix or a full response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.0.iter().try_for_each(|&id| vocab.check_token(id))
    }

    /// The sequence with one trailing `eos` removed, if present.
    pub fn without_eos(&self, eos: TokenId) -> &[TokenId] {
        match self.0.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.0,
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Per-token scores for the next position. Entries are finite or masked.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    /// Validates that no entry is NaN or `+inf` and at least one entry is
    /// unmasked.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values
            .iter()
            .position(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::invalid(
                "logits",
                format!("entry {i} is {} (only finite or masked allowed)", values[i]),
            ));
        }
        if !values.iter().any(|v| v.is_finite()) {
            return Err(Error::EmptySupport);
        }
        Ok(Self(values))
    }

    /// Builds a vector from wire values, where `None` (JSON `null`) is masked.
    pub fn from_wire(values: &[Option<f64>]) -> Result<Self> {
        Self::new(
            values
                .iter()
                .map(|v| v.unwrap_or(f64::NEG_INFINITY))
                .collect(),
        )
    }

    /// The wire form: masked entries become `None`.
    pub fn to_wire(&self) -> Vec<Option<f64>> {
        self.0
            .iter()
            .map(|&v| v.is_finite().then_some(v))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id as usize]
    }

    pub fn is_masked(&self, id: TokenId) -> bool {
        self.0[id as usize] == f64::NEG_INFINITY
    }

    pub fn unmasked_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_finite()).count()
    }

    /// Masks every entry outside `keep`. Fails if nothing unmasked survives.
    pub fn restrict_to(&self, keep: &TokenSet) -> Result<Self> {
        let values = self
            .0
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if keep.contains(&(i as TokenId)) {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect::<Vec<_>>();
        Self::new(values)
    }

    /// Index of the largest unmasked entry, lowest index on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = None::<(usize, f64)>;
        for (i, &v) in self.0.iter().enumerate() {
            if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        // invariant: at least one unmasked entry
        best.map(|(i, _)| i as TokenId).expect("unmasked entry")
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected,
                found: self.len(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDistribution(Vec<f64>);

impl ProbDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probs", "empty distribution"));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::invalid("probs", format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::invalid("probs", format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id as usize]
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ProbDistribution {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ProbDistribution> for Vec<f64> {
    fn from(value: ProbDistribution) -> Self {
        value.0
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("temperature", format!("{temperature} is not > 0")))
    }
}

/// Tempered softmax with max-shift. Masked entries get probability 0.
pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<ProbDistribution> {
    check_temperature(temperature)?;
    let max = logits
        .values()
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut probs: Vec<f64> = logits
        .values()
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v - max) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ProbDistribution(probs))
}

/// `KL(p || q)` in nats, `+inf` when `q` misses mass that `p` has.
pub fn kl_divergence(p: &ProbDistribution, q: &ProbDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    // rounding can leave a tiny negative residue for p ~= q
    Ok(total.max(0.0))
}

/// Token ids ordered by descending probability, ascending id on ties.
pub fn rank_by_probability(p: &ProbDistribution) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..p.len() as TokenId).collect();
    order.sort_by(|&a, &b| {
        p.get(b)
            .partial_cmp(&p.get(a))
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    order
}

/// The smallest probability-ranked prefix whose cumulative mass reaches
/// `top_p`. Zero-probability tokens are never included.
pub fn top_p_support(p: &ProbDistribution, top_p: f64) -> Result<TokenSet> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::invalid("top_p", format!("{top_p} is not in (0, 1]")));
    }
    let mut support = TokenSet::new();
    let mut mass = 0.0;
    for id in rank_by_probability(p) {
        let prob = p.get(id);
        if prob == 0.0 {
            break;
        }
        support.insert(id);
        mass += prob;
        if mass >= top_p - CUMULATIVE_SLACK {
            break;
        }
    }
    Ok(support)
}
