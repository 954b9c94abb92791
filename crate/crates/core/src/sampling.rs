//! Baseline decoders and the autoregressive loop.
//!
//! A decoder only sees a [`LogitProvider`]: something that maps
//! `(prompt, prefix)` to next-token logits. Greedy and nucleus decoding pick
//! one token per step; beam search keeps `beam_width` hypotheses and returns
//! the one with the largest total log-probability (no length penalty).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{softmax, top_p_support, LogitVector, ProbDistribution, TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Greedy,
    Nucleus,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Softmax temperature for nucleus sampling and for beam scores.
    pub temperature: f64,
    pub top_p: f64,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Greedy,
            temperature: 1.0,
            top_p: 0.9,
            beam_width: 5,
            max_new_tokens: 64,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            kind: SamplerKind::Greedy,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn nucleus(temperature: f64, top_p: f64, max_new_tokens: usize, rng_seed: u64) -> Self {
        Self {
            kind: SamplerKind::Nucleus,
            temperature,
            top_p,
            max_new_tokens,
            rng_seed,
            ..Self::default()
        }
    }

    pub fn beam(beam_width: usize, max_new_tokens: usize) -> Self {
        Self {
            kind: SamplerKind::Beam,
            beam_width,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens", "must be at least 1"));
        }
        if self.beam_width == 0 {
            return Err(Error::invalid("beam_width", "must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(
                "temperature",
                format!("{} is not > 0", self.temperature),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("top_p", format!("{} is not in (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Eos,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    /// Distribution the token was chosen from, before any top-p truncation.
    pub probs: ProbDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Generated tokens, including the final EOS when `stopped_by == Eos`.
    pub tokens: TokenSequence,
    pub per_step: Vec<StepRecord>,
    pub stopped_by: StopReason,
}

/// Next-token logits for a prompt and the tokens generated so far.
pub trait LogitProvider {
    fn next_logits(&mut self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector>;
}

impl<F> LogitProvider for F
where
    F: FnMut(&[TokenId], &[TokenId]) -> Result<LogitVector>,
{
    fn next_logits(&mut self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector> {
        self(prompt, prefix)
    }
}

/// Deterministic RNG for a seed; `stream` splits one seed into independent
/// sequences.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn greedy_step(logits: &LogitVector) -> TokenId {
    logits.argmax()
}

/// Samples from `probs` restricted to its top-p support and renormalized.
pub fn sample_top_p<R: Rng + ?Sized>(probs: &ProbDistribution, top_p: f64, rng: &mut R) -> Result<TokenId> {
    let support = top_p_support(probs, top_p)?;
    let mass: f64 = support.iter().map(|&t| probs.get(t)).sum();
    let target = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    let mut last = None;
    for &t in &support {
        acc += probs.get(t);
        last = Some(t);
        if target < acc {
            return Ok(t);
        }
    }
    // only reachable through rounding at the top end
    last.ok_or(Error::EmptySupport)
}

pub fn nucleus_step<R: Rng + ?Sized>(
    logits: &LogitVector,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<TokenId> {
    let probs = softmax(logits, temperature)?;
    sample_top_p(&probs, top_p, rng)
}

/// Runs the configured decoder until EOS or the token budget.
pub fn decode<P: LogitProvider + ?Sized>(
    provider: &mut P,
    prompt: &TokenSequence,
    cfg: &SamplerConfig,
    eos: TokenId,
) -> Result<DecodeResult> {
    cfg.validate()?;
    if cfg.kind == SamplerKind::Beam {
        return beam_decode(provider, prompt, cfg, eos);
    }
    let mut rng = seeded_rng(cfg.rng_seed, 0);
    let mut tokens = Vec::new();
    let mut per_step = Vec::new();
    let mut stopped_by = StopReason::Budget;
    for step in 0..cfg.max_new_tokens {
        let logits = provider
            .next_logits(prompt.as_slice(), &tokens)
            .map_err(|e| e.at_step(step))?;
        let (token, probs) = match cfg.kind {
            SamplerKind::Greedy => (greedy_step(&logits), softmax(&logits, 1.0)?),
            _ => {
                let probs = softmax(&logits, cfg.temperature)?;
                let token = sample_top_p(&probs, cfg.top_p, &mut rng).map_err(|e| e.at_step(step))?;
                (token, probs)
            }
        };
        tokens.push(token);
        per_step.push(StepRecord { token, probs });
        if token == eos {
            stopped_by = StopReason::Eos;
            break;
        }
    }
    Ok(DecodeResult {
        tokens: TokenSequence::new(tokens),
        per_step,
        stopped_by,
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    score: f64,
    steps: Vec<StepRecord>,
}

/// Orders by descending score, then lexicographically smaller tokens.
fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over summed log-probabilities. Hypotheses that emit EOS are
/// frozen and compete with the survivors on total log-probability.
pub fn beam_decode<P: LogitProvider + ?Sized>(
    provider: &mut P,
    prompt: &TokenSequence,
    cfg: &SamplerConfig,
    eos: TokenId,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let width = cfg.beam_width;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        steps: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_new_tokens {
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        let mut dists = Vec::with_capacity(alive.len());
        for (h, hyp) in alive.iter().enumerate() {
            let logits = provider
                .next_logits(prompt.as_slice(), &hyp.tokens)
                .map_err(|e| e.at_step(step))?;
            let probs = softmax(&logits, cfg.temperature)?;
            for (t, &p) in probs.probs().iter().enumerate() {
                if p > 0.0 {
                    candidates.push((hyp.score + p.ln(), h, t as TokenId));
                }
            }
            dists.push(probs);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, h, t) in candidates.iter().take(width) {
            let parent = &alive[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let mut steps = parent.steps.clone();
            steps.push(StepRecord {
                token: t,
                probs: dists[h].clone(),
            });
            let hyp = Hypothesis { tokens, score, steps };
            if t == eos {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities never increase, so no survivor can overtake
        if alive.is_empty() || best_finished > best_alive {
            break;
        }
    }

    let best = finished
        .iter()
        .chain(alive.iter())
        .min_by(|a, b| better(a, b))
        .cloned()
        .expect("beam search keeps at least one hypothesis");
    let stopped_by = if best.tokens.last() == Some(&eos) {
        StopReason::Eos
    } else {
        StopReason::Budget
    };
    Ok(DecodeResult {
        tokens: TokenSequence::new(best.tokens),
        per_step: best.steps,
        stopped_by,
    })
}
