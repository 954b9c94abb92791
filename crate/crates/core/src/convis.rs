//! Contrastive decoding against reconstructed images.
//!
//! The model first captions the original image `n` times with nucleus
//! sampling; each caption is rendered back into an image by a text-to-image
//! backend. At every response step the model is queried once per image and
//! the scores are combined as
//!
//! ```text
//! combined = (1/n) * sum_i [ (1 + alpha) * f_orig - alpha * f_gen_i ]
//! ```
//!
//! A token the captions hallucinated is drawn into the reconstructions, its
//! score under them rises, and the contrast pushes it down. Candidates are
//! restricted to tokens whose original-image probability is at least
//! `lambda` times the most likely token's.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ImageHandle, Session};
use crate::error::{Error, Result};
use crate::logits::{kl_divergence, softmax, LogitVector, TokenId, TokenSequence, TokenSet};
use crate::sampling::{decode, greedy_step, DecodeResult, SamplerConfig, StepRecord, StopReason};

pub const DEFAULT_CAPTION_PROMPT: &str = "Please describe this image in detail.";

/// Selects the default contrast strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Captioning,
    Vqa,
}

impl TaskKind {
    pub fn default_alpha(self) -> f64 {
        match self {
            TaskKind::Captioning => 1.0,
            TaskKind::Vqa => 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvisConfig {
    pub task: TaskKind,
    /// Contrast strength; the task default when absent.
    pub alpha: Option<f64>,
    pub lambda: f64,
    /// Turns the plausibility restriction off entirely.
    pub plausibility: bool,
    pub n_images: usize,
    pub caption_prompt: String,
    /// Per-caption decoder; its `rng_seed` is replaced by the caption seed.
    pub caption_sampler: SamplerConfig,
    /// Caption `i` uses `seed_base + i` unless `caption_seeds` is given.
    pub seed_base: u64,
    pub caption_seeds: Option<Vec<u64>>,
    pub response_max_new_tokens: usize,
    /// Issue the per-step queries and caption decodes concurrently.
    pub parallel: bool,
}

impl Default for ConvisConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::Captioning)
    }
}

impl ConvisConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            alpha: None,
            lambda: 0.1,
            plausibility: true,
            n_images: 4,
            caption_prompt: DEFAULT_CAPTION_PROMPT.into(),
            caption_sampler: SamplerConfig::nucleus(0.7, 0.9, 256, 0),
            seed_base: 0,
            caption_seeds: None,
            response_max_new_tokens: 64,
            parallel: true,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.task.default_alpha())
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.caption_seeds {
            Some(s) => s.clone(),
            None => (0..self.n_images as u64).map(|i| self.seed_base.wrapping_add(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("{alpha} is not a non-negative real")));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid("lambda", format!("{} is not in (0, 1]", self.lambda)));
        }
        if self.n_images == 0 {
            return Err(Error::invalid("n_images", "must be at least 1"));
        }
        if self.response_max_new_tokens == 0 {
            return Err(Error::invalid("response_max_new_tokens", "must be at least 1"));
        }
        let seeds = self.seeds();
        if seeds.len() != self.n_images {
            return Err(Error::invalid(
                "caption_seeds",
                format!("{} seeds for {} images", seeds.len(), self.n_images),
            ));
        }
        let distinct: std::collections::BTreeSet<_> = seeds.iter().collect();
        if distinct.len() != seeds.len() {
            return Err(Error::invalid("caption_seeds", "seeds must be distinct"));
        }
        self.caption_sampler.validate()
    }
}

/// Combines original-image logits with each generated image's logits.
///
/// A token masked under the original image stays masked. With `alpha > 0` a
/// token masked under any generated image is masked too, since its contrast
/// term would be unbounded.
pub fn contrastive_logits(f_orig: &LogitVector, f_gens: &[LogitVector], alpha: f64) -> Result<LogitVector> {
    if f_gens.is_empty() {
        return Err(Error::invalid("f_gens", "at least one generated-image vector is required"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid("alpha", format!("{alpha} is not a non-negative real")));
    }
    for g in f_gens {
        g.check_len(f_orig.len())?;
    }
    if alpha == 0.0 {
        return Ok(f_orig.clone());
    }
    let scale = alpha / f_gens.len() as f64;
    let values = (0..f_orig.len())
        .map(|t| {
            let orig = f_orig.values()[t];
            let mut gen_sum = 0.0;
            for g in f_gens {
                gen_sum += g.values()[t];
            }
            if orig.is_finite() && gen_sum.is_finite() {
                (1.0 + alpha) * orig - scale * gen_sum
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    LogitVector::new(values)
}

/// Tokens whose original-image probability is at least `lambda` times the
/// largest one.
pub fn plausibility_mask(f_orig: &LogitVector, lambda: f64) -> Result<TokenSet> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid("lambda", format!("{lambda} is not in (0, 1]")));
    }
    let p = softmax(f_orig, 1.0)?;
    let cutoff = lambda * p.max_prob();
    Ok(p.probs()
        .iter()
        .enumerate()
        .filter(|(_, &q)| q > 0.0 && q >= cutoff)
        .map(|(t, _)| t as TokenId)
        .collect())
}

/// Everything computed at one response step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub token: TokenId,
    pub support: TokenSet,
    pub f_orig: LogitVector,
    pub f_gens: Vec<LogitVector>,
    /// Contrastive scores before the plausibility restriction.
    pub combined: LogitVector,
    /// KL(original || mean of generated); `+inf` when supports disagree.
    pub kl: f64,
    pub kl_per_image: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepTrace>,
}

/// Token-wise mean of the generated-image logits.
pub fn mean_logits(f_gens: &[LogitVector]) -> Result<LogitVector> {
    let first = f_gens
        .first()
        .ok_or_else(|| Error::invalid("f_gens", "at least one generated-image vector is required"))?;
    let n = f_gens.len() as f64;
    let mut sums = vec![0.0; first.len()];
    for g in f_gens {
        g.check_len(first.len())?;
        for (s, v) in sums.iter_mut().zip(g.values()) {
            *s += v;
        }
    }
    LogitVector::new(sums.into_iter().map(|s| s / n).collect())
}

fn kl_terms(f_orig: &LogitVector, f_gens: &[LogitVector]) -> Result<(f64, Vec<f64>)> {
    let p = softmax(f_orig, 1.0)?;
    let kl = kl_divergence(&p, &softmax(&mean_logits(f_gens)?, 1.0)?)?;
    let per_image = f_gens
        .iter()
        .map(|g| kl_divergence(&p, &softmax(g, 1.0)?))
        .collect::<Result<_>>()?;
    Ok((kl, per_image))
}

/// Picks one token: combine, restrict to the plausible set, then argmax.
pub fn convis_step(f_orig: &LogitVector, f_gens: &[LogitVector], cfg: &ConvisConfig) -> Result<StepTrace> {
    let combined = contrastive_logits(f_orig, f_gens, cfg.alpha())?;
    let support = if cfg.plausibility {
        plausibility_mask(f_orig, cfg.lambda)?
    } else {
        (0..f_orig.len() as TokenId).filter(|&t| !f_orig.is_masked(t)).collect()
    };
    let token = greedy_step(&combined.restrict_to(&support)?);
    let (kl, kl_per_image) = kl_terms(f_orig, f_gens)?;
    Ok(StepTrace {
        token,
        support,
        f_orig: f_orig.clone(),
        f_gens: f_gens.to_vec(),
        combined,
        kl,
        kl_per_image,
    })
}

/// Per-step KL between the original-image distribution and the distribution
/// under the mean generated-image logits.
pub fn kl_trace(trace: &DecodeTrace) -> Result<Vec<f64>> {
    if trace.steps.is_empty() {
        return Err(Error::invalid("trace", "trace has no steps"));
    }
    trace.steps.iter().map(|s| Ok(kl_terms(&s.f_orig, &s.f_gens)?.0)).collect()
}

/// A caption of the original image and the image rendered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_tokens: TokenSequence,
    pub caption_text: String,
    pub seed: u64,
    pub image: ImageHandle,
}

fn caption_one(
    mllm: &Session,
    t2i: &Session,
    image: &ImageHandle,
    prompt: &TokenSequence,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<CaptionRecord> {
    let sampler = SamplerConfig {
        rng_seed: seed,
        ..sampler.clone()
    };
    let mut provider = |p: &[TokenId], prefix: &[TokenId]| -> Result<LogitVector> {
        Ok(mllm.query_logits(image, p, prefix)?)
    };
    let out = decode(&mut provider, prompt, &sampler, mllm.eos_id())?;
    let caption_text = mllm.detokenize(out.tokens.without_eos(mllm.eos_id()))?;
    let generated = t2i.generate_image(&caption_text, seed)?;
    Ok(CaptionRecord {
        caption_tokens: out.tokens,
        caption_text,
        seed,
        image: generated,
    })
}

/// Captions `image` once per seed and renders every caption.
///
/// The generated handles must be resolvable by `mllm`, which in practice
/// means both sessions talk to the same server.
pub fn generate_caption_set(
    mllm: &Session,
    t2i: &Session,
    image: &ImageHandle,
    cfg: &ConvisConfig,
) -> Result<Vec<CaptionRecord>> {
    cfg.validate()?;
    let prompt = mllm.tokenize(&cfg.caption_prompt)?;
    let seeds = cfg.seeds();
    let run = |(index, seed): (usize, &u64)| {
        caption_one(mllm, t2i, image, &prompt, &cfg.caption_sampler, *seed).map_err(|e| Error::Caption {
            index,
            source: Box::new(e),
        })
    };
    if cfg.parallel {
        seeds.par_iter().enumerate().map(run).collect()
    } else {
        seeds.iter().enumerate().map(run).collect()
    }
}

/// One logit vector per image, in the order given.
fn query_all(
    mllm: &Session,
    images: &[&ImageHandle],
    prompt: &[TokenId],
    prefix: &[TokenId],
    parallel: bool,
) -> Result<Vec<LogitVector>> {
    let query = |img: &&ImageHandle| mllm.query_logits(img, prompt, prefix).map_err(Error::from);
    if parallel {
        images.par_iter().map(query).collect()
    } else {
        images.iter().map(query).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvisOutput {
    pub result: DecodeResult,
    pub trace: DecodeTrace,
    pub captions: Vec<CaptionRecord>,
}

/// Decodes a response with precomputed generated images.
pub fn convis_decode_with(
    mllm: &Session,
    image: &ImageHandle,
    generated: &[ImageHandle],
    prompt: &TokenSequence,
    cfg: &ConvisConfig,
) -> Result<(DecodeResult, DecodeTrace)> {
    cfg.validate()?;
    let eos = mllm.eos_id();
    let images: Vec<&ImageHandle> = std::iter::once(image).chain(generated).collect();
    let mut tokens = Vec::new();
    let mut per_step = Vec::new();
    let mut trace = DecodeTrace::default();
    let mut stopped_by = StopReason::Budget;
    for step in 0..cfg.response_max_new_tokens {
        let mut logits = query_all(mllm, &images, prompt.as_slice(), &tokens, cfg.parallel)
            .map_err(|e| e.at_step(step))?;
        let f_gens = logits.split_off(1);
        let st = convis_step(&logits[0], &f_gens, cfg).map_err(|e| e.at_step(step))?;
        let probs = softmax(&st.combined.restrict_to(&st.support)?, 1.0)?;
        tokens.push(st.token);
        per_step.push(StepRecord { token: st.token, probs });
        let done = st.token == eos;
        trace.steps.push(st);
        if done {
            stopped_by = StopReason::Eos;
            break;
        }
    }
    let result = DecodeResult {
        tokens: TokenSequence::new(tokens),
        per_step,
        stopped_by,
    };
    Ok((result, trace))
}

/// The full method: caption, render, then contrastively decode.
pub fn convis_decode(
    mllm: &Session,
    t2i: &Session,
    image: &ImageHandle,
    prompt: &TokenSequence,
    cfg: &ConvisConfig,
) -> Result<ConvisOutput> {
    let captions = generate_caption_set(mllm, t2i, image, cfg).map_err(|e| e.in_phase("caption"))?;
    let generated: Vec<ImageHandle> = captions.iter().map(|c| c.image.clone()).collect();
    let (result, trace) =
        convis_decode_with(mllm, image, &generated, prompt, cfg).map_err(|e| e.in_phase("response"))?;
    Ok(ConvisOutput {
        result,
        trace,
        captions,
    })
}

/// Replays a fixed token sequence, recording what each step would have
/// looked like. `token` in each step is the forced token.
pub fn teacher_forced_trace(
    mllm: &Session,
    image: &ImageHandle,
    generated: &[ImageHandle],
    prompt: &TokenSequence,
    tokens: &[TokenId],
    cfg: &ConvisConfig,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    let images: Vec<&ImageHandle> = std::iter::once(image).chain(generated).collect();
    let mut trace = DecodeTrace::default();
    for (step, &forced) in tokens.iter().enumerate() {
        let mut logits = query_all(mllm, &images, prompt.as_slice(), &tokens[..step], cfg.parallel)
            .map_err(|e| e.at_step(step))?;
        let f_gens = logits.split_off(1);
        let mut st = convis_step(&logits[0], &f_gens, cfg).map_err(|e| e.at_step(step))?;
        st.token = forced;
        trace.steps.push(st);
    }
    Ok(trace)
}

/// One line of a trace file. Infinite divergences are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub step: usize,
    pub token_id: TokenId,
    pub token_text: String,
    pub kl: Option<f64>,
    pub support_size: usize,
    pub kl_per_image: Vec<Option<f64>>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl DecodeTrace {
    pub fn lines(&self, token_text: impl Fn(TokenId) -> String) -> Vec<TraceLine> {
        self.steps
            .iter()
            .enumerate()
            .map(|(step, s)| TraceLine {
                step,
                token_id: s.token,
                token_text: token_text(s.token),
                kl: finite(s.kl),
                support_size: s.support.len(),
                kl_per_image: s.kl_per_image.iter().copied().map(finite).collect(),
            })
            .collect()
    }
}

pub fn write_trace_jsonl(lines: &[TraceLine], out: &mut dyn Write) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *out, line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl(path: &Path) -> Result<Vec<TraceLine>> {
    crate::backend::transcript::read_jsonl(path)
}
