//! Running decoding methods over images and corpora.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ImageHandle, Session};
use crate::convis::{convis_decode, CaptionRecord, ConvisConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::eval::CorpusRecord;
use crate::logits::{LogitVector, TokenId, TokenSequence};
use crate::sampling::{decode, DecodeResult, SamplerConfig, SamplerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Nucleus,
    Beam,
    Convis,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Greedy, Method::Nucleus, Method::Beam, Method::Convis];

    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Nucleus => "nucleus",
            Method::Beam => "beam",
            Method::Convis => "convis",
        }
    }

    pub fn needs_renderer(self) -> bool {
        self == Method::Convis
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Decoder parameters shared by all methods of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub nucleus: SamplerConfig,
    pub beam: SamplerConfig,
    pub convis: ConvisConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            nucleus: SamplerConfig::nucleus(1.0, 0.9, 64, 0),
            beam: SamplerConfig::beam(5, 64),
            convis: ConvisConfig::default(),
        }
    }
}

impl MethodSettings {
    pub fn validate(&self) -> Result<()> {
        self.nucleus.validate()?;
        self.beam.validate()?;
        self.convis.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub result: DecodeResult,
    pub trace: Option<DecodeTrace>,
    pub captions: Vec<CaptionRecord>,
}

/// Decodes one response. `seed` drives nucleus sampling and the ConVis
/// caption seeds.
#[allow(clippy::too_many_arguments)]
pub fn respond(
    method: Method,
    mllm: &Session,
    t2i: Option<&Session>,
    image: &ImageHandle,
    prompt: &TokenSequence,
    max_new_tokens: usize,
    settings: &MethodSettings,
    seed: u64,
) -> Result<Response> {
    let plain = |sampler: SamplerConfig| -> Result<Response> {
        let mut provider = |p: &[TokenId], prefix: &[TokenId]| -> Result<LogitVector> {
            Ok(mllm.query_logits(image, p, prefix)?)
        };
        Ok(Response {
            result: decode(&mut provider, prompt, &sampler, mllm.eos_id())?,
            trace: None,
            captions: Vec::new(),
        })
    };
    match method {
        Method::Greedy => plain(SamplerConfig {
            kind: SamplerKind::Greedy,
            max_new_tokens,
            ..SamplerConfig::default()
        }),
        Method::Nucleus => plain(SamplerConfig {
            kind: SamplerKind::Nucleus,
            max_new_tokens,
            rng_seed: seed,
            ..settings.nucleus.clone()
        }),
        Method::Beam => plain(SamplerConfig {
            kind: SamplerKind::Beam,
            max_new_tokens,
            ..settings.beam.clone()
        }),
        Method::Convis => {
            let t2i = t2i.ok_or_else(|| Error::Config("method convis needs a text-to-image backend".into()))?;
            let cfg = ConvisConfig {
                response_max_new_tokens: max_new_tokens,
                seed_base: seed,
                caption_seeds: None,
                ..settings.convis.clone()
            };
            let out = convis_decode(mllm, t2i, image, prompt, &cfg)?;
            Ok(Response {
                result: out.result,
                trace: Some(out.trace),
                captions: out.captions,
            })
        }
    }
}

/// An image to caption with its ground-truth objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusImage {
    pub image_ref: String,
    pub ground_truth: Vec<String>,
}

/// Seed for item `index` of a run seeded with `run_seed`.
pub fn item_seed(run_seed: u64, index: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 7_919)
}

/// Registers each image by reference, decodes a caption for it and returns
/// records ready for CHAIR scoring, in input order.
#[allow(clippy::too_many_arguments)]
pub fn caption_corpus(
    method: Method,
    mllm: &Session,
    t2i: Option<&Session>,
    images: &[CorpusImage],
    prompt: &TokenSequence,
    max_new_tokens: usize,
    settings: &MethodSettings,
    run_seed: u64,
) -> Result<Vec<CorpusRecord>> {
    let one = |(index, item): (usize, &CorpusImage)| -> Result<CorpusRecord> {
        let handle = mllm.register_image(None, Some(&item.image_ref))?;
        let r = respond(
            method,
            mllm,
            t2i,
            &handle,
            prompt,
            max_new_tokens,
            settings,
            item_seed(run_seed, index),
        )?;
        let caption = mllm.detokenize(r.result.tokens.without_eos(mllm.eos_id()))?;
        Ok(CorpusRecord {
            image_ref: item.image_ref.clone(),
            caption,
            ground_truth: Some(item.ground_truth.clone()),
        })
    };
    images
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            one((i, item)).map_err(|e| Error::Item {
                image_ref: item.image_ref.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}
