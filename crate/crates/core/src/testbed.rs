//! A synthetic captioning model and text-to-image renderer.
//!
//! Scenes are sets of object names. The model speaks a fixed template,
//! `a <obj> and a <obj> ... <eos>`, and at every object slot scores each
//! object as
//!
//! ```text
//! w_vis * [obj in scene] + w_prior * [obj in prior_set] + noise
//! ```
//!
//! so objects in `prior_set` leak into captions when `w_prior` is large
//! enough: a language-prior hallucination. The renderer draws exactly the
//! objects a caption mentions, so a reconstructed scene contains the
//! hallucinated object and its score rises by `w_vis` under that scene.
//! Noise is a pure function of `(world seed, image id, position)`, so
//! identical queries always return identical logits.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::protocol::*;
use crate::backend::{Backend, BackendError, BackendResult, Request, Response};
use crate::error::{Error, Result};
use crate::eval::ObjectLexicon;
use crate::logits::{LogitVector, TokenId, Vocabulary};
use crate::sampling::seeded_rng;

pub const EOS: TokenId = 0;
pub const ARTICLE: TokenId = 1;
pub const CONJUNCTION: TokenId = 2;
pub const UNKNOWN: TokenId = 3;
const FIRST_OBJECT: TokenId = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub objects: Vec<String>,
    pub prior_set: Vec<String>,
    /// Visual evidence weight; must be positive.
    pub w_vis: f64,
    /// Language-prior weight.
    pub w_prior: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Object mentions before the template forces EOS.
    pub mentions_per_caption: usize,
    /// Probability that the renderer drops each mentioned object, and that
    /// it adds one object the caption did not mention.
    pub infidelity: f64,
    /// Objects per sampled scene, inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Captions with more words are refused by the renderer.
    pub max_caption_words: Option<usize>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let objects = [
            "dog", "cat", "car", "pool", "person", "bench", "bicycle", "tree", "umbrella", "ball", "book",
            "chair", "table", "cup", "bottle", "kite", "bird", "boat", "clock", "phone",
        ];
        Self {
            objects: objects.iter().map(|s| s.to_string()).collect(),
            prior_set: ["person", "car", "chair", "table"].iter().map(|s| s.to_string()).collect(),
            w_vis: 6.0,
            w_prior: 5.0,
            noise_sigma: 1.0,
            rng_seed: 0,
            mentions_per_caption: 3,
            infidelity: 0.1,
            min_objects: 3,
            max_objects: 5,
            max_caption_words: None,
        }
    }
}

impl WorldSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let world: WorldSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Testbed(m));
        if self.objects.is_empty() {
            return bad("object vocabulary is empty".into());
        }
        let unique: BTreeSet<&String> = self.objects.iter().collect();
        if unique.len() != self.objects.len() {
            return bad("object vocabulary has duplicates".into());
        }
        for o in &self.objects {
            if o.is_empty() || o.contains(char::is_whitespace) || ["a", "and", "<eos>", "<unk>"].contains(&o.as_str()) {
                return bad(format!("`{o}` cannot be an object name"));
            }
        }
        if let Some(p) = self.prior_set.iter().find(|p| !unique.contains(p)) {
            return bad(format!("prior object `{p}` is not in the object vocabulary"));
        }
        if !(self.w_vis > 0.0 && self.w_vis.is_finite()) {
            return bad(format!("w_vis must be positive, got {}", self.w_vis));
        }
        if !self.w_prior.is_finite() || !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("w_prior and noise_sigma must be finite, noise_sigma >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.infidelity) {
            return bad(format!("infidelity must be in [0, 1], got {}", self.infidelity));
        }
        if self.mentions_per_caption == 0 {
            return bad("mentions_per_caption must be at least 1".into());
        }
        if self.min_objects > self.max_objects || self.max_objects > self.objects.len() {
            return bad("need min_objects <= max_objects <= number of objects".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = vec!["<eos>".to_string(), "a".into(), "and".into(), "<unk>".into()];
        words.extend(self.objects.iter().cloned());
        Vocabulary::new(words, EOS, None).expect("testbed vocabulary is valid")
    }

    pub fn object_token(&self, name: &str) -> Option<TokenId> {
        self.objects
            .iter()
            .position(|o| o == name)
            .map(|i| FIRST_OBJECT + i as TokenId)
    }

    pub fn object_name(&self, token: TokenId) -> Option<&str> {
        token
            .checked_sub(FIRST_OBJECT)
            .and_then(|i| self.objects.get(i as usize))
            .map(String::as_str)
    }

    /// Lexicon for scoring testbed captions: each object plus its plural.
    pub fn lexicon(&self) -> ObjectLexicon {
        let synonyms = self.objects.iter().map(|o| (format!("{o}s"), o.clone())).collect();
        ObjectLexicon::new(self.objects.clone(), synonyms).expect("plural forms are unambiguous")
    }

    pub fn in_prior(&self, name: &str) -> bool {
        self.prior_set.iter().any(|p| p == name)
    }
}

/// Semantic content of an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneImage {
    pub id: String,
    pub objects: BTreeSet<String>,
}

impl SceneImage {
    /// Registration reference understood by the testbed backend:
    /// `tag:obj1,obj2` (the tag is optional).
    pub fn reference(&self, tag: Option<&str>) -> String {
        let list = self.objects.iter().cloned().collect::<Vec<_>>().join(",");
        match tag {
            Some(t) => format!("{t}:{list}"),
            None => list,
        }
    }
}

fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Article,
    Object,
    AfterObject,
}

/// Walks the template over `prefix`, returning the next slot and the objects
/// mentioned so far.
fn parse_prefix(world: &WorldSpec, prefix: &[TokenId]) -> Result<(Slot, BTreeSet<TokenId>)> {
    let mut slot = Slot::Article;
    let mut mentioned = BTreeSet::new();
    for (i, &t) in prefix.iter().enumerate() {
        slot = match (slot, t) {
            (Slot::Article, ARTICLE) => Slot::Object,
            (Slot::Object, t) if world.object_name(t).is_some() && mentioned.insert(t) => Slot::AfterObject,
            (Slot::AfterObject, CONJUNCTION) => Slot::Article,
            _ => {
                return Err(Error::Testbed(format!(
                    "unparseable prefix: token {t} at position {i} does not fit the template"
                )))
            }
        };
    }
    Ok((slot, mentioned))
}

/// Next-token logits of the synthetic model for `image` after `prefix`.
/// The prompt does not influence the scores.
pub fn synth_logits(world: &WorldSpec, image: &SceneImage, _prompt: &[TokenId], prefix: &[TokenId]) -> Result<LogitVector> {
    let (slot, mentioned) = parse_prefix(world, prefix)?;
    let size = world.vocabulary().size();
    let mut values = vec![f64::NEG_INFINITY; size];
    match slot {
        Slot::Article => values[ARTICLE as usize] = 0.0,
        Slot::AfterObject => {
            let more = mentioned.len() < world.mentions_per_caption.min(world.objects.len());
            values[if more { CONJUNCTION } else { EOS } as usize] = 0.0;
        }
        Slot::Object => {
            let noise = if world.noise_sigma > 0.0 {
                let seed = hash_u64(&[
                    &world.rng_seed.to_le_bytes(),
                    image.id.as_bytes(),
                    &(prefix.len() as u64).to_le_bytes(),
                ]);
                let mut rng = seeded_rng(seed, 0);
                let normal = Normal::new(0.0, world.noise_sigma).expect("valid sigma");
                (0..world.objects.len()).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; world.objects.len()]
            };
            for (i, name) in world.objects.iter().enumerate() {
                let token = FIRST_OBJECT + i as TokenId;
                if mentioned.contains(&token) {
                    continue;
                }
                let vis = if image.objects.contains(name) { world.w_vis } else { 0.0 };
                let prior = if world.in_prior(name) { world.w_prior } else { 0.0 };
                values[token as usize] = vis + prior + noise[i];
            }
        }
    }
    LogitVector::new(values)
}

/// Objects named in a caption, if it follows the template.
fn caption_objects(world: &WorldSpec, caption: &str) -> Option<Vec<String>> {
    let vocab = world.vocabulary();
    let ids: Vec<TokenId> = caption
        .split_whitespace()
        .map(|w| vocab.id_of(w).unwrap_or(UNKNOWN))
        .collect();
    let body = match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => &ids[..],
    };
    parse_prefix(world, body).ok()?;
    Some(
        body.iter()
            .filter_map(|&t| world.object_name(t).map(str::to_string))
            .collect(),
    )
}

pub fn generated_image_id(caption: &str, seed: u64) -> String {
    format!("gen-{:016x}", hash_u64(&[caption.as_bytes(), &seed.to_le_bytes()]))
}

/// Renders a caption into a scene holding exactly the mentioned objects,
/// subject to the world's infidelity rate. A caption outside the template
/// yields an empty scene.
pub fn faithful_t2i(world: &WorldSpec, caption: &str, seed: u64) -> SceneImage {
    let id = generated_image_id(caption, seed);
    let Some(mentioned) = caption_objects(world, caption) else {
        log::warn!("renderer could not parse caption {caption:?}; producing an empty scene");
        return SceneImage {
            id,
            objects: BTreeSet::new(),
        };
    };
    let mut objects: BTreeSet<String> = mentioned.into_iter().collect();
    if world.infidelity > 0.0 {
        let mut rng = seeded_rng(
            hash_u64(&[&world.rng_seed.to_le_bytes(), caption.as_bytes(), &seed.to_le_bytes()]),
            1,
        );
        objects.retain(|_| !rng.gen_bool(world.infidelity));
        if rng.gen_bool(world.infidelity) {
            let absent: Vec<&String> = world
                .objects
                .iter()
                .filter(|o| !caption.split_whitespace().any(|w| w == o.as_str()))
                .collect();
            if let Some(extra) = absent.choose(&mut rng) {
                objects.insert((*extra).clone());
            }
        }
    }
    SceneImage { id, objects }
}

/// One corpus item: a scene and its ground-truth object annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub image: SceneImage,
    pub annotation: BTreeSet<String>,
}

/// Samples `n_images` scenes with between `min_objects` and `max_objects`
/// distinct objects each.
pub fn make_corpus(world: &WorldSpec, n_images: usize, seed: u64) -> Vec<CorpusItem> {
    let mut rng = seeded_rng(seed, 2);
    (0..n_images)
        .map(|i| {
            let k = rng.gen_range(world.min_objects..=world.max_objects);
            let objects: BTreeSet<String> = world.objects.choose_multiple(&mut rng, k).cloned().collect();
            let mut image = SceneImage {
                id: String::new(),
                objects: objects.clone(),
            };
            image.id = image.reference(Some(&format!("s{seed}-{i}")));
            CorpusItem {
                image,
                annotation: objects,
            }
        })
        .collect()
}

/// The testbed as a protocol backend. Original scenes enter through
/// `register_image` with a `tag:obj1,obj2` reference.
pub struct TestbedBackend {
    world: WorldSpec,
    vocab: Vocabulary,
    scenes: RwLock<HashMap<String, SceneImage>>,
}

impl TestbedBackend {
    pub fn new(world: WorldSpec) -> Result<Self> {
        world.validate()?;
        Ok(Self {
            vocab: world.vocabulary(),
            world,
            scenes: RwLock::new(HashMap::new()),
        })
    }

    pub fn world(&self) -> &WorldSpec {
        &self.world
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Looks up a registered or generated scene.
    pub fn scene(&self, id: &str) -> Option<SceneImage> {
        self.scenes.read().expect("scene lock").get(id).cloned()
    }

    fn insert(&self, scene: SceneImage) -> String {
        let id = scene.id.clone();
        self.scenes.write().expect("scene lock").insert(id.clone(), scene);
        id
    }

    fn parse_reference(&self, reference: &str) -> BackendResult<SceneImage> {
        let list = reference.rsplit_once(':').map_or(reference, |(_, l)| l);
        let mut objects = BTreeSet::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if self.world.object_token(name).is_none() {
                return Err(BackendError::BadRequest(format!("unknown object `{name}` in reference")));
            }
            objects.insert(name.to_string());
        }
        Ok(SceneImage {
            id: reference.to_string(),
            objects,
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.vocab.id_of(&w.to_lowercase()).unwrap_or(UNKNOWN))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> BackendResult<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                continue;
            }
            words.push(
                self.vocab
                    .text(id)
                    .ok_or_else(|| BackendError::BadRequest(format!("token {id} out of range")))?,
            );
        }
        Ok(words.join(" "))
    }
}

impl Backend for TestbedBackend {
    fn call(&self, request: &Request) -> BackendResult<Response> {
        match request {
            Request::Handshake => Ok(Response::Handshake(HandshakeInfo {
                vocab_size: self.vocab.size(),
                eos_id: EOS,
                bos_id: None,
                capabilities: vec![CAP_LOGITS.into(), CAP_TOKENIZE.into(), CAP_GENERATE_IMAGE.into()],
                protocol: PROTOCOL_VERSION.into(),
            })),
            Request::Logits(r) => {
                let scene = self
                    .scene(&r.image_id)
                    .ok_or_else(|| BackendError::UnknownImage(r.image_id.clone()))?;
                for &id in r.prompt_ids.iter().chain(&r.prefix_ids) {
                    if id as usize >= self.vocab.size() {
                        return Err(BackendError::BadRequest(format!("token {id} out of range")));
                    }
                }
                let logits = synth_logits(&self.world, &scene, &r.prompt_ids, &r.prefix_ids)
                    .map_err(|e| BackendError::BadRequest(e.to_string()))?;
                Ok(Response::Logits(LogitsResponse {
                    logits: logits.to_wire(),
                }))
            }
            Request::GenerateImage(r) => {
                if let Some(limit) = self.world.max_caption_words {
                    let words = r.caption.split_whitespace().count();
                    if words > limit {
                        return Err(BackendError::Refused(format!(
                            "caption has {words} words, renderer accepts at most {limit}"
                        )));
                    }
                }
                let id = self.insert(faithful_t2i(&self.world, &r.caption, r.seed));
                Ok(Response::Image(ImageResponse { image_id: id }))
            }
            Request::Tokenize(r) => Ok(Response::Ids(IdsResponse {
                ids: self.tokenize(&r.text),
            })),
            Request::Detokenize(r) => Ok(Response::Text(TextResponse {
                text: self.detokenize(&r.ids)?,
            })),
            Request::RegisterImage(r) => {
                if r.bytes_b64.is_some() {
                    return Err(BackendError::Refused("the testbed has no pixel input; pass a ref".into()));
                }
                let reference = r
                    .reference
                    .as_deref()
                    .ok_or_else(|| BackendError::BadRequest("register_image needs a ref".into()))?;
                let id = self.insert(self.parse_reference(reference)?);
                Ok(Response::Image(ImageResponse { image_id: id }))
            }
        }
    }
}

/// Objects of the engineered worlds.
pub const ENGINEERED_OBJECTS: [&str; 7] = ["dog", "cat", "car", "pool", "bench", "kite", "cup"];

/// A noise-free, perfectly rendered world whose only prior object is
/// `hallucinated`, scored one unit above any visible object.
pub fn engineered_world(hallucinated: &str) -> WorldSpec {
    WorldSpec {
        objects: ENGINEERED_OBJECTS.iter().map(|s| s.to_string()).collect(),
        prior_set: vec![hallucinated.to_string()],
        w_vis: 6.0,
        w_prior: 7.0,
        noise_sigma: 0.0,
        rng_seed: 0,
        mentions_per_caption: 3,
        infidelity: 0.0,
        min_objects: 3,
        max_objects: 3,
        max_caption_words: None,
    }
}

/// Contrast strength above which a single greedy caption is enough to keep a
/// prior object out of the response: the hallucinated object scores
/// `(1 + a) * w_prior - a * (w_prior + w_vis)` against `w_vis` for a visible
/// object the caption also mentions.
pub fn suppression_threshold(world: &WorldSpec) -> f64 {
    (world.w_prior - world.w_vis) / world.w_vis
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineeredCase {
    pub world: WorldSpec,
    pub scene: SceneImage,
    pub hallucinated: String,
}

/// Every choice of prior object paired with every scene of exactly
/// `mentions_per_caption` other objects.
///
/// With as many visible objects as mention slots, a greedy caption names
/// the prior object plus all but one visible object, so every slot of a
/// response has a visible candidate and the flip point is exactly
/// [`suppression_threshold`].
pub fn engineered_cases() -> Vec<EngineeredCase> {
    let mut cases = Vec::new();
    for h in ENGINEERED_OBJECTS {
        let world = engineered_world(h);
        let others: Vec<&str> = ENGINEERED_OBJECTS.iter().copied().filter(|o| *o != h).collect();
        let k = world.mentions_per_caption;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let objects: BTreeSet<String> = others
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, o)| o.to_string())
                .collect();
            let mut scene = SceneImage {
                id: String::new(),
                objects,
            };
            scene.id = scene.reference(Some(&format!("eng-{h}")));
            cases.push(EngineeredCase {
                world: world.clone(),
                scene,
                hallucinated: h.to_string(),
            });
        }
    }
    cases
}
