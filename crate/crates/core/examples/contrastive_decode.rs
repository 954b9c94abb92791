//! Caption one testbed image with ConVis and show the pieces: the sampled
//! captions, the images rendered from them and the per-step divergence.
//!
//! `cargo run --example contrastive_decode -- "demo:dog,pool,kite"`

use std::sync::Arc;

use convis::backend::Session;
use convis::convis::{convis_decode, ConvisConfig, DEFAULT_CAPTION_PROMPT};
use convis::testbed::{TestbedBackend, WorldSpec};

fn main() -> convis::Result<()> {
    let image_ref = std::env::args().nth(1).unwrap_or_else(|| "demo:dog,pool,kite".into());
    let session = Session::open(Arc::new(TestbedBackend::new(WorldSpec::default())?))?;
    let image = session.register_image(None, Some(&image_ref))?;
    let prompt = session.tokenize(DEFAULT_CAPTION_PROMPT)?;

    let cfg = ConvisConfig::default();
    let out = convis_decode(&session, &session, &image, &prompt, &cfg)?;

    for c in &out.captions {
        println!("caption (seed {}): {}", c.seed, c.caption_text);
        println!("  rendered as {}", c.image.id);
    }
    let text = session.detokenize(out.result.tokens.without_eos(session.eos_id()))?;
    println!("\nresponse: {text}\n");
    for (i, step) in out.trace.steps.iter().enumerate() {
        let token = session.detokenize(&[step.token])?;
        println!("{i:>3} {token:<10} kl={:.3} support={}", step.kl, step.support.len());
    }
    Ok(())
}
