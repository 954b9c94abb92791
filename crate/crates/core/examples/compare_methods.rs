//! Greedy, nucleus, beam and ConVis on the same images, side by side.

use std::sync::Arc;

use convis::backend::Session;
use convis::convis::DEFAULT_CAPTION_PROMPT;
use convis::eval::extract_objects;
use convis::experiment::{respond, Method, MethodSettings};
use convis::testbed::{make_corpus, TestbedBackend, WorldSpec};

fn main() -> convis::Result<()> {
    let world = WorldSpec::default();
    let lexicon = world.lexicon();
    let session = Session::open(Arc::new(TestbedBackend::new(world.clone())?))?;
    let prompt = session.tokenize(DEFAULT_CAPTION_PROMPT)?;
    let settings = MethodSettings::default();

    for item in make_corpus(&world, 4, 7) {
        let image = session.register_image(None, Some(&item.image.id))?;
        println!("{} (truth: {:?})", item.image.id, item.annotation);
        for method in Method::ALL {
            let t2i = method.needs_renderer().then_some(&session);
            let r = respond(method, &session, t2i, &image, &prompt, 64, &settings, 1)?;
            let text = session.detokenize(r.result.tokens.without_eos(session.eos_id()))?;
            let invented: Vec<String> = extract_objects(&text, &lexicon)
                .into_keys()
                .filter(|o| !item.annotation.contains(o))
                .collect();
            println!("  {:<8} {text}", method.name());
            if !invented.is_empty() {
                println!("  {:<8} not in the image: {}", "", invented.join(", "));
            }
        }
    }
    Ok(())
}
