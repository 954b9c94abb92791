//! Teacher-force a greedy caption through the ConVis distributions and show
//! where the original and rendered images disagree. The hallucinated object
//! stands out.

use std::sync::Arc;

use convis::backend::Session;
use convis::convis::{generate_caption_set, teacher_forced_trace, ConvisConfig, DEFAULT_CAPTION_PROMPT};
use convis::experiment::{respond, Method, MethodSettings};
use convis::sampling::SamplerConfig;
use convis::testbed::{engineered_cases, TestbedBackend};

fn main() -> convis::Result<()> {
    let case = &engineered_cases()[0];
    let session = Session::open(Arc::new(TestbedBackend::new(case.world.clone())?))?;
    let image = session.register_image(None, Some(&case.scene.id))?;
    let prompt = session.tokenize(DEFAULT_CAPTION_PROMPT)?;
    let cfg = ConvisConfig {
        n_images: 1,
        caption_sampler: SamplerConfig::greedy(64),
        ..ConvisConfig::default()
    };

    let greedy = respond(Method::Greedy, &session, None, &image, &prompt, 64, &MethodSettings::default(), 0)?;
    let generated: Vec<_> = generate_caption_set(&session, &session, &image, &cfg)?
        .into_iter()
        .map(|c| c.image)
        .collect();
    let trace = teacher_forced_trace(&session, &image, &generated, &prompt, greedy.result.tokens.as_slice(), &cfg)?;

    println!("scene {:?}, prior object {}", case.scene.objects, case.hallucinated);
    for (i, step) in trace.steps.iter().enumerate() {
        let token = session.detokenize(&[step.token])?;
        let bar = "#".repeat((step.kl * 20.0).min(60.0) as usize);
        println!("{i:>3} {token:<10} {:>7.4} {bar}", step.kl);
    }
    Ok(())
}
