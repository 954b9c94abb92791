//! Record every backend exchange of a ConVis decode, then decode again from
//! the transcript alone and check the two agree.

use std::sync::Arc;

use convis::backend::transcript::{RecordingBackend, ReplayBackend};
use convis::backend::Session;
use convis::convis::{convis_decode, ConvisConfig, DEFAULT_CAPTION_PROMPT};
use convis::testbed::{TestbedBackend, WorldSpec};

fn decode(session: &Session) -> convis::Result<Vec<u32>> {
    let image = session.register_image(None, Some("rr:dog,car,tree"))?;
    let prompt = session.tokenize(DEFAULT_CAPTION_PROMPT)?;
    let out = convis_decode(session, session, &image, &prompt, &ConvisConfig::default())?;
    Ok(out.result.tokens.as_slice().to_vec())
}

fn main() -> convis::Result<()> {
    let recorder = Arc::new(RecordingBackend::new(TestbedBackend::new(WorldSpec::default())?));
    let live = decode(&Session::open(recorder.clone())?)?;
    let transcript = recorder.transcript();

    let dir = std::env::temp_dir().join("convis-record-replay");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("session.jsonl");
    transcript.write(&path)?;
    println!("{} exchanges written to {}", transcript.entries.len(), path.display());

    let replay = Arc::new(ReplayBackend::from_path(&path)?);
    let replayed = decode(&Session::open(replay.clone())?)?;
    assert_eq!(live, replayed);
    println!("replay matched {} tokens, {} exchanges unused", replayed.len(), replay.unconsumed());
    Ok(())
}
