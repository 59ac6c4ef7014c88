#![no_main]

//! Transcript loading must never panic on arbitrary bytes, and anything it
//! accepts must save back losslessly.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(messages) = crab::load_transcript(data) {
        let mut out = Vec::new();
        crab::save_transcript(&messages, &mut out).expect("accepted transcripts re-save");
        let reloaded = crab::load_transcript(&out[..]).expect("saved transcripts reload");
        assert_eq!(reloaded, messages);
    }
});
