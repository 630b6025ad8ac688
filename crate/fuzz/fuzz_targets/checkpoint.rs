#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::pipeline::Checkpoint;

// Tampered or truncated checkpoints must be rejected with an error, never a panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Checkpoint::from_json(text);
    }
});
