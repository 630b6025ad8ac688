#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::Skeleton;

// Any schema that validates must survive a write/read round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(skeleton) = Skeleton::from_json_str(text) {
        let again = Skeleton::from_json_str(&skeleton.to_json_string()).expect("round trip");
        assert_eq!(skeleton, again);
    }
});
