#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::dataset::parse_archive;
use weakpose::Skeleton;

const SKELETON: &str = include_str!("../corpus/skeleton_schema/seed_generated.json");

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let skeleton = Skeleton::from_json_str(SKELETON).unwrap();
        let _ = parse_archive(text, &skeleton);
    }
});
