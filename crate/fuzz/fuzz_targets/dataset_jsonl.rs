#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::dataset::DatasetFile;
use weakpose::Skeleton;

const SKELETON: &str = include_str!("../corpus/skeleton_schema/seed_generated.json");

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let skeleton = Skeleton::from_json_str(SKELETON).unwrap();
    if let Ok((file, _)) = DatasetFile::parse(text, &skeleton) {
        let (again, _) = DatasetFile::parse(&file.to_jsonl(), &skeleton).expect("round trip");
        assert_eq!(file, again);
    }
});
