#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::metrics::MetricsReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = MetricsReport::from_json(text) {
        let _ = report.text_table();
    }
});
