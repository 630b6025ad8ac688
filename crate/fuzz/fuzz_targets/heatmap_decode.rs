#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::losses::heatmap::{decode_heatmap, HeatmapGeometry, HeatmapStack};

// First two bytes pick the grid size, the rest fill the maps as little-endian f64s.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let geometry = HeatmapGeometry {
        height: data[0] as usize % 16 + 1,
        width: data[1] as usize % 16 + 1,
        stride: 4.0,
        sigma: 1.0,
    };
    let cells = geometry.height * geometry.width;
    let values: Vec<f64> = data[2..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let joints = values.len() / cells;
    if joints == 0 {
        return;
    }
    let mut stack = HeatmapStack::zeros(joints, geometry);
    stack.maps.copy_from_slice(&values[..joints * cells]);
    if let Ok(decoded) = decode_heatmap(&stack) {
        assert_eq!(decoded.joints.len(), joints);
        for (p, low) in decoded.joints.0.iter().zip(&decoded.low_confidence) {
            assert!(*low || geometry.in_field(*p));
        }
    }
});
