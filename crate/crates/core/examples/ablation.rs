//! Run the seeded ablation study and print per-seed and averaged scores.
//!
//! Usage: `cargo run --release --example ablation -- [seeds=1,2,3] [key=value ...]`
//! where each `key=value` overrides a training config key.

use weakpose::datagen::GeneratorConfig;
use weakpose::pipeline::{Ablation, TrainConfig};
use weakpose::study::{average, run_trial, AblationScores};

fn row(s: &AblationScores) -> String {
    let sym: Vec<String> = s
        .weak_symmetry_px
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect();
    format!(
        "{:<10} seed {:>2}  weak depth {:7.2}  weak full {:7.2}  lab {:7.2}  pck {:6.2}  sym [{}]  {:.1}s",
        s.ablation.name(),
        s.seed,
        s.weak_depth_mpjpe_mm,
        s.weak_mpjpe_mm,
        s.lab_mpjpe_mm,
        s.weak_pck,
        sym.join(", "),
        s.train_wall_time_s
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut seeds = vec![1, 2, 3, 4, 5];
    let mut ablations = vec![Ablation::ThreeD, Ablation::Mixed, Ablation::MixedGeo];
    let mut config = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "seeds" => seeds = v.split(',').map(str::parse).collect::<Result<_, _>>()?,
            "ablations" => {
                ablations = v
                    .split(',')
                    .map(Ablation::parse)
                    .collect::<Result<_, _>>()?
            }
            _ => config.set(k, v)?,
        }
    }
    let mut all = Vec::new();
    for &seed in &seeds {
        let scores = run_trial(seed, &GeneratorConfig::default(), &config, &ablations)?;
        for s in &scores {
            println!("{}", row(s));
        }
        all.extend(scores);
    }
    println!("--- mean over {} seeds", seeds.len());
    for s in average(&all, &ablations) {
        println!("{}", row(&s));
    }
    Ok(())
}
