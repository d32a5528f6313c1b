#![allow(dead_code)]

use lemof::data::{generate_synthetic, SplitDataset, SynthConfig};
use lemof::pipeline::{StageHyper, TrainConfig};

pub const RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

pub fn synth(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: n,
        seed,
        ..SynthConfig::default()
    }
}

pub fn split(cfg: &SynthConfig) -> SplitDataset {
    let data = generate_synthetic(cfg).expect("valid synth config");
    SplitDataset::new(&data, RATIOS, cfg.seed).expect("splittable")
}

/// Default model with every stage cut to `epochs` passes.
pub fn short_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let s = &mut cfg.stages;
    for h in [
        &mut s.s1_encoders.m1_ecg,
        &mut s.s1_encoders.m2_ehr,
        &mut s.s2_meta,
        &mut s.s4_fusion,
        &mut s.s5_omega1,
        &mut s.s6_final,
    ] {
        *h = StageHyper { epochs, ..*h };
    }
    cfg
}
