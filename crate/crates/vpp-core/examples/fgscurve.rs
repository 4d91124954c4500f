//! Scratch diagnostic: FGS probe accuracy per layer on the benchmark suite.
//! Env overrides: FGS_AMP, FGS_OFFSET, FGS_BG_AMP.
use vpp_core::config::PipelineConfig;
use vpp_core::metrics::probe_fgs;
use vpp_core::pipeline::{benchmark_suite, dense_layer_features, init_vit, probe_dataset};
use vpp_core::synth::generate;

fn env_f(k: &str) -> Option<f64> {
    std::env::var(k).ok().and_then(|v| v.parse().ok())
}

fn main() {
    let cfg = PipelineConfig { seed: 1, ..PipelineConfig::default() };
    cfg.validate().unwrap();
    let weights = init_vit(&cfg).unwrap();
    let mut scenarios = benchmark_suite(cfg.seed);
    for s in &mut scenarios {
        if let Some(a) = env_f("FGS_AMP") {
            for i in &mut s.instances {
                i.amplitude = a;
            }
        }
        if let Some(o) = env_f("FGS_OFFSET") {
            s.fg_offset = o;
        }
        if let Some(b) = env_f("FGS_BG_AMP") {
            s.background_amp = b;
        }
    }
    let videos: Vec<_> = scenarios.iter().map(|s| generate(s).unwrap()).collect();
    let feats: Vec<_> =
        videos.iter().map(|v| dense_layer_features(v, &cfg.vit, &weights).unwrap()).collect();
    let mut accs = Vec::new();
    for layer in 0..=cfg.vit.layers {
        let mut frames = Vec::new();
        for (f, v) in feats.iter().zip(&videos) {
            frames.extend(probe_dataset(f, v, layer).unwrap());
        }
        accs.push(probe_fgs(&frames, layer).unwrap().accuracy);
    }
    let line: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    println!(
        "amp={} off={} bg={} : {}",
        env_f("FGS_AMP").unwrap_or(f64::NAN),
        env_f("FGS_OFFSET").unwrap_or(f64::NAN),
        env_f("FGS_BG_AMP").unwrap_or(f64::NAN),
        line.join(" ")
    );
}
