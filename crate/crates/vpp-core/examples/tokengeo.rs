//! Scratch diagnostic: token cosine geometry and attention mass per layer.
use vpp_core::config::PipelineConfig;
use vpp_core::pipeline::{benchmark_suite, dense_layer_features, init_vit};
use vpp_core::synth::{foreground_union, generate};
use vpp_core::tensor::Matrix;
use vpp_core::vit::layer_norm;

fn mean_cos(m: &Matrix, rows_a: &[usize], rows_b: &[usize], skip_same: bool) -> f64 {
    let norm = |i: usize| -> f64 {
        (0..m.cols()).map(|c| m.get(i, c) * m.get(i, c)).sum::<f64>().sqrt()
    };
    let mut acc = 0.0;
    let mut n = 0usize;
    for &a in rows_a {
        for &b in rows_b {
            if skip_same && a == b {
                continue;
            }
            let dot: f64 = (0..m.cols()).map(|c| m.get(a, c) * m.get(b, c)).sum();
            acc += dot / (norm(a) * norm(b));
            n += 1;
        }
    }
    acc / n as f64
}

fn main() {
    let cfg = PipelineConfig { seed: 1, ..PipelineConfig::default() };
    cfg.validate().unwrap();
    let weights = init_vit(&cfg).unwrap();
    let video = generate(&benchmark_suite(cfg.seed)[0]).unwrap();
    let feats = dense_layer_features(&video, &cfg.vit, &weights).unwrap();
    let t = 3usize;
    let n = cfg.vit.tokens();
    let fg_mask = foreground_union(&video.gt[t], n);
    let fg: Vec<usize> = (0..n).filter(|&i| fg_mask[i]).collect();
    let bg: Vec<usize> = (0..n).filter(|&i| !fg_mask[i]).collect();
    println!("frame {t}: {} fg, {} bg", fg.len(), bg.len());
    println!("layer | fg-fg    fg-bg    bg-bg   (cosine of LN'd tokens)");
    for layer in [0usize, 1, 2, 4, 6, 8, 10, 12] {
        let x = layer_norm(&feats[t][layer]);
        println!(
            "{layer:>5} | {:+.3}   {:+.3}   {:+.3}",
            mean_cos(&x, &fg, &fg, true),
            mean_cos(&x, &fg, &bg, false),
            mean_cos(&x, &bg, &bg, true)
        );
    }
}
