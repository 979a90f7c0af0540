// Empirical stride-4 representation ceiling: upsampled saturated stride-4
// ground truth vs the full-resolution label.
use maskcd_core::data::synthetic::generate_synthetic_pair;
use maskcd_core::head::bilinear_upsample;
use maskcd_core::loss::downsample_label_nearest;
use maskcd_core::metrics::{compute_metrics, confusion_counts, ConfusionCounts};
use maskcd_core::rng::substream;

fn ceiling_f1(size: usize, tiles: usize, shapes: usize, seed: u64) -> f64 {
    let mut counts = ConfusionCounts::default();
    for i in 0..tiles {
        let tile_seed = substream(seed, "synth.train", i as u64).next_u64();
        let t = generate_synthetic_pair(tile_seed, size, shapes);
        let s4 = downsample_label_nearest(&t.label, size, size, 4);
        let vals: Vec<f64> = s4.iter().map(|&v| v as f64).collect();
        let up = bilinear_upsample(&vals, size / 4, size / 4, 4);
        let pred: Vec<u8> = up.iter().map(|&v| u8::from(v > 0.5)).collect();
        counts.add(&confusion_counts(&pred, &t.label).unwrap());
    }
    compute_metrics(&counts).f1
}

fn main() {
    for shapes in [3usize, 4, 5] {
        let f1 = ceiling_f1(64, 8, shapes, 8888);
        println!("current generator, shapes={shapes}: ceiling F1 = {f1:.4}");
    }
}
