//! Sanity oracles for the synthetic data and the training loop.

use pego_core::data::{generate_dataset, split_train_val, DataConfig, Sample};
use pego_core::trainer::{pretrain_base, run_one, TrainConfig};

/// Multinomial logistic regression on raw pixels, full-batch gradient
/// descent. Independent of the library's autograd.
fn linear_probe(train: &[&Sample], classes: usize, epochs: usize, lr: f64) -> Vec<Vec<f64>> {
    let dim = train[0].image.len() + 1;
    let mut w = vec![vec![0.0; dim]; classes];
    let feats = |s: &Sample| {
        let mut x = s.image.as_slice().to_vec();
        x.push(1.0);
        x
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|s| feats(s)).collect();
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; dim]; classes];
        for (x, s) in xs.iter().zip(train) {
            let logits: Vec<f64> = w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - m).exp() / z - if c == s.label { 1.0 } else { 0.0 };
                for (g, xi) in grad[c].iter_mut().zip(x) {
                    *g += p * xi;
                }
            }
        }
        for c in 0..classes {
            for (wi, g) in w[c].iter_mut().zip(&grad[c]) {
                *wi -= lr * g / train.len() as f64;
            }
        }
    }
    w
}

fn probe_accuracy(w: &[Vec<f64>], samples: &[&Sample]) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| {
            let mut x = s.image.as_slice().to_vec();
            x.push(1.0);
            let scores: Vec<f64> = w.iter().map(|wc| wc.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            pego_core::vit::argmax(&scores) == s.label
        })
        .count();
    correct as f64 / samples.len() as f64
}

#[test]
fn pixel_probe_beats_chance_in_domain() {
    let cfg = DataConfig::default();
    let ds = generate_dataset(&cfg, 0).unwrap();
    let (tr, va) = split_train_val(&ds.subset(&[0, 1, 2]), 0.2, 1).unwrap();
    let train: Vec<&Sample> = tr.samples().collect();
    let val: Vec<&Sample> = va.samples().collect();
    let w = linear_probe(&train, cfg.classes, 300, 0.5);
    let acc = probe_accuracy(&w, &val);
    assert!(acc > 1.0 / cfg.classes as f64 + 0.1, "probe accuracy {acc}");
}

#[test]
fn training_lowers_cross_entropy_below_chance() {
    let cfg = TrainConfig::canonical();
    let base = pretrain_base(&cfg).unwrap().model;
    let ds = generate_dataset(&cfg.data, cfg.data.seed).unwrap();
    let chance = (cfg.data.classes as f64).ln();
    for seed in 0..3 {
        let run = run_one(&base, &ds, &cfg, 0, seed).unwrap();
        let tail = &run.history[run.history.len() - 50..];
        let ce = tail.iter().map(|r| r.loss_cls).sum::<f64>() / tail.len() as f64;
        assert!(ce < chance, "seed {seed}: train CE {ce} vs ln(classes) {chance}");
        assert_eq!(run.history.len(), cfg.iterations);
    }
}
