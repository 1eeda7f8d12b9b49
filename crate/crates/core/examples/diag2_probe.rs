//! Scratch: is identity linearly present in the event frames, and what do
//! the learned embeddings look like?

use eventface_core::data::{make_synthetic_dataset, DataConfig, EncodedSample};
use eventface_core::model::{extract_embedding, Model, ModelConfig, TrainStage};
use eventface_core::rng::Rng;
use eventface_core::train::{train_phase, AdaFaceHead, Sample, TrainSettings};

fn mean_frame(s: &EncodedSample) -> Vec<f64> {
    let n = s.sequence.frames[0].len();
    let mut m = vec![0.0; n];
    for f in &s.sequence.frames {
        for (acc, v) in m.iter_mut().zip(f.iter()) {
            *acc += v / s.sequence.frames.len() as f64;
        }
    }
    m
}

fn nearest_class_mean_accuracy(samples: &[EncodedSample], num_ids: usize) -> f64 {
    let dim = samples[0].sequence.frames[0].len();
    // leave-one-out nearest class mean on mean frames
    let feats: Vec<(usize, Vec<f64>)> = samples.iter().map(|s| (s.identity, mean_frame(s))).collect();
    let mut correct = 0;
    for (i, (id, f)) in feats.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for class in 0..num_ids {
            let mut mean = vec![0.0; dim];
            let mut count = 0.0;
            for (j, (jid, jf)) in feats.iter().enumerate() {
                if j != i && *jid == class {
                    for (m, v) in mean.iter_mut().zip(jf.iter()) {
                        *m += v;
                    }
                    count += 1.0;
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            let dot: f64 = mean.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
            let nm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nf: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = dot / (nm * nf);
            if cos > best.0 {
                best = (cos, class);
            }
        }
        if best.1 == *id {
            correct += 1;
        }
    }
    correct as f64 / feats.len() as f64
}

fn main() {
    let dcfg = DataConfig::default();
    let (train, _test) = make_synthetic_dataset(&dcfg, 7);
    println!("pixel-space NCM accuracy (train ids): {:.3}", nearest_class_mean_accuracy(&train, 6));

    // train the plain backbone directly on events (full fine-tune, m=0)
    let mut root = Rng::new(7);
    let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
    model.set_stage(TrainStage::Pretrain);
    let mut head = AdaFaceHead::new(32, 6, 0.0, 16.0, &mut root.fork("head"));
    let samples: Vec<Sample> =
        train.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.002);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let settings = TrainSettings { lr, batch_size: 8, epochs, margin: 0.0, scale: 16.0, adapter_lr_boost: 1.0 };
    let log = train_phase(&mut model, &mut head, &samples, &settings, &mut root.fork("o")).unwrap();
    let per_epoch: Vec<String> = log
        .chunks(12)
        .map(|c| format!("{:.2}", c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64))
        .collect();
    println!("event full-train losses: {}", per_epoch.join(" "));

    // classifier accuracy + embedding geometry on the train set
    let mut correct = 0;
    let mut within = Vec::new();
    let mut across = Vec::new();
    let embs: Vec<(usize, Vec<f64>)> = train
        .iter()
        .map(|s| (s.identity, extract_embedding(&model, &s.sequence).unwrap()))
        .collect();
    for (id, e) in &embs {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for k in 0..6 {
            let mut dot = 0.0;
            for d in 0..32 {
                dot += e[d] * head.weights[d * 6 + k];
            }
            if dot > best.0 {
                best = (dot, k);
            }
        }
        if best.1 == *id {
            correct += 1;
        }
    }
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let dot: f64 = embs[i].1.iter().zip(embs[j].1.iter()).map(|(a, b)| a * b).sum();
            if embs[i].0 == embs[j].0 {
                within.push(dot);
            } else {
                across.push(dot);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "train classifier accuracy {:.3}; cosine within {:.3} across {:.3}",
        correct as f64 / embs.len() as f64,
        mean(&within),
        mean(&across)
    );
}
