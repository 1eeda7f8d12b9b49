//! Scratch probe for end-to-end smoke calibration. Not part of the test
//! suite; run with `cargo run --example smoke_probe [seed]`.

use eventface_core::data::{make_pretrain_dataset, make_synthetic_dataset, DataConfig, EncodedSample};
use eventface_core::metrics::{compute_eer, ScoreSet};
use eventface_core::model::{extract_embedding, Model, ModelConfig};
use eventface_core::rng::Rng;
use eventface_core::stm::WkvImpl;
use eventface_core::train::{
    pretrain_backbone, train_stage1, train_stage2, Sample, TrainSettings,
};
use std::time::Instant;

fn eval_eer(model: &Model, test: &[EncodedSample]) -> f64 {
    let embs: Vec<(usize, Vec<f64>)> = test
        .iter()
        .map(|s| (s.identity, extract_embedding(model, &s.sequence).unwrap()))
        .collect();
    let mut scores = ScoreSet::default();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let dot: f64 = embs[i].1.iter().zip(embs[j].1.iter()).map(|(a, b)| a * b).sum();
            if embs[i].0 == embs[j].0 {
                scores.genuine.push(dot);
            } else {
                scores.impostor.push(dot);
            }
        }
    }
    compute_eer(&scores).unwrap()
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let wkv = std::env::args().nth(2).unwrap_or_default();
    let t0 = Instant::now();
    let dcfg = DataConfig::default();
    let (train, test) = make_synthetic_dataset(&dcfg, seed);
    println!("[{:?}] dataset: {} train / {} test", t0.elapsed(), train.len(), test.len());

    let mut mcfg = ModelConfig::desk();
    if wkv == "scan" {
        mcfg.stm.wkv_impl = WkvImpl::Scan;
    }
    let mut root = Rng::new(seed);
    let mut model = Model::new(mcfg.clone(), &mut root.fork("model")).unwrap();
    println!("[{:?}] untrained EER = {:.4}", t0.elapsed(), eval_eer(&model, &test));

    let pre = make_pretrain_dataset(&dcfg, 6, seed ^ 0x5eed);
    let pre_samples: Vec<Sample> =
        pre.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    let settings = TrainSettings { lr: 0.01, batch_size: 8, epochs: 20, margin: 0.0, scale: 16.0, adapter_lr_boost: 1.0 };
    let log = pretrain_backbone(&mut model, &pre_samples, 6, &settings, &mut root.fork("pretrain"))
        .unwrap();
    println!(
        "[{:?}] pretrain loss {:.3} -> {:.3}; EER after pretrain = {:.4}",
        t0.elapsed(),
        log.first().unwrap().loss,
        log.last().unwrap().loss,
        eval_eer(&model, &test)
    );

    let train_samples: Vec<Sample> =
        train.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    let s1 = TrainSettings { lr: 0.03, batch_size: 8, epochs: 40, margin: 0.5, scale: 32.0, adapter_lr_boost: 1.0 };
    let (ck1, log1) =
        train_stage1(&mut model, &train_samples, 6, &s1, &mut root.fork("stage1")).unwrap();
    println!(
        "[{:?}] stage1 loss {:.3} -> {:.3}; EER after stage1 = {:.4}",
        t0.elapsed(),
        log1.first().unwrap().loss,
        log1.last().unwrap().loss,
        eval_eer(&model, &test)
    );

    let s2 = TrainSettings { lr: 0.01, batch_size: 8, epochs: 12, margin: 0.5, scale: 32.0, adapter_lr_boost: 1.0 };
    let t2 = Instant::now();
    let (model2, _ck2, log2) =
        train_stage2(mcfg, &ck1, &train_samples, 6, &s2, &mut root.fork("stage2")).unwrap();
    println!(
        "[{:?}] stage2 ({:?}) loss {:.3} -> {:.3}; EER after stage2 = {:.4}",
        t0.elapsed(),
        t2.elapsed(),
        log2.first().unwrap().loss,
        log2.last().unwrap().loss,
        eval_eer(&model2, &test)
    );
}
