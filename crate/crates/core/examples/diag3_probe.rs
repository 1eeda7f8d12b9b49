//! Scratch: stage-1 variant sweep from one shared pretrain.

use eventface_core::data::{make_pretrain_dataset, make_synthetic_dataset, DataConfig, EncodedSample};
use eventface_core::metrics::{compute_eer, ScoreSet};
use eventface_core::model::{extract_embedding, Model, ModelConfig};
use eventface_core::rng::Rng;
use eventface_core::train::{pretrain_backbone, train_stage1, Sample, TrainSettings};

fn eer_of(model: &Model, set: &[EncodedSample]) -> f64 {
    let embs: Vec<(usize, Vec<f64>)> = set
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
    let dcfg = DataConfig::default();
    let (train, test) = make_synthetic_dataset(&dcfg, 7);
    let pre = make_pretrain_dataset(&dcfg, 6, 7 ^ 0x5eed);
    let pre_samples: Vec<Sample> =
        pre.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    let train_samples: Vec<Sample> =
        train.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();

    let pretrained = {
        eprintln!("pretraining...");
        let mut root = Rng::new(7);
        let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
        let settings =
            TrainSettings { lr: 0.01, batch_size: 8, epochs: 20, margin: 0.0, scale: 16.0, adapter_lr_boost: 1.0 };
        pretrain_backbone(&mut model, &pre_samples, 6, &settings, &mut root.fork("pre")).unwrap();
        model
    };

    let variants: [(f64, f64, f64, f64, usize); 3] = [
        (0.01, 20.0, 0.5, 32.0, 40),
        (0.01, 100.0, 0.5, 32.0, 40),
        (0.01, 20.0, 0.0, 16.0, 40),
    ];
    for (lr, boost, margin, scale, epochs) in variants {
        let mut root = Rng::new(7);
        let mut m = Model {
            cfg: ModelConfig::desk(),
            params: pretrained.params.clone(),
            stage: eventface_core::model::TrainStage::Stage1,
        };
        let settings = TrainSettings { lr, batch_size: 8, epochs, margin, scale, adapter_lr_boost: boost };
        let (_, log) =
            train_stage1(&mut m, &train_samples, 6, &settings, &mut root.fork("s1")).unwrap();
        let per5: Vec<String> = log
            .chunks(12 * 5)
            .map(|c| format!("{:.2}", c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64))
            .collect();
        println!(
            "lr {lr:>6} boost {boost:>5} m {margin} s {scale:>4}: {} | train EER {:.3} test EER {:.3}",
            per5.join(" "),
            eer_of(&m, &train),
            eer_of(&m, &test)
        );
    }
}
