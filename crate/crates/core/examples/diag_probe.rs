//! Scratch diagnostic: where does stage-1 adaptation fail?

use eventface_core::data::{make_pretrain_dataset, make_synthetic_dataset, DataConfig, EncodedSample};
use eventface_core::metrics::{compute_eer, ScoreSet};
use eventface_core::model::{extract_embedding, Model, ModelConfig, TrainStage};
use eventface_core::rng::Rng;
use eventface_core::train::{pretrain_backbone, train_phase, AdaFaceHead, Sample, TrainSettings};

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
        let mut root = Rng::new(7);
        let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
        let settings =
            TrainSettings { lr: 0.002, batch_size: 8, epochs: 12, margin: 0.0, scale: 16.0, adapter_lr_boost: 1.0 };
        pretrain_backbone(&mut model, &pre_samples, 6, &settings, &mut root.fork("pre")).unwrap();
        model
    };
    println!(
        "pretrained: train EER {:.3} test EER {:.3}",
        eer_of(&pretrained, &train),
        eer_of(&pretrained, &test)
    );

    let variants: [(&str, bool, f64, f64, f64, usize); 4] = [
        ("A lora  m.5 s32", true, 0.5, 32.0, 0.002, 10),
        ("B lora  m0  s16", true, 0.0, 16.0, 0.002, 10),
        ("C full  m0  s16", false, 0.0, 16.0, 0.002, 10),
        ("D lora  m0  s16 lr.01", true, 0.0, 16.0, 0.01, 10),
    ];
    for (name, lora, margin, scale, lr, epochs) in variants {
        let mut root = Rng::new(7);
        let mut model = pretrained.params.clone();
        let mut m = Model { cfg: ModelConfig::desk(), params: model.clone(), stage: TrainStage::Stage1 };
        if lora {
            m.attach_lora(&mut root.fork("lora")).unwrap();
            m.set_stage(TrainStage::Stage1);
        } else {
            m.set_stage(TrainStage::Pretrain); // everything trainable
        }
        let mut head =
            AdaFaceHead::new(32, 6, margin, scale, &mut root.fork("head"));
        let settings = TrainSettings { lr, batch_size: 8, epochs, margin, scale, adapter_lr_boost: 1.0 };
        let log = train_phase(&mut m, &mut head, &train_samples, &settings, &mut root.fork("o"))
            .unwrap();
        if lora {
            m.merge_lora();
        }
        println!(
            "{name}: loss {:.2} -> {:.2}; train EER {:.3} test EER {:.3}",
            log.first().unwrap().loss,
            log.last().unwrap().loss,
            eer_of(&m, &train),
            eer_of(&m, &test)
        );
        model = m.params;
        let _ = model;
    }
}
