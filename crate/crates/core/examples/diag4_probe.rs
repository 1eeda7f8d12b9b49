//! Scratch: per-step update magnitudes in stage 1.

use eventface_core::data::{make_pretrain_dataset, make_synthetic_dataset, DataConfig};
use eventface_core::model::{Model, ModelConfig, TrainStage};
use eventface_core::rng::Rng;
use eventface_core::train::{
    adaface_loss, init_head_from_prototypes, pretrain_backbone, AdaFaceHead, Sample, TrainSettings,
};
use eventface_core::model::frames_on_tape;
use eventface_core::tensor::Tape;

fn main() {
    let dcfg = DataConfig::default();
    let (train, _) = make_synthetic_dataset(&dcfg, 7);
    let pre = make_pretrain_dataset(&dcfg, 6, 7 ^ 0x5eed);
    let pre_samples: Vec<Sample> =
        pre.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    let mut root = Rng::new(7);
    let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
    let settings = TrainSettings { lr: 0.01, batch_size: 8, epochs: 6, margin: 0.0, scale: 16.0, adapter_lr_boost: 1.0 };
    pretrain_backbone(&mut model, &pre_samples, 6, &settings, &mut root.fork("pre")).unwrap();

    model.attach_lora(&mut root.fork("lora")).unwrap();
    model.set_stage(TrainStage::Stage1);
    let mut head = AdaFaceHead::new(32, 6, 0.5, 32.0, &mut root.fork("head"));
    let train_samples: Vec<Sample> =
        train.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    init_head_from_prototypes(&model, &mut head, &train_samples).unwrap();

    // one manual step: inspect gradient norms per parameter family
    let mut tape = Tape::new();
    let bind = model.params.insert_on(&mut tape).unwrap();
    let wid = tape.leaf(head.weights.clone(), vec![32, 6], true).unwrap();
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for s in train.iter().take(8) {
        let frames = frames_on_tape(&mut tape, &s.sequence, 32).unwrap();
        embs.push(model.embed_sequence(&mut tape, &bind, &frames).unwrap());
        labels.push(s.identity);
    }
    let stacked = tape.stack(&embs).unwrap();
    let emb2d = tape.reshape(stacked, vec![8, 32]).unwrap();
    let loss = adaface_loss(&mut tape, emb2d, &labels, wid, &mut head, true).unwrap();
    println!("loss {}", tape.data(loss)[0]);
    tape.backward(loss).unwrap();
    let gnorm = |g: Option<&[f64]>| -> f64 {
        g.map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(-1.0)
    };
    println!("head grad norm {}", gnorm(tape.grad(wid)));
    for (name, id) in bind.iter() {
        if name.contains("stage1.conv0") || name.contains("stage2.conv1") {
            println!("{name}: grad norm {}", gnorm(tape.grad(id)));
        }
    }
    // embedding statistics
    let e = tape.data(emb2d);
    let norms: Vec<f64> = (0..8)
        .map(|r| e[r * 32..(r + 1) * 32].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    println!("embedding norms {:?}", norms.iter().map(|n| (n * 100.0).round() / 100.0).collect::<Vec<_>>());
}
