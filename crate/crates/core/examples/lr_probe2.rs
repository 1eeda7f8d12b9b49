//! Scratch (margin, scale, lr) grid for the pretrain phase.

use eventface_core::data::{make_pretrain_dataset, DataConfig};
use eventface_core::model::{Model, ModelConfig, TrainStage};
use eventface_core::rng::Rng;
use eventface_core::train::{train_phase, AdaFaceHead, Sample, TrainSettings};

fn main() {
    let dcfg = DataConfig::default();
    let pre = make_pretrain_dataset(&dcfg, 6, 99);
    let samples: Vec<Sample> =
        pre.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    for (m, s) in [(0.0, 32.0), (0.0, 16.0), (0.5, 32.0)] {
        for lr in [0.002, 0.01, 0.05] {
            let mut root = Rng::new(5);
            let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
            model.set_stage(TrainStage::Pretrain);
            let mut head = AdaFaceHead::new(32, 6, m, s, &mut root.fork("head"));
            let settings = TrainSettings { lr, batch_size: 8, epochs: 12, margin: m, scale: s };
            let log =
                train_phase(&mut model, &mut head, &samples, &settings, &mut root.fork("o")).unwrap();
            let per_epoch: Vec<f64> = log
                .chunks(12)
                .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
                .collect();
            let txt: Vec<String> = per_epoch.iter().step_by(2).map(|l| format!("{l:.2}")).collect();
            println!("m {m} s {s:>4} lr {lr:>6}: {}", txt.join(" "));
        }
    }
}
