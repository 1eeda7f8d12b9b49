//! Scratch learning-rate sweep. `cargo run --example lr_probe`.

use eventface_core::data::{make_pretrain_dataset, DataConfig};
use eventface_core::model::{Model, ModelConfig};
use eventface_core::rng::Rng;
use eventface_core::train::{pretrain_backbone, Sample, TrainSettings};

fn main() {
    let dcfg = DataConfig::default();
    let pre = make_pretrain_dataset(&dcfg, 6, 99);
    let samples: Vec<Sample> =
        pre.iter().map(|s| Sample { label: s.identity, sequence: &s.sequence }).collect();
    for lr in [0.002, 0.005, 0.01, 0.03, 0.1, 0.3] {
        let mut root = Rng::new(5);
        let mut model = Model::new(ModelConfig::desk(), &mut root.fork("model")).unwrap();
        let settings = TrainSettings { lr, batch_size: 8, epochs: 8, margin: 0.0, scale: 32.0, adapter_lr_boost: 1.0 };
        let log =
            pretrain_backbone(&mut model, &samples, 6, &settings, &mut root.fork("pre")).unwrap();
        let per_epoch: Vec<f64> = log
            .chunks(12)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        let txt: Vec<String> = per_epoch.iter().map(|l| format!("{l:.2}")).collect();
        println!("lr {lr:>6}: {}", txt.join(" "));
    }
}
