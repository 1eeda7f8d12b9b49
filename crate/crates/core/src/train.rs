//! Identity training: adaptive-margin softmax head, SGD, and the staged
//! schedule (emulated pretraining, adapter stage, temporal stage).
//!
//! The margin head follows the adaptive-margin formulation: a feature-norm
//! proxy z = clip((|emb| - mu)/(sigma/h), -1, 1) from running norm
//! statistics steers an angular margin g_angle = -m*z and an additive
//! margin g_add = m*z + m on the target logit; the proxy is treated as a
//! constant during differentiation (its stats are running aggregates, not
//! part of the loss graph).

use crate::checkpoint::Checkpoint;
use crate::event::EventFrameSequence;
use crate::model::{frames_on_tape, Model, TrainStage};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{invalid, shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};
use std::fmt;

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    UnmergedAdapters,
    BadCheckpoint(String),
    Config(String),
    Tensor(crate::tensor::TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::UnmergedAdapters => {
                write!(f, "checkpoint still contains adapter entries; merge before stage 2")
            }
            TrainError::BadCheckpoint(d) => write!(f, "checkpoint: {d}"),
            TrainError::Config(d) => write!(f, "config: {d}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

// ---------------------------------------------------------------------------
// adaptive-margin head
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AdaFaceHead {
    pub dim: usize,
    pub num_classes: usize,
    pub margin: f64,
    pub scale: f64,
    pub concentration: f64,
    pub momentum: f64,
    /// [dim, num_classes], columns unit-norm after every step.
    pub weights: Vec<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl AdaFaceHead {
    pub fn new(dim: usize, num_classes: usize, margin: f64, scale: f64, rng: &mut Rng) -> AdaFaceHead {
        let mut weights = vec![0.0; dim * num_classes];
        rng.fill_normal(&mut weights, 1.0);
        let mut head = AdaFaceHead {
            dim,
            num_classes,
            margin,
            scale,
            concentration: 0.333,
            momentum: 0.01,
            weights,
            norm_mean: 20.0,
            norm_std: 100.0,
        };
        head.renormalize_columns();
        head
    }

    pub fn renormalize_columns(&mut self) {
        for k in 0..self.num_classes {
            let mut n = 0.0;
            for d in 0..self.dim {
                let v = self.weights[d * self.num_classes + k];
                n += v * v;
            }
            let n = n.sqrt().max(1e-30);
            for d in 0..self.dim {
                self.weights[d * self.num_classes + k] /= n;
            }
        }
    }

    /// Update running norm statistics from a batch, then return the margin
    /// proxy for each sample.
    fn margin_proxy(&mut self, norms: &[f64], update_stats: bool) -> Vec<f64> {
        let safe: Vec<f64> = norms.iter().map(|n| n.clamp(0.001, 100.0)).collect();
        if update_stats {
            let mean = safe.iter().sum::<f64>() / safe.len() as f64;
            let var = safe.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>()
                / (safe.len() as f64 - 1.0).max(1.0);
            let std = var.sqrt();
            self.norm_mean = mean * self.momentum + (1.0 - self.momentum) * self.norm_mean;
            self.norm_std = std * self.momentum + (1.0 - self.momentum) * self.norm_std;
        }
        safe.iter()
            .map(|n| {
                (self.concentration * (n - self.norm_mean) / (self.norm_std + 1e-3)).clamp(-1.0, 1.0)
            })
            .collect()
    }

    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert("head.weights", vec![self.dim, self.num_classes], self.weights.clone());
        ck.insert("head.norm_stats", vec![2], vec![self.norm_mean, self.norm_std]);
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint) -> std::result::Result<(), String> {
        let w = ck.get("head.weights").ok_or("checkpoint has no head.weights")?;
        if w.dims != [self.dim, self.num_classes] {
            return Err(format!(
                "head.weights dims {:?} do not match [{},{}]",
                w.dims, self.dim, self.num_classes
            ));
        }
        self.weights = w.values.clone();
        let stats = ck.get("head.norm_stats").ok_or("checkpoint has no head.norm_stats")?;
        self.norm_mean = stats.values[0];
        self.norm_std = stats.values[1];
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// margin cross-entropy tape op
// ---------------------------------------------------------------------------

const COS_EPS: f64 = 1e-7;

#[derive(Debug)]
struct MarginCeOp {
    labels: Vec<usize>,
    proxy: Vec<f64>,
    margin: f64,
    scale: f64,
}

struct MarginForward {
    loss: f64,
    /// Per-sample softmax over the margined, scaled logits.
    softmax: Vec<f64>,
    /// d(target logit)/d(target cosine) per sample.
    target_slope: Vec<f64>,
}

fn margin_forward(cosine: &[f64], k: usize, op: &MarginCeOp) -> MarginForward {
    let b = op.labels.len();
    let mut softmax = vec![0.0; b * k];
    let mut target_slope = vec![0.0; b];
    let mut total = 0.0;
    for row in 0..b {
        let y = op.labels[row];
        let z = op.proxy[row];
        let g_angle = -op.margin * z;
        let g_add = op.margin * z + op.margin;
        let c_raw = cosine[row * k + y];
        let c = c_raw.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS);
        let theta = c.acos();
        let theta_m_raw = theta + g_angle;
        let theta_m = theta_m_raw.clamp(COS_EPS, std::f64::consts::PI - COS_EPS);
        let target_logit = op.scale * (theta_m.cos() - g_add);
        // chain rule through acos and the clamps
        target_slope[row] = if c_raw == c && theta_m_raw == theta_m {
            op.scale * theta_m.sin() / (1.0 - c * c).sqrt()
        } else {
            0.0
        };

        let mut logits = vec![0.0; k];
        for j in 0..k {
            logits[j] = if j == y { target_logit } else { op.scale * cosine[row * k + j] };
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..k {
            denom += (logits[j] - m).exp();
        }
        for j in 0..k {
            softmax[row * k + j] = (logits[j] - m).exp() / denom;
        }
        total += m + denom.ln() - logits[y];
    }
    MarginForward { loss: total / b as f64, softmax, target_slope }
}

impl TapeOp for MarginCeOp {
    fn name(&self) -> &'static str {
        "adaface_margin_ce"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let cos_id = ctx.input(0);
        if !ctx.needs_grad(cos_id) {
            return;
        }
        let k = ctx.shape(cos_id)[1];
        let b = self.labels.len();
        let fwd = margin_forward(ctx.data(cos_id), k, self);
        let g = ctx.out_grad()[0] / b as f64;
        let mut dcos = vec![0.0; b * k];
        for row in 0..b {
            let y = self.labels[row];
            for j in 0..k {
                let dlogit = g * (fwd.softmax[row * k + j] - if j == y { 1.0 } else { 0.0 });
                dcos[row * k + j] = dlogit
                    * if j == y { fwd.target_slope[row] } else { self.scale };
            }
        }
        ctx.add_grad(cos_id, &dcos);
    }
}

/// Margin cross-entropy over cosine logits [B,K] with a fixed per-sample
/// margin proxy. Returns the scalar mean loss.
pub fn adaface_margin_ce(
    tape: &mut Tape,
    cosine: TensorId,
    labels: &[usize],
    proxy: &[f64],
    margin: f64,
    scale: f64,
) -> Result<TensorId> {
    let s = tape.shape(cosine).to_vec();
    if s.len() != 2 {
        return Err(shape_err("adaface_margin_ce", format!("cosine must be [B,K], got {:?}", s)));
    }
    let (b, k) = (s[0], s[1]);
    if b == 0 {
        return Err(invalid("adaface_margin_ce", "empty batch".into()));
    }
    if labels.len() != b || proxy.len() != b {
        return Err(invalid(
            "adaface_margin_ce",
            format!("{} labels / {} proxies for batch {}", labels.len(), proxy.len(), b),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid("adaface_margin_ce", format!("label {bad} out of {k} classes")));
    }
    let op = MarginCeOp { labels: labels.to_vec(), proxy: proxy.to_vec(), margin, scale };
    let fwd = margin_forward(tape.data(cosine), k, &op);
    Ok(tape.push_op(vec![fwd.loss], vec![1], vec![cosine], Box::new(op)))
}

/// Full adaptive-margin loss on raw (un-normalized) embeddings [B,D].
/// Norm statistics update from the batch when `update_stats` holds.
pub fn adaface_loss(
    tape: &mut Tape,
    embeddings: TensorId,
    labels: &[usize],
    weights: TensorId,
    head: &mut AdaFaceHead,
    update_stats: bool,
) -> Result<TensorId> {
    let norms = tape.row_norms(embeddings)?;
    if norms.is_empty() {
        return Err(invalid("adaface_loss", "empty batch".into()));
    }
    let proxy = head.margin_proxy(&norms, update_stats);
    let unit = tape.l2_normalize_rows(embeddings)?;
    let cosine = tape.linear(unit, weights)?;
    adaface_margin_ce(tape, cosine, labels, &proxy, head.margin, head.scale)
}

// ---------------------------------------------------------------------------
// optimizer and the phase loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub scale: f64,
    /// Learning-rate multiplier for adapter parameters. Gradients reaching
    /// the adapters are orders of magnitude smaller than the head's (they
    /// pass the frozen normalized stack), so one shared rate cannot serve
    /// both; plain SGD with per-group rates closes the gap.
    pub adapter_lr_boost: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 0.002,
            batch_size: 8,
            epochs: 5,
            margin: 0.5,
            scale: 32.0,
            adapter_lr_boost: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn render_loss_log(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    out
}

/// Plain SGD over every trainable parameter bound on the tape.
fn sgd_step(
    params: &mut ParamSet,
    tape: &Tape,
    bind: &crate::params::TapeBinding,
    lr: f64,
    adapter_boost: f64,
) {
    for (name, id) in bind.iter() {
        if let Some(grad) = tape.grad(id) {
            let rate = if name.starts_with("lora.") { lr * adapter_boost } else { lr };
            let p = params.get_mut(name);
            debug_assert!(p.trainable);
            for (w, g) in p.data.iter_mut().zip(grad.iter()) {
                *w -= rate * g;
            }
        }
    }
}

/// One labeled training sample.
pub struct Sample<'a> {
    pub label: usize,
    pub sequence: &'a EventFrameSequence,
}

/// Run one training phase over the dataset; the model's stage flags decide
/// which parameters move. The head always trains.
pub fn train_phase(
    model: &mut Model,
    head: &mut AdaFaceHead,
    samples: &[Sample<'_>],
    settings: &TrainSettings,
    rng: &mut Rng,
) -> std::result::Result<Vec<LossRow>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(TrainError::Config("batch_size and epochs must be >= 1".into()));
    }
    let hw = model.cfg.backbone.input_hw;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..settings.epochs {
        rng.shuffle(&mut order);
        for (step, batch) in order.chunks(settings.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bind = model.params.insert_on(&mut tape)?;
            let weights_id =
                tape.leaf(head.weights.clone(), vec![head.dim, head.num_classes], true)?;
            let mut embs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &idx in batch {
                let frames = frames_on_tape(&mut tape, samples[idx].sequence, hw)?;
                embs.push(model.embed_sequence(&mut tape, &bind, &frames)?);
                labels.push(samples[idx].label);
            }
            let stacked = tape.stack(&embs)?;
            let emb2d = tape.reshape(stacked, vec![batch.len(), head.dim])?;
            let loss = adaface_loss(&mut tape, emb2d, &labels, weights_id, head, true)?;
            let loss_value = tape.data(loss)[0];
            tape.backward(loss)?;
            sgd_step(&mut model.params, &tape, &bind, settings.lr, settings.adapter_lr_boost);
            if let Some(g) = tape.grad(weights_id) {
                for (w, gv) in head.weights.iter_mut().zip(g.iter()) {
                    *w -= settings.lr * gv;
                }
            }
            head.renormalize_columns();
            log.push(LossRow { epoch, step, loss: loss_value });
        }
    }
    Ok(log)
}

/// Stage I: freeze the backbone, train adapters and head, then fold the
/// adapters into the base weights. The returned checkpoint carries the
/// merged backbone and the head.
pub fn train_stage1(
    model: &mut Model,
    samples: &[Sample<'_>],
    num_classes: usize,
    settings: &TrainSettings,
    rng: &mut Rng,
) -> std::result::Result<(Checkpoint, Vec<LossRow>), TrainError> {
    if !model.has_lora() {
        model.attach_lora(rng).map_err(TrainError::Config)?;
    }
    model.set_stage(TrainStage::Stage1);
    let mut head = AdaFaceHead::new(
        model.cfg.backbone.embed_dim,
        num_classes,
        settings.margin,
        settings.scale,
        &mut rng.fork("stage1-head"),
    );
    let log = train_phase(model, &mut head, samples, settings, &mut rng.fork("stage1-order"))?;
    model.merge_lora();
    let mut ck = model.to_checkpoint();
    head.add_to_checkpoint(&mut ck);
    Ok((ck, log))
}

/// Stage II: rebuild from a merged stage-1 checkpoint, attach the temporal
/// modules, train only them plus the head.
pub fn train_stage2(
    cfg: crate::model::ModelConfig,
    stage1: &Checkpoint,
    samples: &[Sample<'_>],
    num_classes: usize,
    settings: &TrainSettings,
    rng: &mut Rng,
) -> std::result::Result<(Model, Checkpoint, Vec<LossRow>), TrainError> {
    if stage1.has_prefix("lora.") {
        return Err(TrainError::UnmergedAdapters);
    }
    let embed_dim = cfg.backbone.embed_dim;
    let mut model = Model::from_checkpoint(cfg, stage1).map_err(TrainError::BadCheckpoint)?;
    if !model.has_temporal() {
        model.attach_temporal(rng);
    }
    model.set_stage(TrainStage::Stage2);
    let mut head =
        AdaFaceHead::new(embed_dim, num_classes, settings.margin, settings.scale, &mut rng.fork("stage2-head"));
    head.load_from_checkpoint(stage1).map_err(TrainError::BadCheckpoint)?;
    let log = train_phase(&mut model, &mut head, samples, settings, &mut rng.fork("stage2-order"))?;
    let mut ck = model.to_checkpoint();
    head.add_to_checkpoint(&mut ck);
    Ok((model, ck, log))
}

/// Emulated pretraining: train the plain backbone briefly on a dense-frame
/// classification task, then freeze everything.
pub fn pretrain_backbone(
    model: &mut Model,
    samples: &[Sample<'_>],
    num_classes: usize,
    settings: &TrainSettings,
    rng: &mut Rng,
) -> std::result::Result<Vec<LossRow>, TrainError> {
    model.set_stage(TrainStage::Pretrain);
    let mut head = AdaFaceHead::new(
        model.cfg.backbone.embed_dim,
        num_classes,
        settings.margin,
        settings.scale,
        &mut rng.fork("pretrain-head"),
    );
    let log = train_phase(model, &mut head, samples, settings, &mut rng.fork("pretrain-order"))?;
    model.params.set_trainable_by(|_| false);
    Ok(log)
}

#[cfg(test)]
mod tests;
