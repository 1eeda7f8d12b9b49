//! Full model assembly: the adapted backbone plus, in the second stage, a
//! motion prompt encoder and spatiotemporal modulator at every stage.
//!
//! Parameter layout (checkpoint entry names):
//!   backbone.stage{s}.conv{b}.w, backbone.embed.w
//!   lora.stage{s}.conv{b}.A / .B          (stage-1 training only; merged away)
//!   mpe.stage{s}.{reduce,dw_large,dw_small,temporal_agg}
//!   stm.stage{s}.{s,m}.{ln_gamma,ln_beta,w_r,w_k,w_v,w_o}
//!   stm.stage{s}.wkv{0,1}.{w,u}
//!   stm.stage{s}.cm.{ln_gamma,ln_beta,w_r,w_k,w_v,w_o}
//!   stm.stage{s}.m_proj                   (motion channels -> stream width)
//!
//! Motion alignment: fused motion map f describes the transition from frame
//! f to f+1 and is paired with frame f; the last frame reuses the final map
//! so every spatial token has a motion counterpart.

use crate::backbone::{
    backbone_stages_forward, check_frame_shape, embed_from_last_stage, init_backbone_params,
    init_lora_params, lora_param_count, merge_lora_into_params, BackboneConfig, BackboneMode,
};
use crate::checkpoint::Checkpoint;
use crate::event::EventFrameSequence;
use crate::mpe::{bind_mpe, init_mpe_params, mpe_sequence, MpeConfig};
use crate::params::{ParamSet, TapeBinding};
use crate::rng::Rng;
use crate::stm::{stm_block, StmBlockIds, StmSettings};
use crate::tensor::{Result, Tape, TensorError, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub frames: usize,
    pub lora_rank: usize,
    /// Adapted layers; empty means every convolution whose input width
    /// exceeds the rank (the rank must stay strictly below it).
    pub lora_targets: Vec<String>,
    pub mpe_kernel_large: usize,
    pub mpe_kernel_small: usize,
    pub stm: StmSettings,
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::default(),
            frames: 4,
            lora_rank: 6,
            lora_targets: Vec::new(),
            mpe_kernel_large: 7,
            mpe_kernel_small: 3,
            stm: StmSettings::default(),
        }
    }

    pub fn resolved_lora_targets(&self) -> Vec<String> {
        if !self.lora_targets.is_empty() {
            return self.lora_targets.clone();
        }
        let mut targets = Vec::new();
        for (s, &c_out) in self.backbone.stage_channels.iter().enumerate() {
            for b in 0..self.backbone.blocks_per_stage {
                let c_in = if b == 0 {
                    if s == 0 { self.backbone.in_channels } else { self.backbone.stage_channels[s - 1] }
                } else {
                    c_out
                };
                if c_in > self.lora_rank {
                    targets.push(format!("stage{s}.conv{b}"));
                }
            }
        }
        targets
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.backbone.validate()?;
        if self.frames < 2 {
            return Err("need at least 2 frames for temporal modeling".into());
        }
        if self.lora_rank == 0 {
            return Err("lora rank must be >= 1".into());
        }
        if self.resolved_lora_targets().is_empty() {
            return Err("no convolution is eligible for adaptation at this rank".into());
        }
        for &c in &self.backbone.stage_channels {
            MpeConfig::for_stage(c, self.mpe_kernel_large, self.mpe_kernel_small, self.frames)
                .validate()?;
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub stage: TrainStage,
}

fn stm_names(stage: usize) -> Vec<(String, &'static str)> {
    let mut names = Vec::new();
    for stream in ["s", "m"] {
        for field in ["ln_gamma", "ln_beta", "w_r", "w_k", "w_v", "w_o"] {
            names.push((format!("stm.stage{stage}.{stream}.{field}"), field));
        }
    }
    for pass in 0..2 {
        names.push((format!("stm.stage{stage}.wkv{pass}.w"), "wkv_w"));
        names.push((format!("stm.stage{stage}.wkv{pass}.u"), "wkv_u"));
    }
    for field in ["ln_gamma", "ln_beta", "w_r", "w_k", "w_v", "w_o"] {
        names.push((format!("stm.stage{stage}.cm.{field}"), field));
    }
    names.push((format!("stm.stage{stage}.m_proj"), "m_proj"));
    names
}

impl Model {
    /// Fresh model with randomly initialized backbone weights, everything
    /// trainable (the emulated-pretraining configuration).
    pub fn new(cfg: ModelConfig, seed_rng: &mut Rng) -> std::result::Result<Model, String> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        init_backbone_params(&cfg.backbone, &mut seed_rng.fork("backbone"), &mut params);
        Ok(Model { cfg, params, stage: TrainStage::Pretrain })
    }

    pub fn has_lora(&self) -> bool {
        self.params.iter().any(|p| p.name.starts_with("lora."))
    }

    pub fn has_temporal(&self) -> bool {
        self.params.iter().any(|p| p.name.starts_with("stm."))
    }

    pub fn attach_lora(&mut self, rng: &mut Rng) -> std::result::Result<(), String> {
        let targets = self.cfg.resolved_lora_targets();
        init_lora_params(
            &self.cfg.backbone,
            self.cfg.lora_rank,
            &targets,
            &mut rng.fork("lora"),
            &mut self.params,
        )
    }

    /// Fold adapters into the base weights; afterwards no `lora.` entries
    /// remain and the plain forward equals the adapted one.
    pub fn merge_lora(&mut self) {
        let targets = self.cfg.resolved_lora_targets();
        merge_lora_into_params(&mut self.params, &targets);
    }

    /// Register MPE + STM parameters for every backbone stage.
    pub fn attach_temporal(&mut self, rng: &mut Rng) {
        let mut rng = rng.fork("temporal");
        for (s, &c) in self.cfg.backbone.stage_channels.iter().enumerate().collect::<Vec<_>>() {
            let mpe_cfg =
                MpeConfig::for_stage(c, self.cfg.mpe_kernel_large, self.cfg.mpe_kernel_small, self.cfg.frames);
            init_mpe_params(&mpe_cfg, s, &mut rng.fork(&format!("mpe{s}")), &mut self.params);
            let mut srng = rng.fork(&format!("stm{s}"));
            for (name, field) in stm_names(s) {
                let (shape, data): (Vec<usize>, Vec<f64>) = match field {
                    "ln_gamma" => {
                        let n = if name.contains(".cm.") { 2 * c } else { c };
                        (vec![n], vec![1.0; n])
                    }
                    "ln_beta" => {
                        let n = if name.contains(".cm.") { 2 * c } else { c };
                        (vec![n], vec![0.0; n])
                    }
                    "w_r" | "w_k" | "w_v" => {
                        let n = if name.contains(".cm.") { 2 * c } else { c };
                        let mut d = vec![0.0; n * n];
                        srng.fill_normal(&mut d, (1.0 / n as f64).sqrt());
                        (vec![n, n], d)
                    }
                    // zero output projections: each block starts as the
                    // identity so stage-2 training departs from the merged
                    // stage-1 function continuously
                    "w_o" => {
                        let n = if name.contains(".cm.") { 2 * c } else { c };
                        (vec![n, n], vec![0.0; n * n])
                    }
                    "wkv_w" => {
                        let mut d = vec![0.0; c];
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = 0.3 + (1.3 - 0.3) * i as f64 / (c.max(2) - 1) as f64;
                        }
                        (vec![c], d)
                    }
                    "wkv_u" => (vec![c], vec![0.0; c]),
                    "m_proj" => {
                        let cr = c / 2;
                        let mut d = vec![0.0; cr * c];
                        srng.fill_normal(&mut d, (1.0 / cr as f64).sqrt());
                        (vec![cr, c], d)
                    }
                    other => unreachable!("field {other}"),
                };
                self.params.add(&name, shape, data, true);
            }
        }
    }

    /// Apply the per-stage freeze discipline.
    pub fn set_stage(&mut self, stage: TrainStage) {
        self.stage = stage;
        self.params.set_trainable_by(|name| match stage {
            TrainStage::Pretrain => name.starts_with("backbone."),
            TrainStage::Stage1 => name.starts_with("lora."),
            TrainStage::Stage2 => name.starts_with("mpe.") || name.starts_with("stm."),
        });
    }

    pub fn lora_trainable_count(&self) -> usize {
        lora_param_count(&self.cfg.backbone, self.cfg.lora_rank, &self.cfg.resolved_lora_targets())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    /// Rebuild a model from a checkpoint. Adapter and temporal parameter
    /// groups are instantiated according to what the checkpoint carries.
    pub fn from_checkpoint(cfg: ModelConfig, ck: &Checkpoint) -> std::result::Result<Model, String> {
        cfg.validate()?;
        let mut rng = Rng::new(0);
        let mut model = Model::new(cfg, &mut rng)?;
        if ck.has_prefix("lora.") {
            model.attach_lora(&mut rng)?;
        }
        if ck.has_prefix("stm.") {
            model.attach_temporal(&mut rng);
        }
        model.params.load_checkpoint(ck)?;
        Ok(model)
    }

    fn backbone_mode(&self) -> BackboneMode {
        if self.has_lora() { BackboneMode::Lora } else { BackboneMode::Plain }
    }

    /// Whether the temporal modules participate in the forward pass.
    fn temporal_active(&self) -> bool {
        self.has_temporal()
    }

    /// Un-normalized embedding [1,D] of one frame sequence.
    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        frames: &[TensorId],
    ) -> Result<TensorId> {
        if frames.is_empty() {
            return Err(TensorError::Invalid {
                op: "embed_sequence",
                detail: "no frames".into(),
            });
        }
        for &f in frames {
            check_frame_shape(tape, f, &self.cfg.backbone)?;
        }
        let mode = self.backbone_mode();
        let targets = self.cfg.resolved_lora_targets();
        let num_stages = self.cfg.backbone.num_stages();

        if !self.temporal_active() {
            // spatial path: frames independently, averaged embeddings
            let mut acc: Option<TensorId> = None;
            for &f in frames {
                let outs = backbone_stages_forward(tape, f, bind, &self.cfg.backbone, mode, &targets)?;
                let emb = embed_from_last_stage(tape, outs[num_stages - 1], bind)?;
                acc = Some(match acc {
                    None => emb,
                    Some(a) => tape.add(a, emb)?,
                });
            }
            return Ok(tape.scale(acc.unwrap(), 1.0 / frames.len() as f64));
        }

        // spatiotemporal path: refine the per-frame features stage by stage
        let mut current: Vec<TensorId> = frames.to_vec();
        for s in 0..num_stages {
            let mut feats = Vec::with_capacity(current.len());
            for &f in &current {
                let stage_out =
                    run_single_stage(tape, f, bind, &self.cfg.backbone, s, mode, &targets)?;
                feats.push(stage_out);
            }
            current = self.temporal_refine(tape, bind, s, &feats)?;
        }
        let mut acc: Option<TensorId> = None;
        for &f in &current {
            let emb = embed_from_last_stage(tape, f, bind)?;
            acc = Some(match acc {
                None => emb,
                Some(a) => tape.add(a, emb)?,
            });
        }
        Ok(tape.scale(acc.unwrap(), 1.0 / current.len() as f64))
    }

    /// MPE + STM at one stage: returns the refined per-frame feature maps.
    fn temporal_refine(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        stage: usize,
        feats: &[TensorId],
    ) -> Result<Vec<TensorId>> {
        let c = self.cfg.backbone.stage_channels[stage];
        let shape = tape.shape(feats[0]).to_vec(); // [1,C,H,W]
        let (h, w) = (shape[2], shape[3]);
        let frames = feats.len();

        let mpe_ids = bind_mpe(bind, stage);
        let motion_maps = mpe_sequence(tape, feats, &mpe_ids)?;
        let m_proj = bind.id(&format!("stm.stage{stage}.m_proj"));

        // motion grid: project each fused map to the stream width, pair
        // frame f with map min(f, F-2)
        let mut motion_frames = Vec::with_capacity(frames);
        for f in 0..frames {
            let map = motion_maps[f.min(motion_maps.len() - 1)];
            let chw = tape.reshape(map, vec![c / 2, h, w])?;
            let hwc = tape.permute(chw, &[1, 2, 0])?;
            motion_frames.push(tape.linear(hwc, m_proj)?);
        }
        let motion_grid = tape.stack(&motion_frames)?;

        let mut spatial_frames = Vec::with_capacity(frames);
        for &f in feats {
            let chw = tape.reshape(f, vec![c, h, w])?;
            spatial_frames.push(tape.permute(chw, &[1, 2, 0])?);
        }
        let spatial_grid = tape.stack(&spatial_frames)?;

        let ids = bind_stm(bind, stage);
        let (refined_s, _refined_m) = stm_block(tape, spatial_grid, motion_grid, &ids, &self.cfg.stm)?;

        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let hwc = tape.slice_axis0(refined_s, f)?;
            let chw = tape.permute(hwc, &[2, 0, 1])?;
            out.push(tape.reshape(chw, vec![1, c, h, w])?);
        }
        Ok(out)
    }
}

/// One backbone stage (its convolutions plus pooling) for one frame.
fn run_single_stage(
    tape: &mut Tape,
    x: TensorId,
    bind: &TapeBinding,
    cfg: &BackboneConfig,
    stage: usize,
    mode: BackboneMode,
    lora_targets: &[String],
) -> Result<TensorId> {
    use crate::backbone::{backbone_param_name, channel_layer_norm, lora_a_name, lora_b_name, lora_forward};
    let mut cur = x;
    for b in 0..cfg.blocks_per_stage {
        let layer = format!("stage{stage}.conv{b}");
        let w0 = bind.id(&backbone_param_name(&layer));
        let conv = if mode == BackboneMode::Lora && lora_targets.contains(&layer) {
            lora_forward(tape, cur, w0, bind.id(&lora_a_name(&layer)), bind.id(&lora_b_name(&layer)), 1, 1)?
        } else {
            tape.conv2d(cur, w0, 1, 1)?
        };
        cur = tape.relu(conv);
    }
    let pooled = tape.avg_pool2(cur)?;
    channel_layer_norm(
        tape,
        pooled,
        bind.id(&format!("backbone.stage{stage}.ln.g")),
        bind.id(&format!("backbone.stage{stage}.ln.b")),
    )
}

fn bind_stm(bind: &TapeBinding, stage: usize) -> StmBlockIds {
    let id = |suffix: &str| bind.id(&format!("stm.stage{stage}.{suffix}"));
    StmBlockIds {
        sm_ln_gamma: [id("s.ln_gamma"), id("m.ln_gamma")],
        sm_ln_beta: [id("s.ln_beta"), id("m.ln_beta")],
        sm_w_r: [id("s.w_r"), id("m.w_r")],
        sm_w_k: [id("s.w_k"), id("m.w_k")],
        sm_w_v: [id("s.w_v"), id("m.w_v")],
        sm_w_o: [id("s.w_o"), id("m.w_o")],
        wkv_w: [id("wkv0.w"), id("wkv1.w")],
        wkv_u: [id("wkv0.u"), id("wkv1.u")],
        cm_ln_gamma: id("cm.ln_gamma"),
        cm_ln_beta: id("cm.ln_beta"),
        cm_w_r: id("cm.w_r"),
        cm_w_k: id("cm.w_k"),
        cm_w_v: id("cm.w_v"),
        cm_w_o: id("cm.w_o"),
    }
}

/// Convert one H×W×3 frame (channels last, [-1,1]) into the [1,3,H,W]
/// buffer the convolutions consume.
///
/// Values are re-centered by +1 so the empty-window level sits at exactly
/// zero: the convolutions are bias-free, so a zero background contributes
/// nothing to any feature map and pooled embeddings carry event structure
/// only instead of a shared background response.
pub fn frame_to_chw(frame: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * hw * hw];
    for p in 0..hw * hw {
        for ch in 0..3 {
            out[ch * hw * hw + p] = frame[p * 3 + ch] + 1.0;
        }
    }
    out
}

/// Insert a sequence's frames as constant leaves.
pub fn frames_on_tape(tape: &mut Tape, seq: &EventFrameSequence, expect_hw: usize) -> Result<Vec<TensorId>> {
    if seq.hw != expect_hw {
        return Err(TensorError::Shape {
            op: "frames_on_tape",
            detail: format!("sequence is {0}x{0}, model expects {1}x{1}", seq.hw, expect_hw),
        });
    }
    seq.frames
        .iter()
        .map(|f| tape.constant(frame_to_chw(f, seq.hw), vec![1, 3, seq.hw, seq.hw]))
        .collect()
}

/// Unit-norm identity embedding of one sequence (inference path: all
/// parameters bound frozen, nothing recorded for backward).
pub fn extract_embedding(model: &Model, seq: &EventFrameSequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let frozen = {
        let mut ps = model.params.clone();
        ps.set_trainable_by(|_| false);
        ps
    };
    let bind = frozen.insert_on(&mut tape)?;
    let frames = frames_on_tape(&mut tape, seq, model.cfg.backbone.input_hw)?;
    let emb = model.embed_sequence(&mut tape, &bind, &frames)?;
    let unit = tape.l2_normalize_rows(emb)?;
    Ok(tape.data(unit).to_vec())
}
