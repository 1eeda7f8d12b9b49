//! Spatiotemporal Modulator: token shifts, bidirectional WKV attention over
//! interleaved spatial/motion sequences, and the Spatial Mix / Channel Mix
//! blocks that refine the two streams.
//!
//! Token grids are [F,H,W,C]. The flattened base order is frame-major, then
//! row-major within each frame; scan plans reorder that base sequence and
//! pair each spatial token with its motion counterpart.

pub mod shift;
pub mod wkv;


pub use shift::{octa_shift, q_shift};
pub use wkv::{bi_wkv, bi_wkv_oracle, WkvImpl};

use crate::tensor::{shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};

/// Which scan traverses each frame's grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scan {
    RowMajor,
    ColMajor,
}

/// How spatial and motion tokens combine into one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arrangement {
    /// (s_0, m_0, s_1, m_1, ...): each spatial token adjacent to its motion cue.
    Interleaved,
    /// (s_0..s_{L-1}, m_0..m_{L-1}): block concatenation, ablation only.
    Sequential,
}

/// Token shift flavor used throughout a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    Octa,
    Q,
}

/// Order of the two cascaded WKV passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    RowThenCol,
    ColThenRow,
}

/// Grid geometry of one token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridDims {
    pub fn tokens(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn from_shape(op: &'static str, shape: &[usize]) -> Result<GridDims> {
        if shape.len() != 4 {
            return Err(shape_err(op, format!("expected [F,H,W,C], got {:?}", shape)));
        }
        Ok(GridDims { frames: shape[0], h: shape[1], w: shape[2], c: shape[3] })
    }
}

/// Visit order of the base sequence for one scan: `base[p]` is the storage
/// index of the p-th visited token. Row-major is the identity; column-major
/// walks each frame column by column.
fn scan_base(dims: GridDims, scan: Scan) -> Vec<usize> {
    let (f, h, w) = (dims.frames, dims.h, dims.w);
    match scan {
        Scan::RowMajor => (0..f * h * w).collect(),
        Scan::ColMajor => {
            let mut base = Vec::with_capacity(f * h * w);
            for fr in 0..f {
                for x in 0..w {
                    for y in 0..h {
                        base.push((fr * h + y) * w + x);
                    }
                }
            }
            base
        }
    }
}

/// Precomputed row permutations for one (scan, arrangement) pair.
///
/// `forward` maps combined-sequence position -> source row in the stacked
/// [2L,C] (spatial rows first, then motion rows); `spatial_rows` /
/// `motion_rows` invert it exactly.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    pub forward: Vec<usize>,
    pub spatial_rows: Vec<usize>,
    pub motion_rows: Vec<usize>,
}

impl ScanPlan {
    pub fn new(dims: GridDims, scan: Scan, arrangement: Arrangement) -> ScanPlan {
        let l = dims.tokens();
        let base = scan_base(dims, scan);
        let mut forward = vec![0usize; 2 * l];
        let mut spatial_rows = vec![0usize; l];
        let mut motion_rows = vec![0usize; l];
        for (p, &src) in base.iter().enumerate() {
            let (spos, mpos) = match arrangement {
                Arrangement::Interleaved => (2 * p, 2 * p + 1),
                Arrangement::Sequential => (p, l + p),
            };
            forward[spos] = src;
            forward[mpos] = l + src;
            spatial_rows[src] = spos;
            motion_rows[src] = mpos;
        }
        ScanPlan { forward, spatial_rows, motion_rows }
    }
}

// ---------------------------------------------------------------------------
// row gather op
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct TakeRowsOp {
    rows: Vec<usize>,
    src_rows: usize,
    cols: usize,
}

impl TapeOp for TakeRowsOp {
    fn name(&self) -> &'static str {
        "take_rows"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let c = self.cols;
        let mut dx = vec![0.0; self.src_rows * c];
        for (dst, &src) in self.rows.iter().enumerate() {
            for j in 0..c {
                dx[src * c + j] += g[dst * c + j];
            }
        }
        ctx.add_grad(x, &dx);
    }
}

/// Gather rows of a [R,C] tensor in the given order.
pub fn take_rows(tape: &mut Tape, x: TensorId, rows: &[usize]) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(shape_err("take_rows", format!("expected [R,C], got {:?}", s)));
    }
    let (r, c) = (s[0], s[1]);
    if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
        return Err(shape_err("take_rows", format!("row {} out of {} rows", bad, r)));
    }
    let d = tape.data(x);
    let mut out = Vec::with_capacity(rows.len() * c);
    for &src in rows {
        out.extend_from_slice(&d[src * c..(src + 1) * c]);
    }
    Ok(tape.push_op(
        out,
        vec![rows.len(), c],
        vec![x],
        Box::new(TakeRowsOp { rows: rows.to_vec(), src_rows: r, cols: c }),
    ))
}

fn stack_streams(tape: &mut Tape, spatial: TensorId, motion: TensorId) -> Result<TensorId> {
    tape.check_same_shape("arrange", spatial, motion)?;
    let s = tape.shape(spatial).to_vec();
    let stacked = tape.stack(&[spatial, motion])?;
    tape.reshape(stacked, vec![2 * s[0], s[1]])
}

/// Combine two [L,C] streams into one [2L,C] sequence under a scan plan.
pub fn arrange(tape: &mut Tape, spatial: TensorId, motion: TensorId, plan: &ScanPlan) -> Result<TensorId> {
    let both = stack_streams(tape, spatial, motion)?;
    take_rows(tape, both, &plan.forward)
}

/// Split a combined [2L,C] sequence back into (spatial, motion) streams.
pub fn disarrange(tape: &mut Tape, combined: TensorId, plan: &ScanPlan) -> Result<(TensorId, TensorId)> {
    let s = take_rows(tape, combined, &plan.spatial_rows)?;
    let m = take_rows(tape, combined, &plan.motion_rows)?;
    Ok((s, m))
}

/// Interleave spatial and motion tokens ((s_j, m_j) adjacent, spatial first)
/// under the given scan; returns the sequence and the plan for inversion.
pub fn interleave(
    tape: &mut Tape,
    spatial: TensorId,
    motion: TensorId,
    dims: GridDims,
    scan: Scan,
) -> Result<(TensorId, ScanPlan)> {
    let plan = ScanPlan::new(dims, scan, Arrangement::Interleaved);
    let seq = arrange(tape, spatial, motion, &plan)?;
    Ok((seq, plan))
}

/// Block concatenation [s_0..s_{L-1}, m_0..m_{L-1}]; ablation alternative.
pub fn sequential_arrange(
    tape: &mut Tape,
    spatial: TensorId,
    motion: TensorId,
    dims: GridDims,
    scan: Scan,
) -> Result<(TensorId, ScanPlan)> {
    let plan = ScanPlan::new(dims, scan, Arrangement::Sequential);
    let seq = arrange(tape, spatial, motion, &plan)?;
    Ok((seq, plan))
}

// ---------------------------------------------------------------------------
// block parameters and settings
// ---------------------------------------------------------------------------

/// Fixed (non-learned) knobs of an STM block.
#[derive(Clone, Copy, Debug)]
pub struct StmSettings {
    pub mu_r: f64,
    pub mu_k: f64,
    pub mu_v: f64,
    pub mu_cm: f64,
    pub arrangement: Arrangement,
    pub shift_mode: ShiftMode,
    pub scan_order: ScanOrder,
    pub wkv_impl: WkvImpl,
    pub ln_eps: f64,
}

impl Default for StmSettings {
    fn default() -> Self {
        StmSettings {
            mu_r: 0.5,
            mu_k: 0.5,
            mu_v: 0.5,
            mu_cm: 0.5,
            arrangement: Arrangement::Interleaved,
            shift_mode: ShiftMode::Octa,
            scan_order: ScanOrder::RowThenCol,
            wkv_impl: WkvImpl::Naive,
            ln_eps: 1e-6,
        }
    }
}

/// Tape bindings of one STM block's learnable tensors.
///
/// Index 0 is the spatial stream, 1 the motion stream. Spatial-mix
/// projections are C×C per stream; channel-mix projections act on the
/// concatenated 2C channels. The two cascaded WKV passes carry separate
/// decay/bonus pairs.
#[derive(Clone, Copy, Debug)]
pub struct StmBlockIds {
    pub sm_ln_gamma: [TensorId; 2],
    pub sm_ln_beta: [TensorId; 2],
    pub sm_w_r: [TensorId; 2],
    pub sm_w_k: [TensorId; 2],
    pub sm_w_v: [TensorId; 2],
    pub sm_w_o: [TensorId; 2],
    pub wkv_w: [TensorId; 2],
    pub wkv_u: [TensorId; 2],
    pub cm_ln_gamma: TensorId,
    pub cm_ln_beta: TensorId,
    pub cm_w_r: TensorId,
    pub cm_w_k: TensorId,
    pub cm_w_v: TensorId,
    pub cm_w_o: TensorId,
}

fn apply_shift(tape: &mut Tape, x: TensorId, mu: f64, mode: ShiftMode) -> Result<TensorId> {
    match mode {
        ShiftMode::Octa => octa_shift(tape, x, mu),
        ShiftMode::Q => q_shift(tape, x, mu),
    }
}

/// Cascaded bidirectional WKV over the combined spatial/motion sequence.
///
/// Keys stay fixed across the cascade; values flow through it: the first
/// scan's output becomes the second scan's values, re-arranged under the
/// complementary order, then split back into the two streams.
pub fn st_wkv(
    tape: &mut Tape,
    k_s: TensorId,
    v_s: TensorId,
    k_m: TensorId,
    v_m: TensorId,
    ids: &StmBlockIds,
    settings: &StmSettings,
    dims: GridDims,
) -> Result<(TensorId, TensorId)> {
    let scans = match settings.scan_order {
        ScanOrder::RowThenCol => [Scan::RowMajor, Scan::ColMajor],
        ScanOrder::ColThenRow => [Scan::ColMajor, Scan::RowMajor],
    };
    let mut values = (v_s, v_m);
    for (pass, &scan) in scans.iter().enumerate() {
        let plan = ScanPlan::new(dims, scan, settings.arrangement);
        let k_seq = arrange(tape, k_s, k_m, &plan)?;
        let v_seq = arrange(tape, values.0, values.1, &plan)?;
        let y = bi_wkv(tape, k_seq, v_seq, ids.wkv_w[pass], ids.wkv_u[pass], settings.wkv_impl)?;
        values = disarrange(tape, y, &plan)?;
    }
    Ok(values)
}

/// Dual-stream Spatial Mix: shift, project to R/K/V, jointly aggregate with
/// ST-WKV, gate with the receptance and add the residual.
pub fn spatial_mix(
    tape: &mut Tape,
    x_s: TensorId,
    x_m: TensorId,
    ids: &StmBlockIds,
    settings: &StmSettings,
) -> Result<(TensorId, TensorId)> {
    tape.check_same_shape("spatial_mix", x_s, x_m)?;
    let dims = GridDims::from_shape("spatial_mix", tape.shape(x_s))?;
    let l = dims.tokens();
    let streams = [x_s, x_m];
    let mut receptance = [None, None];
    let mut keys = [None, None];
    let mut vals = [None, None];
    for st in 0..2 {
        let ln = tape.layer_norm(streams[st], ids.sm_ln_gamma[st], ids.sm_ln_beta[st], settings.ln_eps)?;
        let shift_r = apply_shift(tape, ln, settings.mu_r, settings.shift_mode)?;
        let shift_k = apply_shift(tape, ln, settings.mu_k, settings.shift_mode)?;
        let shift_v = apply_shift(tape, ln, settings.mu_v, settings.shift_mode)?;
        receptance[st] = Some(tape.linear(shift_r, ids.sm_w_r[st])?);
        let k = tape.linear(shift_k, ids.sm_w_k[st])?;
        let v = tape.linear(shift_v, ids.sm_w_v[st])?;
        keys[st] = Some(tape.reshape(k, vec![l, dims.c])?);
        vals[st] = Some(tape.reshape(v, vec![l, dims.c])?);
    }
    let (wkv_s, wkv_m) = st_wkv(
        tape,
        keys[0].unwrap(),
        vals[0].unwrap(),
        keys[1].unwrap(),
        vals[1].unwrap(),
        ids,
        settings,
        dims,
    )?;
    let grid_shape = vec![dims.frames, dims.h, dims.w, dims.c];
    let wkv = [wkv_s, wkv_m];
    let mut out = [None, None];
    for st in 0..2 {
        let wkv_grid = tape.reshape(wkv[st], grid_shape.clone())?;
        let gate = tape.sigmoid(receptance[st].unwrap());
        let gated = tape.mul(gate, wkv_grid)?;
        let proj = tape.linear(gated, ids.sm_w_o[st])?;
        out[st] = Some(tape.add(proj, streams[st])?);
    }
    Ok((out[0].unwrap(), out[1].unwrap()))
}

/// Unified Channel Mix over the concatenated streams: shift, squared-ReLU
/// channel interactions, receptance gate, residual, then split back.
pub fn channel_mix(
    tape: &mut Tape,
    y_s: TensorId,
    y_m: TensorId,
    ids: &StmBlockIds,
    settings: &StmSettings,
) -> Result<(TensorId, TensorId)> {
    tape.check_same_shape("channel_mix", y_s, y_m)?;
    let cat = tape.concat_last(y_s, y_m)?;
    let ln = tape.layer_norm(cat, ids.cm_ln_gamma, ids.cm_ln_beta, settings.ln_eps)?;
    let shifted = apply_shift(tape, ln, settings.mu_cm, settings.shift_mode)?;
    let r = tape.linear(shifted, ids.cm_w_r)?;
    let k = tape.linear(shifted, ids.cm_w_k)?;
    let k_act = tape.relu_squared(k);
    let v = tape.linear(k_act, ids.cm_w_v)?;
    let gate = tape.sigmoid(r);
    let gated = tape.mul(gate, v)?;
    let proj = tape.linear(gated, ids.cm_w_o)?;
    let out = tape.add(proj, cat)?;
    tape.split_last_half(out)
}

/// One full modulator block: Spatial Mix followed by Channel Mix.
pub fn stm_block(
    tape: &mut Tape,
    x_s: TensorId,
    x_m: TensorId,
    ids: &StmBlockIds,
    settings: &StmSettings,
) -> Result<(TensorId, TensorId)> {
    let (y_s, y_m) = spatial_mix(tape, x_s, x_m, ids, settings)?;
    channel_mix(tape, y_s, y_m, ids, settings)
}
