//! Motion Prompt Encoder.
//!
//! For each pair of adjacent frames at the same semantic level, both maps
//! are channel-reduced with a shared 1x1 convolution, the later frame is
//! smoothed with the large depthwise kernel, the earlier with the small
//! one, and the difference is the motion map. All pair maps then pass
//! through a 1x1 aggregation that mixes across the stacked pair axis
//! (pairs folded into channels), restoring one refined map per pair.
//!
//! Every convolution here is bias-free, so zero inputs give zero motion
//! and the pairwise map is homogeneous in its inputs.

use crate::params::{ParamSet, TapeBinding};
use crate::rng::Rng;
use crate::tensor::{invalid, Result, Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct MpeConfig {
    pub channels: usize,
    pub reduced: usize,
    pub kernel_large: usize,
    pub kernel_small: usize,
    pub frames: usize,
}

impl MpeConfig {
    /// Reduction to half the channels; kernels from the run configuration.
    pub fn for_stage(channels: usize, kernel_large: usize, kernel_small: usize, frames: usize) -> Self {
        MpeConfig { channels, reduced: channels / 2, kernel_large, kernel_small, frames }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.kernel_large % 2 == 0 || self.kernel_small % 2 == 0 {
            return Err("motion kernels must be odd".into());
        }
        if self.kernel_large <= self.kernel_small {
            return Err(format!(
                "large kernel {} must exceed small kernel {}",
                self.kernel_large, self.kernel_small
            ));
        }
        if self.reduced == 0 || self.reduced > self.channels {
            return Err("reduced channel count out of range".into());
        }
        if self.frames < 2 {
            return Err("motion extraction needs at least 2 frames".into());
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.frames - 1
    }
}

/// Tape bindings of one stage's MPE parameters.
#[derive(Clone, Copy, Debug)]
pub struct MpeIds {
    pub reduce: TensorId,
    pub dw_large: TensorId,
    pub dw_small: TensorId,
    pub temporal_agg: TensorId,
}

pub fn mpe_param_names(stage: usize) -> [String; 4] {
    [
        format!("mpe.stage{stage}.reduce"),
        format!("mpe.stage{stage}.dw_large"),
        format!("mpe.stage{stage}.dw_small"),
        format!("mpe.stage{stage}.temporal_agg"),
    ]
}

pub fn init_mpe_params(cfg: &MpeConfig, stage: usize, rng: &mut Rng, ps: &mut ParamSet) {
    let [reduce, dw_l, dw_s, agg] = mpe_param_names(stage);
    let (c, cr) = (cfg.channels, cfg.reduced);
    let mut data = vec![0.0; cr * c];
    rng.fill_normal(&mut data, (1.0 / c as f64).sqrt());
    ps.add(&reduce, vec![cr, c, 1, 1], data, true);
    let (kl, ks) = (cfg.kernel_large, cfg.kernel_small);
    let mut data = vec![0.0; cr * kl * kl];
    rng.fill_normal(&mut data, 1.0 / (kl * kl) as f64);
    ps.add(&dw_l, vec![cr, 1, kl, kl], data, true);
    let mut data = vec![0.0; cr * ks * ks];
    rng.fill_normal(&mut data, 1.0 / (ks * ks) as f64);
    ps.add(&dw_s, vec![cr, 1, ks, ks], data, true);
    let pc = cfg.pairs() * cr;
    let mut data = vec![0.0; pc * pc];
    rng.fill_normal(&mut data, (1.0 / pc as f64).sqrt());
    ps.add(&agg, vec![pc, pc, 1, 1], data, true);
}

pub fn bind_mpe(bind: &TapeBinding, stage: usize) -> MpeIds {
    let [reduce, dw_l, dw_s, agg] = mpe_param_names(stage);
    MpeIds {
        reduce: bind.id(&reduce),
        dw_large: bind.id(&dw_l),
        dw_small: bind.id(&dw_s),
        temporal_agg: bind.id(&agg),
    }
}

/// Motion map of one adjacent pair:
/// dw_large(reduce(x_next)) - dw_small(reduce(x_prev)), shapes preserved.
pub fn mpe_pairwise(tape: &mut Tape, x_prev: TensorId, x_next: TensorId, ids: &MpeIds) -> Result<TensorId> {
    tape.check_same_shape("mpe_pairwise", x_prev, x_next)?;
    let r_next = tape.conv2d(x_next, ids.reduce, 1, 0)?;
    let r_prev = tape.conv2d(x_prev, ids.reduce, 1, 0)?;
    let smooth_next = tape.depthwise_conv2d(r_next, ids.dw_large)?;
    let smooth_prev = tape.depthwise_conv2d(r_prev, ids.dw_small)?;
    tape.sub(smooth_next, smooth_prev)
}

/// Motion maps for every adjacent pair, temporally fused: F frames in,
/// F-1 refined motion maps out, each [1,C_r,H,W].
pub fn mpe_sequence(tape: &mut Tape, frames: &[TensorId], ids: &MpeIds) -> Result<Vec<TensorId>> {
    if frames.len() < 2 {
        return Err(invalid(
            "mpe_sequence",
            format!("need at least 2 frames, got {}", frames.len()),
        ));
    }
    let pairs = frames.len() - 1;
    let mut maps = Vec::with_capacity(pairs);
    for f in 0..pairs {
        maps.push(mpe_pairwise(tape, frames[f], frames[f + 1], ids)?);
    }
    let s = tape.shape(maps[0]).to_vec(); // [1, C_r, H, W]
    let (cr, h, w) = (s[1], s[2], s[3]);
    // fold the pair axis into channels, mix with the 1x1 aggregation,
    // then split back into per-pair maps
    let flat: Vec<TensorId> = maps
        .iter()
        .map(|&m| tape.reshape(m, vec![cr, h * w]))
        .collect::<Result<_>>()?;
    let stacked = tape.stack(&flat)?;
    let grouped = tape.reshape(stacked, vec![1, pairs * cr, h, w])?;
    let fused = tape.conv2d(grouped, ids.temporal_agg, 1, 0)?;
    let refolded = tape.reshape(fused, vec![pairs, cr * h * w])?;
    let mut out = Vec::with_capacity(pairs);
    for f in 0..pairs {
        let slice = tape.slice_axis0(refolded, f)?;
        out.push(tape.reshape(slice, vec![1, cr, h, w])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_gradients, weighted_probe, CheckInput};
    use crate::tensor::{conv2d_oracle, depthwise_conv2d_oracle};

    fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut v = vec![0.0; n];
        rng.fill_uniform(&mut v, lo, hi);
        v
    }

    fn test_ids(tape: &mut Tape, cfg: &MpeConfig, rng: &mut Rng) -> MpeIds {
        let mut ps = ParamSet::new();
        init_mpe_params(cfg, 0, rng, &mut ps);
        let bind = ps.insert_on(tape).unwrap();
        bind_mpe(&bind, 0)
    }

    #[test]
    fn zero_inputs_give_zero_motion() {
        let cfg = MpeConfig::for_stage(8, 7, 3, 4);
        cfg.validate().unwrap();
        let mut rng = Rng::new(1);
        let mut t = Tape::new();
        let ids = test_ids(&mut t, &cfg, &mut rng);
        let z = t.leaf(vec![0.0; 8 * 6 * 6], vec![1, 8, 6, 6], false).unwrap();
        let m = mpe_pairwise(&mut t, z, z, &ids).unwrap();
        assert!(t.data(m).iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(m), &[1, 4, 6, 6]);
    }

    #[test]
    fn reference_and_ablation_kernel_pairs_validate() {
        assert!(MpeConfig::for_stage(8, 7, 3, 4).validate().is_ok());
        assert!(MpeConfig::for_stage(8, 5, 3, 4).validate().is_ok());
        assert!(MpeConfig::for_stage(8, 3, 3, 4).validate().is_err());
        assert!(MpeConfig::for_stage(8, 4, 2, 4).validate().is_err());
    }

    #[test]
    fn pairwise_matches_composed_loop_oracles() {
        let cfg = MpeConfig::for_stage(8, 7, 3, 2);
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let ids = test_ids(&mut t, &cfg, &mut rng);
        let xp = random_vec(&mut rng, 8 * 6 * 6, -1.0, 1.0);
        let xn = random_vec(&mut rng, 8 * 6 * 6, -1.0, 1.0);
        let xpi = t.leaf(xp.clone(), vec![1, 8, 6, 6], false).unwrap();
        let xni = t.leaf(xn.clone(), vec![1, 8, 6, 6], false).unwrap();
        let m = mpe_pairwise(&mut t, xpi, xni, &ids).unwrap();

        let reduce = t.data(ids.reduce).to_vec();
        let dwl = t.data(ids.dw_large).to_vec();
        let dws = t.data(ids.dw_small).to_vec();
        let rn = conv2d_oracle(&xn, &[1, 8, 6, 6], &reduce, &[4, 8, 1, 1], 1, 0);
        let rp = conv2d_oracle(&xp, &[1, 8, 6, 6], &reduce, &[4, 8, 1, 1], 1, 0);
        let sn = depthwise_conv2d_oracle(&rn, &[1, 4, 6, 6], &dwl, 7);
        let sp = depthwise_conv2d_oracle(&rp, &[1, 4, 6, 6], &dws, 3);
        let expect: Vec<f64> = sn.iter().zip(sp.iter()).map(|(a, b)| a - b).collect();
        let diff = t
            .data(m)
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn pairwise_is_homogeneous() {
        let cfg = MpeConfig::for_stage(8, 5, 3, 2);
        let mut rng = Rng::new(3);
        let mut t = Tape::new();
        let ids = test_ids(&mut t, &cfg, &mut rng);
        let a = 1.7;
        let xp = random_vec(&mut rng, 8 * 16, -1.0, 1.0);
        let xn = random_vec(&mut rng, 8 * 16, -1.0, 1.0);
        let xpi = t.leaf(xp, vec![1, 8, 4, 4], false).unwrap();
        let xni = t.leaf(xn, vec![1, 8, 4, 4], false).unwrap();
        let m1 = mpe_pairwise(&mut t, xpi, xni, &ids).unwrap();
        let xps = t.scale(xpi, a);
        let xns = t.scale(xni, a);
        let m2 = mpe_pairwise(&mut t, xps, xns, &ids).unwrap();
        let scaled = t.scale(m1, a);
        let diff = t
            .data(m2)
            .iter()
            .zip(t.data(scaled).iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn swapping_kernels_and_operands_negates_motion() {
        let cfg = MpeConfig::for_stage(8, 7, 3, 2);
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let ids = test_ids(&mut t, &cfg, &mut rng);
        let xp = random_vec(&mut rng, 8 * 25, -1.0, 1.0);
        let xn = random_vec(&mut rng, 8 * 25, -1.0, 1.0);
        let xpi = t.leaf(xp, vec![1, 8, 5, 5], false).unwrap();
        let xni = t.leaf(xn, vec![1, 8, 5, 5], false).unwrap();
        let m = mpe_pairwise(&mut t, xpi, xni, &ids).unwrap();
        let swapped_ids = MpeIds { dw_large: ids.dw_small, dw_small: ids.dw_large, ..ids };
        let m_swapped = mpe_pairwise(&mut t, xni, xpi, &swapped_ids).unwrap();
        let neg = t.scale(m, -1.0);
        let diff = t
            .data(m_swapped)
            .iter()
            .zip(t.data(neg).iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn sequence_counts_and_degenerate_cases() {
        let mut rng = Rng::new(5);
        // F=4 gives 3 maps
        let cfg = MpeConfig::for_stage(8, 7, 3, 4);
        let mut t = Tape::new();
        let ids = test_ids(&mut t, &cfg, &mut rng);
        let frames: Vec<TensorId> = (0..4)
            .map(|_| {
                let d = random_vec(&mut rng, 8 * 16, -1.0, 1.0);
                t.leaf(d, vec![1, 8, 4, 4], false).unwrap()
            })
            .collect();
        let maps = mpe_sequence(&mut t, &frames, &ids).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            assert_eq!(t.shape(*m), &[1, 4, 4, 4]);
        }
        // F=2 gives one map
        let cfg2 = MpeConfig::for_stage(8, 7, 3, 2);
        let mut t2 = Tape::new();
        let ids2 = test_ids(&mut t2, &cfg2, &mut rng);
        let two: Vec<TensorId> = frames[..2]
            .iter()
            .map(|&f| t2.leaf(t.data(f).to_vec(), vec![1, 8, 4, 4], false).unwrap())
            .collect();
        assert_eq!(mpe_sequence(&mut t2, &two, &ids2).unwrap().len(), 1);
        // F=1 is an error
        assert!(mpe_sequence(&mut t2, &two[..1], &ids2).is_err());
    }

    #[test]
    fn identical_frames_with_equal_kernels_give_zero_maps() {
        let cfg = MpeConfig::for_stage(8, 7, 3, 3);
        let mut rng = Rng::new(6);
        let mut t = Tape::new();
        let mut ids = test_ids(&mut t, &cfg, &mut rng);
        // force dw_large == dw_small by reusing one 7x7 kernel, the small
        // kernel padded with a zero ring so both convolutions agree
        let dwl = t.data(ids.dw_large).to_vec();
        let mut small_in_large = vec![0.0; dwl.len()];
        for c in 0..4 {
            for u in 0..3 {
                for v in 0..3 {
                    small_in_large[(c * 7 + u + 2) * 7 + v + 2] = t.data(ids.dw_small)[(c * 3 + u) * 3 + v];
                }
            }
        }
        let padded = t.leaf(small_in_large, vec![4, 1, 7, 7], false).unwrap();
        ids.dw_large = padded;
        let frame = random_vec(&mut rng, 8 * 36, -1.0, 1.0);
        let f = t.leaf(frame, vec![1, 8, 6, 6], false).unwrap();
        let maps = mpe_sequence(&mut t, &[f, f, f], &ids).unwrap();
        for m in maps {
            assert!(t.data(m).iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn grad_mpe_sequence() {
        let cfg = MpeConfig::for_stage(8, 5, 3, 3);
        let mut rng = Rng::new(7);
        let mut ps = ParamSet::new();
        init_mpe_params(&cfg, 0, &mut rng, &mut ps);
        let mut inputs: Vec<CheckInput> = (0..3)
            .map(|_| CheckInput::random(&[1, 8, 4, 4], &mut rng, -1.0, 1.0))
            .collect();
        for p in ps.iter() {
            inputs.push(CheckInput { shape: p.shape.clone(), data: p.data.clone() });
        }
        let mut probe = Rng::new(8);
        let rep = check_gradients(&inputs, 1e-5, &mut |t, ids| {
            let mpe_ids = MpeIds { reduce: ids[3], dw_large: ids[4], dw_small: ids[5], temporal_agg: ids[6] };
            let maps = mpe_sequence(t, &ids[..3], &mpe_ids)?;
            let cat = t.stack(&maps)?;
            weighted_probe(t, cat, &mut probe.fork("m"))
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
