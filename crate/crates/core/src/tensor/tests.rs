use super::*;
use crate::oracle::{check_gradients, weighted_probe, CheckInput};
use crate::rng::Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------- conv2d

#[test]
fn conv2d_scalar_weight_scales_input() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0; 9], vec![1, 1, 3, 3], false).unwrap();
    let w = t.leaf(vec![2.0], vec![1, 1, 1, 1], false).unwrap();
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert!(t.data(y).iter().all(|&v| v == 2.0));
}

#[test]
fn conv2d_zero_weight_gives_zero_output() {
    let mut t = Tape::new();
    let mut rng = Rng::new(11);
    let mut xd = vec![0.0; 2 * 3 * 4 * 4];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    let x = t.leaf(xd, vec![2, 3, 4, 4], false).unwrap();
    let w = t.leaf(vec![0.0; 5 * 3 * 3 * 3], vec![5, 3, 3, 3], false).unwrap();
    let y = t.conv2d(x, w, 1, 1).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = Rng::new(21);
    let mut xd = vec![0.0; 2 * 5 * 5];
    let mut wd = vec![0.0; 3 * 2 * 3 * 3];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    rng.fill_uniform(&mut wd, -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.leaf(xd.clone(), vec![1, 2, 5, 5], false).unwrap();
    let w = t.leaf(wd.clone(), vec![3, 2, 3, 3], false).unwrap();
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        if (5 + 2 * pad - 3) % stride != 0 {
            continue;
        }
        let y = t.conv2d(x, w, stride, pad).unwrap();
        let oracle = conv2d_oracle(&xd, &[1, 2, 5, 5], &wd, &[3, 2, 3, 3], stride, pad);
        assert!(max_abs_diff(t.data(y), &oracle) <= 1e-12);
    }
}

#[test]
fn conv2d_is_linear_in_input() {
    let mut rng = Rng::new(22);
    let (a, b) = (0.7, -1.3);
    let mut xd = vec![0.0; 32];
    let mut yd = vec![0.0; 32];
    let mut wd = vec![0.0; 2 * 2 * 3 * 3];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    rng.fill_uniform(&mut yd, -1.0, 1.0);
    rng.fill_uniform(&mut wd, -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.leaf(xd.clone(), vec![1, 2, 4, 4], false).unwrap();
    let y = t.leaf(yd.clone(), vec![1, 2, 4, 4], false).unwrap();
    let w = t.leaf(wd, vec![2, 2, 3, 3], false).unwrap();
    let xa = t.scale(x, a);
    let yb = t.scale(y, b);
    let mix = t.add(xa, yb).unwrap();
    let lhs = t.conv2d(mix, w, 1, 1).unwrap();
    let cx = t.conv2d(x, w, 1, 1).unwrap();
    let cy = t.conv2d(y, w, 1, 1).unwrap();
    let cxa = t.scale(cx, a);
    let cyb = t.scale(cy, b);
    let rhs = t.add(cxa, cyb).unwrap();
    assert!(max_abs_diff(t.data(lhs), t.data(rhs)) <= 1e-10);
}

#[test]
fn conv2d_rejects_channel_mismatch_naming_axis() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 16], vec![1, 4, 2, 2], false).unwrap();
    let w = t.leaf(vec![0.0; 3], vec![1, 3, 1, 1], false).unwrap();
    let err = t.conv2d(x, w, 1, 0).unwrap_err();
    match err {
        TensorError::Shape { op, detail } => {
            assert_eq!(op, "conv2d");
            assert!(detail.contains("axis 1"), "{detail}");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn conv2d_rejects_non_integer_output_extent() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 16], vec![1, 1, 4, 4], false).unwrap();
    let w = t.leaf(vec![0.0; 9], vec![1, 1, 3, 3], false).unwrap();
    assert!(matches!(t.conv2d(x, w, 2, 1), Err(TensorError::Shape { .. })));
}

// ---------------------------------------------------------- depthwise

#[test]
fn depthwise_identity_kernel_is_identity() {
    let mut rng = Rng::new(31);
    let mut xd = vec![0.0; 3 * 5 * 5];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    let mut w = vec![0.0; 3 * 9];
    for c in 0..3 {
        w[c * 9 + 4] = 1.0; // center tap
    }
    let mut t = Tape::new();
    let x = t.leaf(xd.clone(), vec![1, 3, 5, 5], false).unwrap();
    let wt = t.leaf(w, vec![3, 1, 3, 3], false).unwrap();
    let y = t.depthwise_conv2d(x, wt).unwrap();
    assert_eq!(t.data(y), xd.as_slice());
}

#[test]
fn depthwise_zero_input_zero_output() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 2 * 4 * 4], vec![1, 2, 4, 4], false).unwrap();
    let w = t.leaf(vec![1.0; 2 * 25], vec![2, 1, 5, 5], false).unwrap();
    let y = t.depthwise_conv2d(x, w).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn depthwise_matches_loop_oracle_k7() {
    let mut rng = Rng::new(32);
    let mut xd = vec![0.0; 4 * 6 * 6];
    let mut wd = vec![0.0; 4 * 49];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    rng.fill_uniform(&mut wd, -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.leaf(xd.clone(), vec![1, 4, 6, 6], false).unwrap();
    let w = t.leaf(wd.clone(), vec![4, 1, 7, 7], false).unwrap();
    let y = t.depthwise_conv2d(x, w).unwrap();
    let oracle = depthwise_conv2d_oracle(&xd, &[1, 4, 6, 6], &wd, 7);
    assert!(max_abs_diff(t.data(y), &oracle) <= 1e-12);
}

#[test]
fn depthwise_rejects_even_kernel() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 16], vec![1, 1, 4, 4], false).unwrap();
    let w = t.leaf(vec![0.0; 16], vec![1, 1, 4, 4], false).unwrap();
    assert!(matches!(t.depthwise_conv2d(x, w), Err(TensorError::Invalid { .. })));
}

#[test]
fn depthwise_output_channel_depends_only_on_same_input_channel() {
    // perturb channel 0, check channel 1 output unchanged
    let mut rng = Rng::new(33);
    let mut xd = vec![0.0; 2 * 4 * 4];
    let mut wd = vec![0.0; 2 * 9];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    rng.fill_uniform(&mut wd, -1.0, 1.0);
    let run = |xd: &[f64], wd: &[f64]| {
        let mut t = Tape::new();
        let x = t.leaf(xd.to_vec(), vec![1, 2, 4, 4], false).unwrap();
        let w = t.leaf(wd.to_vec(), vec![2, 1, 3, 3], false).unwrap();
        let y = t.depthwise_conv2d(x, w).unwrap();
        t.data(y).to_vec()
    };
    let base = run(&xd, &wd);
    xd[3] += 10.0;
    let moved = run(&xd, &wd);
    assert_eq!(base[16..32], moved[16..32], "channel 1 must be unaffected");
    assert_ne!(base[..16], moved[..16]);
}

// ---------------------------------------------------------- linear

#[test]
fn linear_identity_weight() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], false).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = t.leaf(eye, vec![3, 3], false).unwrap();
    let y = t.linear(x, w).unwrap();
    assert_eq!(t.data(y), t.data(x));
}

#[test]
fn linear_hand_arithmetic() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
    let w = t.leaf(vec![3.0, 4.0], vec![2, 1], false).unwrap();
    let y = t.linear(x, w).unwrap();
    assert_eq!(t.data(y), &[11.0]);
}

#[test]
fn linear_matches_loop_oracle() {
    let mut rng = Rng::new(41);
    let mut xd = vec![0.0; 5 * 8];
    let mut wd = vec![0.0; 8 * 4];
    rng.fill_uniform(&mut xd, -1.0, 1.0);
    rng.fill_uniform(&mut wd, -1.0, 1.0);
    let mut oracle = vec![0.0; 5 * 4];
    for r in 0..5 {
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..8 {
                s += xd[r * 8 + i] * wd[i * 4 + j];
            }
            oracle[r * 4 + j] = s;
        }
    }
    let mut t = Tape::new();
    let x = t.leaf(xd, vec![5, 8], false).unwrap();
    let w = t.leaf(wd, vec![8, 4], false).unwrap();
    let y = t.linear(x, w).unwrap();
    assert!(max_abs_diff(t.data(y), &oracle) <= 1e-12);
}

#[test]
fn linear_rejects_dim_mismatch() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
    let w = t.leaf(vec![0.0; 8], vec![4, 2], false).unwrap();
    assert!(matches!(t.linear(x, w), Err(TensorError::Shape { .. })));
}

// ---------------------------------------------------------- layer_norm

#[test]
fn layer_norm_constant_token_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(vec![5.0; 4], vec![1, 4], false).unwrap();
    let g = t.leaf(vec![1.0; 4], vec![4], false).unwrap();
    let b = t.leaf(vec![0.0; 4], vec![4], false).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(t.data(y).iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_zero_gamma_returns_beta() {
    let mut rng = Rng::new(51);
    let mut xd = vec![0.0; 12];
    rng.fill_uniform(&mut xd, -2.0, 2.0);
    let mut t = Tape::new();
    let x = t.leaf(xd, vec![3, 4], false).unwrap();
    let g = t.leaf(vec![0.0; 4], vec![4], false).unwrap();
    let b = t.leaf(vec![0.5, -0.5, 1.5, 0.0], vec![4], false).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(&t.data(y)[r * 4..(r + 1) * 4], &[0.5, -0.5, 1.5, 0.0]);
    }
}

#[test]
fn layer_norm_standardizes_random_token() {
    let mut rng = Rng::new(52);
    let c = 16;
    let mut xd = vec![0.0; c];
    rng.fill_uniform(&mut xd, -3.0, 3.0);
    let mut t = Tape::new();
    let x = t.leaf(xd, vec![1, c], false).unwrap();
    let g = t.leaf(vec![1.0; c], vec![c], false).unwrap();
    let b = t.leaf(vec![0.0; c], vec![c], false).unwrap();
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    let out = t.data(y);
    let mean = out.iter().sum::<f64>() / c as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    assert!(mean.abs() <= 1e-12, "mean {mean}");
    assert!((var - 1.0).abs() <= 1e-6, "var {var}");
}

// ---------------------------------------------------------- elementwise suite

#[test]
fn sigmoid_at_zero_is_half() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0], vec![1], false).unwrap();
    let y = t.sigmoid(x);
    assert_eq!(t.data(y), &[0.5]);
}

#[test]
fn relu_squared_values() {
    let mut t = Tape::new();
    let x = t.leaf(vec![-3.0, 2.0], vec![2], false).unwrap();
    let y = t.relu_squared(x);
    assert_eq!(t.data(y), &[0.0, 4.0]);
}

#[test]
fn concat_then_split_roundtrips_bitwise() {
    let mut rng = Rng::new(61);
    let mut ad = vec![0.0; 3 * 4];
    let mut bd = vec![0.0; 3 * 4];
    rng.fill_uniform(&mut ad, -1.0, 1.0);
    rng.fill_uniform(&mut bd, -1.0, 1.0);
    let mut t = Tape::new();
    let a = t.leaf(ad.clone(), vec![3, 4], false).unwrap();
    let b = t.leaf(bd.clone(), vec![3, 4], false).unwrap();
    let cat = t.concat_last(a, b).unwrap();
    let (a2, b2) = t.split_last_half(cat).unwrap();
    assert_eq!(t.data(a2), ad.as_slice());
    assert_eq!(t.data(b2), bd.as_slice());
}

#[test]
fn concat_requires_equal_leading_dims() {
    let mut t = Tape::new();
    let a = t.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
    let b = t.leaf(vec![0.0; 9], vec![3, 3], false).unwrap();
    assert!(matches!(t.concat_last(a, b), Err(TensorError::Shape { .. })));
}

// ---------------------------------------------------------- backward

#[test]
fn backward_sum_gives_ones() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, -2.0, 3.0], vec![3], true).unwrap();
    let loss = t.sum_all(x);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares_gives_two_x() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, -2.0, 3.0], vec![3], true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 1.0], vec![2], true).unwrap();
    let loss = t.sum_all(x);
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    t.zero_grads();
    assert!(t.grad(x).is_none());
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    assert!(matches!(t.backward(x), Err(TensorError::Invalid { .. })));
}

#[test]
fn frozen_leaf_never_receives_grad() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let w = t.leaf(vec![3.0, 4.0], vec![2], false).unwrap();
    let p = t.mul(x, w).unwrap();
    let loss = t.sum_all(p);
    t.backward(loss).unwrap();
    assert!(t.grad(w).is_none());
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
}

// ---------------------------------------------------------- gradient property suite

fn grad_check_op(
    seed: u64,
    shapes: &[Vec<usize>],
    lo: f64,
    hi: f64,
    build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
) {
    let mut rng = Rng::new(seed);
    for round in 0..3 {
        let inputs: Vec<CheckInput> =
            shapes.iter().map(|s| CheckInput::random(s, &mut rng, lo, hi)).collect();
        let rep = check_gradients(&inputs, 1e-5, build).unwrap();
        assert!(
            rep.max_rel_err <= 1e-4,
            "round {round}: max rel err {} (abs {})",
            rep.max_rel_err,
            rep.max_abs_err
        );
    }
}

#[test]
fn grad_conv2d_matches_finite_differences() {
    let mut probe_rng = Rng::new(100);
    grad_check_op(
        101,
        &[vec![1, 2, 4, 4], vec![3, 2, 3, 3]],
        -1.0,
        1.0,
        &mut |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, 1)?;
            weighted_probe(t, y, &mut probe_rng.fork("c"))
        },
    );
}

#[test]
fn grad_conv2d_strided() {
    let mut probe_rng = Rng::new(102);
    grad_check_op(103, &[vec![1, 2, 5, 5], vec![2, 2, 3, 3]], -1.0, 1.0, &mut |t, ids| {
        let y = t.conv2d(ids[0], ids[1], 2, 0)?;
        weighted_probe(t, y, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_depthwise_conv2d() {
    let mut probe_rng = Rng::new(104);
    grad_check_op(105, &[vec![1, 3, 4, 4], vec![3, 1, 3, 3]], -1.0, 1.0, &mut |t, ids| {
        let y = t.depthwise_conv2d(ids[0], ids[1])?;
        weighted_probe(t, y, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_linear() {
    let mut probe_rng = Rng::new(106);
    grad_check_op(107, &[vec![3, 5], vec![5, 4]], -1.0, 1.0, &mut |t, ids| {
        let y = t.linear(ids[0], ids[1])?;
        weighted_probe(t, y, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_layer_norm() {
    let mut probe_rng = Rng::new(108);
    grad_check_op(109, &[vec![2, 6], vec![6], vec![6]], -1.0, 1.0, &mut |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
        weighted_probe(t, y, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_elementwise_chain() {
    let mut probe_rng = Rng::new(110);
    grad_check_op(111, &[vec![8], vec![8]], -1.0, 1.0, &mut |t, ids| {
        let s = t.sigmoid(ids[0]);
        let r = t.relu_squared(ids[1]);
        let m = t.mul(s, r)?;
        let e = t.exp(m);
        let d = t.sub(e, s)?;
        let a = t.add(d, r)?;
        weighted_probe(t, a, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_structural_ops() {
    let mut probe_rng = Rng::new(112);
    grad_check_op(113, &[vec![2, 4], vec![2, 4]], -1.0, 1.0, &mut |t, ids| {
        let cat = t.concat_last(ids[0], ids[1])?;
        let stacked = t.stack(&[cat, cat])?;
        let sl = t.slice_axis0(stacked, 1)?;
        let nar = t.narrow_last(sl, 2, 4)?;
        let rs = t.reshape(nar, vec![4, 2])?;
        let pm = t.permute(rs, &[1, 0])?;
        weighted_probe(t, pm, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_pooling_and_normalize() {
    let mut probe_rng = Rng::new(114);
    grad_check_op(115, &[vec![1, 2, 4, 4]], -1.0, 1.0, &mut |t, ids| {
        let p = t.avg_pool2(ids[0])?;
        let g = t.gap2d(p)?;
        let n = t.l2_normalize_rows(g)?;
        weighted_probe(t, n, &mut probe_rng.fork("c"))
    });
}

#[test]
fn grad_relu_and_scale_and_mean() {
    let mut probe_rng = Rng::new(116);
    grad_check_op(117, &[vec![10]], -1.0, 1.0, &mut |t, ids| {
        let r = t.relu(ids[0]);
        let s = t.scale(r, -2.5);
        let m = t.mean_all(s);
        weighted_probe(t, m, &mut probe_rng.fork("c"))
    });
}

// ---------------------------------------------------------- determinism

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut t = Tape::new();
        let mut xd = vec![0.0; 2 * 3 * 6 * 6];
        let mut wd = vec![0.0; 4 * 3 * 3 * 3];
        rng.fill_uniform(&mut xd, -1.0, 1.0);
        rng.fill_uniform(&mut wd, -1.0, 1.0);
        let x = t.leaf(xd, vec![2, 3, 6, 6], true).unwrap();
        let w = t.leaf(wd, vec![4, 3, 3, 3], true).unwrap();
        let c = t.conv2d(x, w, 1, 1).unwrap();
        let r = t.relu(c);
        let g = t.gap2d(r).unwrap();
        let n = t.l2_normalize_rows(g).unwrap();
        let loss = t.sum_all(n);
        t.backward(loss).unwrap();
        (t.data(n).to_vec(), t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    let (a1, b1, c1) = run();
    let (a2, b2, c2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(c1, c2);
}
