//! Bidirectional WKV attention.
//!
//! Per channel, the output at token l is a convex combination of all value
//! tokens: neighbors are weighted exp(-(|l-i|-1)/L * w + k_i), the token
//! itself exp(u + k_l), normalized by their sum. `w` controls distance
//! decay, `u` the current-token bonus, both per channel.
//!
//! Two execution paths produce the same function:
//!  - `Naive`: stabilized O(L^2) double loop, the default and the reference;
//!  - `Scan`: linear-time two-direction prefix scans with a hand-derived
//!    backward, for long sequences. Magnitudes are controlled by shifting
//!    all keys by their per-channel maximum (exact: numerator and
//!    denominator scale together), after which decay factors are bounded by
//!    e^{|w|} over the whole sequence.

use crate::tensor::{invalid, shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};

/// Execution path for [`bi_wkv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WkvImpl {
    Naive,
    Scan,
}

#[derive(Debug)]
struct BiWkvOp {
    len: usize,
    channels: usize,
    imp: WkvImpl,
}

struct Grads {
    k: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
}

fn forward_naive(k: &[f64], v: &[f64], w: &[f64], u: &[f64], l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * c];
    for ch in 0..c {
        let delta = w[ch] / l as f64;
        for t in 0..l {
            let self_exp = u[ch] + k[t * c + ch];
            let mut m = self_exp;
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = (t as isize - i as isize).unsigned_abs() - 1;
                let e = -(dist as f64) * delta + k[i * c + ch];
                if e > m {
                    m = e;
                }
            }
            let mut num = (self_exp - m).exp() * v[t * c + ch];
            let mut den = (self_exp - m).exp();
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = (t as isize - i as isize).unsigned_abs() - 1;
                let e = ((-(dist as f64) * delta + k[i * c + ch]) - m).exp();
                num += e * v[i * c + ch];
                den += e;
            }
            out[t * c + ch] = num / den;
        }
    }
    out
}

fn backward_naive(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    out: &[f64],
    g: &[f64],
    l: usize,
    c: usize,
) -> Grads {
    let mut gr = Grads {
        k: vec![0.0; l * c],
        v: vec![0.0; l * c],
        w: vec![0.0; c],
        u: vec![0.0; c],
    };
    let inv_l = 1.0 / l as f64;
    for ch in 0..c {
        let delta = w[ch] * inv_l;
        for t in 0..l {
            let gt = g[t * c + ch];
            if gt == 0.0 {
                continue;
            }
            let ot = out[t * c + ch];
            let self_exp = u[ch] + k[t * c + ch];
            let mut m = self_exp;
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = (t as isize - i as isize).unsigned_abs() - 1;
                let e = -(dist as f64) * delta + k[i * c + ch];
                if e > m {
                    m = e;
                }
            }
            let mut den = (self_exp - m).exp();
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = (t as isize - i as isize).unsigned_abs() - 1;
                den += ((-(dist as f64) * delta + k[i * c + ch]) - m).exp();
            }
            // weights omega_i sum to one; self token carries the u bonus
            let w_self = (self_exp - m).exp() / den;
            gr.v[t * c + ch] += gt * w_self;
            gr.k[t * c + ch] += gt * w_self * (v[t * c + ch] - ot);
            gr.u[ch] += gt * w_self * (v[t * c + ch] - ot);
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = ((t as isize - i as isize).unsigned_abs() - 1) as f64;
                let omega = ((-dist * delta + k[i * c + ch]) - m).exp() / den;
                let dv = v[i * c + ch] - ot;
                gr.v[i * c + ch] += gt * omega;
                gr.k[i * c + ch] += gt * omega * dv;
                gr.w[ch] += gt * omega * (-dist * inv_l) * dv;
            }
        }
    }
    gr
}

/// Per-channel forward scans in key-shifted space. Returns the output plus
/// the shifted denominators, which the scan backward reuses.
fn forward_scan(k: &[f64], v: &[f64], w: &[f64], u: &[f64], l: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; l * c];
    let mut denoms = vec![0.0; l * c];
    let mut fwd_n = vec![0.0; l];
    let mut fwd_d = vec![0.0; l];
    let mut rev_n = vec![0.0; l];
    let mut rev_d = vec![0.0; l];
    for ch in 0..c {
        let delta = w[ch] / l as f64;
        let decay = (-delta).exp();
        let kmax = (0..l).map(|i| k[i * c + ch]).fold(f64::NEG_INFINITY, f64::max);
        // strictly-left sums, exclusive of the current token
        let (mut sn, mut sd) = (0.0, 0.0);
        for t in 0..l {
            fwd_n[t] = sn;
            fwd_d[t] = sd;
            let e = (k[t * c + ch] - kmax).exp();
            sn = sn * decay + e * v[t * c + ch];
            sd = sd * decay + e;
        }
        let (mut sn, mut sd) = (0.0, 0.0);
        for t in (0..l).rev() {
            rev_n[t] = sn;
            rev_d[t] = sd;
            let e = (k[t * c + ch] - kmax).exp();
            sn = sn * decay + e * v[t * c + ch];
            sd = sd * decay + e;
        }
        for t in 0..l {
            let self_e = (u[ch] + k[t * c + ch] - kmax).exp();
            let num = fwd_n[t] + rev_n[t] + self_e * v[t * c + ch];
            let den = fwd_d[t] + rev_d[t] + self_e;
            out[t * c + ch] = num / den;
            denoms[t * c + ch] = den;
        }
    }
    (out, denoms)
}

fn backward_scan(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    out: &[f64],
    g: &[f64],
    l: usize,
    c: usize,
) -> Grads {
    let mut gr = Grads {
        k: vec![0.0; l * c],
        v: vec![0.0; l * c],
        w: vec![0.0; c],
        u: vec![0.0; c],
    };
    let inv_l = 1.0 / l as f64;
    let (_, denoms) = forward_scan(k, v, w, u, l, c);
    // per-channel scan state: plain and distance-weighted sums of q and r,
    // where q_t = g_t / den_t and r_t = q_t * out_t (key-shifted space)
    let mut sq = vec![0.0; l];
    let mut sr = vec![0.0; l];
    let mut dq = vec![0.0; l];
    let mut dr = vec![0.0; l];
    let mut q = vec![0.0; l];
    let mut r = vec![0.0; l];
    for ch in 0..c {
        let delta = w[ch] * inv_l;
        let decay = (-delta).exp();
        let kmax = (0..l).map(|i| k[i * c + ch]).fold(f64::NEG_INFINITY, f64::max);
        for t in 0..l {
            q[t] = g[t * c + ch] / denoms[t * c + ch];
            r[t] = q[t] * out[t * c + ch];
        }
        // left-to-right pass: contributions from tokens strictly left
        let (mut asq, mut asr, mut adq, mut adr) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..l {
            sq[t] = asq;
            sr[t] = asr;
            dq[t] = adq;
            dr[t] = adr;
            adq = decay * (adq + asq);
            adr = decay * (adr + asr);
            asq = asq * decay + q[t];
            asr = asr * decay + r[t];
        }
        // right-to-left pass adds the strictly-right contributions
        let (mut asq, mut asr, mut adq, mut adr) = (0.0, 0.0, 0.0, 0.0);
        for t in (0..l).rev() {
            sq[t] += asq;
            sr[t] += asr;
            dq[t] += adq;
            dr[t] += adr;
            adq = decay * (adq + asq);
            adr = decay * (adr + asr);
            asq = asq * decay + q[t];
            asr = asr * decay + r[t];
        }
        for t in 0..l {
            let ek = (k[t * c + ch] - kmax).exp();
            let eself = (u[ch] + k[t * c + ch] - kmax).exp();
            let vt = v[t * c + ch];
            let gv = ek * sq[t] + eself * q[t];
            gr.v[t * c + ch] += gv;
            gr.k[t * c + ch] += vt * gv - (ek * sr[t] + eself * r[t]);
            gr.u[ch] += eself * q[t] * (vt - out[t * c + ch]);
            gr.w[ch] += -inv_l * ek * (vt * dq[t] - dr[t]);
        }
    }
    gr
}

impl TapeOp for BiWkvOp {
    fn name(&self) -> &'static str {
        "bi_wkv"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let (k, v, w, u) = (ctx.input(0), ctx.input(1), ctx.input(2), ctx.input(3));
        let gr = match self.imp {
            WkvImpl::Naive => backward_naive(
                ctx.data(k),
                ctx.data(v),
                ctx.data(w),
                ctx.data(u),
                ctx.out_data(),
                ctx.out_grad(),
                self.len,
                self.channels,
            ),
            WkvImpl::Scan => backward_scan(
                ctx.data(k),
                ctx.data(v),
                ctx.data(w),
                ctx.data(u),
                ctx.out_data(),
                ctx.out_grad(),
                self.len,
                self.channels,
            ),
        };
        ctx.add_grad(k, &gr.k);
        ctx.add_grad(v, &gr.v);
        ctx.add_grad(w, &gr.w);
        ctx.add_grad(u, &gr.u);
    }
}

/// Bidirectional WKV over a token sequence: k, v are [L,C]; w, u are [C].
pub fn bi_wkv(
    tape: &mut Tape,
    k: TensorId,
    v: TensorId,
    w: TensorId,
    u: TensorId,
    imp: WkvImpl,
) -> Result<TensorId> {
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if ks.len() != 2 || vs != ks {
        return Err(shape_err(
            "bi_wkv",
            format!("k {:?} and v {:?} must be identical [L,C]", ks, vs),
        ));
    }
    let (l, c) = (ks[0], ks[1]);
    if l == 0 {
        return Err(invalid("bi_wkv", "sequence length must be >= 1".into()));
    }
    if tape.shape(w) != [c] || tape.shape(u) != [c] {
        return Err(shape_err(
            "bi_wkv",
            format!("w {:?} and u {:?} must be [{}]", tape.shape(w), tape.shape(u), c),
        ));
    }
    for id in [k, v, w, u] {
        if tape.data(id).iter().any(|v| !v.is_finite()) {
            return Err(crate::tensor::TensorError::NonFinite { op: "bi_wkv" });
        }
    }
    let out = match imp {
        WkvImpl::Naive => forward_naive(tape.data(k), tape.data(v), tape.data(w), tape.data(u), l, c),
        WkvImpl::Scan => forward_scan(tape.data(k), tape.data(v), tape.data(w), tape.data(u), l, c).0,
    };
    Ok(tape.push_op(out, vec![l, c], vec![k, v, w, u], Box::new(BiWkvOp { len: l, channels: c, imp })))
}

/// Literal unstabilized evaluation of the aggregation formula, double loop
/// per channel, raw exponentials. Reference only; overflows where the
/// stabilized paths do not.
pub fn bi_wkv_oracle(k: &[f64], v: &[f64], w: &[f64], u: &[f64], l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * c];
    for ch in 0..c {
        for t in 0..l {
            let mut num = (u[ch] + k[t * c + ch]).exp() * v[t * c + ch];
            let mut den = (u[ch] + k[t * c + ch]).exp();
            for i in 0..l {
                if i == t {
                    continue;
                }
                let dist = ((t as isize - i as isize).unsigned_abs() - 1) as f64;
                let e = (-dist / l as f64 * w[ch] + k[i * c + ch]).exp();
                num += e * v[i * c + ch];
                den += e;
            }
            out[t * c + ch] = num / den;
        }
    }
    out
}
