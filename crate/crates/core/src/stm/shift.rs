//! Directional token shifts over per-frame H×W grids.
//!
//! Each shift borrows one channel group from each spatial neighbor and adds
//! the borrowed map with weight (1 - mu): out = x + (1-mu)·x†. Out-of-grid
//! neighbors clip to the nearest valid token. The eight-neighbor order is
//! fixed as (W, E, N, S, NW, NE, SW, SE); the four-neighbor variant keeps
//! the first four and exists for the ablation comparison.

use crate::tensor::{invalid, shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};

const OCTA_OFFSETS: [(isize, isize); 8] = [
    (0, -1), // W
    (0, 1),  // E
    (-1, 0), // N
    (1, 0),  // S
    (-1, -1), // NW
    (-1, 1),  // NE
    (1, -1),  // SW
    (1, 1),   // SE
];

#[derive(Debug)]
struct ShiftOp {
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    groups: usize,
    mu: f64,
}

impl ShiftOp {
    fn group_size(&self) -> usize {
        self.c / self.groups
    }
}

impl TapeOp for ShiftOp {
    fn name(&self) -> &'static str {
        if self.groups == 8 { "octa_shift" } else { "q_shift" }
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let (h, w, c) = (self.h, self.w, self.c);
        let gs = self.group_size();
        let weight = 1.0 - self.mu;
        let mut dx = g.to_vec(); // identity branch
        for f in 0..self.frames {
            for y in 0..h {
                for xx in 0..w {
                    let out_base = ((f * h + y) * w + xx) * c;
                    for (i, (dy, dxo)) in OCTA_OFFSETS[..self.groups].iter().enumerate() {
                        let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let nx = (xx as isize + dxo).clamp(0, w as isize - 1) as usize;
                        let src_base = ((f * h + ny) * w + nx) * c;
                        for ch in i * gs..(i + 1) * gs {
                            dx[src_base + ch] += weight * g[out_base + ch];
                        }
                    }
                }
            }
        }
        ctx.add_grad(x, &dx);
    }
}

fn shift(tape: &mut Tape, x: TensorId, mu: f64, groups: usize) -> Result<TensorId> {
    let op_name: &'static str = if groups == 8 { "octa_shift" } else { "q_shift" };
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err(op_name, format!("expected [F,H,W,C], got {:?}", s)));
    }
    let (frames, h, w, c) = (s[0], s[1], s[2], s[3]);
    if c % groups != 0 {
        return Err(invalid(op_name, format!("channels {} not divisible by {}", c, groups)));
    }
    let gs = c / groups;
    let d = tape.data(x);
    let weight = 1.0 - mu;
    let mut out = d.to_vec();
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let out_base = ((f * h + y) * w + xx) * c;
                for (i, (dy, dxo)) in OCTA_OFFSETS[..groups].iter().enumerate() {
                    let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let nx = (xx as isize + dxo).clamp(0, w as isize - 1) as usize;
                    let src_base = ((f * h + ny) * w + nx) * c;
                    for ch in i * gs..(i + 1) * gs {
                        out[out_base + ch] += weight * d[src_base + ch];
                    }
                }
            }
        }
    }
    Ok(tape.push_op(out, s, vec![x], Box::new(ShiftOp { frames, h, w, c, groups, mu })))
}

/// Eight-neighbor token shift on a [F,H,W,C] grid; C must divide by 8.
pub fn octa_shift(tape: &mut Tape, x: TensorId, mu: f64) -> Result<TensorId> {
    shift(tape, x, mu, 8)
}

/// Four-neighbor (W,E,N,S) variant; C must divide by 4.
pub fn q_shift(tape: &mut Tape, x: TensorId, mu: f64) -> Result<TensorId> {
    shift(tape, x, mu, 4)
}

/// Index-arithmetic reference for the shifts, used only by tests and the
/// verification suites.
pub fn shift_oracle(
    x: &[f64],
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    mu: f64,
    groups: usize,
) -> Vec<f64> {
    let gs = c / groups;
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let i = ch / gs;
                    let (dy, dxo) = OCTA_OFFSETS[i];
                    let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let nx = (xx as isize + dxo).clamp(0, w as isize - 1) as usize;
                    let own = x[((f * h + y) * w + xx) * c + ch];
                    let borrowed = x[((f * h + ny) * w + nx) * c + ch];
                    out[((f * h + y) * w + xx) * c + ch] = own + (1.0 - mu) * borrowed;
                }
            }
        }
    }
    out
}
