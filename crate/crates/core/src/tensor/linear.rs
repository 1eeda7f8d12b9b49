//! Linear projection over the last axis and layer normalization.

use super::{shape_err, invalid, BackwardCtx, Result, Tape, TapeOp, TensorId};

#[derive(Debug)]
struct LinearOp {
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl TapeOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        let w = ctx.input(1);
        let g = ctx.out_grad();
        let (rows, ci, co) = (self.rows, self.c_in, self.c_out);
        if ctx.needs_grad(x) {
            // dX = G · W^T
            let wd = ctx.data(w);
            let mut dx = vec![0.0; rows * ci];
            for r in 0..rows {
                for j in 0..co {
                    let gv = g[r * co + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for i in 0..ci {
                        dx[r * ci + i] += gv * wd[i * co + j];
                    }
                }
            }
            ctx.add_grad(x, &dx);
        }
        if ctx.needs_grad(w) {
            // dW = X^T · G
            let xd = ctx.data(x);
            let mut dw = vec![0.0; ci * co];
            for r in 0..rows {
                for i in 0..ci {
                    let xv = xd[r * ci + i];
                    if xv == 0.0 {
                        continue;
                    }
                    for j in 0..co {
                        dw[i * co + j] += xv * g[r * co + j];
                    }
                }
            }
            ctx.add_grad(w, &dw);
        }
    }
}

#[derive(Debug)]
struct LayerNormOp {
    rows: usize,
    c: usize,
    eps: f64,
}

impl TapeOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        let gamma = ctx.input(1);
        let beta = ctx.input(2);
        let g = ctx.out_grad();
        let (rows, c) = (self.rows, self.c);
        let xd = ctx.data(x);
        let gd = ctx.data(gamma);

        let mut dx = if ctx.needs_grad(x) { Some(vec![0.0; rows * c]) } else { None };
        let mut dgamma = if ctx.needs_grad(gamma) { Some(vec![0.0; c]) } else { None };
        let mut dbeta = if ctx.needs_grad(beta) { Some(vec![0.0; c]) } else { None };

        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let gr = &g[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            // xhat_i = (x_i - mean) * inv_std
            if let Some(dg) = dgamma.as_deref_mut() {
                for i in 0..c {
                    dg[i] += gr[i] * (row[i] - mean) * inv_std;
                }
            }
            if let Some(db) = dbeta.as_deref_mut() {
                for i in 0..c {
                    db[i] += gr[i];
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..c {
                    let dxhat = gr[i] * gd[i];
                    let xhat = (row[i] - mean) * inv_std;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let inv_c = 1.0 / c as f64;
                for i in 0..c {
                    let dxhat = gr[i] * gd[i];
                    let xhat = (row[i] - mean) * inv_std;
                    dx[r * c + i] =
                        inv_std * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                }
            }
        }
        if let Some(dx) = dx {
            ctx.add_grad(x, &dx);
        }
        if let Some(dg) = dgamma {
            ctx.add_grad(gamma, &dg);
        }
        if let Some(db) = dbeta {
            ctx.add_grad(beta, &db);
        }
    }
}

impl Tape {
    /// Matrix product over the last axis: x [...,Cin] · w [Cin,Cout].
    pub fn linear(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(shape_err("linear", format!("weight must be [Cin,Cout], got {:?}", ws)));
        }
        let c_in = *xs.last().ok_or_else(|| shape_err("linear", "rank-0 input".into()))?;
        if c_in != ws[0] {
            return Err(shape_err(
                "linear",
                format!("last input axis ({}) != weight axis 0 ({})", c_in, ws[0]),
            ));
        }
        let c_out = ws[1];
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; rows * c_out];
        for r in 0..rows {
            let xrow = &xd[r * c_in..(r + 1) * c_in];
            let orow = &mut out[r * c_out..(r + 1) * c_out];
            for (i, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[i * c_out..(i + 1) * c_out];
                for j in 0..c_out {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = c_out;
        Ok(self.push_op(out, shape, vec![x, w], Box::new(LinearOp { rows, c_in, c_out })))
    }

    /// Per-token normalization over the last axis, then affine with gamma/beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(invalid("layer_norm", format!("eps must be > 0, got {}", eps)));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                out[r * c + i] = (row[i] - mean) * inv_std * gd[i] + bd[i];
            }
        }
        Ok(self.push_op(out, xs, vec![x, gamma, beta], Box::new(LayerNormOp { rows, c, eps })))
    }
}
