//! Elementwise, structural and reduction ops.

use super::{invalid, shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
struct BinOp {
    kind: BinKind,
}

impl TapeOp for BinOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let a = ctx.input(0);
        let b = ctx.input(1);
        let g = ctx.out_grad();
        match self.kind {
            BinKind::Add => {
                ctx.add_grad(a, g);
                ctx.add_grad(b, g);
            }
            BinKind::Sub => {
                ctx.add_grad(a, g);
                if ctx.needs_grad(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    ctx.add_grad(b, &neg);
                }
            }
            BinKind::Mul => {
                if ctx.needs_grad(a) {
                    let bd = ctx.data(b);
                    let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                    ctx.add_grad(a, &da);
                }
                if ctx.needs_grad(b) {
                    let ad = ctx.data(a);
                    let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                    ctx.add_grad(b, &db);
                }
            }
        }
    }
}

impl Tape {
    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(BinOp { kind }.name(), a, b)?;
        let out: Vec<f64> = self.data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(x, y)| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, vec![a, b], Box::new(BinOp { kind })))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Relu,
    ReluSquared,
    Exp,
}

#[derive(Debug)]
struct UnaryOp {
    kind: UnaryKind,
}

impl TapeOp for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::ReluSquared => "relu_squared",
            UnaryKind::Exp => "exp",
        }
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let delta: Vec<f64> = match self.kind {
            UnaryKind::Sigmoid => {
                let y = ctx.out_data();
                g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()
            }
            UnaryKind::Relu => {
                let xd = ctx.data(x);
                g.iter().zip(xd.iter()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()
            }
            UnaryKind::ReluSquared => {
                let xd = ctx.data(x);
                g.iter().zip(xd.iter()).map(|(g, x)| g * 2.0 * x.max(0.0)).collect()
            }
            UnaryKind::Exp => {
                let y = ctx.out_data();
                g.iter().zip(y.iter()).map(|(g, y)| g * y).collect()
            }
        };
        ctx.add_grad(x, &delta);
    }
}

impl Tape {
    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::ReluSquared => {
                    let r = v.max(0.0);
                    r * r
                }
                UnaryKind::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, vec![x], Box::new(UnaryOp { kind }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }

    /// max(x, 0)^2
    pub fn relu_squared(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::ReluSquared, x)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, x)
    }
}

// ---------------------------------------------------------------------------
// scale by constant
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ScaleOp {
    factor: f64,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let delta: Vec<f64> = ctx.out_grad().iter().map(|g| g * self.factor).collect();
        ctx.add_grad(x, &delta);
    }
}

impl Tape {
    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, vec![x], Box::new(ScaleOp { factor }))
    }
}

// ---------------------------------------------------------------------------
// concat / narrow along the last axis
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ConcatLastOp {
    rows: usize,
    la: usize,
    lb: usize,
}

impl TapeOp for ConcatLastOp {
    fn name(&self) -> &'static str {
        "concat_last"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let a = ctx.input(0);
        let b = ctx.input(1);
        let g = ctx.out_grad();
        let (la, lb) = (self.la, self.lb);
        let lc = la + lb;
        if ctx.needs_grad(a) {
            let mut da = vec![0.0; self.rows * la];
            for r in 0..self.rows {
                da[r * la..(r + 1) * la].copy_from_slice(&g[r * lc..r * lc + la]);
            }
            ctx.add_grad(a, &da);
        }
        if ctx.needs_grad(b) {
            let mut db = vec![0.0; self.rows * lb];
            for r in 0..self.rows {
                db[r * lb..(r + 1) * lb].copy_from_slice(&g[r * lc + la..(r + 1) * lc]);
            }
            ctx.add_grad(b, &db);
        }
    }
}

#[derive(Debug)]
struct NarrowLastOp {
    rows: usize,
    full: usize,
    start: usize,
    len: usize,
}

impl TapeOp for NarrowLastOp {
    fn name(&self) -> &'static str {
        "narrow_last"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let mut dx = vec![0.0; self.rows * self.full];
        for r in 0..self.rows {
            dx[r * self.full + self.start..r * self.full + self.start + self.len]
                .copy_from_slice(&g[r * self.len..(r + 1) * self.len]);
        }
        ctx.add_grad(x, &dx);
    }
}

impl Tape {
    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err(
                "concat_last",
                format!("leading axes must match: {:?} vs {:?}", sa, sb),
            ));
        }
        let la = sa[sa.len() - 1];
        let lb = sb[sb.len() - 1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (la + lb));
        let da = self.data(a);
        let db = self.data(b);
        for r in 0..rows {
            out.extend_from_slice(&da[r * la..(r + 1) * la]);
            out.extend_from_slice(&db[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = la + lb;
        Ok(self.push_op(out, shape, vec![a, b], Box::new(ConcatLastOp { rows, la, lb })))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let full = *s.last().ok_or_else(|| shape_err("narrow_last", "rank-0 input".into()))?;
        if start + len > full || len == 0 {
            return Err(shape_err(
                "narrow_last",
                format!("range {}..{} out of last axis of size {}", start, start + len, full),
            ));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * full + start..r * full + start + len]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push_op(out, shape, vec![x], Box::new(NarrowLastOp { rows, full, start, len })))
    }

    /// Split the last axis into two equal halves.
    pub fn split_last_half(&mut self, x: TensorId) -> Result<(TensorId, TensorId)> {
        let full = *self.shape(x).last().ok_or_else(|| shape_err("split_last_half", "rank-0 input".into()))?;
        if full % 2 != 0 {
            return Err(shape_err(
                "split_last_half",
                format!("last axis {} is odd", full),
            ));
        }
        let a = self.narrow_last(x, 0, full / 2)?;
        let b = self.narrow_last(x, full / 2, full / 2)?;
        Ok((a, b))
    }
}

// ---------------------------------------------------------------------------
// stack along a new leading axis / take one slice of axis 0
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct StackOp {
    item: usize,
}

impl TapeOp for StackOp {
    fn name(&self) -> &'static str {
        "stack"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let g = ctx.out_grad();
        for k in 0..ctx.num_inputs() {
            let id = ctx.input(k);
            if ctx.needs_grad(id) {
                ctx.add_grad(id, &g[k * self.item..(k + 1) * self.item]);
            }
        }
    }
}

#[derive(Debug)]
struct SliceAxis0Op {
    index: usize,
    item: usize,
}

impl TapeOp for SliceAxis0Op {
    fn name(&self) -> &'static str {
        "slice_axis0"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let total = ctx.data(x).len();
        let mut dx = vec![0.0; total];
        dx[self.index * self.item..(self.index + 1) * self.item].copy_from_slice(g);
        ctx.add_grad(x, &dx);
    }
}

impl Tape {
    /// Stack equally-shaped tensors along a new axis 0.
    pub fn stack(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(invalid("stack", "empty input list".into()));
        }
        let base = self.shape(items[0]).to_vec();
        for &t in &items[1..] {
            if self.shape(t) != base.as_slice() {
                return Err(shape_err(
                    "stack",
                    format!("item shape {:?} differs from {:?}", self.shape(t), base),
                ));
            }
        }
        let item: usize = base.iter().product();
        let mut out = Vec::with_capacity(item * items.len());
        for &t in items {
            out.extend_from_slice(self.data(t));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&base);
        Ok(self.push_op(out, shape, items.to_vec(), Box::new(StackOp { item })))
    }

    /// Take slice `index` of axis 0, dropping that axis.
    pub fn slice_axis0(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(shape_err(
                "slice_axis0",
                format!("index {} out of axis 0 of shape {:?}", index, s),
            ));
        }
        let item: usize = s[1..].iter().product();
        let out = self.data(x)[index * item..(index + 1) * item].to_vec();
        Ok(self.push_op(out, s[1..].to_vec(), vec![x], Box::new(SliceAxis0Op { index, item })))
    }
}

// ---------------------------------------------------------------------------
// reshape / permute
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ReshapeOp;

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        let g = ctx.out_grad();
        ctx.add_grad(x, g);
    }
}

#[derive(Debug)]
struct PermuteOp {
    in_shape: Vec<usize>,
    perm: Vec<usize>,
}

fn permute_data(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coords[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    out
}

impl TapeOp for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        // grad permutes back with the inverse permutation
        let mut inv = vec![0usize; self.perm.len()];
        for (d, &p) in self.perm.iter().enumerate() {
            inv[p] = d;
        }
        let out_shape: Vec<usize> = self.perm.iter().map(|&p| self.in_shape[p]).collect();
        let dx = permute_data(ctx.out_grad(), &out_shape, &inv);
        ctx.add_grad(x, &dx);
    }
}

impl Tape {
    /// Reinterpret the buffer under a new shape (same element count).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_op(out, shape, vec![x], Box::new(ReshapeOp)))
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let out = permute_data(self.data(x), &in_shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        Ok(self.push_op(
            out,
            out_shape,
            vec![x],
            Box::new(PermuteOp { in_shape, perm: perm.to_vec() }),
        ))
    }
}

// ---------------------------------------------------------------------------
// reductions and pooling
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct SumAllOp {
    mean: bool,
}

impl TapeOp for SumAllOp {
    fn name(&self) -> &'static str {
        if self.mean { "mean_all" } else { "sum_all" }
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad()[0];
        let n = ctx.data(x).len();
        let v = if self.mean { g / n as f64 } else { g };
        let dx = vec![v; n];
        ctx.add_grad(x, &dx);
    }
}

#[derive(Debug)]
struct Gap2dOp {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl TapeOp for Gap2dOp {
    fn name(&self) -> &'static str {
        "gap2d"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let hw = self.h * self.w;
        let inv = 1.0 / hw as f64;
        let mut dx = vec![0.0; self.n * self.c * hw];
        for n in 0..self.n {
            for c in 0..self.c {
                let gv = g[n * self.c + c] * inv;
                let base = (n * self.c + c) * hw;
                for p in 0..hw {
                    dx[base + p] = gv;
                }
            }
        }
        ctx.add_grad(x, &dx);
    }
}

#[derive(Debug)]
struct AvgPool2Op {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl TapeOp for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let (ho, wo) = (self.h / 2, self.w / 2);
        let mut dx = vec![0.0; self.n * self.c * self.h * self.w];
        for nc in 0..self.n * self.c {
            for i in 0..ho {
                for j in 0..wo {
                    let gv = g[(nc * ho + i) * wo + j] * 0.25;
                    for di in 0..2 {
                        for dj in 0..2 {
                            dx[(nc * self.h + 2 * i + di) * self.w + 2 * j + dj] += gv;
                        }
                    }
                }
            }
        }
        ctx.add_grad(x, &dx);
    }
}

impl Tape {
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.push_op(vec![s], vec![1], vec![x], Box::new(SumAllOp { mean: false }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let d = self.data(x);
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.push_op(vec![s], vec![1], vec![x], Box::new(SumAllOp { mean: true }))
    }

    /// Global average pool over H,W of a [N,C,H,W] map -> [N,C].
    pub fn gap2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("gap2d", format!("expected [N,C,H,W], got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = self.data(x);
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for (nc, slot) in out.iter_mut().enumerate() {
            let base = nc * hw;
            *slot = d[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        Ok(self.push_op(out, vec![n, c], vec![x], Box::new(Gap2dOp { n, c, h, w })))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("avg_pool2", format!("expected [N,C,H,W], got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("spatial dims must be even, got {}x{}", h, w)));
        }
        let d = self.data(x);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s4 = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s4 += d[(nc * h + 2 * i + di) * w + 2 * j + dj];
                        }
                    }
                    out[(nc * ho + i) * wo + j] = s4 * 0.25;
                }
            }
        }
        Ok(self.push_op(out, vec![n, c, ho, wo], vec![x], Box::new(AvgPool2Op { n, c, h, w })))
    }
}

// ---------------------------------------------------------------------------
// row-wise L2 normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct L2NormalizeRowsOp {
    rows: usize,
    dim: usize,
    norms: Vec<f64>,
}

impl TapeOp for L2NormalizeRowsOp {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        if !ctx.needs_grad(x) {
            return;
        }
        let g = ctx.out_grad();
        let y = ctx.out_data();
        let d = self.dim;
        let mut dx = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let gr = &g[r * d..(r + 1) * d];
            let yr = &y[r * d..(r + 1) * d];
            let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
            let inv = 1.0 / self.norms[r];
            for i in 0..d {
                dx[r * d + i] = (gr[i] - yr[i] * dot) * inv;
            }
        }
        ctx.add_grad(x, &dx);
    }
}

impl Tape {
    /// Normalize each row of a [R,D] tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize_rows", format!("expected [R,D], got {:?}", s)));
        }
        let (rows, dim) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; rows * dim];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(invalid("l2_normalize_rows", format!("row {} has zero norm", r)));
            }
            norms[r] = n;
            for i in 0..dim {
                out[r * dim + i] = row[i] / n;
            }
        }
        Ok(self.push_op(out, s, vec![x], Box::new(L2NormalizeRowsOp { rows, dim, norms })))
    }

    /// Row L2 norms of a [R,D] tensor, as plain values (not differentiated).
    pub fn row_norms(&self, x: TensorId) -> Result<Vec<f64>> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("row_norms", format!("expected [R,D], got {:?}", s)));
        }
        let (rows, dim) = (s[0], s[1]);
        let d = self.data(x);
        Ok((0..rows)
            .map(|r| d[r * dim..(r + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }
}
