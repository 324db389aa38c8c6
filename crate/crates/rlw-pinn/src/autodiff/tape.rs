//! Reverse-mode tape over the flat parameter vector.
//!
//! The tape is an ordered record of the operations of one loss evaluation.
//! Nodes hold one of three value kinds: a scalar, a per-point batch, or a
//! batch of jet components (`comps` planes of an n-points-by-width matrix).
//! Jet components are independent values on the tape, so the backward sweep
//! is a single reverse pass; no derivative pass nests inside another.
//!
//! Graphs are built once per training stage and re-evaluated with
//! [`Tape::forward`] as the parameters move. Buffers are reused across
//! evaluations and every reduction runs in a fixed order, so identical
//! parameters produce bit-identical values and gradients.

use super::jet::silu_derivs;
use super::AutodiffError;

/// Handle to one recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    fn ix(self) -> usize {
        self.0 as usize
    }
}

/// Jet component selected by [`Tape::field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldComp {
    /// The value plane.
    Value,
    /// The d/dx plane.
    Dx,
}

/// Number of jet planes carried by a batch: 1 (value), 2 (value, dx) or
/// 6 (value, dx, dt, dxt, dxx, dxxt).
const COMP_SETS: [usize; 3] = [1, 2, 6];

/// Batch of jets stored plane-major: plane c is an n-by-width row-major
/// matrix starting at data[c * n * width].
#[derive(Clone, Debug)]
pub(crate) struct JetBuf {
    pub data: Vec<f64>,
    pub n: usize,
    pub width: usize,
    pub comps: usize,
}

impl JetBuf {
    fn zeroed(n: usize, width: usize, comps: usize) -> JetBuf {
        JetBuf { data: vec![0.0; n * width * comps], n, width, comps }
    }

    #[inline]
    fn plane(&self, c: usize) -> &[f64] {
        let sz = self.n * self.width;
        &self.data[c * sz..(c + 1) * sz]
    }

    fn planes_mut(&mut self) -> Vec<&mut [f64]> {
        let sz = self.n * self.width;
        self.data.chunks_exact_mut(sz).collect()
    }
}

#[derive(Clone, Debug)]
enum Value {
    Empty,
    Scalar(f64),
    Pts(Vec<f64>),
    Jets(JetBuf),
}

/// Shape of a node, known at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Scalar,
    Pts { n: usize },
    Jets { n: usize, width: usize, comps: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Const(f64),
    Param(u32),
    /// Points mapped through a fixed affine change of coordinates.
    /// Unit 0 carries (x - x_shift) * x_scale with dx = x_scale, unit 1
    /// carries (t - t_shift) * t_scale with dt = t_scale.
    Seed {
        pts: Vec<(f64, f64)>,
        x_shift: f64,
        x_scale: f64,
        t_shift: f64,
        t_scale: f64,
        comps: usize,
    },
    /// Dense layer: out = in * W^T + b, applied plane by plane; the bias
    /// joins the value plane only since it has no (x, t) dependence.
    Affine { input: NodeId, w_off: usize, b_off: usize, n_in: usize, n_out: usize },
    Silu { input: NodeId },
    /// r = dt + dx + eps * v * dx - mu * dxxt per point; mirrors
    /// `physics::rlw_residual`.
    RlwResidual { input: NodeId, eps: f64, mu: f64 },
    Field { input: NodeId, comp: FieldComp },
    SubConsts { input: NodeId, targets: Vec<f64> },
    Hadamard { a: NodeId, b: NodeId },
    /// Elementwise a + scale_b * b.
    Axpy { a: NodeId, b: NodeId, scale_b: f64 },
    MeanSquare { input: NodeId },
    Trapezoid { input: NodeId, spacing: f64 },
    Add { a: NodeId, b: NodeId },
    SubScalar { a: NodeId, b: NodeId },
    MulScalar { a: NodeId, b: NodeId },
    Scale { input: NodeId, c: f64 },
    ExpNeg { input: NodeId },
    Square { input: NodeId },
    SumScaled { inputs: Vec<NodeId>, scale: f64 },
}

/// Ordered record of the primitive operations of one loss evaluation.
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Shape>,
    vals: Vec<Value>,
    n_params: usize,
}

impl Tape {
    /// Empty tape over a parameter vector of the given length.
    pub fn new(n_params: usize) -> Tape {
        Tape { ops: Vec::new(), shapes: Vec::new(), vals: Vec::new(), n_params }
    }

    /// Number of recorded operations.
    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let id = NodeId(self.ops.len() as u32);
        self.ops.push(op);
        self.shapes.push(shape);
        self.vals.push(Value::Empty);
        id
    }

    fn shape(&self, id: NodeId) -> Shape {
        self.shapes[id.ix()]
    }

    fn want_scalar(&self, id: NodeId, op: &'static str) -> Result<(), AutodiffError> {
        match self.shape(id) {
            Shape::Scalar => Ok(()),
            _ => Err(AutodiffError::WrongKind { node: id.ix(), op }),
        }
    }

    fn want_pts(&self, id: NodeId, op: &'static str) -> Result<usize, AutodiffError> {
        match self.shape(id) {
            Shape::Pts { n } => Ok(n),
            _ => Err(AutodiffError::WrongKind { node: id.ix(), op }),
        }
    }

    fn want_jets(
        &self,
        id: NodeId,
        op: &'static str,
    ) -> Result<(usize, usize, usize), AutodiffError> {
        match self.shape(id) {
            Shape::Jets { n, width, comps } => Ok((n, width, comps)),
            _ => Err(AutodiffError::WrongKind { node: id.ix(), op }),
        }
    }

    // ----- graph building -------------------------------------------------

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.push(Op::Const(c), Shape::Scalar)
    }

    /// Read one entry of the parameter vector as a scalar node.
    pub fn param(&mut self, idx: usize) -> Result<NodeId, AutodiffError> {
        if idx >= self.n_params {
            return Err(AutodiffError::WrongKind { node: idx, op: "param" });
        }
        Ok(self.push(Op::Param(idx as u32), Shape::Scalar))
    }

    /// Seed a batch of (x, t) points, optionally through a fixed affine
    /// input map. `comps` must be 1, 2 or 6.
    pub fn seed_points(
        &mut self,
        pts: Vec<(f64, f64)>,
        x_shift: f64,
        x_scale: f64,
        t_shift: f64,
        t_scale: f64,
        comps: usize,
    ) -> Result<NodeId, AutodiffError> {
        if pts.is_empty() {
            return Err(AutodiffError::EmptyBatch { op: "seed_points" });
        }
        if !COMP_SETS.contains(&comps) {
            return Err(AutodiffError::WrongKind { node: self.ops.len(), op: "seed_points" });
        }
        let n = pts.len();
        let shape = Shape::Jets { n, width: 2, comps };
        Ok(self.push(Op::Seed { pts, x_shift, x_scale, t_shift, t_scale, comps }, shape))
    }

    /// Dense layer with weights at `w_off` (row-major n_out x n_in) and
    /// biases at `b_off` in the parameter vector.
    pub fn affine(
        &mut self,
        input: NodeId,
        w_off: usize,
        b_off: usize,
        n_in: usize,
        n_out: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (n, width, comps) = self.want_jets(input, "affine")?;
        if width != n_in
            || w_off + n_in * n_out > self.n_params
            || b_off + n_out > self.n_params
        {
            return Err(AutodiffError::WrongKind { node: input.ix(), op: "affine" });
        }
        let shape = Shape::Jets { n, width: n_out, comps };
        Ok(self.push(Op::Affine { input, w_off, b_off, n_in, n_out }, shape))
    }

    pub fn silu(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(input);
        self.want_jets(input, "silu")?;
        Ok(self.push(Op::Silu { input }, shape))
    }

    /// RLW residual per point from a width-1 batch carrying all six planes.
    pub fn rlw_residual(
        &mut self,
        input: NodeId,
        eps: f64,
        mu: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (n, width, comps) = self.want_jets(input, "rlw_residual")?;
        if width != 1 || comps != 6 {
            return Err(AutodiffError::WrongKind { node: input.ix(), op: "rlw_residual" });
        }
        Ok(self.push(Op::RlwResidual { input, eps, mu }, Shape::Pts { n }))
    }

    /// Extract one jet plane of a width-1 batch as a per-point vector.
    pub fn field(&mut self, input: NodeId, comp: FieldComp) -> Result<NodeId, AutodiffError> {
        let (n, width, comps) = self.want_jets(input, "field")?;
        if width != 1 || (comp == FieldComp::Dx && comps < 2) {
            return Err(AutodiffError::WrongKind { node: input.ix(), op: "field" });
        }
        Ok(self.push(Op::Field { input, comp }, Shape::Pts { n }))
    }

    /// Elementwise subtraction of fixed targets.
    pub fn sub_consts(
        &mut self,
        input: NodeId,
        targets: Vec<f64>,
    ) -> Result<NodeId, AutodiffError> {
        let n = self.want_pts(input, "sub_consts")?;
        if targets.len() != n {
            return Err(AutodiffError::WrongKind { node: input.ix(), op: "sub_consts" });
        }
        Ok(self.push(Op::SubConsts { input, targets }, Shape::Pts { n }))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.want_pts(a, "hadamard")?;
        let nb = self.want_pts(b, "hadamard")?;
        if n != nb {
            return Err(AutodiffError::WrongKind { node: b.ix(), op: "hadamard" });
        }
        Ok(self.push(Op::Hadamard { a, b }, Shape::Pts { n }))
    }

    /// Elementwise a + scale_b * b.
    pub fn axpy(&mut self, a: NodeId, b: NodeId, scale_b: f64) -> Result<NodeId, AutodiffError> {
        let n = self.want_pts(a, "axpy")?;
        let nb = self.want_pts(b, "axpy")?;
        if n != nb {
            return Err(AutodiffError::WrongKind { node: b.ix(), op: "axpy" });
        }
        Ok(self.push(Op::Axpy { a, b, scale_b }, Shape::Pts { n }))
    }

    /// Mean of squares over a per-point batch.
    pub fn mean_square(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.want_pts(input, "mean_square")?;
        if n == 0 {
            return Err(AutodiffError::EmptyBatch { op: "mean_square" });
        }
        Ok(self.push(Op::MeanSquare { input }, Shape::Scalar))
    }

    /// Composite trapezoid rule over a per-point batch on a uniform grid.
    pub fn trapezoid(&mut self, input: NodeId, spacing: f64) -> Result<NodeId, AutodiffError> {
        let n = self.want_pts(input, "trapezoid")?;
        if n < 2 {
            return Err(AutodiffError::EmptyBatch { op: "trapezoid" });
        }
        Ok(self.push(Op::Trapezoid { input, spacing }, Shape::Scalar))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.want_scalar(a, "add")?;
        self.want_scalar(b, "add")?;
        Ok(self.push(Op::Add { a, b }, Shape::Scalar))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.want_scalar(a, "sub")?;
        self.want_scalar(b, "sub")?;
        Ok(self.push(Op::SubScalar { a, b }, Shape::Scalar))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.want_scalar(a, "mul")?;
        self.want_scalar(b, "mul")?;
        Ok(self.push(Op::MulScalar { a, b }, Shape::Scalar))
    }

    pub fn scale(&mut self, input: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.want_scalar(input, "scale")?;
        Ok(self.push(Op::Scale { input, c }, Shape::Scalar))
    }

    /// exp(-x), the weight applied to each balanced loss term.
    pub fn exp_neg(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.want_scalar(input, "exp_neg")?;
        Ok(self.push(Op::ExpNeg { input }, Shape::Scalar))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.want_scalar(input, "square")?;
        Ok(self.push(Op::Square { input }, Shape::Scalar))
    }

    /// scale * sum(inputs) over scalar nodes.
    pub fn sum_scaled(
        &mut self,
        inputs: Vec<NodeId>,
        scale: f64,
    ) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::EmptyBatch { op: "sum_scaled" });
        }
        for &i in &inputs {
            self.want_scalar(i, "sum_scaled")?;
        }
        Ok(self.push(Op::SumScaled { inputs, scale }, Shape::Scalar))
    }

    // ----- evaluation -----------------------------------------------------

    /// Recompute every node value with the given parameters. The recorded
    /// structure is untouched, so the same tape can be re-run as parameters
    /// move. Scalar nodes are checked for finiteness; batches feed scalar
    /// reductions, so a non-finite batch entry surfaces there.
    pub fn forward(&mut self, params: &[f64]) -> Result<(), AutodiffError> {
        if params.len() < self.n_params {
            return Err(AutodiffError::WrongKind { node: 0, op: "forward: short params" });
        }
        let Tape { ops, vals, .. } = self;
        for i in 0..ops.len() {
            let (done, rest) = vals.split_at_mut(i);
            let out = &mut rest[0];
            compute(&ops[i], done, out, params);
            if let Value::Scalar(s) = out {
                if !s.is_finite() {
                    return Err(AutodiffError::NonFiniteNode { node: i, op: op_name(&ops[i]) });
                }
            }
        }
        Ok(())
    }

    /// Value of a scalar node after [`Tape::forward`].
    pub fn scalar(&self, id: NodeId) -> Result<f64, AutodiffError> {
        match &self.vals[id.ix()] {
            Value::Scalar(s) => Ok(*s),
            _ => Err(AutodiffError::NotScalar { node: id.ix() }),
        }
    }

    /// Per-point values of a batch node after [`Tape::forward`].
    pub fn points(&self, id: NodeId) -> Result<&[f64], AutodiffError> {
        match &self.vals[id.ix()] {
            Value::Pts(v) => Ok(v),
            _ => Err(AutodiffError::WrongKind { node: id.ix(), op: "points" }),
        }
    }

    /// Reverse accumulation from a scalar output node. Returns the gradient
    /// of that output with respect to the full parameter vector. Requires a
    /// completed [`Tape::forward`] with the same parameters.
    pub fn backward(&mut self, output: NodeId, params: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        self.want_scalar(output, "backward")?;
        if matches!(self.vals[output.ix()], Value::Empty) {
            return Err(AutodiffError::WrongKind { node: output.ix(), op: "backward before forward" });
        }
        let mut grad = vec![0.0; self.n_params];
        let mut adj: Vec<Value> = vec![Value::Empty; self.ops.len()];
        adj[output.ix()] = Value::Scalar(1.0);

        for i in (0..=output.ix()).rev() {
            if matches!(adj[i], Value::Empty) {
                continue;
            }
            let (alo, ahi) = adj.split_at_mut(i);
            let aout = std::mem::replace(&mut ahi[0], Value::Empty);
            propagate(&self.ops[i], &self.shapes, &self.vals, aout, alo, &mut grad, params);
        }
        Ok(grad)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const(_) => "const",
        Op::Param(_) => "param",
        Op::Seed { .. } => "seed_points",
        Op::Affine { .. } => "affine",
        Op::Silu { .. } => "silu",
        Op::RlwResidual { .. } => "rlw_residual",
        Op::Field { .. } => "field",
        Op::SubConsts { .. } => "sub_consts",
        Op::Hadamard { .. } => "hadamard",
        Op::Axpy { .. } => "axpy",
        Op::MeanSquare { .. } => "mean_square",
        Op::Trapezoid { .. } => "trapezoid",
        Op::Add { .. } => "add",
        Op::SubScalar { .. } => "sub",
        Op::MulScalar { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::ExpNeg { .. } => "exp_neg",
        Op::Square { .. } => "square",
        Op::SumScaled { .. } => "sum_scaled",
    }
}

// ----- forward kernels ----------------------------------------------------

fn ensure_pts(slot: &mut Value, n: usize) -> &mut Vec<f64> {
    let ok = matches!(slot, Value::Pts(v) if v.len() == n);
    if !ok {
        *slot = Value::Pts(vec![0.0; n]);
    }
    match slot {
        Value::Pts(v) => v,
        _ => unreachable!(),
    }
}

fn ensure_jets(slot: &mut Value, n: usize, width: usize, comps: usize) -> &mut JetBuf {
    let ok = matches!(
        slot,
        Value::Jets(b) if b.n == n && b.width == width && b.comps == comps
    );
    if !ok {
        *slot = Value::Jets(JetBuf::zeroed(n, width, comps));
    }
    match slot {
        Value::Jets(b) => b,
        _ => unreachable!(),
    }
}

fn scalar_of(vals: &[Value], id: NodeId) -> f64 {
    match &vals[id.ix()] {
        Value::Scalar(s) => *s,
        _ => unreachable!("scalar operand"),
    }
}

fn pts_of(vals: &[Value], id: NodeId) -> &[f64] {
    match &vals[id.ix()] {
        Value::Pts(v) => v,
        _ => unreachable!("pts operand"),
    }
}

fn jets_of(vals: &[Value], id: NodeId) -> &JetBuf {
    match &vals[id.ix()] {
        Value::Jets(b) => b,
        _ => unreachable!("jets operand"),
    }
}

/// C = alpha * A(m x k) * B(k x n) + beta * C(m x n), deterministic.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn compute(op: &Op, done: &[Value], out: &mut Value, params: &[f64]) {
    match op {
        Op::Const(c) => *out = Value::Scalar(*c),
        Op::Param(idx) => *out = Value::Scalar(params[*idx as usize]),
        Op::Seed { pts, x_shift, x_scale, t_shift, t_scale, comps } => {
            let n = pts.len();
            let buf = ensure_jets(out, n, 2, *comps);
            buf.data.fill(0.0);
            let sz = n * 2;
            for (p, &(x, t)) in pts.iter().enumerate() {
                buf.data[p * 2] = (x - x_shift) * x_scale;
                buf.data[p * 2 + 1] = (t - t_shift) * t_scale;
            }
            if *comps >= 2 {
                let dx = &mut buf.data[sz..2 * sz];
                for p in 0..n {
                    dx[p * 2] = *x_scale;
                }
            }
            if *comps == 6 {
                let dt = &mut buf.data[2 * sz..3 * sz];
                for p in 0..n {
                    dt[p * 2 + 1] = *t_scale;
                }
            }
        }
        Op::Affine { input, w_off, b_off, n_in, n_out } => {
            let inp = jets_of(done, *input);
            let (n, comps) = (inp.n, inp.comps);
            let w = &params[*w_off..*w_off + n_in * n_out];
            let b = &params[*b_off..*b_off + n_out];
            let buf = ensure_jets(out, n, *n_out, comps);
            for c in 0..comps {
                let sz_out = n * n_out;
                let dst = &mut buf.data[c * sz_out..(c + 1) * sz_out];
                // dst = in_plane * W^T
                dgemm(
                    n,
                    *n_in,
                    *n_out,
                    1.0,
                    inp.plane(c),
                    *n_in as isize,
                    1,
                    w,
                    1,
                    *n_in as isize,
                    0.0,
                    dst,
                    *n_out as isize,
                    1,
                );
                if c == 0 {
                    for row in dst.chunks_exact_mut(*n_out) {
                        for (o, bo) in row.iter_mut().zip(b) {
                            *o += bo;
                        }
                    }
                }
            }
        }
        Op::Silu { input } => {
            let inp = jets_of(done, *input);
            let (n, width, comps) = (inp.n, inp.width, inp.comps);
            let sz = n * width;
            let buf = ensure_jets(out, n, width, comps);
            let op = buf.planes_mut();
            match comps {
                1 => {
                    let iv = inp.plane(0);
                    let [ov] = <[_; 1]>::try_from(op).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        ov[i] = d[0];
                    }
                }
                2 => {
                    let (iv, ix) = (inp.plane(0), inp.plane(1));
                    let [ov, ox] = <[_; 2]>::try_from(op).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        ov[i] = d[0];
                        ox[i] = d[1] * ix[i];
                    }
                }
                _ => {
                    let (iv, ix, it, ixt, ixx, ixxt) = (
                        inp.plane(0),
                        inp.plane(1),
                        inp.plane(2),
                        inp.plane(3),
                        inp.plane(4),
                        inp.plane(5),
                    );
                    let [ov, ox, ot, oxt, oxx, oxxt] = <[_; 6]>::try_from(op).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        let (dx, dt, dxt, dxx, dxxt) = (ix[i], it[i], ixt[i], ixx[i], ixxt[i]);
                        ov[i] = d[0];
                        ox[i] = d[1] * dx;
                        ot[i] = d[1] * dt;
                        oxt[i] = d[2] * dx * dt + d[1] * dxt;
                        oxx[i] = d[2] * dx * dx + d[1] * dxx;
                        oxxt[i] = d[3] * dt * dx * dx
                            + 2.0 * d[2] * dx * dxt
                            + d[2] * dt * dxx
                            + d[1] * dxxt;
                    }
                }
            }
        }
        Op::RlwResidual { input, eps, mu } => {
            let inp = jets_of(done, *input);
            let n = inp.n;
            let (v, dx, dt, dxxt) = (inp.plane(0), inp.plane(1), inp.plane(2), inp.plane(5));
            let r = ensure_pts(out, n);
            for i in 0..n {
                r[i] = dt[i] + dx[i] + eps * v[i] * dx[i] - mu * dxxt[i];
            }
        }
        Op::Field { input, comp } => {
            let inp = jets_of(done, *input);
            let plane = match comp {
                FieldComp::Value => inp.plane(0),
                FieldComp::Dx => inp.plane(1),
            };
            let dst = ensure_pts(out, inp.n);
            dst.copy_from_slice(plane);
        }
        Op::SubConsts { input, targets } => {
            let a = pts_of(done, *input);
            let dst = ensure_pts(out, a.len());
            for i in 0..a.len() {
                dst[i] = a[i] - targets[i];
            }
        }
        Op::Hadamard { a, b } => {
            let (av, bv) = (pts_of(done, *a), pts_of(done, *b));
            let dst = ensure_pts(out, av.len());
            for i in 0..av.len() {
                dst[i] = av[i] * bv[i];
            }
        }
        Op::Axpy { a, b, scale_b } => {
            let (av, bv) = (pts_of(done, *a), pts_of(done, *b));
            let dst = ensure_pts(out, av.len());
            for i in 0..av.len() {
                dst[i] = av[i] + scale_b * bv[i];
            }
        }
        Op::MeanSquare { input } => {
            let a = pts_of(done, *input);
            let mut acc = 0.0;
            for &x in a {
                acc += x * x;
            }
            *out = Value::Scalar(acc / a.len() as f64);
        }
        Op::Trapezoid { input, spacing } => {
            let a = pts_of(done, *input);
            let mut acc = 0.5 * (a[0] + a[a.len() - 1]);
            for &x in &a[1..a.len() - 1] {
                acc += x;
            }
            *out = Value::Scalar(acc * spacing);
        }
        Op::Add { a, b } => *out = Value::Scalar(scalar_of(done, *a) + scalar_of(done, *b)),
        Op::SubScalar { a, b } => {
            *out = Value::Scalar(scalar_of(done, *a) - scalar_of(done, *b))
        }
        Op::MulScalar { a, b } => {
            *out = Value::Scalar(scalar_of(done, *a) * scalar_of(done, *b))
        }
        Op::Scale { input, c } => *out = Value::Scalar(c * scalar_of(done, *input)),
        Op::ExpNeg { input } => *out = Value::Scalar((-scalar_of(done, *input)).exp()),
        Op::Square { input } => {
            let x = scalar_of(done, *input);
            *out = Value::Scalar(x * x);
        }
        Op::SumScaled { inputs, scale } => {
            let mut acc = 0.0;
            for &i in inputs {
                acc += scalar_of(done, i);
            }
            *out = Value::Scalar(scale * acc);
        }
    }
}

// ----- backward kernels -----------------------------------------------------

fn adj_scalar(adj: &mut [Value], id: NodeId) -> &mut f64 {
    let slot = &mut adj[id.ix()];
    let ok = matches!(slot, Value::Scalar(_));
    if !ok {
        *slot = Value::Scalar(0.0);
    }
    match slot {
        Value::Scalar(s) => s,
        _ => unreachable!(),
    }
}

fn adj_pts<'a>(adj: &'a mut [Value], id: NodeId, n: usize) -> &'a mut Vec<f64> {
    ensure_zeroed_pts(&mut adj[id.ix()], n)
}

fn ensure_zeroed_pts(slot: &mut Value, n: usize) -> &mut Vec<f64> {
    let ok = matches!(slot, Value::Pts(v) if v.len() == n);
    if !ok {
        *slot = Value::Pts(vec![0.0; n]);
    }
    match slot {
        Value::Pts(v) => v,
        _ => unreachable!(),
    }
}

fn adj_jets<'a>(adj: &'a mut [Value], id: NodeId, shape: Shape) -> &'a mut JetBuf {
    let (n, width, comps) = match shape {
        Shape::Jets { n, width, comps } => (n, width, comps),
        _ => unreachable!("jet adjoint"),
    };
    let slot = &mut adj[id.ix()];
    let ok = matches!(slot, Value::Jets(b) if b.n == n && b.width == width && b.comps == comps);
    if !ok {
        *slot = Value::Jets(JetBuf::zeroed(n, width, comps));
    }
    match slot {
        Value::Jets(b) => b,
        _ => unreachable!(),
    }
}

fn as_scalar(v: &Value) -> f64 {
    match v {
        Value::Scalar(s) => *s,
        _ => unreachable!("scalar adjoint"),
    }
}

fn as_pts(v: &Value) -> &[f64] {
    match v {
        Value::Pts(p) => p,
        _ => unreachable!("pts adjoint"),
    }
}

fn as_jets(v: &Value) -> &JetBuf {
    match v {
        Value::Jets(b) => b,
        _ => unreachable!("jets adjoint"),
    }
}

/// Push the adjoint `aout` of node `i` (with operation `op`) onto the
/// adjoints of its operands, accumulating parameter gradients in `grad`.
#[allow(clippy::too_many_arguments)]
fn propagate(
    op: &Op,
    shapes: &[Shape],
    vals: &[Value],
    aout: Value,
    alo: &mut [Value],
    grad: &mut [f64],
    params: &[f64],
) {
    match op {
        Op::Const(_) | Op::Seed { .. } => {}
        Op::Param(idx) => grad[*idx as usize] += as_scalar(&aout),
        Op::Affine { input, w_off, b_off, n_in, n_out } => {
            let oadj = as_jets(&aout);
            let inp = jets_of(vals, *input);
            let (n, comps) = (inp.n, inp.comps);
            let w = &params[*w_off..*w_off + n_in * n_out];
            // Weight gradient: sum over planes of oadj_c^T * in_c.
            for c in 0..comps {
                dgemm(
                    *n_out,
                    n,
                    *n_in,
                    1.0,
                    oadj.plane(c),
                    1,
                    *n_out as isize,
                    inp.plane(c),
                    *n_in as isize,
                    1,
                    1.0,
                    &mut grad[*w_off..*w_off + n_in * n_out],
                    *n_in as isize,
                    1,
                );
            }
            // Bias gradient: column sums of the value plane.
            let p0 = oadj.plane(0);
            for row in p0.chunks_exact(*n_out) {
                for (g, r) in grad[*b_off..*b_off + n_out].iter_mut().zip(row) {
                    *g += r;
                }
            }
            // Input adjoint: oadj_c * W.
            let iadj = adj_jets(alo, *input, shapes[input.ix()]);
            for c in 0..comps {
                let sz = n * n_in;
                dgemm(
                    n,
                    *n_out,
                    *n_in,
                    1.0,
                    oadj.plane(c),
                    *n_out as isize,
                    1,
                    w,
                    *n_in as isize,
                    1,
                    1.0,
                    &mut iadj.data[c * sz..(c + 1) * sz],
                    *n_in as isize,
                    1,
                );
            }
        }
        Op::Silu { input } => {
            let oadj = as_jets(&aout);
            let inp = jets_of(vals, *input);
            let (n, width, comps) = (inp.n, inp.width, inp.comps);
            let sz = n * width;
            let iadj = adj_jets(alo, *input, shapes[input.ix()]);
            let ia = iadj.planes_mut();
            match comps {
                1 => {
                    let iv = inp.plane(0);
                    let av = oadj.plane(0);
                    let [gv] = <[_; 1]>::try_from(ia).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        gv[i] += d[1] * av[i];
                    }
                }
                2 => {
                    let (iv, ix) = (inp.plane(0), inp.plane(1));
                    let (av, ax) = (oadj.plane(0), oadj.plane(1));
                    let [gv, gx] = <[_; 2]>::try_from(ia).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        gv[i] += d[1] * av[i] + d[2] * ix[i] * ax[i];
                        gx[i] += d[1] * ax[i];
                    }
                }
                _ => {
                    let (iv, ix, it, ixt, ixx, ixxt) = (
                        inp.plane(0),
                        inp.plane(1),
                        inp.plane(2),
                        inp.plane(3),
                        inp.plane(4),
                        inp.plane(5),
                    );
                    let (av, ax, at, axt, axx, axxt) = (
                        oadj.plane(0),
                        oadj.plane(1),
                        oadj.plane(2),
                        oadj.plane(3),
                        oadj.plane(4),
                        oadj.plane(5),
                    );
                    let [gv, gx, gt, gxt, gxx, gxxt] = <[_; 6]>::try_from(ia).ok().unwrap();
                    for i in 0..sz {
                        let d = silu_derivs(iv[i]);
                        let (dx, dt, dxt, dxx, dxxt) = (ix[i], it[i], ixt[i], ixx[i], ixxt[i]);
                        gv[i] += d[1] * av[i]
                            + d[2] * dx * ax[i]
                            + d[2] * dt * at[i]
                            + (d[3] * dx * dt + d[2] * dxt) * axt[i]
                            + (d[3] * dx * dx + d[2] * dxx) * axx[i]
                            + (d[4] * dt * dx * dx
                                + 2.0 * d[3] * dx * dxt
                                + d[3] * dt * dxx
                                + d[2] * dxxt)
                                * axxt[i];
                        gx[i] += d[1] * ax[i]
                            + d[2] * dt * axt[i]
                            + 2.0 * d[2] * dx * axx[i]
                            + 2.0 * (d[3] * dt * dx + d[2] * dxt) * axxt[i];
                        gt[i] += d[1] * at[i] + d[2] * dx * axt[i]
                            + (d[3] * dx * dx + d[2] * dxx) * axxt[i];
                        gxt[i] += d[1] * axt[i] + 2.0 * d[2] * dx * axxt[i];
                        gxx[i] += d[1] * axx[i] + d[2] * dt * axxt[i];
                        gxxt[i] += d[1] * axxt[i];
                    }
                }
            }
        }
        Op::RlwResidual { input, eps, mu } => {
            let radj = as_pts(&aout);
            let inp = jets_of(vals, *input);
            let n = inp.n;
            let (v, dx) = (inp.plane(0), inp.plane(1));
            let iadj = adj_jets(alo, *input, shapes[input.ix()]);
            let ia = iadj.planes_mut();
            let [gv, gx, gt, _gxt, _gxx, gxxt] = <[_; 6]>::try_from(ia).ok().unwrap();
            for i in 0..n {
                let rb = radj[i];
                gv[i] += eps * dx[i] * rb;
                gx[i] += (1.0 + eps * v[i]) * rb;
                gt[i] += rb;
                gxxt[i] -= mu * rb;
            }
        }
        Op::Field { input, comp } => {
            let padj = as_pts(&aout);
            let iadj = adj_jets(alo, *input, shapes[input.ix()]);
            let c = match comp {
                FieldComp::Value => 0,
                FieldComp::Dx => 1,
            };
            let sz = iadj.n * iadj.width;
            let plane = &mut iadj.data[c * sz..(c + 1) * sz];
            for i in 0..sz {
                plane[i] += padj[i];
            }
        }
        Op::SubConsts { input, .. } => {
            let padj = as_pts(&aout);
            let ia = adj_pts(alo, *input, padj.len());
            for i in 0..padj.len() {
                ia[i] += padj[i];
            }
        }
        Op::Hadamard { a, b } => {
            let padj = as_pts(&aout);
            let n = padj.len();
            let (av, bv) = (pts_of(vals, *a), pts_of(vals, *b));
            {
                let ia = adj_pts(alo, *a, n);
                for i in 0..n {
                    ia[i] += bv[i] * padj[i];
                }
            }
            let ib = adj_pts(alo, *b, n);
            for i in 0..n {
                ib[i] += av[i] * padj[i];
            }
        }
        Op::Axpy { a, b, scale_b } => {
            let padj = as_pts(&aout);
            let n = padj.len();
            {
                let ia = adj_pts(alo, *a, n);
                for i in 0..n {
                    ia[i] += padj[i];
                }
            }
            let ib = adj_pts(alo, *b, n);
            for i in 0..n {
                ib[i] += scale_b * padj[i];
            }
        }
        Op::MeanSquare { input } => {
            let sadj = as_scalar(&aout);
            let x = pts_of(vals, *input);
            let n = x.len();
            let w = 2.0 * sadj / n as f64;
            let ia = adj_pts(alo, *input, n);
            for i in 0..n {
                ia[i] += w * x[i];
            }
        }
        Op::Trapezoid { input, spacing } => {
            let sadj = as_scalar(&aout);
            let n = pts_of(vals, *input).len();
            let ia = adj_pts(alo, *input, n);
            let w = spacing * sadj;
            ia[0] += 0.5 * w;
            ia[n - 1] += 0.5 * w;
            for i in 1..n - 1 {
                ia[i] += w;
            }
        }
        Op::Add { a, b } => {
            let s = as_scalar(&aout);
            *adj_scalar(alo, *a) += s;
            *adj_scalar(alo, *b) += s;
        }
        Op::SubScalar { a, b } => {
            let s = as_scalar(&aout);
            *adj_scalar(alo, *a) += s;
            *adj_scalar(alo, *b) -= s;
        }
        Op::MulScalar { a, b } => {
            let s = as_scalar(&aout);
            let (av, bv) = (scalar_of(vals, *a), scalar_of(vals, *b));
            *adj_scalar(alo, *a) += bv * s;
            *adj_scalar(alo, *b) += av * s;
        }
        Op::Scale { input, c } => *adj_scalar(alo, *input) += c * as_scalar(&aout),
        Op::ExpNeg { input } => {
            // d/dx exp(-x) = -exp(-x), available as this node's own value.
            let own = match &vals[alo.len()] {
                Value::Scalar(s) => *s,
                _ => unreachable!(),
            };
            *adj_scalar(alo, *input) -= own * as_scalar(&aout);
        }
        Op::Square { input } => {
            let x = scalar_of(vals, *input);
            *adj_scalar(alo, *input) += 2.0 * x * as_scalar(&aout);
        }
        Op::SumScaled { inputs, scale } => {
            let s = scale * as_scalar(&aout);
            for &i in inputs {
                *adj_scalar(alo, i) += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_param_and_constant() {
        // f = p * x with p = 3, x = 2: df/dp = 2.
        let mut tape = Tape::new(1);
        let p = tape.param(0).unwrap();
        let x = tape.constant(2.0);
        let f = tape.mul(p, x).unwrap();
        tape.forward(&[3.0]).unwrap();
        assert_eq!(tape.scalar(f).unwrap(), 6.0);
        let g = tape.backward(f, &[3.0]).unwrap();
        assert_eq!(g, vec![2.0]);
    }

    #[test]
    fn square_of_param() {
        let mut tape = Tape::new(1);
        let p = tape.param(0).unwrap();
        let f = tape.square(p).unwrap();
        tape.forward(&[3.0]).unwrap();
        assert_eq!(tape.scalar(f).unwrap(), 9.0);
        assert_eq!(tape.backward(f, &[3.0]).unwrap(), vec![6.0]);

        // Same function written as p * p exercises repeated operands.
        let mut tape = Tape::new(1);
        let p = tape.param(0).unwrap();
        let f = tape.mul(p, p).unwrap();
        tape.forward(&[3.0]).unwrap();
        assert_eq!(tape.backward(f, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn exp_neg_gradient_uses_own_value() {
        let mut tape = Tape::new(1);
        let p = tape.param(0).unwrap();
        let f = tape.exp_neg(p).unwrap();
        tape.forward(&[0.7]).unwrap();
        let v = tape.scalar(f).unwrap();
        assert!((v - (-0.7_f64).exp()).abs() < 1e-15);
        let g = tape.backward(f, &[0.7]).unwrap();
        assert!((g[0] + v).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_and_mean_square_adjoints() {
        // f = mean_square(u - targets) + trapz(u) over a 3-point batch fed
        // by a width-1 affine layer u = w_x * x + w_t * t + b.
        let mut tape = Tape::new(3);
        let seed = tape
            .seed_points(vec![(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)], 0.0, 1.0, 0.0, 1.0, 1)
            .unwrap();
        let u = tape.affine(seed, 0, 2, 2, 1).unwrap();
        let uv = tape.field(u, FieldComp::Value).unwrap();
        let dev = tape.sub_consts(uv, vec![0.0, 1.0, 2.0]).unwrap();
        let ms = tape.mean_square(dev).unwrap();
        let tz = tape.trapezoid(uv, 0.5).unwrap();
        let f = tape.add(ms, tz).unwrap();

        let params = [2.0, 0.0, 0.25]; // u = 2x + 0.25
        tape.forward(&params).unwrap();
        // u = [0.25, 1.25, 2.25], dev = [0.25, 0.25, 0.25]
        let ms_v = tape.scalar(ms).unwrap();
        assert!((ms_v - 0.0625).abs() < 1e-15);
        let tz_v = tape.scalar(tz).unwrap();
        assert!((tz_v - 0.5 * (0.25 / 2.0 + 1.25 + 2.25 / 2.0)).abs() < 1e-15);

        // Central-difference check of the full gradient.
        let g = tape.backward(f, &params).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = params;
            pp[i] += h;
            tape.forward(&pp).unwrap();
            let fp = tape.scalar(f).unwrap();
            pp[i] -= 2.0 * h;
            tape.forward(&pp).unwrap();
            let fm = tape.scalar(f).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-7 * (1.0 + g[i].abs()),
                "param {i}: tape {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn forward_is_repeatable_bit_for_bit() {
        let mut tape = Tape::new(3);
        let seed = tape
            .seed_points(vec![(0.1, 0.2), (-0.4, 0.9)], 0.0, 1.0, 0.0, 1.0, 6)
            .unwrap();
        let u = tape.affine(seed, 0, 2, 2, 1).unwrap();
        let s = tape.silu(u).unwrap();
        let r = tape.rlw_residual(s, 1.0, 1.0).unwrap();
        let f = tape.mean_square(r).unwrap();
        let params = [0.73, -0.21, 0.05];
        tape.forward(&params).unwrap();
        let v1 = tape.scalar(f).unwrap();
        let g1 = tape.backward(f, &params).unwrap();
        tape.forward(&params).unwrap();
        let v2 = tape.scalar(f).unwrap();
        let g2 = tape.backward(f, &params).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_scalar_is_reported() {
        let mut tape = Tape::new(1);
        let p = tape.param(0).unwrap();
        let e = tape.exp_neg(p).unwrap();
        let _f = tape.square(e).unwrap();
        // exp(500) is finite; its square overflows, so the report names the
        // square node.
        let err = tape.forward(&[-500.0]).unwrap_err();
        match err {
            AutodiffError::NonFiniteNode { op, .. } => assert_eq!(op, "square"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn kind_errors_at_build_time() {
        let mut tape = Tape::new(4);
        let p = tape.param(0).unwrap();
        assert!(matches!(
            tape.silu(p),
            Err(AutodiffError::WrongKind { .. })
        ));
        let seed = tape
            .seed_points(vec![(0.0, 0.0)], 0.0, 1.0, 0.0, 1.0, 2)
            .unwrap();
        // Residual needs all six planes.
        let u = tape.affine(seed, 0, 2, 2, 1).unwrap();
        assert!(matches!(
            tape.rlw_residual(u, 1.0, 1.0),
            Err(AutodiffError::WrongKind { .. })
        ));
        assert!(matches!(
            tape.seed_points(vec![], 0.0, 1.0, 0.0, 1.0, 6),
            Err(AutodiffError::EmptyBatch { .. })
        ));
    }
}
