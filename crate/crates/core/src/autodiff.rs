//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation performed on [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the recorded nodes once in reverse
//! order and returns a [`Gradients`] table. Besides the elementwise and
//! reduction ops, the tape carries a handful of fused kernels (affine layer,
//! bilinear/trilinear gathers, alpha compositing, total variation) so that a
//! batch of ray samples costs a few nodes instead of millions.
//!
//! Broadcasting is limited to a one-element operand against a tensor.

use std::cell::{Ref, RefCell};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Exp(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat(Vec<usize>),
    Columns {
        x: usize,
        start: usize,
    },
    Bilinear {
        plane: usize,
        coords: usize,
    },
    Trilinear {
        grid: usize,
        coords: usize,
    },
    Composite {
        sigma: usize,
        color: usize,
        deltas: Vec<f64>,
    },
    TotalVariation {
        x: usize,
        axes: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Rebuilt for every training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
    first_error: RefCell<Option<AutodiffError>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
            first_error: RefCell::new(None),
        }
    }

    /// Tape that flags the first op producing NaN or Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First non-finite error recorded in checking mode.
    pub fn check(&self) -> Result<()> {
        match self.first_error.borrow().as_ref() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            let mut slot = self.first_error.borrow_mut();
            if slot.is_none() {
                *slot = Some(AutodiffError::NonFinite(op_name(&op)));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Runs reverse accumulation from a one-element loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Detach => "detach",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::Linear { .. } => "linear",
        Op::Concat(..) => "concat",
        Op::Columns { .. } => "columns",
        Op::Bilinear { .. } => "bilinear",
        Op::Trilinear { .. } => "trilinear",
        Op::Composite { .. } => "composite",
        Op::TotalVariation { .. } => "total_variation",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Adds `g` (length n) into operand `id`, reducing when the operand was a broadcast scalar.
fn accumulate_broadcast(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: impl Iterator<Item = f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    accumulate(grads, id, len, |slot| {
        if len == 1 {
            slot[0] += g.sum::<f64>();
        } else {
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
    });
}

fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let n = g.len();
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Add(a, b) => {
            accumulate_broadcast(grads, nodes, *a, g.iter().copied());
            accumulate_broadcast(grads, nodes, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate_broadcast(grads, nodes, *a, g.iter().copied());
            accumulate_broadcast(grads, nodes, *b, g.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| g[i] * bcast(bv, i)));
            accumulate_broadcast(grads, nodes, *b, (0..n).map(|i| g[i] * bcast(av, i)));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate_broadcast(grads, nodes, *a, g.iter().copied());
        }
        Op::MulScalar(a, k) => {
            accumulate_broadcast(grads, nodes, *a, g.iter().map(|v| v * k));
        }
        Op::Neg(a) => accumulate_broadcast(grads, nodes, *a, g.iter().map(|v| -v)),
        Op::Exp(a) => {
            let y = &node.value;
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| g[i] * y[i]));
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| if x[i] > 0.0 { g[i] } else { 0.0 }));
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| g[i] * y[i] * (1.0 - y[i])));
        }
        Op::Softplus(a) => {
            let x = &nodes[*a].value;
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| g[i] * sigmoid(x[i])));
        }
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            accumulate_broadcast(
                grads,
                nodes,
                *a,
                (0..n).map(|i| {
                    if x[i] > 0.0 {
                        g[i]
                    } else if x[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                }),
            );
        }
        Op::Square(a) => {
            let x = &nodes[*a].value;
            accumulate_broadcast(grads, nodes, *a, (0..n).map(|i| 2.0 * x[i] * g[i]));
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            accumulate_broadcast(
                grads,
                nodes,
                *a,
                (0..n).map(|i| if y[i] > 0.0 { 0.5 * g[i] / y[i] } else { 0.0 }),
            );
        }
        Op::Sum(a) => {
            let m = nodes[*a].value.len();
            accumulate_broadcast(grads, nodes, *a, std::iter::repeat_n(g[0], m));
        }
        Op::Mean(a) => {
            let m = nodes[*a].value.len();
            let v = g[0] / m as f64;
            accumulate_broadcast(grads, nodes, *a, std::iter::repeat_n(v, m));
        }
        Op::Linear { x, w, b } => backprop_linear(nodes, node, g, grads, *x, *w, *b),
        Op::Concat(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].shape[1];
                if nodes[p].requires_grad {
                    accumulate(grads, p, rows * width, |slot| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + width];
                            for (s, v) in slot[r * width..(r + 1) * width].iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                    });
                }
                offset += width;
            }
        }
        Op::Columns { x, start } => {
            if nodes[*x].requires_grad {
                let rows = node.shape[0];
                let width = node.shape[1];
                let total = nodes[*x].shape[1];
                accumulate(grads, *x, rows * total, |slot| {
                    for r in 0..rows {
                        for c in 0..width {
                            slot[r * total + start + c] += g[r * width + c];
                        }
                    }
                });
            }
        }
        Op::Bilinear { plane, coords } => backprop_bilinear(nodes, g, grads, *plane, *coords),
        Op::Trilinear { grid, coords } => backprop_trilinear(nodes, g, grads, *grid, *coords),
        Op::Composite { sigma, color, deltas } => backprop_composite(nodes, g, grads, *sigma, *color, deltas),
        Op::TotalVariation { x, axes } => {
            if nodes[*x].requires_grad {
                let src = &nodes[*x];
                let pairs = tv_pair_count(&src.shape, axes);
                let scale = 2.0 * g[0] / pairs as f64;
                accumulate(grads, *x, src.value.len(), |slot| {
                    for_each_tv_pair(&src.shape, axes, |i, j| {
                        let d = src.value[j] - src.value[i];
                        slot[j] += scale * d;
                        slot[i] -= scale * d;
                    });
                });
            }
        }
    }
}

fn backprop_linear(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    b: usize,
) {
    let rows = node.shape[0];
    let out = node.shape[1];
    let inp = nodes[x].shape[1];
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    if nodes[x].requires_grad {
        accumulate(grads, x, rows * inp, |gx| {
            for r in 0..rows {
                let gx_row = &mut gx[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let go = g[r * out + o];
                    if go == 0.0 {
                        continue;
                    }
                    for (s, wv) in gx_row.iter_mut().zip(&wv[o * inp..(o + 1) * inp]) {
                        *s += go * wv;
                    }
                }
            }
        });
    }
    if nodes[w].requires_grad {
        accumulate(grads, w, out * inp, |gw| {
            for r in 0..rows {
                let x_row = &xv[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let go = g[r * out + o];
                    if go == 0.0 {
                        continue;
                    }
                    for (s, xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x_row) {
                        *s += go * xv;
                    }
                }
            }
        });
    }
    if nodes[b].requires_grad {
        accumulate(grads, b, out, |gb| {
            for r in 0..rows {
                for o in 0..out {
                    gb[o] += g[r * out + o];
                }
            }
        });
    }
}

/// Continuous grid position of a normalized coordinate in `[-1, 1]` (corners aligned).
/// Returns (lower index, fraction, d position / d coordinate).
fn grid_position(coord: f64, size: usize) -> (usize, f64, f64) {
    let scale = (size - 1) as f64 / 2.0;
    let (c, dpos) = if coord < -1.0 {
        (-1.0, 0.0)
    } else if coord > 1.0 {
        (1.0, 0.0)
    } else {
        (coord, scale)
    };
    let pos = (c + 1.0) * scale;
    let lo = (pos.floor() as usize).min(size - 2);
    (lo, pos - lo as f64, dpos)
}

fn backprop_bilinear(nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>], plane: usize, coords: usize) {
    let p = &nodes[plane];
    let (ch, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
    let cv = &nodes[coords].value;
    let points = cv.len() / 2;
    let hw = h * w;
    if p.requires_grad {
        accumulate(grads, plane, p.value.len(), |gp| {
            for n in 0..points {
                let (x0, fx, _) = grid_position(cv[2 * n], w);
                let (y0, fy, _) = grid_position(cv[2 * n + 1], h);
                let base = y0 * w + x0;
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                for c in 0..ch {
                    let gv = g[n * ch + c];
                    let o = c * hw + base;
                    gp[o] += w00 * gv;
                    gp[o + 1] += w01 * gv;
                    gp[o + w] += w10 * gv;
                    gp[o + w + 1] += w11 * gv;
                }
            }
        });
    }
    if nodes[coords].requires_grad {
        accumulate(grads, coords, cv.len(), |gc| {
            for n in 0..points {
                let (x0, fx, dx) = grid_position(cv[2 * n], w);
                let (y0, fy, dy) = grid_position(cv[2 * n + 1], h);
                let base = y0 * w + x0;
                let (mut sx, mut sy) = (0.0, 0.0);
                for c in 0..ch {
                    let gv = g[n * ch + c];
                    let o = c * hw + base;
                    let (p00, p01, p10, p11) = (p.value[o], p.value[o + 1], p.value[o + w], p.value[o + w + 1]);
                    sx += gv * ((1.0 - fy) * (p01 - p00) + fy * (p11 - p10));
                    sy += gv * ((1.0 - fx) * (p10 - p00) + fx * (p11 - p01));
                }
                gc[2 * n] += sx * dx;
                gc[2 * n + 1] += sy * dy;
            }
        });
    }
}

struct TrilinearCell {
    offsets: [usize; 8],
    weights: [f64; 8],
    // partial derivatives of the weights wrt (x, y, z) coordinates
    dweights: [[f64; 8]; 3],
}

/// Grid layout `[Dy, Dx, Dz]`; coordinate order `(x, y, z)`.
fn trilinear_cell(shape: &[usize], x: f64, y: f64, z: f64) -> TrilinearCell {
    let (dy, dx, dz) = (shape[0], shape[1], shape[2]);
    let (ix, fx, sx) = grid_position(x, dx);
    let (iy, fy, sy) = grid_position(y, dy);
    let (iz, fz, sz) = grid_position(z, dz);
    let _ = dy;
    let mut offsets = [0usize; 8];
    let mut weights = [0.0; 8];
    let mut dweights = [[0.0; 8]; 3];
    let mut k = 0;
    for (oy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
        for (ox, wx) in [(0usize, 1.0 - fx), (1, fx)] {
            for (oz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
                offsets[k] = ((iy + oy) * dx + (ix + ox)) * dz + (iz + oz);
                weights[k] = wy * wx * wz;
                let sgn = |o: usize| if o == 1 { 1.0 } else { -1.0 };
                dweights[0][k] = sgn(ox) * wy * wz * sx;
                dweights[1][k] = sgn(oy) * wx * wz * sy;
                dweights[2][k] = sgn(oz) * wx * wy * sz;
                k += 1;
            }
        }
    }
    TrilinearCell {
        offsets,
        weights,
        dweights,
    }
}

fn backprop_trilinear(nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>], grid: usize, coords: usize) {
    let gr = &nodes[grid];
    let cv = &nodes[coords].value;
    let points = cv.len() / 3;
    if gr.requires_grad {
        accumulate(grads, grid, gr.value.len(), |gg| {
            for n in 0..points {
                let cell = trilinear_cell(&gr.shape, cv[3 * n], cv[3 * n + 1], cv[3 * n + 2]);
                for k in 0..8 {
                    gg[cell.offsets[k]] += cell.weights[k] * g[n];
                }
            }
        });
    }
    if nodes[coords].requires_grad {
        accumulate(grads, coords, cv.len(), |gc| {
            for n in 0..points {
                let cell = trilinear_cell(&gr.shape, cv[3 * n], cv[3 * n + 1], cv[3 * n + 2]);
                for a in 0..3 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += cell.dweights[a][k] * gr.value[cell.offsets[k]];
                    }
                    gc[3 * n + a] += s * g[n];
                }
            }
        });
    }
}

fn backprop_composite(
    nodes: &[Node],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    sigma: usize,
    color: usize,
    deltas: &[f64],
) {
    let sv = &nodes[sigma].value;
    let cv = &nodes[color].value;
    let (rays, k) = (nodes[sigma].shape[0], nodes[sigma].shape[1]);
    let mut trans = vec![0.0; k + 1];
    let mut weights = vec![0.0; k];
    let want_sigma = nodes[sigma].requires_grad;
    let want_color = nodes[color].requires_grad;
    let mut gs = if want_sigma { vec![0.0; sv.len()] } else { Vec::new() };
    let mut gc = if want_color { vec![0.0; cv.len()] } else { Vec::new() };
    for r in 0..rays {
        let base = r * k;
        trans[0] = 1.0;
        let mut acc = 0.0;
        for j in 0..k {
            let tau = sv[base + j] * deltas[base + j];
            acc += tau;
            trans[j + 1] = (-acc).exp();
            weights[j] = trans[j] * (1.0 - (-tau).exp());
        }
        let gr = &g[r * 4..r * 4 + 4];
        if want_color {
            for j in 0..k {
                for c in 0..3 {
                    gc[(base + j) * 3 + c] += weights[j] * gr[c];
                }
            }
        }
        if want_sigma {
            // suffix[j] = sum_{i > j} w_i (g . c_i)
            let mut suffix = 0.0;
            let t_end = trans[k];
            for j in (0..k).rev() {
                let gdotc: f64 = (0..3).map(|c| gr[c] * cv[(base + j) * 3 + c]).sum();
                let dtau = trans[j + 1] * gdotc - suffix + gr[3] * t_end;
                gs[base + j] += dtau * deltas[base + j];
                suffix += weights[j] * gdotc;
            }
        }
    }
    if want_sigma {
        accumulate(grads, sigma, sv.len(), |slot| {
            for (s, v) in slot.iter_mut().zip(&gs) {
                *s += v;
            }
        });
    }
    if want_color {
        accumulate(grads, color, cv.len(), |slot| {
            for (s, v) in slot.iter_mut().zip(&gc) {
                *s += v;
            }
        });
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn tv_pair_count(shape: &[usize], axes: &[usize]) -> usize {
    let total = numel(shape);
    axes.iter()
        .map(|&a| if shape[a] == 0 { 0 } else { total / shape[a] * (shape[a] - 1) })
        .sum()
}

fn for_each_tv_pair(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let total = numel(shape);
    for &a in axes {
        let stride = st[a];
        for i in 0..total {
            let coord = (i / stride) % shape[a];
            if coord + 1 < shape[a] {
                f(i, i + stride);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        Tensor {
            shape: nodes[self.id].shape.clone(),
            data: nodes[self.id].value.clone(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = if a.shape == b.shape || b.value.len() == 1 {
                a.shape.clone()
            } else if a.value.len() == 1 {
                b.shape.clone()
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            };
            let n = numel(&shape);
            let value = (0..n).map(|i| f(bcast(&a.value, i), bcast(&b.value, i))).collect();
            (shape, value)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(|v| v + k, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, k: f64) -> Var<'t> {
        self.unary(|v| v * k, Op::MulScalar(self.id, k))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, Op::Detach, false)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.value().iter().sum();
        self.tape.push(vec![], vec![v], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let v = {
            let vals = self.value();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        self.tape.push(vec![], vec![v], Op::Mean(self.id), self.requires_grad())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if numel(&shape) != n.value.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    left: n.shape.clone(),
                    right: shape,
                });
            }
            n.value.clone()
        };
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Row-wise affine map: `x [N, in]`, `w [out, in]`, `b [out]` -> `[N, out]`.
    pub fn linear(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (xn, wn, bn) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            if xn.shape.len() != 2 || wn.shape.len() != 2 || wn.shape[1] != xn.shape[1] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear",
                    left: xn.shape.clone(),
                    right: wn.shape.clone(),
                });
            }
            if bn.shape != [wn.shape[0]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear",
                    left: wn.shape.clone(),
                    right: bn.shape.clone(),
                });
            }
            let (rows, inp, out) = (xn.shape[0], xn.shape[1], wn.shape[0]);
            let mut y = vec![0.0; rows * out];
            for r in 0..rows {
                let x_row = &xn.value[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let w_row = &wn.value[o * inp..(o + 1) * inp];
                    y[r * out + o] = bn.value[o] + dot(x_row, w_row);
                }
            }
            (vec![rows, out], y)
        };
        let rg = self.tape.requires(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            value.0,
            value.1,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }

    /// Concatenates 2D tensors `[N, a_i]` along the column axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of nothing".into()))?
            .tape;
        let (shape, value) = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[parts[0].id].shape[0];
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != 2 || s[0] != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        left: nodes[parts[0].id].shape.clone(),
                        right: s.clone(),
                    });
                }
                total += s[1];
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let n = &nodes[p.id];
                    let w = n.shape[1];
                    out.extend_from_slice(&n.value[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, total], out)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(shape, value, Op::Concat(ids), rg))
    }

    /// Column range `start..end` of a 2D tensor.
    pub fn columns(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 || start >= end || end > n.shape[1] {
                return Err(AutodiffError::InvalidArgument(format!(
                    "columns {start}..{end} of {:?}",
                    n.shape
                )));
            }
            let (rows, total) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&n.value[r * total + start..r * total + end]);
            }
            (vec![rows, end - start], out)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Columns { x: self.id, start },
            self.requires_grad(),
        ))
    }

    /// Samples a `[C, H, W]` plane at `[N, 2]` normalized coordinates.
    /// The first coordinate indexes W, the second H; corners are aligned to ±1
    /// and out-of-range coordinates clamp to the border. Output `[N, C]`.
    pub fn bilinear(&self, coords: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (p, c) = (&nodes[self.id], &nodes[coords.id]);
            if p.shape.len() != 3 || p.shape[1] < 2 || p.shape[2] < 2 || c.shape.len() != 2 || c.shape[1] != 2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bilinear",
                    left: p.shape.clone(),
                    right: c.shape.clone(),
                });
            }
            let (ch, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
            let points = c.shape[0];
            let hw = h * w;
            let mut out = vec![0.0; points * ch];
            for n in 0..points {
                let (x0, fx, _) = grid_position(c.value[2 * n], w);
                let (y0, fy, _) = grid_position(c.value[2 * n + 1], h);
                let base = y0 * w + x0;
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                for k in 0..ch {
                    let o = k * hw + base;
                    out[n * ch + k] =
                        w00 * p.value[o] + w01 * p.value[o + 1] + w10 * p.value[o + w] + w11 * p.value[o + w + 1];
                }
            }
            (vec![points, ch], out)
        };
        let rg = self.tape.requires(&[self.id, coords.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Bilinear {
                plane: self.id,
                coords: coords.id,
            },
            rg,
        ))
    }

    /// Samples a `[Dy, Dx, Dz]` grid at `[N, 3]` normalized `(x, y, z)` coordinates. Output `[N, 1]`.
    pub fn trilinear(&self, coords: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (gr, c) = (&nodes[self.id], &nodes[coords.id]);
            if gr.shape.len() != 3 || gr.shape.iter().any(|&d| d < 2) || c.shape.len() != 2 || c.shape[1] != 3 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "trilinear",
                    left: gr.shape.clone(),
                    right: c.shape.clone(),
                });
            }
            let points = c.shape[0];
            let out: Vec<f64> = (0..points)
                .map(|n| {
                    let cell = trilinear_cell(&gr.shape, c.value[3 * n], c.value[3 * n + 1], c.value[3 * n + 2]);
                    (0..8).map(|k| cell.weights[k] * gr.value[cell.offsets[k]]).sum()
                })
                .collect();
            (vec![points, 1], out)
        };
        let rg = self.tape.requires(&[self.id, coords.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Trilinear {
                grid: self.id,
                coords: coords.id,
            },
            rg,
        ))
    }

    /// Front-to-back alpha compositing of `sigma [R, K]` and `color [R, K, 3]`
    /// with per-sample spacings `deltas` (length R*K). Output `[R, 4]`: RGB then
    /// accumulated opacity.
    pub fn composite(sigma: Var<'t>, color: Var<'t>, deltas: Vec<f64>) -> Result<Var<'t>> {
        let tape = sigma.tape;
        let (shape, value) = {
            let nodes = tape.nodes.borrow();
            let (s, c) = (&nodes[sigma.id], &nodes[color.id]);
            if s.shape.len() != 2 || c.shape != [s.shape[0], s.shape[1], 3] || deltas.len() != s.value.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "composite",
                    left: s.shape.clone(),
                    right: c.shape.clone(),
                });
            }
            let (rays, k) = (s.shape[0], s.shape[1]);
            let mut out = vec![0.0; rays * 4];
            for r in 0..rays {
                let mut acc = 0.0;
                let mut t = 1.0;
                for j in 0..k {
                    let i = r * k + j;
                    let tau = s.value[i] * deltas[i];
                    let w = t * (1.0 - (-tau).exp());
                    for ch in 0..3 {
                        out[r * 4 + ch] += w * c.value[i * 3 + ch];
                    }
                    acc += tau;
                    t = (-acc).exp();
                }
                out[r * 4 + 3] = 1.0 - t;
            }
            (vec![rays, 4], out)
        };
        let rg = tape.requires(&[sigma.id, color.id]);
        Ok(tape.push(
            shape,
            value,
            Op::Composite {
                sigma: sigma.id,
                color: color.id,
                deltas,
            },
            rg,
        ))
    }

    /// Mean of squared differences between neighbours along `axes`, pooled over all pairs.
    pub fn total_variation(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axes.iter().any(|&a| a >= n.shape.len()) {
                return Err(AutodiffError::InvalidArgument(format!(
                    "tv axes {axes:?} for shape {:?}",
                    n.shape
                )));
            }
            let pairs = tv_pair_count(&n.shape, axes);
            let mut s = 0.0;
            for_each_tv_pair(&n.shape, axes, |i, j| {
                let d = n.value[j] - n.value[i];
                s += d * d;
            });
            if pairs == 0 {
                0.0
            } else {
                s / pairs as f64
            }
        };
        Ok(self.tape.push(
            vec![],
            vec![v],
            Op::TotalVariation {
                x: self.id,
                axes: axes.to_vec(),
            },
            self.requires_grad(),
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a var that requires grad and was reached from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` was not reached.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor {
                shape,
                data: g.to_vec(),
            },
            None => Tensor::zeros(shape),
        }
    }
}

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// Returns max over coordinates of `|a - n| / (|a| + |n| + delta)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_difference_check_with_floor(f, x, h, 1e-6)
}

pub fn finite_difference_check_with_floor<F>(f: F, x: &Tensor, h: f64, delta: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(AutodiffError::InvalidArgument(format!("step {h} must be positive")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x);
        let loss = f(&tape, xv)?;
        tape.backward(loss)?.tensor(xv)
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.param(t);
        Ok(f(&tape, xv)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + delta));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn add_forward_and_backward() {
        let tape = Tape::new();
        let a = tape.param(&t(&[1.0, 2.0]));
        let b = tape.param(&t(&[3.0, 4.0]));
        let y = a.add(b).unwrap();
        assert_eq!(&*y.value(), &[4.0, 6.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_and_exp() {
        let tape = Tape::new();
        let x = tape.param(&t(&[-1.0, 2.0]));
        let y = x.relu();
        assert_eq!(&*y.value(), &[0.0, 2.0]);
        assert_eq!(tape.backward(y.sum()).unwrap().get(x).unwrap(), &[0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(&t(&[0.0]));
        let y = x.exp();
        assert_eq!(y.item(), 1.0);
        assert_eq!(tape.backward(y.sum()).unwrap().get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(&t(&[1.0, 2.0]));
        let d = x.detach();
        assert_eq!(&*d.value(), &[1.0, 2.0]);
        let loss = d.sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.tensor(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn straight_through_combination() {
        // x + (x - detach(x)): forward equals x, backward 1 + 1 + 0.
        let tape = Tape::new();
        let x = tape.param(&t(&[0.3, -1.7]));
        let y = x.add(x.sub(x.detach()).unwrap()).unwrap();
        assert_eq!(&*y.value(), &[0.3, -1.7]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn square_and_mean() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3.0]));
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let tape = Tape::new();
        let x = tape.param(&t(&[5.0, 7.0]));
        let g = tape.backward(x.mean()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let tape = Tape::new();
        let x = tape.param(&t(&[1.0, -2.0, 0.5]));
        let once = tape.backward(x.square().sum()).unwrap().tensor(x);
        let tape = Tape::new();
        let x = tape.param(&t(&[1.0, -2.0, 0.5]));
        let s = x.square();
        let three = s.add(s).unwrap().add(s).unwrap().sum();
        let g = tape.backward(three).unwrap().tensor(x);
        for (a, b) in g.data().iter().zip(once.data()) {
            assert_eq!(*a, 3.0 * b);
        }
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.param(&t(&[1.0, 2.0]));
        let b = tape.param(&t(&[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(tape.backward(a), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn scalar_broadcast() {
        let tape = Tape::new();
        let a = tape.param(&t(&[1.0, 2.0, 3.0]));
        let k = tape.param(&Tensor::scalar(2.0));
        let y = a.mul(k).unwrap();
        assert_eq!(&*y.value(), &[2.0, 4.0, 6.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(k).unwrap(), &[6.0]);
    }

    #[test]
    fn finite_checks_flag_nan() {
        let tape = Tape::with_finite_checks();
        let x = tape.param(&t(&[-1.0]));
        let y = x.sqrt();
        assert!(matches!(tape.backward(y.sum()), Err(AutodiffError::NonFinite("sqrt"))));
    }

    #[test]
    fn fd_check_examples() {
        let err = finite_difference_check(|_, x| Ok(x.square().sum()), &t(&[1.0, 2.0]), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_difference_check(|_, x| Ok(x.sum()), &t(&[0.3, -4.0, 9.0]), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        let err = finite_difference_check(|_, x| Ok(x.relu().sum()), &t(&[1.0]), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fused_kernels_match_finite_differences() {
        // linear + concat + columns + sigmoid/softplus/abs
        let x = Tensor::new(vec![3, 2], vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.9]).unwrap();
        fn f<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
            let w = tape.constant_from(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
            let b = tape.constant_from(vec![3], vec![0.1, -0.2, 0.05])?;
            let cat = Var::concat(&[x, x.square()])?;
            let y = cat.linear(w, b)?;
            let a = y.columns(0, 1)?.softplus();
            let c = y.columns(1, 3)?.sigmoid();
            a.sum().add(c.exp().sum())?.add(y.abs().mean())
        }
        assert!(finite_difference_check(f, &x, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn gather_kernels_match_finite_differences() {
        let plane = Tensor::new(vec![2, 3, 4], (0..24).map(|i| ((i * 7 % 11) as f64) * 0.1).collect()).unwrap();
        let coords = Tensor::new(vec![3, 2], vec![0.13, -0.41, -0.77, 0.52, 0.31, 0.88]).unwrap();
        let c2 = coords.clone();
        let err = finite_difference_check(
            move |tape, p| Ok(p.bilinear(tape.constant(&c2))?.square().sum()),
            &plane,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let p2 = plane.clone();
        let err = finite_difference_check(
            move |tape, c| Ok(tape.constant(&p2).bilinear(c)?.square().sum()),
            &coords,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let grid = Tensor::new(vec![2, 3, 4], (0..24).map(|i| ((i * 5 % 13) as f64) * 0.2).collect()).unwrap();
        let pts = Tensor::new(vec![2, 3], vec![0.13, -0.41, 0.2, -0.77, 0.52, -0.6]).unwrap();
        let p3 = pts.clone();
        let err = finite_difference_check(
            move |tape, g| Ok(g.trilinear(tape.constant(&p3))?.square().sum()),
            &grid,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let g2 = grid.clone();
        let err = finite_difference_check(
            move |tape, c| Ok(tape.constant(&g2).trilinear(c)?.square().sum()),
            &pts,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn composite_matches_finite_differences() {
        let sigma = Tensor::new(vec![2, 3], vec![0.5, 1.2, 0.1, 2.0, 0.3, 0.9]).unwrap();
        let color = Tensor::new(vec![2, 3, 3], (0..18).map(|i| 0.05 * i as f64).collect()).unwrap();
        let deltas = vec![0.3, 0.2, 0.4, 0.25, 0.25, 0.5];
        let (c2, d2) = (color.clone(), deltas.clone());
        let weights = Tensor::new(vec![2, 4], vec![1.0, -0.5, 0.3, 2.0, 0.2, 0.7, -1.0, 0.4]).unwrap();
        let w2 = weights.clone();
        let err = finite_difference_check(
            move |tape, s| {
                let out = Var::composite(s, tape.constant(&c2), d2.clone())?;
                Ok(out.mul(tape.constant(&w2))?.square().sum())
            },
            &sigma,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let err = finite_difference_check(
            move |tape, c| {
                let out = Var::composite(tape.constant(&sigma), c, deltas.clone())?;
                Ok(out.mul(tape.constant(&weights))?.square().sum())
            },
            &color,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn total_variation_pools_pairs() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let tv = x.total_variation(&[1, 2]).unwrap();
        assert_eq!(tv.item(), 0.5);
        let x = Tensor::new(vec![2, 3, 3], (0..18).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        let err = finite_difference_check(|_, x| x.total_variation(&[0, 1, 2]), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
