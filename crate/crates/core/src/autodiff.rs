//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive application appends a node holding its output value to a
//! [`Tape`]. Nodes are only ever appended, so the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves come in two flavours: [`Tape::param`] leaves receive gradients,
//! [`Tape::constant`] leaves do not. Nodes that depend on no parameter are
//! skipped during the backward sweep, which makes frozen forward passes (a
//! distillation teacher, evaluation) essentially free to differentiate around.

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, broadcast_binary, reduce_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `m x k` times `k x n`.
    MatMul,
    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    Relu,
    Square,
    Sqrt,
    Abs,
    SumAll,
    MeanAll,
    /// Sum over one axis, removing it.
    SumAxis(usize),
    /// Mean over one axis, removing it.
    MeanAxis(usize),
    /// Euclidean norm over one axis, removing it.
    NormAxis(usize),
    Scale(f64),
    AddScalar(f64),
    /// Broadcast a one-element tensor to the given shape.
    BroadcastScalar(Vec<usize>),
    Reshape(Vec<usize>),
    /// Gather along the leading axis.
    SelectRows(Vec<usize>),
    /// 3x3 convolution with zero padding 1. Inputs: `B x C x H x W` input,
    /// `O x C x 3 x 3` kernel, `O` bias.
    Conv2d { stride: usize },
    /// `B x C x H x W` to `B x C`.
    GlobalAvgPool,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Div => "divide",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Abs => "abs",
            Primitive::SumAll => "sum",
            Primitive::MeanAll => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::NormAxis(_) => "norm_axis",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::BroadcastScalar(_) => "broadcast_scalar",
            Primitive::Reshape(_) => "reshape",
            Primitive::SelectRows(_) => "select_rows",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
            Primitive::Conv2d { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(None, Vec::new(), value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Option<Primitive>, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on the given nodes and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::Domain {
                op: op.name(),
                msg: format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), out, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SumAll, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MeanAll, &[a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::MeanAxis(axis), &[a])
    }

    pub fn norm_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::NormAxis(axis), &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::AddScalar(c), &[a])
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::BroadcastScalar(shape.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::SelectRows(rows.to_vec()), &[a])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv2d { stride }, &[x, kernel, bias])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    /// Propagates d(root)/d(node) to every node reachable from `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| self.value(i)).collect();
            let input_grads = vjp(op, &inputs, &node.value, &upstream);
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`]; gradients are retained for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves not reachable from the root
    /// get zeros of the leaf's shape.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Domain {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn forward(op: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Primitive::Add => broadcast_binary(name, x[0], x[1], |a, b| a + b),
        Primitive::Sub => broadcast_binary(name, x[0], x[1], |a, b| a - b),
        Primitive::Mul => broadcast_binary(name, x[0], x[1], |a, b| a * b),
        Primitive::Div => {
            if x[1].data().contains(&0.0) {
                return Err(Error::Domain {
                    op: name,
                    msg: "division by zero".into(),
                });
            }
            broadcast_binary(name, x[0], x[1], |a, b| a / b)
        }
        Primitive::MatMul => x[0].matmul(x[1]),
        Primitive::Relu => Ok(x[0].map(|v| if v < 0.0 { 0.0 } else { v })),
        Primitive::Square => Ok(x[0].map(|v| v * v)),
        Primitive::Sqrt => {
            if let Some(v) = x[0].data().iter().find(|v| **v < 0.0) {
                return Err(Error::Domain {
                    op: name,
                    msg: format!("square root of negative value {v}"),
                });
            }
            Ok(x[0].map(f64::sqrt))
        }
        Primitive::Abs => Ok(x[0].map(f64::abs)),
        Primitive::SumAll => Ok(Tensor::scalar(x[0].sum())),
        Primitive::MeanAll => {
            if x[0].numel() == 0 {
                return Err(Error::Domain {
                    op: name,
                    msg: "mean of empty tensor".into(),
                });
            }
            Ok(Tensor::scalar(x[0].sum() / x[0].numel() as f64))
        }
        Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) | Primitive::NormAxis(axis) => {
            check_axis(name, x[0].shape(), *axis)?;
            let (outer, len, inner) = axis_extents(x[0].shape(), *axis);
            let data = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        let v = data[base + i];
                        out[o * inner + i] += if matches!(op, Primitive::NormAxis(_)) { v * v } else { v };
                    }
                }
            }
            match op {
                Primitive::MeanAxis(_) => out.iter_mut().for_each(|v| *v /= len as f64),
                Primitive::NormAxis(_) => out.iter_mut().for_each(|v| *v = v.sqrt()),
                _ => {}
            }
            Tensor::new(removed_axis(x[0].shape(), *axis), out)
        }
        Primitive::Scale(c) => Ok(x[0].map(|v| v * c)),
        Primitive::AddScalar(c) => Ok(x[0].map(|v| v + c)),
        Primitive::BroadcastScalar(shape) => {
            if !x[0].is_scalar() {
                return Err(Error::shape(name, x[0].shape(), shape));
            }
            Ok(Tensor::full(shape, x[0].item()))
        }
        Primitive::Reshape(shape) => x[0].reshape(shape),
        Primitive::SelectRows(rows) => x[0].select_rows(rows),
        Primitive::Conv2d { stride } => conv2d_forward(x[0], x[1], x[2], *stride),
        Primitive::GlobalAvgPool => {
            let s = x[0].shape();
            if s.len() != 4 {
                return Err(Error::shape(name, s, &[0, 0, 0, 0]));
            }
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let data = x[0].data();
            let out = (0..b * c)
                .map(|bc| data[bc * hw..(bc + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::new(vec![b, c], out)
        }
    }
}

/// Vector-Jacobian products: gradients for each input given the upstream
/// gradient of the output.
fn vjp(op: &Primitive, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match op {
        Primitive::Add => vec![reduce_to_shape(g, x[0].shape()), reduce_to_shape(g, x[1].shape())],
        Primitive::Sub => vec![
            reduce_to_shape(g, x[0].shape()),
            reduce_to_shape(&g.map(|v| -v), x[1].shape()),
        ],
        Primitive::Mul => {
            let ga = broadcast_binary("multiply", g, x[1], |g, b| g * b).expect("shape checked in forward");
            let gb = broadcast_binary("multiply", g, x[0], |g, a| g * a).expect("shape checked in forward");
            vec![reduce_to_shape(&ga, x[0].shape()), reduce_to_shape(&gb, x[1].shape())]
        }
        Primitive::Div => {
            let ga = broadcast_binary("divide", g, x[1], |g, b| g / b).expect("shape checked in forward");
            // d(a/b)/db = -(a/b)/b = -out/b
            let gb_full = broadcast_binary("divide", &g.zip_map(out, |g, q| -g * q), x[1], |v, b| v / b)
                .expect("shape checked in forward");
            vec![reduce_to_shape(&ga, x[0].shape()), reduce_to_shape(&gb_full, x[1].shape())]
        }
        Primitive::MatMul => {
            let ga = g.matmul(&x[1].transpose()).expect("shape checked in forward");
            let gb = x[0].transpose().matmul(g).expect("shape checked in forward");
            vec![ga, gb]
        }
        Primitive::Relu => vec![x[0].zip_map(g, |v, g| if v > 0.0 { g } else { 0.0 })],
        Primitive::Square => vec![x[0].zip_map(g, |v, g| 2.0 * v * g)],
        Primitive::Sqrt => vec![out.zip_map(g, |y, g| if y > 0.0 { 0.5 * g / y } else { 0.0 })],
        Primitive::Abs => vec![x[0].zip_map(g, |v, g| {
            if v > 0.0 {
                g
            } else if v < 0.0 {
                -g
            } else {
                0.0
            }
        })],
        Primitive::SumAll => vec![Tensor::full(x[0].shape(), g.item())],
        Primitive::MeanAll => vec![Tensor::full(x[0].shape(), g.item() / x[0].numel() as f64)],
        Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) | Primitive::NormAxis(axis) => {
            let (outer, len, inner) = axis_extents(x[0].shape(), *axis);
            let gd = g.data();
            let xd = x[0].data();
            let od = out.data();
            let mut res = Tensor::zeros(x[0].shape());
            let rd = res.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        let r = o * inner + i;
                        rd[base + i] = match op {
                            Primitive::SumAxis(_) => gd[r],
                            Primitive::MeanAxis(_) => gd[r] / len as f64,
                            _ if od[r] > 0.0 => gd[r] * xd[base + i] / od[r],
                            _ => 0.0,
                        };
                    }
                }
            }
            vec![res]
        }
        Primitive::Scale(c) => vec![g.map(|v| v * c)],
        Primitive::AddScalar(_) => vec![g.clone()],
        Primitive::BroadcastScalar(_) => vec![Tensor::full(x[0].shape(), g.sum())],
        Primitive::Reshape(_) => vec![g.reshape(x[0].shape()).expect("same element count")],
        Primitive::SelectRows(rows) => {
            let mut res = Tensor::zeros(x[0].shape());
            let width = if rows.is_empty() { 0 } else { g.numel() / rows.len() };
            let rd = res.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..width {
                    rd[r * width + c] += g.data()[k * width + c];
                }
            }
            vec![res]
        }
        Primitive::Conv2d { stride } => conv2d_backward(x[0], x[1], g, *stride),
        Primitive::GlobalAvgPool => {
            let s = x[0].shape();
            let hw = s[2] * s[3];
            let mut res = Tensor::zeros(s);
            let rd = res.data_mut();
            for (bc, &gv) in g.data().iter().enumerate() {
                rd[bc * hw..(bc + 1) * hw].iter_mut().for_each(|v| *v = gv / hw as f64);
            }
            vec![res]
        }
    }
}

fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::shape("conv2d", xs, ws));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape("conv2d", ws, bias.shape()));
    }
    if stride == 0 || stride > 2 {
        return Err(Error::Domain {
            op: "conv2d",
            msg: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let o = ws[0];
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(wd, stride));
    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((oc * c + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize) -> Vec<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let o = ws[0];
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(&[o]);
    {
        let (gxd, gwd, gbd) = (gx.data_mut(), gw.data_mut(), gb.data_mut());
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gd[((bi * o + oc) * ho + oy) * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        gbd[oc] += gv;
                        for ic in 0..c {
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ic) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                    gxd[xi] += gv * wdat[wi];
                                    gwd[wi] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    vec![gx, gw, gb]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[f64::NAN, -1.0]));
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
        assert_eq!(tape.value(y).data()[1], 0.0);
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 1]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn norm_of_3_4_is_5() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let n = tape.norm_axis(x, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[4, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn sqrt_of_negative_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, -0.5]));
        assert!(matches!(tape.sqrt(a), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn square_gradient_is_power_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn relu_gradient_is_flat_below_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 0.0);
        // Subgradient at the kink is 0 as well.
        let z = tape.param(Tensor::scalar(0.0));
        let r = tape.relu(z).unwrap();
        assert_eq!(tape.backward(r).unwrap().wrt(z).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.sum(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x at x=2 -> f' = 2x + 1 = 5
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 5.0);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(c), Tensor::zeros(&[2]));
    }

    #[test]
    fn conv_stride_two_output_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4, 4]);
        let y1 = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y1), &[2, 5, 8, 8]);
    }
}
