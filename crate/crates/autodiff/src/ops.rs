//! Forward definitions of the differentiable op set.
//!
//! Binary elementwise ops require identical shapes; the only implicit
//! broadcast is tensor-with-scalar-constant. Per-channel broadcasts are
//! spelled out with [`Var::add_bias`] and [`Var::add_channelwise`].

use crate::error::{invalid, mismatch, Result};
use crate::graph::{guard_denominator, Graph, Op, Unary, Var};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this value lives on.
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<S> {
        let nodes = self.graph.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.graph.nodes()[self.id].value[0]
    }

    fn same_graph(&self, other: &Var<'g, S>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs cannot be combined"
        );
    }

    fn binary(
        &self,
        other: &Var<'g, S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: fn(usize, usize) -> Op<S>,
    ) -> Result<Var<'g, S>> {
        self.same_graph(other);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(mismatch(name, &a.shape, &b.shape));
            }
            let value = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(shape, value, op(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, "div", |a, b| a / guard_denominator(b), Op::Div)
    }

    fn map_to(&self, f: impl Fn(S) -> S, op: Op<S>) -> Var<'g, S> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes();
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.value.iter().map(|&x| f(x)).collect(),
                a.requires_grad,
            )
        };
        self.graph.push(shape, value, op, rg)
    }

    pub fn add_scalar(&self, s: S) -> Var<'g, S> {
        self.map_to(|x| x + s, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, s: S) -> Var<'g, S> {
        self.map_to(|x| x * s, Op::MulScalar(self.id, s))
    }

    pub fn neg(&self) -> Var<'g, S> {
        self.mul_scalar(-S::one())
    }

    pub fn unary(&self, f: Unary) -> Var<'g, S> {
        self.map_to(|x| f.apply(x), Op::Unary(self.id, f))
    }

    pub fn exp(&self) -> Var<'g, S> {
        self.unary(Unary::Exp)
    }

    /// Natural log; inputs below 1e-30 are floored.
    pub fn log(&self) -> Var<'g, S> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(&self) -> Var<'g, S> {
        self.unary(Unary::Sqrt)
    }

    pub fn relu(&self) -> Var<'g, S> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g, S> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn silu(&self) -> Var<'g, S> {
        self.unary(Unary::Silu)
    }

    pub fn sigmoid(&self) -> Var<'g, S> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'g, S> {
        self.unary(Unary::Tanh)
    }

    pub fn softplus(&self) -> Var<'g, S> {
        self.unary(Unary::Softplus)
    }

    pub fn log_sigmoid(&self) -> Var<'g, S> {
        self.unary(Unary::LogSigmoid)
    }

    pub fn abs(&self) -> Var<'g, S> {
        self.unary(Unary::Abs)
    }

    pub fn square(&self) -> Var<'g, S> {
        self.unary(Unary::Square)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(other);
        let (shape, value, rg, m, k, n) = {
            let nodes = self.graph.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![S::zero(); m * n];
            S::gemm(
                m,
                k,
                n,
                &a.value,
                (k as isize, 1),
                &b.value,
                (n as isize, 1),
                S::zero(),
                &mut out,
            );
            (vec![m, n], out, a.requires_grad || b.requires_grad, m, k, n)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// NCHW convolution with square kernels `[O, C, k, k]`, zero padding.
    pub fn conv2d(
        &self,
        weight: &Var<'g, S>,
        bias: Option<&Var<'g, S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, S>> {
        self.same_graph(weight);
        let (shape, value, rg, geom) = {
            let nodes = self.graph.nodes();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let geom = ConvGeom::new(&x.shape, &w.shape, stride, pad)
                .ok_or_else(|| mismatch("conv2d", &x.shape, &w.shape))?;
            let b = match bias {
                Some(b) => {
                    self.same_graph(b);
                    let bn = &nodes[b.id];
                    if bn.shape != [geom.out_ch] {
                        return Err(mismatch("conv2d bias", &w.shape, &bn.shape));
                    }
                    Some(bn)
                }
                None => None,
            };
            let value =
                kernels::conv2d_forward(&geom, &x.value, &w.value, b.map(|b| b.value.as_slice()));
            let rg = x.requires_grad || w.requires_grad || b.is_some_and(|b| b.requires_grad);
            (
                vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
                value,
                rg,
                geom,
            )
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Result<Var<'g, S>> {
        let (shape, value, rg) = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id];
            if x.shape.len() != 4 {
                return Err(invalid(
                    "upsample2x",
                    format!("expected NCHW, got {:?}", x.shape),
                ));
            }
            let s = &x.shape;
            (
                vec![s[0], s[1], s[2] * 2, s[3] * 2],
                kernels::upsample2x_forward(s, &x.value),
                x.requires_grad,
            )
        };
        Ok(self.graph.push(shape, value, Op::Upsample2x(self.id), rg))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(
        &self,
        gamma: &Var<'g, S>,
        beta: &Var<'g, S>,
        groups: usize,
        eps: f64,
    ) -> Result<Var<'g, S>> {
        self.same_graph(gamma);
        self.same_graph(beta);
        let (shape, value, rg, stats) = {
            let nodes = self.graph.nodes();
            let (x, ga, be) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            if x.shape.len() < 2 || groups == 0 || x.shape[1] % groups != 0 {
                return Err(invalid(
                    "group_norm",
                    format!(
                        "{groups} groups do not divide the channels of {:?}",
                        x.shape
                    ),
                ));
            }
            let c = x.shape[1];
            if ga.shape != [c] || be.shape != [c] {
                return Err(mismatch("group_norm affine", &ga.shape, &be.shape));
            }
            let (value, stats) = kernels::group_norm_forward(
                &x.shape,
                groups,
                S::from_f64(eps),
                &x.value,
                &ga.value,
                &be.value,
            );
            let rg = x.requires_grad || ga.requires_grad || be.requires_grad;
            (x.shape.clone(), value, rg, stats)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'g, S> {
        let (value, rg) = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id];
            (x.value.iter().copied().sum::<S>(), x.requires_grad)
        };
        self.graph.push(vec![], vec![value], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'g, S> {
        let (value, rg) = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id];
            let n = S::from_f64(x.value.len().max(1) as f64);
            (x.value.iter().copied().sum::<S>() / n, x.requires_grad)
        };
        self.graph.push(vec![], vec![value], Op::Mean(self.id), rg)
    }

    pub fn concat(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        for p in &parts[1..] {
            first.same_graph(p);
        }
        let graph = first.graph;
        let (tensor, rg) = {
            let nodes = graph.nodes();
            let tensors: Vec<Tensor<S>> = parts
                .iter()
                .map(|p| Tensor::new(&nodes[p.id].shape, nodes[p.id].value.clone()).expect("node"))
                .collect();
            let refs: Vec<&Tensor<S>> = tensors.iter().collect();
            let t = Tensor::cat(&refs, axis).map_err(|e| match e {
                crate::AutodiffError::ShapeMismatch { lhs, rhs, .. } => {
                    mismatch("concat", &lhs, &rhs)
                }
                other => other,
            })?;
            (t, parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        let shape = tensor.shape().to_vec();
        Ok(graph.push(
            shape,
            tensor.into_data(),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// `[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let (tensor, rg) = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id];
            if axis >= x.shape.len() || start + len > x.shape[axis] || len == 0 {
                return Err(invalid(
                    "slice",
                    format!(
                        "range {start}..{} on axis {axis} of {:?}",
                        start + len,
                        x.shape
                    ),
                ));
            }
            let t = Tensor::new(&x.shape, x.value.clone())?.narrow(axis, start, len)?;
            (t, x.requires_grad)
        };
        let shape = tensor.shape().to_vec();
        Ok(self.graph.push(
            shape,
            tensor.into_data(),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, S>> {
        let (value, rg) = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id];
            if numel(shape) != x.value.len() {
                return Err(mismatch("reshape", &x.shape, shape));
            }
            (x.value.clone(), x.requires_grad)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Adds `b[c]` to every element of channel `c` in `[N, C, ...]`.
    pub fn add_bias(&self, b: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(b);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes();
            let (x, bn) = (&nodes[self.id], &nodes[b.id]);
            if x.shape.len() < 2 || bn.shape != [x.shape[1]] {
                return Err(mismatch("add_bias", &x.shape, &bn.shape));
            }
            let c = x.shape[1];
            let inner = numel(&x.shape[2..]);
            let mut value = x.value.clone();
            for (i, chunk) in value.chunks_mut(inner).enumerate() {
                let bias = bn.value[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            (x.shape.clone(), value, x.requires_grad || bn.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::AddBias {
                x: self.id,
                b: b.id,
            },
            rg,
        ))
    }

    /// Adds `v[n, c]` to every spatial element of `x[n, c, ...]`.
    pub fn add_channelwise(&self, v: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(v);
        let (shape, value, rg) = {
            let nodes = self.graph.nodes();
            let (x, vn) = (&nodes[self.id], &nodes[v.id]);
            if x.shape.len() < 2 || vn.shape != x.shape[..2] {
                return Err(mismatch("add_channelwise", &x.shape, &vn.shape));
            }
            let inner = numel(&x.shape[2..]);
            let mut value = x.value.clone();
            for (chunk, &add) in value.chunks_mut(inner).zip(&vn.value) {
                chunk.iter_mut().for_each(|e| *e += add);
            }
            (x.shape.clone(), value, x.requires_grad || vn.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::AddChannelwise {
                x: self.id,
                v: v.id,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::Graph;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let g = Graph::<f64>::new();
        let x = g.constant(&t(&[2], &[-3.0, 2.5]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.5]);
    }

    #[test]
    fn identity_1x1_conv_returns_input() {
        let g = Graph::<f64>::new();
        let x = g.constant(&t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let w = g.constant(&t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn matmul_with_identity() {
        let g = Graph::<f64>::new();
        let a = g.constant(&t(&[3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.]));
        let i = g.constant(&t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        assert_eq!(a.matmul(&i).unwrap().value(), a.value());
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[3, 2]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"),
            "{err}"
        );
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
    }

    #[test]
    fn guarded_ops_stay_finite() {
        let g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(&[3], vec![0.0f32, -1.0, 200.0]).unwrap());
        let z = g.constant(&Tensor::zeros(&[3]));
        for v in [
            x.log(),
            x.sqrt(),
            x.exp(),
            x.div(&z).unwrap(),
            x.softplus(),
            x.log_sigmoid(),
        ] {
            assert!(v.value().is_finite(), "{:?}", v.value());
        }
    }
}
