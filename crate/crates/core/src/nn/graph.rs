use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{Real, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    /// Weight and bias are indices into the parameter slice the graph borrows.
    Conv {
        x: NodeId,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Upsample2x(NodeId),
    Add(NodeId, NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Forward tape over one image. Nodes are appended in evaluation order, so the
/// reverse pass is a single backwards sweep.
pub struct Graph<'p, T> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of which ReLU outputs are positive. Two evaluations with the same
    /// pattern lie on the same linear piece of every activation.
    pub fn relu_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in self.nodes.iter().filter(|n| matches!(n.op, Op::Relu(_))) {
            for chunk in n.value.data().chunks(64) {
                let mut bits = 0u64;
                for (b, v) in chunk.iter().enumerate() {
                    if *v > T::zero() {
                        bits |= 1 << b;
                    }
                }
                bits.hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        x.chw();
        self.push(x, Op::Input)
    }

    fn conv_geometry(&self, x: NodeId, weight: usize, stride: usize, pad: usize) -> ConvGeometry {
        let (c, h, w) = self.nodes[x].value.chw();
        let ws = self.params[weight].shape();
        assert_eq!(ws.len(), 4, "conv weight must be O x C x k x k");
        assert_eq!(ws[1], c, "conv weight expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], ws[3], "only square kernels are supported");
        ConvGeometry {
            in_channels: c,
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
            in_h: h,
            in_w: w,
        }
    }

    pub fn conv(&mut self, x: NodeId, weight: usize, bias: usize, stride: usize, pad: usize) -> NodeId {
        let g = self.conv_geometry(x, weight, stride, pad);
        let mut out = Tensor::zeros(&[g.out_channels, g.out_h(), g.out_w()]);
        conv2d_forward(
            &g,
            self.nodes[x].value.data(),
            self.params[weight].data(),
            self.params[bias].data(),
            out.data_mut(),
        );
        self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| v.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let src = &self.nodes[x].value;
        let (c, h, w) = src.chw();
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let (oh, ow) = (2 * h, 2 * w);
        let d = out.data_mut();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    d[(ch * oh + oy) * ow + ox] = src.data()[(ch * h + oy / 2) * w + ox / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        assert_eq!(v.shape(), self.nodes[b].value.shape(), "add needs matching shapes");
        v.add_assign(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    /// Propagate `seeds` (gradients of the loss with respect to some nodes) back to
    /// every parameter, accumulating into `param_grads`. Returns which parameters a
    /// gradient actually reached.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor<T>)>, param_grads: &mut [Tensor<T>]) -> Vec<bool> {
        assert_eq!(param_grads.len(), self.params.len());
        let mut touched = vec![false; self.params.len()];
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: NodeId, g: Tensor<T>| match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.nodes[id].value.shape(), "seed shape mismatch at node {id}");
            accumulate(&mut grads, id, g);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match self.nodes[id].op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let geo = self.conv_geometry(x, weight, stride, pad);
                    let needs_input_grad = self.nodes[x].op != Op::Input;
                    let mut gx = needs_input_grad.then(|| Tensor::zeros(self.nodes[x].value.shape()));
                    touched[weight] = true;
                    touched[bias] = true;
                    let (gw, gb) = two_mut(param_grads, weight, bias);
                    conv2d_backward(
                        &geo,
                        self.nodes[x].value.data(),
                        self.params[weight].data(),
                        g.data(),
                        gx.as_mut().map(|t| t.data_mut()),
                        gw.data_mut(),
                        gb.data_mut(),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, x, gx);
                    }
                }
                Op::Relu(x) => {
                    let out = &self.nodes[id].value;
                    let mut gx = g;
                    for (gv, &o) in gx.data_mut().iter_mut().zip(out.data()) {
                        if o <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::Sigmoid(x) => {
                    let out = &self.nodes[id].value;
                    let mut gx = g;
                    for (gv, &s) in gx.data_mut().iter_mut().zip(out.data()) {
                        *gv = *gv * s * (T::one() - s);
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::Upsample2x(x) => {
                    let (c, h, w) = self.nodes[x].value.chw();
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let d = gx.data_mut();
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d[(ch * h + oy / 2) * w + ox / 2] += g.data()[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, b, g.clone());
                    accumulate(&mut grads, a, g);
                }
            }
        }
        touched
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// conv(s2) -> relu -> upsample + conv(1x1) skip -> sigmoid, loss = sum(coef * out).
    fn run(params: &[Tensor<f64>], x: &Tensor<f64>, coef: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new(params);
        let inp = g.input(x.clone());
        let a = g.conv(inp, 0, 1, 2, 1);
        let a = g.relu(a);
        let up = g.upsample2x(a);
        let skip = g.conv(inp, 2, 3, 1, 0);
        let s = g.add(up, skip);
        let out = g.sigmoid(s);
        let loss = g.value(out).data().iter().zip(coef.data()).map(|(a, b)| a * b).sum();
        let mut grads: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        g.backward(vec![(out, coef.clone())], &mut grads);
        (loss, grads)
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![
            rand_tensor(&[3, 2, 3, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
            rand_tensor(&[3, 2, 1, 1], &mut rng),
            rand_tensor(&[3], &mut rng),
        ];
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let coef = rand_tensor(&[3, 6, 6], &mut rng);
        let (_, grads) = run(&params, &x, &coef);
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for n in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[n] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[n] -= h;
                let numeric = (run(&plus, &x, &coef).0 - run(&minus, &x, &coef).0) / (2.0 * h);
                let a = grads[pi].data()[n];
                assert!((a - numeric).abs() < 1e-6, "param {pi}[{n}]: {a} vs {numeric}");
            }
        }
    }
}
