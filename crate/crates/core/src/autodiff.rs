//! Minimal reverse-mode automatic differentiation over batched `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, so nodes are already in topological order and the backward pass is
//! a single reverse sweep. The op set is exactly what the encoder, the
//! discriminators, and the training losses need; each op's backward rule is
//! checked against central finite differences in the tests.

use crate::kernels;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// parents: [input, weight, bias]
    Conv2d {
        k: usize,
    },
    /// parent: [input]; `indices` filled during forward
    MaxPool2 {
        indices: Vec<u32>,
    },
    Relu,
    LeakyRelu(f64),
    /// parents: [input, weight, bias]; input dims beyond the first are flattened
    Linear,
    Sigmoid,
    Clamp(f64, f64),
    Ln,
    /// c - x
    SubFromScalar(f64),
    Add,
    Sub,
    MulScalar(f64),
    Square,
    Abs,
    Mean,
    /// parents: [left, right], concatenated along dim 1
    Concat2,
    SliceCols {
        from: usize,
        to: usize,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    /// mean_i softplus(z_i) - t_i * z_i  (binary cross-entropy on logits)
    BceLogitsMean {
        targets: Vec<f64>,
    },
    /// mean_i (x_i - t_i)^2
    MseMean {
        targets: Vec<f64>,
    },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Tape of operations with eagerly computed forward values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: `ln(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn child_needs_grad(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    /// Leaf that participates in differentiation (network parameters).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Leaf treated as a constant (inputs, detached values).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        assert_eq!(xv.shape.len(), 4, "conv2d input must be [B,C,H,W]");
        let (batch, in_ch, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let out_ch = wv.dim(0);
        assert_eq!(wv.shape, vec![out_ch, in_ch, k, k]);
        assert_eq!(bv.shape, vec![out_ch]);
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let mut out = Tensor::zeros(&[batch, out_ch, oh, ow]);
        kernels::conv2d_forward(
            &xv.data, batch, in_ch, h, wd, &wv.data, out_ch, k, &bv.data, &mut out.data,
        );
        let ng = self.child_needs_grad(&[x.0, w.0, b.0]);
        self.push(Op::Conv2d { k }, vec![x.0, w.0, b.0], out, ng)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape.len(), 4, "maxpool2 input must be [B,C,H,W]");
        let (batch, ch, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even H and W");
        let mut out = Tensor::zeros(&[batch, ch, h / 2, w / 2]);
        let mut indices = vec![0u32; out.numel()];
        kernels::maxpool2_forward(&xv.data, batch, ch, h, w, &mut out.data, &mut indices);
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::MaxPool2 { indices }, vec![x.0], out, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Relu, vec![x.0], out, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::LeakyRelu(slope), vec![x.0], out, ng)
    }

    /// `x` may have any rank ≥ 2; trailing dims are flattened into features.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let batch = xv.dim(0);
        let in_dim: usize = xv.shape[1..].iter().product();
        let out_dim = wv.dim(0);
        assert_eq!(wv.shape, vec![out_dim, in_dim], "linear weight shape");
        assert_eq!(bv.shape, vec![out_dim]);
        let mut out = Tensor::zeros(&[batch, out_dim]);
        kernels::linear_forward(
            &xv.data, batch, in_dim, &wv.data, out_dim, &bv.data, &mut out.data,
        );
        let ng = self.child_needs_grad(&[x.0, w.0, b.0]);
        self.push(Op::Linear, vec![x.0, w.0, b.0], out, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Sigmoid, vec![x.0], out, ng)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v.clamp(lo, hi)).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Clamp(lo, hi), vec![x.0], out, ng)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v.ln()).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Ln, vec![x.0], out, ng)
    }

    /// `c - x`, elementwise.
    pub fn sub_from_scalar(&mut self, c: f64, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| c - v).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::SubFromScalar(c), vec![x.0], out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        let ng = self.child_needs_grad(&[a.0, b.0]);
        self.push(Op::Add, vec![a.0, b.0], out, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape, bv.shape, "sub shape mismatch");
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect(),
        };
        let ng = self.child_needs_grad(&[a.0, b.0]);
        self.push(Op::Sub, vec![a.0, b.0], out, ng)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| c * v).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::MulScalar(c), vec![x.0], out, ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * v).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Square, vec![x.0], out, ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v.abs()).collect(),
        };
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Abs, vec![x.0], out, ng)
    }

    /// Mean over all elements; returns a scalar node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(xv.numel() > 0, "mean of empty tensor");
        let m = xv.data.iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::Mean, vec![x.0], Tensor::scalar(m), ng)
    }

    /// Concatenate two `[B, *]` tensors along dim 1.
    pub fn concat2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape.len(), 2);
        assert_eq!(bv.shape.len(), 2);
        assert_eq!(av.dim(0), bv.dim(0), "concat2 batch mismatch");
        let batch = av.dim(0);
        let (da, db) = (av.dim(1), bv.dim(1));
        let mut data = Vec::with_capacity(batch * (da + db));
        for i in 0..batch {
            data.extend_from_slice(&av.data[i * da..(i + 1) * da]);
            data.extend_from_slice(&bv.data[i * db..(i + 1) * db]);
        }
        let out = Tensor::from_vec(&[batch, da + db], data);
        let ng = self.child_needs_grad(&[a.0, b.0]);
        self.push(Op::Concat2, vec![a.0, b.0], out, ng)
    }

    /// Columns `[from, to)` of a `[B, D]` tensor.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape.len(), 2);
        let (batch, d) = (xv.dim(0), xv.dim(1));
        assert!(from < to && to <= d, "slice_cols range {from}..{to} out of 0..{d}");
        let width = to - from;
        let mut data = Vec::with_capacity(batch * width);
        for i in 0..batch {
            data.extend_from_slice(&xv.data[i * d + from..i * d + to]);
        }
        let out = Tensor::from_vec(&[batch, width], data);
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::SliceCols { from, to }, vec![x.0], out, ng)
    }

    /// Select rows of a `[B, D]` tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape.len(), 2);
        let d = xv.dim(1);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(&xv.data[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[indices.len(), d], data);
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::GatherRows { indices }, vec![x.0], out, ng)
    }

    /// Mean binary cross-entropy of logits against fixed 0/1 targets.
    pub fn bce_logits_mean(&mut self, logits: NodeId, targets: Vec<f64>) -> NodeId {
        let xv = &self.nodes[logits.0].value;
        assert_eq!(xv.numel(), targets.len(), "bce target length mismatch");
        let n = targets.len() as f64;
        let loss = xv
            .data
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<f64>()
            / n;
        let ng = self.child_needs_grad(&[logits.0]);
        self.push(
            Op::BceLogitsMean { targets },
            vec![logits.0],
            Tensor::scalar(loss),
            ng,
        )
    }

    /// Mean squared error against fixed targets.
    pub fn mse_mean(&mut self, x: NodeId, targets: Vec<f64>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.numel(), targets.len(), "mse target length mismatch");
        let n = targets.len() as f64;
        let loss = xv
            .data
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| (v - t) * (v - t))
            .sum::<f64>()
            / n;
        let ng = self.child_needs_grad(&[x.0]);
        self.push(Op::MseMean { targets }, vec![x.0], Tensor::scalar(loss), ng)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients
    /// (present only for nodes on a differentiable path to the root).
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate_parents(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let parent_value = |i: usize| &self.nodes[node.parents[i]].value;
        let mut add_to = |slot: usize, contribution: Tensor| {
            let pid = node.parents[slot];
            if !self.nodes[pid].needs_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => {
                    for (e, c) in existing.data.iter_mut().zip(&contribution.data) {
                        *e += c;
                    }
                }
                slot_ref @ None => *slot_ref = Some(contribution),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { k } => {
                let xv = parent_value(0);
                let wv = parent_value(1);
                let (batch, in_ch, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let out_ch = wv.dim(0);
                if self.nodes[node.parents[0]].needs_grad {
                    let mut gx = Tensor::zeros(&xv.shape);
                    kernels::conv2d_backward_input(
                        &gout.data, batch, in_ch, h, w, &wv.data, out_ch, *k, &mut gx.data,
                    );
                    add_to(0, gx);
                }
                if self.nodes[node.parents[1]].needs_grad
                    || self.nodes[node.parents[2]].needs_grad
                {
                    let mut gw = Tensor::zeros(&wv.shape);
                    let mut gb = Tensor::zeros(&[out_ch]);
                    kernels::conv2d_backward_params(
                        &gout.data, &xv.data, batch, in_ch, h, w, out_ch, *k, &mut gw.data,
                        &mut gb.data,
                    );
                    add_to(1, gw);
                    add_to(2, gb);
                }
            }
            Op::MaxPool2 { indices } => {
                let xv = parent_value(0);
                let mut gx = Tensor::zeros(&xv.shape);
                kernels::maxpool2_backward(&gout.data, indices, &mut gx.data);
                add_to(0, gx);
            }
            Op::Relu => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::LeakyRelu(slope) => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::Linear => {
                let xv = parent_value(0);
                let wv = parent_value(1);
                let batch = xv.dim(0);
                let in_dim: usize = xv.shape[1..].iter().product();
                let out_dim = wv.dim(0);
                if self.nodes[node.parents[0]].needs_grad {
                    let mut gx = Tensor::zeros(&xv.shape);
                    kernels::linear_backward_input(
                        &gout.data, batch, in_dim, &wv.data, out_dim, &mut gx.data,
                    );
                    add_to(0, gx);
                }
                if self.nodes[node.parents[1]].needs_grad
                    || self.nodes[node.parents[2]].needs_grad
                {
                    let mut gw = Tensor::zeros(&wv.shape);
                    let mut gb = Tensor::zeros(&[out_dim]);
                    kernels::linear_backward_params(
                        &gout.data, &xv.data, batch, in_dim, out_dim, &mut gw.data, &mut gb.data,
                    );
                    add_to(1, gw);
                    add_to(2, gb);
                }
            }
            Op::Sigmoid => {
                let yv = &node.value;
                let data = yv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                add_to(0, Tensor::from_vec(&yv.shape, data));
            }
            Op::Clamp(lo, hi) => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| if x > *lo && x < *hi { g } else { 0.0 })
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::Ln => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| g / x)
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::SubFromScalar(_) => {
                let data = gout.data.iter().map(|&g| -g).collect();
                add_to(0, Tensor::from_vec(&gout.shape, data));
            }
            Op::Add => {
                add_to(0, gout.clone());
                add_to(1, gout.clone());
            }
            Op::Sub => {
                add_to(0, gout.clone());
                let data = gout.data.iter().map(|&g| -g).collect();
                add_to(1, Tensor::from_vec(&gout.shape, data));
            }
            Op::MulScalar(c) => {
                let data = gout.data.iter().map(|&g| c * g).collect();
                add_to(0, Tensor::from_vec(&gout.shape, data));
            }
            Op::Square => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| 2.0 * x * g)
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::Abs => {
                let xv = parent_value(0);
                let data = xv
                    .data
                    .iter()
                    .zip(&gout.data)
                    .map(|(&x, &g)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::Mean => {
                let xv = parent_value(0);
                let g = gout.item() / xv.numel() as f64;
                add_to(0, Tensor::from_vec(&xv.shape, vec![g; xv.numel()]));
            }
            Op::Concat2 => {
                let av = parent_value(0);
                let bv = parent_value(1);
                let batch = av.dim(0);
                let (da, db) = (av.dim(1), bv.dim(1));
                let mut ga = Tensor::zeros(&av.shape);
                let mut gb = Tensor::zeros(&bv.shape);
                for i in 0..batch {
                    let row = &gout.data[i * (da + db)..(i + 1) * (da + db)];
                    ga.data[i * da..(i + 1) * da].copy_from_slice(&row[..da]);
                    gb.data[i * db..(i + 1) * db].copy_from_slice(&row[da..]);
                }
                add_to(0, ga);
                add_to(1, gb);
            }
            Op::SliceCols { from, to } => {
                let xv = parent_value(0);
                let (batch, d) = (xv.dim(0), xv.dim(1));
                let width = to - from;
                let mut gx = Tensor::zeros(&xv.shape);
                for i in 0..batch {
                    gx.data[i * d + from..i * d + to]
                        .copy_from_slice(&gout.data[i * width..(i + 1) * width]);
                }
                add_to(0, gx);
            }
            Op::GatherRows { indices } => {
                let xv = parent_value(0);
                let d = xv.dim(1);
                let mut gx = Tensor::zeros(&xv.shape);
                for (row, &i) in indices.iter().enumerate() {
                    for (gxe, &ge) in gx.data[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&gout.data[row * d..(row + 1) * d])
                    {
                        *gxe += ge;
                    }
                }
                add_to(0, gx);
            }
            Op::BceLogitsMean { targets } => {
                let xv = parent_value(0);
                let n = targets.len() as f64;
                let g = gout.item();
                let data = xv
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g * (sigmoid(z) - t) / n)
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
            Op::MseMean { targets } => {
                let xv = parent_value(0);
                let n = targets.len() as f64;
                let g = gout.item();
                let data = xv
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&v, &t)| g * 2.0 * (v - t) / n)
                    .collect();
                add_to(0, Tensor::from_vec(&xv.shape, data));
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node known to be on the differentiable path.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.grads[id.0]
            .as_ref()
            .expect("no gradient recorded for node")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    /// Central finite difference of `f` with respect to `values`, compared to
    /// `analytic` with guarded relative error.
    fn check_fd<F: FnMut(&[f64]) -> f64>(values: &[f64], analytic: &[f64], mut f: F, tol: f64) {
        let h = 1e-5;
        let mut work = values.to_vec();
        for i in 0..values.len() {
            let orig = work[i];
            work[i] = orig + h;
            let fp = f(&work);
            work[i] = orig - h;
            let fm = f(&work);
            work[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(
                rel < tol,
                "param {i}: analytic {} vs fd {fd}, rel err {rel}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_pool_relu_linear_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, h, w, k, oc) = (2, 6, 6, 3, 2);
        let x = randv(&mut rng, batch * h * w, 1.0);
        let wconv = randv(&mut rng, oc * k * k, 0.5);
        let bconv = randv(&mut rng, oc, 0.2);
        let wlin = randv(&mut rng, 3 * oc * 2 * 2, 0.5);
        let blin = randv(&mut rng, 3, 0.2);
        let targets = vec![1.0, 0.0];

        // Loss as a function of all parameters packed [wconv|bconv|wlin|blin].
        let packed: Vec<f64> = wconv
            .iter()
            .chain(&bconv)
            .chain(&wlin)
            .chain(&blin)
            .copied()
            .collect();
        let nwc = wconv.len();
        let nbc = bconv.len();
        let nwl = wlin.len();

        let eval = |p: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let xs = g.constant(Tensor::from_vec(&[batch, 1, h, w], x.clone()));
            let wc = g.param(Tensor::from_vec(&[oc, 1, k, k], p[..nwc].to_vec()));
            let bc = g.param(Tensor::from_vec(&[oc], p[nwc..nwc + nbc].to_vec()));
            let wl = g.param(Tensor::from_vec(
                &[3, oc * 2 * 2],
                p[nwc + nbc..nwc + nbc + nwl].to_vec(),
            ));
            let bl = g.param(Tensor::from_vec(&[3], p[nwc + nbc + nwl..].to_vec()));
            let c = g.conv2d(xs, wc, bc, k);
            let r = g.relu(c);
            let pl = g.maxpool2(r);
            let lin = g.linear(pl, wl, bl);
            let sm = g.sigmoid(lin);
            let cl = g.clamp(sm, 1e-6, 1.0 - 1e-6);
            let ln = g.ln(cl);
            let m = g.mean(ln);
            let sq = g.square(m);
            // mix in a second head so Add/Sub/MulScalar get exercised
            let logits = g.slice_cols(lin, 0, 1);
            let bce = g.bce_logits_mean(logits, targets.clone());
            let scaled = g.mul_scalar(bce, 0.7);
            let loss = g.add(sq, scaled);
            let grads = g.backward(loss);
            let mut packed_grads = Vec::new();
            for id in [wc, bc, wl, bl] {
                packed_grads.extend_from_slice(&grads.wrt(id).data);
            }
            (g.value(loss).item(), Some(packed_grads))
        };

        let (_, grads) = eval(&packed);
        let analytic = grads.unwrap();
        check_fd(&packed, &analytic, |p| eval(p).0, 1e-4);
    }

    #[test]
    fn gather_abs_mse_concat_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randv(&mut rng, 8, 1.0);
        let y = randv(&mut rng, 8, 1.0);

        let eval = |p: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let a = g.param(Tensor::from_vec(&[4, 2], p[..8].to_vec()));
            let b = g.param(Tensor::from_vec(&[4, 2], p[8..].to_vec()));
            let cat = g.concat2(a, b);
            let gat = g.gather_rows(cat, vec![0, 2, 2, 3]);
            let s = g.sigmoid(gat);
            let mse = g.mse_mean(s, vec![0.3; 16]);
            let d = g.sub(a, b);
            let ab = g.abs(d);
            let m = g.mean(ab);
            let sc = g.mul_scalar(m, 0.25);
            let one = g.sub_from_scalar(1.0, sc);
            let sq = g.square(one);
            let lr = g.leaky_relu(sq, 0.2);
            let loss = g.add(mse, lr);
            let grads = g.backward(loss);
            let mut packed = grads.wrt(a).data.clone();
            packed.extend_from_slice(&grads.wrt(b).data);
            (g.value(loss).item(), Some(packed))
        };

        let packed: Vec<f64> = x.iter().chain(&y).copied().collect();
        let (_, grads) = eval(&packed);
        check_fd(&packed, &grads.unwrap(), |p| eval(p).0, 1e-4);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = g.param(Tensor::from_vec(&[2, 2], vec![0.5; 4]));
        let s = g.add(c, p);
        let m = g.mean(s);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn diamond_graph_accumulates_gradients() {
        // loss = mean(x) + mean(x^2); d/dx = 1/n + 2x/n
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let m1 = g.mean(x);
        let sq = g.square(x);
        let m2 = g.mean(sq);
        let loss = g.add(m1, m2);
        let grads = g.backward(loss);
        let gx = grads.wrt(x);
        for (i, &v) in [1.0, -2.0, 0.5].iter().enumerate() {
            let expect = 1.0 / 3.0 + 2.0 * v / 3.0;
            assert!((gx.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(sigmoid(-1000.0).abs() < 1e-300);
        assert!((softplus(-1000.0)).abs() < 1e-300);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
    }
}
