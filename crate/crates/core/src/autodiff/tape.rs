//! Reverse-mode tape over [`Grid`] values.
//!
//! A tape is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards visits every
//! consumer before its producers. Gradients accumulate: a node feeding two
//! consumers receives the sum of both contributions.

use crate::autodiff::ops;
use crate::error::{Error, Result};
use crate::grid::{ChannelStats, Grid};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Normalize {
        input: NodeId,
        stats: ChannelStats,
    },
    AffineChannel {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    ChannelMean {
        input: NodeId,
    },
    ChannelStd {
        input: NodeId,
        stats: ChannelStats,
    },
    AvgPool2 {
        input: NodeId,
    },
    Upsample2 {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
    SqErr {
        a: NodeId,
        b: NodeId,
        mean: bool,
    },
}

struct Node {
    value: Grid,
    op: Op,
    /// True when some leaf that wants gradients feeds this node; backward
    /// skips gradient work for subtrees that are entirely frozen.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Grid>>,
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

    fn push(&mut self, value: Grid, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.non_finite().is_none(),
            "forward op produced a non-finite value"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable input: gradients are collected for it.
    pub fn leaf(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen input: backward never materializes a gradient for it and
    /// skips parameter-gradient work in the ops it feeds.
    pub fn constant(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Grid {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call. `None` for
    /// frozen nodes and nodes the root does not depend on.
    pub fn grad(&self, id: NodeId) -> Option<&Grid> {
        self.grads[id.0].as_ref()
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            needs,
        ))
    }

    pub fn normalize(&mut self, input: NodeId) -> NodeId {
        let (value, stats) = ops::normalize(self.value(input));
        let needs = self.needs(input);
        self.push(value, Op::Normalize { input, stats }, needs)
    }

    pub fn affine_channel(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId> {
        let value =
            ops::affine_channel(self.value(input), self.value(scale), self.value(shift))?;
        let needs = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            value,
            Op::AffineChannel {
                input,
                scale,
                shift,
            },
            needs,
        ))
    }

    pub fn channel_mean(&mut self, input: NodeId) -> NodeId {
        let value = ops::channel_mean(self.value(input));
        let needs = self.needs(input);
        self.push(value, Op::ChannelMean { input }, needs)
    }

    pub fn channel_std(&mut self, input: NodeId) -> NodeId {
        let (value, stats) = ops::channel_std(self.value(input));
        let needs = self.needs(input);
        self.push(value, Op::ChannelStd { input, stats }, needs)
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::avg_pool2(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::AvgPool2 { input }, needs))
    }

    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let value = ops::upsample2(self.value(input));
        let needs = self.needs(input);
        self.push(value, Op::Upsample2 { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::shape(format!(
                "add operands differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        for (d, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *d += v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let mut value = self.value(input).clone();
        for d in value.data_mut() {
            *d *= factor;
        }
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Mean squared error, a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.sq_err(a, b, true)
    }

    /// Sum of squared errors, a scalar node.
    pub fn sse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.sq_err(a, b, false)
    }

    fn sq_err(&mut self, a: NodeId, b: NodeId, mean: bool) -> Result<NodeId> {
        let value = Grid::scalar(ops::sq_err(self.value(a), self.value(b), mean)?);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::SqErr { a, b, mean }, needs))
    }

    /// Accumulate gradients of `root` (a scalar node) into every reachable
    /// node that wants them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != (1, 1, 1) {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(Grid::scalar(1.0));

        let nodes = &self.nodes;
        for i in (0..nodes.len()).rev() {
            // Inputs always precede their consumers, so gradients written
            // while processing node i land strictly below index i.
            let (below, at) = self.grads.split_at_mut(i);
            let Some(upstream) = at[0].as_ref() else {
                continue;
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let grads = ops::conv2d_backward(
                        &nodes[input.0].value,
                        &nodes[kernel.0].value,
                        upstream,
                        nodes[input.0].needs_grad,
                        nodes[kernel.0].needs_grad || nodes[bias.0].needs_grad,
                    );
                    if let Some(d) = grads.d_input {
                        accumulate(slot(below, nodes, *input), &d);
                    }
                    if let Some(d) = grads.d_kernel {
                        if nodes[kernel.0].needs_grad {
                            accumulate(slot(below, nodes, *kernel), &d);
                        }
                    }
                    if let Some(d) = grads.d_bias {
                        if nodes[bias.0].needs_grad {
                            accumulate(slot(below, nodes, *bias), &d);
                        }
                    }
                }
                Op::Relu { input } => {
                    if nodes[input.0].needs_grad {
                        ops::relu_backward(
                            &nodes[input.0].value,
                            upstream,
                            slot(below, nodes, *input),
                        );
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let grads = ops::dense_backward(
                        &nodes[input.0].value,
                        &nodes[weights.0].value,
                        upstream,
                        nodes[input.0].needs_grad,
                        nodes[weights.0].needs_grad || nodes[bias.0].needs_grad,
                    );
                    if let Some(d) = grads.d_input {
                        accumulate(slot(below, nodes, *input), &d);
                    }
                    if let Some(d) = grads.d_weights {
                        if nodes[weights.0].needs_grad {
                            accumulate(slot(below, nodes, *weights), &d);
                        }
                    }
                    if let Some(d) = grads.d_bias {
                        if nodes[bias.0].needs_grad {
                            accumulate(slot(below, nodes, *bias), &d);
                        }
                    }
                }
                Op::Normalize { input, stats } => {
                    if nodes[input.0].needs_grad {
                        ops::normalize_backward(
                            &nodes[i].value,
                            stats,
                            upstream,
                            slot(below, nodes, *input),
                        );
                    }
                }
                Op::AffineChannel {
                    input,
                    scale,
                    shift,
                } => {
                    let input_value = &nodes[input.0].value;
                    let scale_value = &nodes[scale.0].value;
                    if nodes[input.0].needs_grad {
                        ops::affine_channel_backward(
                            input_value,
                            scale_value,
                            upstream,
                            Some(slot(below, nodes, *input)),
                            None,
                            None,
                        );
                    }
                    if nodes[scale.0].needs_grad {
                        ops::affine_channel_backward(
                            input_value,
                            scale_value,
                            upstream,
                            None,
                            Some(slot(below, nodes, *scale)),
                            None,
                        );
                    }
                    if nodes[shift.0].needs_grad {
                        ops::affine_channel_backward(
                            input_value,
                            scale_value,
                            upstream,
                            None,
                            None,
                            Some(slot(below, nodes, *shift)),
                        );
                    }
                }
                Op::ChannelMean { input } => {
                    if nodes[input.0].needs_grad {
                        ops::channel_mean_backward(upstream, slot(below, nodes, *input));
                    }
                }
                Op::ChannelStd { input, stats } => {
                    if nodes[input.0].needs_grad {
                        ops::channel_std_backward(
                            &nodes[input.0].value,
                            stats,
                            upstream,
                            slot(below, nodes, *input),
                        );
                    }
                }
                Op::AvgPool2 { input } => {
                    if nodes[input.0].needs_grad {
                        ops::avg_pool2_backward(upstream, slot(below, nodes, *input));
                    }
                }
                Op::Upsample2 { input } => {
                    if nodes[input.0].needs_grad {
                        ops::upsample2_backward(upstream, slot(below, nodes, *input));
                    }
                }
                Op::Add { a, b } => {
                    if nodes[a.0].needs_grad {
                        accumulate(slot(below, nodes, *a), upstream);
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(slot(below, nodes, *b), upstream);
                    }
                }
                Op::Scale { input, factor } => {
                    if nodes[input.0].needs_grad {
                        let g = slot(below, nodes, *input);
                        for (d, &u) in g.data_mut().iter_mut().zip(upstream.data()) {
                            *d += factor * u;
                        }
                    }
                }
                Op::SqErr { a, b, mean } => {
                    let up = upstream.scalar_value();
                    let a_value = &nodes[a.0].value;
                    let b_value = &nodes[b.0].value;
                    if nodes[a.0].needs_grad {
                        ops::sq_err_backward(
                            a_value,
                            b_value,
                            *mean,
                            up,
                            Some(slot(below, nodes, *a)),
                            None,
                        );
                    }
                    if nodes[b.0].needs_grad {
                        ops::sq_err_backward(
                            a_value,
                            b_value,
                            *mean,
                            up,
                            None,
                            Some(slot(below, nodes, *b)),
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient slot for `id`, allocated on first touch.
fn slot<'a>(grads: &'a mut [Option<Grid>], nodes: &[Node], id: NodeId) -> &'a mut Grid {
    let (c, h, w) = nodes[id.0].value.shape();
    grads[id.0].get_or_insert_with(|| Grid::zeros(c, h, w))
}

fn accumulate(dst: &mut Grid, src: &Grid) {
    debug_assert!(dst.same_shape(src));
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}
