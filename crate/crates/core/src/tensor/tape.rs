//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op records its inputs and output on the tape; `backward` replays the
//! tape in reverse. Gradients accumulate additively when a value fans out to
//! several consumers. A tape can run backward exactly once.

use super::{check_finite, matmul_nn, matmul_nt, matmul_tn, Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// The closed set of differentiable primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveOp {
    Matmul,
    Add,
    ElementwiseMul,
    ScalarScale { factor: f64 },
    SoftmaxLastAxis,
    LayerNorm { eps: f64 },
    Gelu,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Mean,
    EmbeddingGather { indices: Vec<usize> },
    RepeatLastDim { times: usize },
    Reshape { shape: Vec<usize> },
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var, broadcast_b: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose { a: Var },
    Mean { a: Var },
    Gather { table: Var, indices: Vec<usize> },
    Repeat { a: Var },
    Reshape { a: Var },
    BceWithLogits { logit: Var, target: f64, pos_weight: f64 },
    CrossEntropy { logits: Var, target: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "elementwise_mul",
            Op::Scale { .. } => "scalar_scale",
            Op::Softmax { .. } => "softmax_last_axis",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Mean { .. } => "mean",
            Op::Gather { .. } => "embedding_gather",
            Op::Repeat { .. } => "repeat_last_dim",
            Op::Reshape { .. } => "reshape",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients keyed by tape position, produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required grad and
    /// participated in the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients do not flow into (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, false, Op::Leaf))
    }

    /// Leaf tracked for gradients (trainable weights).
    pub fn variable(&mut self, value: Tensor) -> Result<Var, TensorError> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, true, Op::Leaf))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        check_finite(op.name(), value.data())?;
        Ok(self.push(value, requires_grad, op))
    }

    /// Applies one primitive. `inputs` arity depends on the op: `LayerNorm`
    /// takes `[x, gain, bias]`, `Concat` takes any number, everything else
    /// one or two.
    pub fn apply_primitive(
        &mut self,
        op: PrimitiveOp,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        let want = |n: usize, name: &'static str| -> Result<(), TensorError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::InvalidArgument {
                    op: name,
                    detail: format!("expected {} inputs, got {}", n, inputs.len()),
                })
            }
        };
        match op {
            PrimitiveOp::Matmul => {
                want(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveOp::Add => {
                want(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveOp::ElementwiseMul => {
                want(2, "elementwise_mul")?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveOp::ScalarScale { factor } => {
                want(1, "scalar_scale")?;
                self.scale(inputs[0], factor)
            }
            PrimitiveOp::SoftmaxLastAxis => {
                want(1, "softmax_last_axis")?;
                self.softmax_last_axis(inputs[0])
            }
            PrimitiveOp::LayerNorm { eps } => {
                want(3, "layer_norm")?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], eps)
            }
            PrimitiveOp::Gelu => {
                want(1, "gelu")?;
                self.gelu(inputs[0])
            }
            PrimitiveOp::Concat { axis } => self.concat(inputs, axis),
            PrimitiveOp::Slice { axis, start, len } => {
                want(1, "slice")?;
                self.slice(inputs[0], axis, start, len)
            }
            PrimitiveOp::Transpose => {
                want(1, "transpose")?;
                self.transpose(inputs[0])
            }
            PrimitiveOp::Mean => {
                want(1, "mean")?;
                self.mean(inputs[0])
            }
            PrimitiveOp::EmbeddingGather { indices } => {
                want(1, "embedding_gather")?;
                self.embedding_gather(inputs[0], &indices)
            }
            PrimitiveOp::RepeatLastDim { times } => {
                want(1, "repeat_last_dim")?;
                self.repeat_last_dim(inputs[0], times)
            }
            PrimitiveOp::Reshape { shape } => {
                want(1, "reshape")?;
                self.reshape(inputs[0], shape)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims differ: {:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(Tensor::new(vec![m, n], out)?, rg, Op::Matmul { a, b })
    }

    /// Elementwise add. Also accepts a rank-1 `b` broadcast over the rows of
    /// a rank-2 `a` (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let broadcast_b = if sa == sb {
            false
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("incompatible shapes {:?} and {:?}", sa, sb),
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len());
        if broadcast_b {
            let n = sb[0];
            for (i, &x) in av.iter().enumerate() {
                out.push(x + bv[i % n]);
            }
        } else {
            for (&x, &y) in av.iter().zip(bv) {
                out.push(x + y);
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(Tensor::new(sa, out)?, rg, Op::Add { a, b, broadcast_b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise_mul",
                detail: format!(
                    "shapes differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(Tensor::new(shape, out)?, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(shape, out)?, rg, Op::Scale { a, factor })
    }

    /// Softmax along the last axis of a rank-1 or rank-2 tensor. Shifted by
    /// the row max, so additive masks of -1e30 underflow to exactly 0.
    pub fn softmax_last_axis(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (rows, cols) = match t.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_last_axis",
                    detail: format!("expected rank 1 or 2, got {:?}", other),
                })
            }
        };
        if cols == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_last_axis",
                detail: "empty rows".into(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (dst, &x) in o.iter_mut().zip(row) {
                let e = (x - m).exp();
                *dst = e;
                sum += e;
            }
            for dst in o.iter_mut() {
                *dst /= sum;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(shape, out)?, rg, Op::Softmax { a })
    }

    /// Layer normalization along the last axis with learned gain and bias:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (rows, cols) = match t.shape() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("expected rank 1 or 2, got {:?}", other),
                })
            }
        };
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).shape() != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!(
                        "{} must have shape [{}], got {:?}",
                        name,
                        cols,
                        self.value(v).shape()
                    ),
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        {
            let xd = self.value(x).data();
            let gd = self.value(gain).data();
            let bd = self.value(bias).data();
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let o = &mut out[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    o[j] = gd[j] * (row[j] - mean) * rstd + bd[j];
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push_checked(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds },
        )
    }

    /// Exact GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(shape, out)?, rg, Op::Gelu { a })
    }

    /// Concatenation along `axis`. Rank-1 inputs concat along axis 0; rank-2
    /// inputs along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let rank = self.value(inputs[0]).rank();
        for &v in inputs {
            if self.value(v).rank() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: "inputs must share rank".into(),
                });
            }
        }
        let (shape, out) = match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for &v in inputs {
                    out.extend_from_slice(self.value(v).data());
                }
                (vec![out.len()], out)
            }
            (2, 0) => {
                let cols = self.value(inputs[0]).shape()[1];
                let mut rows = 0;
                let mut out = Vec::new();
                for &v in inputs {
                    let (r, c) = self.value(v).dims2()?;
                    if c != cols {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: format!("column counts differ: {} vs {}", cols, c),
                        });
                    }
                    rows += r;
                    out.extend_from_slice(self.value(v).data());
                }
                (vec![rows, cols], out)
            }
            (2, 1) => {
                let rows = self.value(inputs[0]).shape()[0];
                let mut cols = 0;
                for &v in inputs {
                    let (r, c) = self.value(v).dims2()?;
                    if r != rows {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: format!("row counts differ: {} vs {}", rows, r),
                        });
                    }
                    cols += c;
                }
                let mut out = vec![0.0; rows * cols];
                let mut offset = 0;
                for &v in inputs {
                    let (_, c) = self.value(v).dims2()?;
                    let data = self.value(v).data();
                    for r in 0..rows {
                        out[r * cols + offset..r * cols + offset + c]
                            .copy_from_slice(&data[r * c..(r + 1) * c]);
                    }
                    offset += c;
                }
                (vec![rows, cols], out)
            }
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    detail: format!("unsupported rank {} with axis {}", rank, axis),
                })
            }
        };
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_checked(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat { inputs: inputs.to_vec(), axis },
        )
    }

    /// Contiguous range along `axis`. Axis 0 takes elements of a rank-1 or
    /// rows of a rank-2 tensor; axis 1 takes columns of a rank-2 tensor.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (shape, out) = match (t.shape(), axis) {
            ([n], 0) => {
                if start + len > *n {
                    return Err(TensorError::InvalidArgument {
                        op: "slice",
                        detail: format!("range {}..{} out of bounds for len {}", start, start + len, n),
                    });
                }
                (vec![len], t.data()[start..start + len].to_vec())
            }
            ([r, c], 0) => {
                if start + len > *r {
                    return Err(TensorError::InvalidArgument {
                        op: "slice",
                        detail: format!("rows {}..{} out of bounds for {}", start, start + len, r),
                    });
                }
                (vec![len, *c], t.data()[start * c..(start + len) * c].to_vec())
            }
            ([r, c], 1) => {
                if start + len > *c {
                    return Err(TensorError::InvalidArgument {
                        op: "slice",
                        detail: format!("cols {}..{} out of bounds for {}", start, start + len, c),
                    });
                }
                let mut out = Vec::with_capacity(r * len);
                for row in 0..*r {
                    out.extend_from_slice(&t.data()[row * c + start..row * c + start + len]);
                }
                (vec![*r, len], out)
            }
            (shape, _) => {
                return Err(TensorError::InvalidArgument {
                    op: "slice",
                    detail: format!("unsupported axis {} for shape {:?}", axis, shape),
                })
            }
        };
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(shape, out)?, rg, Op::Slice { a, axis, start })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let data = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(vec![c, r], out)?, rg, Op::Transpose { a })
    }

    /// Mean over all elements, producing a scalar of shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::scalar(m), rg, Op::Mean { a })
    }

    /// Gathers rows of a rank-2 table by index.
    pub fn embedding_gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (g, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= g {
                return Err(TensorError::InvalidArgument {
                    op: "embedding_gather",
                    detail: format!("index {} out of bounds for table with {} rows", i, g),
                });
            }
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push_checked(
            Tensor::new(vec![indices.len(), d], out)?,
            rg,
            Op::Gather { table, indices: indices.to_vec() },
        )
    }

    /// Tiles a rank-1 `[n]` (or column `[n, 1]`) tensor into `[n, times]`.
    pub fn repeat_last_dim(&mut self, a: Var, times: usize) -> Result<Var, TensorError> {
        if times == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_last_dim",
                detail: "times must be positive".into(),
            });
        }
        let t = self.value(a);
        let n = match t.shape() {
            [n] => *n,
            [n, 1] => *n,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "repeat_last_dim",
                    detail: format!("expected [n] or [n, 1], got {:?}", other),
                })
            }
        };
        let mut out = Vec::with_capacity(n * times);
        for &x in t.data() {
            out.extend(std::iter::repeat(x).take(times));
        }
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(vec![n, times], out)?, rg, Op::Repeat { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(a);
        let expect: usize = shape.iter().product();
        if expect != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {:?}", t.shape(), shape),
            });
        }
        let data = t.data().to_vec();
        let rg = self.requires_grad(a);
        self.push_checked(Tensor::new(shape, data)?, rg, Op::Reshape { a })
    }

    /// Binary cross entropy with logits for a single-logit head. `target` is
    /// 0 or 1; positive examples are weighted by `pos_weight`.
    pub fn bce_with_logits(
        &mut self,
        logit: Var,
        target: f64,
        pos_weight: f64,
    ) -> Result<Var, TensorError> {
        if self.value(logit).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logit must be scalar, got {:?}", self.value(logit).shape()),
            });
        }
        if !(target == 0.0 || target == 1.0) {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                detail: format!("target must be 0 or 1, got {}", target),
            });
        }
        let z = self.value(logit).data()[0];
        let loss = pos_weight * target * softplus(-z) + (1.0 - target) * softplus(z);
        let rg = self.requires_grad(logit);
        self.push_checked(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits { logit, target, pos_weight },
        )
    }

    /// Softmax cross entropy for a rank-1 logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.rank() != 1 || t.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be non-empty rank 1, got {:?}", t.shape()),
            });
        }
        if target >= t.len() {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("target {} out of bounds for {} classes", target, t.len()),
            });
        }
        let z = t.data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let rg = self.requires_grad(logits);
        self.push_checked(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, target })
    }

    /// Runs reverse accumulation from a scalar `root`. Consumes the tape's
    /// single backward pass; a second call fails.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        self.consumed = true;
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backprop_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }

        let mut by_node = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) if self.nodes[i].requires_grad => {
                    check_finite(self.nodes[i].op.name(), &data)?;
                    by_node.push(Some(Tensor::new(self.nodes[i].value.shape().to_vec(), data)?));
                }
                _ => by_node.push(None),
            }
        }
        Ok(Gradients { by_node })
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let accumulate = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(existing) => {
                    for (e, &c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(gout, self.value(*b).data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(self.value(*a).data(), gout, &mut db, m, k, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b, broadcast_b } => {
                accumulate(grads, *a, gout);
                if *broadcast_b {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (idx, &g) in gout.iter().enumerate() {
                        db[idx % n] += g;
                    }
                    accumulate(grads, *b, &db);
                } else {
                    accumulate(grads, *b, gout);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> =
                        gout.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> =
                        gout.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = gout.iter().map(|&g| g * factor).collect();
                accumulate(grads, *a, &da);
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data();
                let cols = *self.nodes[i].value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let dr = &mut da[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let cols = self.value(*gain).len();
                let rows = xd.len() / cols;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    let inv_n = 1.0 / cols as f64;
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * gd[j];
                        dr[j] = rs * (dxhat - inv_n * sum_dxhat - inv_n * xhat * sum_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gain, &dgain);
                accumulate(grads, *bias, &dbias);
            }
            Op::Gelu { a } => {
                let xd = self.value(*a).data();
                let da: Vec<f64> = gout
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Concat { inputs, axis } => {
                let rank = self.value(inputs[0]).rank();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut offset = 0;
                        for &v in inputs {
                            let n = self.value(v).len();
                            accumulate(grads, v, &gout[offset..offset + n]);
                            offset += n;
                        }
                    }
                    (2, 1) => {
                        let rows = self.value(inputs[0]).shape()[0];
                        let total_cols = self.nodes[i].value.shape()[1];
                        let mut offset = 0;
                        for &v in inputs {
                            let c = self.value(v).shape()[1];
                            if self.nodes[v.0].requires_grad {
                                let mut dv = vec![0.0; rows * c];
                                for r in 0..rows {
                                    dv[r * c..(r + 1) * c].copy_from_slice(
                                        &gout[r * total_cols + offset..r * total_cols + offset + c],
                                    );
                                }
                                accumulate(grads, v, &dv);
                            }
                            offset += c;
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::Slice { a, axis, start } => {
                let src = self.value(*a);
                let mut da = vec![0.0; src.len()];
                match (src.shape(), axis) {
                    ([_], 0) => {
                        da[*start..*start + gout.len()].copy_from_slice(gout);
                    }
                    ([_, c], 0) => {
                        da[start * c..start * c + gout.len()].copy_from_slice(gout);
                    }
                    ([r, c], 1) => {
                        let len = gout.len() / r;
                        for row in 0..*r {
                            da[row * c + start..row * c + start + len]
                                .copy_from_slice(&gout[row * len..(row + 1) * len]);
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                accumulate(grads, *a, &da);
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = vec![0.0; r * c];
                for i2 in 0..c {
                    for j2 in 0..r {
                        da[j2 * c + i2] = gout[i2 * r + j2];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let g = gout[0] / n as f64;
                let da = vec![g; n];
                accumulate(grads, *a, &da);
            }
            Op::Gather { table, indices } => {
                if self.nodes[table.0].requires_grad {
                    let (g, d) = self.value(*table).dims2()?;
                    let mut dt = vec![0.0; g * d];
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += gout[r * d + j];
                        }
                    }
                    accumulate(grads, *table, &dt);
                }
            }
            Op::Repeat { a } => {
                let n = self.value(*a).len();
                let times = gout.len() / n;
                let mut da = vec![0.0; n];
                for t in 0..n {
                    for j in 0..times {
                        da[t] += gout[t * times + j];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, gout);
            }
            Op::BceWithLogits { logit, target, pos_weight } => {
                let z = self.value(*logit).data()[0];
                let sig = sigmoid(z);
                let dz = (1.0 - target) * sig - pos_weight * target * sigmoid(-z);
                accumulate(grads, *logit, &[gout[0] * dz]);
            }
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits).data();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
                let da: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let p = (v - m).exp() / sum;
                        gout[0] * (p - if j == *target { 1.0 } else { 0.0 })
                    })
                    .collect();
                accumulate(grads, *logits, &da);
            }
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn fanout_gradient_accumulates_additively() {
        // loss = mean(x + x) = 2 * mean(x), so dloss/dx = 2/n exactly.
        let mut tape = Tape::new();
        let x = tape.variable(t1(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = tape.add(x, x).unwrap();
        let loss = tape.mean(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0)).unwrap();
        let loss = tape.scale(x, 3.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardConsumed)));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.variable(t1(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.5, 10.0, 10.0, 10.0]).unwrap())
            .unwrap();
        let y = tape.softmax_last_axis(x).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_underflows_masked_entries_to_exact_zero() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![1, 3], vec![0.5, 0.25 - 1e30, -0.75 - 1e30]).unwrap())
            .unwrap();
        let y = tape.softmax_last_axis(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert_eq!(tape.value(y).data()[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(tape.value(y).data()[2].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn leaf_rejects_nan_input() {
        let mut tape = Tape::new();
        assert!(tape.constant(t1(&[0.0, f64::NAN])).is_err());
    }

    #[test]
    fn bce_matches_closed_form() {
        // z = 0 gives loss ln 2 for either label at unit weight.
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::scalar(0.0)).unwrap();
        let loss = tape.bce_with_logits(z, 1.0, 1.0).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.wrt(z).unwrap().item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn gather_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let table = tape
            .variable(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let picked = tape.embedding_gather(table, &[1, 1, 0]).unwrap();
        let loss = tape.mean(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(table).unwrap().data();
        // Row 1 is used twice, row 0 once, row 2 never; mean has 6 elements.
        assert_eq!(g, &[1.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.constant(t1(&[1.0, 2.0])).unwrap();
        let live = tape.variable(t1(&[3.0, 4.0])).unwrap();
        let prod = tape.mul(frozen, live).unwrap();
        let loss = tape.mean(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(frozen).is_none());
        assert_eq!(grads.wrt(live).unwrap().data(), &[0.5, 1.0]);
    }
}
