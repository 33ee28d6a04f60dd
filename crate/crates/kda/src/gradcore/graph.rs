//! Dynamic computation graph: operations are recorded in execution order and
//! replayed once, in reverse, by [`Graph::backward`].

use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::tensor::{Tensor, TensorError};

const SQRT_GRAD_EPS: f64 = 1e-12;

enum Op {
    MatMul {
        a: Tensor,
        b: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Relu {
        x: Tensor,
    },
    Sqrt {
        x: Tensor,
    },
    Square {
        x: Tensor,
    },
    Sigmoid {
        x: Tensor,
    },
    Scale {
        x: Tensor,
        c: f64,
    },
    AddBias {
        x: Tensor,
        bias: Tensor,
    },
    Transpose {
        x: Tensor,
    },
    ConcatCols {
        a: Tensor,
        b: Tensor,
    },
    RowSum {
        x: Tensor,
    },
    ScaleRows {
        x: Tensor,
        w: Tensor,
    },
    Sum {
        x: Tensor,
    },
    BatchMean {
        x: Tensor,
    },
    BatchVar {
        x: Tensor,
        mean: Vec<f64>,
    },
    Dropout {
        x: Tensor,
        mask: Vec<f64>,
    },
    Row {
        x: Tensor,
        index: usize,
    },
    SoftmaxCrossEntropy {
        logits: Tensor,
        label: usize,
        probs: Vec<f64>,
    },
    /// Negative-control fixture: forward is x², backward deliberately wrong.
    #[cfg(test)]
    BadSquare {
        x: Tensor,
    },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Records operations for one forward pass; dropped after backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(TensorError::Domain {
            op,
            detail: format!("expected a 2-D tensor, got shape {shape:?}"),
        });
    }
    Ok((shape[0], shape[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations.
    pub fn op_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let out = Tensor::from_vec(shape, data)?;
        self.nodes.push(Node {
            op,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = matrix_dims("matmul", a)?;
        let (k2, n) = matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let data = mat_mul_values(&a.data(), &b.data(), m, k, n);
        self.push(
            Op::MatMul {
                a: a.clone(),
                b: b.clone(),
            },
            vec![m, n],
            data,
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("add", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        self.push(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape(),
            data,
        )
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("sub", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        self.push(
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape(),
            data,
        )
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("mul", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        self.push(
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            a.shape(),
            data,
        )
    }

    /// Elementwise max(x, 0). The backward subgradient at 0 is 0. NaN inputs
    /// propagate (f64::max would silently turn them into 0 and hide
    /// non-finite states from downstream checks).
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x
            .data()
            .iter()
            .map(|v| if v.is_nan() { *v } else { v.max(0.0) })
            .collect();
        self.push(Op::Relu { x: x.clone() }, x.shape(), data)
    }

    /// Elementwise square root. Negative inputs are a domain error; the
    /// backward denominator is clamped so variance terms may legitimately be 0.
    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if let Some(v) = x.data().iter().copied().find(|v| *v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        let data = x.data().iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt { x: x.clone() }, x.shape(), data)
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.data().iter().map(|v| v * v).collect();
        self.push(Op::Square { x: x.clone() }, x.shape(), data)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(Op::Sigmoid { x: x.clone() }, x.shape(), data)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let data = x.data().iter().map(|v| v * c).collect();
        self.push(Op::Scale { x: x.clone(), c }, x.shape(), data)
    }

    /// Add a length-D bias vector to every row of a B×D matrix.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (b, d) = matrix_dims("add_bias", x)?;
        if bias.shape() != vec![d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape(),
                right: bias.shape(),
            });
        }
        let bias_data = bias.to_vec();
        let mut data = x.to_vec();
        for row in 0..b {
            for col in 0..d {
                data[row * d + col] += bias_data[col];
            }
        }
        self.push(
            Op::AddBias {
                x: x.clone(),
                bias: bias.clone(),
            },
            vec![b, d],
            data,
        )
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = matrix_dims("transpose", x)?;
        let src = x.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        self.push(Op::Transpose { x: x.clone() }, vec![c, r], data)
    }

    /// Concatenate two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (ra, ca) = matrix_dims("concat_cols", a)?;
        let (rb, cb) = matrix_dims("concat_cols", b)?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (da, db) = (a.data(), b.data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for row in 0..ra {
            data.extend_from_slice(&da[row * ca..(row + 1) * ca]);
            data.extend_from_slice(&db[row * cb..(row + 1) * cb]);
        }
        drop(da);
        drop(db);
        self.push(
            Op::ConcatCols {
                a: a.clone(),
                b: b.clone(),
            },
            vec![ra, ca + cb],
            data,
        )
    }

    /// Sum each row of a B×D matrix, producing a length-B vector.
    pub fn row_sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (b, d) = matrix_dims("row_sum", x)?;
        let src = x.data();
        let data = (0..b)
            .map(|row| src[row * d..(row + 1) * d].iter().sum())
            .collect();
        drop(src);
        self.push(Op::RowSum { x: x.clone() }, vec![b], data)
    }

    /// Scale row `b` of a B×D matrix by `w[b]`.
    pub fn scale_rows(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
        let (b, d) = matrix_dims("scale_rows", x)?;
        if w.shape() != vec![b] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: x.shape(),
                right: w.shape(),
            });
        }
        let (src, ws) = (x.data(), w.data());
        let mut data = Vec::with_capacity(b * d);
        for row in 0..b {
            data.extend(src[row * d..(row + 1) * d].iter().map(|v| v * ws[row]));
        }
        drop(src);
        drop(ws);
        self.push(
            Op::ScaleRows {
                x: x.clone(),
                w: w.clone(),
            },
            vec![b, d],
            data,
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let total = x.data().iter().sum();
        self.push(Op::Sum { x: x.clone() }, vec![1], vec![total])
    }

    /// Per-dimension sample mean and population variance (divide by B) of a
    /// B×D batch. B = 1 yields zero variance. Both outputs are differentiable.
    pub fn reduce_stats(&mut self, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let (b, d) = matrix_dims("reduce_stats", x)?;
        if b == 0 {
            return Err(TensorError::Domain {
                op: "reduce_stats",
                detail: "empty batch".to_string(),
            });
        }
        let src = x.data();
        let inv_b = 1.0 / b as f64;
        let mut mean = vec![0.0; d];
        for row in 0..b {
            for col in 0..d {
                mean[col] += src[row * d + col];
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_b);
        let mut var = vec![0.0; d];
        for row in 0..b {
            for col in 0..d {
                let dev = src[row * d + col] - mean[col];
                var[col] += dev * dev;
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_b);
        drop(src);
        let mean_t = self.push(Op::BatchMean { x: x.clone() }, vec![d], mean.clone())?;
        let var_t = self.push(Op::BatchVar { x: x.clone(), mean }, vec![d], var)?;
        Ok((mean_t, var_t))
    }

    /// Inverted dropout: keep with probability 1−p and rescale by 1/(1−p).
    /// With p = 0 this records nothing and returns the input unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: &Tensor,
        p: f64,
        rng: &mut R,
    ) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Domain {
                op: "dropout",
                detail: format!("probability {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(Op::Dropout { x: x.clone(), mask }, x.shape(), data)
    }

    /// Extract row `index` of a B×C matrix as a length-C vector.
    pub fn row(&mut self, x: &Tensor, index: usize) -> Result<Tensor, TensorError> {
        let (b, c) = matrix_dims("row", x)?;
        if index >= b {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                bound: b,
            });
        }
        let data = x.data()[index * c..(index + 1) * c].to_vec();
        self.push(
            Op::Row {
                x: x.clone(),
                index,
            },
            vec![c],
            data,
        )
    }

    /// Cross-entropy of a softmax over a length-C logit vector, with optional
    /// additive margins on the competitor logits. The margin at the label
    /// position is ignored, margins are treated as constants, and the log-sum
    /// is computed with a max shift.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        label: usize,
        margins: Option<&[f64]>,
    ) -> Result<Tensor, TensorError> {
        let shape = logits.shape();
        if shape.len() != 1 {
            return Err(TensorError::Domain {
                op: "softmax_cross_entropy",
                detail: format!("expected a 1-D logit vector, got shape {shape:?}"),
            });
        }
        let c = shape[0];
        if label >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: label,
                bound: c,
            });
        }
        if let Some(m) = margins {
            if m.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: vec![c],
                    right: vec![m.len()],
                });
            }
        }
        let src = logits.data();
        // z_k = s_k + m_k for competitors; z_y = s_y. Adding an exact zero
        // margin keeps the no-margin bit pattern.
        let z: Vec<f64> = src
            .iter()
            .enumerate()
            .map(|(k, &s)| match margins {
                Some(m) if k != label && m[k] != 0.0 => s + m[k],
                _ => s,
            })
            .collect();
        drop(src);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / denom).collect();
        let loss = denom.ln() + max - z[label];
        self.push(
            Op::SoftmaxCrossEntropy {
                logits: logits.clone(),
                label,
                probs,
            },
            vec![1],
            vec![loss],
        )
    }

    #[cfg(test)]
    pub fn bad_square(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let data = x.data().iter().map(|v| v * v).collect();
        self.push(Op::BadSquare { x: x.clone() }, x.shape(), data)
    }

    /// Propagate ∂loss/∂· to every tensor reachable from `loss`. Gradients of
    /// graph-produced intermediates live in per-pass scratch space; leaf
    /// tensors (parameters, inputs) receive them in their own grad buffers,
    /// accumulating across repeated calls.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::Contract {
                detail: format!("backward: loss of shape {:?} is not scalar", loss.shape()),
            });
        }
        let produced: HashSet<u64> = self.nodes.iter().map(|n| n.out.id()).collect();
        if !produced.contains(&loss.id()) {
            return Err(TensorError::Contract {
                detail: "backward: loss was not produced on this graph".to_string(),
            });
        }
        let mut scratch: HashMap<u64, Vec<f64>> = HashMap::new();
        scratch.insert(loss.id(), vec![1.0]);

        for node in self.nodes.iter().rev() {
            let go = match scratch.get(&node.out.id()) {
                Some(g) => g.clone(),
                None => continue, // not on any path to the loss
            };
            let mut sink = |t: &Tensor, delta: Vec<f64>| {
                if produced.contains(&t.id()) {
                    let slot = scratch.entry(t.id()).or_insert_with(|| vec![0.0; t.len()]);
                    for (s, d) in slot.iter_mut().zip(&delta) {
                        *s += d;
                    }
                } else {
                    t.accumulate_grad(&delta);
                }
            };
            match &node.op {
                Op::MatMul { a, b } => {
                    let (m, k) = (a.rows(), a.cols());
                    let n = b.cols();
                    let da = mat_mul_tb_values(&go, &b.data(), m, n, k);
                    let db = mat_mul_ta_values(&a.data(), &go, m, k, n);
                    sink(a, da);
                    sink(b, db);
                }
                Op::Add { a, b } => {
                    sink(a, go.clone());
                    sink(b, go);
                }
                Op::Sub { a, b } => {
                    sink(a, go.clone());
                    sink(b, go.iter().map(|g| -g).collect());
                }
                Op::Mul { a, b } => {
                    let da = go.iter().zip(b.data().iter()).map(|(g, v)| g * v).collect();
                    let db = go.iter().zip(a.data().iter()).map(|(g, v)| g * v).collect();
                    sink(a, da);
                    sink(b, db);
                }
                Op::Relu { x } => {
                    let dx = go
                        .iter()
                        .zip(x.data().iter())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    sink(x, dx);
                }
                Op::Sqrt { x } => {
                    // Clamp the denominator: variance terms legitimately hit 0.
                    let dx = go
                        .iter()
                        .zip(x.data().iter())
                        .map(|(g, v)| g * 0.5 / v.max(SQRT_GRAD_EPS).sqrt())
                        .collect();
                    sink(x, dx);
                }
                Op::Square { x } => {
                    let dx = go
                        .iter()
                        .zip(x.data().iter())
                        .map(|(g, v)| g * 2.0 * v)
                        .collect();
                    sink(x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = go
                        .iter()
                        .zip(node.out.data().iter())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    sink(x, dx);
                }
                Op::Scale { x, c } => {
                    sink(x, go.iter().map(|g| g * c).collect());
                }
                Op::AddBias { x, bias } => {
                    let d = bias.len();
                    let b = x.rows();
                    let mut dbias = vec![0.0; d];
                    for row in 0..b {
                        for col in 0..d {
                            dbias[col] += go[row * d + col];
                        }
                    }
                    sink(x, go.clone());
                    sink(bias, dbias);
                }
                Op::Transpose { x } => {
                    let (r, c) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = go[j * r + i];
                        }
                    }
                    sink(x, dx);
                }
                Op::ConcatCols { a, b } => {
                    let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    for row in 0..rows {
                        let base = row * (ca + cb);
                        da[row * ca..(row + 1) * ca].copy_from_slice(&go[base..base + ca]);
                        db[row * cb..(row + 1) * cb]
                            .copy_from_slice(&go[base + ca..base + ca + cb]);
                    }
                    sink(a, da);
                    sink(b, db);
                }
                Op::RowSum { x } => {
                    let (b, d) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; b * d];
                    for row in 0..b {
                        dx[row * d..(row + 1) * d].fill(go[row]);
                    }
                    sink(x, dx);
                }
                Op::ScaleRows { x, w } => {
                    let (b, d) = (x.rows(), x.cols());
                    let (xs, ws) = (x.to_vec(), w.to_vec());
                    let mut dx = vec![0.0; b * d];
                    let mut dw = vec![0.0; b];
                    for row in 0..b {
                        for col in 0..d {
                            dx[row * d + col] = go[row * d + col] * ws[row];
                            dw[row] += go[row * d + col] * xs[row * d + col];
                        }
                    }
                    sink(x, dx);
                    sink(w, dw);
                }
                Op::Sum { x } => {
                    sink(x, vec![go[0]; x.len()]);
                }
                Op::BatchMean { x } => {
                    let (b, d) = (x.rows(), x.cols());
                    let inv_b = 1.0 / b as f64;
                    let mut dx = vec![0.0; b * d];
                    for row in 0..b {
                        for col in 0..d {
                            dx[row * d + col] = go[col] * inv_b;
                        }
                    }
                    sink(x, dx);
                }
                Op::BatchVar { x, mean } => {
                    // ∂var_d/∂x[b,d] = 2 (x[b,d] − mean_d) / B; the mean's own
                    // dependence cancels because deviations sum to zero.
                    let (b, d) = (x.rows(), x.cols());
                    let xs = x.to_vec();
                    let scale = 2.0 / b as f64;
                    let mut dx = vec![0.0; b * d];
                    for row in 0..b {
                        for col in 0..d {
                            dx[row * d + col] = go[col] * scale * (xs[row * d + col] - mean[col]);
                        }
                    }
                    sink(x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = go.iter().zip(mask).map(|(g, m)| g * m).collect();
                    sink(x, dx);
                }
                Op::Row { x, index } => {
                    let (_, c) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; x.len()];
                    dx[index * c..(index + 1) * c].copy_from_slice(&go);
                    sink(x, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let dlogits = probs
                        .iter()
                        .enumerate()
                        .map(|(k, p)| go[0] * (p - if k == *label { 1.0 } else { 0.0 }))
                        .collect();
                    sink(logits, dlogits);
                }
                #[cfg(test)]
                Op::BadSquare { x } => {
                    let dx = go
                        .iter()
                        .zip(x.data().iter())
                        .map(|(g, v)| g * 3.0 * v)
                        .collect();
                    sink(x, dx);
                }
            }
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// C = A·B with A m×k and B k×n.
fn mat_mul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// dA = dC·Bᵀ with dC m×n and B k×n.
fn mat_mul_tb_values(dc: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += dc[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// dB = Aᵀ·dC with A m×k and dC m×n.
fn mat_mul_ta_values(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &dc[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * drow[j];
            }
        }
    }
    out
}
