//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes. [`Graph::backward`] consumes the tape, writes gradients into every
//! non-frozen [`Param`] reached from the loss, and returns gradients for
//! leaves created with [`Graph::leaf`].
//!
//! Parameters registered as frozen contribute no gradient of their own, but
//! gradients keep flowing through the ops that read them to upstream nodes.

pub mod gradcheck;
pub mod kernels;
pub mod params;

use thiserror::Error;

use crate::tensor::{gemm, Layout, Scalar, Tensor};
use kernels::ConvGeom;
pub use params::{Param, ParamGroup, ParamSlot};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf {
        requires_grad: bool,
    },
    Param {
        param: Param<T>,
        frozen: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Scale(Var, T),
    L1(Var, Var),
    KlUnit(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the leaves created with [`Graph::leaf`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Splits a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` shape into `(n, c, h, w)`.
fn image_dims(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
        }),
    }
}

fn with_batch(rank3: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if rank3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
            false,
        )
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
            true,
        )
    }

    /// Reads a parameter into the graph. When `frozen`, backward neither
    /// computes nor stores its gradient.
    pub fn param(&mut self, param: &Param<T>, frozen: bool) -> Var {
        let (value, trainable) = {
            let slot = param.read();
            (slot.value.clone(), slot.trainable)
        };
        let needs = trainable && !frozen;
        self.push(
            value,
            Op::Param {
                param: param.clone(),
                frozen: frozen || !trainable,
            },
            needs,
        )
    }

    fn check_bias(
        &self,
        op: &'static str,
        b: Option<Var>,
        channels: usize,
    ) -> Result<(), TensorError> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(TensorError::Shape {
                    op,
                    detail: format!("bias shape {:?}, expected [{channels}]", self.shape(b)),
                });
            }
        }
        Ok(())
    }

    /// 2-d convolution, weight `[K, C, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = image_dims("conv2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [k, wc, kh, kw] = ws[..] else {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("weight must be [K,C,kh,kw], got {ws:?}"),
            });
        };
        if wc != c {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("input channels (axis C) {c} != weight channels {wc}"),
            });
        }
        self.check_bias("conv2d", b, k)?;
        let geom = ConvGeom::new("conv2d", c, h, wd, k, kh, kw, stride, pad)?;
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
        );
        let shape = with_batch(xs.len() == 3, n, k, geom.ho, geom.wo);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                cols: if needs && self.needs(w) {
                    cols
                } else {
                    Vec::new()
                },
            },
            needs,
        ))
    }

    /// Transposed convolution, weight `[C_in, C_out, kh, kw]`; the adjoint of
    /// [`Graph::conv2d`] with the same weight.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, wd) = image_dims("conv_transpose2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [wk, c_out, kh, kw] = ws[..] else {
            return Err(TensorError::Shape {
                op: "conv_transpose2d",
                detail: format!("weight must be [C_in,C_out,kh,kw], got {ws:?}"),
            });
        };
        if wk != c {
            return Err(TensorError::Shape {
                op: "conv_transpose2d",
                detail: format!("input channels (axis C) {c} != weight axis 0 {wk}"),
            });
        }
        if stride == 0
            || (h - 1) * stride + kh < 2 * pad + 1
            || (wd - 1) * stride + kw < 2 * pad + 1
        {
            return Err(TensorError::Shape {
                op: "conv_transpose2d",
                detail: format!("empty output for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {pad}"),
            });
        }
        self.check_bias("conv_transpose2d", b, c_out)?;
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (wd - 1) * stride + kw - 2 * pad;
        let geom = ConvGeom::new("conv_transpose2d", c_out, ho, wo, c, kh, kw, stride, pad)?;
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv_transpose2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
        );
        let shape = with_batch(xs.len() == 3, n, c_out, ho, wo);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, n }, needs))
    }

    fn bn_check(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize), TensorError> {
        let (n, c, h, w) = image_dims("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} must be [{c}] (axis C)",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch norm: normalises each channel by the batch
    /// statistics. Returns the statistics so the caller can update running
    /// averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let m = n * plane;
        if m < 2 {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: "training mode needs more than one value per channel (N*H*W > 1)".into(),
            });
        }
        let eps = T::from_f64(BN_EPS);
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += xd[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let mu = s / T::from_f64(m as f64);
            let mut q = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    q += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = q / T::from_f64(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|&v| v * T::from_f64(m as f64 / (m as f64 - 1.0)))
            .collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true, n, c, plane)?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm using the supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var, TensorError> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: format!("running stats must have {c} channels"),
            });
        }
        let eps = T::from_f64(BN_EPS);
        let inv_std = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false, n, c, plane)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        plane: usize,
    ) -> Result<Var, TensorError> {
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "l1_loss",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let sum: T = va.iter().zip(vb).map(|(&p, &q)| (p - q).abs()).sum();
        let value = Tensor::scalar(sum / T::from_f64(va.len() as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::L1(a, b), needs))
    }

    /// `0.5 * mean(mu^2)`: KL of a unit-variance Gaussian centred at each code
    /// entry from N(0, 1), averaged over entries.
    pub fn kl_unit_gaussian(&mut self, mu: Var) -> Var {
        let d = self.value(mu).data();
        let sq: T = d.iter().map(|&v| v * v).sum();
        let value = Tensor::scalar(T::from_f64(0.5) * sq / T::from_f64(d.len() as f64));
        let needs = self.needs(mu);
        self.push(value, Op::KlUnit(mu), needs)
    }

    /// `x [N,F] -> x W^T + b` with `W [O,F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, f], &[o, wf]) = (&xs[..], &ws[..]) else {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("expected x [N,F] and W [O,F], got {xs:?} and {ws:?}"),
            });
        };
        if f != wf {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("feature axis F {f} != weight axis 1 {wf}"),
            });
        }
        self.check_bias("linear", b, o)?;
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            f,
            o,
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v += bb);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = image_dims("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let d = self.value(x).data();
        let out = d
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / T::from_f64(plane as f64))
            .collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    /// Mean softmax cross-entropy of `logits [N,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        let [n, k] = ls[..] else {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("logits must be [N,K], got {ls:?}"),
            });
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("{} labels for batch {n} with {k} classes", labels.len()),
            });
        }
        let d = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &d[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        let value = Tensor::scalar(loss / T::from_f64(n as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `sum_i w_i x_i`, a scalar projection used to test non-scalar ops.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var, TensorError> {
        if self.shape(x) != weights.shape() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                detail: format!("{:?} vs {:?}", self.shape(x), weights.shape()),
            });
        }
        let value = Tensor::scalar(self.value(x).dot(weights));
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        fn accum<T: Scalar>(
            grads: &mut [Option<Tensor<T>>],
            nodes: &[Node<T>],
            v: Var,
            g: Tensor<T>,
        ) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        let vec_into =
            |shape: &[usize], data: Vec<T>| Tensor::from_vec(shape, data).expect("gradient shape");

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        leaves[idx] = Some(dy);
                    }
                }
                Op::Param { param, frozen } => {
                    if !*frozen {
                        param.write().grad.add_assign(&dy);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    n,
                    cols,
                } => {
                    let need = [
                        nodes[x.0].needs_grad,
                        nodes[w.0].needs_grad,
                        b.is_some_and(|b| nodes[b.0].needs_grad),
                    ];
                    let g = kernels::conv2d_backward(
                        geom,
                        *n,
                        dy.data(),
                        cols,
                        nodes[w.0].value.data(),
                        need,
                    );
                    if let Some(d) = g.input {
                        let s = nodes[x.0].value.shape().to_vec();
                        accum(&mut grads, &nodes, *x, vec_into(&s, d));
                    }
                    if let Some(d) = g.weight {
                        let s = nodes[w.0].value.shape().to_vec();
                        accum(&mut grads, &nodes, *w, vec_into(&s, d));
                    }
                    if let (Some(d), Some(b)) = (g.bias, b) {
                        accum(&mut grads, &nodes, *b, vec_into(&[d.len()], d));
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom, n } => {
                    let need = [
                        nodes[x.0].needs_grad,
                        nodes[w.0].needs_grad,
                        b.is_some_and(|b| nodes[b.0].needs_grad),
                    ];
                    let g = kernels::conv_transpose2d_backward(
                        geom,
                        *n,
                        dy.data(),
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        need,
                    );
                    if let Some(d) = g.input {
                        let s = nodes[x.0].value.shape().to_vec();
                        accum(&mut grads, &nodes, *x, vec_into(&s, d));
                    }
                    if let Some(d) = g.weight {
                        let s = nodes[w.0].value.shape().to_vec();
                        accum(&mut grads, &nodes, *w, vec_into(&s, d));
                    }
                    if let (Some(d), Some(b)) = (g.bias, b) {
                        accum(&mut grads, &nodes, *b, vec_into(&[d.len()], d));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let (n, c, h, w) =
                        image_dims("batch_norm", &shape).expect("checked in forward");
                    let plane = h * w;
                    let m = T::from_f64((n * plane) as f64);
                    let g = nodes[gamma.0].value.data();
                    let dyd = dy.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut sum_dxhat = vec![T::zero(); c];
                    let mut sum_dxhat_xhat = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            for j in base..base + plane {
                                dgamma[ch] += dyd[j] * xhat[j];
                                dbeta[ch] += dyd[j];
                                let dh = dyd[j] * g[ch];
                                sum_dxhat[ch] += dh;
                                sum_dxhat_xhat[ch] += dh * xhat[j];
                            }
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let mut dx = vec![T::zero(); dyd.len()];
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * plane;
                                for j in base..base + plane {
                                    let dh = dyd[j] * g[ch];
                                    dx[j] = if *train {
                                        inv_std[ch] / m
                                            * (m * dh
                                                - sum_dxhat[ch]
                                                - xhat[j] * sum_dxhat_xhat[ch])
                                    } else {
                                        dh * inv_std[ch]
                                    };
                                }
                            }
                        }
                        accum(&mut grads, &nodes, *x, vec_into(&shape, dx));
                    }
                    accum(&mut grads, &nodes, *gamma, vec_into(&[c], dgamma));
                    accum(&mut grads, &nodes, *beta, vec_into(&[c], dbeta));
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let dx = dy
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                        .collect();
                    accum(&mut grads, &nodes, *x, vec_into(out.shape(), dx));
                }
                Op::Tanh(x) => {
                    let out = &node.value;
                    let dx = dy
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &o)| g * (T::one() - o * o))
                        .collect();
                    accum(&mut grads, &nodes, *x, vec_into(out.shape(), dx));
                }
                Op::Add(a, b) => {
                    if a == b {
                        accum(&mut grads, &nodes, *a, dy.map(|v| v + v));
                    } else {
                        accum(&mut grads, &nodes, *a, dy.clone());
                        accum(&mut grads, &nodes, *b, dy);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accum(&mut grads, &nodes, *x, dy.map(|v| v * c));
                }
                Op::L1(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let scale = dy.item() / T::from_f64(va.len() as f64);
                    let da: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&p, &q)| {
                            if p > q {
                                scale
                            } else if p < q {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if a != b {
                        let db = da.iter().map(|&v| -v).collect();
                        accum(&mut grads, &nodes, *b, vec_into(vb.shape(), db));
                        accum(&mut grads, &nodes, *a, vec_into(va.shape(), da));
                    }
                }
                Op::KlUnit(mu) => {
                    let v = &nodes[mu.0].value;
                    let s = dy.item() / T::from_f64(v.len() as f64);
                    accum(&mut grads, &nodes, *mu, v.map(|m| m * s));
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, f) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    if nodes[x.0].needs_grad {
                        let mut dx = vec![T::zero(); n * f];
                        gemm(
                            n,
                            o,
                            f,
                            dy.data(),
                            Layout::Normal,
                            wv.data(),
                            Layout::Normal,
                            &mut dx,
                            false,
                        );
                        accum(&mut grads, &nodes, *x, vec_into(&[n, f], dx));
                    }
                    if nodes[w.0].needs_grad {
                        let mut dw = vec![T::zero(); o * f];
                        gemm(
                            o,
                            n,
                            f,
                            dy.data(),
                            Layout::Transposed,
                            xv.data(),
                            Layout::Normal,
                            &mut dw,
                            false,
                        );
                        accum(&mut grads, &nodes, *w, vec_into(&[o, f], dw));
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); o];
                        for row in dy.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                        accum(&mut grads, &nodes, *b, vec_into(&[o], db));
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let plane: usize = shape[shape.len() - 2..].iter().product();
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut dx = Vec::with_capacity(plane * dy.len());
                    for &g in dy.data() {
                        dx.extend(std::iter::repeat_n(g * inv, plane));
                    }
                    accum(&mut grads, &nodes, *x, vec_into(&shape, dx));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = nodes[logits.0].value.shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let s = dy.item() / T::from_f64(n as f64);
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] -= T::one();
                    }
                    d.iter_mut().for_each(|v| *v *= s);
                    accum(&mut grads, &nodes, *logits, vec_into(&shape, d));
                }
                Op::WeightedSum { x, weights } => {
                    let g = dy.item();
                    let shape = nodes[x.0].value.shape().to_vec();
                    accum(
                        &mut grads,
                        &nodes,
                        *x,
                        vec_into(&shape, weights.iter().map(|&w| w * g).collect()),
                    );
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_shape_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[3, 32, 32]));
        let w = g.input(Tensor::full(&[64, 3, 4, 4], 0.1));
        let b = g.input(Tensor::zeros(&[64]));
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[64, 16, 16]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.input(Tensor::zeros(&[1, 64, 16, 16]));
        let w = g.input(Tensor::zeros(&[64, 32, 4, 4]));
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 32, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis C"), "{err}");
    }

    #[test]
    fn relu_tanh_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], vec![-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        let th = g.tanh(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(g.value(th).data()[2], 0.0);
    }

    #[test]
    fn l1_and_kl_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], vec![1.0, -1.0]));
        let z = g.input(t(&[2], vec![0.0, 0.0]));
        let l = g.l1_loss(a, z).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let same = g.l1_loss(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let ones = g.input(Tensor::full(&[5], 1.0));
        let kl = g.kl_unit_gaussian(ones);
        assert_eq!(g.value(kl).item(), 0.5);
        let kz = g.kl_unit_gaussian(z);
        assert_eq!(g.value(kz).item(), 0.0);
        let bad = g.input(Tensor::zeros(&[3]));
        assert!(g.l1_loss(a, bad).is_err());
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[4], vec![1.0, -2.0, 0.5, 3.0]));
        let b = g.input(t(&[4], vec![0.0, 0.0, 0.5, 4.0]));
        let l = g.l1_loss(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, -0.25, 0.0, -0.25]);
    }

    #[test]
    fn kl_gradient_is_mu_over_n() {
        let mut g = Graph::<f64>::new();
        let mu = g.leaf(t(&[4], vec![1.0, -2.0, 0.5, 3.0]));
        let l = g.kl_unit_gaussian(mu);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(mu).unwrap().data(), &[0.25, -0.5, 0.125, 0.75]);
    }

    #[test]
    fn batch_norm_constant_channel_outputs_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2, 1, 3, 3], 4.2));
        let gamma = g.input(t(&[1], vec![1.7]));
        let beta = g.input(t(&[1], vec![-0.3]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == -0.3));
        assert_eq!(stats.var, vec![0.0]);
        assert!((stats.mean[0] - 4.2).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_standardized_input_is_near_identity() {
        let data: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5, -1.0, 1.0, -1.2, 1.2];
        let mean = data.iter().sum::<f64>() / 8.0;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let std: Vec<f64> = data.iter().map(|v| (v - mean) / var.sqrt()).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 1, 2, 2], std.clone()));
        let gamma = g.input(t(&[1], vec![1.0]));
        let beta = g.input(t(&[1], vec![0.0]));
        let (y, _) = g.batch_norm_train(x, gamma, beta).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&std) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn frozen_param_passes_gradient_upstream() {
        // loss = l1(w2 * relu(w1 * x), 0) with w2 frozen: w1 still learns.
        let w1 = Param::new(t(&[1, 1, 1, 1], vec![0.7]), true);
        let w2 = Param::new(t(&[1, 1, 1, 1], vec![-1.3]), true);
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let a = g.param(&w1, false);
        let b = g.param(&w2, true);
        let h = g.conv2d(x, a, None, 1, 0).unwrap();
        let h = g.relu(h);
        let y = g.conv2d(h, b, None, 1, 0).unwrap();
        let z = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let l = g.l1_loss(y, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(w2.read().grad.max_abs(), 0.0);
        // d/dw1 mean|w2 w1 x| = |w2| * mean(x) = 1.3 * 2.5
        assert!((w1.read().grad.item() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn all_frozen_leaves_zero_grads() {
        let w1 = Param::new(t(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]), true);
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], vec![1.0, -1.0]));
        let w = g.param(&w1, true);
        let y = g.linear(x, w, None).unwrap();
        let z = g.input(Tensor::zeros(&[1, 2]));
        let l = g.l1_loss(y, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(w1.read().grad.max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
}
