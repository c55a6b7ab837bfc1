use super::graph::{gather, matmul_dims, rope, scatter, Graph, Op, Var};
use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fft;

/// Gradients of a scalar loss with respect to the trainable leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sums a gradient of the broadcast output shape back onto `shape`.
fn reduce_to(g: &[f64], shape: &[usize], numel: usize) -> Vec<f64> {
    if g.len() == numel {
        return g.to_vec();
    }
    debug_assert!(!shape.is_empty() || numel == 1);
    let mut out = vec![0.0; numel];
    for (i, v) in g.iter().enumerate() {
        out[i % numel] += v;
    }
    out
}

impl Graph {
    /// Reverse-mode sweep from a scalar `loss`. Nodes are visited in strict
    /// reverse append order; leaves created with `requires_grad` receive
    /// `dLoss/dLeaf`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("unknown node {}", loss.0)))?;
        if node.value.numel() != 1 || !node.value.shape().is_empty() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss is detached from every trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.vjp(id, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if self.nodes[inp.0].requires_grad {
                        accumulate(&mut grads[inp.0], ig);
                    }
                }
            }
        }
        // only leaves keep their gradients
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[id];
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let n = g.len();
                let an = a.numel();
                let bn = b.numel();
                let av = |i: usize| a.data()[i % an];
                let bv = |i: usize| b.data()[i % bn];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match node.op {
                    Op::Add => (g.to_vec(), g.to_vec()),
                    Op::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Op::Mul => (
                        (0..n).map(|i| g[i] * bv(i)).collect(),
                        (0..n).map(|i| g[i] * av(i)).collect(),
                    ),
                    _ => (
                        (0..n).map(|i| g[i] / bv(i)).collect(),
                        (0..n).map(|i| -g[i] * av(i) / (bv(i) * bv(i))).collect(),
                    ),
                };
                vec![
                    wants(0).then(|| reduce_to(&ga, a.shape(), an)),
                    wants(1).then(|| reduce_to(&gb, b.shape(), bn)),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let d = matmul_dims(a.shape(), b.shape())?;
                let mut ga = wants(0).then(|| vec![0.0; a.numel()]);
                let mut gb = wants(1).then(|| vec![0.0; b.numel()]);
                let (m, k, n) = (d.m, d.k, d.n);
                for ia in 0..d.batch_a {
                    let ib = ia % d.batch_b;
                    let gc = &g[ia * m * n..(ia + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        kernels::gemm_nt(
                            gc,
                            &b.data()[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        kernels::gemm_tn(
                            &a.data()[ia * m * k..(ia + 1) * m * k],
                            gc,
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                vec![ga, gb]
            }
            Op::Reshape(_) => vec![Some(g.to_vec())],
            Op::Permute(perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (data, _) = kernels::permute(g, out.shape(), &inv);
                vec![Some(data)]
            }
            Op::Slice { axis, start, end } => {
                let a = inp(0);
                let gt = Tensor::new(g.to_vec(), out.shape().to_vec())?;
                let idx: Vec<usize> = (*start..*end).collect();
                vec![Some(scatter(&gt, *axis, &idx, a.shape()[*axis]).into_data())]
            }
            Op::Pad { axis, before, .. } => {
                let a = inp(0);
                let gt = Tensor::new(g.to_vec(), out.shape().to_vec())?;
                let idx: Vec<usize> = (0..a.shape()[*axis]).map(|i| i + before).collect();
                vec![Some(gather(&gt, *axis, &idx).into_data())]
            }
            Op::Gather { axis, indices } => {
                // scatter-add: indices may repeat
                let a = inp(0);
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut ga = vec![0.0; a.numel()];
                let k = indices.len();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut ga[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![Some(ga)]
            }
            Op::Scatter { axis, indices, .. } => {
                let gt = Tensor::new(g.to_vec(), out.shape().to_vec())?;
                vec![Some(gather(&gt, *axis, indices).into_data())]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let len = inp(i).shape()[*axis];
                    if wants(i) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[s..s + len * inner]);
                        }
                        res.push(Some(gi));
                    } else {
                        res.push(None);
                    }
                    offset += len;
                }
                res
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let a = inp(0);
                let mean = matches!(node.op, Op::Mean { .. });
                match axis {
                    None => {
                        let s = if mean { g[0] / a.numel().max(1) as f64 } else { g[0] };
                        vec![Some(vec![s; a.numel()])]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(a.shape(), *ax);
                        let s = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
                        let mut ga = vec![0.0; a.numel()];
                        for o in 0..outer {
                            for kk in 0..len {
                                let dst = &mut ga[(o * len + kk) * inner..(o * len + kk + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d = v * s;
                                }
                            }
                        }
                        vec![Some(ga)]
                    }
                }
            }
            Op::Softmax => {
                let d = *out.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(d)
                    .zip(out.data().chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![Some(ga)]
            }
            Op::RmsNorm { .. } => {
                let x = inp(0);
                let d = *x.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for (row, r) in node.saved.iter().enumerate() {
                    let xr = &x.data()[row * d..(row + 1) * d];
                    let gr = &g[row * d..(row + 1) * d];
                    let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let c = r * r * r * dot / d as f64;
                    for j in 0..d {
                        ga[row * d + j] = r * gr[j] - c * xr[j];
                    }
                }
                vec![Some(ga)]
            }
            Op::Silu => {
                let x = inp(0);
                let ga = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(ga)]
            }
            Op::Sqrt => {
                // Zero subgradient at the origin.
                let ga = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, gv)| if y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .collect();
                vec![Some(ga)]
            }
            Op::Ln => {
                let ga = inp(0).data().iter().zip(g).map(|(x, gv)| gv / x).collect();
                vec![Some(ga)]
            }
            Op::Abs => {
                let ga = inp(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        if x > 0.0 {
                            *gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(ga)]
            }
            Op::Clamp { lo, hi } => {
                let ga = inp(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| if x > *lo && x < *hi { *gv } else { 0.0 })
                    .collect();
                vec![Some(ga)]
            }
            Op::Rope { positions, base } => {
                let gt = Tensor::new(g.to_vec(), out.shape().to_vec())?;
                vec![Some(rope(&gt, positions, *base, true))]
            }
            Op::Rfft { dims } => {
                let a = inp(0);
                let split = a.ndim() - dims;
                let extents = &a.shape()[split..];
                let batch: usize = a.shape()[..split].iter().product();
                vec![Some(fft::rfft_adjoint_batch(g, batch, extents))]
            }
            Op::Irfft { extents } => {
                let batch: usize = out.numel() / extents.iter().product::<usize>();
                vec![Some(fft::irfft_adjoint_batch(g, batch, extents))]
            }
        })
    }
}
