use crate::scalar::{gemm, Scalar};
use crate::tape::{gelu_grad, Node, Op, Var};
use crate::tensor::matrix_dims;

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.index()].get_or_insert_with(|| vec![T::zero(); len])
}

/// Reverse sweep. `grads` holds one slot per node and may be pre-filled for
/// leaves and parameters, in which case gradients are added to what is there.
/// On return only reached nodes that require grad have `Some`, plus the
/// pre-filled slots. Intermediate gradients are dropped once consumed.
pub(crate) fn run<T: Scalar>(
    nodes: &[Node<'_, T>],
    loss: Var,
    seed: T,
    mut grads: Vec<Option<Vec<T>>>,
) -> Vec<Option<Vec<T>>> {
    if !nodes[loss.index()].requires_grad {
        return grads;
    }
    slot(&mut grads, loss, 1)[0] += seed;

    for i in (0..=loss.index()).rev() {
        let node = &nodes[i];
        if !node.requires_grad {
            continue;
        }
        if matches!(node.op, Op::Leaf | Op::Param(_)) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let needs = |v: &Var| nodes[v.index()].requires_grad;
        let len = |v: &Var| nodes[v.index()].value.len();

        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.index()].shape[0], nodes[a.index()].shape[1]);
                let n = node.shape[1];
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                if needs(a) {
                    let ga = slot(&mut grads, *a, m * k);
                    // c = a·b  : ga += g·bᵀ ; c = a·bᵀ : ga += g·b
                    gemm(m, n, k, &g, false, bv, !trans_b, ga, true);
                }
                if needs(b) {
                    let gb = slot(&mut grads, *b, k * n);
                    if *trans_b {
                        gemm(n, m, k, &g, true, av, false, gb, true);
                    } else {
                        gemm(k, m, n, av, true, &g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let s = slot(&mut grads, *v, g.len());
                        s.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if needs(x) {
                    let s = slot(&mut grads, *x, g.len());
                    s.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                if needs(bias) {
                    let c = len(bias);
                    let s = slot(&mut grads, *bias, c);
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                if needs(a) {
                    let s = slot(&mut grads, *a, g.len());
                    for ((x, &gg), &o) in s.iter_mut().zip(&g).zip(bv.iter()) {
                        *x += gg * o;
                    }
                }
                if needs(b) {
                    let s = slot(&mut grads, *b, g.len());
                    for ((x, &gg), &o) in s.iter_mut().zip(&g).zip(av.iter()) {
                        *x += gg * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(x) {
                    let s = slot(&mut grads, *x, g.len());
                    s.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::Gelu { x, th } => {
                if needs(x) {
                    let xv = &nodes[x.index()].value;
                    let s = slot(&mut grads, *x, g.len());
                    for (((a, &gg), &v), &t) in s.iter_mut().zip(&g).zip(xv.iter()).zip(th) {
                        *a += gg * gelu_grad(v, t);
                    }
                }
            }
            Op::Softmax { x } => {
                if needs(x) {
                    let (r, c) = matrix_dims(&node.shape);
                    let y = &node.value;
                    let s = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = matrix_dims(&node.shape);
                let gv = &nodes[gain.index()].value;
                if needs(x) {
                    let inv_c = T::one() / T::from_f64(c as f64);
                    let s = slot(&mut grads, *x, r * c);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d *= inv_c;
                        mean_dh *= inv_c;
                        for j in 0..c {
                            s[i * c + j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if needs(gain) {
                    let s = slot(&mut grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if needs(bias) {
                    let s = slot(&mut grads, *bias, c);
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Embedding { table, idx } => {
                if needs(table) {
                    let d = node.shape[1];
                    let s = slot(&mut grads, *table, len(table));
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..d {
                            s[row * d + j] += g[k * d + j];
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let (r, total) = matrix_dims(&node.shape);
                let mut off = 0;
                for p in parts {
                    let (_, w) = matrix_dims(&nodes[p.index()].shape);
                    if needs(p) {
                        let s = slot(&mut grads, *p, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(p);
                    if needs(p) {
                        let s = slot(&mut grads, *p, n);
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(x) {
                    let (_, c) = matrix_dims(&node.shape);
                    let s = slot(&mut grads, *x, len(x));
                    let base = start * c;
                    s[base..base + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let (r, w) = matrix_dims(&node.shape);
                    let (_, c) = matrix_dims(&nodes[x.index()].shape);
                    let s = slot(&mut grads, *x, len(x));
                    for i in 0..r {
                        for j in 0..w {
                            s[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(x) {
                    let c = node.shape[1];
                    let s = slot(&mut grads, *x, len(x));
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[row * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(logits) {
                    let b = probs.len() / targets.len();
                    let up = g[0];
                    let s = slot(&mut grads, *logits, probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..b {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            s[i * b + j] += up * (probs[i * b + j] - onehot);
                        }
                    }
                }
            }
            Op::MseWeighted {
                pred,
                target,
                weight,
            } => {
                let pv = &nodes[pred.index()].value;
                let tv = &nodes[target.index()].value;
                let k = g[0] * (*weight + *weight);
                if needs(pred) {
                    let s = slot(&mut grads, *pred, pv.len());
                    for ((a, &p), &t) in s.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *a += k * (p - t);
                    }
                }
                if needs(target) {
                    let s = slot(&mut grads, *target, tv.len());
                    for ((a, &p), &t) in s.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                        *a -= k * (p - t);
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    let s = slot(&mut grads, *x, g.len());
                    s.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    let s = slot(&mut grads, *x, len(x));
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
    grads
}
