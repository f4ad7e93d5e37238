//! Reverse accumulation. Every vector-Jacobian product is built from
//! ordinary tensor operations, so when `create_graph` is set the returned
//! gradients are themselves differentiable.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tensor::{no_grad, Op, Tensor};

/// Returns `d root / d t` for each `t` in `wrt`.
///
/// Nodes in `wrt` that the root does not depend on get a zero gradient.
pub fn grad(root: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if root.len() != 1 {
        return Err(AutodiffError::NotScalar(root.shape().to_vec()));
    }
    if let Some(t) = wrt.iter().find(|t| !t.requires_grad()) {
        return Err(AutodiffError::NoGrad(t.shape().to_vec()));
    }
    if create_graph {
        run(root, wrt)
    } else {
        no_grad(|| run(root, wrt))
    }
}

/// Convenience wrapper: value and first-order gradients, no graph kept.
pub fn value_and_grad(root: &Tensor, wrt: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let v = root.item()?;
    Ok((v, grad(root, wrt, false)?))
}

fn run(root: &Tensor, wrt: &[Tensor]) -> Result<Vec<Tensor>> {
    let targets: HashSet<u64> = wrt.iter().map(Tensor::id).collect();

    // Collect the recorded subgraph that requires grad.
    let mut nodes: Vec<Tensor> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(op) = &t.0.op {
            stack.extend(op.parents().into_iter().cloned());
        }
        nodes.push(t);
    }
    // Parents are always created before children, so ids give a topological order.
    nodes.sort_by_key(Tensor::id);

    // A node is relevant if some target is reachable from it.
    let mut relevant: HashSet<u64> = HashSet::new();
    for t in &nodes {
        let hit = targets.contains(&t.id())
            || t.0.op.as_ref().is_some_and(|op| op.parents().iter().any(|p| relevant.contains(&p.id())));
        if hit {
            relevant.insert(t.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if relevant.contains(&root.id()) {
        grads.insert(root.id(), Tensor::full(root.shape(), 1.0));
    }
    let mut kept: HashMap<u64, Tensor> = HashMap::new();
    for node in nodes.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if targets.contains(&node.id()) {
            kept.insert(node.id(), g.clone());
        }
        let Some(op) = &node.0.op else { continue };
        for (parent, contrib) in vjp(node, op, &g, &relevant)? {
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&contrib)?,
                None => contrib,
            };
            grads.insert(parent.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|t| kept.remove(&t.id()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn vjp(node: &Tensor, op: &Op, g: &Tensor, relevant: &HashSet<u64>) -> Result<Vec<(Tensor, Tensor)>> {
    let want = |t: &Tensor| relevant.contains(&t.id());
    let mut out: Vec<(Tensor, Tensor)> = Vec::with_capacity(2);
    match op {
        Op::Add(a, b) => {
            if want(a) {
                out.push((a.clone(), g.clone()));
            }
            if want(b) {
                out.push((b.clone(), g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                out.push((a.clone(), g.clone()));
            }
            if want(b) {
                out.push((b.clone(), g.neg()));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                out.push((a.clone(), g.mul(b)?));
            }
            if want(b) {
                out.push((b.clone(), g.mul(a)?));
            }
        }
        Op::Div(a, b) => {
            if want(a) {
                out.push((a.clone(), g.div(b)?));
            }
            if want(b) {
                // d(a/b)/db = -(a/b)/b
                out.push((b.clone(), g.mul(node)?.div(b)?.neg()));
            }
        }
        Op::Neg(a) => out.push((a.clone(), g.neg())),
        Op::Scale(a, c) => out.push((a.clone(), g.scale(*c))),
        Op::AddScalar(a) => out.push((a.clone(), g.clone())),
        Op::Mask(a, m) => out.push((a.clone(), g.mask(m.clone())?)),
        Op::Relu(a) => {
            let m: Rc<[f64]> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            out.push((a.clone(), g.mask(m)?));
        }
        Op::Sigmoid(a) => {
            let one_minus = node.neg().add_scalar(1.0);
            out.push((a.clone(), g.mul(node)?.mul(&one_minus)?));
        }
        Op::Sqrt(a) => out.push((a.clone(), g.div(&node.scale(2.0))?)),
        Op::Ln(a) => out.push((a.clone(), g.div(a)?)),
        Op::Reshape(a) => out.push((a.clone(), g.reshape(a.shape())?)),
        Op::Transpose(a) => out.push((a.clone(), g.transpose()?)),
        Op::MatMul(a, b) => {
            if want(a) {
                out.push((a.clone(), g.matmul(&b.transpose()?)?));
            }
            if want(b) {
                out.push((b.clone(), a.transpose()?.matmul(g)?));
            }
        }
        Op::Broadcast { x, outer, inner } => {
            out.push((x.clone(), g.reduce(*outer, *inner)?.reshape(x.shape())?));
        }
        Op::Reduce { x, outer, inner } => {
            out.push((x.clone(), g.broadcast(*outer, *inner, x.shape())?));
        }
        Op::Narrow { x, axis, start } => {
            out.push((x.clone(), g.pad(*axis, *start, x.shape()[*axis])?));
        }
        Op::Pad { x, axis, start } => {
            out.push((x.clone(), g.narrow(*axis, *start, x.shape()[*axis])?));
        }
        Op::Softmax(a) => {
            let c = a.shape()[1];
            let row = g.mul(node)?.sum_rows()?.broadcast(1, c, a.shape())?;
            out.push((a.clone(), node.mul(&g.sub(&row)?)?));
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let (n, c) = (logits.shape()[0], logits.shape()[1]);
            let mut onehot = vec![0.0; n * c];
            for (i, &y) in labels.iter().enumerate() {
                onehot[i * c + y] = 1.0;
            }
            let onehot = Tensor::new(onehot, logits.shape())?;
            let diff = logits.softmax()?.sub(&onehot)?;
            let scale = g.expand_scalar(logits.shape())?;
            out.push((logits.clone(), diff.mul(&scale)?.scale(1.0 / n as f64)));
        }
        Op::Conv2d { x, w, geom } => {
            if want(x) {
                out.push((x.clone(), Tensor::conv2d_input_grad(g, w, *geom)));
            }
            if want(w) {
                out.push((w.clone(), Tensor::conv2d_weight_grad(x, g, *geom)));
            }
        }
        Op::Conv2dInputGrad { g: gg, w, geom } => {
            // node = A_x^T(gg, w); cotangent g lives in input space.
            if want(gg) {
                out.push((gg.clone(), Tensor::conv2d_geom(g, w, *geom)));
            }
            if want(w) {
                out.push((w.clone(), Tensor::conv2d_weight_grad(g, gg, *geom)));
            }
        }
        Op::Conv2dWeightGrad { x, g: gg, geom } => {
            // node = A_w^T(x, gg); cotangent g lives in weight space.
            if want(x) {
                out.push((x.clone(), Tensor::conv2d_input_grad(gg, g, *geom)));
            }
            if want(gg) {
                out.push((gg.clone(), Tensor::conv2d_geom(x, g, *geom)));
            }
        }
    }
    out.retain(|(p, _)| want(p));
    Ok(out)
}
