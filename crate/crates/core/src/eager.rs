//! Node-at-a-time reference evaluation.
//!
//! Every node is computed into a full array from its operands' arrays,
//! starting from input data only; materialized intermediates are ignored.
//! Reductions and scans fold in row-major order over the reduced axes, so
//! results match a single-threaded fused run exactly.

use std::collections::HashMap;

use crate::dag::{region_shape, Axes, Graph, NodeId, OpKind, SliceRange};
use crate::dtype::DType;
use crate::elem::{self, Arith, ElemCode, ReduceOp};
use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::{Element, TensorBuffer, TensorData};

/// Evaluates `root` from the graph's inputs.
pub fn evaluate(g: &Graph, root: NodeId) -> Result<TensorBuffer> {
    evaluate_with(g, root, false).map(|(v, _)| v)
}

/// Evaluates `root` starting from every materialized node, as an eager
/// array library would after earlier results were computed. Also returns the
/// number of nodes computed.
pub fn evaluate_from_materialized(g: &Graph, root: NodeId) -> Result<(TensorBuffer, usize)> {
    evaluate_with(g, root, true)
}

fn evaluate_with(g: &Graph, root: NodeId, reuse: bool) -> Result<(TensorBuffer, usize)> {
    g.get(root)?;
    let order = ancestors(g, root, reuse);
    let mut computed = 0;
    let mut uses: HashMap<NodeId, usize> = HashMap::new();
    for &id in &order {
        if reuse && g.node(id).is_materialized() {
            continue;
        }
        for &p in &g.node(id).preds {
            *uses.entry(p).or_default() += 1;
        }
    }
    let mut values: HashMap<NodeId, TensorBuffer> = HashMap::new();
    for &id in &order {
        let node = g.node(id);
        let value = match (&node.op, node.data()) {
            (OpKind::Input, Some(d)) => d.clone(),
            (_, Some(d)) if reuse => d.clone(),
            (op, _) => {
                computed += 1;
                let args: Vec<&TensorBuffer> = node.preds.iter().map(|p| &values[p]).collect();
                let v = eval_op(op, &args, &node.shape, node.dtype)?;
                debug_assert_eq!(v.shape(), &node.shape);
                debug_assert_eq!(v.dtype(), node.dtype, "{op}");
                v
            }
        };
        let preds = if reuse && node.is_materialized() { &[][..] } else { &node.preds[..] };
        for p in preds {
            let left = uses.get_mut(p).unwrap();
            *left -= 1;
            if *left == 0 {
                values.remove(p);
            }
        }
        values.insert(id, value);
    }
    Ok((values.remove(&root).unwrap(), computed))
}

/// Ancestors of `root` in ascending id order, which is topological. With
/// `reuse`, traversal stops at materialized nodes.
fn ancestors(g: &Graph, root: NodeId, reuse: bool) -> Vec<NodeId> {
    let mut seen = vec![false; root.0 + 1];
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        if std::mem::replace(&mut seen[n.0], true) || reuse && g.node(n).is_materialized() {
            continue;
        }
        stack.extend(g.node(n).preds.iter().copied());
    }
    seen.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| NodeId(i)).collect()
}

/// Applies one operation to fully evaluated operands.
pub fn eval_op(op: &OpKind, args: &[&TensorBuffer], shape: &Shape, dtype: DType) -> Result<TensorBuffer> {
    match op {
        OpKind::Input => Err(Error::Arity { op: "input".into(), expected: 0, got: args.len() }),
        OpKind::Elementwise(ElemCode::Const(s)) => Ok(TensorBuffer::scalar(*s)),
        OpKind::Elementwise(code) => {
            let dtypes: Vec<DType> = args.iter().map(|a| a.dtype()).collect();
            let targets = code.operand_dtypes(&dtypes);
            let lanes: Vec<TensorData> = args
                .iter()
                .zip(&targets)
                .map(|(a, &t)| broadcast_to(a, shape).cast(t))
                .collect();
            let mut out = TensorData::zeros(dtype, 0);
            match lanes.as_slice() {
                [a] => elem::unary_into(*code, a, &mut out),
                [a, b] => elem::binary_into(*code, a, b, &mut out),
                [c, a, b] => elem::select_into(c, a, b, &mut out),
                _ => unreachable!(),
            }
            TensorBuffer::new(shape.clone(), out)
        }
        OpKind::Transpose(perm) => {
            let src = args[0];
            let strides = src.shape().strides();
            let view = View { dims: shape.dims().to_vec(), strides: perm.iter().map(|&p| strides[p]).collect(), offset: 0 };
            TensorBuffer::new(shape.clone(), view.gather(src.data()))
        }
        OpKind::Reshape(_) => args[0].reshaped(shape.clone()),
        OpKind::Slice(ranges) => {
            let src = args[0];
            TensorBuffer::new(shape.clone(), slice_view(src.shape(), ranges).gather(src.data()))
        }
        OpKind::SliceAssign(region) => {
            let (target, value) = (args[0], args[1]);
            let rs = region_shape(region);
            let value = broadcast_to(value, &rs).cast(dtype);
            let mut out = target.data().clone();
            let view = slice_view(target.shape(), region);
            crate::with_data!(&mut out, dst => {
                let src = Element::slice(&value).expect("value cast to target dtype");
                view.scatter(dst, src)
            });
            TensorBuffer::new(shape.clone(), out)
        }
        OpKind::Reduce { op, axes, .. } => reduce(args[0], *op, axes, shape, dtype),
        OpKind::Scan { op, axis } => scan(args[0], *op, *axis, dtype),
        OpKind::MatMul | OpKind::MatVec => matmul(args[0], args[1], shape, dtype),
    }
}

/// A strided window onto a row-major buffer.
struct View {
    dims: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
}

impl View {
    /// Calls `f(position, source offset)` for every element in row-major order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.dims.iter().product();
        if n == 0 {
            return;
        }
        let rank = self.dims.len();
        let mut idx = vec![0; rank];
        let mut at = self.offset;
        for pos in 0..n {
            f(pos, at);
            for d in (0..rank).rev() {
                idx[d] += 1;
                at += self.strides[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                at -= self.strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }

    fn gather(&self, src: &TensorData) -> TensorData {
        fn go<T: Element>(v: &View, src: &[T]) -> TensorData {
            let mut out = Vec::with_capacity(v.dims.iter().product());
            v.for_each(|_, at| out.push(src[at]));
            T::wrap(out)
        }
        crate::with_data!(src, s => go(self, s))
    }

    fn scatter<T: Element>(&self, dst: &mut [T], src: &[T]) {
        self.for_each(|pos, at| dst[at] = src[pos]);
    }
}

fn slice_view(shape: &Shape, ranges: &[SliceRange]) -> View {
    let strides = shape.strides();
    View {
        dims: ranges.iter().map(SliceRange::len).collect(),
        strides: ranges.iter().zip(&strides).map(|(r, s)| r.step * s).collect(),
        offset: ranges.iter().zip(&strides).map(|(r, s)| r.start * s).sum(),
    }
}

/// `src` broadcast to `shape` as a contiguous array.
fn broadcast_to(src: &TensorBuffer, shape: &Shape) -> TensorData {
    if src.shape() == shape {
        return src.data().clone();
    }
    let pad = shape.rank() - src.shape().rank();
    let own = src.shape().strides();
    let strides = (0..shape.rank())
        .map(|d| if d < pad || src.shape()[d - pad] == 1 { 0 } else { own[d - pad] })
        .collect();
    View { dims: shape.dims().to_vec(), strides, offset: 0 }.gather(src.data())
}

/// `src` with its axes reordered so that `last` become the innermost ones,
/// as a contiguous array.
fn move_axes_last(src: &TensorBuffer, last: &[usize]) -> (Vec<usize>, TensorData) {
    let rank = src.shape().rank();
    let order: Vec<usize> = (0..rank).filter(|d| !last.contains(d)).chain(last.iter().copied()).collect();
    let strides = src.shape().strides();
    let view = View {
        dims: order.iter().map(|&d| src.shape()[d]).collect(),
        strides: order.iter().map(|&d| strides[d]).collect(),
        offset: 0,
    };
    (order, view.gather(src.data()))
}

fn reduce(src: &TensorBuffer, op: ReduceOp, axes: &Axes, shape: &Shape, dtype: DType) -> Result<TensorBuffer> {
    let reduced = axes.resolve(src.shape().rank());
    let group: usize = reduced.iter().map(|&d| src.shape()[d]).product();
    let (_, data) = move_axes_last(src, &reduced);
    let data = data.cast(dtype);
    let outputs = shape.element_count();
    fn go<T: Arith>(op: ReduceOp, v: &[T], group: usize, outputs: usize) -> TensorData {
        let out: Vec<T> = (0..outputs)
            .map(|o| T::narrow(v[o * group..(o + 1) * group].iter().fold(T::Acc::identity(op), |acc, &x| acc.combine(op, x.widen()))))
            .collect();
        T::wrap(out)
    }
    let out = match &data {
        TensorData::I32(v) => go(op, v, group, outputs),
        TensorData::I64(v) => go(op, v, group, outputs),
        TensorData::F32(v) => go(op, v, group, outputs),
        TensorData::F64(v) => go(op, v, group, outputs),
        TensorData::Bool(_) => unreachable!("reductions accumulate in a numeric dtype"),
    };
    TensorBuffer::new(shape.clone(), out)
}

fn scan(src: &TensorBuffer, op: ReduceOp, axis: usize, dtype: DType) -> Result<TensorBuffer> {
    let shape = src.shape().clone();
    let (order, data) = move_axes_last(src, &[axis]);
    let mut data = data.cast(dtype);
    let line = shape[axis];
    let n = shape.element_count();
    if line > 0 {
        for l in 0..n / line {
            elem::scan_in_place(op, &mut data, l * line..(l + 1) * line);
        }
    }
    // Undo the axis move.
    let moved = Shape::new(order.iter().map(|&d| shape[d]).collect::<Vec<_>>());
    let moved_strides = moved.strides();
    let mut back = vec![0; order.len()];
    for (k, &d) in order.iter().enumerate() {
        back[d] = moved_strides[k];
    }
    let view = View { dims: shape.dims().to_vec(), strides: back, offset: 0 };
    TensorBuffer::new(shape, view.gather(&data))
}

fn matmul(a: &TensorBuffer, b: &TensorBuffer, shape: &Shape, dtype: DType) -> Result<TensorBuffer> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if b.shape().rank() == 2 { b.shape()[1] } else { 1 };
    let av = a.data().cast(dtype);
    let bv = b.data().cast(dtype);
    fn go<T: Arith>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> TensorData {
        let mut out = vec![T::default(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::identity(ReduceOp::Sum);
                for p in 0..k {
                    acc = acc.add(a[i * k + p].mul(b[p * n + j]));
                }
                out[i * n + j] = acc;
            }
        }
        T::wrap(out)
    }
    let out = match (&av, &bv) {
        (TensorData::I32(x), TensorData::I32(y)) => go(x, y, m, k, n),
        (TensorData::I64(x), TensorData::I64(y)) => go(x, y, m, k, n),
        (TensorData::F32(x), TensorData::F32(y)) => go(x, y, m, k, n),
        (TensorData::F64(x), TensorData::F64(y)) => go(x, y, m, k, n),
        _ => unreachable!("matmul operands share the result dtype"),
    };
    TensorBuffer::new(shape.clone(), out)
}
