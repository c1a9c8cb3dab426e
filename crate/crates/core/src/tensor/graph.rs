use crate::par::{self, Exec};

use super::{ensure_same, ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Cells per work unit in the 1×1 kernels. Fixed so that partial sums are
/// folded in the same order regardless of the thread count.
const CELL_CHUNK: usize = 64;

/// Node handle inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a loss folds its elementwise terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv1x1 { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Neighborhood { x: Var, radius: usize, dilation: usize },
    Mse { a: Var, b: Var, reduction: Reduction },
    Mae { a: Var, b: Var, reduction: Reduction },
    Sum(Var),
    /// Scalar-valued op whose local gradients were computed in the forward pass.
    Custom { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any parameter is upstream of this node.
    needs_grad: bool,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Conv1x1 { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
            Op::Slice { x, .. } | Op::Neighborhood { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Mse { a, b, .. } | Op::Mae { a, b, .. } => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid topological order for backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn check<T: Scalar>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>, TensorError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn with_last<T>(t: &Tensor<T>, c: usize) -> Vec<usize> {
    let mut s = t.shape.clone();
    *s.last_mut().unwrap() = c;
    s
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), exec: Exec::default() }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// A leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    /// Per-cell affine map over channels: `x[.., Cin] · w[Cin, Cout] + b[Cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let cin = xt.channels();
        if wt.shape.len() != 2 || wt.shape[0] != cin {
            return Err(TensorError::ShapeMismatch { op: "conv1x1", left: xt.shape.clone(), right: wt.shape.clone() });
        }
        let cout = wt.shape[1];
        ensure_same("conv1x1 bias", &bt.shape, &[cout])?;
        let mut out = Tensor::zeros(&with_last(xt, cout));
        let (xd, wd, bd) = (&xt.data, &wt.data, &bt.data);
        par::for_chunks_mut(self.exec, &mut out.data, CELL_CHUNK * cout, |ci, chunk| {
            for (k, row) in chunk.chunks_exact_mut(cout).enumerate() {
                let p = ci * CELL_CHUNK + k;
                row.copy_from_slice(bd);
                for (i, &xi) in xd[p * cin..(p + 1) * cin].iter().enumerate() {
                    if xi != T::zero() {
                        for (o, &wv) in row.iter_mut().zip(&wd[i * cout..(i + 1) * cout]) {
                            *o = *o + xi * wv;
                        }
                    }
                }
            }
        });
        Ok(self.push(check(out, "conv1x1")?, Op::Conv1x1 { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(check(out, "sigmoid")?, Op::Sigmoid(x)))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        ensure_same(op, &at.shape, &bt.shape)?;
        let data = at.data.iter().zip(&bt.data).map(|(&x, &y)| f(x, y)).collect();
        check(Tensor { shape: at.shape.clone(), data }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let out = check(self.value(x).map(|v| v * s), "scale")?;
        Ok(self.push(out, Op::Scale(x, s)))
    }

    /// Channel-wise concatenation; all other axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        let (ca, cb) = (at.channels(), bt.channels());
        ensure_same("concat_channels", &at.shape[..at.shape.len() - 1], &bt.shape[..bt.shape.len() - 1])?;
        let mut data = Vec::with_capacity(at.len() + bt.len());
        for (ra, rb) in at.data.chunks_exact(ca).zip(bt.data.chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor { shape: with_last(at, ca + cb), data };
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xt = self.value(x);
        if start + len > xt.channels() || len == 0 {
            return Err(TensorError::ShapeMismatch { op: "slice_channels", left: xt.shape.clone(), right: vec![start, len] });
        }
        let out = xt.slice_channels(start, len);
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Stacks the `(2r+1)²` neighbours at spacing `dilation` of every cell
    /// along the channel axis (row-major tap order, zero outside the grid).
    /// Followed by [`Graph::conv1x1`] this is a dense `(2r+1)×(2r+1)` convolution.
    pub fn neighborhood(&mut self, x: Var, radius: usize, dilation: usize) -> Result<Var, TensorError> {
        let xt = self.value(x);
        if xt.shape.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "neighborhood", left: xt.shape.clone(), right: vec![0, 0, 0] });
        }
        let (h, w, c) = xt.dims3();
        let taps = taps(radius, dilation);
        let oc = taps.len() * c;
        let mut out = Tensor::zeros(&[h, w, oc]);
        let xd = &xt.data;
        par::for_chunks_mut(self.exec, &mut out.data, w * oc, |r, row| {
            for col in 0..w {
                let cell = &mut row[col * oc..(col + 1) * oc];
                for (t, &(dy, dx)) in taps.iter().enumerate() {
                    let (rr, cc) = (r as isize + dy, col as isize + dx);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        let src = (rr as usize * w + cc as usize) * c;
                        cell[t * c..(t + 1) * c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        });
        Ok(self.push(out, Op::Neighborhood { x, radius, dilation }))
    }

    /// Mean (or summed) squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        ensure_same("mse", &at.shape, &bt.shape)?;
        let mut s = at.data.iter().zip(&bt.data).map(|(&x, &y)| (x - y) * (x - y)).fold(T::zero(), |acc, v| acc + v);
        if reduction == Reduction::Mean {
            s = s / T::from_f64(at.len() as f64);
        }
        let out = check(Tensor::scalar(s), "mse")?;
        Ok(self.push(out, Op::Mse { a, b, reduction }))
    }

    /// Mean (or summed) absolute difference, as a scalar.
    pub fn mae(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        ensure_same("mae", &at.shape, &bt.shape)?;
        let mut s = at.data.iter().zip(&bt.data).map(|(&x, &y)| (x - y).abs()).fold(T::zero(), |acc, v| acc + v);
        if reduction == Reduction::Mean {
            s = s / T::from_f64(at.len() as f64);
        }
        let out = check(Tensor::scalar(s), "mae")?;
        Ok(self.push(out, Op::Mae { a, b, reduction }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data.iter().fold(T::zero(), |acc, &v| acc + v);
        let out = check(Tensor::scalar(s), "sum")?;
        Ok(self.push(out, Op::Sum(x)))
    }

    /// Registers a scalar function of `inputs` whose value and local
    /// gradients the caller already computed.
    pub fn scalar_op(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var, TensorError> {
        assert_eq!(inputs.len(), grads.len(), "one local gradient per input");
        for (v, g) in inputs.iter().zip(&grads) {
            ensure_same("scalar_op", &self.value(*v).shape, &g.shape)?;
        }
        let out = check(Tensor::scalar(value), "scalar_op")?;
        Ok(self.push(out, Op::Custom { inputs: inputs.to_vec(), grads }))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added
    /// (`+=`) into `store`; all node gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&lt.shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            debug_assert!(v.0 < i, "graph edges must point backwards");
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(&mut existing.data, &t.data),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => add_into(store.get_mut(*id).grad.data_mut(), &g.data),
            Op::Conv1x1 { x, w, b } => {
                let (gx, gw, gb) = self.conv1x1_backward(*x, *w, g, needs(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Relu(x) => {
                let xt = self.value(*x);
                let data = xt.data.iter().zip(&g.data).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                acc(*x, Tensor { shape: xt.shape.clone(), data });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y.data.iter().zip(&g.data).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                acc(*x, Tensor { shape: y.shape.clone(), data });
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let ga = bt.data.iter().zip(&g.data).map(|(&y, &gv)| gv * y).collect();
                let gb = at.data.iter().zip(&g.data).map(|(&x, &gv)| gv * x).collect();
                acc(*a, Tensor { shape: at.shape.clone(), data: ga });
                acc(*b, Tensor { shape: bt.shape.clone(), data: gb });
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).channels(), self.value(*b).channels());
                acc(*a, g.slice_channels(0, ca));
                acc(*b, g.slice_channels(ca, cb));
            }
            Op::Slice { x, start } => {
                let xt = self.value(*x);
                let (c, len) = (xt.channels(), g.channels());
                let mut gx = Tensor::zeros(&xt.shape);
                for (dst, src) in gx.data.chunks_exact_mut(c).zip(g.data.chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                acc(*x, gx);
            }
            Op::Neighborhood { x, radius, dilation } if needs(*x) => acc(*x, self.neighborhood_backward(*x, *radius, *dilation, g)),
            Op::Neighborhood { .. } => {}
            Op::Mse { a, b, reduction } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut k = g.item() * T::from_f64(2.0);
                if *reduction == Reduction::Mean {
                    k = k / T::from_f64(at.len() as f64);
                }
                let ga: Vec<T> = at.data.iter().zip(&bt.data).map(|(&x, &y)| k * (x - y)).collect();
                let gb = ga.iter().map(|&v| -v).collect();
                acc(*a, Tensor { shape: at.shape.clone(), data: ga });
                acc(*b, Tensor { shape: bt.shape.clone(), data: gb });
            }
            Op::Mae { a, b, reduction } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut k = g.item();
                if *reduction == Reduction::Mean {
                    k = k / T::from_f64(at.len() as f64);
                }
                let sign = |d: T| if d > T::zero() { T::one() } else if d < T::zero() { -T::one() } else { T::zero() };
                let ga: Vec<T> = at.data.iter().zip(&bt.data).map(|(&x, &y)| k * sign(x - y)).collect();
                let gb = ga.iter().map(|&v| -v).collect();
                acc(*a, Tensor { shape: at.shape.clone(), data: ga });
                acc(*b, Tensor { shape: bt.shape.clone(), data: gb });
            }
            Op::Sum(x) => {
                let xt = self.value(*x);
                acc(*x, Tensor::full(&xt.shape, g.item()));
            }
            Op::Custom { inputs, grads: local } => {
                let k = g.item();
                for (v, lg) in inputs.iter().zip(local) {
                    acc(*v, lg.map(|d| d * k));
                }
            }
        }
    }

    fn conv1x1_backward(&self, x: Var, w: Var, g: &Tensor<T>, want_gx: bool) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let (xt, wt) = (self.value(x), self.value(w));
        let (cin, cout) = (wt.shape[0], wt.shape[1]);
        let cells = xt.cells();
        let (xd, wd, gd) = (&xt.data, &wt.data, &g.data);

        let gx = want_gx.then(|| {
            let mut gx = Tensor::zeros(&xt.shape);
            par::for_chunks_mut(self.exec, &mut gx.data, CELL_CHUNK * cin, |ci, chunk| {
                for (k, row) in chunk.chunks_exact_mut(cin).enumerate() {
                    let p = ci * CELL_CHUNK + k;
                    let grow = &gd[p * cout..(p + 1) * cout];
                    for (i, gxi) in row.iter_mut().enumerate() {
                        *gxi = grow.iter().zip(&wd[i * cout..(i + 1) * cout]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    }
                }
            });
            gx
        });

        let n_chunks = cells.div_ceil(CELL_CHUNK);
        let partials = par::map_range(self.exec, n_chunks, |ci| {
            let mut pw = vec![T::zero(); cin * cout];
            let mut pb = vec![T::zero(); cout];
            for p in ci * CELL_CHUNK..((ci + 1) * CELL_CHUNK).min(cells) {
                let grow = &gd[p * cout..(p + 1) * cout];
                add_into(&mut pb, grow);
                for (i, &xi) in xd[p * cin..(p + 1) * cin].iter().enumerate() {
                    if xi != T::zero() {
                        for (o, &gv) in pw[i * cout..(i + 1) * cout].iter_mut().zip(grow) {
                            *o = *o + xi * gv;
                        }
                    }
                }
            }
            (pw, pb)
        });
        let mut gw = Tensor::zeros(&wt.shape);
        let mut gb = Tensor::zeros(&[cout]);
        for (pw, pb) in &partials {
            add_into(&mut gw.data, pw);
            add_into(&mut gb.data, pb);
        }
        (gx, gw, gb)
    }

    fn neighborhood_backward(&self, x: Var, radius: usize, dilation: usize, g: &Tensor<T>) -> Tensor<T> {
        let xt = self.value(x);
        let (h, w, c) = xt.dims3();
        let taps = taps(radius, dilation);
        let oc = taps.len() * c;
        let gd = &g.data;
        let mut gx = Tensor::zeros(&xt.shape);
        // gather form: each input cell collects from the output cells that read it
        par::for_chunks_mut(self.exec, &mut gx.data, w * c, |r, row| {
            for col in 0..w {
                let cell = &mut row[col * c..(col + 1) * c];
                for (t, &(dy, dx)) in taps.iter().enumerate() {
                    let (rr, cc) = (r as isize - dy, col as isize - dx);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        let src = (rr as usize * w + cc as usize) * oc + t * c;
                        add_into(cell, &gd[src..src + c]);
                    }
                }
            }
        });
        gx
    }
}

/// Row-major `(dy, dx)` tap offsets of a square neighbourhood.
fn taps(radius: usize, dilation: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let d = dilation.max(1) as isize;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            out.push((dy * d, dx * d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = vals.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn conv1x1_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let x = g.constant(Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn conv1x1_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.conv1x1(x, w, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_weight_grad_is_channel_sums() {
        let xt = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let (mut s, ids) = store_with(&[("w", Tensor::from_vec(&[2, 1], vec![0.3, -0.2]).unwrap()), ("b", Tensor::zeros(&[1]))]);
        let mut g = Graph::new();
        let x = g.constant(xt);
        let w = g.param(&s, ids[0]);
        let b = g.param(&s, ids[1]);
        let y = g.conv1x1(x, w, b).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad.data(), &[4.0, 7.0]);
        assert_eq!(s.get(ids[1]).grad.data(), &[2.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2], vec![3.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let m = g.mse(a, b, Reduction::Mean).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let m = g.mse(a, a, Reduction::Mean).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[1]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![-500.0, 500.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(&[1], vec![f32::MAX]).unwrap());
        assert_eq!(g.add(a, a), Err(TensorError::NonFinite("add")));
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let (mut s, ids) = store_with(&[("p", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap())]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let p = g.param(&s, ids[0]);
            let l = g.sum(p).unwrap();
            g.backward(l, &mut s).unwrap();
        }
        assert_eq!(s.get(ids[0]).grad.data(), &[2.0; 4]);
        s.zero_grads();
        assert_eq!(s.get(ids[0]).grad.data(), &[0.0; 4]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1, 2, 1], vec![9.0, 8.0]).unwrap());
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let a2 = g.slice_channels(c, 0, 2).unwrap();
        let b2 = g.slice_channels(c, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn neighborhood_zero_pads() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let n = g.neighborhood(x, 1, 1).unwrap();
        let v = g.value(n);
        assert_eq!(v.shape(), &[2, 2, 9]);
        // top-left cell: only taps (0,0),(0,1),(1,0),(1,1) land inside
        assert_eq!(&v.data()[0..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
        let m = g.neighborhood(x, 0, 3).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let mut s = ParamStore::new();
        assert!(matches!(g.backward(x, &mut s), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn seq_and_par_are_bitwise_equal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::<f32>::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (xt, wt, bt) = (rand_t(&[17, 13, 5]), rand_t(&[45, 7]), rand_t(&[7]));
        let run = |exec| {
            let mut s = ParamStore::new();
            let wid = s.add("w", wt.clone());
            let bid = s.add("b", bt.clone());
            let mut g = Graph::with_exec(exec);
            let x = g.constant(xt.clone());
            let n = g.neighborhood(x, 1, 2).unwrap();
            let w = g.param(&s, wid);
            let b = g.param(&s, bid);
            let y = g.conv1x1(n, w, b).unwrap();
            let y = g.relu(y).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l, &mut s).unwrap();
            (g.value(l).clone(), s)
        };
        assert_eq!(run(Exec::Seq), run(Exec::Par));
    }
}
