//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Ops are specialized to the shapes the models actually use (matmuls, conv,
//! pooling, attention plumbing) rather than general broadcasting; every op has
//! a finite-difference test in this module.
//!
//! Nodes track whether any tracked leaf feeds them; gradients are neither
//! stored nor computed for subgraphs that cannot reach a tracked leaf, so
//! frozen weights and constant inputs cost nothing in the backward pass.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tape<T>, &ArrayD<T>, &mut dyn FnMut(Var, ArrayD<T>))>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, backward: Option<(Vec<Var>, BackFn<T>)>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let (needs, back) = match backward {
            Some((parents, f)) => {
                let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
                (needs, if needs { Some(f) } else { None })
            }
            None => (false, None),
        };
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        let v = self.push(value, None);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Leaf treated as a constant: no gradient flows into or through it alone.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, None)
    }

    /// Walk the tape in reverse from `root`, accumulating gradients.
    ///
    /// `root` must be scalar-valued (zero-dim or a single element).
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar-valued"
        );
        let mut by_node: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(grad) = by_node[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].backward {
                let mut sink = |v: Var, contrib: ArrayD<T>| {
                    debug_assert_eq!(contrib.shape(), self.nodes[v.0].value.shape());
                    if !self.nodes[v.0].needs_grad {
                        return;
                    }
                    match &mut by_node[v.0] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                };
                back(self, &grad, &mut sink);
            } else {
                // leaves keep their gradient so callers can read it back
                by_node[i] = Some(grad);
            }
        }
        Grads { by_node }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |_, g, sink| {
                    sink(a, g.clone());
                    sink(b, g.clone());
                }),
            )),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |_, g, sink| {
                    sink(a, g.clone());
                    sink(b, g.mapv(|x| -x));
                }),
            )),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    sink(a, g * t.value(b));
                    sink(b, g * t.value(a));
                }),
            )),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |_, g, sink| sink(a, g.mapv(|x| x * c))),
            )),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let mut dx = g.clone();
                    dx.zip_mut_with(t.value(a), |d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    sink(a, dx);
                }),
            )),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        let out_idx = self.nodes.len();
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let y = t.value(Var(out_idx));
                    let mut dx = g.clone();
                    dx.zip_mut_with(y, |d, &yv| *d = *d * yv * (T::one() - yv));
                    sink(a, dx);
                }),
            )),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of_f64(GELU_C);
        let k = T::of_f64(GELU_K);
        let v = self.value(a).mapv(|x| {
            let u = c * (x + k * x * x * x);
            T::half() * x * (T::one() + u.tanh())
        });
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let mut dx = g.clone();
                    dx.zip_mut_with(t.value(a), |d, &x| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let sech2 = T::one() - th * th;
                        let du = c * (T::one() + T::of_f64(3.0) * k * x * x);
                        *d = *d * (T::half() * (T::one() + th) + T::half() * x * sech2 * du);
                    });
                    sink(a, dx);
                }),
            )),
        )
    }

    /// Dropout on the forward path; identity when `p == 0`.
    ///
    /// Kept elements are scaled by `1/(1-p)` so eval needs no rescaling.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout p in [0,1)");
        if p == 0.0 {
            return a;
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let mask: ArrayD<T> = self
            .value(a)
            .mapv(|_| if rng.gen::<f64>() < p { T::zero() } else { keep });
        let mask = Rc::new(mask);
        let v = self.value(a) * &*mask;
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |_, g, sink| sink(a, g * &*mask)),
            )),
        )
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::of_usize(self.value(a).len());
        let total: T = self.value(a).iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let gs = *g.iter().next().unwrap() / n;
                    sink(a, ArrayD::from_elem(t.value(a).raw_dim(), gs));
                }),
            )),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: T = self.value(a).iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let gs = *g.iter().next().unwrap();
                    sink(a, ArrayD::from_elem(t.value(a).raw_dim(), gs));
                }),
            )),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let count: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), count, "reshape element count");
        let shape_vec = shape.to_vec();
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(&shape_vec))
            .expect("reshape");
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let back = g
                        .clone()
                        .into_shape_with_order(t.value(a).raw_dim())
                        .expect("reshape back");
                    sink(a, back);
                }),
            )),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_vec = axes.to_vec();
        assert_eq!(axes_vec.len(), self.value(a).ndim(), "permute rank");
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_vec))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_vec.len()];
        for (i, &ax) in axes_vec.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |_, g, sink| {
                    let back = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    sink(a, back);
                }),
            )),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let mut dx = ArrayD::zeros(t.value(a).raw_dim());
                    dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                        .assign(g);
                    sink(a, dx);
                }),
            )),
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let la = self.value(a).shape()[axis];
        let v = ndarray::concatenate(Axis(axis), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shapes");
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    let lb = t.value(b).shape()[axis];
                    let ga = g
                        .slice_axis(Axis(axis), Slice::from(0..la))
                        .to_owned();
                    let gb = g
                        .slice_axis(Axis(axis), Slice::from(la..la + lb))
                        .to_owned();
                    sink(a, ga);
                    sink(b, gb);
                }),
            )),
        )
    }

    /// Repeat a leading-1 array along axis 0: `(1, ...) -> (n, ...)`.
    pub fn expand0(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.value(a).shape()[0], 1, "expand0 needs leading 1");
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = n;
        let v = self
            .value(a)
            .broadcast(IxDyn(&shape))
            .expect("expand0 broadcast")
            .to_owned();
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |_, g, sink| {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    sink(a, summed);
                }),
            )),
        )
    }

    /// `(n, t, d) + (t, d)` with the right-hand side broadcast over axis 0.
    pub fn add_broadcast0(&mut self, a: Var, b: Var) -> Var {
        let ashape = self.value(a).shape().to_vec();
        assert_eq!(&ashape[1..], self.value(b).shape(), "add_broadcast0 shapes");
        let v = self.value(a) + &self.value(b).broadcast(IxDyn(&ashape)).unwrap();
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |_, g, sink| {
                    sink(a, g.clone());
                    sink(b, g.sum_axis(Axis(0)));
                }),
            )),
        )
    }

    /// `(..., d) + (d,)` bias add along the last axis.
    pub fn add_bias_last(&mut self, a: Var, b: Var) -> Var {
        let d = *self.value(a).shape().last().unwrap();
        assert_eq!(self.value(b).shape(), [d], "add_bias_last shapes");
        let mut v = self.value(a).clone();
        {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let nd = v.ndim();
            for mut lane in v.lanes_mut(Axis(nd - 1)) {
                lane += &bv;
            }
        }
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |_, g, sink| {
                    sink(a, g.clone());
                    let flat = g
                        .view()
                        .into_shape_with_order((g.len() / d, d))
                        .expect("bias grad reshape");
                    sink(b, flat.sum_axis(Axis(0)).into_dyn());
                }),
            )),
        )
    }

    /// `(n, c, h, w) + (c,)` per-channel bias add.
    pub fn add_bias_channel(&mut self, a: Var, b: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 4, "add_bias_channel expects 4-d input");
        let c = shape[1];
        assert_eq!(self.value(b).shape(), [c], "add_bias_channel shapes");
        let mut v = self.value(a).clone();
        {
            let bv = self.value(b).as_slice().unwrap().to_vec();
            let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..c {
                v4.index_axis_mut(Axis(1), ci).mapv_inplace(|x| x + bv[ci]);
            }
        }
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |_, g, sink| {
                    sink(a, g.clone());
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut db = Array1::<T>::zeros(c);
                    for ci in 0..c {
                        db[ci] = g4.index_axis(Axis(1), ci).iter().copied().sum();
                    }
                    sink(b, db.into_dyn());
                }),
            )),
        )
    }

    // ---- matrix products ----

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let a2 = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let b2 = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
        let v = a2.dot(&b2).into_dyn();
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if t.needs_grad(a) {
                        let b2 = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
                        sink(a, g2.dot(&b2.t()).into_dyn());
                    }
                    if t.needs_grad(b) {
                        let a2 = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
                        sink(b, a2.t().dot(&g2).into_dyn());
                    }
                }),
            )),
        )
    }

    /// `(m, k) @ (n, k)^T`, the natural orientation for row-major weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let a2 = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let b2 = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.ncols(), "matmul_nt inner dims");
        let v = a2.dot(&b2.t()).into_dyn();
        self.push(
            v,
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if t.needs_grad(a) {
                        let b2 = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
                        sink(a, g2.dot(&b2).into_dyn());
                    }
                    if t.needs_grad(b) {
                        let a2 = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
                        sink(b, g2.t().dot(&a2).into_dyn());
                    }
                }),
            )),
        )
    }

    /// Batched `(b, h, m, k) @ (b, h, k, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let a4 = av.view().into_dimensionality::<Ix4>().unwrap();
        let b4 = bv.view().into_dimensionality::<Ix4>().unwrap();
        let (bb, hh, m, k) = (a4.shape()[0], a4.shape()[1], a4.shape()[2], a4.shape()[3]);
        assert_eq!(b4.shape()[..2], a4.shape()[..2], "bmm batch dims");
        assert_eq!(b4.shape()[2], k, "bmm inner dims");
        let n = b4.shape()[3];
        let mut out = Array4::<T>::zeros((bb, hh, m, n));
        for bi in 0..bb {
            for hi in 0..hh {
                let asl = a4.index_axis(Axis(0), bi);
                let asl = asl.index_axis(Axis(0), hi);
                let bsl = b4.index_axis(Axis(0), bi);
                let bsl = bsl.index_axis(Axis(0), hi);
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), hi)
                    .assign(&asl.dot(&bsl));
            }
        }
        self.push(
            out.into_dyn(),
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let a4 = t.value(a).view().into_dimensionality::<Ix4>().unwrap();
                    let b4 = t.value(b).view().into_dimensionality::<Ix4>().unwrap();
                    if t.needs_grad(a) {
                        let mut da = Array4::<T>::zeros((bb, hh, m, k));
                        for bi in 0..bb {
                            for hi in 0..hh {
                                let gs = g4.index_axis(Axis(0), bi);
                                let gs = gs.index_axis(Axis(0), hi);
                                let bs = b4.index_axis(Axis(0), bi);
                                let bs = bs.index_axis(Axis(0), hi);
                                da.index_axis_mut(Axis(0), bi)
                                    .index_axis_mut(Axis(0), hi)
                                    .assign(&gs.dot(&bs.t()));
                            }
                        }
                        sink(a, da.into_dyn());
                    }
                    if t.needs_grad(b) {
                        let mut db = Array4::<T>::zeros((bb, hh, k, n));
                        for bi in 0..bb {
                            for hi in 0..hh {
                                let gs = g4.index_axis(Axis(0), bi);
                                let gs = gs.index_axis(Axis(0), hi);
                                let as_ = a4.index_axis(Axis(0), bi);
                                let as_ = as_.index_axis(Axis(0), hi);
                                db.index_axis_mut(Axis(0), bi)
                                    .index_axis_mut(Axis(0), hi)
                                    .assign(&as_.t().dot(&gs));
                            }
                        }
                        sink(b, db.into_dyn());
                    }
                }),
            )),
        )
    }

    /// Batched `(b, h, m, k) @ (b, h, n, k)^T`, used for attention scores.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let a4 = av.view().into_dimensionality::<Ix4>().unwrap();
        let b4 = bv.view().into_dimensionality::<Ix4>().unwrap();
        let (bb, hh, m, k) = (a4.shape()[0], a4.shape()[1], a4.shape()[2], a4.shape()[3]);
        assert_eq!(b4.shape()[..2], a4.shape()[..2], "bmm_nt batch dims");
        assert_eq!(b4.shape()[3], k, "bmm_nt inner dims");
        let n = b4.shape()[2];
        let mut out = Array4::<T>::zeros((bb, hh, m, n));
        for bi in 0..bb {
            for hi in 0..hh {
                let asl = a4.index_axis(Axis(0), bi);
                let asl = asl.index_axis(Axis(0), hi);
                let bsl = b4.index_axis(Axis(0), bi);
                let bsl = bsl.index_axis(Axis(0), hi);
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), hi)
                    .assign(&asl.dot(&bsl.t()));
            }
        }
        self.push(
            out.into_dyn(),
            Some((
                vec![a, b],
                Box::new(move |t, g, sink| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let a4 = t.value(a).view().into_dimensionality::<Ix4>().unwrap();
                    let b4 = t.value(b).view().into_dimensionality::<Ix4>().unwrap();
                    if t.needs_grad(a) {
                        let mut da = Array4::<T>::zeros((bb, hh, m, k));
                        for bi in 0..bb {
                            for hi in 0..hh {
                                let gs = g4.index_axis(Axis(0), bi);
                                let gs = gs.index_axis(Axis(0), hi);
                                let bs = b4.index_axis(Axis(0), bi);
                                let bs = bs.index_axis(Axis(0), hi);
                                da.index_axis_mut(Axis(0), bi)
                                    .index_axis_mut(Axis(0), hi)
                                    .assign(&gs.dot(&bs));
                            }
                        }
                        sink(a, da.into_dyn());
                    }
                    if t.needs_grad(b) {
                        let mut db = Array4::<T>::zeros((bb, hh, n, k));
                        for bi in 0..bb {
                            for hi in 0..hh {
                                let gs = g4.index_axis(Axis(0), bi);
                                let gs = gs.index_axis(Axis(0), hi);
                                let as_ = a4.index_axis(Axis(0), bi);
                                let as_ = as_.index_axis(Axis(0), hi);
                                db.index_axis_mut(Axis(0), bi)
                                    .index_axis_mut(Axis(0), hi)
                                    .assign(&gs.t().dot(&as_));
                            }
                        }
                        sink(b, db.into_dyn());
                    }
                }),
            )),
        )
    }

    // ---- normalization / attention pieces ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let nd = self.value(a).ndim();
        let mut v = self.value(a).clone();
        for mut lane in v.lanes_mut(Axis(nd - 1)) {
            let mx = lane.fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in lane.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        let out_idx = self.nodes.len();
        self.push(
            v,
            Some((
                vec![a],
                Box::new(move |t, g, sink| {
                    let y = t.value(Var(out_idx));
                    let nd = y.ndim();
                    let mut dx = ArrayD::zeros(y.raw_dim());
                    for ((gl, yl), mut dl) in g
                        .lanes(Axis(nd - 1))
                        .into_iter()
                        .zip(y.lanes(Axis(nd - 1)))
                        .zip(dx.lanes_mut(Axis(nd - 1)))
                    {
                        let dot: T = gl.iter().zip(yl.iter()).map(|(&gv, &yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in dl.iter_mut().zip(gl.iter()).zip(yl.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    sink(a, dx);
                }),
            )),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layernorm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = *self.value(x).shape().last().unwrap();
        assert_eq!(self.value(gamma).shape(), [d], "layernorm gamma shape");
        assert_eq!(self.value(beta).shape(), [d], "layernorm beta shape");
        let eps = T::of_f64(eps);
        let nd = self.value(x).ndim();
        let lanes = self.value(x).len() / d;
        let mut xhat = ArrayD::<T>::zeros(self.value(x).raw_dim());
        let mut rstd = Vec::with_capacity(lanes);
        for (lane, mut dst) in self
            .value(x)
            .lanes(Axis(nd - 1))
            .into_iter()
            .zip(xhat.lanes_mut(Axis(nd - 1)))
        {
            let dn = T::of_usize(d);
            let mean = lane.iter().copied().sum::<T>() / dn;
            let var = lane
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (dv, &sv) in dst.iter_mut().zip(lane.iter()) {
                *dv = (sv - mean) * r;
            }
        }
        let gv = self.value(gamma).as_slice().unwrap().to_vec();
        let bv = self.value(beta).as_slice().unwrap().to_vec();
        let mut v = xhat.clone();
        for mut lane in v.lanes_mut(Axis(nd - 1)) {
            for (i, val) in lane.iter_mut().enumerate() {
                *val = *val * gv[i] + bv[i];
            }
        }
        let cache = Rc::new((xhat, rstd));
        self.push(
            v,
            Some((
                vec![x, gamma, beta],
                Box::new(move |t, g, sink| {
                    let (xhat, rstd) = &*cache;
                    let nd = xhat.ndim();
                    let gvals = t.value(gamma).as_slice().unwrap();
                    let dn = T::of_usize(d);
                    let mut dgamma = Array1::<T>::zeros(d);
                    let mut dbeta = Array1::<T>::zeros(d);
                    let mut dx = ArrayD::<T>::zeros(xhat.raw_dim());
                    for (((gl, xl), mut dl), &r) in g
                        .lanes(Axis(nd - 1))
                        .into_iter()
                        .zip(xhat.lanes(Axis(nd - 1)))
                        .zip(dx.lanes_mut(Axis(nd - 1)))
                        .zip(rstd.iter())
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            let dxh = gl[i] * gvals[i];
                            m1 += dxh;
                            m2 += dxh * xl[i];
                            dgamma[i] += gl[i] * xl[i];
                            dbeta[i] += gl[i];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for i in 0..d {
                            let dxh = gl[i] * gvals[i];
                            dl[i] = r * (dxh - m1 - xl[i] * m2);
                        }
                    }
                    if t.needs_grad(x) {
                        sink(x, dx);
                    }
                    sink(gamma, dgamma.into_dyn());
                    sink(beta, dbeta.into_dyn());
                }),
            )),
        )
    }

    // ---- convolution / pooling / gating ----

    /// Same-padded stride-1 2-d convolution: `(n,c,h,w) * (o,c,kh,kw) -> (n,o,h,w)`.
    ///
    /// Kernel sides must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input rank");
        assert_eq!(ws.len(), 4, "conv2d weight rank");
        assert_eq!(ws[1], xs[1], "conv2d channel agreement");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel sides must be odd");
        let (ph, pw) = (kh / 2, kw / 2);

        let cols = Rc::new(im2col(self.value(x), kh, kw, ph, pw));
        let w_mat = as_matrix(self.value(w), o, c * kh * kw);
        let out_mat = w_mat.dot(&*cols); // (o, n*h*w)
        let mut out = Array4::<T>::zeros((n, o, h, wd));
        {
            let om = out_mat.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let hw = h * wd;
            for oi in 0..o {
                for ni in 0..n {
                    let src = &om[oi * n * hw + ni * hw..oi * n * hw + (ni + 1) * hw];
                    let dst = &mut os[ni * o * hw + oi * hw..ni * o * hw + (oi + 1) * hw];
                    dst.copy_from_slice(src);
                }
            }
        }
        if let Some(bias) = b {
            assert_eq!(self.value(bias).shape(), [o], "conv2d bias shape");
            let bv = self.value(bias).as_slice().unwrap().to_vec();
            for oi in 0..o {
                out.index_axis_mut(Axis(1), oi).mapv_inplace(|v| v + bv[oi]);
            }
        }

        let cols_bw = Rc::clone(&cols);
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        self.push(
            out.into_dyn(),
            Some((
                parents,
                Box::new(move |t, g, sink| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let hw = h * wd;
                    // (o, n*h*w) layout of the output gradient
                    let mut g_mat = Array2::<T>::zeros((o, n * hw));
                    {
                        let gm = g_mat.as_slice_mut().unwrap();
                        let gs = g.as_slice().unwrap();
                        for ni in 0..n {
                            for oi in 0..o {
                                let src = &gs[ni * o * hw + oi * hw..ni * o * hw + (oi + 1) * hw];
                                let dst =
                                    &mut gm[oi * n * hw + ni * hw..oi * n * hw + (ni + 1) * hw];
                                dst.copy_from_slice(src);
                            }
                        }
                    }
                    if t.needs_grad(w) {
                        let dw_mat = g_mat.dot(&cols_bw.t()); // (o, c*kh*kw)
                        let dw = dw_mat
                            .into_shape_with_order((o, c, kh, kw))
                            .expect("conv2d dw reshape");
                        sink(w, dw.into_dyn());
                    }
                    if t.needs_grad(x) {
                        let w_mat = as_matrix(t.value(w), o, c * kh * kw);
                        let dcols = w_mat.t().dot(&g_mat); // (c*kh*kw, n*h*w)
                        sink(x, col2im(&dcols, n, c, h, wd, kh, kw, ph, pw));
                    }
                    if let Some(bias) = b {
                        if t.needs_grad(bias) {
                            let mut db = Array1::<T>::zeros(o);
                            for oi in 0..o {
                                db[oi] = g4.index_axis(Axis(1), oi).iter().copied().sum();
                            }
                            sink(bias, db.into_dyn());
                        }
                    }
                }),
            )),
        )
    }

    /// 2x2 stride-2 max pooling; spatial dims must be even.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "maxpool2 input rank");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    let out_plane = (ni * c + ci) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best_idx = plane + (2 * i) * w + 2 * j;
                            let mut best = xs[best_idx];
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = plane + (2 * i + di) * w + 2 * j + dj;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                            os[out_plane + i * ow + j] = best;
                            argmax[out_plane + i * ow + j] = best_idx;
                        }
                    }
                }
            }
        }
        let argmax = Rc::new(argmax);
        self.push(
            out.into_dyn(),
            Some((
                vec![x],
                Box::new(move |t, g, sink| {
                    let mut dx = ArrayD::<T>::zeros(t.value(x).raw_dim());
                    {
                        let ds = dx.as_slice_mut().unwrap();
                        for (gi, &src) in g.iter().zip(argmax.iter()) {
                            ds[src] += *gi;
                        }
                    }
                    sink(x, dx);
                }),
            )),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2 input rank");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
        {
            let os = out.as_slice_mut().unwrap();
            for p in 0..n * c {
                let src_plane = p * h * w;
                let dst_plane = p * 4 * h * w;
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        os[dst_plane + i * 2 * w + j] = xs[src_plane + (i / 2) * w + j / 2];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some((
                vec![x],
                Box::new(move |t, g, sink| {
                    let mut dx = ArrayD::<T>::zeros(t.value(x).raw_dim());
                    {
                        let ds = dx.as_slice_mut().unwrap();
                        let gs = g.as_slice().unwrap();
                        for p in 0..n * c {
                            let src_plane = p * h * w;
                            let dst_plane = p * 4 * h * w;
                            for i in 0..2 * h {
                                for j in 0..2 * w {
                                    ds[src_plane + (i / 2) * w + j / 2] +=
                                        gs[dst_plane + i * 2 * w + j];
                                }
                            }
                        }
                    }
                    sink(x, dx);
                }),
            )),
        )
    }

    /// Global average pooling: `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool input rank");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let hw = T::of_usize(h * w);
        let mut out = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[(ni, ci)] = x4
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .iter()
                    .copied()
                    .sum::<T>()
                    / hw;
            }
        }
        self.push(
            out.into_dyn(),
            Some((
                vec![x],
                Box::new(move |_, g, sink| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g2[(ni, ci)] / hw;
                            dx.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .fill(gv);
                        }
                    }
                    sink(x, dx.into_dyn());
                }),
            )),
        )
    }

    /// `(n, c, h, w) * (n, c)` with the gate broadcast over space.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(self.value(gate).shape(), [n, c], "channel gate shape");
        let g2 = self.value(gate).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut v = self.value(x).clone();
        {
            let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g2[(ni, ci)];
                    v4.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|x| x * gv);
                }
            }
        }
        self.push(
            v,
            Some((
                vec![x, gate],
                Box::new(move |t, g, sink| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let x4 = t.value(x).view().into_dimensionality::<Ix4>().unwrap();
                    let gate2 = t.value(gate).view().into_dimensionality::<Ix2>().unwrap();
                    if t.needs_grad(x) {
                        let mut dx = Array4::<T>::zeros((n, c, h, w));
                        for ni in 0..n {
                            for ci in 0..c {
                                let gv = gate2[(ni, ci)];
                                let gp = g4.index_axis(Axis(0), ni);
                                let gp = gp.index_axis(Axis(0), ci);
                                let mut dp = dx.index_axis_mut(Axis(0), ni);
                                let mut dp = dp.index_axis_mut(Axis(0), ci);
                                dp.assign(&gp.mapv(|v| v * gv));
                            }
                        }
                        sink(x, dx.into_dyn());
                    }
                    if t.needs_grad(gate) {
                        let mut dg = Array2::<T>::zeros((n, c));
                        for ni in 0..n {
                            for ci in 0..c {
                                let gp = g4.index_axis(Axis(0), ni);
                                let gp = gp.index_axis(Axis(0), ci);
                                let xp = x4.index_axis(Axis(0), ni);
                                let xp = xp.index_axis(Axis(0), ci);
                                dg[(ni, ci)] =
                                    gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum();
                            }
                        }
                        sink(gate, dg.into_dyn());
                    }
                }),
            )),
        )
    }

    /// `(n, c, h, w) * (n, 1, h, w)` with the map broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(self.value(gate).shape(), [n, 1, h, w], "spatial gate shape");
        let mut v = self.value(x).clone();
        {
            let gs = self.value(gate).as_slice().unwrap().to_vec();
            let vs = v.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    let gplane = ni * h * w;
                    for p in 0..h * w {
                        vs[plane + p] = vs[plane + p] * gs[gplane + p];
                    }
                }
            }
        }
        self.push(
            v,
            Some((
                vec![x, gate],
                Box::new(move |t, g, sink| {
                    let gs = g.as_slice().unwrap();
                    let xs = t.value(x).as_slice().unwrap();
                    let gates = t.value(gate).as_slice().unwrap();
                    if t.needs_grad(x) {
                        let mut dx = ArrayD::<T>::zeros(t.value(x).raw_dim());
                        let ds = dx.as_slice_mut().unwrap();
                        for ni in 0..n {
                            for ci in 0..c {
                                let plane = (ni * c + ci) * h * w;
                                let gplane = ni * h * w;
                                for p in 0..h * w {
                                    ds[plane + p] = gs[plane + p] * gates[gplane + p];
                                }
                            }
                        }
                        sink(x, dx);
                    }
                    if t.needs_grad(gate) {
                        let mut dg = ArrayD::<T>::zeros(t.value(gate).raw_dim());
                        let ds = dg.as_slice_mut().unwrap();
                        for ni in 0..n {
                            let gplane = ni * h * w;
                            for ci in 0..c {
                                let plane = (ni * c + ci) * h * w;
                                for p in 0..h * w {
                                    ds[gplane + p] += gs[plane + p] * xs[plane + p];
                                }
                            }
                        }
                        sink(gate, dg);
                    }
                }),
            )),
        )
    }

    /// Mean over channels, keeping the channel axis: `(n,c,h,w) -> (n,1,h,w)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let cn = T::of_usize(c);
        let v = (self.value(x).sum_axis(Axis(1)) / cn).insert_axis(Axis(1));
        self.push(
            v,
            Some((
                vec![x],
                Box::new(move |_, g, sink| {
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    let gs = g.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let gplane = ni * h * w;
                        for ci in 0..c {
                            let plane = (ni * c + ci) * h * w;
                            for p in 0..h * w {
                                ds[plane + p] = gs[gplane + p] / cn;
                            }
                        }
                    }
                    sink(x, dx.into_dyn());
                }),
            )),
        )
    }

    /// Max over channels, keeping the channel axis: `(n,c,h,w) -> (n,1,h,w)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = Array4::<T>::zeros((n, 1, h, w));
        let mut argmax = vec![0usize; n * h * w];
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for p in 0..h * w {
                    let mut best_ci = 0;
                    let mut best = xs[(ni * c) * h * w + p];
                    for ci in 1..c {
                        let v = xs[(ni * c + ci) * h * w + p];
                        if v > best {
                            best = v;
                            best_ci = ci;
                        }
                    }
                    os[ni * h * w + p] = best;
                    argmax[ni * h * w + p] = best_ci;
                }
            }
        }
        let argmax = Rc::new(argmax);
        self.push(
            out.into_dyn(),
            Some((
                vec![x],
                Box::new(move |_, g, sink| {
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    let gs = g.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for p in 0..h * w {
                            let ci = argmax[ni * h * w + p];
                            ds[(ni * c + ci) * h * w + p] = gs[ni * h * w + p];
                        }
                    }
                    sink(x, dx.into_dyn());
                }),
            )),
        )
    }

    /// Terminal scalar node with a caller-supplied gradient for `x`.
    ///
    /// Used to splice analytically differentiated losses into the graph.
    pub fn scalar_with_grad(&mut self, x: Var, value: T, grad_x: ArrayD<T>) -> Var {
        assert_eq!(grad_x.shape(), self.value(x).shape(), "loss grad shape");
        let grad_x = Rc::new(grad_x);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Some((
                vec![x],
                Box::new(move |_, g, sink| {
                    let gs = *g.iter().next().unwrap();
                    sink(x, grad_x.mapv(|v| v * gs));
                }),
            )),
        )
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable sigmoid, shared with inference code.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    sigmoid_scalar(x)
}

fn as_matrix<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("matrix view")
        .to_owned()
}

fn im2col<T: Scalar>(x: &ArrayD<T>, kh: usize, kw: usize, ph: usize, pw: usize) -> Array2<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xs = x.as_slice().expect("standard layout");
    let row_len = n * h * w;
    let mut cols = Array2::<T>::zeros((c * kh * kw, row_len));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * row_len;
                let j_lo = pw.saturating_sub(dj);
                let j_hi = (w + pw - dj).min(w);
                for ni in 0..n {
                    for i in 0..h {
                        let si = i + di;
                        if si < ph || si - ph >= h {
                            continue;
                        }
                        let src = ((ni * c + ci) * h + si - ph) * w;
                        let dst = row_base + (ni * h + i) * w;
                        for j in j_lo..j_hi {
                            cs[dst + j] = xs[src + j + dj - pw];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> ArrayD<T> {
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcols.as_slice().expect("standard layout");
    let row_len = n * h * w;
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * row_len;
                let j_lo = pw.saturating_sub(dj);
                let j_hi = (w + pw - dj).min(w);
                for ni in 0..n {
                    for i in 0..h {
                        let si = i + di;
                        if si < ph || si - ph >= h {
                            continue;
                        }
                        let dst = ((ni * c + ci) * h + si - ph) * w;
                        let src = row_base + (ni * h + i) * w;
                        for j in j_lo..j_hi {
                            ds[dst + j + dj - pw] += cs[src + j];
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on every tracked input of `f`.
    fn check_grads(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |arrays: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
            let out = f(&mut tape, &vars);
            *tape.value(out).iter().next().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);

        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[idx]).expect("gradient present");
            for flat in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[idx].as_slice_mut().unwrap()[flat] += h;
                minus[idx].as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let err = (an - fd).abs() / (1.0 + fd.abs());
                assert!(
                    err < tol,
                    "input {idx} elem {flat}: analytic {an} vs fd {fd} (err {err})"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&mut rng, &[3, 4]);
        let b = rand_array(&mut rng, &[3, 4]);
        check_grads(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let d = t.sub(m, v[1]);
            let sc = t.scale(d, 1.7);
            t.mean_all(sc)
        }, 1e-6);
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_array(&mut rng, &[2, 5]);
        check_grads(&[a.clone()], |t, v| {
            let r = t.relu(v[0]);
            t.sum_all(r)
        }, 1e-4);
        check_grads(&[a.clone()], |t, v| {
            let s = t.sigmoid(v[0]);
            t.sum_all(s)
        }, 1e-6);
        check_grads(&[a], |t, v| {
            let g = t.gelu(v[0]);
            t.sum_all(g)
        }, 1e-6);
    }

    #[test]
    fn grad_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&mut rng, &[3, 4]);
        let b = rand_array(&mut rng, &[4, 2]);
        check_grads(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.sum_all(m)
        }, 1e-6);

        let a = rand_array(&mut rng, &[3, 4]);
        let b = rand_array(&mut rng, &[5, 4]);
        check_grads(&[a, b], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            let s = t.sigmoid(m);
            t.mean_all(s)
        }, 1e-6);
    }

    #[test]
    fn grad_batched_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_array(&mut rng, &[2, 2, 3, 4]);
        let b = rand_array(&mut rng, &[2, 2, 4, 3]);
        check_grads(&[a, b], |t, v| {
            let m = t.bmm(v[0], v[1]);
            t.sum_all(m)
        }, 1e-6);

        let a = rand_array(&mut rng, &[2, 2, 3, 4]);
        let b = rand_array(&mut rng, &[2, 2, 5, 4]);
        check_grads(&[a, b], |t, v| {
            let m = t.bmm_nt(v[0], v[1]);
            t.mean_all(m)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_array(&mut rng, &[2, 3, 4]);
        check_grads(&[a], |t, v| {
            let s = t.softmax_last(v[0]);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);

        let x = rand_array(&mut rng, &[2, 3, 4]);
        let gamma = rand_array(&mut rng, &[4]);
        let beta = rand_array(&mut rng, &[4]);
        check_grads(&[x, gamma, beta], |t, v| {
            let y = t.layernorm_last(v[0], v[1], v[2], 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_array(&mut rng, &[2, 3, 4]);
        check_grads(&[a], |t, v| {
            let r = t.reshape(v[0], &[4, 6]);
            let s = t.sigmoid(r);
            t.sum_all(s)
        }, 1e-6);

        let a = rand_array(&mut rng, &[2, 3, 4]);
        check_grads(&[a], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1]);
            let s = t.mul(p, p);
            t.sum_all(s)
        }, 1e-6);

        let a = rand_array(&mut rng, &[2, 5, 3]);
        check_grads(&[a], |t, v| {
            let nar = t.narrow(v[0], 1, 1, 2);
            t.sum_all(nar)
        }, 1e-6);

        let a = rand_array(&mut rng, &[2, 2, 3]);
        let b = rand_array(&mut rng, &[2, 4, 3]);
        check_grads(&[a, b], |t, v| {
            let cat = t.concat(v[0], v[1], 1);
            let s = t.sigmoid(cat);
            t.sum_all(s)
        }, 1e-6);

        let a = rand_array(&mut rng, &[1, 2, 3]);
        check_grads(&[a], |t, v| {
            let e = t.expand0(v[0], 4);
            let s = t.mul(e, e);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn grad_broadcast_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_array(&mut rng, &[3, 2, 4]);
        let b = rand_array(&mut rng, &[2, 4]);
        check_grads(&[a, b], |t, v| {
            let s = t.add_broadcast0(v[0], v[1]);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);

        let a = rand_array(&mut rng, &[3, 2, 4]);
        let b = rand_array(&mut rng, &[4]);
        check_grads(&[a, b], |t, v| {
            let s = t.add_bias_last(v[0], v[1]);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);

        let a = rand_array(&mut rng, &[2, 3, 4, 4]);
        let b = rand_array(&mut rng, &[3]);
        check_grads(&[a, b], |t, v| {
            let s = t.add_bias_channel(v[0], v[1]);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_conv_and_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_array(&mut rng, &[2, 2, 6, 6]);
        let w = rand_array(&mut rng, &[3, 2, 3, 3]);
        let b = rand_array(&mut rng, &[3]);
        check_grads(&[x, w, b], |t, v| {
            let c = t.conv2d(v[0], v[1], Some(v[2]));
            let s = t.sigmoid(c);
            t.mean_all(s)
        }, 1e-5);

        let x = rand_array(&mut rng, &[2, 3, 4, 4]);
        check_grads(&[x], |t, v| {
            let p = t.maxpool2(v[0]);
            let s = t.mul(p, p);
            t.sum_all(s)
        }, 1e-4);

        let x = rand_array(&mut rng, &[2, 3, 3, 3]);
        check_grads(&[x], |t, v| {
            let u = t.upsample2(v[0]);
            let s = t.mul(u, u);
            t.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn grad_gates_and_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_array(&mut rng, &[2, 3, 4, 4]);
        check_grads(&[x], |t, v| {
            let p = t.global_avg_pool(v[0]);
            let s = t.mul(p, p);
            t.sum_all(s)
        }, 1e-6);

        let x = rand_array(&mut rng, &[2, 3, 4, 4]);
        let gate = rand_array(&mut rng, &[2, 3]);
        check_grads(&[x, gate], |t, v| {
            let m = t.mul_channel_gate(v[0], v[1]);
            t.sum_all(m)
        }, 1e-6);

        let x = rand_array(&mut rng, &[2, 3, 4, 4]);
        let gate = rand_array(&mut rng, &[2, 1, 4, 4]);
        check_grads(&[x, gate], |t, v| {
            let m = t.mul_spatial_gate(v[0], v[1]);
            t.sum_all(m)
        }, 1e-6);

        let x = rand_array(&mut rng, &[2, 3, 4, 4]);
        check_grads(&[x.clone()], |t, v| {
            let m = t.channel_mean(v[0]);
            let s = t.mul(m, m);
            t.sum_all(s)
        }, 1e-6);
        check_grads(&[x], |t, v| {
            let m = t.channel_max(v[0]);
            t.sum_all(m)
        }, 1e-4);
    }

    #[test]
    fn conv_matches_direct_computation() {
        // 1x1 input channel, known kernel: verify one output element by hand
        let mut tape = Tape::<f64>::new();
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), vec![0.0; 9])
            .map(|mut a| {
                a[[0, 0, 1, 1]] = 2.0; // pure center tap doubles the input
                a
            })
            .unwrap();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let out = tape.conv2d(xv, wv, None);
        assert_eq!(tape.value(out).shape(), &[1, 1, 3, 3]);
        for (o, i) in tape.value(out).iter().zip(x.iter()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = ArrayD::from_elem(IxDyn(&[64, 64]), 1.0);
        let xv = tape.leaf(x);
        let d = tape.dropout(xv, 0.5, &mut rng);
        let vals: Vec<f64> = tape.value(d).iter().copied().collect();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.5).abs() < 0.05, "keep rate {kept}");
        // identity when p = 0
        let e = tape.dropout(xv, 0.0, &mut rng);
        assert_eq!(e, xv);
    }

    #[test]
    fn frozen_paths_are_pruned() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let w = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let frozen = tape.matmul(x, w);
        assert!(!tape.needs_grad(frozen));
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        let mixed = tape.add(frozen, a);
        assert!(tape.needs_grad(mixed));
        let loss = tape.sum_all(mixed);
        let grads = tape.backward(loss);
        assert!(grads.of(a).is_some());
        assert!(grads.of(w).is_none());
    }

    #[test]
    fn scalar_with_grad_splices_custom_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        // pretend loss = sum(x^2): value 12, grad 2x = 4
        let grad = ArrayD::from_elem(IxDyn(&[3]), 4.0);
        let loss = tape.scalar_with_grad(x, 12.0, grad);
        let scaled = tape.scale(loss, 0.5);
        let grads = tape.backward(scaled);
        let gx = grads.of(x).unwrap();
        for &g in gx.iter() {
            assert!((g - 2.0).abs() < 1e-12);
        }
    }
}
