//! Reverse-mode automatic differentiation on a flat expression tape.
//!
//! Values are `f64` tensors (`ndarray::ArrayD`). Every operation appends a
//! node to a [`Graph`] and returns a [`Var`] handle. [`Graph::backward`]
//! walks the tape in reverse and *emits new nodes* for the adjoints, so a
//! gradient is itself an expression that can be differentiated again. That
//! property is what makes second-order terms (for example the norm of an
//! input gradient) trainable without any special casing.
//!
//! Shape errors are programmer errors and panic. Callers validate data at
//! the boundary before anything reaches the tape.

use ndarray::{ArrayD, Axis, IxDyn, SliceInfoElem};

/// Handle to a node in a [`Graph`]. Cheap to copy, only meaningful for the
/// graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub usize);

/// Geometry of a 1-d patch extraction: `[c, w] -> [c*k, w_out]` where
/// column `o` holds the `k`-wide window starting at `o*stride - pad_left`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom1d {
    pub c: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub w_out: usize,
}

/// Geometry of a 2-d patch extraction: `[c, h, w] -> [c*k*k, h_out*w_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom2d {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    /// `op(a) . op(b)` on 2-d operands, `ta`/`tb` transpose the operand first.
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    /// `m . v` (or `m^T . v` when `trans`) for 2-d `m`, 1-d `v`.
    MatVec {
        m: Var,
        v: Var,
        trans: bool,
    },
    /// Rank-one product `u v^T` of two 1-d operands.
    Outer(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// 0-d scalar broadcast to an arbitrary shape.
    ScalarToShape(Var),
    /// `[c, rest..] -> [c]`, summing over everything but the leading axis.
    ChannelSum(Var),
    /// `[c] -> [c, rest..]`, repeating each channel value.
    ChannelToShape(Var),
    Reshape(Var),
    Slice {
        src: Var,
        starts: Vec<usize>,
        ends: Vec<usize>,
    },
    ZeroPad {
        src: Var,
        pads: Vec<(usize, usize)>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Im2Col1d(Var, PatchGeom1d),
    Col2Im1d(Var, PatchGeom1d),
    Im2Col2d(Var, PatchGeom2d),
    Col2Im2d(Var, PatchGeom2d),
}

struct Node {
    value: ArrayD<f64>,
    tracked: bool,
    op: Op,
}

/// Expression tape. One `Graph` per loss evaluation; drop it to free all
/// intermediates at once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, tracked: bool, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients are never requested for.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Input that participates in differentiation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].tracked || self.nodes[b.0].tracked
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        };
        let t = self.tracked2(a, b);
        self.push(value, t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
            va - vb
        };
        let t = self.tracked2(a, b);
        self.push(value, t, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| -x);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Neg(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        };
        let t = self.tracked2(a, b);
        self.push(value, t, Op::Mul(a, b))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::recip);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Recip(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| c * x);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds out of order");
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Clamp(a, lo, hi))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = {
            let va = as2(&self.nodes[a.0].value);
            let vb = as2(&self.nodes[b.0].value);
            let y = match (ta, tb) {
                (false, false) => va.dot(&vb),
                (true, false) => va.t().dot(&vb),
                (false, true) => va.dot(&vb.t()),
                (true, true) => va.t().dot(&vb.t()),
            };
            y.into_dyn()
        };
        let t = self.tracked2(a, b);
        self.push(value, t, Op::Matmul { a, b, ta, tb })
    }

    pub fn matvec(&mut self, m: Var, v: Var, trans: bool) -> Var {
        let value = {
            let vm = as2(&self.nodes[m.0].value);
            let vv = as1(&self.nodes[v.0].value);
            let y = if trans { vm.t().dot(&vv) } else { vm.dot(&vv) };
            y.into_dyn()
        };
        let t = self.tracked2(m, v);
        self.push(value, t, Op::MatVec { m, v, trans })
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let value = {
            let vu = as1(&self.nodes[u.0].value);
            let vv = as1(&self.nodes[v.0].value);
            let (n, m) = (vu.len(), vv.len());
            ndarray::Array2::from_shape_fn((n, m), |(i, j)| vu[i] * vv[j]).into_dyn()
        };
        let t = self.tracked2(u, v);
        self.push(value, t, Op::Outer(u, v))
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "mean_all of empty tensor");
        let value = ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64);
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::MeanAll(a))
    }

    pub fn scalar_to_shape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.len(), 1, "scalar_to_shape source must be scalar");
        let x = *v.iter().next().unwrap();
        let t = self.nodes[a.0].tracked;
        self.push(ArrayD::from_elem(IxDyn(shape), x), t, Op::ScalarToShape(a))
    }

    pub fn channel_sum(&mut self, a: Var) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert!(v.ndim() >= 1, "channel_sum needs a leading axis");
            let c = v.shape()[0];
            let sp: usize = v.shape()[1..].iter().product();
            let flat = v.view().into_shape_with_order((c, sp)).unwrap();
            flat.sum_axis(Axis(1)).into_dyn()
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::ChannelSum(a))
    }

    pub fn channel_to_shape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let v = as1(&self.nodes[a.0].value);
            assert_eq!(v.len(), shape[0], "channel count mismatch");
            let sp: usize = shape[1..].iter().product();
            let mut out = ArrayD::zeros(IxDyn(shape));
            {
                let slice = out.as_slice_mut().unwrap();
                for (c, chunk) in slice.chunks_mut(sp).enumerate() {
                    chunk.fill(v[c]);
                }
            }
            out
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::ChannelToShape(a))
    }

    /// Mean over all non-leading axes: `[c, rest..] -> [c]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let sp: usize = self.nodes[a.0].value.shape()[1..].iter().product();
        let s = self.channel_sum(a);
        self.scale(s, 1.0 / sp as f64)
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape length mismatch");
            v.view()
                .into_shape_with_order(IxDyn(shape))
                .unwrap()
                .to_owned()
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Reshape(a))
    }

    pub fn slice(&mut self, a: Var, starts: &[usize], ends: &[usize]) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(starts.len(), v.ndim());
            assert_eq!(ends.len(), v.ndim());
            let info: Vec<SliceInfoElem> = starts
                .iter()
                .zip(ends)
                .map(|(&s, &e)| SliceInfoElem::Slice {
                    start: s as isize,
                    end: Some(e as isize),
                    step: 1,
                })
                .collect();
            v.slice(info.as_slice()).to_owned()
        };
        let t = self.nodes[a.0].tracked;
        self.push(
            value,
            t,
            Op::Slice { src: a, starts: starts.to_vec(), ends: ends.to_vec() },
        )
    }

    pub fn zero_pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(pads.len(), v.ndim());
            let shape: Vec<usize> = v
                .shape()
                .iter()
                .zip(pads)
                .map(|(&d, &(l, r))| d + l + r)
                .collect();
            let mut out = ArrayD::zeros(IxDyn(&shape));
            let info: Vec<SliceInfoElem> = v
                .shape()
                .iter()
                .zip(pads)
                .map(|(&d, &(l, _))| SliceInfoElem::Slice {
                    start: l as isize,
                    end: Some((l + d) as isize),
                    step: 1,
                })
                .collect();
            out.slice_mut(info.as_slice()).assign(v);
            out
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::ZeroPad { src: a, pads: pads.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let value = {
            let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        let t = parts.iter().any(|p| self.nodes[p.0].tracked);
        self.push(value, t, Op::Concat { parts: parts.to_vec(), axis })
    }

    // ---- patch extraction (convolution plumbing) ----

    pub fn im2col1d(&mut self, a: Var, geom: PatchGeom1d) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(v.shape(), [geom.c, geom.w], "im2col1d input shape");
            im2col1d_fwd(v.as_slice().unwrap(), geom)
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Im2Col1d(a, geom))
    }

    pub fn col2im1d(&mut self, a: Var, geom: PatchGeom1d) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(v.shape(), [geom.c * geom.k, geom.w_out], "col2im1d input shape");
            col2im1d_fwd(v.as_slice().unwrap(), geom)
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Col2Im1d(a, geom))
    }

    pub fn im2col2d(&mut self, a: Var, geom: PatchGeom2d) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(v.shape(), [geom.c, geom.h, geom.w], "im2col2d input shape");
            im2col2d_fwd(v.as_slice().unwrap(), geom)
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Im2Col2d(a, geom))
    }

    pub fn col2im2d(&mut self, a: Var, geom: PatchGeom2d) -> Var {
        let value = {
            let v = &self.nodes[a.0].value;
            assert_eq!(
                v.shape(),
                [geom.c * geom.k * geom.k, geom.h_out * geom.w_out],
                "col2im2d input shape"
            );
            col2im2d_fwd(v.as_slice().unwrap(), geom)
        };
        let t = self.nodes[a.0].tracked;
        self.push(value, t, Op::Col2Im2d(a, geom))
    }

    // ---- differentiation ----

    fn accumulate(&mut self, grads: &mut [Option<Var>], p: Var, contrib: Var) {
        if !self.nodes[p.0].tracked {
            return;
        }
        grads[p.0] = Some(match grads[p.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib),
        });
    }

    /// Mask constant from a predicate on a node's stored value. Used by the
    /// piecewise-linear activations, whose adjoints are locally constant in
    /// the input, so the mask stays a constant under repeated differentiation.
    fn mask_of(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        self.constant(value)
    }

    /// Reverse sweep from scalar `root`. Returns one gradient handle per
    /// entry of `wrt` (`None` when `root` does not depend on it). The
    /// returned vars live on the same tape and may be composed further;
    /// calling `backward` on such a composition yields second-order
    /// derivatives.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Var>> = vec![None; root.0 + 1];
        let root_shape = self.nodes[root.0].value.raw_dim();
        let seed = self.constant(ArrayD::from_elem(root_shape, 1.0));
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let g = match grads[id] {
                Some(g) => g,
                None => continue,
            };
            let out = Var(id);
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    self.accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    if self.nodes[b.0].tracked {
                        let ng = self.neg(g);
                        self.accumulate(&mut grads, b, ng);
                    }
                }
                Op::Neg(a) => {
                    if self.nodes[a.0].tracked {
                        let ng = self.neg(g);
                        self.accumulate(&mut grads, a, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].tracked {
                        let c = self.mul(g, b);
                        self.accumulate(&mut grads, a, c);
                    }
                    if self.nodes[b.0].tracked {
                        let c = self.mul(g, a);
                        self.accumulate(&mut grads, b, c);
                    }
                }
                Op::Recip(a) => {
                    if self.nodes[a.0].tracked {
                        let gy = self.mul(g, out);
                        let gyy = self.mul(gy, out);
                        let c = self.neg(gyy);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Exp(a) => {
                    if self.nodes[a.0].tracked {
                        let c = self.mul(g, out);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Ln(a) => {
                    if self.nodes[a.0].tracked {
                        let inv = self.recip(a);
                        let c = self.mul(g, inv);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Sqrt(a) => {
                    if self.nodes[a.0].tracked {
                        let inv = self.recip(out);
                        let half = self.scale(inv, 0.5);
                        let c = self.mul(g, half);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Scale(a, c0) => {
                    if self.nodes[a.0].tracked {
                        let c = self.scale(g, c0);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, a, g);
                }
                Op::Relu(a) => {
                    if self.nodes[a.0].tracked {
                        let m = self.mask_of(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
                        let c = self.mul(g, m);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.nodes[a.0].tracked {
                        let m = self.mask_of(a, |x| if x > 0.0 { 1.0 } else { slope });
                        let c = self.mul(g, m);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.nodes[a.0].tracked {
                        let m = self.mask_of(a, |x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                        let c = self.mul(g, m);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Matmul { a, b, ta, tb } => {
                    if self.nodes[a.0].tracked {
                        let c = match (ta, tb) {
                            (false, false) => self.matmul(g, b, false, true),
                            (false, true) => self.matmul(g, b, false, false),
                            (true, false) => self.matmul(b, g, false, true),
                            (true, true) => self.matmul(b, g, true, true),
                        };
                        self.accumulate(&mut grads, a, c);
                    }
                    if self.nodes[b.0].tracked {
                        let c = match (ta, tb) {
                            (false, false) => self.matmul(a, g, true, false),
                            (false, true) => self.matmul(g, a, true, false),
                            (true, false) => self.matmul(a, g, false, false),
                            (true, true) => self.matmul(g, a, true, true),
                        };
                        self.accumulate(&mut grads, b, c);
                    }
                }
                Op::MatVec { m, v, trans } => {
                    if self.nodes[m.0].tracked {
                        let c = if trans { self.outer(v, g) } else { self.outer(g, v) };
                        self.accumulate(&mut grads, m, c);
                    }
                    if self.nodes[v.0].tracked {
                        let c = self.matvec(m, g, !trans);
                        self.accumulate(&mut grads, v, c);
                    }
                }
                Op::Outer(u, v) => {
                    if self.nodes[u.0].tracked {
                        let c = self.matvec(g, v, false);
                        self.accumulate(&mut grads, u, c);
                    }
                    if self.nodes[v.0].tracked {
                        let c = self.matvec(g, u, true);
                        self.accumulate(&mut grads, v, c);
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[a.0].tracked {
                        let shape = self.nodes[a.0].value.shape().to_vec();
                        let c = self.scalar_to_shape(g, &shape);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::MeanAll(a) => {
                    if self.nodes[a.0].tracked {
                        let shape = self.nodes[a.0].value.shape().to_vec();
                        let n = self.nodes[a.0].value.len() as f64;
                        let b = self.scalar_to_shape(g, &shape);
                        let c = self.scale(b, 1.0 / n);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::ScalarToShape(a) => {
                    if self.nodes[a.0].tracked {
                        let s = self.sum_all(g);
                        let src_shape = self.nodes[a.0].value.shape().to_vec();
                        let c = self.reshape(s, &src_shape);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::ChannelSum(a) => {
                    if self.nodes[a.0].tracked {
                        let shape = self.nodes[a.0].value.shape().to_vec();
                        let c = self.channel_to_shape(g, &shape);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::ChannelToShape(a) => {
                    if self.nodes[a.0].tracked {
                        let c = self.channel_sum(g);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Reshape(a) => {
                    if self.nodes[a.0].tracked {
                        let shape = self.nodes[a.0].value.shape().to_vec();
                        let c = self.reshape(g, &shape);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Slice { src, starts, ends } => {
                    if self.nodes[src.0].tracked {
                        let pads: Vec<(usize, usize)> = self.nodes[src.0]
                            .value
                            .shape()
                            .iter()
                            .zip(starts.iter().zip(&ends))
                            .map(|(&d, (&s, &e))| (s, d - e))
                            .collect();
                        let c = self.zero_pad(g, &pads);
                        self.accumulate(&mut grads, src, c);
                    }
                }
                Op::ZeroPad { src, pads } => {
                    if self.nodes[src.0].tracked {
                        let src_shape = self.nodes[src.0].value.shape().to_vec();
                        let starts: Vec<usize> = pads.iter().map(|&(l, _)| l).collect();
                        let ends: Vec<usize> = src_shape
                            .iter()
                            .zip(&pads)
                            .map(|(&d, &(l, _))| l + d)
                            .collect();
                        let c = self.slice(g, &starts, &ends);
                        self.accumulate(&mut grads, src, c);
                    }
                }
                Op::Concat { parts, axis } => {
                    let ndim = self.nodes[g.0].value.ndim();
                    let full = self.nodes[g.0].value.shape().to_vec();
                    let mut offset = 0usize;
                    for p in parts {
                        let d = self.nodes[p.0].value.shape()[axis];
                        if self.nodes[p.0].tracked {
                            let mut starts = vec![0; ndim];
                            let mut ends = full.clone();
                            starts[axis] = offset;
                            ends[axis] = offset + d;
                            let c = self.slice(g, &starts, &ends);
                            self.accumulate(&mut grads, p, c);
                        }
                        offset += d;
                    }
                }
                Op::Im2Col1d(a, geom) => {
                    if self.nodes[a.0].tracked {
                        let c = self.col2im1d(g, geom);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Col2Im1d(a, geom) => {
                    if self.nodes[a.0].tracked {
                        let c = self.im2col1d(g, geom);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Im2Col2d(a, geom) => {
                    if self.nodes[a.0].tracked {
                        let c = self.col2im2d(g, geom);
                        self.accumulate(&mut grads, a, c);
                    }
                }
                Op::Col2Im2d(a, geom) => {
                    if self.nodes[a.0].tracked {
                        let c = self.im2col2d(g, geom);
                        self.accumulate(&mut grads, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| grads.get(v.0).copied().flatten())
            .collect()
    }
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d operand")
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected 1-d operand")
}

fn im2col1d_fwd(x: &[f64], geom: PatchGeom1d) -> ArrayD<f64> {
    let PatchGeom1d { c, w, k, stride, pad_left, w_out } = geom;
    let mut out = vec![0.0; c * k * w_out];
    for ci in 0..c {
        let row_in = &x[ci * w..(ci + 1) * w];
        for t in 0..k {
            let row_out = &mut out[(ci * k + t) * w_out..(ci * k + t + 1) * w_out];
            for (o, slot) in row_out.iter_mut().enumerate() {
                let pos = (o * stride + t) as isize - pad_left as isize;
                if pos >= 0 && (pos as usize) < w {
                    *slot = row_in[pos as usize];
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c * k, w_out]), out).unwrap()
}

fn col2im1d_fwd(cols: &[f64], geom: PatchGeom1d) -> ArrayD<f64> {
    let PatchGeom1d { c, w, k, stride, pad_left, w_out } = geom;
    let mut out = vec![0.0; c * w];
    for ci in 0..c {
        let row_img = &mut out[ci * w..(ci + 1) * w];
        for t in 0..k {
            let row_cols = &cols[(ci * k + t) * w_out..(ci * k + t + 1) * w_out];
            for (o, &v) in row_cols.iter().enumerate() {
                let pos = (o * stride + t) as isize - pad_left as isize;
                if pos >= 0 && (pos as usize) < w {
                    row_img[pos as usize] += v;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, w]), out).unwrap()
}

fn im2col2d_fwd(x: &[f64], geom: PatchGeom2d) -> ArrayD<f64> {
    let PatchGeom2d { c, h, w, k, stride, pad_top, pad_left, h_out, w_out } = geom;
    let mut out = vec![0.0; c * k * k * h_out * w_out];
    for ci in 0..c {
        let img = &x[ci * h * w..(ci + 1) * h * w];
        for th in 0..k {
            for tw in 0..k {
                let row = (ci * k + th) * k + tw;
                let row_out = &mut out[row * h_out * w_out..(row + 1) * h_out * w_out];
                for oh in 0..h_out {
                    let ih = (oh * stride + th) as isize - pad_top as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let src_row = &img[ih as usize * w..(ih as usize + 1) * w];
                    let dst_row = &mut row_out[oh * w_out..(oh + 1) * w_out];
                    for (ow, slot) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * stride + tw) as isize - pad_left as isize;
                        if iw >= 0 && (iw as usize) < w {
                            *slot = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c * k * k, h_out * w_out]), out).unwrap()
}

fn col2im2d_fwd(cols: &[f64], geom: PatchGeom2d) -> ArrayD<f64> {
    let PatchGeom2d { c, h, w, k, stride, pad_top, pad_left, h_out, w_out } = geom;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let img = &mut out[ci * h * w..(ci + 1) * h * w];
        for th in 0..k {
            for tw in 0..k {
                let row = (ci * k + th) * k + tw;
                let row_cols = &cols[row * h_out * w_out..(row + 1) * h_out * w_out];
                for oh in 0..h_out {
                    let ih = (oh * stride + th) as isize - pad_top as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let dst_row = &mut img[ih as usize * w..(ih as usize + 1) * w];
                    let src_row = &row_cols[oh * w_out..(oh + 1) * w_out];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * stride + tw) as isize - pad_left as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
}
