//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation evaluates eagerly and records how to differentiate
//! itself. Backward rules are expressed as tape operations, so the output
//! of [`grad`] is itself differentiable — calling `grad` on an expression
//! that already contains gradient nodes yields correct higher-order
//! derivatives. This is what lets the matcher backpropagate through the
//! unrolled student updates (which themselves contain gradient
//! computations).
//!
//! Shapes are explicit: elementwise ops require identical shapes and
//! broadcasting is spelled out with [`Tape::expand`].

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Geometry of an im2col/col2im lowering (conv and pooling share it).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Precomputed bilinear sampling grid: each output pixel is a weighted sum
/// of up to four input pixels (indices into the flattened H*W plane).
#[derive(Clone, Debug)]
pub struct WarpGrid {
    pub h: usize,
    pub w: usize,
    /// One entry per output pixel, `(flat_index, weight)` pairs.
    pub taps: Vec<[(u32, f64); 4]>,
}

// some fields are only consulted when the op is (re)evaluated, but they
// document the full signature of each primitive
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    SumAxis(Var, usize),
    Expand(Var, usize, usize),
    Reshape(Var),
    Transpose(Var, Vec<usize>),
    SliceAxis(Var, usize, usize, usize),
    PadAxis(Var, usize, usize, usize),
    Concat(Vec<Var>, usize),
    Im2Col(Var, PatchGeom),
    Col2Im(Var, PatchGeom),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>, usize),
    Warp(Var, Rc<Vec<WarpGrid>>),
    WarpAdjoint(Var, Rc<Vec<WarpGrid>>),
    MulConst(Var, Rc<ArrayD<f64>>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Flat eager-evaluation tape. Nodes are topologically ordered by
/// construction; `reset` drops everything.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar var");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        // keep every node value in standard layout so reshape/as_slice
        // are always valid
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Introduce an input (parameter or constant) onto the tape.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let z = ArrayD::zeros(self.value(v).raw_dim());
        self.leaf(z)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let v = a2.dot(&b2).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(a, axis))
    }

    /// Insert a new axis of size `n` at `axis`, repeating the input.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut shape: Vec<usize> = av.shape().to_vec();
        shape.insert(axis, n);
        let expanded = av
            .view()
            .insert_axis(Axis(axis))
            .broadcast(IxDyn(&shape))
            .unwrap()
            .to_owned();
        self.push(expanded, Op::Expand(a, axis, n))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let v = av
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .to_owned();
        self.push(v, Op::Transpose(a, perm.to_vec()))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceAxis(a, axis, start, len))
    }

    /// Embed `a` into a zero tensor whose `axis` has size `total`,
    /// starting at `start`. Adjoint of `slice_axis`.
    pub fn pad_axis(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut shape: Vec<usize> = av.shape().to_vec();
        let len = shape[axis];
        shape[axis] = total;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(av);
        self.push(out, Op::PadAxis(a, axis, start, total))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    /// Lower (B,C,H,W) into patch rows (B*OH*OW, C*KH*KW), zero padding.
    pub fn im2col(&mut self, a: Var, geom: PatchGeom) -> Var {
        let v = im2col_value(&self.nodes[a.0].value, &geom);
        self.push(v, Op::Im2Col(a, geom))
    }

    /// Adjoint of `im2col`: accumulate patch rows back into (B,C,H,W).
    pub fn col2im(&mut self, a: Var, geom: PatchGeom) -> Var {
        let v = col2im_value(&self.nodes[a.0].value, &geom);
        self.push(v, Op::Col2Im(a, geom))
    }

    /// Select rows (first axis), possibly with repetition.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        let views: Vec<_> = idx.iter().map(|&i| av.index_axis(Axis(0), i)).collect();
        let v = ndarray::stack(Axis(0), &views).unwrap();
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Adjoint of `gather_rows`: add row i of the input into row idx[i] of
    /// a zero tensor with first-axis size `n`.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut shape: Vec<usize> = av.shape().to_vec();
        assert_eq!(shape[0], idx.len());
        shape[0] = n;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (row, &i) in idx.iter().enumerate() {
            let mut dst = out.index_axis_mut(Axis(0), i);
            dst += &av.index_axis(Axis(0), row);
        }
        self.push(out, Op::ScatterRows(a, idx, n))
    }

    /// Bilinear resampling of each (b,c) plane of a (B,C,H,W) tensor.
    /// `grids` holds one grid per batch element, or a single shared grid.
    pub fn warp(&mut self, a: Var, grids: Rc<Vec<WarpGrid>>) -> Var {
        let v = warp_value(&self.nodes[a.0].value, &grids, false);
        self.push(v, Op::Warp(a, grids))
    }

    pub fn warp_adjoint(&mut self, a: Var, grids: Rc<Vec<WarpGrid>>) -> Var {
        let v = warp_value(&self.nodes[a.0].value, &grids, true);
        self.push(v, Op::WarpAdjoint(a, grids))
    }

    /// Elementwise product with a constant (no gradient into the constant).
    pub fn mul_const(&mut self, a: Var, c: Rc<ArrayD<f64>>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const: shape mismatch");
        let v = &self.nodes[a.0].value * &*c;
        self.push(v, Op::MulConst(a, c))
    }

    /// Sum all entries down to a 0-d scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut v = a;
        while !self.shape(v).is_empty() {
            let last = self.shape(v).len() - 1;
            v = self.sum_axis(v, last);
        }
        v
    }
}

fn im2col_value(x: &ArrayD<f64>, g: &PatchGeom) -> ArrayD<f64> {
    let b = x.shape()[0];
    assert_eq!(x.shape()[1], g.c_in);
    assert_eq!(x.shape()[2], g.h);
    assert_eq!(x.shape()[3], g.w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = ArrayD::zeros(IxDyn(&[b * oh * ow, g.c_in * g.kh * g.kw]));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for c in 0..g.c_in {
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (c * g.kh + ki) * g.kw + kj;
                            out[[row, col]] = x[[bi, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_value(cols: &ArrayD<f64>, g: &PatchGeom) -> ArrayD<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let b = cols.shape()[0] / (oh * ow);
    assert_eq!(cols.shape()[0], b * oh * ow);
    assert_eq!(cols.shape()[1], g.c_in * g.kh * g.kw);
    let mut out = ArrayD::zeros(IxDyn(&[b, g.c_in, g.h, g.w]));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for c in 0..g.c_in {
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (c * g.kh + ki) * g.kw + kj;
                            out[[bi, c, iy as usize, ix as usize]] += cols[[row, col]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn warp_value(x: &ArrayD<f64>, grids: &[WarpGrid], adjoint: bool) -> ArrayD<f64> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let g0 = &grids[0];
    assert!(grids.len() == 1 || grids.len() == b, "warp: grid count");
    assert_eq!(x.shape()[2], g0.h);
    assert_eq!(x.shape()[3], g0.w);
    let plane = g0.h * g0.w;
    let mut out = ArrayD::zeros(x.raw_dim());
    let xs = x.as_slice().expect("warp: non-contiguous input");
    {
        let os = out.as_slice_mut().unwrap();
        for bi in 0..b {
            let grid = &grids[if grids.len() == 1 { 0 } else { bi }];
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for (pix, taps) in grid.taps.iter().enumerate() {
                    for &(src, wgt) in taps.iter() {
                        if wgt == 0.0 {
                            continue;
                        }
                        if adjoint {
                            os[base + src as usize] += wgt * xs[base + pix];
                        } else {
                            os[base + pix] += wgt * xs[base + src as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// The returned vars live on the same tape and are themselves
/// differentiable. Vars in `wrt` that do not influence `loss` get a zero
/// gradient of the matching shape.
pub fn grad(tape: &mut Tape, loss: Var, wrt: &[Var]) -> Vec<Var> {
    assert_eq!(tape.value(loss).len(), 1, "grad: loss must be scalar");
    let n = loss.0 + 1;

    // needed[i]: node i depends on at least one wrt var
    let mut needed = vec![false; n];
    for w in wrt {
        needed[w.0] = true;
    }
    for i in 0..n {
        if needed[i] {
            continue;
        }
        let dep = match &tape.nodes[i].op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                needed[a.0] || needed[b.0]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::SumAxis(a, _)
            | Op::Expand(a, _, _)
            | Op::Reshape(a)
            | Op::Transpose(a, _)
            | Op::SliceAxis(a, _, _, _)
            | Op::PadAxis(a, _, _, _)
            | Op::Im2Col(a, _)
            | Op::Col2Im(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _)
            | Op::Warp(a, _)
            | Op::WarpAdjoint(a, _)
            | Op::MulConst(a, _) => needed[a.0],
            Op::Concat(parts, _) => parts.iter().any(|p| needed[p.0]),
        };
        needed[i] = dep;
    }

    let mut adj: Vec<Option<Var>> = vec![None; n];
    let ones = ArrayD::from_elem(tape.value(loss).raw_dim(), 1.0);
    adj[loss.0] = Some(tape.leaf(ones));

    fn accum(tape: &mut Tape, adj: &mut [Option<Var>], target: Var, v: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => v,
            Some(e) => tape.add(e, v),
        });
    }

    for i in (0..n).rev() {
        if !needed[i] {
            continue;
        }
        let g = match adj[i] {
            Some(g) => g,
            None => continue,
        };
        // decompose node i without holding a borrow across tape mutation
        enum Rule {
            None,
            One(Var, Var),                // (target, grad)
            Two((Var, Var), (Var, Var)),  // two targets
            Many(Vec<(Var, Var)>),
        }
        let rule = match &tape.nodes[i].op {
            Op::Leaf => Rule::None,
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                match (needed[a.0], needed[b.0]) {
                    (true, true) => Rule::Two((a, g), (b, g)),
                    (true, false) => Rule::One(a, g),
                    (false, true) => Rule::One(b, g),
                    _ => Rule::None,
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let mut outs = Vec::new();
                if needed[a.0] {
                    outs.push((a, g));
                }
                if needed[b.0] {
                    let ng = tape.neg(g);
                    outs.push((b, ng));
                }
                Rule::Many(outs)
            }
            Op::Neg(a) => {
                let a = *a;
                let ng = tape.neg(g);
                Rule::One(a, ng)
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let mut outs = Vec::new();
                if needed[a.0] {
                    let ga = tape.mul(g, b);
                    outs.push((a, ga));
                }
                if needed[b.0] {
                    let gb = tape.mul(g, a);
                    outs.push((b, gb));
                }
                Rule::Many(outs)
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let out = Var(i);
                let mut outs = Vec::new();
                if needed[a.0] {
                    let ga = tape.div(g, b);
                    outs.push((a, ga));
                }
                if needed[b.0] {
                    let t = tape.mul(g, out);
                    let t = tape.div(t, b);
                    let gb = tape.neg(t);
                    outs.push((b, gb));
                }
                Rule::Many(outs)
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let ga = tape.scale(g, c);
                Rule::One(a, ga)
            }
            Op::AddScalar(a, _) => Rule::One(*a, g),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let mut outs = Vec::new();
                if needed[a.0] {
                    let bt = tape.transpose(b, &[1, 0]);
                    let ga = tape.matmul(g, bt);
                    outs.push((a, ga));
                }
                if needed[b.0] {
                    let at = tape.transpose(a, &[1, 0]);
                    let gb = tape.matmul(at, g);
                    outs.push((b, gb));
                }
                Rule::Many(outs)
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = tape.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let ga = tape.mul_const(g, Rc::new(mask));
                Rule::One(a, ga)
            }
            Op::Exp(a) => {
                let a = *a;
                let out = Var(i);
                let ga = tape.mul(g, out);
                Rule::One(a, ga)
            }
            Op::Ln(a) => {
                let a = *a;
                let ga = tape.div(g, a);
                Rule::One(a, ga)
            }
            Op::Sqrt(a) => {
                let a = *a;
                let out = Var(i);
                let t = tape.div(g, out);
                let ga = tape.scale(t, 0.5);
                Rule::One(a, ga)
            }
            Op::SumAxis(a, axis) => {
                let (a, axis) = (*a, *axis);
                let dim = tape.shape(a)[axis];
                let ga = tape.expand(g, axis, dim);
                Rule::One(a, ga)
            }
            Op::Expand(a, axis, _) => {
                let (a, axis) = (*a, *axis);
                let ga = tape.sum_axis(g, axis);
                Rule::One(a, ga)
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = tape.shape(a).to_vec();
                let ga = tape.reshape(g, &shape);
                Rule::One(a, ga)
            }
            Op::Transpose(a, perm) => {
                let a = *a;
                let mut inv = vec![0usize; perm.len()];
                for (pos, &p) in perm.iter().enumerate() {
                    inv[p] = pos;
                }
                let ga = tape.transpose(g, &inv);
                Rule::One(a, ga)
            }
            Op::SliceAxis(a, axis, start, _) => {
                let (a, axis, start) = (*a, *axis, *start);
                let total = tape.shape(a)[axis];
                let ga = tape.pad_axis(g, axis, start, total);
                Rule::One(a, ga)
            }
            Op::PadAxis(a, axis, start, _) => {
                let (a, axis, start) = (*a, *axis, *start);
                let len = tape.shape(a)[axis];
                let ga = tape.slice_axis(g, axis, start, len);
                Rule::One(a, ga)
            }
            Op::Concat(parts, axis) => {
                let parts = parts.clone();
                let axis = *axis;
                let mut outs = Vec::new();
                let mut off = 0;
                for p in parts {
                    let len = tape.shape(p)[axis];
                    if needed[p.0] {
                        let gp = tape.slice_axis(g, axis, off, len);
                        outs.push((p, gp));
                    }
                    off += len;
                }
                Rule::Many(outs)
            }
            Op::Im2Col(a, geom) => {
                let (a, geom) = (*a, *geom);
                let ga = tape.col2im(g, geom);
                Rule::One(a, ga)
            }
            Op::Col2Im(a, geom) => {
                let (a, geom) = (*a, *geom);
                let ga = tape.im2col(g, geom);
                Rule::One(a, ga)
            }
            Op::GatherRows(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                let n_rows = tape.shape(a)[0];
                let ga = tape.scatter_rows(g, idx, n_rows);
                Rule::One(a, ga)
            }
            Op::ScatterRows(a, idx, _) => {
                let (a, idx) = (*a, idx.clone());
                let ga = tape.gather_rows(g, idx);
                Rule::One(a, ga)
            }
            Op::Warp(a, grids) => {
                let (a, grids) = (*a, grids.clone());
                let ga = tape.warp_adjoint(g, grids);
                Rule::One(a, ga)
            }
            Op::WarpAdjoint(a, grids) => {
                let (a, grids) = (*a, grids.clone());
                let ga = tape.warp(g, grids);
                Rule::One(a, ga)
            }
            Op::MulConst(a, c) => {
                let (a, c) = (*a, c.clone());
                let ga = tape.mul_const(g, c);
                Rule::One(a, ga)
            }
        };
        match rule {
            Rule::None => {}
            Rule::One(t, v) => accum(tape, &mut adj, t, v),
            Rule::Two((t1, v1), (t2, v2)) => {
                accum(tape, &mut adj, t1, v1);
                accum(tape, &mut adj, t2, v2);
            }
            Rule::Many(outs) => {
                for (t, v) in outs {
                    accum(tape, &mut adj, t, v);
                }
            }
        }
    }

    wrt.iter()
        .map(|w| match adj[w.0] {
            Some(g) => g,
            None => tape.zeros_like(*w),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn fd_check<F>(f: F, x0: &ArrayD<f64>, analytic: &ArrayD<f64>, tol: f64)
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let h = 1e-5;
        for (i, g) in analytic.iter().enumerate() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = num.abs().max(g.abs()).max(1e-8);
            assert!(
                (num - g).abs() / denom < tol,
                "coord {i}: numeric {num} vs analytic {g}"
            );
        }
    }

    #[test]
    fn grad_of_product_chain() {
        // f(x) = sum((x*x + 2x) / (x+3))
        let x0 = arr1(&[0.5, -1.0, 2.0]).into_dyn();
        let eval = |x: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let sq = t.mul(xv, xv);
            let two = t.scale(xv, 2.0);
            let num = t.add(sq, two);
            let den = t.add_scalar(xv, 3.0);
            let q = t.div(num, den);
            let s = t.sum_all(q);
            let g = grad(&mut t, s, &[xv]);
            (t.scalar(s), Some(t.value(g[0]).clone()))
        };
        let (_, g) = eval(&x0);
        fd_check(|x| eval(x).0, &x0, &g.unwrap(), 1e-6);
    }

    #[test]
    fn grad_matmul() {
        let a0 = arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).into_dyn();
        let b0 = arr2(&[[2.0, -1.0, 0.3], [1.5, 0.2, -2.0]]).into_dyn();
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let c = t.matmul(a, b);
        let sq = t.mul(c, c);
        let s = t.sum_all(sq);
        let gs = grad(&mut t, s, &[a, b]);
        let ga = t.value(gs[0]).clone();
        let gb = t.value(gs[1]).clone();
        let f_a = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let b = t.leaf(b0.clone());
            let c = t.matmul(a, b);
            let sq = t.mul(c, c);
            let s = t.sum_all(sq);
            t.scalar(s)
        };
        let f_b = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(a0.clone());
            let b = t.leaf(x.clone());
            let c = t.matmul(a, b);
            let sq = t.mul(c, c);
            let s = t.sum_all(sq);
            t.scalar(s)
        };
        fd_check(f_a, &a0, &ga, 1e-6);
        fd_check(f_b, &b0, &gb, 1e-6);
    }

    #[test]
    fn second_order_through_grad() {
        // f(x) = sum(x^3); grad = 3x^2; d(sum(grad))/dx = 6x
        let x0 = arr1(&[0.7, -1.2, 2.0]).into_dyn();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let x2 = t.mul(x, x);
        let x3 = t.mul(x2, x);
        let s = t.sum_all(x3);
        let g1 = grad(&mut t, s, &[x])[0];
        let gsum = t.sum_all(g1);
        let g2 = grad(&mut t, gsum, &[x])[0];
        let expected = x0.mapv(|v| 6.0 * v);
        for (a, b) in t.value(g2).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn second_order_with_exp_ln() {
        // f(x) = sum(exp(x) * ln(x)); check hessian diagonal against closed form
        let x0 = arr1(&[0.8, 1.5]).into_dyn();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let e = t.exp(x);
        let l = t.ln(x);
        let p = t.mul(e, l);
        let s = t.sum_all(p);
        let g1 = grad(&mut t, s, &[x])[0];
        let gsum = t.sum_all(g1);
        let g2 = grad(&mut t, gsum, &[x])[0];
        // f'' = e^x ln x + 2 e^x / x - e^x / x^2
        let expected = x0.mapv(|v| v.exp() * v.ln() + 2.0 * v.exp() / v - v.exp() / (v * v));
        for (a, b) in t.value(g2).iter().zip(expected.iter()) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let geom = PatchGeom { c_in: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 1, pad: 1 };
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 5, 4]), |_| rng.gen::<f64>() - 0.5);
        let rows = 2 * geom.out_h() * geom.out_w();
        let y = ArrayD::from_shape_fn(IxDyn(&[rows, 2 * 9]), |_| rng.gen::<f64>() - 0.5);
        let fx = im2col_value(&x, &geom);
        let by = col2im_value(&y, &geom);
        let lhs: f64 = fx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(by.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gather_scatter_and_slicing_grads() {
        let x0 = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let idx = Rc::new(vec![2usize, 0, 2]);
        let gathered = t.gather_rows(x, idx);
        let sq = t.mul(gathered, gathered);
        let s = t.sum_all(sq);
        let g = grad(&mut t, s, &[x])[0];
        // rows: row0 appears once, row1 never, row2 twice
        let gv = t.value(g);
        assert_eq!(gv[[0, 0]], 2.0 * x0[[0, 0]]);
        assert_eq!(gv[[1, 0]], 0.0);
        assert_eq!(gv[[2, 1]], 2.0 * 2.0 * x0[[2, 1]]);
    }

    #[test]
    fn unused_wrt_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = t.leaf(arr1(&[3.0]).into_dyn());
        let s = t.sum_all(x);
        let gs = grad(&mut t, s, &[x, y]);
        assert!(t.value(gs[1]).iter().all(|&v| v == 0.0));
        assert!(t.value(gs[0]).iter().all(|&v| v == 1.0));
    }
}
