//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Node ids
//! are allocated in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.

mod kernels;

use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::{AttentionMode, ConvGeom};
use kernels::{ConvDims, GroupStats};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which named parameters receive gradients in a graph.
#[derive(Debug, Clone)]
pub enum Trainable {
    All,
    None,
    /// Only parameters whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    BiasAdd(Var, Var),
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Conv {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Silu(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Exp(Var),
    Matmul(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<Vec<Vec<usize>>>,
        probs: Vec<T>,
    },
    StraightThrough(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    SelectDepth {
        x: Var,
        indices: Vec<usize>,
    },
    Concat(Var, Var),
    LogSoftmax(Var),
    SumSpatial(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    trainable: Trainable,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Named parameter gradients, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(k, &v)| self.get(v).map(|g| (k.as_str(), g)))
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn inference() -> Self {
        Self::with_trainable(Trainable::None)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            trainable,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a named parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf. Repeated use of the same name inside one graph
    /// returns the same node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let rg = self.trainable.admits(name);
        let v = self.push(value.clone(), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mul(a, a), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len());
        let v = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Sum of squared differences, `||a - b||^2`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.sum(s))
    }

    /// `x + b` with `b` of shape `[C]` broadcast over every leading axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(b) != [c] {
            return Err(Error::shape(format!(
                "bias {:?} for {c} channels",
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (o, &bb) in chunk.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::BiasAdd(x, b), rg))
    }

    fn check_channel_operand(&self, x: Var, s: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let n = xs[0];
        let c = *xs.last().unwrap();
        if self.shape(s) != [n, c] {
            return Err(Error::shape(format!(
                "per-channel operand {:?} for {:?}",
                self.shape(s),
                xs
            )));
        }
        Ok((n, c))
    }

    /// `x * s` with `s: [N, C]` broadcast over the spatial axes.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c) = self.check_channel_operand(x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        let per = v.len() / n;
        for (ni, sample) in v.data_mut().chunks_mut(per).enumerate() {
            for chunk in sample.chunks_mut(c) {
                for (o, &ss) in chunk.iter_mut().zip(&sv[ni * c..(ni + 1) * c]) {
                    *o *= ss;
                }
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::ChannelMul(x, s), rg))
    }

    /// `x + b` with `b: [N, C]` broadcast over the spatial axes.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.check_channel_operand(x, b)?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        let per = v.len() / n;
        for (ni, sample) in v.data_mut().chunks_mut(per).enumerate() {
            for chunk in sample.chunks_mut(c) {
                for (o, &bb) in chunk.iter_mut().zip(&bv[ni * c..(ni + 1) * c]) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::ChannelAdd(x, b), rg))
    }

    /// 3D convolution of `x: [N, D1, D2, D3, Cin]` with `w: [K1, K2, K3, Cin, Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape(format!("conv3d: input {xs:?}, weight {ws:?}")));
        }
        if ws[..3] != geom.kernel || ws[3] != xs[4] {
            return Err(Error::shape(format!(
                "conv3d: weight {ws:?} does not fit input {xs:?} with kernel {:?}",
                geom.kernel
            )));
        }
        let inp = spatial(&xs);
        let out = geom
            .out_dims(inp)
            .ok_or_else(|| Error::shape(format!("conv3d: input {xs:?} smaller than kernel")))?;
        let dims = ConvDims {
            n: xs[0],
            inp,
            out,
            cin: ws[3],
            cout: ws[4],
            geom,
        };
        let mut y = Tensor::zeros(&[xs[0], out[0], out[1], out[2], ws[4]]);
        dims.forward(self.value(x).data(), self.value(w).data(), y.data_mut());
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Conv { x, w, dims }, rg))
    }

    /// Transposed 3D convolution: the adjoint of `conv3d` with the same
    /// geometry. `w: [K1, K2, K3, Cout, Cin]` (the forward conv's layout, read
    /// from output back to input); output spatial dims are
    /// `(i - 1) * stride - 2 * pad + kernel`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[..3] != geom.kernel || ws[4] != xs[4] {
            return Err(Error::shape(format!(
                "conv_transpose3d: input {xs:?}, weight {ws:?}"
            )));
        }
        let small = spatial(&xs);
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (small[a] - 1) * geom.stride[a] + geom.kernel[a];
            if full < 2 * geom.pad[a] + 1 {
                return Err(Error::shape(
                    "conv_transpose3d: padding too large".to_string(),
                ));
            }
            big[a] = full - 2 * geom.pad[a];
        }
        let dims = ConvDims {
            n: xs[0],
            inp: big,
            out: small,
            cin: ws[3],
            cout: ws[4],
            geom,
        };
        let mut y = Tensor::zeros(&[xs[0], big[0], big[1], big[2], ws[3]]);
        dims.backward_input(self.value(x).data(), self.value(w).data(), y.data_mut());
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::ConvTranspose { x, w, dims }, rg))
    }

    /// Parameter-free group normalization (no affine terms).
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let n = xs[0];
        let s = xs[1..xs.len() - 1].iter().product();
        let mut y = Tensor::zeros(&xs);
        let stats = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            s,
            c,
            groups,
            T::lit(GROUP_NORM_EPS),
            y.data_mut(),
        );
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::GroupNorm { x, groups, stats }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { a * slope });
        let rg = self.rg(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = Tensor::zeros(&[m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let yd = y.data_mut();
            for i in 0..m {
                for kk in 0..k {
                    kernels::axpy(
                        &mut yd[i * n..(i + 1) * n],
                        av[i * k + kk],
                        &bv[kk * n..(kk + 1) * n],
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Matmul(a, b), rg))
    }

    /// Scaled dot-product attention over `[N, H, W, L, C]` maps, mixing
    /// positions as selected by `mode`. Weight rows are a softmax, so each
    /// output is a convex combination of value vectors.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mode: AttentionMode) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let s = self.shape(q).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("attention expects rank 5, got {s:?}")));
        }
        let c = s[4];
        let groups = Rc::new(kernels::attention_groups([s[0], s[1], s[2], s[3]], mode));
        let mut y = Tensor::zeros(&s);
        let probs = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            c,
            &groups,
            y.data_mut(),
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
            },
            rg,
        ))
    }

    /// Attention weight matrix of an attention node, one `len x len` block per
    /// sequence.
    pub fn attention_weights(&self, v: Var) -> Option<(Vec<usize>, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { groups, probs, .. } => {
                Some((groups.iter().map(|g| g.len()).collect(), probs.as_slice()))
            }
            _ => None,
        }
    }

    /// Forward value `value`, backward identity to `x` (straight-through).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return Err(Error::shape(
                "straight_through: value shape differs from input",
            ));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Rows of `table: [K, D]` at `indices`, as `[indices.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather_rows expects a matrix"));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= ts[0] {
                return Err(Error::shape(format!("gather index {i} >= {}", ts[0])));
            }
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let y = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            y,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Select depth slices of `[N, H, W, L, C]`: output `[N, H, W, k, C]`.
    pub fn select_depth(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || indices.iter().any(|&i| i >= s[3]) {
            return Err(Error::shape(format!("select_depth {indices:?} from {s:?}")));
        }
        let (l, c, k) = (s[3], s[4], indices.len());
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * s[2] * k * c);
        for col in 0..s[0] * s[1] * s[2] {
            for &i in indices {
                let off = (col * l + i) * c;
                data.extend_from_slice(&xv[off..off + c]);
            }
        }
        let y = Tensor::new(vec![s[0], s[1], s[2], k, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            y,
            Op::SelectDepth {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let sites = self.value(a).len() / ca;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sites * (ca + cb));
        for i in 0..sites {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let y = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Concat(a, b), rg))
    }

    /// Log-softmax over the channel axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).channels();
        let mut y = self.value(x).clone();
        for chunk in y.data_mut().chunks_mut(c) {
            let m = chunk.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + chunk.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in chunk.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(y, Op::LogSoftmax(x), rg)
    }

    /// `[N, ..., C] -> [N, C]`, summing the spatial axes.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], *s.last().unwrap());
        let per = self.value(x).len() / n;
        let xv = self.value(x).data();
        let mut y = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for chunk in xv[ni * per..(ni + 1) * per].chunks(c) {
                for (o, &v) in y.data_mut()[ni * c..(ni + 1) * c].iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(y, Op::SumSpatial(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.backward_from(loss, 0)
    }

    /// Reverse sweep that only visits nodes with id `>= min_node`. Leaves
    /// below the cut still receive gradient contributions from ops above it,
    /// which lets a caller take the gradient of one late loss term with
    /// respect to a late layer without re-traversing the whole network.
    pub fn backward_from(&self, loss: Var, min_node: usize) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (min_node..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Grads {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn backprop_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| kernels::axpy(d, *s, g)),
            Op::AddScalar(a) | Op::StraightThrough(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |d| add_into(d, g))
            }
            Op::Sum(a) => self.acc(grads, *a, |d| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::from_usize_lossy(self.value(*a).len());
                self.acc(grads, *a, |d| {
                    for o in d.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::BiasAdd(x, b) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let c = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    for chunk in g.chunks(c) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::ChannelMul(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let n = self.shape(*s)[0];
                let c = self.shape(*s)[1];
                let per = xv.len() / n;
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        let sc = &sv[ni * c..(ni + 1) * c];
                        for (dc, gc) in d[ni * per..(ni + 1) * per]
                            .chunks_mut(c)
                            .zip(g[ni * per..(ni + 1) * per].chunks(c))
                        {
                            for j in 0..c {
                                dc[j] += gc[j] * sc[j];
                            }
                        }
                    }
                });
                self.acc(grads, *s, |d| {
                    for ni in 0..n {
                        for (xc, gc) in xv[ni * per..(ni + 1) * per]
                            .chunks(c)
                            .zip(g[ni * per..(ni + 1) * per].chunks(c))
                        {
                            for j in 0..c {
                                d[ni * c + j] += gc[j] * xc[j];
                            }
                        }
                    }
                });
            }
            Op::ChannelAdd(x, b) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let n = self.shape(*b)[0];
                let c = self.shape(*b)[1];
                let per = g.len() / n;
                self.acc(grads, *b, |d| {
                    for ni in 0..n {
                        for gc in g[ni * per..(ni + 1) * per].chunks(c) {
                            add_into(&mut d[ni * c..(ni + 1) * c], gc);
                        }
                    }
                });
            }
            Op::Conv { x, w, dims } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| dims.backward_input(g, wv, d));
                self.acc(grads, *w, |d| dims.backward_weight(xv, g, d));
            }
            Op::ConvTranspose { x, w, dims } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| dims.forward(g, wv, d));
                self.acc(grads, *w, |d| dims.backward_weight(g, xv, d));
            }
            Op::GroupNorm { x, groups, stats } => {
                let s = node.value.shape();
                let n = s[0];
                let c = *s.last().unwrap();
                let sp = node.value.len() / (n * c);
                self.acc(grads, *x, |d| {
                    kernels::group_norm_backward(node.value.data(), g, stats, n, sp, c, *groups, d)
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(xv[i]);
                        d[i] += g[i] * s * (T::one() + xv[i] * (T::one() - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += if xv[i] > T::zero() {
                            g[i]
                        } else {
                            g[i] * *slope
                        };
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for kk in 0..k {
                            d[i * k + kk] +=
                                kernels::dot(&g[i * n..(i + 1) * n], &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..m {
                        for kk in 0..k {
                            kernels::axpy(
                                &mut d[kk * n..(kk + 1) * n],
                                av[i * k + kk],
                                &g[i * n..(i + 1) * n],
                            );
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
            } => {
                let c = node.value.channels();
                let n = node.value.len();
                let mut gq = vec![T::zero(); n];
                let mut gk = vec![T::zero(); n];
                let mut gv = vec![T::zero(); n];
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    c,
                    groups,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                self.acc(grads, *q, |d| add_into(d, &gq));
                self.acc(grads, *k, |d| add_into(d, &gk));
                self.acc(grads, *v, |d| add_into(d, &gv));
            }
            Op::Gather { table, indices } => {
                let dd = self.shape(*table)[1];
                self.acc(grads, *table, |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * dd..(i + 1) * dd], &g[r * dd..(r + 1) * dd]);
                    }
                });
            }
            Op::SelectDepth { x, indices } => {
                let s = self.shape(*x);
                let (l, c, k) = (s[3], s[4], indices.len());
                let cols = s[0] * s[1] * s[2];
                self.acc(grads, *x, |d| {
                    for col in 0..cols {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = (col * k + j) * c;
                            let dst = (col * l + i) * c;
                            add_into(&mut d[dst..dst + c], &g[src..src + c]);
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                let sites = self.value(*a).len() / ca;
                self.acc(grads, *a, |d| {
                    for i in 0..sites {
                        add_into(
                            &mut d[i * ca..(i + 1) * ca],
                            &g[i * (ca + cb)..i * (ca + cb) + ca],
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..sites {
                        add_into(
                            &mut d[i * cb..(i + 1) * cb],
                            &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)],
                        );
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.channels();
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dc, gc), yc) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: T = gc.iter().copied().sum();
                        for j in 0..c {
                            dc[j] += gc[j] - yc[j].exp() * gs;
                        }
                    }
                });
            }
            Op::SumSpatial(x) => {
                let s = self.shape(*x);
                let (n, c) = (s[0], *s.last().unwrap());
                let per = self.value(*x).len() / n;
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for dc in d[ni * per..(ni + 1) * per].chunks_mut(c) {
                            add_into(dc, &g[ni * c..(ni + 1) * c]);
                        }
                    }
                });
            }
        }
    }
}

/// Variance floor of group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (o, &v) in d.iter_mut().zip(g) {
        *o += v;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
