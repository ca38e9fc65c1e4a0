//! Raw numeric kernels behind the differentiable ops.
//!
//! All feature maps are `[N, D1, D2, D3, C]` channels-last. Convolution
//! weights are `[K1, K2, K3, Cin, Cout]`.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Kernel, stride and zero padding of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// In-plane kernel that leaves the depth axis untouched.
    pub fn planar(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k, k, 1],
            stride: [stride, stride, 1],
            pad: [pad, pad, 0],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Shape bookkeeping for one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    /// Visit every valid (output site, kernel tap, input site) triple as
    /// flat offsets: `(out_base, in_base, weight_base)`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = &self.geom;
        let [i1, i2, i3] = self.inp;
        let [o1, o2, o3] = self.out;
        let [k1, k2, k3] = g.kernel;
        for n in 0..self.n {
            for a in 0..o1 {
                for ka in 0..k1 {
                    let ia = (a * g.stride[0] + ka) as isize - g.pad[0] as isize;
                    if ia < 0 || ia >= i1 as isize {
                        continue;
                    }
                    for b in 0..o2 {
                        for kb in 0..k2 {
                            let ib = (b * g.stride[1] + kb) as isize - g.pad[1] as isize;
                            if ib < 0 || ib >= i2 as isize {
                                continue;
                            }
                            for c in 0..o3 {
                                let out_base = (((n * o1 + a) * o2 + b) * o3 + c) * self.cout;
                                for kc in 0..k3 {
                                    let ic = (c * g.stride[2] + kc) as isize - g.pad[2] as isize;
                                    if ic < 0 || ic >= i3 as isize {
                                        continue;
                                    }
                                    let in_base = (((n * i1 + ia as usize) * i2 + ib as usize)
                                        * i3
                                        + ic as usize)
                                        * self.cin;
                                    let w_base = ((ka * k2 + kb) * k3 + kc) * self.cin * self.cout;
                                    f(out_base, in_base, w_base);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (ci, co) = (self.cin, self.cout);
        self.for_each_tap(|ob, ib, wb| {
            let o = &mut out[ob..ob + co];
            let xs = &x[ib..ib + ci];
            for (c, &xv) in xs.iter().enumerate() {
                if xv != T::zero() {
                    axpy(o, xv, &w[wb + c * co..wb + (c + 1) * co]);
                }
            }
        });
    }

    pub fn backward_input<T: Scalar>(&self, gout: &[T], w: &[T], gx: &mut [T]) {
        let (ci, co) = (self.cin, self.cout);
        self.for_each_tap(|ob, ib, wb| {
            let g = &gout[ob..ob + co];
            for c in 0..ci {
                gx[ib + c] += dot(g, &w[wb + c * co..wb + (c + 1) * co]);
            }
        });
    }

    pub fn backward_weight<T: Scalar>(&self, x: &[T], gout: &[T], gw: &mut [T]) {
        let (ci, co) = (self.cin, self.cout);
        self.for_each_tap(|ob, ib, wb| {
            let g = &gout[ob..ob + co];
            for c in 0..ci {
                let xv = x[ib + c];
                if xv != T::zero() {
                    axpy(&mut gw[wb + c * co..wb + (c + 1) * co], xv, g);
                }
            }
        });
    }
}

/// Per-(sample, group) statistics saved by group normalization.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub rstd: Vec<T>,
}

/// Parameter-free group normalization over `[N, S, C]` data (S = spatial size).
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    s: usize,
    c: usize,
    groups: usize,
    eps: T,
    out: &mut [T],
) -> GroupStats<T> {
    let cg = c / groups;
    let count = T::from_usize_lossy(s * cg);
    let mut rstd = Vec::with_capacity(n * groups);
    for ni in 0..n {
        let base = ni * s * c;
        for g in 0..groups {
            let mut mean = T::zero();
            for si in 0..s {
                let off = base + si * c + g * cg;
                mean += x[off..off + cg].iter().copied().sum::<T>();
            }
            mean /= count;
            let mut var = T::zero();
            for si in 0..s {
                let off = base + si * c + g * cg;
                for &v in &x[off..off + cg] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= count;
            let r = T::one() / (var + eps).sqrt();
            for si in 0..s {
                let off = base + si * c + g * cg;
                for j in off..off + cg {
                    out[j] = (x[j] - mean) * r;
                }
            }
            rstd.push(r);
        }
    }
    GroupStats { rstd }
}

pub(crate) fn group_norm_backward<T: Scalar>(
    y: &[T],
    gy: &[T],
    stats: &GroupStats<T>,
    n: usize,
    s: usize,
    c: usize,
    groups: usize,
    gx: &mut [T],
) {
    let cg = c / groups;
    let count = T::from_usize_lossy(s * cg);
    for ni in 0..n {
        let base = ni * s * c;
        for g in 0..groups {
            let r = stats.rstd[ni * groups + g];
            let mut mg = T::zero();
            let mut mgy = T::zero();
            for si in 0..s {
                let off = base + si * c + g * cg;
                for j in off..off + cg {
                    mg += gy[j];
                    mgy += gy[j] * y[j];
                }
            }
            mg /= count;
            mgy /= count;
            for si in 0..s {
                let off = base + si * c + g * cg;
                for j in off..off + cg {
                    gx[j] += r * (gy[j] - mg - y[j] * mgy);
                }
            }
        }
    }
}

/// Which axis attention mixes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Over the H x W positions of each depth slice.
    Spatial,
    /// Over the depth (slice) axis at each in-plane site.
    CrossSlice,
}

/// Flat voxel indices of every attention sequence in a `[N, H, W, L]` grid.
pub(crate) fn attention_groups(dims: [usize; 4], mode: AttentionMode) -> Vec<Vec<usize>> {
    let [n, h, w, l] = dims;
    let idx = |ni: usize, a: usize, b: usize, c: usize| ((ni * h + a) * w + b) * l + c;
    let mut groups = Vec::new();
    match mode {
        AttentionMode::Spatial => {
            for ni in 0..n {
                for c in 0..l {
                    let mut g = Vec::with_capacity(h * w);
                    for a in 0..h {
                        for b in 0..w {
                            g.push(idx(ni, a, b, c));
                        }
                    }
                    groups.push(g);
                }
            }
        }
        AttentionMode::CrossSlice => {
            for ni in 0..n {
                for a in 0..h {
                    for b in 0..w {
                        groups.push((0..l).map(|c| idx(ni, a, b, c)).collect());
                    }
                }
            }
        }
    }
    groups
}

/// Scaled dot-product attention per sequence group. Returns the row-stochastic
/// weight matrices (one `len x len` block per group, concatenated).
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    c: usize,
    groups: &[Vec<usize>],
    out: &mut [T],
) -> Vec<T> {
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let total: usize = groups.iter().map(|g| g.len() * g.len()).sum();
    let mut probs = Vec::with_capacity(total);
    let mut row = Vec::new();
    for g in groups {
        let len = g.len();
        for &i in g {
            let qi = &q[i * c..(i + 1) * c];
            row.clear();
            let mut mx = T::neg_infinity();
            for &j in g {
                let s = dot(qi, &k[j * c..(j + 1) * c]) * scale;
                mx = mx.max(s);
                row.push(s);
            }
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            let o = &mut out[i * c..(i + 1) * c];
            for (jj, &j) in g.iter().enumerate() {
                let p = row[jj] / z;
                row[jj] = p;
                axpy(o, p, &v[j * c..(j + 1) * c]);
            }
            debug_assert_eq!(row.len(), len);
            probs.extend_from_slice(&row);
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    c: usize,
    groups: &[Vec<usize>],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let mut off = 0;
    let mut dp = Vec::new();
    for g in groups {
        let len = g.len();
        for (ii, &i) in g.iter().enumerate() {
            let p = &probs[off + ii * len..off + (ii + 1) * len];
            let go = &gout[i * c..(i + 1) * c];
            dp.clear();
            let mut s = T::zero();
            for (jj, &j) in g.iter().enumerate() {
                axpy(&mut gv[j * c..(j + 1) * c], p[jj], go);
                let d = dot(go, &v[j * c..(j + 1) * c]);
                s += p[jj] * d;
                dp.push(d);
            }
            for (jj, &j) in g.iter().enumerate() {
                let ds = p[jj] * (dp[jj] - s) * scale;
                if ds != T::zero() {
                    axpy(&mut gq[i * c..(i + 1) * c], ds, &k[j * c..(j + 1) * c]);
                    axpy(&mut gk[j * c..(j + 1) * c], ds, &q[i * c..(i + 1) * c]);
                }
            }
        }
        off += len * len;
    }
}
