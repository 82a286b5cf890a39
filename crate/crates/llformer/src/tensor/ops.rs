//! Tensor ops with backward rules. Plumbing ops (elementwise, shape moves)
//! panic on misuse with the offending shapes in the message; `matmul_batched`
//! returns a typed dimension error since callers route user data through it.

use super::{record_op, strides, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    fn zip_with(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_vec(self.shape().to_vec(), data)
    }

    fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_vec(self.shape().to_vec(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out = self.zip_with(rhs, "add", |a, b| a + b);
        record_op("add", &[self, rhs], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out = self.zip_with(rhs, "sub", |a, b| a - b);
        record_op("sub", &[self, rhs], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.neg())]
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out = self.zip_with(rhs, "mul", |a, b| a * b);
        let (a, b) = (self.detach(), rhs.detach());
        record_op("mul", &[self, rhs], out, move |g, need| {
            vec![need[0].then(|| g.mul(&b)), need[1].then(|| g.mul(&a))]
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out = self.map(|v| v + c);
        record_op("add_scalar", &[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let out = self.map(|v| v * c);
        record_op("mul_scalar", &[self], out, move |g, _| vec![Some(g.mul_scalar(c))])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    /// Element-wise reciprocal.
    pub fn recip(&self) -> Tensor<T> {
        let out = self.map(|v| T::one() / v);
        let y = out.clone();
        record_op("recip", &[self], out, move |g, _| {
            vec![Some(g.mul(&y).mul(&y).neg())]
        })
    }

    /// Multiply by a single-element tensor (broadcast). Used for learnable
    /// scalars: the scalar's gradient is the sum over all positions.
    pub fn scale(&self, s: &Tensor<T>) -> Tensor<T> {
        assert_eq!(s.numel(), 1, "scale: scale factor must have one element");
        let sv = s.data()[0];
        let out = self.map(|v| v * sv);
        let (x, s_shape) = (self.detach(), s.shape().to_vec());
        record_op("scale", &[self, s], out, move |g, need| {
            vec![
                need[0].then(|| g.mul_scalar(sv)),
                need[1].then(|| g.mul(&x).sum_all().reshape(&s_shape)),
            ]
        })
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        let shape = self.shape().to_vec();
        record_op("sum", &[self], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        let sum = self.sum_all(); // records; scaling keeps the chain
        sum.mul_scalar(T::one() / n)
    }

    // ── Shape movement ──────────────────────────────────────────────────

    /// Same elements, new shape. Data is shared, not copied.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        let out = Tensor { shape: shape.to_vec(), data: self.data_arc(), node: None };
        let old = self.shape().to_vec();
        record_op("reshape", &[self], out, move |g, _| vec![Some(g.reshape(&old))])
    }

    /// Materialised axis permutation: `out[i0..] = in[i_perm[0]..]`, i.e.
    /// output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let rank = self.shape().len();
        assert_eq!(perm.len(), rank, "permute: perm length {} vs rank {}", perm.len(), rank);
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: {:?} is not a permutation", perm);
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let in_strides = strides(self.shape());
        let out_strides = strides(&out_shape);
        let n = self.numel();
        let src = self.data();
        let mut data = vec![T::zero(); n];
        for (flat_out, slot) in data.iter_mut().enumerate() {
            let mut rem = flat_out;
            let mut flat_in = 0;
            for d in 0..rank {
                let ix = rem / out_strides[d];
                rem %= out_strides[d];
                flat_in += ix * in_strides[perm[d]];
            }
            *slot = src[flat_in];
        }
        let out = Tensor::from_vec(out_shape, data);
        let mut inverse = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        record_op("permute", &[self], out, move |g, _| vec![Some(g.permute(&inverse))])
    }

    pub fn transpose_last2(&self) -> Tensor<T> {
        let rank = self.shape().len();
        assert!(rank >= 2, "transpose_last2: rank {rank} < 2");
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start+len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(dim < shape.len(), "narrow: dim {dim} out of range for {:?}", shape);
        assert!(
            start + len <= shape[dim],
            "narrow: [{start}, {}) exceeds axis {dim} (size {})",
            start + len,
            shape[dim]
        );
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let full = shape[dim];
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[dim] = len;
        let out = Tensor::from_vec(out_shape, data);
        let (in_shape, d, s) = (shape.to_vec(), dim, start);
        record_op("narrow", &[self], out, move |g, _| {
            let outer: usize = in_shape[..d].iter().product();
            let inner: usize = in_shape[d + 1..].iter().product();
            let full = in_shape[d];
            let len = g.shape()[d];
            let mut data = vec![T::zero(); in_shape.iter().product()];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * full + s) * inner;
                let srcb = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&gd[srcb..srcb + len * inner]);
            }
            vec![Some(Tensor::from_vec(in_shape.clone(), data))]
        })
    }

    /// Concatenate along `dim`; all other axes must agree.
    pub fn cat(parts: &[&Tensor<T>], dim: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat: no tensors");
        let first = parts[0].shape();
        assert!(dim < first.len(), "cat: dim {dim} out of range for {:?}", first);
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "cat: rank mismatch {:?} vs {:?}", s, first);
            for (ax, (&a, &b)) in s.iter().zip(first).enumerate() {
                assert!(
                    ax == dim || a == b,
                    "cat: axis {ax} mismatch {:?} vs {:?}",
                    s,
                    first
                );
            }
            total += s[dim];
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out_shape = first.to_vec();
        out_shape[dim] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let k = p.shape()[dim];
                let base = o * k * inner;
                data.extend_from_slice(&p.data()[base..base + k * inner]);
            }
        }
        let out = Tensor::from_vec(out_shape, data);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[dim]).collect();
        let inputs: Vec<&Tensor<T>> = parts.to_vec();
        record_op("cat", &inputs, out, move |g, need| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&k, &n)| {
                    let piece = n.then(|| g.narrow(dim, offset, k));
                    offset += k;
                    piece
                })
                .collect()
        })
    }

    /// Reverse one axis.
    pub fn flip(&self, dim: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(dim < shape.len(), "flip: dim {dim} out of range for {:?}", shape);
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let k = shape[dim];
        let src = self.data();
        let mut data = Vec::with_capacity(self.numel());
        for o in 0..outer {
            for j in (0..k).rev() {
                let base = (o * k + j) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let out = Tensor::from_vec(shape.to_vec(), data);
        record_op("flip", &[self], out, move |g, _| vec![Some(g.flip(dim))])
    }

    /// Reflection padding (edge not repeated) of the two trailing axes of a
    /// `[B, C, H, W]` tensor. Each pad must be at most `dim - 1`.
    pub fn pad_reflect_hw(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<T> {
        let [b, c, h, w]: [usize; 4] = self
            .shape()
            .try_into()
            .unwrap_or_else(|_| panic!("pad_reflect_hw: need 4D, got {:?}", self.shape()));
        assert!(
            top < h && bottom < h && left < w && right < w,
            "pad_reflect_hw: pads ({top},{bottom},{left},{right}) too large for {h}x{w}"
        );
        let (oh, ow) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let src = self.data();
        let mut data = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let sbase = bc * h * w;
            let dbase = bc * oh * ow;
            for oy in 0..oh {
                let sy = reflect(oy as isize - top as isize, h);
                let srow = sbase + sy * w;
                let drow = dbase + oy * ow;
                for ox in 0..ow {
                    let sx = reflect(ox as isize - left as isize, w);
                    data[drow + ox] = src[srow + sx];
                }
            }
        }
        let out = Tensor::from_vec(vec![b, c, oh, ow], data);
        record_op("pad_reflect", &[self], out, move |g, _| {
            let gd = g.data();
            let mut acc = vec![T::zero(); b * c * h * w];
            for bc in 0..b * c {
                let sbase = bc * h * w;
                let dbase = bc * oh * ow;
                for oy in 0..oh {
                    let sy = reflect(oy as isize - top as isize, h);
                    let srow = sbase + sy * w;
                    let drow = dbase + oy * ow;
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        acc[srow + sx] += gd[drow + ox];
                    }
                }
            }
            vec![Some(Tensor::from_vec(vec![b, c, h, w], acc))]
        })
    }

    /// Clamp values into `[lo, hi]`. Inference-only: refuses tracked input.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        assert!(!self.is_tracked(), "clamp: not differentiable, detach first");
        self.map(|v| v.min(hi).max(lo))
    }

    // ── Batched matmul ──────────────────────────────────────────────────

    /// `[..., M, K] × [..., K, N] → [..., M, N]`; leading axes must match
    /// exactly (no broadcasting).
    pub fn matmul_batched(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let rank = sa.len();
        if rank < 2 || sb.len() != rank {
            return Err(Error::Dimension {
                op: "matmul_batched",
                detail: format!("ranks {:?} vs {:?} (need equal rank >= 2)", sa, sb),
            });
        }
        if sa[..rank - 2] != sb[..rank - 2] {
            return Err(Error::Dimension {
                op: "matmul_batched",
                detail: format!("batch axes differ: {:?} vs {:?}", &sa[..rank - 2], &sb[..rank - 2]),
            });
        }
        if sa[rank - 1] != sb[rank - 2] {
            return Err(Error::Dimension {
                op: "matmul_batched",
                detail: format!(
                    "inner axes differ: lhs[-1]={} vs rhs[-2]={} ({:?} × {:?})",
                    sa[rank - 1],
                    sb[rank - 2],
                    sa,
                    sb
                ),
            });
        }
        let out = bmm(self, rhs);
        let (a, b) = (self.detach(), rhs.detach());
        Ok(record_op("matmul_batched", &[self, rhs], out, move |g, need| {
            vec![
                need[0].then(|| bmm(g, &b.transpose_last2())),
                need[1].then(|| bmm(&a.transpose_last2(), g)),
            ]
        }))
    }
}

/// Unchecked batched matmul kernel (shapes assumed valid).
fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let rank = sa.len();
    let (m, k, n) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
    let batches: usize = sa[..rank - 2].iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); batches * m * n];
    for bi in 0..batches {
        let ao = bi * m * k;
        let bo = bi * k * n;
        let co = bi * m * n;
        for i in 0..m {
            let c_row = &mut out[co + i * n..co + (i + 1) * n];
            for kk in 0..k {
                let av = ad[ao + i * k + kk];
                let b_row = &bd[bo + kk * n..bo + (kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    let mut shape = sa.to_vec();
    shape[rank - 1] = n;
    Tensor::from_vec(shape, out)
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn data_arc(&self) -> std::sync::Arc<Vec<T>> {
        std::sync::Arc::clone(&self.data)
    }
}
