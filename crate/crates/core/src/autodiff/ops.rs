//! Primitive tensor operations. Every op records an analytic backward pass.

use super::{numel, BackFn, GradStore, Tensor};
use crate::error::{Error, Result};

/// Trailing-dimension broadcast: dimensions are aligned from the right and a
/// dimension of 1 stretches to match.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` when viewed in the broadcast coordinate space `out`.
/// Broadcast dimensions get stride 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..out.len() {
        if i >= pad && shape[i - pad] != 1 {
            s[i] = own[i - pad];
        }
    }
    s
}

/// Iterate all flat offsets of two broadcast operands over the output shape.
fn for_each_bcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coord = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..n {
        f(flat, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            coord[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coord[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            coord[d] = 0;
        }
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: fn(f64, f64) -> f64,
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    if a.shape() == b.shape() {
        for (i, (x, y)) in a.data().iter().zip(b.data().iter()).enumerate() {
            data[i] = fwd(*x, *y);
        }
    } else {
        let (ad, bd) = (a.data(), b.data());
        for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = fwd(ad[ia], bd[ib]);
        });
    }
    let requires = a.requires_grad() || b.requires_grad();
    let backward: Option<BackFn> = if requires {
        let (ac, bc) = (a.clone(), b.clone());
        let shape = out_shape.clone();
        Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
            let (ad, bd) = (ac.data(), bc.data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for_each_bcast(&shape, &sa, &sb, |o, ia, ib| {
                let g = grad_out[o];
                ga[ia] += g * dfa(ad[ia], bd[ib]);
                gb[ib] += g * dfb(ad[ia], bd[ib]);
            });
            if ac.requires_grad() {
                store.accumulate(ac.id(), &ga);
            }
            if bc.requires_grad() {
                store.accumulate(bc.id(), &gb);
            }
        }))
    } else {
        None
    };
    Ok(Tensor::new_node(
        out_shape,
        data,
        requires,
        vec![a.clone(), b.clone()],
        backward,
    ))
}

fn unary(
    a: &Tensor,
    fwd: impl Fn(f64) -> f64,
    // derivative as a function of (input, output)
    dfd: fn(f64, f64) -> f64,
) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| fwd(x)).collect();
    let requires = a.requires_grad();
    let backward: Option<BackFn> = if requires {
        let ac = a.clone();
        let out = data.clone();
        Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
            let g: Vec<f64> = ac
                .data()
                .iter()
                .zip(out.iter())
                .zip(grad_out)
                .map(|((x, y), go)| go * dfd(*x, *y))
                .collect();
            store.accumulate(ac.id(), &g);
        }))
    } else {
        None
    };
    Tensor::new_node(a.shape().to_vec(), data, requires, vec![a.clone()], backward)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh_op(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sqrt_op(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Multiply by a constant (no gradient through the constant).
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| c * x).collect();
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let g: Vec<f64> = grad_out.iter().map(|&v| v * c).collect();
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            requires,
            vec![self.clone()],
            backward,
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + c).collect();
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                store.accumulate(ac.id(), grad_out);
            }))
        } else {
            None
        };
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            requires,
            vec![self.clone()],
            backward,
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut data = vec![0.0; m * n];
        dgemm_rm(m, k, n, self.data(), other.data(), &mut data);
        let requires = self.requires_grad() || other.requires_grad();
        let backward: Option<BackFn> = if requires {
            let (ac, bc) = (self.clone(), other.clone());
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                if ac.requires_grad() {
                    // dA = dC @ B^T
                    let mut ga = vec![0.0; m * k];
                    dgemm_nt(m, n, k, grad_out, bc.data(), &mut ga);
                    store.accumulate(ac.id(), &ga);
                }
                if bc.requires_grad() {
                    // dB = A^T @ dC
                    let mut gb = vec![0.0; k * n];
                    dgemm_tn(k, m, n, ac.data(), grad_out, &mut gb);
                    store.accumulate(bc.id(), &gb);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            vec![m, n],
            data,
            requires,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// Batched matrix product over matching leading dimension:
    /// (b, m, k) @ (b, k, n) -> (b, m, n).
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (b, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; b * m * n];
        for i in 0..b {
            dgemm_rm(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let requires = self.requires_grad() || other.requires_grad();
        let backward: Option<BackFn> = if requires {
            let (ac, bc) = (self.clone(), other.clone());
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                if ac.requires_grad() {
                    let mut ga = vec![0.0; b * m * k];
                    for i in 0..b {
                        dgemm_nt(
                            m,
                            n,
                            k,
                            &grad_out[i * m * n..(i + 1) * m * n],
                            &bc.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    store.accumulate(ac.id(), &ga);
                }
                if bc.requires_grad() {
                    let mut gb = vec![0.0; b * k * n];
                    for i in 0..b {
                        dgemm_tn(
                            k,
                            m,
                            n,
                            &ac.data()[i * m * k..(i + 1) * m * k],
                            &grad_out[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    store.accumulate(bc.id(), &gb);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            vec![b, m, n],
            data,
            requires,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                store.accumulate(ac.id(), grad_out);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            shape.to_vec(),
            self.to_vec(),
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::invalid("transpose expects rank 2"));
        }
        self.permute(&[1, 0])
    }

    /// Generic axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute: invalid axes {axes:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = contiguous_strides(self.shape());
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let data = gather_strided(self.data(), &out_shape, &perm_strides);
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            let mut inverse = vec![0usize; rank];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let out_shape_c = out_shape.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let g_shape: Vec<usize> = inverse.iter().map(|&a| out_shape_c[a]).collect();
                let strides = contiguous_strides(&out_shape_c);
                let perm: Vec<usize> = inverse.iter().map(|&a| strides[a]).collect();
                let g = gather_strided(grad_out, &g_shape, &perm);
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Concatenate along `axis`.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::invalid("concat: no tensors"));
        }
        let rank = tensors[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("concat: axis {axis} out of range")));
        }
        for t in tensors {
            if t.shape().len() != rank
                || t.shape()
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != tensors[0].shape()[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: tensors[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for t in tensors {
            let ta = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * ta * inner..(o + 1) * ta * inner];
                let dst_start = (o * total_axis + offset) * inner;
                data[dst_start..dst_start + ta * inner].copy_from_slice(src);
            }
            offset += ta;
        }
        let requires = tensors.iter().any(|t| t.requires_grad());
        let backward: Option<BackFn> = if requires {
            let parts: Vec<Tensor> = tensors.to_vec();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut offset = 0;
                for t in &parts {
                    let ta = t.shape()[axis];
                    if t.requires_grad() {
                        let mut g = vec![0.0; t.numel()];
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            g[o * ta * inner..(o + 1) * ta * inner]
                                .copy_from_slice(&grad_out[src_start..src_start + ta * inner]);
                        }
                        store.accumulate(t.id(), &g);
                    }
                    offset += ta;
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            tensors.to_vec(),
            backward,
        ))
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || start >= end || end > self.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice: invalid range {start}..{end} on axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = end - start;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let ta = self.shape()[axis];
        let sa = end - start;
        let mut data = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let src_start = (o * ta + start) * inner;
            data[o * sa * inner..(o + 1) * sa * inner]
                .copy_from_slice(&self.data()[src_start..src_start + sa * inner]);
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for o in 0..outer {
                    let dst_start = (o * ta + start) * inner;
                    g[dst_start..dst_start + sa * inner]
                        .copy_from_slice(&grad_out[o * sa * inner..(o + 1) * sa * inner]);
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Gather rows (axis 0) at the given indices; indices may repeat.
    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::invalid("index_select_rows: scalar input"));
        }
        let rows = self.shape()[0];
        if indices.iter().any(|&i| i >= rows) {
            return Err(Error::invalid("index_select_rows: index out of range"));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        let mut data = vec![0.0; indices.len() * inner];
        for (o, &i) in indices.iter().enumerate() {
            data[o * inner..(o + 1) * inner]
                .copy_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            let idx = indices.to_vec();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        g[i * inner + j] += grad_out[o * inner + j];
                    }
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Sum of all elements (scalar output).
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let g = vec![grad_out[0]; ac.numel()];
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Tensor::new_node(vec![], vec![total], requires, vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("reduce: axis {axis} out of range")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let norm = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for j in 0..inner {
                    data[o * inner + j] += self.data()[base + j];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v *= norm;
            }
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for j in 0..inner {
                            g[base + j] = grad_out[o * inner + j] * norm;
                        }
                    }
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Max over `axis`; gradient flows to the (first) argmax positions.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("max_axis: axis {axis} out of range")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for j in 0..inner {
                    let v = self.data()[base + j];
                    if v > data[o * inner + j] {
                        data[o * inner + j] = v;
                        argmax[o * inner + j] = base + j;
                    }
                }
            }
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += grad_out[o];
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out_shape,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        self.masked_softmax_last(None)
    }

    /// Softmax over the last axis with an optional key mask. Masked entries
    /// are exactly 0 in the output and receive zero gradient. A fully masked
    /// row yields all zeros.
    pub fn masked_softmax_last(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("softmax: scalar input"));
        }
        let len = self.shape()[rank - 1];
        if let Some(m) = mask {
            if m.len() != len {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: self.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let rows = self.numel() / len;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let src = &self.data()[r * len..(r + 1) * len];
            let dst = &mut data[r * len..(r + 1) * len];
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..len {
                if mask.map_or(true, |m| m[j]) && src[j] > maxv {
                    maxv = src[j];
                }
            }
            if maxv == f64::NEG_INFINITY {
                continue; // fully masked row -> zeros
            }
            let mut denom = 0.0;
            for j in 0..len {
                if mask.map_or(true, |m| m[j]) {
                    let e = (src[j] - maxv).exp();
                    dst[j] = e;
                    denom += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= denom;
            }
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            let out = data.clone();
            let mask_c: Option<Vec<bool>> = mask.map(|m| m.to_vec());
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for r in 0..rows {
                    let y = &out[r * len..(r + 1) * len];
                    let go = &grad_out[r * len..(r + 1) * len];
                    let dot: f64 = (0..len)
                        .filter(|&j| mask_c.as_ref().map_or(true, |m| m[j]))
                        .map(|j| go[j] * y[j])
                        .sum();
                    for j in 0..len {
                        if mask_c.as_ref().map_or(true, |m| m[j]) {
                            g[r * len + j] = y[j] * (go[j] - dot);
                        }
                    }
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Layer normalization over the last axis (no affine terms).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("layer_norm: scalar input"));
        }
        let len = self.shape()[rank - 1];
        let rows = self.numel() / len;
        let mut data = vec![0.0; self.numel()];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let src = &self.data()[r * len..(r + 1) * len];
            let mean: f64 = src.iter().sum::<f64>() / len as f64;
            let var: f64 = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_stds[r] = inv;
            for j in 0..len {
                data[r * len + j] = (src[j] - mean) * inv;
            }
        }
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            let out = data.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let mut g = vec![0.0; ac.numel()];
                for r in 0..rows {
                    let y = &out[r * len..(r + 1) * len];
                    let go = &grad_out[r * len..(r + 1) * len];
                    let mean_go: f64 = go.iter().sum::<f64>() / len as f64;
                    let mean_goy: f64 =
                        go.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                    for j in 0..len {
                        g[r * len + j] = inv_stds[r] * (go[j] - mean_go - y[j] * mean_goy);
                    }
                }
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Broadcast to a larger shape (trailing-dimension alignment).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let strides = bcast_strides(self.shape(), &out);
        let zero = vec![0usize; out.len()];
        let mut data = vec![0.0; numel(&out)];
        let src = self.data();
        for_each_bcast(&out, &strides, &zero, |o, ia, _| {
            data[o] = src[ia];
        });
        let requires = self.requires_grad();
        let backward: Option<BackFn> = if requires {
            let ac = self.clone();
            let out_c = out.clone();
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let strides = bcast_strides(ac.shape(), &out_c);
                let zero = vec![0usize; out_c.len()];
                let mut g = vec![0.0; ac.numel()];
                for_each_bcast(&out_c, &strides, &zero, |o, ia, _| {
                    g[ia] += grad_out[o];
                });
                store.accumulate(ac.id(), &g);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            out,
            data,
            requires,
            vec![self.clone()],
            backward,
        ))
    }

    /// Differentiable symmetric Chamfer distance between (n, 3) and (m, 3)
    /// point matrices, each directional sum averaged over its source set.
    pub fn chamfer(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != 3 || sb[1] != 3 || sa[0] == 0 || sb[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "chamfer",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, m) = (sa[0], sb[0]);
        let (xd, yd) = (self.data(), other.data());
        let nn = |a: &[f64], na: usize, b: &[f64], nb: usize| -> (f64, Vec<usize>) {
            let mut total = 0.0;
            let mut idx = vec![0usize; na];
            for i in 0..na {
                let (ax, ay, az) = (a[3 * i], a[3 * i + 1], a[3 * i + 2]);
                let mut best = f64::INFINITY;
                for j in 0..nb {
                    let dx = ax - b[3 * j];
                    let dy = ay - b[3 * j + 1];
                    let dz = az - b[3 * j + 2];
                    let d = dx * dx + dy * dy + dz * dz;
                    if d < best {
                        best = d;
                        idx[i] = j;
                    }
                }
                total += best;
            }
            (total, idx)
        };
        let (sum_xy, nn_xy) = nn(xd, n, yd, m);
        let (sum_yx, nn_yx) = nn(yd, m, xd, n);
        let value = sum_xy / n as f64 + sum_yx / m as f64;
        let requires = self.requires_grad() || other.requires_grad();
        let backward: Option<BackFn> = if requires {
            let (ac, bc) = (self.clone(), other.clone());
            Some(Box::new(move |grad_out: &[f64], store: &mut GradStore| {
                let g = grad_out[0];
                let (xd, yd) = (ac.data(), bc.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gy = vec![0.0; yd.len()];
                let wx = 2.0 * g / n as f64;
                for (i, &j) in nn_xy.iter().enumerate() {
                    for k in 0..3 {
                        let d = xd[3 * i + k] - yd[3 * j + k];
                        gx[3 * i + k] += wx * d;
                        gy[3 * j + k] -= wx * d;
                    }
                }
                let wy = 2.0 * g / m as f64;
                for (j, &i) in nn_yx.iter().enumerate() {
                    for k in 0..3 {
                        let d = yd[3 * j + k] - xd[3 * i + k];
                        gy[3 * j + k] += wy * d;
                        gx[3 * i + k] -= wy * d;
                    }
                }
                if ac.requires_grad() {
                    store.accumulate(ac.id(), &gx);
                }
                if bc.requires_grad() {
                    store.accumulate(bc.id(), &gy);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(
            vec![],
            vec![value],
            requires,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }
}

fn gather_strided(src: &[f64], out_shape: &[usize], strides: &[usize]) -> Vec<f64> {
    let n = numel(out_shape);
    let mut data = vec![0.0; n];
    let zero = vec![0usize; out_shape.len()];
    for_each_bcast(out_shape, strides, &zero, |o, ia, _| {
        data[o] = src[ia];
    });
    data
}

// Row-major GEMM wrappers around matrixmultiply.

fn dgemm_rm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m,k) += a(m,n) @ b(k,n)^T, accumulating into c.
fn dgemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// c(k,n) += a(m,k)^T @ b(m,n), accumulating into c.
fn dgemm_tn(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
