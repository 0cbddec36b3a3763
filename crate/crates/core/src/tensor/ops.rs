//! Differentiable operations. Each op validates shapes, computes the forward
//! value, and (when any input tracks gradients) records a closure mapping the
//! upstream gradient to per-parent gradients.

use std::sync::Arc;

use super::{invalid, BackwardFn, Scalar, Tensor, TensorError};

pub(crate) const MAX_CONV_WIDTH: usize = 8;

// C[m,n] = a[m,k] · b[k,n] + beta·C
fn mm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// C[m,n] = a[m,k] · b[n,k]ᵀ + beta·C
fn mm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// C[m,n] = a[k,m]ᵀ · b[k,n] + beta·C
fn mm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn permute_raw<T: Copy>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

/// Elementwise activation kinds; gradient at the relu kink is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum; `rhs` may be a trailing-shape (suffix) broadcast.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if !is_suffix(self.shape(), rhs.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let rn = rhs.numel();
        let mut out = self.data().to_vec();
        for chunk in out.chunks_exact_mut(rn) {
            for (o, r) in chunk.iter_mut().zip(rhs.data()) {
                *o += *r;
            }
        }
        let (na, nb) = (self.tracks_grad(), rhs.tracks_grad());
        if !na && !nb {
            return Tensor::from_vec(self.shape().to_vec(), out);
        }
        let parents = vec![self.clone(), rhs.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let da = na.then(|| g.to_vec());
            let db = nb.then(|| {
                let mut acc = vec![T::zero(); rn];
                for chunk in g.chunks_exact(rn) {
                    for (a, gi) in acc.iter_mut().zip(chunk) {
                        *a += *gi;
                    }
                }
                acc
            });
            vec![da, db]
        });
        Ok(Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            parents,
            f,
        ))
    }

    /// Elementwise product; `rhs` may be a trailing-shape (suffix) broadcast.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if !is_suffix(self.shape(), rhs.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let rn = rhs.numel();
        let mut out = self.data().to_vec();
        for chunk in out.chunks_exact_mut(rn) {
            for (o, r) in chunk.iter_mut().zip(rhs.data()) {
                *o *= *r;
            }
        }
        let (na, nb) = (self.tracks_grad(), rhs.tracks_grad());
        if !na && !nb {
            return Tensor::from_vec(self.shape().to_vec(), out);
        }
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        let parents = vec![self.clone(), rhs.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let da = na.then(|| {
                let mut d = g.to_vec();
                for chunk in d.chunks_exact_mut(rn) {
                    for (o, b) in chunk.iter_mut().zip(b_data.iter()) {
                        *o *= *b;
                    }
                }
                d
            });
            let db = nb.then(|| {
                let mut acc = vec![T::zero(); rn];
                for (chunk, a_chunk) in g.chunks_exact(rn).zip(a_data.chunks_exact(rn)) {
                    for ((acc_i, gi), ai) in acc.iter_mut().zip(chunk).zip(a_chunk) {
                        *acc_i += *gi * *ai;
                    }
                }
                acc
            });
            vec![da, db]
        });
        Ok(Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            parents,
            f,
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v + c).collect();
        if !self.tracks_grad() {
            return Tensor::from_vec(self.shape().to_vec(), out).unwrap();
        }
        let f: BackwardFn<T> = Box::new(move |g| vec![Some(g.to_vec())]);
        Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            vec![self.clone()],
            f,
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        if !self.tracks_grad() {
            return Tensor::from_vec(self.shape().to_vec(), out).unwrap();
        }
        let f: BackwardFn<T> =
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())]);
        Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            vec![self.clone()],
            f,
        )
    }

    /// Matrix product `[..., k] · [k, n] -> [..., n]`; leading dimensions of
    /// the left operand are flattened into rows.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() < 2 || rhs.rank() != 2 {
            return Err(mismatch());
        }
        let k = *self.shape().last().unwrap();
        if rhs.shape()[0] != k {
            return Err(mismatch());
        }
        let n = rhs.shape()[1];
        let m = self.numel() / k;
        let mut out = vec![T::zero(); m * n];
        mm_nn(m, k, n, self.data(), rhs.data(), T::zero(), &mut out);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;

        let (na, nb) = (self.tracks_grad(), rhs.tracks_grad());
        if !na && !nb {
            return Tensor::from_vec(out_shape, out);
        }
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        let parents = vec![self.clone(), rhs.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let da = na.then(|| {
                let mut d = vec![T::zero(); m * k];
                mm_nt(m, n, k, g, &b_data, T::zero(), &mut d);
                d
            });
            let db = nb.then(|| {
                let mut d = vec![T::zero(); k * n];
                mm_tn(k, m, n, &a_data, g, T::zero(), &mut d);
                d
            });
            vec![da, db]
        });
        Ok(Tensor::node(out_shape, Arc::new(out), parents, f))
    }

    /// Batched matrix product `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() != 3 || rhs.rank() != 3 {
            return Err(mismatch());
        }
        let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if rhs.shape()[0] != bsz || rhs.shape()[1] != k {
            return Err(mismatch());
        }
        let n = rhs.shape()[2];
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            mm_nn(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                &rhs.data()[i * k * n..],
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let (na, nb) = (self.tracks_grad(), rhs.tracks_grad());
        if !na && !nb {
            return Tensor::from_vec(vec![bsz, m, n], out);
        }
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        let parents = vec![self.clone(), rhs.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let da = na.then(|| {
                let mut d = vec![T::zero(); bsz * m * k];
                for i in 0..bsz {
                    mm_nt(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        &b_data[i * k * n..],
                        T::zero(),
                        &mut d[i * m * k..],
                    );
                }
                d
            });
            let db = nb.then(|| {
                let mut d = vec![T::zero(); bsz * k * n];
                for i in 0..bsz {
                    mm_tn(
                        k,
                        m,
                        n,
                        &a_data[i * m * k..],
                        &g[i * m * n..],
                        T::zero(),
                        &mut d[i * k * n..],
                    );
                }
                d
            });
            vec![da, db]
        });
        Ok(Tensor::node(vec![bsz, m, n], Arc::new(out), parents, f))
    }

    /// Batched product with transposed right operand:
    /// `[B,m,k] · [B,n,k]ᵀ -> [B,m,n]`.
    pub fn bmm_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm_nt",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() != 3 || rhs.rank() != 3 {
            return Err(mismatch());
        }
        let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if rhs.shape()[0] != bsz || rhs.shape()[2] != k {
            return Err(mismatch());
        }
        let n = rhs.shape()[1];
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            mm_nt(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                &rhs.data()[i * n * k..],
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let (na, nb) = (self.tracks_grad(), rhs.tracks_grad());
        if !na && !nb {
            return Tensor::from_vec(vec![bsz, m, n], out);
        }
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        let parents = vec![self.clone(), rhs.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let da = na.then(|| {
                let mut d = vec![T::zero(); bsz * m * k];
                for i in 0..bsz {
                    mm_nn(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        &b_data[i * n * k..],
                        T::zero(),
                        &mut d[i * m * k..],
                    );
                }
                d
            });
            let db = nb.then(|| {
                let mut d = vec![T::zero(); bsz * n * k];
                for i in 0..bsz {
                    mm_tn(
                        n,
                        m,
                        k,
                        &g[i * m * n..],
                        &a_data[i * m * k..],
                        T::zero(),
                        &mut d[i * n * k..],
                    );
                }
                d
            });
            vec![da, db]
        });
        Ok(Tensor::node(vec![bsz, m, n], Arc::new(out), parents, f))
    }

    /// Same data, new shape; storage is shared, not copied.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>, TensorError> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        if !self.tracks_grad() {
            return Ok(Tensor::alloc(
                shape,
                self.data_arc(),
                false,
                Vec::new(),
                None,
            ));
        }
        let f: BackwardFn<T> = Box::new(move |g| vec![Some(g.to_vec())]);
        Ok(Tensor::node(shape, self.data_arc(), vec![self.clone()], f))
    }

    /// Reorder axes, materializing the result.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(
                "permute",
                format!("axes {axes:?} are not a permutation of 0..{rank}"),
            ));
        }
        let (out_shape, out) = permute_raw(self.shape(), self.data(), axes);
        if !self.tracks_grad() {
            return Tensor::from_vec(out_shape, out);
        }
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let saved_shape = out_shape.clone();
        let f: BackwardFn<T> = Box::new(move |g| {
            let (_, d) = permute_raw(&saved_shape, g, &inverse);
            vec![Some(d)]
        });
        Ok(Tensor::node(out_shape, Arc::new(out), vec![self.clone()], f))
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>, TensorError> {
        if self.rank() == 0 {
            return Err(invalid("softmax_lastdim", "rank-0 input"));
        }
        let dim = *self.shape().last().unwrap();
        let mut out = vec![T::zero(); self.numel()];
        for (row, o) in self.data().chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                let e = (v - m).exp();
                *oi = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for oi in o.iter_mut() {
                *oi *= inv;
            }
        }
        if !self.tracks_grad() {
            return Tensor::from_vec(self.shape().to_vec(), out);
        }
        let out_arc = Arc::new(out);
        let y = out_arc.clone();
        let f: BackwardFn<T> = Box::new(move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ((g_row, y_row), dx_row) in g
                .chunks_exact(dim)
                .zip(y.chunks_exact(dim))
                .zip(dx.chunks_exact_mut(dim))
            {
                let mut dot = T::zero();
                for (gi, yi) in g_row.iter().zip(y_row) {
                    dot += *gi * *yi;
                }
                for ((di, gi), yi) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                    *di = *yi * (*gi - dot);
                }
            }
            vec![Some(dx)]
        });
        Ok(Tensor::node(
            self.shape().to_vec(),
            out_arc,
            vec![self.clone()],
            f,
        ))
    }

    /// Normalize each last-dim slice to mean 0 / population variance 1,
    /// then apply the learned affine `gain ⊙ x̂ + bias`.
    pub fn layer_norm(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>, TensorError> {
        let d = *self.shape().last().unwrap_or(&0);
        if self.rank() == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let df = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let x_row = &self.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in x_row {
                mean += v;
            }
            mean = mean / df;
            let mut var = T::zero();
            for &v in x_row {
                let c = v - mean;
                var += c * c;
            }
            var = var / df;
            let r_inv = T::one() / (var + eps).sqrt();
            inv_std[r] = r_inv;
            for i in 0..d {
                let h = (x_row[i] - mean) * r_inv;
                xhat[r * d + i] = h;
                out[r * d + i] = gain.data()[i] * h + bias.data()[i];
            }
        }
        let (nx, ng, nb) = (self.tracks_grad(), gain.tracks_grad(), bias.tracks_grad());
        if !nx && !ng && !nb {
            return Tensor::from_vec(self.shape().to_vec(), out);
        }
        let xhat = Arc::new(xhat);
        let gain_data = gain.data_arc();
        let parents = vec![self.clone(), gain.clone(), bias.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let dx = nx.then(|| {
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let g_row = &g[r * d..(r + 1) * d];
                    let h_row = &xhat[r * d..(r + 1) * d];
                    let mut mean_gg = T::zero();
                    let mut mean_ggh = T::zero();
                    for i in 0..d {
                        let gg = g_row[i] * gain_data[i];
                        mean_gg += gg;
                        mean_ggh += gg * h_row[i];
                    }
                    mean_gg = mean_gg / df;
                    mean_ggh = mean_ggh / df;
                    for i in 0..d {
                        let gg = g_row[i] * gain_data[i];
                        dx[r * d + i] = inv_std[r] * (gg - mean_gg - h_row[i] * mean_ggh);
                    }
                }
                dx
            });
            let dg = ng.then(|| {
                let mut dg = vec![T::zero(); d];
                for (g_row, h_row) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for i in 0..d {
                        dg[i] += g_row[i] * h_row[i];
                    }
                }
                dg
            });
            let db = nb.then(|| {
                let mut db = vec![T::zero(); d];
                for g_row in g.chunks_exact(d) {
                    for i in 0..d {
                        db[i] += g_row[i];
                    }
                }
                db
            });
            vec![dx, dg, db]
        });
        Ok(Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            parents,
            f,
        ))
    }

    /// Length-preserving 1-d convolution over `[L,E]` or `[B,L,E]` with
    /// filters `[w,E,F]`; zero padding floor((w−1)/2) left, ceil((w−1)/2) right.
    pub fn conv1d_same(&self, filters: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (bsz, len, e_in) = match self.rank() {
            2 => (1, self.shape()[0], self.shape()[1]),
            3 => (self.shape()[0], self.shape()[1], self.shape()[2]),
            _ => {
                return Err(invalid(
                    "conv1d_same",
                    format!("input rank {} not 2 or 3", self.rank()),
                ))
            }
        };
        if filters.rank() != 3 {
            return Err(invalid("conv1d_same", "filters must be [width, E, F]"));
        }
        let (w, fe, fc) = (
            filters.shape()[0],
            filters.shape()[1],
            filters.shape()[2],
        );
        if w < 1 || w > MAX_CONV_WIDTH {
            return Err(TensorError::ConvWidth(w));
        }
        if fe != e_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_same",
                lhs: self.shape().to_vec(),
                rhs: filters.shape().to_vec(),
            });
        }
        let pad_left = (w - 1) / 2;
        let cols = w * e_in;
        let im2col = move |x_row: &[T], col: &mut [T]| {
            col.iter_mut().for_each(|c| *c = T::zero());
            for l in 0..len {
                for dw in 0..w {
                    let src = l as isize + dw as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < len {
                        let src = src as usize;
                        col[l * cols + dw * e_in..l * cols + (dw + 1) * e_in]
                            .copy_from_slice(&x_row[src * e_in..(src + 1) * e_in]);
                    }
                }
            }
        };

        let mut out = vec![T::zero(); bsz * len * fc];
        let mut col = vec![T::zero(); len * cols];
        for i in 0..bsz {
            im2col(&self.data()[i * len * e_in..(i + 1) * len * e_in], &mut col);
            mm_nn(
                len,
                cols,
                fc,
                &col,
                filters.data(),
                T::zero(),
                &mut out[i * len * fc..],
            );
        }
        let out_shape = if self.rank() == 2 {
            vec![len, fc]
        } else {
            vec![bsz, len, fc]
        };
        let (nx, nf) = (self.tracks_grad(), filters.tracks_grad());
        if !nx && !nf {
            return Tensor::from_vec(out_shape, out);
        }
        let x_data = self.data_arc();
        let f_data = filters.data_arc();
        let parents = vec![self.clone(), filters.clone()];
        let f: BackwardFn<T> = Box::new(move |g| {
            let mut col = vec![T::zero(); len * cols];
            let mut dx = nx.then(|| vec![T::zero(); bsz * len * e_in]);
            let mut df = nf.then(|| vec![T::zero(); cols * fc]);
            let mut dcol = vec![T::zero(); len * cols];
            for i in 0..bsz {
                let g_row = &g[i * len * fc..(i + 1) * len * fc];
                if let Some(df) = df.as_mut() {
                    im2col(&x_data[i * len * e_in..(i + 1) * len * e_in], &mut col);
                    mm_tn(cols, len, fc, &col, g_row, T::one(), df);
                }
                if let Some(dx) = dx.as_mut() {
                    mm_nt(len, fc, cols, g_row, &f_data, T::zero(), &mut dcol);
                    let dx_row = &mut dx[i * len * e_in..(i + 1) * len * e_in];
                    for l in 0..len {
                        for dw in 0..w {
                            let src = l as isize + dw as isize - pad_left as isize;
                            if src >= 0 && (src as usize) < len {
                                let src = src as usize;
                                for e in 0..e_in {
                                    dx_row[src * e_in + e] += dcol[l * cols + dw * e_in + e];
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, df]
        });
        Ok(Tensor::node(out_shape, Arc::new(out), parents, f))
    }

    /// Max over disjoint windows of `stride` along the length axis of `[L,C]`
    /// or `[B,L,C]`; gradient routes to the first maximal element of a window.
    pub fn maxpool1d(&self, stride: usize) -> Result<Tensor<T>, TensorError> {
        let (bsz, len, ch) = match self.rank() {
            2 => (1, self.shape()[0], self.shape()[1]),
            3 => (self.shape()[0], self.shape()[1], self.shape()[2]),
            _ => {
                return Err(invalid(
                    "maxpool1d",
                    format!("input rank {} not 2 or 3", self.rank()),
                ))
            }
        };
        if stride == 0 {
            return Err(invalid("maxpool1d", "stride 0"));
        }
        if len % stride != 0 {
            return Err(TensorError::NotDivisible {
                op: "maxpool1d",
                len,
                stride,
            });
        }
        let out_len = len / stride;
        let mut out = vec![T::zero(); bsz * out_len * ch];
        let mut argmax = vec![0usize; out.len()];
        let data = self.data();
        for i in 0..bsz {
            for j in 0..out_len {
                for c in 0..ch {
                    let mut best_idx = i * len * ch + (j * stride) * ch + c;
                    let mut best = data[best_idx];
                    for l in j * stride + 1..(j + 1) * stride {
                        let idx = i * len * ch + l * ch + c;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = i * out_len * ch + j * ch + c;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out_shape = if self.rank() == 2 {
            vec![out_len, ch]
        } else {
            vec![bsz, out_len, ch]
        };
        if !self.tracks_grad() {
            return Tensor::from_vec(out_shape, out);
        }
        let in_numel = self.numel();
        let f: BackwardFn<T> = Box::new(move |g| {
            let mut d = vec![T::zero(); in_numel];
            for (gi, &src) in g.iter().zip(&argmax) {
                d[src] += *gi;
            }
            vec![Some(d)]
        });
        Ok(Tensor::node(out_shape, Arc::new(out), vec![self.clone()], f))
    }

    /// Elementwise nonlinearity with its gradient rule.
    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        let out: Vec<T> = match kind {
            Activation::Relu => self
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Activation::Sigmoid => self.data().iter().map(|&v| stable_sigmoid(v)).collect(),
            Activation::Tanh => self.data().iter().map(|&v| v.tanh()).collect(),
        };
        if !self.tracks_grad() {
            return Tensor::from_vec(self.shape().to_vec(), out).unwrap();
        }
        let out_arc = Arc::new(out);
        let f: BackwardFn<T> = match kind {
            Activation::Relu => {
                let x = self.data_arc();
                Box::new(move |g| {
                    let d = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    vec![Some(d)]
                })
            }
            Activation::Sigmoid => {
                let y = out_arc.clone();
                Box::new(move |g| {
                    let d = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect();
                    vec![Some(d)]
                })
            }
            Activation::Tanh => {
                let y = out_arc.clone();
                Box::new(move |g| {
                    let d = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect();
                    vec![Some(d)]
                })
            }
        };
        Tensor::node(self.shape().to_vec(), out_arc, vec![self.clone()], f)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.activation(Activation::Tanh)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        if !self.tracks_grad() {
            return Tensor::scalar(s);
        }
        let n = self.numel();
        let f: BackwardFn<T> = Box::new(move |g| vec![Some(vec![g[0]; n])]);
        Tensor::node(Vec::new(), Arc::new(vec![s]), vec![self.clone()], f)
    }

    /// Inverted dropout: keeps elements with probability `1−rate` scaled by
    /// `1/(1−rate)`. Rate 0 is the identity; evaluation passes skip the call.
    pub fn dropout<R: rand::Rng>(&self, rate: f64, rng: &mut R) -> Result<Tensor<T>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        if !self.tracks_grad() {
            return Tensor::from_vec(self.shape().to_vec(), out);
        }
        let f: BackwardFn<T> = Box::new(move |g| {
            let d = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
            vec![Some(d)]
        });
        Ok(Tensor::node(
            self.shape().to_vec(),
            Arc::new(out),
            vec![self.clone()],
            f,
        ))
    }
}

/// Concatenate tensors along the last dimension.
pub fn concat_last<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let Some(first) = parts.first() else {
        return Err(invalid("concat_last", "empty input list"));
    };
    let rank = first.rank();
    if rank == 0 {
        return Err(invalid("concat_last", "rank-0 input"));
    }
    let prefix = &first.shape()[..rank - 1];
    let mut lasts = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != rank || &p.shape()[..rank - 1] != prefix {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        lasts.push(*p.shape().last().unwrap());
    }
    let out_last: usize = lasts.iter().sum();
    let rows: usize = prefix.iter().product();
    let mut out = Vec::with_capacity(rows * out_last);
    for r in 0..rows {
        for (p, &d) in parts.iter().zip(&lasts) {
            out.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    let mut out_shape = prefix.to_vec();
    out_shape.push(out_last);

    let needs: Vec<bool> = parts.iter().map(|p| p.tracks_grad()).collect();
    if !needs.iter().any(|&b| b) {
        return Tensor::from_vec(out_shape, out);
    }
    let parents: Vec<Tensor<T>> = parts.to_vec();
    let lasts_cl = lasts.clone();
    let f: BackwardFn<T> = Box::new(move |g| {
        let mut grads: Vec<Option<Vec<T>>> = needs
            .iter()
            .zip(&lasts_cl)
            .map(|(&need, &d)| need.then(|| Vec::with_capacity(rows * d)))
            .collect();
        for r in 0..rows {
            let mut off = r * out_last;
            for (slot, &d) in grads.iter_mut().zip(&lasts_cl) {
                if let Some(v) = slot.as_mut() {
                    v.extend_from_slice(&g[off..off + d]);
                }
                off += d;
            }
        }
        grads
    });
    Ok(Tensor::node(out_shape, Arc::new(out), parents, f))
}

/// Gather rows of `table[V,E]` at `ids`, giving `[len(ids), E]`; the gradient
/// scatter-adds back into the table rows.
pub fn embedding_lookup<T: Scalar>(
    table: &Tensor<T>,
    ids: &[u32],
) -> Result<Tensor<T>, TensorError> {
    if table.rank() != 2 {
        return Err(invalid("embedding_lookup", "table must be [V, E]"));
    }
    if ids.is_empty() {
        return Err(invalid("embedding_lookup", "empty id sequence"));
    }
    let (v, e) = (table.shape()[0], table.shape()[1]);
    for &id in ids {
        if id as usize >= v {
            return Err(TensorError::IdOutOfRange { id, vocab: v });
        }
    }
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        out.extend_from_slice(&table.data()[id as usize * e..(id as usize + 1) * e]);
    }
    let out_shape = vec![ids.len(), e];
    if !table.tracks_grad() {
        return Tensor::from_vec(out_shape, out);
    }
    let ids: Vec<u32> = ids.to_vec();
    let table_numel = table.numel();
    let f: BackwardFn<T> = Box::new(move |g| {
        let mut d = vec![T::zero(); table_numel];
        for (i, &id) in ids.iter().enumerate() {
            let dst = &mut d[id as usize * e..(id as usize + 1) * e];
            for (a, b) in dst.iter_mut().zip(&g[i * e..(i + 1) * e]) {
                *a += *b;
            }
        }
        vec![Some(d)]
    });
    Ok(Tensor::node(out_shape, Arc::new(out), vec![table.clone()], f))
}

/// Fused masked cross-entropy with label smoothing, summed over rows.
///
/// `logits` is `[N,V]`; row `r` contributes `weights[r] ·
/// (−(1−ε)·log p[targets[r]] − ε/K · Σ_{v≠excluded} log p[v])` where
/// `K = V−1`. The smoothing mass skips `excluded` (the padding class) and
/// includes the gold token, so the target distribution sums to one.
pub fn cross_entropy_smoothed<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    weights: &[T],
    smoothing: f64,
    excluded: u32,
) -> Result<Tensor<T>, TensorError> {
    if logits.rank() != 2 {
        return Err(invalid("cross_entropy", "logits must be [N, V]"));
    }
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n || weights.len() != n {
        return Err(invalid(
            "cross_entropy",
            format!("{n} rows but {} targets / {} weights", targets.len(), weights.len()),
        ));
    }
    if v < 2 {
        return Err(invalid("cross_entropy", "vocabulary must have ≥ 2 classes"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid(
            "cross_entropy",
            format!("smoothing {smoothing} outside [0,1)"),
        ));
    }
    let mut any_live = false;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if t as usize >= v {
            return Err(TensorError::IdOutOfRange { id: t, vocab: v });
        }
        if w != T::zero() {
            any_live = true;
            if t == excluded {
                return Err(invalid(
                    "cross_entropy",
                    format!("row {r}: weighted target is the excluded class {excluded}"),
                ));
            }
        }
    }
    if !any_live {
        return Err(invalid("cross_entropy", "all rows masked (all-pad batch)"));
    }

    let eps = T::from_f64(smoothing);
    let k_inv = T::from_f64(smoothing / (v - 1) as f64);
    let gold_w = T::one() - eps;
    let mut probs = vec![T::zero(); n * v];
    let mut total = T::zero();
    for r in 0..n {
        let row = &logits.data()[r * v..(r + 1) * v];
        let p_row = &mut probs[r * v..(r + 1) * v];
        let mut m = row[0];
        for &x in &row[1..] {
            if x > m {
                m = x;
            }
        }
        let mut sum = T::zero();
        for (pi, &x) in p_row.iter_mut().zip(row) {
            let e = (x - m).exp();
            *pi = e;
            sum += e;
        }
        let lse = m + sum.ln();
        let inv = T::one() / sum;
        for pi in p_row.iter_mut() {
            *pi *= inv;
        }
        let w = weights[r];
        if w == T::zero() {
            continue;
        }
        let gold = targets[r] as usize;
        let mut loss = -gold_w * (row[gold] - lse);
        if smoothing > 0.0 {
            let mut sum_logp = T::zero();
            for (c, &x) in row.iter().enumerate() {
                if c as u32 != excluded {
                    sum_logp += x - lse;
                }
            }
            loss = loss - k_inv * sum_logp;
        }
        total += w * loss;
    }

    if !logits.tracks_grad() {
        return Ok(Tensor::scalar(total));
    }
    let targets: Vec<u32> = targets.to_vec();
    let weights: Vec<T> = weights.to_vec();
    let f: BackwardFn<T> = Box::new(move |g| {
        let gs = g[0];
        let mut d = vec![T::zero(); n * v];
        for r in 0..n {
            let w = weights[r];
            if w == T::zero() {
                continue;
            }
            let scale = gs * w;
            let p_row = &probs[r * v..(r + 1) * v];
            let d_row = &mut d[r * v..(r + 1) * v];
            for (c, (di, &pi)) in d_row.iter_mut().zip(p_row).enumerate() {
                let mut q = if c as u32 == excluded { T::zero() } else { k_inv };
                if c == targets[r] as usize {
                    q += gold_w;
                }
                *di = scale * (pi - q);
            }
        }
        vec![Some(d)]
    });
    Ok(Tensor::node(
        Vec::new(),
        Arc::new(vec![total]),
        vec![logits.clone()],
        f,
    ))
}
