//! Differentiable operator library.
//!
//! Every operation takes the tape explicitly, computes its forward result
//! eagerly, and records a backward rule when any input is tracked. Binary
//! operations require identical shapes; there is no implicit broadcasting.

mod conv;
mod loss;
mod norm;

pub use conv::{conv2d, conv3d, pool, pool2d, ConvSpec, PadModeT, PoolKind, PoolSpec};
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use norm::{batchnorm_eval, batchnorm_train, BatchStats};

use crate::error::{Error, Result};
use crate::tape::{GradSink, Tape};
use crate::tensor::{strides, Scalar, Tensor};

// ---------------------------------------------------------------------------
// gemm kernels (64-bit accumulation)
// ---------------------------------------------------------------------------

/// out[m,n] = a[m,k] * b[k,n]
pub(crate) fn gemm_nn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 8 <= n {
            let mut acc = [0f64; 8];
            for (kk, av) in arow.iter().enumerate() {
                let av = av.to_f64();
                let b8 = &b[kk * n + j..kk * n + j + 8];
                for t in 0..8 {
                    acc[t] += av * b8[t].to_f64();
                }
            }
            for t in 0..8 {
                orow[j + t] = E::from_f64(acc[t]);
            }
            j += 8;
        }
        while j < n {
            let mut acc = 0f64;
            for (kk, av) in arow.iter().enumerate() {
                acc += av.to_f64() * b[kk * n + j].to_f64();
            }
            orow[j] = E::from_f64(acc);
            j += 1;
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub(crate) fn gemm_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0f64;
            for kk in 0..k {
                acc += arow[kk].to_f64() * brow[kk].to_f64();
            }
            out[i * n + j] = E::from_f64(acc);
        }
    }
}

/// out[m,n] = a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    // transpose a into scratch, then nn
    let mut at = vec![E::ZERO; m * k];
    for kk in 0..k {
        for i in 0..m {
            at[i * k + kk] = a[kk * m + i];
        }
    }
    gemm_nn(m, k, n, &at, b, out);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

fn same_shape<E: Scalar>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    if a.node().is_none() && b.node().is_none() {
        return Ok(out);
    }
    let (na, nb) = (a.node(), b.node());
    let id = tape.record(move |g, sink| {
        if let Some(na) = na {
            sink.accumulate(na, g);
        }
        if let Some(nb) = nb {
            sink.accumulate(nb, g);
        }
    });
    Ok(out.with_node(id))
}

pub fn sub<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    if a.node().is_none() && b.node().is_none() {
        return Ok(out);
    }
    let (na, nb) = (a.node(), b.node());
    let id = tape.record(move |g, sink| {
        if let Some(na) = na {
            sink.accumulate(na, g);
        }
        if let Some(nb) = nb {
            sink.accumulate_owned(nb, g.iter().map(|&x| -x).collect());
        }
    });
    Ok(out.with_node(id))
}

pub fn mul<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    if a.node().is_none() && b.node().is_none() {
        return Ok(out);
    }
    let (na, nb) = (a.node(), b.node());
    let (ad, bd) = (a.clone(), b.clone());
    let id = tape.record(move |g, sink| {
        if let Some(na) = na {
            sink.accumulate_owned(na, g.iter().zip(bd.data()).map(|(&g, &y)| g * y).collect());
        }
        if let Some(nb) = nb {
            sink.accumulate_owned(nb, g.iter().zip(ad.data()).map(|(&g, &x)| g * x).collect());
        }
    });
    Ok(out.with_node(id))
}

pub fn scale<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
    let data = a.data().iter().map(|&x| x * c).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let id = tape.record(move |g, sink| {
        sink.accumulate_owned(na, g.iter().map(|&x| x * c).collect());
    });
    Ok(out.with_node(id))
}

pub fn relu<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let data = a.data().iter().map(|&x| x.max_s(E::ZERO)).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let ad = a.clone();
    let id = tape.record(move |g, sink| {
        let contrib = g
            .iter()
            .zip(ad.data())
            .map(|(&g, &x)| if x > E::ZERO { g } else { E::ZERO })
            .collect();
        sink.accumulate_owned(na, contrib);
    });
    Ok(out.with_node(id))
}

pub fn sigmoid<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let data: Vec<E> = a
        .data()
        .iter()
        .map(|&x| E::ONE / (E::ONE + (-x).exp()))
        .collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let y = out.clone();
    let id = tape.record(move |g, sink| {
        let contrib = g
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| g * y * (E::ONE - y))
            .collect();
        sink.accumulate_owned(na, contrib);
    });
    Ok(out.with_node(id))
}

pub fn tanh<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let data: Vec<E> = a.data().iter().map(|&x| x.tanh()).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let y = out.clone();
    let id = tape.record(move |g, sink| {
        let contrib = g
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| g * (E::ONE - y * y))
            .collect();
        sink.accumulate_owned(na, contrib);
    });
    Ok(out.with_node(id))
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// Matrix product `[M,K] x [K,N] -> [M,N]` with 64-bit accumulation.
pub fn matmul<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::Shape(format!(
            "matmul: incompatible shapes {ash:?} x {bsh:?}"
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut data = vec![E::ZERO; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut data);
    let out = Tensor::from_vec(&[m, n], data)?;
    if a.node().is_none() && b.node().is_none() {
        return Ok(out);
    }
    let (na, nb) = (a.node(), b.node());
    let (ad, bd) = (a.clone(), b.clone());
    let id = tape.record(move |g, sink| {
        if let Some(na) = na {
            // dA = G * B^T
            let mut ga = vec![E::ZERO; m * k];
            gemm_nt(m, n, k, g, bd.data(), &mut ga);
            sink.accumulate_owned(na, ga);
        }
        if let Some(nb) = nb {
            // dB = A^T * G
            let mut gb = vec![E::ZERO; k * n];
            gemm_tn(k, m, n, ad.data(), g, &mut gb);
            sink.accumulate_owned(nb, gb);
        }
    });
    Ok(out.with_node(id))
}

/// Affine map `y = x w^T + bias` with `x: [B,D]`, `w: [V,D]`, `bias: [V]`.
pub fn linear<E: Scalar>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::Shape(format!(
            "linear: incompatible shapes x{xs:?} w{ws:?}"
        )));
    }
    let (bsz, d, v) = (xs[0], xs[1], ws[0]);
    if let Some(b) = bias {
        if b.shape() != [v] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, want [{v}]",
                b.shape()
            )));
        }
    }
    let mut data = vec![E::ZERO; bsz * v];
    gemm_nt(bsz, d, v, x.data(), w.data(), &mut data);
    if let Some(b) = bias {
        for r in 0..bsz {
            for j in 0..v {
                data[r * v + j] = data[r * v + j] + b.data()[j];
            }
        }
    }
    let out = Tensor::from_vec(&[bsz, v], data)?;
    let (nx, nw) = (x.node(), w.node());
    let nb = bias.and_then(|b| b.node());
    if nx.is_none() && nw.is_none() && nb.is_none() {
        return Ok(out);
    }
    let (xd, wd) = (x.clone(), w.clone());
    let id = tape.record(move |g, sink| {
        if let Some(nx) = nx {
            // dX = G * W  ([B,V] x [V,D])
            let mut gx = vec![E::ZERO; bsz * d];
            gemm_nn(bsz, v, d, g, wd.data(), &mut gx);
            sink.accumulate_owned(nx, gx);
        }
        if let Some(nw) = nw {
            // dW = G^T * X  ([V,B] x [B,D])
            let mut gw = vec![E::ZERO; v * d];
            gemm_tn(v, bsz, d, g, xd.data(), &mut gw);
            sink.accumulate_owned(nw, gw);
        }
        if let Some(nb) = nb {
            let mut gb = vec![0f64; v];
            for r in 0..bsz {
                for j in 0..v {
                    gb[j] += g[r * v + j].to_f64();
                }
            }
            sink.accumulate_owned(nb, gb.into_iter().map(E::from_f64).collect());
        }
    });
    Ok(out.with_node(id))
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let out = a.reshaped(shape)?;
    let Some(na) = a.node() else { return Ok(out) };
    let id = tape.record(move |g, sink| sink.accumulate(na, g));
    Ok(out.with_node(id))
}

fn permute_copy<E: Scalar>(shape: &[usize], data: &[E], perm: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let old_strides = strides(shape);
    let moved: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
    let mut out = vec![data[0]; data.len()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment over the new shape
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += moved[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            src -= moved[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

/// Axis permutation, e.g. `perm = [0,2,1,3,4]` swaps axes 1 and 2.
pub fn permute<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
    let rank = a.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!(
            "permute: invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let (new_shape, data) = permute_copy(a.shape(), a.data(), perm);
    let out = Tensor::from_vec(&new_shape, data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let mut inv = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let out_shape = new_shape;
    let id = tape.record(move |g, sink| {
        let (_, gperm) = permute_copy(&out_shape, g, &inv);
        sink.accumulate_owned(na, gperm);
    });
    Ok(out.with_node(id))
}

/// Contiguous slice `[start, start+len)` along one axis.
pub fn narrow<E: Scalar>(
    tape: &mut Tape<E>,
    a: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    let shape = a.shape();
    if axis >= shape.len() || start + len > shape[axis] || len == 0 {
        return Err(Error::Shape(format!(
            "narrow: axis {axis} range {start}..{} out of {:?}",
            start + len,
            shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        data.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    let out = Tensor::from_vec(&new_shape, data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let total = a.numel();
    let id = tape.record(move |g, sink| {
        let mut ga = vec![E::ZERO; total];
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        sink.accumulate_owned(na, ga);
    });
    Ok(out.with_node(id))
}

/// Concatenation of two tensors along `axis`; all other extents must match.
pub fn concat<E: Scalar>(
    tape: &mut Tape<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    axis: usize,
) -> Result<Tensor<E>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != bsh.len() || axis >= ash.len() {
        return Err(Error::Shape(format!(
            "concat: rank mismatch {ash:?} vs {bsh:?} on axis {axis}"
        )));
    }
    for ax in 0..ash.len() {
        if ax != axis && ash[ax] != bsh[ax] {
            return Err(Error::Shape(format!(
                "concat: extent mismatch on axis {ax}: {ash:?} vs {bsh:?}"
            )));
        }
    }
    let outer: usize = ash[..axis].iter().product();
    let inner: usize = ash[axis + 1..].iter().product();
    let (da, db) = (ash[axis], bsh[axis]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * da * inner..(o + 1) * da * inner]);
        data.extend_from_slice(&b.data()[o * db * inner..(o + 1) * db * inner]);
    }
    let mut new_shape = ash.to_vec();
    new_shape[axis] = da + db;
    let out = Tensor::from_vec(&new_shape, data)?;
    if a.node().is_none() && b.node().is_none() {
        return Ok(out);
    }
    let (na, nb) = (a.node(), b.node());
    let (an, bn) = (a.numel(), b.numel());
    let id = tape.record(move |g, sink| {
        if let Some(na) = na {
            let mut ga = Vec::with_capacity(an);
            for o in 0..outer {
                let base = o * (da + db) * inner;
                ga.extend_from_slice(&g[base..base + da * inner]);
            }
            sink.accumulate_owned(na, ga);
        }
        if let Some(nb) = nb {
            let mut gb = Vec::with_capacity(bn);
            for o in 0..outer {
                let base = o * (da + db) * inner + da * inner;
                gb.extend_from_slice(&g[base..base + db * inner]);
            }
            sink.accumulate_owned(nb, gb);
        }
    });
    Ok(out.with_node(id))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Sum of all elements into a scalar (64-bit accumulation).
pub fn sum_all<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let s: f64 = a.data().iter().map(|x| x.to_f64()).sum();
    let out = Tensor::scalar(E::from_f64(s));
    let Some(na) = a.node() else { return Ok(out) };
    let n = a.numel();
    let id = tape.record(move |g, sink| {
        sink.accumulate_owned(na, vec![g[0]; n]);
    });
    Ok(out.with_node(id))
}

/// Arithmetic mean along the time axis: `[T,D] -> [D]` or `[B,T,D] -> [B,D]`.
pub fn temporal_mean<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = a.shape();
    let (bsz, t, d, batched) = match shape.len() {
        2 => (1usize, shape[0], shape[1], false),
        3 => (shape[0], shape[1], shape[2], true),
        _ => {
            return Err(Error::Shape(format!(
                "temporal_mean: want rank 2 or 3, got {shape:?}"
            )))
        }
    };
    let mut data = vec![E::ZERO; bsz * d];
    for bi in 0..bsz {
        for j in 0..d {
            let mut acc = 0f64;
            for ti in 0..t {
                acc += a.data()[(bi * t + ti) * d + j].to_f64();
            }
            data[bi * d + j] = E::from_f64(acc / t as f64);
        }
    }
    let out_shape: Vec<usize> = if batched { vec![bsz, d] } else { vec![d] };
    let out = Tensor::from_vec(&out_shape, data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let inv_t = E::from_f64(1.0 / t as f64);
    let id = tape.record(move |g, sink| {
        let mut ga = vec![E::ZERO; bsz * t * d];
        for bi in 0..bsz {
            for ti in 0..t {
                for j in 0..d {
                    ga[(bi * t + ti) * d + j] = g[bi * d + j] * inv_t;
                }
            }
        }
        sink.accumulate_owned(na, ga);
    });
    Ok(out.with_node(id))
}

/// Mean over the trailing two (spatial) axes: `[..., H, W] -> [...]`.
pub fn mean_last2<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = a.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!(
            "mean_last2: want rank >= 3, got {shape:?}"
        )));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let outer = a.numel() / hw;
    let mut data = vec![E::ZERO; outer];
    for (o, slot) in data.iter_mut().enumerate() {
        let mut acc = 0f64;
        for x in &a.data()[o * hw..(o + 1) * hw] {
            acc += x.to_f64();
        }
        *slot = E::from_f64(acc / hw as f64);
    }
    let out = Tensor::from_vec(&shape[..shape.len() - 2], data)?;
    let Some(na) = a.node() else { return Ok(out) };
    let inv = E::from_f64(1.0 / hw as f64);
    let id = tape.record(move |g, sink| {
        let mut ga = vec![E::ZERO; outer * hw];
        for o in 0..outer {
            let gv = g[o] * inv;
            for slot in &mut ga[o * hw..(o + 1) * hw] {
                *slot = gv;
            }
        }
        sink.accumulate_owned(na, ga);
    });
    Ok(out.with_node(id))
}
