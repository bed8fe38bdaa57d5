//! 2D/3D convolution and pooling via im2col + gemm.
//!
//! Convolution is cross-correlation (no kernel flip). Temporal padding is
//! zero by default; `PadModeT::Replicate` clamps the time index instead,
//! which is what the boring-video equivalence of inflated networks needs.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

use super::{gemm_nn, gemm_nt, gemm_tn, reshape};

/// Temporal padding mode. Spatial padding is always zero-fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadModeT {
    Zero,
    Replicate,
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (t, h, w) kernel extents; t = 1 for 2D convolution.
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub bias: bool,
    pub pad_mode_t: PadModeT,
}

impl ConvSpec {
    pub fn new3d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
            pad_mode_t: PadModeT::Zero,
        }
    }

    pub fn new2d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self::new3d(
            in_channels,
            out_channels,
            (1, kernel.0, kernel.1),
            (1, stride.0, stride.1),
            (0, padding.0, padding.1),
        )
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        ]
    }

    fn out_extent(ext: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
        let padded = ext + 2 * pad;
        if k > padded || k == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv/pool: kernel {k} stride {stride} invalid for padded extent {padded}"
            )));
        }
        Ok((padded - k) / stride + 1)
    }

    pub fn out_geom(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        Ok((
            Self::out_extent(t, self.padding.0, self.kernel.0, self.stride.0)?,
            Self::out_extent(h, self.padding.1, self.kernel.1, self.stride.1)?,
            Self::out_extent(w, self.padding.2, self.kernel.2, self.stride.2)?,
        ))
    }

    pub fn param_count(&self) -> usize {
        let w = self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2;
        w + if self.bias { self.out_channels } else { 0 }
    }
}

struct ConvGeom {
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
    k: usize,
    l: usize,
}

/// Unfolds one batch element `[Cin,T,H,W]` into columns `[K, L]` with
/// `K = Cin*kt*kh*kw` and `L = To*Ho*Wo`.
fn im2col<E: Scalar>(x: &[E], spec: &ConvSpec, g: &ConvGeom, cols: &mut [E]) {
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let replicate_t = spec.pad_mode_t == PadModeT::Replicate;
    debug_assert_eq!(cols.len(), g.k * g.l);
    let mut row = 0usize;
    for c in 0..g.cin {
        let xc = &x[c * g.t * g.h * g.w..(c + 1) * g.t * g.h * g.w];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * g.l..(row + 1) * g.l];
                    let mut li = 0usize;
                    for to in 0..g.to {
                        let ti = (to * st + dt) as isize - pt as isize;
                        let ti = if replicate_t {
                            Some(ti.clamp(0, g.t as isize - 1) as usize)
                        } else if ti < 0 || ti >= g.t as isize {
                            None
                        } else {
                            Some(ti as usize)
                        };
                        for ho in 0..g.ho {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            let valid_h = hi >= 0 && hi < g.h as isize;
                            for wo in 0..g.wo {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                dst[li] = match (ti, valid_h) {
                                    (Some(ti), true) if wi >= 0 && wi < g.w as isize => {
                                        xc[(ti * g.h + hi as usize) * g.w + wi as usize]
                                    }
                                    _ => E::ZERO,
                                };
                                li += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add of column gradients back to the input layout (transpose of
/// `im2col`). Accumulates in 64-bit.
fn col2im<E: Scalar>(gcols: &[E], spec: &ConvSpec, g: &ConvGeom, gx: &mut [f64]) {
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let replicate_t = spec.pad_mode_t == PadModeT::Replicate;
    let mut row = 0usize;
    for c in 0..g.cin {
        let base = c * g.t * g.h * g.w;
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &gcols[row * g.l..(row + 1) * g.l];
                    let mut li = 0usize;
                    for to in 0..g.to {
                        let ti = (to * st + dt) as isize - pt as isize;
                        let ti = if replicate_t {
                            Some(ti.clamp(0, g.t as isize - 1) as usize)
                        } else if ti < 0 || ti >= g.t as isize {
                            None
                        } else {
                            Some(ti as usize)
                        };
                        for ho in 0..g.ho {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            let valid_h = hi >= 0 && hi < g.h as isize;
                            for wo in 0..g.wo {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if let (Some(ti), true) = (ti, valid_h) {
                                    if wi >= 0 && wi < g.w as isize {
                                        let off =
                                            base + (ti * g.h + hi as usize) * g.w + wi as usize;
                                        gx[off] += src[li].to_f64();
                                    }
                                }
                                li += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3D convolution: `x [B,Cin,T,H,W]` -> `[B,Cout,T',H',W']`.
pub fn conv3d<E: Scalar>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    spec: &ConvSpec,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::Shape(format!("conv3d: want rank-5 input, got {xs:?}")));
    }
    if xs[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv3d: input has {} channels, spec wants {}",
            xs[1], spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv3d: weight shape {:?}, spec wants {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    if spec.bias != bias.is_some() {
        return Err(Error::Contract("conv3d: bias presence mismatch".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {:?}, want [{}]",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    let (bsz, t, h, w) = (xs[0], xs[2], xs[3], xs[4]);
    let (to, ho, wo) = spec.out_geom(t, h, w)?;
    let cout = spec.out_channels;
    let (kt, kh, kw) = spec.kernel;
    let geom = ConvGeom {
        cin: spec.in_channels,
        t,
        h,
        w,
        to,
        ho,
        wo,
        k: spec.in_channels * kt * kh * kw,
        l: to * ho * wo,
    };
    let xin = geom.cin * t * h * w;
    let xout = cout * geom.l;

    let mut cols = vec![E::ZERO; geom.k * geom.l];
    let mut data = vec![E::ZERO; bsz * xout];
    for bi in 0..bsz {
        im2col(&x.data()[bi * xin..(bi + 1) * xin], spec, &geom, &mut cols);
        let out_b = &mut data[bi * xout..(bi + 1) * xout];
        gemm_nn(cout, geom.k, geom.l, weights.data(), &cols, out_b);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut out_b[co * geom.l..(co + 1) * geom.l] {
                    *v = *v + bv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[bsz, cout, to, ho, wo], data)?;

    let (nx, nw) = (x.node(), weights.node());
    let nb = bias.and_then(|b| b.node());
    if nx.is_none() && nw.is_none() && nb.is_none() {
        return Ok(out);
    }
    let xd = x.clone();
    let wd = weights.clone();
    let spec_b = spec.clone();
    let id = tape.record(move |g, sink| {
        let geom = ConvGeom {
            cin: spec_b.in_channels,
            t,
            h,
            w,
            to,
            ho,
            wo,
            k: spec_b.in_channels * spec_b.kernel.0 * spec_b.kernel.1 * spec_b.kernel.2,
            l: to * ho * wo,
        };
        let mut cols = vec![E::ZERO; geom.k * geom.l];
        let mut gw_acc = if nw.is_some() {
            vec![0f64; cout * geom.k]
        } else {
            Vec::new()
        };
        let mut gx = if nx.is_some() {
            vec![0f64; bsz * xin]
        } else {
            Vec::new()
        };
        let mut tmp = vec![E::ZERO; cout.max(geom.k) * geom.l.max(geom.k)];
        for bi in 0..bsz {
            let g_b = &g[bi * xout..(bi + 1) * xout];
            if nw.is_some() || nx.is_some() {
                im2col(&xd.data()[bi * xin..(bi + 1) * xin], &spec_b, &geom, &mut cols);
            }
            if nw.is_some() {
                // dW += G_b [Cout,L] x cols^T [L,K]
                let gw_b = &mut tmp[..cout * geom.k];
                gemm_nt(cout, geom.l, geom.k, g_b, &cols, gw_b);
                for (acc, v) in gw_acc.iter_mut().zip(gw_b.iter()) {
                    *acc += v.to_f64();
                }
            }
            if nx.is_some() {
                // dCols = W^T [K,Cout] x G_b [Cout,L]
                let gcols = &mut tmp[..geom.k * geom.l];
                gemm_tn(geom.k, cout, geom.l, wd.data(), g_b, gcols);
                col2im(gcols, &spec_b, &geom, &mut gx[bi * xin..(bi + 1) * xin]);
            }
        }
        if let Some(nw) = nw {
            sink.accumulate_owned(nw, gw_acc.into_iter().map(E::from_f64).collect());
        }
        if let Some(nx) = nx {
            sink.accumulate_owned(nx, gx.into_iter().map(E::from_f64).collect());
        }
        if let Some(nb) = nb {
            let mut gb = vec![0f64; cout];
            for bi in 0..bsz {
                for co in 0..cout {
                    for v in &g[bi * xout + co * geom.l..bi * xout + (co + 1) * geom.l] {
                        gb[co] += v.to_f64();
                    }
                }
            }
            sink.accumulate_owned(nb, gb.into_iter().map(E::from_f64).collect());
        }
    });
    Ok(out.with_node(id))
}

/// 2D convolution: `x [B,C,H,W]`, a conv3d with temporal extent 1.
pub fn conv2d<E: Scalar>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    spec: &ConvSpec,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::Shape(format!("conv2d: want rank-4 input, got {xs:?}")));
    }
    if spec.kernel.0 != 1 || spec.stride.0 != 1 || spec.padding.0 != 0 {
        return Err(Error::Contract(
            "conv2d: temporal kernel/stride/padding must be 1/1/0".into(),
        ));
    }
    let x5 = reshape(tape, x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
    let y5 = conv3d(tape, &x5, spec, weights, bias)?;
    let ys = y5.shape().to_vec();
    reshape(tape, &y5, &[ys[0], ys[1], ys[3], ys[4]])
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl PoolSpec {
    pub fn max3d(kernel: (usize, usize, usize), stride: (usize, usize, usize)) -> Self {
        PoolSpec {
            kind: PoolKind::Max,
            kernel,
            stride,
            padding: (0, 0, 0),
        }
    }

    pub fn out_geom(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let ext = |e: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if k == 0 || k > e + 2 * p || s == 0 {
                return Err(Error::Shape(format!(
                    "pool: kernel {k} stride {s} invalid for padded extent {}",
                    e + 2 * p
                )));
            }
            Ok((e + 2 * p - k) / s + 1)
        };
        Ok((
            ext(t, self.kernel.0, self.stride.0, self.padding.0)?,
            ext(h, self.kernel.1, self.stride.1, self.padding.1)?,
            ext(w, self.kernel.2, self.stride.2, self.padding.2)?,
        ))
    }
}

/// 3D pooling on `[B,C,T,H,W]`. Max pooling ignores padding positions and
/// breaks ties toward the lowest flat index, so the gradient routes to
/// exactly one element. Average pooling treats padding as zeros and divides
/// by the full window size.
pub fn pool<E: Scalar>(tape: &mut Tape<E>, x: &Tensor<E>, spec: &PoolSpec) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::Shape(format!("pool: want rank-5 input, got {xs:?}")));
    }
    let (bsz, c, t, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (to, ho, wo) = spec.out_geom(t, h, w)?;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let win = kt * kh * kw;
    let out_n = bsz * c * to * ho * wo;
    let mut data = vec![E::ZERO; out_n];
    let mut argmax: Vec<u32> = if spec.kind == PoolKind::Max {
        vec![0; out_n]
    } else {
        Vec::new()
    };
    let mut oi = 0usize;
    for bc in 0..bsz * c {
        let xp = &x.data()[bc * t * h * w..(bc + 1) * t * h * w];
        for to_i in 0..to {
            for ho_i in 0..ho {
                for wo_i in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    let mut acc = 0f64;
                    for dt in 0..kt {
                        let ti = (to_i * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for dh in 0..kh {
                            let hi = (ho_i * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let wi = (wo_i * sw + dw) as isize - pw as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                let idx = ((ti as usize) * h + hi as usize) * w + wi as usize;
                                match spec.kind {
                                    PoolKind::Max => {
                                        let v = xp[idx].to_f64();
                                        if v > best {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                    PoolKind::Avg => acc += xp[idx].to_f64(),
                                }
                            }
                        }
                    }
                    match spec.kind {
                        PoolKind::Max => {
                            data[oi] = xp[best_idx];
                            argmax[oi] = (bc * t * h * w + best_idx) as u32;
                        }
                        PoolKind::Avg => data[oi] = E::from_f64(acc / win as f64),
                    }
                    oi += 1;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[bsz, c, to, ho, wo], data)?;
    let Some(nx) = x.node() else { return Ok(out) };
    let total = x.numel();
    let kind = spec.kind;
    let spec_b = spec.clone();
    let id = tape.record(move |g, sink| {
        let mut gx = vec![E::ZERO; total];
        match kind {
            PoolKind::Max => {
                for (gi, &src) in g.iter().zip(argmax.iter()) {
                    let src = src as usize;
                    gx[src] = gx[src] + *gi;
                }
            }
            PoolKind::Avg => {
                let inv = E::from_f64(1.0 / win as f64);
                let mut oi = 0usize;
                for bc in 0..bsz * c {
                    for to_i in 0..to {
                        for ho_i in 0..ho {
                            for wo_i in 0..wo {
                                let gv = g[oi] * inv;
                                for dt in 0..kt {
                                    let ti = (to_i * spec_b.stride.0 + dt) as isize - pt as isize;
                                    if ti < 0 || ti >= t as isize {
                                        continue;
                                    }
                                    for dh in 0..kh {
                                        let hi =
                                            (ho_i * spec_b.stride.1 + dh) as isize - ph as isize;
                                        if hi < 0 || hi >= h as isize {
                                            continue;
                                        }
                                        for dw in 0..kw {
                                            let wi = (wo_i * spec_b.stride.2 + dw) as isize
                                                - pw as isize;
                                            if wi < 0 || wi >= w as isize {
                                                continue;
                                            }
                                            let idx = bc * t * h * w
                                                + ((ti as usize) * h + hi as usize) * w
                                                + wi as usize;
                                            gx[idx] = gx[idx] + gv;
                                        }
                                    }
                                }
                                oi += 1;
                            }
                        }
                    }
                }
            }
        }
        sink.accumulate_owned(nx, gx);
    });
    Ok(out.with_node(id))
}

/// 2D pooling on `[B,C,H,W]`.
pub fn pool2d<E: Scalar>(
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    kind: PoolKind,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<E>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::Shape(format!("pool2d: want rank-4 input, got {xs:?}")));
    }
    let x5 = reshape(tape, x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
    let spec = PoolSpec {
        kind,
        kernel: (1, kernel.0, kernel.1),
        stride: (1, stride.0, stride.1),
        padding: (0, padding.0, padding.1),
    };
    let y5 = pool(tape, &x5, &spec)?;
    let ys = y5.shape().to_vec();
    reshape(tape, &y5, &[ys[0], ys[1], ys[3], ys[4]])
}
