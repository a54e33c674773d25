//! Dense numeric kernels for the network layers.
//!
//! All buffers are row-major `f64` slices with shapes passed explicitly.
//! Batched work is parallelized so that every output element is written by
//! exactly one task and every reduction runs in a fixed order; results are
//! therefore identical across thread counts.

use rayon::prelude::*;

/// Valid (no padding), stride-1 convolution.
/// `input` is `[batch, in_ch, h, w]`, `weight` is `[out_ch, in_ch, k, k]`,
/// `bias` is `[out_ch]`, `out` is `[batch, out_ch, h-k+1, w-k+1]`.
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    debug_assert_eq!(input.len(), batch * in_ch * h * w);
    debug_assert_eq!(weight.len(), out_ch * in_ch * k * k);
    debug_assert_eq!(out.len(), batch * out_ch * oh * ow);

    out.par_chunks_mut(out_ch * oh * ow)
        .enumerate()
        .for_each(|(b, out_b)| {
            let in_b = &input[b * in_ch * h * w..(b + 1) * in_ch * h * w];
            for oc in 0..out_ch {
                let out_plane = &mut out_b[oc * oh * ow..(oc + 1) * oh * ow];
                out_plane.fill(bias[oc]);
                for ic in 0..in_ch {
                    let in_plane = &in_b[ic * h * w..(ic + 1) * h * w];
                    let w_base = (oc * in_ch + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            for oy in 0..oh {
                                let in_row = &in_plane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                                for (o, &x) in out_row.iter_mut().zip(in_row) {
                                    *o += wv * x;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &[f64],
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    grad_in: &mut [f64],
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    grad_in.fill(0.0);
    grad_in
        .par_chunks_mut(in_ch * h * w)
        .enumerate()
        .for_each(|(b, gin_b)| {
            let gout_b = &grad_out[b * out_ch * oh * ow..(b + 1) * out_ch * oh * ow];
            for oc in 0..out_ch {
                let gout_plane = &gout_b[oc * oh * ow..(oc + 1) * oh * ow];
                for ic in 0..in_ch {
                    let gin_plane = &mut gin_b[ic * h * w..(ic + 1) * h * w];
                    let w_base = (oc * in_ch + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            for oy in 0..oh {
                                let g_row = &gout_plane[oy * ow..(oy + 1) * ow];
                                let gin_row =
                                    &mut gin_plane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                for (gi, &g) in gin_row.iter_mut().zip(g_row) {
                                    *gi += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradients of the convolution with respect to weight and bias.
pub fn conv2d_backward_params(
    grad_out: &[f64],
    input: &[f64],
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    grad_w
        .par_chunks_mut(in_ch * k * k)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            for ic in 0..in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for b in 0..batch {
                            let gout_plane = &grad_out[(b * out_ch + oc) * oh * ow..];
                            let in_plane = &input[(b * in_ch + ic) * h * w..];
                            for oy in 0..oh {
                                let g_row = &gout_plane[oy * ow..(oy + 1) * ow];
                                let in_row =
                                    &in_plane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                let mut dot = 0.0;
                                for (&g, &x) in g_row.iter().zip(in_row) {
                                    dot += g * x;
                                }
                                acc += dot;
                            }
                        }
                        gw_oc[(ic * k + ky) * k + kx] = acc;
                    }
                }
            }
        });
    for oc in 0..out_ch {
        let mut acc = 0.0;
        for b in 0..batch {
            let gout_plane = &grad_out[(b * out_ch + oc) * oh * ow..(b * out_ch + oc + 1) * oh * ow];
            acc += gout_plane.iter().sum::<f64>();
        }
        grad_b[oc] = acc;
    }
}

/// 2×2 max pooling with stride 2. `h` and `w` must be even.
/// Writes the flat input offset of each selected element into `indices`
/// (first occurrence wins on ties) for use by the backward pass.
pub fn maxpool2_forward(
    input: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    indices: &mut [u32],
) {
    let oh = h / 2;
    let ow = w / 2;
    debug_assert_eq!(out.len(), batch * ch * oh * ow);
    out.par_chunks_mut(ch * oh * ow)
        .zip(indices.par_chunks_mut(ch * oh * ow))
        .enumerate()
        .for_each(|(b, (out_b, idx_b))| {
            for c in 0..ch {
                let base = (b * ch + c) * h * w;
                let plane = &input[base..base + h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i00 = (2 * oy) * w + 2 * ox;
                        let i01 = i00 + 1;
                        let i10 = i00 + w;
                        let i11 = i10 + 1;
                        let mut best = i00;
                        if plane[i01] > plane[best] {
                            best = i01;
                        }
                        if plane[i10] > plane[best] {
                            best = i10;
                        }
                        if plane[i11] > plane[best] {
                            best = i11;
                        }
                        out_b[c * oh * ow + oy * ow + ox] = plane[best];
                        idx_b[c * oh * ow + oy * ow + ox] = (base + best) as u32;
                    }
                }
            }
        });
}

pub fn maxpool2_backward(grad_out: &[f64], indices: &[u32], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (&g, &i) in grad_out.iter().zip(indices) {
        grad_in[i as usize] += g;
    }
}

/// Fully connected layer: `out[b,o] = bias[o] + sum_i weight[o,i] * input[b,i]`.
pub fn linear_forward(
    input: &[f64],
    batch: usize,
    in_dim: usize,
    weight: &[f64],
    out_dim: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * in_dim);
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    out.par_chunks_mut(out_dim)
        .enumerate()
        .for_each(|(b, out_b)| {
            let x = &input[b * in_dim..(b + 1) * in_dim];
            for (o, out_v) in out_b.iter_mut().enumerate() {
                let wrow = &weight[o * in_dim..(o + 1) * in_dim];
                let mut acc = 0.0;
                for (&wv, &xv) in wrow.iter().zip(x) {
                    acc += wv * xv;
                }
                *out_v = acc + bias[o];
            }
        });
}

pub fn linear_backward_input(
    grad_out: &[f64],
    batch: usize,
    in_dim: usize,
    weight: &[f64],
    out_dim: usize,
    grad_in: &mut [f64],
) {
    grad_in
        .par_chunks_mut(in_dim)
        .enumerate()
        .for_each(|(b, gin_b)| {
            gin_b.fill(0.0);
            let g = &grad_out[b * out_dim..(b + 1) * out_dim];
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let wrow = &weight[o * in_dim..(o + 1) * in_dim];
                for (gi, &wv) in gin_b.iter_mut().zip(wrow) {
                    *gi += gv * wv;
                }
            }
        });
}

pub fn linear_backward_params(
    grad_out: &[f64],
    input: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    grad_w
        .par_chunks_mut(in_dim)
        .enumerate()
        .for_each(|(o, gw_row)| {
            gw_row.fill(0.0);
            for b in 0..batch {
                let gv = grad_out[b * out_dim + o];
                if gv == 0.0 {
                    continue;
                }
                let x = &input[b * in_dim..(b + 1) * in_dim];
                for (gw, &xv) in gw_row.iter_mut().zip(x) {
                    *gw += gv * xv;
                }
            }
        });
    for o in 0..out_dim {
        let mut acc = 0.0;
        for b in 0..batch {
            acc += grad_out[b * out_dim + o];
        }
        grad_b[o] = acc;
    }
}
