//! Layer kernels. Spatial tensors are `[n, c, d, h, w]` internally; 2D inputs have `d = 1`.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    /// kernel extent per axis (depth is 1 for 2D kernels)
    pub k: [usize; 3],
    pub ext: [usize; 3],
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    pub fn pixels(&self) -> usize {
        self.ext[0] * self.ext[1] * self.ext[2]
    }
}

/// Unfolds one sample `[cin, d, h, w]` into `[cin * kd * kh * kw, d * h * w]` with zero padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [d, h, w] = g.ext;
    let p = g.pixels();
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * p..(c + 1) * p];
        for kz in 0..kd {
            let oz = kz as isize - pd;
            for ky in 0..kh {
                let oy = ky as isize - ph;
                for kx in 0..kw {
                    let ox = kx as isize - pw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    // valid x range for this offset
                    let x0 = (-ox).max(0) as usize;
                    let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + oz;
                        for y in 0..h {
                            let sy = y as isize + oy;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src_row = (sz as usize * h + sy as usize) * w;
                            out[..x0.min(w)].fill(T::zero());
                            if x1 > x0 {
                                let s0 = (x0 as isize + ox) as usize;
                                out[x0..x1].copy_from_slice(&xc[src_row + s0..src_row + s0 + (x1 - x0)]);
                            }
                            out[x1.max(x0).min(w)..].fill(T::zero());
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.ext;
    let p = g.pixels();
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * p..(c + 1) * p];
        for kz in 0..kd {
            let oz = kz as isize - pd;
            for ky in 0..kh {
                let oy = ky as isize - ph;
                for kx in 0..kw {
                    let ox = kx as isize - pw;
                    let src = &col[row * p..(row + 1) * p];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= h as isize || x1 <= x0 {
                                continue;
                            }
                            let dst_row = (sz as usize * h + sy as usize) * w;
                            let s0 = (x0 as isize + ox) as usize;
                            let from = &src[(z * h + y) * w + x0..(z * h + y) * w + x1];
                            for (o, v) in dxc[dst_row + s0..dst_row + s0 + (x1 - x0)]
                                .iter_mut()
                                .zip(from)
                            {
                                *o = *o + *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution of one sample. Returns the unfolded input for the backward pass.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weights: &[T],
    bias: &[T],
    g: &ConvGeom,
    y: &mut [T],
) -> Vec<T> {
    let p = g.pixels();
    let r = g.rows();
    let mut col = vec![T::zero(); r * p];
    im2col(x, g, &mut col);
    T::gemm(g.cout, r, p, T::one(), weights, false, &col, false, T::zero(), y);
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut y[c * p..(c + 1) * p] {
            *v = *v + b;
        }
    }
    col
}

/// Backward convolution of one sample: accumulates weight/bias gradients and optionally `dx`.
pub(crate) fn conv_backward<T: Scalar>(
    dy: &[T],
    col: &[T],
    weights: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let p = g.pixels();
    let r = g.rows();
    T::gemm(g.cout, p, r, T::one(), dy, false, col, true, T::one(), dw);
    for (c, b) in db.iter_mut().enumerate() {
        *b = *b + dy[c * p..(c + 1) * p].iter().copied().sum::<T>();
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); r * p];
        T::gemm(r, g.cout, p, T::one(), weights, true, dy, false, T::zero(), &mut dcol);
        col2im(&dcol, g, dx);
    }
}

/// Average pooling by `f` along the active axes of `[c, d, h, w]`.
pub(crate) fn downsample_avg<T: Scalar>(
    x: &[T],
    c: usize,
    ext: [usize; 3],
    f: [usize; 3],
) -> Vec<T> {
    let out = [ext[0] / f[0], ext[1] / f[1], ext[2] / f[2]];
    let inv = T::one() / T::lit((f[0] * f[1] * f[2]) as f64);
    let pin = ext[0] * ext[1] * ext[2];
    let pout = out[0] * out[1] * out[2];
    let mut y = vec![T::zero(); c * pout];
    for ch in 0..c {
        for z in 0..ext[0] {
            for yy in 0..ext[1] {
                for xx in 0..ext[2] {
                    let o = ((z / f[0]) * out[1] + yy / f[1]) * out[2] + xx / f[2];
                    let i = (z * ext[1] + yy) * ext[2] + xx;
                    y[ch * pout + o] = y[ch * pout + o] + x[ch * pin + i] * inv;
                }
            }
        }
    }
    y
}

/// Adjoint of [`downsample_avg`]; `ext` is the input (fine) extent.
pub(crate) fn downsample_avg_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    ext: [usize; 3],
    f: [usize; 3],
) -> Vec<T> {
    let out = [ext[0] / f[0], ext[1] / f[1], ext[2] / f[2]];
    let inv = T::one() / T::lit((f[0] * f[1] * f[2]) as f64);
    let pin = ext[0] * ext[1] * ext[2];
    let pout = out[0] * out[1] * out[2];
    let mut dx = vec![T::zero(); c * pin];
    for ch in 0..c {
        for z in 0..ext[0] {
            for yy in 0..ext[1] {
                for xx in 0..ext[2] {
                    let o = ((z / f[0]) * out[1] + yy / f[1]) * out[2] + xx / f[2];
                    let i = (z * ext[1] + yy) * ext[2] + xx;
                    dx[ch * pin + i] = dy[ch * pout + o] * inv;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor upsampling by `f`; `ext` is the input (coarse) extent.
pub(crate) fn upsample_nearest<T: Scalar>(
    x: &[T],
    c: usize,
    ext: [usize; 3],
    f: [usize; 3],
) -> Vec<T> {
    let out = [ext[0] * f[0], ext[1] * f[1], ext[2] * f[2]];
    let pin = ext[0] * ext[1] * ext[2];
    let pout = out[0] * out[1] * out[2];
    let mut y = vec![T::zero(); c * pout];
    for ch in 0..c {
        for z in 0..out[0] {
            for yy in 0..out[1] {
                for xx in 0..out[2] {
                    let i = ((z / f[0]) * ext[1] + yy / f[1]) * ext[2] + xx / f[2];
                    y[ch * pout + (z * out[1] + yy) * out[2] + xx] = x[ch * pin + i];
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample_nearest`]; `ext` is the input (coarse) extent.
pub(crate) fn upsample_nearest_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    ext: [usize; 3],
    f: [usize; 3],
) -> Vec<T> {
    let out = [ext[0] * f[0], ext[1] * f[1], ext[2] * f[2]];
    let pin = ext[0] * ext[1] * ext[2];
    let pout = out[0] * out[1] * out[2];
    let mut dx = vec![T::zero(); c * pin];
    for ch in 0..c {
        for z in 0..out[0] {
            for yy in 0..out[1] {
                for xx in 0..out[2] {
                    let i = ((z / f[0]) * ext[1] + yy / f[1]) * ext[2] + xx / f[2];
                    dx[ch * pin + i] =
                        dx[ch * pin + i] + dy[ch * pout + (z * out[1] + yy) * out[2] + xx];
                }
            }
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    let eps = T::epsilon();
    let s = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    // keep outputs strictly inside (0, 1) even where the exponential saturates
    s.max(eps).min(T::one() - eps)
}
