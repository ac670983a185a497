//! Forward evaluation with a recorded tape, and exact reverse-mode gradients over `theta`.

use crate::error::{check_len, Error, Result};
use crate::nn::layers::{LayerKind, ModelState, Plan};
use crate::nn::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activation with a canonical `[n, c, d, h, w]` view. `ndim == 0` is a flat `[n, c]` feature map.
#[derive(Debug, Clone)]
struct Act<T> {
    n: usize,
    c: usize,
    ext: [usize; 3],
    ndim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (c, ext, ndim) = match *s {
            [_, f] => (f, [1, 1, 1], 0),
            [_, c, h, w] => (c, [1, h, w], 2),
            [_, c, d, h, w] => (c, [d, h, w], 3),
            _ => return Err(Error::Shape(format!("unsupported input shape {s:?}"))),
        };
        Ok(Self {
            n: s[0],
            c,
            ext,
            ndim,
            data: t.data().to_vec(),
        })
    }

    fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.n, self.c];
        s.extend_from_slice(&self.ext[3 - self.ndim..]);
        s
    }

    fn sample_len(&self) -> usize {
        self.c * self.pixels()
    }

    fn pixels(&self) -> usize {
        self.ext.iter().product()
    }

    fn like(&self, c: usize, ext: [usize; 3], ndim: usize, data: Vec<T>) -> Self {
        Self {
            n: self.n,
            c,
            ext,
            ndim,
            data,
        }
    }

    fn factor(&self, f: usize) -> Result<[usize; 3]> {
        match self.ndim {
            2 => Ok([1, f, f]),
            3 => Ok([f, f, f]),
            _ => Err(Error::Shape("resampling needs a spatial input".into())),
        }
    }
}

enum Cache<T> {
    Dense { input: Vec<T>, features: usize },
    Conv { cols: Vec<Vec<T>>, geom: ConvGeom },
    Relu { output: Vec<T> },
    Sigmoid { output: Vec<T> },
    Down { c: usize, ext: [usize; 3], f: [usize; 3] },
    Up { c: usize, ext: [usize; 3], f: [usize; 3] },
}

struct Tape<T> {
    normal: Vec<Cache<T>>,
    low: Vec<Cache<T>>,
    fused: Vec<Cache<T>>,
    /// (n, normal channels, low channels, extent, ndim) at the concat
    split: Option<(usize, usize, usize, [usize; 3], usize)>,
    out_shape: Vec<usize>,
}

/// A model bound to an evaluation context. `forward` records what `backward` needs.
pub struct Session<'m, T: Scalar> {
    model: &'m ModelState<T>,
    plan: Plan,
    tape: Option<Tape<T>>,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m ModelState<T>) -> Self {
        Self {
            plan: model.plan(),
            model,
            tape: None,
        }
    }

    /// Per-voxel probabilities for a batch. Output shape is `[n, 1, spatial..]` for
    /// convolutional models and `[n, outputs]` for dense ones.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.tape = None;
        let (out, tape) = self.run(input, true)?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, false)?.0)
    }

    fn run(&self, input: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Tape<T>)> {
        let layers = self.model.layers();
        let theta = self.model.theta();
        let x = Act::from_tensor(input)?;
        let mut tape = Tape {
            normal: vec![],
            low: vec![],
            fused: vec![],
            split: None,
            out_shape: vec![],
        };
        let out = if self.plan.low.is_empty() {
            chain_forward(&self.plan.normal, &self.plan, layers, theta, x, record, &mut tape.normal)?
        } else {
            let a = chain_forward(&self.plan.normal, &self.plan, layers, theta, x.clone(), record, &mut tape.normal)?;
            let b = chain_forward(&self.plan.low, &self.plan, layers, theta, x, record, &mut tape.low)?;
            if a.ext != b.ext || a.ndim != b.ndim {
                return Err(Error::Shape(format!(
                    "pathways disagree at concat: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (pa, pb) = (a.sample_len(), b.sample_len());
            let mut data = Vec::with_capacity(a.data.len() + b.data.len());
            for i in 0..a.n {
                data.extend_from_slice(&a.data[i * pa..(i + 1) * pa]);
                data.extend_from_slice(&b.data[i * pb..(i + 1) * pb]);
            }
            tape.split = Some((a.n, a.c, b.c, a.ext, a.ndim));
            let joined = a.like(a.c + b.c, a.ext, a.ndim, data);
            chain_forward(&self.plan.fused, &self.plan, layers, theta, joined, record, &mut tape.fused)?
        };
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        tape.out_shape = out.shape();
        let t = Tensor::new(out.shape(), out.data)?;
        Ok((t, tape))
    }

    /// Gradient of `sum(upstream * output)` with respect to every parameter.
    pub fn backward(&self, upstream: &Tensor<T>) -> Result<Vec<T>> {
        let tape = self.tape.as_ref().ok_or(Error::NoForward)?;
        if upstream.shape() != tape.out_shape.as_slice() {
            return Err(Error::Shape(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                tape.out_shape
            )));
        }
        let layers = self.model.layers();
        let theta = self.model.theta();
        let mut grad = vec![T::zero(); self.plan.param_count];
        let dy = upstream.data().to_vec();
        if self.plan.low.is_empty() {
            chain_backward(&self.plan.normal, &self.plan, layers, theta, &tape.normal, dy, false, &mut grad);
        } else {
            let djoined = chain_backward(&self.plan.fused, &self.plan, layers, theta, &tape.fused, dy, true, &mut grad)
                .expect("fused chain returns its input gradient");
            let (n, ca, cb, ext, _) = tape.split.expect("recorded at concat");
            let p: usize = ext.iter().product();
            let mut da = Vec::with_capacity(n * ca * p);
            let mut db = Vec::with_capacity(n * cb * p);
            for i in 0..n {
                let s = &djoined[i * (ca + cb) * p..(i + 1) * (ca + cb) * p];
                da.extend_from_slice(&s[..ca * p]);
                db.extend_from_slice(&s[ca * p..]);
            }
            chain_backward(&self.plan.normal, &self.plan, layers, theta, &tape.normal, da, false, &mut grad);
            chain_backward(&self.plan.low, &self.plan, layers, theta, &tape.low, db, false, &mut grad);
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(grad)
    }
}

fn layer_params<'a, T>(plan: &Plan, kind: &LayerKind, idx: usize, theta: &'a [T]) -> (&'a [T], &'a [T]) {
    let off = plan.offsets[idx];
    let n = kind.param_count();
    let (outputs, _) = match *kind {
        LayerKind::Dense { outputs, .. } => (outputs, ()),
        LayerKind::Conv2d { out_ch, .. } | LayerKind::Conv3d { out_ch, .. } => (out_ch, ()),
        _ => (0, ()),
    };
    let p = &theta[off..off + n];
    p.split_at(n - outputs)
}

fn chain_forward<T: Scalar>(
    idxs: &[usize],
    plan: &Plan,
    layers: &[crate::nn::layers::LayerSpec],
    theta: &[T],
    mut x: Act<T>,
    record: bool,
    caches: &mut Vec<Cache<T>>,
) -> Result<Act<T>> {
    for &i in idxs {
        let kind = layers[i].kind;
        let (next, cache) = match kind {
            LayerKind::Dense { inputs, outputs } => {
                let f = x.sample_len();
                if f != inputs {
                    return Err(Error::Shape(format!("dense layer {i} expects {inputs} features, got {f}")));
                }
                let (w, b) = layer_params(plan, &kind, i, theta);
                let mut y = vec![T::zero(); x.n * outputs];
                for r in 0..x.n {
                    y[r * outputs..(r + 1) * outputs].copy_from_slice(b);
                }
                T::gemm(x.n, inputs, outputs, T::one(), &x.data, false, w, true, T::one(), &mut y);
                let next = x.like(outputs, [1, 1, 1], 0, y);
                (next, Cache::Dense { input: x.data, features: inputs })
            }
            LayerKind::Conv2d { in_ch, out_ch, kernel } | LayerKind::Conv3d { in_ch, out_ch, kernel } => {
                let want = if matches!(kind, LayerKind::Conv2d { .. }) { 2 } else { 3 };
                if x.ndim != want || x.c != in_ch {
                    return Err(Error::Shape(format!(
                        "conv layer {i} expects {in_ch} channels in {want}D, got {:?}",
                        x.shape()
                    )));
                }
                let kd = if want == 3 { kernel } else { 1 };
                let geom = ConvGeom { cin: in_ch, cout: out_ch, k: [kd, kernel, kernel], ext: x.ext };
                let (w, b) = layer_params(plan, &kind, i, theta);
                let p = geom.pixels();
                let mut y = vec![T::zero(); x.n * out_ch * p];
                let mut cols = Vec::with_capacity(if record { x.n } else { 0 });
                let s = x.sample_len();
                for r in 0..x.n {
                    let col = ops::conv_forward(
                        &x.data[r * s..(r + 1) * s],
                        w,
                        b,
                        &geom,
                        &mut y[r * out_ch * p..(r + 1) * out_ch * p],
                    );
                    if record {
                        cols.push(col);
                    }
                }
                (x.like(out_ch, x.ext, x.ndim, y), Cache::Conv { cols, geom })
            }
            LayerKind::Relu => {
                let y: Vec<T> = x.data.iter().map(|&v| v.max(T::zero())).collect();
                let next = x.like(x.c, x.ext, x.ndim, y);
                let output = if record { next.data.clone() } else { vec![] };
                (next, Cache::Relu { output })
            }
            LayerKind::Sigmoid => {
                if !x.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("activation entering layer {i}")));
                }
                let y: Vec<T> = x.data.iter().map(|&v| ops::sigmoid(v)).collect();
                let next = x.like(x.c, x.ext, x.ndim, y);
                let output = if record { next.data.clone() } else { vec![] };
                (next, Cache::Sigmoid { output })
            }
            LayerKind::DownsampleAvg { factor } => {
                let f = x.factor(factor)?;
                if (0..3).any(|a| x.ext[a] % f[a] != 0) {
                    return Err(Error::Shape(format!(
                        "extent {:?} not divisible by downsampling factor {factor}",
                        x.shape()
                    )));
                }
                let out_ext = [x.ext[0] / f[0], x.ext[1] / f[1], x.ext[2] / f[2]];
                let (s, so) = (x.sample_len(), x.c * out_ext.iter().product::<usize>());
                let mut y = Vec::with_capacity(x.n * so);
                for r in 0..x.n {
                    y.extend(ops::downsample_avg(&x.data[r * s..(r + 1) * s], x.c, x.ext, f));
                }
                (x.like(x.c, out_ext, x.ndim, y), Cache::Down { c: x.c, ext: x.ext, f })
            }
            LayerKind::UpsampleNearest { factor } => {
                let f = x.factor(factor)?;
                let out_ext = [x.ext[0] * f[0], x.ext[1] * f[1], x.ext[2] * f[2]];
                let s = x.sample_len();
                let mut y = Vec::with_capacity(x.n * s * f.iter().product::<usize>());
                for r in 0..x.n {
                    y.extend(ops::upsample_nearest(&x.data[r * s..(r + 1) * s], x.c, x.ext, f));
                }
                (x.like(x.c, out_ext, x.ndim, y), Cache::Up { c: x.c, ext: x.ext, f })
            }
            LayerKind::Concat => unreachable!("concat is handled by the plan"),
        };
        if record {
            caches.push(cache);
        }
        x = next;
    }
    Ok(x)
}

/// Walks a chain backwards. Returns the gradient at the chain input when `need_input` is set.
#[allow(clippy::too_many_arguments)]
fn chain_backward<T: Scalar>(
    idxs: &[usize],
    plan: &Plan,
    layers: &[crate::nn::layers::LayerSpec],
    theta: &[T],
    caches: &[Cache<T>],
    mut dy: Vec<T>,
    need_input: bool,
    grad: &mut [T],
) -> Option<Vec<T>> {
    for (pos, (&i, cache)) in idxs.iter().zip(caches).enumerate().rev() {
        let first = pos == 0;
        let want_dx = need_input || !first;
        let kind = layers[i].kind;
        dy = match cache {
            Cache::Dense { input, features } => {
                let LayerKind::Dense { outputs, .. } = kind else { unreachable!() };
                let n = dy.len() / outputs;
                let (w, _) = layer_params(plan, &kind, i, theta);
                let off = plan.offsets[i];
                let (gw, gb) = grad[off..off + kind.param_count()].split_at_mut(outputs * features);
                T::gemm(outputs, n, *features, T::one(), &dy, true, input, false, T::one(), gw);
                for r in 0..n {
                    for (g, &d) in gb.iter_mut().zip(&dy[r * outputs..(r + 1) * outputs]) {
                        *g = *g + d;
                    }
                }
                if want_dx {
                    let mut dx = vec![T::zero(); n * features];
                    T::gemm(n, outputs, *features, T::one(), &dy, false, w, false, T::zero(), &mut dx);
                    dx
                } else {
                    vec![]
                }
            }
            Cache::Conv { cols, geom } => {
                let (w, _) = layer_params(plan, &kind, i, theta);
                let off = plan.offsets[i];
                let (gw, gb) = grad[off..off + kind.param_count()].split_at_mut(geom.cout * geom.rows());
                let p = geom.pixels();
                let (so, si) = (geom.cout * p, geom.cin * p);
                let mut dx = if want_dx { vec![T::zero(); cols.len() * si] } else { vec![] };
                for (r, col) in cols.iter().enumerate() {
                    let dxs = if want_dx { Some(&mut dx[r * si..(r + 1) * si]) } else { None };
                    ops::conv_backward(&dy[r * so..(r + 1) * so], col, w, geom, gw, gb, dxs);
                }
                dx
            }
            Cache::Relu { output } => dy
                .iter()
                .zip(output)
                .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                .collect(),
            Cache::Sigmoid { output } => dy
                .iter()
                .zip(output)
                .map(|(&d, &o)| d * o * (T::one() - o))
                .collect(),
            Cache::Down { c, ext, f } => {
                let pin: usize = ext.iter().product();
                let so = c * pin / f.iter().product::<usize>();
                let n = dy.len() / so;
                let mut dx = Vec::with_capacity(n * c * pin);
                for r in 0..n {
                    dx.extend(ops::downsample_avg_backward(&dy[r * so..(r + 1) * so], *c, *ext, *f));
                }
                dx
            }
            Cache::Up { c, ext, f } => {
                let so = c * ext.iter().product::<usize>() * f.iter().product::<usize>();
                let n = dy.len() / so;
                let mut dx = Vec::with_capacity(dy.len() / f.iter().product::<usize>());
                for r in 0..n {
                    dx.extend(ops::upsample_nearest_backward(&dy[r * so..(r + 1) * so], *c, *ext, *f));
                }
                dx
            }
        };
        if first && !need_input {
            return None;
        }
    }
    Some(dy)
}

/// Convenience: forward without a tape.
pub fn forward<T: Scalar>(model: &ModelState<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Session::new(model).predict(input)
}

/// Checks a gradient vector against the model before it is applied.
pub fn check_gradient<T: Scalar>(model: &ModelState<T>, g: &[T]) -> Result<()> {
    check_len(model.param_count(), g.len())?;
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient".into()))
    }
}
