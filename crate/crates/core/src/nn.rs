//! Fixed optimizee architectures with hand-written reverse-mode gradients.
//!
//! Layouts: dense weights are `[in, out]`, conv kernels are `[3, 3, c_in, c_out]`
//! and activations are NHWC. All arithmetic is f64.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};
use crate::tensor::{ModelParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp2,
    Mlp3,
    Cnn3,
    LinearToy,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp2" => Ok(ArchKind::Mlp2),
            "mlp3" => Ok(ArchKind::Mlp3),
            "cnn3" => Ok(ArchKind::Cnn3),
            "linear_toy" => Ok(ArchKind::LinearToy),
            other => Err(Error::InvalidArch(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Per-sample input dims. `[h, w, c]` for `cnn3`; MLPs flatten whatever is given.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub hidden_width: usize,
    /// Channel counts of the three conv layers (`cnn3` only).
    pub conv_channels: [usize; 3],
}

pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
pub const DEFAULT_CONV_CHANNELS: [usize; 3] = [32, 64, 64];
const CONV_STRIDES: [usize; 3] = [2, 1, 1];

impl ArchSpec {
    pub fn mlp2(input_dim: usize, num_classes: usize, hidden_width: usize) -> Self {
        Self::mlp(ArchKind::Mlp2, input_dim, num_classes, hidden_width)
    }

    pub fn mlp3(input_dim: usize, num_classes: usize, hidden_width: usize) -> Self {
        Self::mlp(ArchKind::Mlp3, input_dim, num_classes, hidden_width)
    }

    pub fn linear_toy(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(ArchKind::LinearToy, input_dim, num_classes, DEFAULT_HIDDEN_WIDTH)
    }

    pub fn cnn3(height: usize, width: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Cnn3,
            input_shape: vec![height, width, channels],
            num_classes,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            conv_channels: DEFAULT_CONV_CHANNELS,
        }
    }

    pub fn with_conv_channels(mut self, channels: [usize; 3]) -> Self {
        self.conv_channels = channels;
        self
    }

    fn mlp(kind: ArchKind, input_dim: usize, num_classes: usize, hidden_width: usize) -> Self {
        Self {
            kind,
            input_shape: vec![input_dim],
            num_classes,
            hidden_width,
            conv_channels: DEFAULT_CONV_CHANNELS,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArch(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArch("num_classes must be at least 2".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidArch("hidden_width must be positive".into()));
        }
        if self.kind == ArchKind::Cnn3 {
            if self.input_shape.len() != 3 {
                return Err(Error::InvalidArch(format!(
                    "cnn3 expects [h, w, c] input, got {:?}",
                    self.input_shape
                )));
            }
            if self.conv_channels.contains(&0) {
                return Err(Error::InvalidArch("conv channels must be positive".into()));
            }
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let c = self.num_classes;
        let h = self.hidden_width;
        let dense = |inp, out| Layer::Dense { inp, out };
        match self.kind {
            ArchKind::LinearToy => vec![dense(self.input_size(), c)],
            ArchKind::Mlp2 => vec![
                dense(self.input_size(), h),
                Layer::Relu,
                dense(h, h),
                Layer::Relu,
                dense(h, c),
            ],
            ArchKind::Mlp3 => vec![
                dense(self.input_size(), h),
                Layer::Relu,
                dense(h, h),
                Layer::Relu,
                dense(h, h),
                Layer::Relu,
                dense(h, c),
            ],
            ArchKind::Cnn3 => {
                let (mut ih, mut iw, mut cin) =
                    (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let mut layers = Vec::new();
                for (&cout, &stride) in self.conv_channels.iter().zip(&CONV_STRIDES) {
                    let geom = ConvGeom::new(ih, iw, cin, cout, stride);
                    (ih, iw, cin) = (geom.oh, geom.ow, cout);
                    layers.push(Layer::Conv(geom));
                    layers.push(Layer::Relu);
                }
                layers.push(dense(ih * iw * cin, c));
                layers
            }
        }
    }

    /// Names and shapes of the parameter tensors, in order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers().iter().filter(|l| l.has_params()).enumerate() {
            match layer {
                Layer::Dense { inp, out: o } => {
                    out.push((format!("dense{i}/w"), vec![*inp, *o]));
                    out.push((format!("dense{i}/b"), vec![*o]));
                }
                Layer::Conv(g) => {
                    out.push((format!("conv{i}/w"), vec![3, 3, g.cin, g.cout]));
                    out.push((format!("conv{i}/b"), vec![g.cout]));
                }
                Layer::Relu => unreachable!(),
            }
        }
        out
    }

    /// Output spatial dims of each conv layer (`cnn3` only).
    pub fn conv_output_dims(&self) -> Vec<(usize, usize)> {
        self.layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(g) => Some((g.oh, g.ow)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ih: usize,
    iw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// 3x3 "same" padding: output is `ceil(in / stride)`, padding split with the
    /// extra row/column at the bottom/right.
    fn new(ih: usize, iw: usize, cin: usize, cout: usize, stride: usize) -> Self {
        let oh = ih.div_ceil(stride);
        let ow = iw.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + 3).saturating_sub(ih);
        let pad_w = ((ow - 1) * stride + 3).saturating_sub(iw);
        Self {
            ih,
            iw,
            cin,
            cout,
            stride,
            oh,
            ow,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn in_size(&self) -> usize {
        self.ih * self.iw * self.cin
    }

    fn out_size(&self) -> usize {
        self.oh * self.ow * self.cout
    }

    /// Input coordinate for output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < limit).then_some(p)
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Dense { inp: usize, out: usize },
    Conv(ConvGeom),
    Relu,
}

impl Layer {
    fn has_params(&self) -> bool {
        !matches!(self, Layer::Relu)
    }

    fn out_size(&self, in_size: usize) -> usize {
        match self {
            Layer::Dense { out, .. } => *out,
            Layer::Conv(g) => g.out_size(),
            Layer::Relu => in_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B x input dims`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seed-deterministic initialization: truncated normal (at two standard
/// deviations) with std `sqrt(1 / fan_in)`; biases zero.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let root = RngStream::new(seed).derive(purpose::INIT);
    let entries = arch
        .param_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let std = (1.0 / fan_in as f64).sqrt();
                let mut s = root.derive(i as u64);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| std * truncated_normal(&mut s)).collect();
                Tensor::new(shape, data)?
            };
            Ok((name, t))
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams::new(entries))
}

pub(crate) fn truncated_normal(s: &mut RngStream) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(s);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Mean softmax cross-entropy and its exact gradient.
pub fn loss_and_grad(arch: &ArchSpec, params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    let layers = arch.layers();
    let acts = forward(arch, &layers, params, batch)?;
    let logits = acts.last().expect("at least one layer");
    let (loss, mut g) = softmax_xent(logits, &batch.labels, arch.num_classes)?;

    let b = batch.len();
    let mut grads = ModelParams::zeros_like(params);
    let mut pidx = layers.iter().filter(|l| l.has_params()).count() * 2;
    for (li, layer) in layers.iter().enumerate().rev() {
        let x = &acts[li];
        match layer {
            Layer::Relu => {
                for (gv, &y) in g.iter_mut().zip(&acts[li + 1]) {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            Layer::Dense { inp, out } => {
                pidx -= 2;
                let w = params.tensor(pidx).data();
                let (dw, db) = two_mut(&mut grads, pidx);
                g = dense_backward(x, &g, w, dw, db, b, *inp, *out, li > 0);
            }
            Layer::Conv(geom) => {
                pidx -= 2;
                let w = params.tensor(pidx).data();
                let (dw, db) = two_mut(&mut grads, pidx);
                g = conv_backward(x, &g, w, dw, db, b, geom, li > 0);
            }
        }
    }
    Ok((loss, grads))
}

/// Loss without gradients; identical value to [`loss_and_grad`].
pub fn loss_only(arch: &ArchSpec, params: &ModelParams, batch: &Batch) -> Result<f64> {
    let layers = arch.layers();
    let acts = forward(arch, &layers, params, batch)?;
    let logits = acts.last().expect("at least one layer");
    Ok(softmax_xent(logits, &batch.labels, arch.num_classes)?.0)
}

/// Logits for a batch, `B x num_classes`.
pub fn predict(arch: &ArchSpec, params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let layers = arch.layers();
    Ok(forward(arch, &layers, params, batch)?.pop().expect("non-empty"))
}

fn two_mut(grads: &mut ModelParams, i: usize) -> (&mut [f64], &mut [f64]) {
    let mut it = grads.tensors_mut().skip(i);
    let w = it.next().expect("weight").data_mut();
    let b = it.next().expect("bias").data_mut();
    (w, b)
}

fn forward(arch: &ArchSpec, layers: &[Layer], params: &ModelParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let shapes = arch.param_shapes();
    if params.num_tensors() != shapes.len()
        || params
            .tensors()
            .zip(&shapes)
            .any(|(t, (_, s))| t.shape() != s.as_slice())
    {
        return Err(Error::Shape("parameters do not match architecture".into()));
    }
    let in_size = arch.input_size();
    if batch.inputs.len() != b * in_size {
        return Err(Error::Shape(format!(
            "batch inputs have {} values, expected {b} x {in_size}",
            batch.inputs.len()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            arch.num_classes
        )));
    }

    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(batch.inputs.data().to_vec());
    let mut pidx = 0;
    let mut size = in_size;
    for layer in layers {
        let x = acts.last().expect("input");
        let y = match layer {
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Dense { inp, out } => {
                let w = params.tensor(pidx).data();
                let bias = params.tensor(pidx + 1).data();
                pidx += 2;
                dense_forward(x, w, bias, b, *inp, *out)
            }
            Layer::Conv(geom) => {
                let w = params.tensor(pidx).data();
                let bias = params.tensor(pidx + 1).data();
                pidx += 2;
                conv_forward(x, w, bias, b, geom)
            }
        };
        size = layer.out_size(size);
        debug_assert_eq!(y.len(), b * size);
        acts.push(y);
    }
    Ok(acts)
}

fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], b: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * out];
    for (xr, yr) in x.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
        yr.copy_from_slice(bias);
        for (&xv, wr) in xr.iter().zip(w.chunks_exact(out)) {
            if xv != 0.0 {
                for (yv, &wv) in yr.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    g: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    b: usize,
    inp: usize,
    out: usize,
    need_dx: bool,
) -> Vec<f64> {
    let mut dx = if need_dx { vec![0.0; b * inp] } else { Vec::new() };
    for (s, (xr, gr)) in x.chunks_exact(inp).zip(g.chunks_exact(out)).enumerate() {
        for (dbv, &gv) in db.iter_mut().zip(gr) {
            *dbv += gv;
        }
        for (i, (&xv, dwr)) in xr.iter().zip(dw.chunks_exact_mut(out)).enumerate() {
            if xv != 0.0 {
                for (d, &gv) in dwr.iter_mut().zip(gr) {
                    *d += xv * gv;
                }
            }
            if need_dx {
                let wr = &w[i * out..(i + 1) * out];
                dx[s * inp + i] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            }
        }
    }
    dx
}

fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], b: usize, g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; b * g.out_size()];
    for s in 0..b {
        let xs = &x[s * g.in_size()..(s + 1) * g.in_size()];
        let ys = &mut y[s * g.out_size()..(s + 1) * g.out_size()];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let yo = &mut ys[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
                yo.copy_from_slice(bias);
                for ky in 0..3 {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.ih) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.iw) else {
                            continue;
                        };
                        let xi = &xs[(iy * g.iw + ix) * g.cin..(iy * g.iw + ix + 1) * g.cin];
                        let wk = &w[(ky * 3 + kx) * g.cin * g.cout..(ky * 3 + kx + 1) * g.cin * g.cout];
                        for (&xv, wr) in xi.iter().zip(wk.chunks_exact(g.cout)) {
                            if xv != 0.0 {
                                for (yv, &wv) in yo.iter_mut().zip(wr) {
                                    *yv += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    gy: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    b: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> Vec<f64> {
    let mut dx = if need_dx { vec![0.0; b * g.in_size()] } else { Vec::new() };
    let kstride = g.cin * g.cout;
    for s in 0..b {
        let xs = &x[s * g.in_size()..(s + 1) * g.in_size()];
        let gs = &gy[s * g.out_size()..(s + 1) * g.out_size()];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &gs[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
                for (d, &gv) in db.iter_mut().zip(go) {
                    *d += gv;
                }
                for ky in 0..3 {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad_top, g.ih) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad_left, g.iw) else {
                            continue;
                        };
                        let xoff = (iy * g.iw + ix) * g.cin;
                        let koff = (ky * 3 + kx) * kstride;
                        for ci in 0..g.cin {
                            let xv = xs[xoff + ci];
                            let row = koff + ci * g.cout;
                            let dwr = &mut dw[row..row + g.cout];
                            for (d, &gv) in dwr.iter_mut().zip(go) {
                                *d += xv * gv;
                            }
                            if need_dx {
                                let wr = &w[row..row + g.cout];
                                dx[s * g.in_size() + xoff + ci] +=
                                    wr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns mean loss and d(loss)/d(logits).
fn softmax_xent(logits: &[f64], labels: &[usize], c: usize) -> Result<(f64, Vec<f64>)> {
    let b = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((row, grow), &y) in logits.chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (gv, &l) in grow.iter_mut().zip(row) {
            *gv = (l - max).exp();
            z += *gv;
        }
        total += z.ln() - (row[y] - max);
        for gv in grow.iter_mut() {
            *gv /= z * b as f64;
        }
        grow[y] -= 1.0 / b as f64;
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}
