//! Small self-contained classifiers trained by SGD with momentum.
//!
//! Two architectures ship: [`Architecture::tinycnn`] (two 3×3 conv + ReLU + 2×2 max-pool
//! stages, then a hidden dense layer) and [`Architecture::mlp`]. Arithmetic is f64, but
//! parameters are kept f32-representable (initialization and every SGD update round to f32)
//! so checkpoints in the f32 tensor format round-trip bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Anything that can be queried for class scores. Ownership verification and heat-map
/// analysis only ever go through this trait.
pub trait Predictor: Sync {
    fn class_count(&self) -> usize;

    fn scores(&self, image: &Image) -> Result<Vec<f64>>;

    /// Index of the maximum score, ties resolved toward the lowest index.
    fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.scores(image)?))
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// 2D convolution, stride 1, zero "same" padding, odd square kernel.
    Conv { out_channels: usize, kernel: usize },
    /// 2×2 max-pool with stride 2 (odd trailing rows/columns are dropped).
    MaxPool,
    Dense { out: usize },
    /// `gain · (x − 0.5)`, applied to pixels in [0, 1].
    Center { gain: usize },
    Relu,
    Tanh,
}

/// Input shape plus layer list. The last layer must be a dense layer producing the class
/// scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy)]
struct Resolved {
    layer: Layer,
    input: Shape,
    output: Shape,
    /// Offset of the weights in the flat parameter vector, followed by the biases.
    offset: usize,
    weights: usize,
    biases: usize,
}

impl Architecture {
    pub fn tinycnn(input: Shape, class_count: usize) -> Self {
        Architecture::tinycnn_with(input, class_count, Layer::Relu)
    }

    /// The tiny CNN with a chosen activation (`Relu` or `Tanh`).
    pub fn tinycnn_with(input: Shape, class_count: usize, activation: Layer) -> Self {
        Architecture {
            input,
            layers: vec![
                Layer::Center { gain: 8 },
                Layer::Conv { out_channels: 8, kernel: 3 },
                activation,
                Layer::MaxPool,
                Layer::Conv { out_channels: 16, kernel: 3 },
                activation,
                Layer::MaxPool,
                Layer::Dense { out: 48 },
                activation,
                Layer::Dense { out: class_count },
            ],
        }
    }

    pub fn mlp(input: Shape, hidden: usize, class_count: usize) -> Self {
        Architecture { input, layers: vec![Layer::Dense { out: hidden }, Layer::Relu, Layer::Dense { out: class_count }] }
    }

    /// Builds one of the shipped architectures by name (`tinycnn`, `tinycnn-tanh`, `mlp`).
    pub fn named(name: &str, input: Shape, class_count: usize) -> Result<Self> {
        match name {
            "tinycnn" => Ok(Architecture::tinycnn(input, class_count)),
            "tinycnn-tanh" => Ok(Architecture::tinycnn_with(input, class_count, Layer::Tanh)),
            "mlp" => Ok(Architecture::mlp(input, 64, class_count)),
            other => Err(Error::Descriptor(format!("unknown architecture {other:?}"))),
        }
    }

    fn resolve(&self) -> Result<Vec<Resolved>> {
        let mut shape = self.input;
        if shape.is_empty() {
            return Err(Error::Descriptor("input shape has a zero dimension".into()));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for &layer in &self.layers {
            let (next, weights, biases) = match layer {
                Layer::Conv { out_channels, kernel } => {
                    if out_channels == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Descriptor(format!("conv needs positive channels and an odd kernel, got {out_channels}/{kernel}")));
                    }
                    let next = Shape { channels: out_channels, ..shape };
                    (next, out_channels * shape.channels * kernel * kernel, out_channels)
                }
                Layer::MaxPool => {
                    if shape.height < 2 || shape.width < 2 {
                        return Err(Error::Descriptor(format!("cannot pool a {}x{} map", shape.height, shape.width)));
                    }
                    (Shape { channels: shape.channels, height: shape.height / 2, width: shape.width / 2 }, 0, 0)
                }
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Descriptor("dense layer with zero outputs".into()));
                    }
                    (Shape { channels: out, height: 1, width: 1 }, out * shape.len(), out)
                }
                Layer::Center { gain: 0 } => return Err(Error::Descriptor("center gain must be positive".into())),
                Layer::Center { .. } | Layer::Relu | Layer::Tanh => (shape, 0, 0),
            };
            out.push(Resolved { layer, input: shape, output: next, offset, weights, biases });
            offset += weights + biases;
            shape = next;
        }
        match self.layers.last() {
            Some(Layer::Dense { .. }) => Ok(out),
            _ => Err(Error::Descriptor("architecture must end with a dense layer".into())),
        }
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.resolve()?.last().map(|r| r.output.len()).unwrap_or(0))
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.resolve()?.iter().map(|r| r.weights + r.biases).sum())
    }

    /// Text form, one layer per line:
    ///
    /// ```text
    /// input 1 32 32
    /// conv 8 3
    /// relu
    /// pool
    /// dense 3
    /// ```
    pub fn to_descriptor(&self) -> String {
        let mut s = format!("input {} {} {}\n", self.input.channels, self.input.height, self.input.width);
        for l in &self.layers {
            let _ = match l {
                Layer::Conv { out_channels, kernel } => writeln!(s, "conv {out_channels} {kernel}"),
                Layer::MaxPool => writeln!(s, "pool"),
                Layer::Dense { out } => writeln!(s, "dense {out}"),
                Layer::Center { gain } => writeln!(s, "center {gain}"),
                Layer::Relu => writeln!(s, "relu"),
                Layer::Tanh => writeln!(s, "tanh"),
            };
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                parts
                    .get(i)
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::Descriptor(format!("bad line {line:?}")))
            };
            match parts[0] {
                "input" => input = Some(Shape { channels: num(1)?, height: num(2)?, width: num(3)? }),
                "conv" => layers.push(Layer::Conv { out_channels: num(1)?, kernel: num(2)? }),
                "pool" => layers.push(Layer::MaxPool),
                "dense" => layers.push(Layer::Dense { out: num(1)? }),
                "center" => layers.push(Layer::Center { gain: num(1)? }),
                "relu" => layers.push(Layer::Relu),
                "tanh" => layers.push(Layer::Tanh),
                other => return Err(Error::Descriptor(format!("unknown layer {other:?}"))),
            }
        }
        let arch = Architecture { input: input.ok_or_else(|| Error::Descriptor("missing input line".into()))?, layers };
        arch.resolve()?;
        Ok(arch)
    }
}

/// A parameterized classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    plan: Vec<ResolvedPlan>,
    class_count: usize,
    params: Vec<f64>,
    pub epochs_seen: usize,
    pub seed: u64,
}

// `Resolved` without the layer copy, kept so `Classifier` can derive PartialEq.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ResolvedPlan {
    offset: usize,
    weights: usize,
    biases: usize,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Classifier {
    /// Scaled-uniform fan-in initialization: weights `U(−√(6/fan_in), √(6/fan_in))`, zero
    /// biases.
    pub fn init(arch: Architecture, class_count: usize, seed: u64) -> Result<Self> {
        let resolved = arch.resolve()?;
        let out_len = resolved.last().map(|r| r.output.len()).unwrap_or(0);
        if out_len != class_count {
            return Err(Error::Descriptor(format!(
                "architecture produces {out_len} outputs but class_count is {class_count}"
            )));
        }
        let total: usize = resolved.iter().map(|r| r.weights + r.biases).sum();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in &resolved {
            if r.weights == 0 {
                continue;
            }
            let fan_in = r.weights / r.biases;
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[r.offset..r.offset + r.weights] {
                *p = round_f32(rng.random_range(-bound..bound));
            }
        }
        let plan = resolved.iter().map(|r| ResolvedPlan { offset: r.offset, weights: r.weights, biases: r.biases }).collect();
        Ok(Classifier { arch, plan, class_count, params, epochs_seen: 0, seed })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces all parameters. Values are rounded to f32 to keep the checkpoint invariant.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::arg(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("non-finite parameter".into()));
        }
        self.params = params.into_iter().map(round_f32).collect();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `(offset, len)` of every weight tensor (biases excluded), in layer order.
    pub fn weight_ranges(&self) -> Vec<(usize, usize)> {
        self.plan.iter().filter(|p| p.weights > 0).map(|p| (p.offset, p.weights)).collect()
    }

    /// Output length of the final layer, regardless of `class_count` semantics.
    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    fn resolved(&self) -> Vec<Resolved> {
        // Validated at construction.
        self.arch.resolve().expect("architecture validated at init")
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let s = self.arch.input;
        if image.dims() != (s.height, s.width, s.channels) {
            return Err(Error::arg(format!(
                "image dims {:?} do not match model input {}x{}x{}",
                image.dims(),
                s.height,
                s.width,
                s.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let resolved = self.resolved();
        let trace = forward_trace(&resolved, &self.params, image.pixels());
        Ok(trace.activations.last().cloned().unwrap_or_default())
    }

    /// Cross-entropy loss of one sample and its parameter gradient.
    pub fn loss_and_grad(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_grad(image, label, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate_grad(&self, image: &Image, label: usize, grad: &mut [f64]) -> Result<f64> {
        self.check_input(image)?;
        if label >= self.class_count {
            return Err(Error::arg(format!("label {label} >= class count {}", self.class_count)));
        }
        let resolved = self.resolved();
        let trace = forward_trace(&resolved, &self.params, image.pixels());
        let logits = trace.activations.last().expect("at least one layer");
        let probs = softmax(logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut upstream = probs;
        upstream[label] -= 1.0;
        backward(&resolved, &self.params, &trace, upstream, grad);
        Ok(loss)
    }

    pub fn loss(&self, image: &Image, label: usize) -> Result<f64> {
        let logits = self.forward(image)?;
        Ok(-softmax(&logits)[label].max(f64::MIN_POSITIVE).ln())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Classifier::from_checkpoint_bytes(&fs::read(path)?)
    }

    /// Checkpoint layout:
    ///
    /// ```text
    /// "FDWM-CKPT"                 9 bytes
    /// version                     u16 LE
    /// descriptor length, text     u32 LE, UTF-8 (architecture + a `# trained` line)
    /// class_count                 u32 LE
    /// tensor count                u32 LE
    /// tensors                     shared tensor format, weights then bias per layer
    /// ```
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let descriptor = format!("{}# trained epochs={} seed={}\n", self.arch.to_descriptor(), self.epochs_seen, self.seed);
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(descriptor.as_bytes());
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        let tensors = self.param_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend(t.to_bytes());
        }
        out
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for r in self.resolved() {
            let dims = match r.layer {
                Layer::Conv { out_channels, kernel } => vec![out_channels, r.input.channels, kernel, kernel],
                Layer::Dense { out } => vec![out, r.input.len()],
                _ => continue,
            };
            let w = &self.params[r.offset..r.offset + r.weights];
            let b = &self.params[r.offset + r.weights..r.offset + r.weights + r.biases];
            out.push(Tensor::from_f64(dims, w).expect("dims match"));
            out.push(Tensor::from_f64(vec![r.biases], b).expect("dims match"));
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 9];
        read_exact(&mut cur, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut cur)?);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(read_array(&mut cur)?) as usize;
        if cur.len() < len {
            return Err(Error::Format("truncated checkpoint descriptor".into()));
        }
        let descriptor = std::str::from_utf8(&cur[..len]).map_err(|_| Error::Format("descriptor is not UTF-8".into()))?.to_string();
        cur = &cur[len..];
        let class_count = u32::from_le_bytes(read_array(&mut cur)?) as usize;
        let count = u32::from_le_bytes(read_array(&mut cur)?) as usize;
        let arch = Architecture::from_descriptor(&descriptor)?;
        let mut model = Classifier::init(arch, class_count, 0)?;
        let mut params = Vec::with_capacity(model.params.len());
        for _ in 0..count {
            let t = Tensor::read_from(&mut cur)?;
            params.extend(t.to_f64());
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        for line in descriptor.lines().filter(|l| l.starts_with("# trained")) {
            for kv in line.split_whitespace() {
                if let Some(v) = kv.strip_prefix("epochs=") {
                    model.epochs_seen = v.parse().unwrap_or(0);
                }
                if let Some(v) = kv.strip_prefix("seed=") {
                    model.seed = v.parse().unwrap_or(0);
                }
            }
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8; 9] = b"FDWM-CKPT";
const CKPT_VERSION: u16 = 1;

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_array<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(cur, &mut b)?;
    Ok(b)
}

impl Predictor for Classifier {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn scores(&self, image: &Image) -> Result<Vec<f64>> {
        self.forward(image)
    }
}

struct Trace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    /// Argmax input index per pooled output, for max-pool layers.
    pool_index: Vec<Vec<usize>>,
}

fn forward_trace(resolved: &[Resolved], params: &[f64], input: &[f64]) -> Trace {
    let mut activations = Vec::with_capacity(resolved.len() + 1);
    let mut pool_index = Vec::with_capacity(resolved.len());
    activations.push(input.to_vec());
    for r in resolved {
        let x = activations.last().expect("nonempty");
        let mut idx = Vec::new();
        let y = match r.layer {
            Layer::Conv { kernel, .. } => conv_forward(r, kernel, &params[r.offset..r.offset + r.weights + r.biases], x),
            Layer::MaxPool => pool_forward(r, x, &mut idx),
            Layer::Dense { .. } => dense_forward(r, &params[r.offset..r.offset + r.weights + r.biases], x),
            Layer::Center { gain } => x.iter().map(|&v| (v - 0.5) * gain as f64).collect(),
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Tanh => x.iter().map(|&v| v.tanh()).collect(),
        };
        pool_index.push(idx);
        activations.push(y);
    }
    Trace { activations, pool_index }
}

fn conv_forward(r: &Resolved, k: usize, p: &[f64], x: &[f64]) -> Vec<f64> {
    let (ci, h, w) = (r.input.channels, r.input.height, r.input.width);
    let co = r.output.channels;
    let (wts, bias) = p.split_at(r.weights);
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; co * h * w];
    for o in 0..co {
        let out = &mut y[o * h * w..(o + 1) * h * w];
        out.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..ci {
            let inp = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (i0, i1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (j0, j1) = valid_range(dx, w);
                    let wv = wts[((o * ci + c) * k + ky) * k + kx];
                    for i in i0..i1 {
                        let src = ((i as isize + dy) as usize) * w;
                        let orow = &mut out[i * w + j0..i * w + j1];
                        let irow = &inp[(src as isize + j0 as isize + dx) as usize..(src as isize + j1 as isize + dx) as usize];
                        for (o_v, &i_v) in orow.iter_mut().zip(irow) {
                            *o_v += wv * i_v;
                        }
                    }
                }
            }
        }
    }
    y
}

// Output rows `i` for which `i + d` stays inside `0..n`.
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}

fn pool_forward(r: &Resolved, x: &[f64], idx: &mut Vec<usize>) -> Vec<f64> {
    let (c, h, w) = (r.input.channels, r.input.height, r.input.width);
    let (oh, ow) = (r.output.height, r.output.width);
    let mut y = Vec::with_capacity(c * oh * ow);
    idx.reserve(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = ch * h * w + (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
                y.push(x[best]);
            }
        }
    }
    y
}

fn dense_forward(r: &Resolved, p: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = r.input.len();
    let (wts, bias) = p.split_at(r.weights);
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + wts[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn backward(resolved: &[Resolved], params: &[f64], trace: &Trace, mut upstream: Vec<f64>, grad: &mut [f64]) {
    for (l, r) in resolved.iter().enumerate().rev() {
        let x = &trace.activations[l];
        let y = &trace.activations[l + 1];
        upstream = match r.layer {
            Layer::Conv { kernel, .. } => conv_backward(r, kernel, params, x, &upstream, grad, l > 0),
            Layer::MaxPool => {
                let mut dx = vec![0.0; x.len()];
                for (&src, &g) in trace.pool_index[l].iter().zip(&upstream) {
                    dx[src] += g;
                }
                dx
            }
            Layer::Dense { .. } => dense_backward(r, params, x, &upstream, grad, l > 0),
            Layer::Center { gain } => upstream.iter().map(|&g| g * gain as f64).collect(),
            Layer::Relu => upstream.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
            Layer::Tanh => upstream.iter().zip(y).map(|(&g, &t)| g * (1.0 - t * t)).collect(),
        };
    }
}

fn conv_backward(
    r: &Resolved,
    k: usize,
    params: &[f64],
    x: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let (ci, h, w) = (r.input.channels, r.input.height, r.input.width);
    let co = r.output.channels;
    let wts = &params[r.offset..r.offset + r.weights];
    let (gw, gb) = grad[r.offset..r.offset + r.weights + r.biases].split_at_mut(r.weights);
    let pad = (k / 2) as isize;
    let mut dx = if need_dx { vec![0.0; ci * h * w] } else { Vec::new() };
    for o in 0..co {
        let dout = &dy[o * h * w..(o + 1) * h * w];
        gb[o] += dout.iter().sum::<f64>();
        for c in 0..ci {
            let inp = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let dyo = ky as isize - pad;
                let (i0, i1) = valid_range(dyo, h);
                for kx in 0..k {
                    let dxo = kx as isize - pad;
                    let (j0, j1) = valid_range(dxo, w);
                    let widx = ((o * ci + c) * k + ky) * k + kx;
                    let wv = wts[widx];
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let src = (i as isize + dyo) as usize * w;
                        let a = (src as isize + j0 as isize + dxo) as usize;
                        let b = (src as isize + j1 as isize + dxo) as usize;
                        let drow = &dout[i * w + j0..i * w + j1];
                        acc += drow.iter().zip(&inp[a..b]).map(|(g, v)| g * v).sum::<f64>();
                        if need_dx {
                            let dxrow = &mut dx[c * h * w + a..c * h * w + b];
                            for (d, &g) in dxrow.iter_mut().zip(drow) {
                                *d += wv * g;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    dx
}

fn dense_backward(r: &Resolved, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], need_dx: bool) -> Vec<f64> {
    let n_in = r.input.len();
    let wts = &params[r.offset..r.offset + r.weights];
    let (gw, gb) = grad[r.offset..r.offset + r.weights + r.biases].split_at_mut(r.weights);
    let mut dx = if need_dx { vec![0.0; n_in] } else { Vec::new() };
    for (o, &g) in dy.iter().enumerate() {
        gb[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &mut gw[o * n_in..(o + 1) * n_in];
        for (gwv, &xv) in row.iter_mut().zip(x) {
            *gwv += g * xv;
        }
        if need_dx {
            for (d, &wv) in dx.iter_mut().zip(&wts[o * n_in..(o + 1) * n_in]) {
                *d += g * wv;
            }
        }
    }
    dx
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rescales each minibatch gradient to at most this L2 norm. `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Feed each training sample through a random horizontal flip and circular shift.
    pub augment: bool,
}

impl Default for TrainConfig {
    /// SGD with lr 0.01, momentum 0.9 and batch 512, 30 epochs.
    fn default() -> Self {
        TrainConfig { learning_rate: 0.01, momentum: 0.9, batch_size: 512, epochs: 30, seed: 0, clip_norm: None, augment: false }
    }
}

impl TrainConfig {
    /// Desk-scale profile: the default optimizer with batch 64.
    pub fn desk(seed: u64) -> Self {
        TrainConfig { batch_size: 64, seed, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::arg(format!("clip norm {c} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μv − lr·g`, `θ ← θ + v`, with θ rounded to f32 after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64, n: usize) -> Self {
        MomentumSgd { learning_rate, momentum, velocity: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v - self.learning_rate * g;
            *p = round_f32(*p + *v);
        }
    }
}

/// A sample reference fed to training and evaluation.
pub type Example<'a> = (&'a Image, usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub train_loss: Vec<f64>,
    /// `None` when no validation samples were supplied.
    pub val_accuracy: Vec<Option<f64>>,
}

/// Trains `model` with seeded per-epoch shuffling and minibatch SGD with momentum.
///
/// Single-threaded and fully determined by the model, data order and `cfg`.
pub fn train(model: &Classifier, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<(Classifier, History)> {
    cfg.validate()?;
    if let Some((_, l)) = train_set.iter().chain(val_set).find(|(_, l)| *l >= model.class_count) {
        return Err(Error::arg(format!("label {l} >= class count {}", model.class_count)));
    }
    for (img, _) in train_set.iter().chain(val_set) {
        model.check_input(img)?;
    }
    let mut model = model.clone();
    let mut opt = MomentumSgd::new(cfg.learning_rate, cfg.momentum, model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut grad = vec![0.0; model.params.len()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (img, label) = train_set[i];
                batch_loss += if cfg.augment {
                    model.accumulate_grad(&augment(img, &mut aug_rng), label, &mut grad)?
                } else {
                    model.accumulate_grad(img, label, &mut grad)?
                };
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss became {batch_loss} at epoch {epoch}, batch {b}")));
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if let Some(limit) = cfg.clip_norm {
                clip_to_norm(&mut grad, limit);
            }
            opt.step(&mut model.params, &grad);
            total_loss += batch_loss;
        }
        if let Some(bad) = model.params.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter became {bad} at epoch {epoch}")));
        }
        model.epochs_seen += 1;
        history.train_loss.push(if train_set.is_empty() { 0.0 } else { total_loss / train_set.len() as f64 });
        history.val_accuracy.push(if val_set.is_empty() { None } else { Some(evaluate(&model, val_set)?) });
    }
    Ok((model, history))
}

/// Random horizontal flip followed by a random circular shift.
pub fn augment(image: &Image, rng: &mut impl Rng) -> Image {
    let (h, w, d) = image.dims();
    let flip = rng.random_bool(0.5);
    let (dy, dx) = (rng.random_range(0..h), rng.random_range(0..w));
    Image::from_fn(h, w, d, |k, i, j| {
        let jj = (j + dx) % w;
        image.get(k, (i + dy) % h, if flip { w - 1 - jj } else { jj })
    })
    .expect("dims unchanged")
}

fn clip_to_norm(grad: &mut [f64], limit: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// One full-batch gradient step; returns the loss before the step.
pub fn full_batch_step(model: &mut Classifier, batch: &[Example], opt: &mut MomentumSgd) -> Result<f64> {
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for &(img, label) in batch {
        loss += model.accumulate_grad(img, label, &mut grad)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    opt.step(&mut model.params, &grad);
    Ok(loss * scale)
}

/// Predictions for every example, computed in parallel when enabled.
pub fn predict_all<P: Predictor + ?Sized>(model: &P, images: &[&Image]) -> Result<Vec<usize>> {
    crate::par::map(images, |img| model.predict(img)).into_iter().collect()
}

/// Top-1 accuracy.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, samples: &[Example]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty set"));
    }
    let hits: Vec<Result<bool>> = crate::par::map(samples, |(img, label)| Ok(model.predict(img)? == *label));
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because a ReLU or max-pool switched branch between the `±h`
    /// evaluations.
    pub skipped_kinks: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

// Per-layer branch pattern: ReLU signs and max-pool winners.
fn branch_signature(resolved: &[Resolved], params: &[f64], input: &[f64]) -> Vec<u64> {
    let trace = forward_trace(resolved, params, input);
    let mut sig = Vec::new();
    for (l, r) in resolved.iter().enumerate() {
        match r.layer {
            Layer::Relu => sig.extend(trace.activations[l].iter().map(|&v| u64::from(v > 0.0))),
            Layer::MaxPool => sig.extend(trace.pool_index[l].iter().map(|&i| i as u64)),
            _ => {}
        }
    }
    sig
}

/// Compares backprop against central differences with step 1e-4 for every parameter.
///
/// The relative error of one parameter is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &Classifier, image: &Image, label: usize) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(image, label)?;
    let resolved = model.resolved();
    let base_sig = branch_signature(&resolved, &model.params, image.pixels());
    let mut params = model.params.clone();
    let loss_at = |p: &[f64]| -> f64 {
        let trace = forward_trace(&resolved, p, image.pixels());
        let probs = softmax(trace.activations.last().expect("layers"));
        -probs[label].ln()
    };
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, skipped_kinks: 0 };
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + GRAD_CHECK_STEP;
        let plus_sig = branch_signature(&resolved, &params, image.pixels());
        let lp = loss_at(&params);
        params[i] = orig - GRAD_CHECK_STEP;
        let minus_sig = branch_signature(&resolved, &params, image.pixels());
        let lm = loss_at(&params);
        params[i] = orig;
        if plus_sig != base_sig || minus_sig != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
