//! The two network families: a dense-block clip detector and a per-frame
//! segmenter with an optional frequency-convolution front end.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Conv2d, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorSpec {
    pub frames: usize,
    pub bands: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub kernel: usize,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            frames: 64,
            bands: 47,
            blocks: 2,
            layers_per_block: 3,
            growth: 8,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmenterSpec {
    pub frames: usize,
    pub bands: usize,
    /// Frequency convolution front end; without it every band feeds the
    /// temporal stack as its own channel.
    pub freq_conv: bool,
    pub freq_filters: usize,
    pub freq_kernel: usize,
    pub hidden: usize,
    pub time_kernel: usize,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self {
            frames: 64,
            bands: 47,
            freq_conv: true,
            freq_filters: 25,
            freq_kernel: 9,
            hidden: 16,
            time_kernel: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Detector(DetectorSpec),
    Segmenter(SegmenterSpec),
}

pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Kaiming,
    Head,
    Zero,
}

/// One declared parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn conv_decls(out: &mut Vec<ParamDecl>, prefix: &str, shape: [usize; 4], init: Init) {
    out.push(ParamDecl {
        name: format!("{prefix}.weight"),
        shape: shape.to_vec(),
        init,
    });
    out.push(ParamDecl {
        name: format!("{prefix}.bias"),
        shape: vec![shape[0]],
        init: Init::Zero,
    });
}

impl Architecture {
    pub fn frames(&self) -> usize {
        match self {
            Self::Detector(d) => d.frames,
            Self::Segmenter(s) => s.frames,
        }
    }

    pub fn bands(&self) -> usize {
        match self {
            Self::Detector(d) => d.bands,
            Self::Segmenter(s) => s.bands,
        }
    }

    pub fn is_segmenter(&self) -> bool {
        matches!(self, Self::Segmenter(_))
    }

    /// Number of labels per example: one per clip or one per frame.
    pub fn labels_per_example(&self) -> usize {
        match self {
            Self::Detector(_) => 1,
            Self::Segmenter(s) => s.frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Detector(d) => {
                d.frames >> (d.blocks.saturating_sub(1)) >= 1
                    && d.bands >> (d.blocks.saturating_sub(1)) >= 1
                    && d.blocks >= 1
                    && d.layers_per_block >= 1
                    && d.growth >= 1
                    && d.kernel % 2 == 1
            }
            Self::Segmenter(s) => {
                s.frames >= 1
                    && s.bands >= 1
                    && s.hidden >= 1
                    && s.time_kernel >= 1
                    && (!s.freq_conv || (s.freq_filters >= 1 && s.freq_kernel >= 1))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("invalid architecture: {self}")))
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        match self {
            Self::Detector(d) => {
                let mut channels = 1;
                for b in 0..d.blocks {
                    for l in 0..d.layers_per_block {
                        let cin = channels + l * d.growth;
                        conv_decls(
                            &mut out,
                            &format!("block{b}.conv{l}"),
                            [d.growth, cin, d.kernel, d.kernel],
                            Init::Kaiming,
                        );
                    }
                    channels += d.layers_per_block * d.growth;
                }
                conv_decls(&mut out, "head", [CLASSES, channels, 1, 1], Init::Head);
            }
            Self::Segmenter(s) => {
                let cin = if s.freq_conv {
                    conv_decls(&mut out, "freq", [s.freq_filters, 1, 1, s.freq_kernel], Init::Kaiming);
                    s.freq_filters
                } else {
                    s.bands
                };
                conv_decls(&mut out, "time0", [s.hidden, cin, s.time_kernel, 1], Init::Kaiming);
                conv_decls(&mut out, "time1", [s.hidden, s.hidden, s.time_kernel, 1], Init::Kaiming);
                conv_decls(&mut out, "head", [CLASSES, s.hidden, 1, 1], Init::Head);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Logits `[n, 2, h, w]` for input `[n, 1, frames, bands]`: `h = w = 1`
    /// for the detector, `h = frames, w = 1` for the segmenter.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        if (c, h, w) != (1, self.frames(), self.bands()) {
            return Err(Error::Shape(format!(
                "input [_, {c}, {h}, {w}] does not match architecture [_, 1, {}, {}]",
                self.frames(),
                self.bands()
            )));
        }
        match self {
            Self::Detector(d) => {
                let mut x = x;
                for b in 0..d.blocks {
                    if b > 0 {
                        x = tape.avg_pool2(x)?;
                    }
                    let mut feats = vec![x];
                    for l in 0..d.layers_per_block {
                        let input = if feats.len() == 1 { feats[0] } else { tape.concat(&feats)? };
                        let name = format!("block{b}.conv{l}");
                        let y = tape.conv2d(input, p.w(&name)?, p.b(&name)?, Conv2d::same(d.kernel))?;
                        feats.push(tape.relu(y));
                    }
                    x = tape.concat(&feats)?;
                }
                let pooled = tape.global_avg_pool(x)?;
                tape.conv2d(pooled, p.w("head")?, p.b("head")?, Conv2d::pointwise())
            }
            Self::Segmenter(s) => {
                let feats = if s.freq_conv {
                    let y = tape.conv2d(x, p.w("freq")?, p.b("freq")?, Conv2d::along_width(s.freq_kernel))?;
                    let y = tape.relu(y);
                    tape.max_over_width(y)?
                } else {
                    tape.bands_to_channels(x)?
                };
                let y = tape.conv2d(feats, p.w("time0")?, p.b("time0")?, Conv2d::causal_time(s.time_kernel))?;
                let y = tape.relu(y);
                let y = tape.conv2d(y, p.w("time1")?, p.b("time1")?, Conv2d::causal_time(s.time_kernel))?;
                let y = tape.relu(y);
                tape.conv2d(y, p.w("head")?, p.b("head")?, Conv2d::pointwise())
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Detector(d) => write!(
                f,
                "detector frames={} bands={} blocks={} layers={} growth={} kernel={}",
                d.frames, d.bands, d.blocks, d.layers_per_block, d.growth, d.kernel
            ),
            Self::Segmenter(s) => write!(
                f,
                "segmenter frames={} bands={} freq_conv={} freq_filters={} freq_kernel={} hidden={} time_kernel={}",
                s.frames, s.bands, s.freq_conv, s.freq_filters, s.freq_kernel, s.hidden, s.time_kernel
            ),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or_default();
        let mut kv = BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidParam(format!("bad architecture field {part:?}")))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::InvalidParam(format!("architecture is missing {k}")))?
                .parse()
                .map_err(|_| Error::InvalidParam(format!("architecture field {k} is not a number")))
        };
        let arch = match kind {
            "detector" => Self::Detector(DetectorSpec {
                frames: num("frames")?,
                bands: num("bands")?,
                blocks: num("blocks")?,
                layers_per_block: num("layers")?,
                growth: num("growth")?,
                kernel: num("kernel")?,
            }),
            "segmenter" => Self::Segmenter(SegmenterSpec {
                frames: num("frames")?,
                bands: num("bands")?,
                freq_conv: kv
                    .get("freq_conv")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::InvalidParam("architecture freq_conv must be true or false".into()))?,
                freq_filters: num("freq_filters")?,
                freq_kernel: num("freq_kernel")?,
                hidden: num("hidden")?,
                time_kernel: num("time_kernel")?,
            }),
            other => return Err(Error::InvalidParam(format!("unknown architecture {other:?}"))),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Parameters bound into a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    fn w(&self, layer: &str) -> Result<Var> {
        self.get(&format!("{layer}.weight"))
    }

    fn b(&self, layer: &str) -> Result<Var> {
        self.get(&format!("{layer}.bias"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub params: BTreeMap<String, Tensor<T>>,
    /// Momentum buffers, same keys and lengths as `params`.
    pub velocity: BTreeMap<String, Vec<T>>,
    /// Describes the input representation the model was trained on.
    pub representation: String,
}

pub struct Backward<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<T>>,
    /// Gradient with respect to the `[n, 1, frames, bands]` input.
    pub input: Vec<T>,
    /// Softmax output in `[n, 2, h, w]` layout.
    pub probs: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for decl in arch.params() {
            let n: usize = decl.shape.iter().product();
            let fan_in: usize = decl.shape[1..].iter().product::<usize>().max(1);
            let std = match decl.init {
                Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
                Init::Head => (1.0 / fan_in as f64).sqrt(),
                Init::Zero => 0.0,
            };
            let mut rng = derived_rng(seed, &format!("init/{}", decl.name));
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(std * z)
                })
                .collect();
            velocity.insert(decl.name.clone(), vec![T::zero(); n]);
            params.insert(decl.name.clone(), Tensor::new(decl.shape, data)?);
        }
        Ok(Self {
            arch,
            params,
            velocity,
            representation: String::new(),
        })
    }

    /// Checks that every declared parameter is present with its declared shape.
    pub fn validate(&self) -> Result<()> {
        let decls = self.arch.params();
        if decls.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture declaring {}",
                self.params.len(),
                decls.len()
            )));
        }
        for d in decls {
            match self.params.get(&d.name) {
                Some(t) if t.shape == d.shape && t.data.len() == t.shape.iter().product::<usize>() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        d.name, t.shape, d.shape
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {}", d.name))),
            }
            if self.velocity.get(&d.name).map(Vec::len) != Some(self.params[&d.name].len()) {
                return Err(Error::Shape(format!("momentum buffer for {} is missing or mis-sized", d.name)));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            velocity: self
                .velocity
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::of(x.as_f64())).collect()))
                .collect(),
            representation: self.representation.clone(),
        }
    }

    /// Softmax probabilities in `[n, 2, h, w]` layout.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let logits = self.arch.logits(&mut tape, &p, xv)?;
        Ok(softmax_channels(tape.value(logits)))
    }

    /// Loss, parameter gradients and input gradient of the mean cross-entropy.
    pub fn backward(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Backward<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, true);
        let xv = tape.leaf(x.clone(), true);
        let logits = self.arch.logits(&mut tape, &p, xv)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let mut g = tape.backward(loss)?;
        let grads = p
            .iter()
            .map(|(k, &v)| {
                let n = self.params[k].len();
                (k.clone(), g.take(v).unwrap_or_else(|| vec![T::zero(); n]))
            })
            .collect();
        Ok(Backward {
            loss: tape.value(loss).data[0].as_f64(),
            grads,
            input: g.take(xv).unwrap_or_else(|| vec![T::zero(); x.len()]),
            probs: tape.probabilities(loss).map(<[T]>::to_vec).unwrap_or_default(),
        })
    }

    /// Call probability per clip (detector) or per frame (segmenter),
    /// evaluated in chunks to bound memory.
    pub fn predict(&self, specs: &[&Spectrogram]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(64) {
            let x = batch_tensor::<T>(chunk)?;
            let probs = self.forward(&x)?;
            let [n, _, h, w] = probs.dims4()?;
            let plane = h * w;
            for i in 0..n {
                let pos = &probs.data[(i * CLASSES + 1) * plane..(i * CLASSES + 2) * plane];
                out.push(pos.iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok(out)
    }
}

/// Softmax over the channel axis of `[n, c, h, w]`.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.dims4().expect("logits are 4-d");
    let plane = h * w;
    let mut out = vec![T::zero(); logits.len()];
    for i in 0..n {
        for q in 0..plane {
            let at = |k: usize| (i * c + k) * plane + q;
            let m = (0..c).map(|k| logits.data[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (logits.data[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[at(k)] = out[at(k)] / z;
            }
        }
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

/// Stacks spectrograms into `[n, 1, frames, bands]`.
pub fn batch_tensor<T: Real>(specs: &[&Spectrogram]) -> Result<Tensor<T>> {
    let first = specs.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (f, b) = (first.frames, first.bands);
    let mut data = Vec::with_capacity(specs.len() * f * b);
    for s in specs {
        if (s.frames, s.bands) != (f, b) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {f}x{b} spectrograms",
                s.frames, s.bands
            )));
        }
        data.extend(s.data.iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![specs.len(), 1, f, b], data)
}

/// Random tensor with entries in `[-1, 1)`; handy for tests and probes.
pub fn uniform_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(),
    }
}
