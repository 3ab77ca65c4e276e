//! Query/key encoder pair: a pluggable backbone, a shared hidden projection
//! layer, and separate final layers for the instance and group heads.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{LayerSpec, Net, Scalar, Shape, Tape};
use crate::rng::{self, tag};

/// Samples per gradient-reduction chunk. Fixed so gradient sums do not
/// depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    /// Four conv/group-norm/ReLU blocks with global average pooling.
    DeskCnn,
    /// Bottleneck ResNet-50 with group normalization.
    Resnet50,
}

impl BackboneId {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::DeskCnn => "desk_cnn",
            BackboneId::Resnet50 => "resnet50",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk_cnn" => Ok(BackboneId::DeskCnn),
            "resnet50" => Ok(BackboneId::Resnet50),
            other => Err(invalid(format!("unknown backbone `{other}` (expected desk_cnn or resnet50)"))),
        }
    }
}

fn conv(out_c: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_c,
        kernel,
        stride,
        pad: kernel / 2,
        bias: false,
    }
}

fn desk_cnn_layers(widths: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        layers.push(conv(w, 3, if i == 0 { 1 } else { 2 }));
        layers.push(LayerSpec::GroupNorm { groups: 8.min(w) });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

fn resnet50_layers() -> Vec<LayerSpec> {
    let norm = |c: usize| LayerSpec::GroupNorm { groups: 32.min(c) };
    let mut layers = vec![
        LayerSpec::Conv {
            out_c: 64,
            kernel: 7,
            stride: 2,
            pad: 3,
            bias: false,
        },
        norm(64),
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ];
    let mut in_c = 64;
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let out_c = width * 4;
            let body = vec![
                conv(width, 1, 1),
                norm(width),
                LayerSpec::Relu,
                conv(width, 3, stride),
                norm(width),
                LayerSpec::Relu,
                conv(out_c, 1, 1),
                norm(out_c),
            ];
            let shortcut = if in_c != out_c || stride != 1 {
                vec![
                    LayerSpec::Conv {
                        out_c,
                        kernel: 1,
                        stride,
                        pad: 0,
                        bias: false,
                    },
                    norm(out_c),
                ]
            } else {
                Vec::new()
            };
            layers.push(LayerSpec::Residual { body, shortcut });
            layers.push(LayerSpec::Relu);
            in_c = out_c;
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

/// Everything needed to rebuild an encoder's layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub input: Shape,
    pub backbone: Vec<LayerSpec>,
    pub hidden_dim: usize,
    pub proj_dim: usize,
}

impl EncoderSpec {
    pub fn for_backbone(id: BackboneId, input_size: usize, hidden_dim: usize, proj_dim: usize) -> Self {
        let backbone = match id {
            BackboneId::DeskCnn => desk_cnn_layers(&[16, 32, 64, 128]),
            BackboneId::Resnet50 => resnet50_layers(),
        };
        EncoderSpec {
            name: id.as_str().to_string(),
            input: Shape::new(CHANNELS, input_size, input_size),
            backbone,
            hidden_dim,
            proj_dim,
        }
    }

    /// Backbone-free encoder: the heads alone form a two-layer MLP on a flat input.
    pub fn mlp(inputs: usize, hidden_dim: usize, proj_dim: usize) -> Self {
        EncoderSpec {
            name: "mlp".into(),
            input: Shape::flat(inputs),
            backbone: Vec::new(),
            hidden_dim,
            proj_dim,
        }
    }
}

/// Resolved encoder layout over one flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    backbone: Net,
    hidden: Net,
    inst: Net,
    group: Net,
    n_params: usize,
}

/// Per-sample saved activations of a forward pass.
#[derive(Clone, Debug)]
pub struct SampleTape<T> {
    backbone: Tape<T>,
    hidden: Tape<T>,
    inst: Tape<T>,
    group: Option<Tape<T>>,
}

/// Output of one sample: pooled backbone features and raw (unnormalized) head outputs.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub pooled: Vec<T>,
    pub inst: Vec<T>,
    pub group: Option<Vec<T>>,
    pub tape: Option<SampleTape<T>>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.hidden_dim == 0 || spec.proj_dim == 0 {
            return Err(invalid("head dimensions must be positive"));
        }
        let mut offset = 0;
        let backbone = Net::build(&spec.backbone, spec.input, &mut offset)?;
        let feat = backbone.output_shape();
        let hidden = Net::build(
            &[
                LayerSpec::Linear {
                    outputs: spec.hidden_dim,
                },
                LayerSpec::Relu,
            ],
            feat,
            &mut offset,
        )?;
        let head = [LayerSpec::Linear {
            outputs: spec.proj_dim,
        }];
        let inst = Net::build(&head, hidden.output_shape(), &mut offset)?;
        let group = Net::build(&head, hidden.output_shape(), &mut offset)?;
        Ok(Encoder {
            spec,
            backbone,
            hidden,
            inst,
            group,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.param_count()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    /// Dimension of the pooled backbone features.
    pub fn feature_dim(&self) -> usize {
        self.backbone.output_shape().len()
    }

    pub fn proj_dim(&self) -> usize {
        self.spec.proj_dim
    }

    pub fn backbone_macs(&self) -> usize {
        self.backbone.macs()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut params = vec![T::zero(); self.n_params];
        let mut r = rng::stream(seed, &[tag::INIT]);
        for net in [&self.backbone, &self.hidden, &self.inst, &self.group] {
            net.init(&mut params, &mut r);
        }
        params
    }

    /// Pooled backbone features only (no heads).
    pub fn features<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        self.backbone.forward(params, x, None)
    }

    pub fn encode<T: Scalar>(&self, params: &[T], x: &[T], with_group: bool, record: bool) -> Encoded<T> {
        let mut tape = record.then(|| SampleTape {
            backbone: Tape::new(),
            hidden: Tape::new(),
            inst: Tape::new(),
            group: with_group.then(Tape::new),
        });
        let pooled = self.backbone.forward(params, x, tape.as_mut().map(|t| &mut t.backbone));
        let hidden = self.hidden.forward(params, &pooled, tape.as_mut().map(|t| &mut t.hidden));
        let inst = self.inst.forward(params, &hidden, tape.as_mut().map(|t| &mut t.inst));
        let group =
            with_group.then(|| self.group.forward(params, &hidden, tape.as_mut().and_then(|t| t.group.as_mut())));
        Encoded {
            pooled,
            inst,
            group,
            tape,
        }
    }

    /// Accumulate parameter gradients for one sample given the gradients
    /// of the raw head outputs.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        tape: &SampleTape<T>,
        d_inst: Option<&[T]>,
        d_group: Option<&[T]>,
        grads: &mut [T],
    ) {
        let mut d_hidden = vec![T::zero(); self.hidden.output_shape().len()];
        let mut touched = false;
        if let Some(d) = d_inst {
            let dh = self.inst.backward(params, &tape.inst, d, grads, true).expect("input grad");
            d_hidden.iter_mut().zip(&dh).for_each(|(a, &b)| *a = *a + b);
            touched = true;
        }
        if let Some(d) = d_group {
            let gt = tape.group.as_ref().expect("group head was not recorded");
            let dh = self.group.backward(params, gt, d, grads, true).expect("input grad");
            d_hidden.iter_mut().zip(&dh).for_each(|(a, &b)| *a = *a + b);
            touched = true;
        }
        if !touched {
            return;
        }
        let d_pooled = self
            .hidden
            .backward(params, &tape.hidden, &d_hidden, grads, true)
            .expect("input grad");
        if !self.spec.backbone.is_empty() {
            self.backbone.backward(params, &tape.backbone, &d_pooled, grads, false);
        }
    }

    /// Encode a batch in parallel; output order follows input order.
    pub fn encode_batch<T: Scalar>(&self, params: &[T], inputs: &[Vec<T>], with_group: bool, record: bool) -> Vec<Encoded<T>> {
        inputs
            .par_iter()
            .map(|x| self.encode(params, x, with_group, record))
            .collect()
    }

    pub fn features_batch<T: Scalar>(&self, params: &[T], inputs: &[Vec<T>]) -> Vec<Vec<T>> {
        inputs.par_iter().map(|x| self.features(params, x)).collect()
    }

    /// Backbone parameters occupy `0..backbone_param_count()` of the flat buffer.
    pub fn backbone_params<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[..self.backbone.param_count()]
    }

    /// Pooled features with a tape for [`Encoder::backbone_backward`].
    pub fn backbone_forward<T: Scalar>(&self, params: &[T], x: &[T]) -> (Vec<T>, Tape<T>) {
        let mut tape = Tape::new();
        let pooled = self.backbone.forward(params, x, Some(&mut tape));
        (pooled, tape)
    }

    pub fn backbone_backward<T: Scalar>(&self, params: &[T], tape: &Tape<T>, d_pooled: &[T], grads: &mut [T]) {
        if !self.spec.backbone.is_empty() {
            self.backbone.backward(params, tape, d_pooled, grads, false);
        }
    }

    /// Backward a batch. `d_inst`/`d_group` hold one row of `proj_dim` values
    /// per sample. Gradients are reduced in fixed-size chunks, in order.
    pub fn backward_batch<T: Scalar>(
        &self,
        params: &[T],
        batch: &[Encoded<T>],
        d_inst: Option<&[T]>,
        d_group: Option<&[T]>,
        grads: &mut [T],
    ) {
        let m = self.spec.proj_dim;
        let partials: Vec<Vec<T>> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut local = vec![T::zero(); self.n_params];
                for (j, enc) in chunk.iter().enumerate() {
                    let i = ci * GRAD_CHUNK + j;
                    let tape = enc.tape.as_ref().expect("backward needs a recorded forward pass");
                    let di = d_inst.map(|d| &d[i * m..(i + 1) * m]);
                    let dg = d_group.map(|d| &d[i * m..(i + 1) * m]);
                    self.backward(params, tape, di, dg, &mut local);
                }
                local
            })
            .collect();
        for part in partials {
            grads.iter_mut().zip(&part).for_each(|(g, &p)| *g = *g + p);
        }
    }
}

/// Per-channel input standardization applied at the encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl InputNorm {
    /// Channel statistics of a set of images, on the [0, 1] scale.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.plane(c) {
                    let v = f64::from(v) / 255.0;
                    *s += v;
                    *q += v * v;
                }
            }
            n += img.height() * img.width();
        }
        if n == 0 {
            return Err(invalid("cannot estimate input statistics from no pixels"));
        }
        let mut out = InputNorm::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            out.mean[c] = mean;
            out.std[c] = (sq[c] / n as f64 - mean * mean).max(1e-8).sqrt();
        }
        Ok(out)
    }

    pub fn apply<T: Scalar>(&self, img: &Image) -> Vec<T> {
        let mut out = Vec::with_capacity(img.data().len());
        for c in 0..CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            out.extend(img.plane(c).iter().map(|&v| T::of((f64::from(v) / 255.0 - m) / s)));
        }
        out
    }
}

/// Row-wise L2 normalization of raw head outputs, lifted to f64.
#[derive(Clone, Debug)]
pub struct Projection {
    pub unit: Array2<f64>,
    norms: Vec<f64>,
}

impl Projection {
    pub fn from_rows<T: Scalar>(rows: impl IntoIterator<Item = impl AsRef<[T]>>, dim: usize) -> Result<Self> {
        let mut data = Vec::new();
        let mut norms = Vec::new();
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape(format!("row of {} values, expected {dim}", row.len())));
            }
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| v.f64() / norm));
            norms.push(norm);
        }
        let unit = Array2::from_shape_vec((norms.len(), dim), data).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Projection { unit, norms })
    }

    /// Gradient w.r.t. the raw rows given the gradient w.r.t. the unit rows:
    /// `(d − u·(u·d)) / ‖z‖`, flattened row-major.
    pub fn backward<T: Scalar>(&self, d_unit: &Array2<f64>) -> Vec<T> {
        let mut out = Vec::with_capacity(d_unit.len());
        for ((u, d), &n) in self.unit.rows().into_iter().zip(d_unit.rows()).zip(&self.norms) {
            let dot = u.dot(&d);
            out.extend(u.iter().zip(d.iter()).map(|(&u, &d)| T::of((d - u * dot) / n)));
        }
        out
    }
}

/// Query and key parameter sets of one encoder layout.
#[derive(Clone, Debug)]
pub struct EncoderState<T> {
    pub encoder: Encoder,
    pub query: Vec<T>,
    pub key: Vec<T>,
}

impl<T: Scalar> EncoderState<T> {
    /// Fresh state with the key encoder initialized to the query encoder.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(spec)?;
        let query = encoder.init_params::<T>(seed);
        Ok(EncoderState {
            key: query.clone(),
            query,
            encoder,
        })
    }

    pub fn from_params(spec: EncoderSpec, query: Vec<T>, key: Vec<T>) -> Result<Self> {
        let encoder = Encoder::new(spec)?;
        if query.len() != encoder.param_count() || key.len() != encoder.param_count() {
            return Err(Error::Shape(format!(
                "parameter buffers of {} and {} values, layout needs {}",
                query.len(),
                key.len(),
                encoder.param_count()
            )));
        }
        Ok(EncoderState { encoder, query, key })
    }
}

/// Build a query/key encoder pair by backbone name.
pub fn build_encoder<T: Scalar>(
    backbone_id: &str,
    input_size: usize,
    hidden_dim: usize,
    proj_dim: usize,
    seed: u64,
) -> Result<EncoderState<T>> {
    let id: BackboneId = backbone_id.parse()?;
    EncoderState::new(EncoderSpec::for_backbone(id, input_size, hidden_dim, proj_dim), seed)
}
