//! The two encoders, four classifier heads and optional decoder.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    BatchNorm,
    Relu,
    MaxPool { kernel: usize, stride: usize },
    /// Flattens any spatial input first.
    Linear { out_features: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl EncoderSpec {
    /// Conv(32,5) BN ReLU, MaxPool(2,2), Conv(64,5) BN ReLU, MaxPool(2,2), Linear.
    pub fn mnist(latent_dim: usize) -> Self {
        Self::conv_stack([1, 28, 28], [32, 64], 5, latent_dim)
    }

    /// Same layout with configurable widths and kernel.
    pub fn conv_stack(input_shape: [usize; 3], channels: [usize; 2], kernel: usize, latent_dim: usize) -> Self {
        use LayerSpec::*;
        EncoderSpec {
            input_shape,
            layers: vec![
                Conv {
                    out_channels: channels[0],
                    kernel,
                },
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Conv {
                    out_channels: channels[1],
                    kernel,
                },
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Linear {
                    out_features: latent_dim,
                },
            ],
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features }) => *out_features,
            _ => 0,
        }
    }

    /// Per-sample shape after each layer; fails if the stack does not fit the input.
    pub fn trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        if shape.contains(&0) {
            return Err(Error::config("model.encoder.input_shape", "extents must be positive"));
        }
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let field = format!("model.encoder.layers[{i}]");
            shape = match *layer {
                LayerSpec::Conv { out_channels, kernel } => {
                    let [_, h, w] = shape[..] else {
                        return Err(Error::config(field, "conv needs a spatial input"));
                    };
                    if out_channels == 0 || kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::config(field, format!("conv kernel {kernel} does not fit {h}x{w}")));
                    }
                    vec![out_channels, h - kernel + 1, w - kernel + 1]
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => shape,
                LayerSpec::MaxPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::config(field, "max-pool needs a spatial input"));
                    };
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(Error::config(field, format!("pool window {kernel} does not fit {h}x{w}")));
                    }
                    vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerSpec::Linear { out_features } => {
                    if out_features == 0 {
                        return Err(Error::config(field, "out_features must be positive"));
                    }
                    vec![out_features]
                }
            };
            out.push(shape.clone());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::config("model.encoder.layers", "the last layer must be linear"));
        }
        Ok(out)
    }
}

/// Linear -> unflatten -> (upsample, transposed conv, ReLU) -> (upsample, transposed conv).
///
/// Output side length is `4 * base + 3 * (kernel - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub channels: [usize; 2],
    pub base: usize,
    pub kernel: usize,
}

impl DecoderSpec {
    pub fn mnist() -> Self {
        DecoderSpec {
            channels: [64, 32],
            base: 4,
            kernel: 5,
        }
    }

    pub fn output_side(&self) -> usize {
        4 * self.base + 3 * (self.kernel - 1)
    }

    /// A decoder whose output matches a square `side`, if one exists for kernel 5 or 3.
    pub fn fitting(side: usize) -> Option<Self> {
        [5usize, 3].into_iter().find_map(|k| {
            let rest = side.checked_sub(3 * (k - 1))?;
            (rest > 0 && rest % 4 == 0).then_some(DecoderSpec {
                channels: [32, 16],
                base: rest / 4,
                kernel: k,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub encoder: EncoderSpec,
    pub num_ids: usize,
    pub num_domains: usize,
    #[serde(default)]
    pub decoder: Option<DecoderSpec>,
}

impl BundleSpec {
    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.trace()?;
        if self.num_ids < 2 {
            return Err(Error::config("num_ids", "need at least 2 identities"));
        }
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", "need at least 2 domains"));
        }
        if let Some(d) = self.decoder {
            let [_, h, w] = self.encoder.input_shape;
            if d.kernel == 0 || d.base == 0 || d.channels.contains(&0) {
                return Err(Error::config("model.decoder", "sizes must be positive"));
            }
            if d.output_side() != h || d.output_side() != w {
                return Err(Error::config(
                    "model.decoder",
                    format!("decoder emits {0}x{0}, images are {h}x{w}", d.output_side()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv { w: ParamId, b: ParamId },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Linear { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
pub struct Encoder {
    input_shape: [usize; 3],
    blocks: Vec<Block>,
    params: Vec<ParamId>,
}

impl Encoder {
    fn build<R: Rng>(prefix: &str, spec: &EncoderSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let trace = spec.trace()?;
        let mut shape = spec.input_shape.to_vec();
        let mut blocks = Vec::new();
        let mut params = Vec::new();
        for (i, (layer, next)) in spec.layers.iter().zip(&trace).enumerate() {
            let name = |what: &str| format!("{prefix}.{i}.{what}");
            let block = match *layer {
                LayerSpec::Conv { out_channels, kernel } => {
                    let fan_in = shape[0] * kernel * kernel;
                    let w = store.add_kaiming(name("weight"), &[out_channels, shape[0], kernel, kernel], fan_in, rng);
                    let b = store.add_bias(name("bias"), out_channels, fan_in, rng);
                    params.extend([w, b]);
                    Block::Conv { w, b }
                }
                LayerSpec::BatchNorm => {
                    let c = shape[0];
                    let gamma = store.add(name("gamma"), Tensor::full(&[c], 1.0), true);
                    let beta = store.add(name("beta"), Tensor::zeros(&[c]), true);
                    let mean = store.add(name("running_mean"), Tensor::zeros(&[c]), false);
                    let var = store.add(name("running_var"), Tensor::full(&[c], 1.0), false);
                    params.extend([gamma, beta]);
                    Block::BatchNorm { gamma, beta, mean, var }
                }
                LayerSpec::Relu => Block::Relu,
                LayerSpec::MaxPool { kernel, stride } => Block::MaxPool { kernel, stride },
                LayerSpec::Linear { out_features } => {
                    let fan_in: usize = shape.iter().product();
                    let w = store.add_kaiming(name("weight"), &[out_features, fan_in], fan_in, rng);
                    let b = store.add_bias(name("bias"), out_features, fan_in, rng);
                    params.extend([w, b]);
                    Block::Linear { w, b }
                }
            };
            blocks.push(block);
            shape.clone_from(next);
        }
        Ok(Encoder {
            input_shape: spec.input_shape,
            blocks,
            params,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Weight and bias of the final linear layer.
    pub fn tail(&self) -> Option<(ParamId, ParamId)> {
        match self.blocks.last() {
            Some(Block::Linear { w, b }) => Some((*w, *b)),
            _ => None,
        }
    }
}

/// ReLU followed by a linear layer.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub classes: usize,
}

impl Head {
    fn build<R: Rng>(prefix: &str, in_features: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let weight = store.add_kaiming(format!("{prefix}.weight"), &[classes, in_features], in_features, rng);
        let bias = store.add_bias(format!("{prefix}.bias"), classes, in_features, rng);
        Head {
            weight,
            bias,
            in_features,
            classes,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    spec: DecoderSpec,
    out_channels: usize,
    lin: [ParamId; 2],
    up1: [ParamId; 2],
    up2: [ParamId; 2],
}

impl Decoder {
    fn build<R: Rng>(spec: DecoderSpec, in_features: usize, out_channels: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let [c1, c2] = spec.channels;
        let (b, k) = (spec.base, spec.kernel);
        let lin_out = c1 * b * b;
        let lin = [
            store.add_kaiming("decoder.linear.weight", &[lin_out, in_features], in_features, rng),
            store.add_bias("decoder.linear.bias", lin_out, in_features, rng),
        ];
        let up1 = [
            store.add_kaiming("decoder.deconv1.weight", &[c1, c2, k, k], c1 * k * k, rng),
            store.add_bias("decoder.deconv1.bias", c2, c1 * k * k, rng),
        ];
        let up2 = [
            store.add_kaiming("decoder.deconv2.weight", &[c2, out_channels, k, k], c2 * k * k, rng),
            store.add_bias("decoder.deconv2.bias", out_channels, c2 * k * k, rng),
        ];
        Decoder {
            spec,
            out_channels,
            lin,
            up1,
            up2,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.lin, self.up1, self.up2].concat()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let side = self.spec.output_side();
        [self.out_channels, side, side]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    FS,
    FV,
    CS,
    CV,
    CCS,
    CCV,
    Decoder,
}

/// `f_S`, `f_V`, `C_S` (M-way), `C_V` (G-way), `C_C^S` and `C_C^V` (M-way over
/// `s ⊕ v`), plus the optional decoder, all backed by one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub store: ParamStore,
    pub f_s: Encoder,
    pub f_v: Encoder,
    pub c_s: Head,
    pub c_v: Head,
    pub cc_s: Head,
    pub cc_v: Head,
    pub decoder: Option<Decoder>,
}

impl ModelBundle {
    pub fn new<R: Rng>(spec: BundleSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let latent = spec.latent_dim();
        let f_s = Encoder::build("f_s", &spec.encoder, &mut store, rng)?;
        let f_v = Encoder::build("f_v", &spec.encoder, &mut store, rng)?;
        let c_s = Head::build("c_s", latent, spec.num_ids, &mut store, rng);
        let c_v = Head::build("c_v", latent, spec.num_domains, &mut store, rng);
        let cc_s = Head::build("cc_s", 2 * latent, spec.num_ids, &mut store, rng);
        let cc_v = Head::build("cc_v", 2 * latent, spec.num_ids, &mut store, rng);
        let decoder = spec
            .decoder
            .map(|d| Decoder::build(d, 2 * latent, spec.encoder.input_shape[0], &mut store, rng));
        Ok(ModelBundle {
            spec,
            store,
            f_s,
            f_v,
            c_s,
            c_v,
            cc_s,
            cc_v,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn encoder(&self, c: Component) -> Option<&Encoder> {
        match c {
            Component::FS => Some(&self.f_s),
            Component::FV => Some(&self.f_v),
            _ => None,
        }
    }

    pub fn head(&self, c: Component) -> Option<&Head> {
        match c {
            Component::CS => Some(&self.c_s),
            Component::CV => Some(&self.c_v),
            Component::CCS => Some(&self.cc_s),
            Component::CCV => Some(&self.cc_v),
            _ => None,
        }
    }

    /// Learnable parameters of one component (buffers excluded).
    pub fn component_params(&self, c: Component) -> Vec<ParamId> {
        match c {
            Component::FS => self.f_s.params.clone(),
            Component::FV => self.f_v.params.clone(),
            Component::CS => self.c_s.params().to_vec(),
            Component::CV => self.c_v.params().to_vec(),
            Component::CCS => self.cc_s.params().to_vec(),
            Component::CCV => self.cc_v.params().to_vec(),
            Component::Decoder => self.decoder.as_ref().map(Decoder::params).unwrap_or_default(),
        }
    }

    /// `θ_S, θ_V, φ_C^S, φ_C^V` and the decoder: updated in phase 1.
    pub fn encoder_side_params(&self) -> Vec<ParamId> {
        [Component::FS, Component::FV, Component::CCS, Component::CCV, Component::Decoder]
            .into_iter()
            .flat_map(|c| self.component_params(c))
            .collect()
    }

    /// `φ_S, φ_V`: updated in phase 2.
    pub fn classifier_side_params(&self) -> Vec<ParamId> {
        [Component::CS, Component::CV]
            .into_iter()
            .flat_map(|c| self.component_params(c))
            .collect()
    }

    /// Runs an encoder on `[N, C, H, W]` pixels.
    pub fn encode(&self, tape: &mut Tape, enc: &Encoder, x: Var, mode: BatchNormMode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != enc.input_shape[..] {
            let got = if shape.len() == 4 { shape[1..].iter().product() } else { shape.len() };
            return Err(Error::dim("encode", format!("input image {:?}", enc.input_shape), enc.input_shape.iter().product(), got));
        }
        let mut h = x;
        for block in &enc.blocks {
            h = match *block {
                Block::Conv { w, b } => {
                    let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
                    tape.conv2d(h, w, b)?
                }
                Block::BatchNorm { gamma, beta, mean, var } => {
                    let (g, bt) = (tape.param(&self.store, gamma), tape.param(&self.store, beta));
                    tape.batch_norm(h, g, bt, mode, &self.store, mean, var)?
                }
                Block::Relu => tape.relu(h),
                Block::MaxPool { kernel, stride } => tape.max_pool2d(h, kernel, stride)?,
                Block::Linear { w, b } => {
                    if tape.shape(h).len() != 2 {
                        h = tape.flatten(h)?;
                    }
                    let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
                    tape.linear(h, w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Logits of a head: `Linear(ReLU(z))`.
    pub fn classify(&self, tape: &mut Tape, head: &Head, z: Var) -> Result<Var> {
        let width = tape.shape(z).get(1).copied().unwrap_or(0);
        if tape.shape(z).len() != 2 || width != head.in_features {
            return Err(Error::dim("classify", "latent width (axis 1)", head.in_features, width));
        }
        let r = tape.relu(z);
        let (w, b) = (tape.param(&self.store, head.weight), tape.param(&self.store, head.bias));
        tape.linear(r, w, b)
    }

    /// Reconstructs pixels from `s ⊕ v`.
    pub fn decode(&self, tape: &mut Tape, s: Var, v: Var) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Capability("this model has no decoder".into()))?;
        let z = tape.concat_cols(s, v)?;
        let n = tape.shape(z)[0];
        let [c1, _] = dec.spec.channels;
        let b = dec.spec.base;
        let (lw, lb) = (tape.param(&self.store, dec.lin[0]), tape.param(&self.store, dec.lin[1]));
        let h = tape.linear(z, lw, lb)?;
        let h = tape.reshape(h, vec![n, c1, b, b])?;
        let h = tape.upsample2x(h)?;
        let (w1, b1) = (tape.param(&self.store, dec.up1[0]), tape.param(&self.store, dec.up1[1]));
        let h = tape.conv_transpose2d(h, w1, b1)?;
        let h = tape.relu(h);
        let h = tape.upsample2x(h)?;
        let (w2, b2) = (tape.param(&self.store, dec.up2[0]), tape.param(&self.store, dec.up2[1]));
        tape.conv_transpose2d(h, w2, b2)
    }

    /// Eval-mode latents of an encoder for `[N, C, H, W]` images, in chunks.
    pub fn embed(&self, which: Component, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let enc = self
            .encoder(which)
            .ok_or_else(|| Error::Contract(format!("{which:?} is not an encoder")))?;
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let latent = self.latent_dim();
        let mut out = Vec::with_capacity(n * latent);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::no_grad();
            let x = tape.input(part);
            let z = self.encode(&mut tape, enc, x, BatchNormMode::Eval)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(vec![n, latent], out)
    }

    /// Softmax posterior of a head on precomputed latents (or concatenations).
    pub fn posteriors(&self, head: &Head, latents: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let z = tape.input(latents.clone());
        let logits = self.classify(&mut tape, head, z)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }

    /// `argmax C_S(f_S(x))` in eval mode.
    pub fn predict_ids(&self, images: &Tensor) -> Result<Vec<usize>> {
        let s = self.embed(Component::FS, images, 500)?;
        Ok(self.posteriors(&self.c_s, &s)?.argmax_rows())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, &self.store)?;
        f.flush()?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: BundleSpec = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut bundle = ModelBundle::new(spec, &mut rng)?;
        let tensors = read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        if tensors.len() != bundle.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                bundle.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = bundle
                .store
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if bundle.store.get(id).shape() != t.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            bundle.store.set_values(id, t.data())?;
        }
        Ok(bundle)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Magic, version, tensor count, then per tensor: name, rank, extents, values.
/// All integers and floats little-endian.
pub fn write_checkpoint<W: Write>(out: &mut W, store: &ParamStore) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(p.tensor.ndim() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Length("checkpoint truncated".into()))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<_, 8>(r)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Length("checkpoint truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(read_exact(r)?) as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(read_exact(r)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
