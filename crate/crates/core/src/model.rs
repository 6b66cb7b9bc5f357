//! Architecture builders and forward passes: an 8-block volumetric encoder
//! feeding two 4-block deconvolution decoders (reconstruction + segmentation)
//! during pretext training, and a two-branch predictor after transfer. A
//! width factor scales every channel count for desk-size runs.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::checkpoint::{CheckpointError, NamedTensors};
use crate::tensor::{Tape, TensorError, TensorId};

const ENCODER_BASE: [usize; 8] = [64, 128, 256, 512, 512, 512, 1024, 1024];
const DECODER_BASE: [usize; 3] = [256, 128, 64];
const PREDICTOR_BASE: usize = 256;
const PRELU_INIT: f32 = 0.25;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input spatial dims {dims:?} must be divisible by 16; pad with pad_to_multiple first")]
    InputNotDivisible { dims: [usize; 3] },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {0} missing from the model")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderHead {
    Reconstruction,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretextTasks {
    Both,
    RecOnly,
    SegOnly,
}

impl PretextTasks {
    pub fn has_rec(self) -> bool {
        matches!(self, PretextTasks::Both | PretextTasks::RecOnly)
    }
    pub fn has_seg(self) -> bool {
        matches!(self, PretextTasks::Both | PretextTasks::SegOnly)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    /// Uniform channel scaling; 1.0 is full size, 1/8 the desk default.
    pub width_factor: f64,
    pub num_classes: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_factor: 0.125,
            num_classes: 2,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            width_factor: 1.0,
            ..Default::default()
        }
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_factor).round() as usize).max(1)
    }

    pub fn encoder_channels(&self) -> [usize; 8] {
        let mut out = [0; 8];
        for (o, b) in out.iter_mut().zip(ENCODER_BASE) {
            *o = self.scaled(b);
        }
        out
    }

    /// Three scaled deconvolution widths plus the fixed head channel
    /// (1 for reconstruction, 4 tissue classes for segmentation).
    pub fn decoder_channels(&self, head: DecoderHead) -> [usize; 4] {
        let last = match head {
            DecoderHead::Reconstruction => 1,
            DecoderHead::Segmentation => crate::volume::NUM_TISSUE_CLASSES,
        };
        [
            self.scaled(DECODER_BASE[0]),
            self.scaled(DECODER_BASE[1]),
            self.scaled(DECODER_BASE[2]),
            last,
        ]
    }

    pub fn predictor_channels(&self) -> usize {
        self.scaled(PREDICTOR_BASE)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_factor > 0.0) {
            return Err(ModelError::Config(format!(
                "width_factor {} must be positive",
                self.width_factor
            )));
        }
        let ch = self.encoder_channels();
        if ch[7] % 2 != 0 {
            return Err(ModelError::Config(format!(
                "final encoder channel count {} must be even to split into two feature maps",
                ch[7]
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

/// Ordered, named parameter store. Order is the architecture order, which
/// makes checkpoint bytes reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn entries(&self) -> &[ParamTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn total_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamTensor {
            name,
            shape,
            data,
            frozen: false,
        });
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    /// FNV-1a over the raw little-endian bytes of every tensor whose name
    /// matches the prefix; used by the freeze contract checks.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            for v in &e.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn to_named_tensors(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for e in &self.entries {
            out.push(&e.name, e.shape.clone(), e.data.clone())
                .expect("param names are unique");
        }
        out
    }

    /// Copies every entry of `tensors` into this set. Missing names and
    /// shape mismatches fail loudly. Returns the number of tensors applied.
    pub fn apply_named(&mut self, tensors: &NamedTensors, freeze: bool) -> Result<usize> {
        for t in tensors.entries() {
            let dst = self
                .index
                .get(&t.name)
                .map(|&i| &self.entries[i])
                .ok_or_else(|| ModelError::MissingParam(t.name.clone()))?;
            if dst.shape != t.shape {
                return Err(ModelError::Checkpoint(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    expected: dst.shape.clone(),
                    found: t.shape.clone(),
                }));
            }
        }
        for t in tensors.entries() {
            let i = self.index[&t.name];
            self.entries[i].data = t.data.clone();
            if freeze {
                self.entries[i].frozen = true;
            }
        }
        Ok(tensors.len())
    }
}

/// Uniform Kaiming-style init: bound sqrt(6 / fan_in), biases zero, PReLU
/// slopes 0.25.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, params: &mut ParamSet, prefix: &str, co: usize, ci: usize, k: usize) {
        let fan_in = ci * k * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..co * ci * k * k * k)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        params.add(format!("{prefix}.conv.weight"), vec![co, ci, k, k, k], data);
        params.add(format!("{prefix}.conv.bias"), vec![co], vec![0.0; co]);
    }

    fn deconv(&mut self, params: &mut ParamSet, prefix: &str, ci: usize, co: usize, k: usize) {
        let fan_in = ci * k * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..ci * co * k * k * k)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        params.add(format!("{prefix}.deconv.weight"), vec![ci, co, k, k, k], data);
        params.add(format!("{prefix}.deconv.bias"), vec![co], vec![0.0; co]);
    }

    fn prelu(&mut self, params: &mut ParamSet, prefix: &str, channels: usize) {
        params.add(
            format!("{prefix}.prelu.slope"),
            vec![channels],
            vec![PRELU_INIT; channels],
        );
    }

    fn fc(&mut self, params: &mut ParamSet, prefix: &str, out: usize, inp: usize) {
        let bound = (6.0 / inp as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        params.add(format!("{prefix}.weight"), vec![out, inp], data);
        params.add(format!("{prefix}.bias"), vec![out], vec![0.0; out]);
    }
}

/// A parameterized model instance: the encoder always, plus either the two
/// pretext decoders or the downstream predictor (or all three).
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

fn build_encoder(init: &mut Init, params: &mut ParamSet, cfg: &ModelConfig) {
    let ch = cfg.encoder_channels();
    let mut cin = 1;
    for (i, &co) in ch.iter().enumerate() {
        let prefix = format!("encoder.block{}", i + 1);
        init.conv(params, &prefix, co, cin, 3);
        init.prelu(params, &prefix, co);
        cin = co;
    }
    // 1x1x1 projection for the second residual pair (512 -> 1024 at full
    // width); the first pair is channel-matched and needs none.
    init.conv(params, "encoder.skip8", ch[7], ch[5], 1);
}

fn build_decoder(init: &mut Init, params: &mut ParamSet, cfg: &ModelConfig, head: DecoderHead) {
    let name = match head {
        DecoderHead::Reconstruction => "decoder_rec",
        DecoderHead::Segmentation => "decoder_seg",
    };
    let ch = cfg.decoder_channels(head);
    let mut cin = cfg.encoder_channels()[7] / 2;
    for (i, &co) in ch.iter().enumerate() {
        let prefix = format!("{name}.block{}", i + 1);
        init.deconv(params, &prefix, cin, co, 3);
        if i < 3 {
            // final block is a bare deconvolution
            init.prelu(params, &prefix, co);
        }
        cin = co;
    }
}

fn build_predictor(init: &mut Init, params: &mut ParamSet, cfg: &ModelConfig) {
    let half = cfg.encoder_channels()[7] / 2;
    let bc = cfg.predictor_channels();
    for branch in ["predictor.branch_rec", "predictor.branch_seg"] {
        init.conv(params, &format!("{branch}.block_a"), bc, half, 3);
        init.prelu(params, &format!("{branch}.block_a"), bc);
        init.conv(params, &format!("{branch}.block_b"), bc, bc, 3);
        init.prelu(params, &format!("{branch}.block_b"), bc);
    }
    init.fc(params, "predictor.fc", cfg.num_classes, bc);
}

impl Model {
    /// Encoder plus the decoders the pretext task set needs.
    pub fn init_pretext(cfg: ModelConfig, tasks: PretextTasks, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamSet::default();
        build_encoder(&mut init, &mut params, &cfg);
        if tasks.has_rec() {
            build_decoder(&mut init, &mut params, &cfg, DecoderHead::Reconstruction);
        }
        if tasks.has_seg() {
            build_decoder(&mut init, &mut params, &cfg, DecoderHead::Segmentation);
        }
        Ok(Model { cfg, params })
    }

    /// Encoder plus the two-branch predictor.
    pub fn init_downstream(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamSet::default();
        build_encoder(&mut init, &mut params, &cfg);
        build_predictor(&mut init, &mut params, &cfg);
        Ok(Model { cfg, params })
    }

    /// Registers every parameter on the tape; frozen tensors register without
    /// gradient tracking, so backward skips their whole subtree.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, true)
    }

    /// Inference binding: nothing tracks gradients.
    pub fn bind_inference(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let mut map = HashMap::new();
        for e in self.params.entries() {
            let id = tape
                .leaf(e.data.clone(), &e.shape, trainable && !e.frozen)
                .expect("param shape matches data");
            map.insert(e.name.clone(), id);
        }
        Binding { map }
    }
}

pub struct Binding {
    map: HashMap<String, TensorId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.map.iter()
    }
}

fn conv_block(
    tape: &mut Tape,
    b: &Binding,
    prefix: &str,
    input: TensorId,
    stride: usize,
    eps: f32,
) -> Result<TensorId> {
    let w = b.id(&format!("{prefix}.conv.weight"))?;
    let bias = b.id(&format!("{prefix}.conv.bias"))?;
    let slope = b.id(&format!("{prefix}.prelu.slope"))?;
    let c = tape.conv3d(input, w, bias, [stride; 3], [1; 3])?;
    let n = tape.instance_norm(c, eps)?;
    Ok(tape.prelu(n, slope)?)
}

impl Model {
    /// Eight convolution blocks: the first four halve each spatial axis, the
    /// last four run at stride 1 with residual sums over block pairs.
    pub fn encoder_forward(&self, tape: &mut Tape, b: &Binding, input: TensorId) -> Result<TensorId> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 {
            return Err(ModelError::Tensor(TensorError::Rank {
                op: "encoder_forward",
                expected: 5,
                shape,
            }));
        }
        let dims = [shape[2], shape[3], shape[4]];
        if dims.iter().any(|d| d % 16 != 0) {
            return Err(ModelError::InputNotDivisible { dims });
        }
        let eps = self.cfg.norm_eps;
        let mut x = input;
        for i in 1..=4 {
            x = conv_block(tape, b, &format!("encoder.block{i}"), x, 2, eps)?;
        }
        let x4 = x;
        let x5 = conv_block(tape, b, "encoder.block5", x4, 1, eps)?;
        let x6 = conv_block(tape, b, "encoder.block6", x5, 1, eps)?;
        let out6 = tape.add(x6, x4)?;
        let x7 = conv_block(tape, b, "encoder.block7", out6, 1, eps)?;
        let x8 = conv_block(tape, b, "encoder.block8", x7, 1, eps)?;
        let pw = b.id("encoder.skip8.conv.weight")?;
        let pb = b.id("encoder.skip8.conv.bias")?;
        let proj = tape.conv3d(out6, pw, pb, [1; 3], [0; 3])?;
        Ok(tape.add(x8, proj)?)
    }

    /// Channel split of the encoder output: first half feeds reconstruction,
    /// second half segmentation.
    pub fn split_features(
        &self,
        tape: &mut Tape,
        encoder_out: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let c = tape.shape(encoder_out)[1];
        let half = c / 2;
        let rec = tape.channel_slice(encoder_out, 0, half)?;
        let seg = tape.channel_slice(encoder_out, half, half)?;
        Ok((rec, seg))
    }

    /// Four stride-2 deconvolution blocks; the final block is linear for the
    /// reconstruction head and softmax over channels for segmentation.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        features: TensorId,
        head: DecoderHead,
    ) -> Result<TensorId> {
        let name = match head {
            DecoderHead::Reconstruction => "decoder_rec",
            DecoderHead::Segmentation => "decoder_seg",
        };
        let eps = self.cfg.norm_eps;
        let mut x = features;
        for i in 1..=4 {
            let prefix = format!("{name}.block{i}");
            let w = b.id(&format!("{prefix}.deconv.weight"))?;
            let bias = b.id(&format!("{prefix}.deconv.bias"))?;
            x = tape.conv_transpose3d(x, w, bias, [2; 3], [1; 3], [1; 3])?;
            if i < 4 {
                let slope = b.id(&format!("{prefix}.prelu.slope"))?;
                x = tape.instance_norm(x, eps)?;
                x = tape.prelu(x, slope)?;
            }
        }
        match head {
            DecoderHead::Reconstruction => Ok(x),
            DecoderHead::Segmentation => Ok(tape.softmax_channels(x)?),
        }
    }

    /// Both decoders as the task set demands.
    pub fn pretext_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        input: TensorId,
        tasks: PretextTasks,
    ) -> Result<(Option<TensorId>, Option<TensorId>)> {
        let enc = self.encoder_forward(tape, b, input)?;
        let (feat_rec, feat_seg) = self.split_features(tape, enc)?;
        let rec = if tasks.has_rec() {
            Some(self.decoder_forward(tape, b, feat_rec, DecoderHead::Reconstruction)?)
        } else {
            None
        };
        let seg = if tasks.has_seg() {
            Some(self.decoder_forward(tape, b, feat_seg, DecoderHead::Segmentation)?)
        } else {
            None
        };
        Ok((rec, seg))
    }

    /// Two branches of two stride-2 conv blocks with a stride-matched
    /// identity skip, summed, pooled and mapped to class logits. Instance
    /// norm is omitted here: the branch maps collapse to single voxels at
    /// desk scale, where per-slice standardization would zero them.
    pub fn predictor_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        pair: (TensorId, TensorId),
    ) -> Result<TensorId> {
        if tape.shape(pair.0) != tape.shape(pair.1) {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "predictor_forward",
                detail: format!(
                    "feature pair shapes differ: {:?} vs {:?}",
                    tape.shape(pair.0),
                    tape.shape(pair.1)
                ),
            }));
        }
        let branch = |tape: &mut Tape, prefix: &str, x: TensorId| -> Result<TensorId> {
            let wa = b.id(&format!("{prefix}.block_a.conv.weight"))?;
            let ba = b.id(&format!("{prefix}.block_a.conv.bias"))?;
            let sa = b.id(&format!("{prefix}.block_a.prelu.slope"))?;
            let ca = tape.conv3d(x, wa, ba, [2; 3], [1; 3])?;
            let a = tape.prelu(ca, sa)?;
            let wb = b.id(&format!("{prefix}.block_b.conv.weight"))?;
            let bb = b.id(&format!("{prefix}.block_b.conv.bias"))?;
            let sb = b.id(&format!("{prefix}.block_b.prelu.slope"))?;
            let cb = tape.conv3d(a, wb, bb, [2; 3], [1; 3])?;
            let bb_out = tape.prelu(cb, sb)?;
            let skip = if tape.shape(a) == tape.shape(bb_out) {
                a
            } else {
                tape.subsample2(a)?
            };
            Ok(tape.add(bb_out, skip)?)
        };
        let r = branch(tape, "predictor.branch_rec", pair.0)?;
        let s = branch(tape, "predictor.branch_seg", pair.1)?;
        let fused = tape.add(r, s)?;
        let pooled = tape.global_avg_pool(fused)?;
        let w = b.id("predictor.fc.weight")?;
        let bias = b.id("predictor.fc.bias")?;
        Ok(tape.fully_connected(pooled, w, bias)?)
    }

    /// Encoder then predictor: the downstream classification pass.
    pub fn downstream_forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        input: TensorId,
    ) -> Result<TensorId> {
        let enc = self.encoder_forward(tape, b, input)?;
        let pair = self.split_features(tape, enc)?;
        self.predictor_forward(tape, b, pair)
    }
}

/// Inverse record for [`pad_to_multiple`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropRecord {
    pub offsets: [usize; 3],
    pub original: [usize; 3],
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.offsets == [0; 3]
    }
}

/// Symmetric zero-pad of an x-fastest volume array up to the next multiple
/// per axis. The crop record inverts it exactly.
pub fn pad_to_multiple(
    data: &[f32],
    dims: [usize; 3],
    multiple: usize,
) -> (Vec<f32>, [usize; 3], CropRecord) {
    let target = [
        dims[0].div_ceil(multiple) * multiple,
        dims[1].div_ceil(multiple) * multiple,
        dims[2].div_ceil(multiple) * multiple,
    ];
    let offsets = [
        (target[0] - dims[0]) / 2,
        (target[1] - dims[1]) / 2,
        (target[2] - dims[2]) / 2,
    ];
    let mut out = vec![0.0f32; target[0] * target[1] * target[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = z * dims[0] * dims[1] + y * dims[0];
            let dst = (z + offsets[2]) * target[0] * target[1]
                + (y + offsets[1]) * target[0]
                + offsets[0];
            out[dst..dst + dims[0]].copy_from_slice(&data[src..src + dims[0]]);
        }
    }
    (
        out,
        target,
        CropRecord {
            offsets,
            original: dims,
        },
    )
}

/// Extracts the original region back out of a padded array.
pub fn crop_with_record(data: &[f32], padded_dims: [usize; 3], record: &CropRecord) -> Vec<f32> {
    let [nx, ny, nz] = record.original;
    let mut out = vec![0.0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            let dst = z * nx * ny + y * nx;
            let src = (z + record.offsets[2]) * padded_dims[0] * padded_dims[1]
                + (y + record.offsets[1]) * padded_dims[0]
                + record.offsets[0];
            out[dst..dst + nx].copy_from_slice(&data[src..src + nx]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn desk_channels_scale_to_an_eighth() {
        let cfg = desk();
        assert_eq!(cfg.encoder_channels(), [8, 16, 32, 64, 64, 64, 128, 128]);
        assert_eq!(
            cfg.decoder_channels(DecoderHead::Reconstruction),
            [32, 16, 8, 1]
        );
        assert_eq!(cfg.decoder_channels(DecoderHead::Segmentation), [32, 16, 8, 4]);
        assert_eq!(cfg.predictor_channels(), 32);
    }

    #[test]
    fn encoder_shapes_at_desk_scale() {
        let model = Model::init_pretext(desk(), PretextTasks::Both, 1).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.1; 32 * 32 * 32], &[1, 1, 32, 32, 32], false)
            .unwrap();
        let enc = model.encoder_forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(enc), &[1, 128, 2, 2, 2]);
        let (fr, fs) = model.split_features(&mut tape, enc).unwrap();
        assert_eq!(tape.shape(fr), &[1, 64, 2, 2, 2]);
        assert_eq!(tape.shape(fs), &[1, 64, 2, 2, 2]);
        let rec = model
            .decoder_forward(&mut tape, &b, fr, DecoderHead::Reconstruction)
            .unwrap();
        assert_eq!(tape.shape(rec), &[1, 1, 32, 32, 32]);
        let seg = model
            .decoder_forward(&mut tape, &b, fs, DecoderHead::Segmentation)
            .unwrap();
        assert_eq!(tape.shape(seg), &[1, 4, 32, 32, 32]);
    }

    #[test]
    fn predictor_emits_two_logits() {
        let model = Model::init_downstream(desk(), 2).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.2; 32 * 32 * 32], &[1, 1, 32, 32, 32], false)
            .unwrap();
        let logits = model.downstream_forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(logits), &[1, 2]);
    }

    #[test]
    fn non_divisible_input_is_rejected_with_hint() {
        let model = Model::init_downstream(desk(), 2).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.0; 24 * 24 * 24], &[1, 1, 24, 24, 24], false)
            .unwrap();
        let err = model.encoder_forward(&mut tape, &b, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("divisible by 16") && msg.contains("pad_to_multiple"), "{msg}");
    }

    #[test]
    fn zeroed_block6_makes_first_residual_an_identity() {
        let mut model = Model::init_pretext(desk(), PretextTasks::Both, 3).unwrap();
        for name in ["encoder.block6.conv.weight", "encoder.block6.conv.bias"] {
            let e = model.params.get_mut(name).unwrap();
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.3; 32 * 32 * 32], &[1, 1, 32, 32, 32], false)
            .unwrap();
        // rebuild the first five blocks by hand to capture x4
        let mut cur = x;
        for i in 1..=4 {
            cur = conv_block(&mut tape, &b, &format!("encoder.block{i}"), cur, 2, 1e-5).unwrap();
        }
        let x4 = cur;
        let x5 = conv_block(&mut tape, &b, "encoder.block5", x4, 1, 1e-5).unwrap();
        let x6 = conv_block(&mut tape, &b, "encoder.block6", x5, 1, 1e-5).unwrap();
        let out6 = tape.add(x6, x4).unwrap();
        assert_eq!(tape.data(out6), tape.data(x4));
    }

    #[test]
    fn zeroed_block8_reduces_to_projection_skip() {
        let mut model = Model::init_pretext(desk(), PretextTasks::Both, 3).unwrap();
        for name in ["encoder.block8.conv.weight", "encoder.block8.conv.bias"] {
            let e = model.params.get_mut(name).unwrap();
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.3; 32 * 32 * 32], &[1, 1, 32, 32, 32], false)
            .unwrap();
        let mut cur = x;
        for i in 1..=4 {
            cur = conv_block(&mut tape, &b, &format!("encoder.block{i}"), cur, 2, 1e-5).unwrap();
        }
        let x4 = cur;
        let x5 = conv_block(&mut tape, &b, "encoder.block5", x4, 1, 1e-5).unwrap();
        let x6 = conv_block(&mut tape, &b, "encoder.block6", x5, 1, 1e-5).unwrap();
        let out6 = tape.add(x6, x4).unwrap();
        let full = model.encoder_forward(&mut tape, &b, x).unwrap();
        let pw = b.id("encoder.skip8.conv.weight").unwrap();
        let pb = b.id("encoder.skip8.conv.bias").unwrap();
        let proj = tape.conv3d(out6, pw, pb, [1; 3], [0; 3]).unwrap();
        assert_eq!(tape.data(full), tape.data(proj));
    }

    #[test]
    fn zeroed_final_deconv_gives_zero_reconstruction() {
        let mut model = Model::init_pretext(desk(), PretextTasks::RecOnly, 4).unwrap();
        for name in ["decoder_rec.block4.deconv.weight", "decoder_rec.block4.deconv.bias"] {
            let e = model.params.get_mut(name).unwrap();
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(vec![0.4; 32 * 32 * 32], &[1, 1, 32, 32, 32], false)
            .unwrap();
        let (rec, _) = model
            .pretext_forward(&mut tape, &b, x, PretextTasks::RecOnly)
            .unwrap();
        assert!(tape.data(rec.unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_probabilities_sum_to_one() {
        let model = Model::init_pretext(desk(), PretextTasks::SegOnly, 5).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let data: Vec<f32> = (0..32768).map(|i| ((i % 31) as f32) / 31.0).collect();
        let x = tape.leaf(data, &[1, 1, 32, 32, 32], false).unwrap();
        let (_, seg) = model
            .pretext_forward(&mut tape, &b, x, PretextTasks::SegOnly)
            .unwrap();
        let seg = seg.unwrap();
        let p = tape.data(seg);
        let spatial = 32 * 32 * 32;
        for v in 0..spatial {
            let sum: f32 = (0..4).map(|c| p[c * spatial + v]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pretext_variants_build_matching_param_sets() {
        let both = Model::init_pretext(desk(), PretextTasks::Both, 1).unwrap();
        let rec = Model::init_pretext(desk(), PretextTasks::RecOnly, 1).unwrap();
        let seg = Model::init_pretext(desk(), PretextTasks::SegOnly, 1).unwrap();
        assert!(both.params.get("decoder_rec.block1.deconv.weight").is_some());
        assert!(both.params.get("decoder_seg.block1.deconv.weight").is_some());
        assert!(rec.params.get("decoder_seg.block1.deconv.weight").is_none());
        assert!(seg.params.get("decoder_rec.block1.deconv.weight").is_none());
    }

    /// Closed-form totals implied by the channel lists, frozen as regression
    /// constants.
    #[test]
    fn full_width_parameter_counts_are_pinned() {
        let cfg = ModelConfig::paper_scale();
        let pretext = Model::init_pretext(cfg, PretextTasks::Both, 0).unwrap();
        let encoder: usize = pretext
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
            .map(|e| e.data.len())
            .sum();
        assert_eq!(encoder, 61_803_072);
        assert_eq!(pretext.params.total_parameters(), 71_103_237);
        drop(pretext);
        let downstream = Model::init_downstream(cfg, 0).unwrap();
        assert_eq!(downstream.params.total_parameters(), 72_422_466);
    }

    #[test]
    fn pad_and_crop_roundtrip() {
        let (padded, dims, rec) = pad_to_multiple(&[1.0; 27], [3, 3, 3], 16);
        assert_eq!(dims, [16, 16, 16]);
        assert_eq!(rec.original, [3, 3, 3]);
        let back = crop_with_record(&padded, dims, &rec);
        assert_eq!(back, vec![1.0; 27]);

        let data: Vec<f32> = (0..32768).map(|i| i as f32).collect();
        let (padded, dims, rec) = pad_to_multiple(&data, [32, 32, 32], 16);
        assert_eq!(dims, [32, 32, 32]);
        assert!(rec.is_identity());
        assert_eq!(padded, data);
    }

    #[test]
    fn pad_is_symmetric_for_odd_gaps() {
        let (_, dims, rec) = pad_to_multiple(&[0.0; 30 * 30 * 30], [30, 30, 30], 16);
        assert_eq!(dims, [32, 32, 32]);
        assert_eq!(rec.offsets, [1, 1, 1]);
    }
}
