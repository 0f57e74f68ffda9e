//! Scaled-down Wide PyramidNet.
//!
//! Stem, `num_stages` stages of bottleneck blocks whose output width grows
//! linearly with the global block index, then BN, global average pooling and
//! a dense classifier. Each block is
//!
//! ```text
//! BN -> conv1x1 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv1x1 -> BN -> join
//! ```
//!
//! with a zero-padded (and, at stride 2, average-pooled) identity shortcut.
//! Parameters live in a [`ParamStore`] under stable dotted names.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{read_checkpoint, write_checkpoint, Float, Graph, ParamKind, ParamStore, Tensor, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::regularizers::{shakedrop_forward, shakedrop_inference, shakedrop_plain, ShakeDropConfig, ShakeDropSample, StreamKey};
use crate::rng::{stream, Purpose};

/// Running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub input_resolution: usize,
    pub stem_downsample_factor: usize,
    pub base_channels: usize,
    pub total_channel_add: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub bottleneck_ratio: usize,
    pub widen_factor: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

impl Default for PyramidSpec {
    /// Desk-scale network: 16x16 inputs, 3 stages of 3 blocks.
    fn default() -> Self {
        PyramidSpec {
            input_resolution: 16,
            stem_downsample_factor: 1,
            base_channels: 8,
            total_channel_add: 24,
            num_stages: 3,
            blocks_per_stage: 3,
            bottleneck_ratio: 4,
            widen_factor: 1.0,
            in_channels: 3,
            num_classes: 4,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl PyramidSpec {
    /// Full-size layout: 224 inputs reduced to 56 by the stem, 3 x 30 blocks.
    pub fn full_scale() -> Self {
        PyramidSpec {
            input_resolution: 224,
            stem_downsample_factor: 4,
            base_channels: 16,
            total_channel_add: 200,
            num_stages: 3,
            blocks_per_stage: 30,
            bottleneck_ratio: 4,
            widen_factor: 1.0,
            in_channels: 3,
            num_classes: 60,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_stages * self.blocks_per_stage
    }

    /// Total spatial reduction between input and head.
    pub fn cumulative_downsample(&self) -> usize {
        self.stem_downsample_factor << (self.num_stages.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_resolution", self.input_resolution),
            ("stem_downsample_factor", self.stem_downsample_factor),
            ("base_channels", self.base_channels),
            ("num_stages", self.num_stages),
            ("blocks_per_stage", self.blocks_per_stage),
            ("bottleneck_ratio", self.bottleneck_ratio),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes must be at least 2"));
        }
        if !(self.widen_factor.is_finite() && self.widen_factor > 0.0) {
            return Err(Error::config(format!("model.widen_factor must be positive, got {}", self.widen_factor)));
        }
        if !self.stem_downsample_factor.is_power_of_two() {
            return Err(Error::config(format!(
                "model.stem_downsample_factor must be a power of two, got {}",
                self.stem_downsample_factor
            )));
        }
        self.check_resolution(self.input_resolution)
    }

    /// Rejects resolutions that the stem and stage strides cannot divide.
    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let d = self.cumulative_downsample();
        if resolution == 0 || resolution % d != 0 {
            return Err(Error::config(format!(
                "resolution {resolution} is not divisible by the cumulative downsampling {d}"
            )));
        }
        Ok(())
    }

    /// Spatial size entering stage 1 for the nominal input resolution.
    pub fn stage1_resolution(&self) -> usize {
        self.input_resolution / self.stem_downsample_factor
    }

    pub fn stem_channels(&self) -> usize {
        round_half_up(self.widen_factor * self.base_channels as f64).max(1)
    }
}

/// Output width of global block `k` (1-based):
/// `round(widen * round(c0 + k * add / N))`, both roundings half-up.
pub fn channel_schedule(spec: &PyramidSpec, k: usize) -> Result<usize> {
    let n = spec.num_blocks();
    if k == 0 || k > n {
        return Err(Error::config(format!("block index {k} outside 1..={n}")));
    }
    // c0 + k*add/N rounded half-up, in exact integer arithmetic
    let num = spec.base_channels * n + k * spec.total_channel_add;
    let narrow = (2 * num + n) / (2 * n);
    Ok(round_half_up(spec.widen_factor * narrow as f64).max(1))
}

/// Static shape of one bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    /// Global 1-based index.
    pub index: usize,
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub inner_channels: usize,
    pub stride: usize,
}

pub fn block_plans(spec: &PyramidSpec) -> Result<Vec<BlockPlan>> {
    let mut plans = Vec::with_capacity(spec.num_blocks());
    let mut in_channels = spec.stem_channels();
    for k in 1..=spec.num_blocks() {
        let stage = (k - 1) / spec.blocks_per_stage + 1;
        let first_in_stage = (k - 1) % spec.blocks_per_stage == 0;
        let out = channel_schedule(spec, k)?.max(in_channels);
        plans.push(BlockPlan {
            index: k,
            stage,
            in_channels,
            out_channels: out,
            inner_channels: round_half_up(out as f64 / spec.bottleneck_ratio as f64).max(1),
            stride: if stage > 1 && first_in_stage { 2 } else { 1 },
        });
        in_channels = out;
    }
    Ok(plans)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased estimate.
    pub var: Vec<f64>,
}

/// Per-forward state: the stochastic key and everything the forward
/// produced besides its output.
#[derive(Clone, Debug, Default)]
pub struct ForwardCtx {
    pub seed: u64,
    pub step: u64,
    /// Build ShakeDrop joins from plain ops instead of the override hook.
    pub plain_join: bool,
    pub bn_updates: Vec<BnUpdate>,
    /// Forward draws of every join, in block order.
    pub shakedrop: Vec<Vec<ShakeDropSample>>,
}

impl ForwardCtx {
    pub fn new(seed: u64, step: u64) -> Self {
        ForwardCtx {
            seed,
            step,
            ..Default::default()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    spec: PyramidSpec,
    shakedrop: ShakeDropConfig,
    folded: bool,
}

const HEADER_FORMAT: &str = "flatland-pyramidnet/1";

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: PyramidSpec,
    pub shakedrop: ShakeDropConfig,
    pub store: ParamStore<T>,
    plans: Vec<BlockPlan>,
    mode: Mode,
    folded: bool,
}

fn insert_bn<T: Float>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), ParamKind::BnScale, Tensor::full(vec![c], T::one())?)?;
    store.insert(format!("{prefix}.beta"), ParamKind::BnShift, Tensor::zeros(vec![c])?)?;
    store.insert(format!("{prefix}.mean"), ParamKind::BnRunningMean, Tensor::zeros(vec![c])?)?;
    store.insert(format!("{prefix}.var"), ParamKind::BnRunningVar, Tensor::full(vec![c], T::one())?)?;
    Ok(())
}

fn insert_conv<T: Float>(store: &mut ParamStore<T>, name: &str, out: usize, inp: usize, k: usize) -> Result<()> {
    store.insert(format!("{name}.w"), ParamKind::ConvWeight, Tensor::zeros(vec![out, inp, k, k])?)?;
    Ok(())
}

/// Builds a freshly initialized model in train mode.
pub fn build_model<T: Float>(spec: &PyramidSpec, shakedrop: &ShakeDropConfig, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    shakedrop.validate()?;
    let plans = block_plans(spec)?;
    let mut store = ParamStore::new();
    let c_stem = spec.stem_channels();
    let stem_convs = spec.stem_downsample_factor.trailing_zeros().max(1) as usize;
    for i in 0..stem_convs {
        let inp = if i == 0 { spec.in_channels } else { c_stem };
        insert_conv(&mut store, &format!("stem.conv{i}"), c_stem, inp, 3)?;
        insert_bn(&mut store, &format!("stem.bn{i}"), c_stem)?;
    }
    for p in &plans {
        let b = format!("block{}", p.index);
        insert_bn(&mut store, &format!("{b}.bn1"), p.in_channels)?;
        insert_conv(&mut store, &format!("{b}.conv1"), p.inner_channels, p.in_channels, 1)?;
        insert_bn(&mut store, &format!("{b}.bn2"), p.inner_channels)?;
        insert_conv(&mut store, &format!("{b}.conv2"), p.inner_channels, p.inner_channels, 3)?;
        insert_bn(&mut store, &format!("{b}.bn3"), p.inner_channels)?;
        insert_conv(&mut store, &format!("{b}.conv3"), p.out_channels, p.inner_channels, 1)?;
        insert_bn(&mut store, &format!("{b}.bn4"), p.out_channels)?;
    }
    let c_last = plans.last().map_or(c_stem, |p| p.out_channels);
    insert_bn(&mut store, "head.bn", c_last)?;
    store.insert("head.fc.w", ParamKind::DenseWeight, Tensor::zeros(vec![spec.num_classes, c_last])?)?;
    store.insert("head.fc.b", ParamKind::Bias, Tensor::zeros(vec![spec.num_classes])?)?;

    let mut model = Model {
        spec: spec.clone(),
        shakedrop: shakedrop.clone(),
        store,
        plans,
        mode: Mode::Train,
        folded: false,
    };
    model.init_weights(seed);
    Ok(model)
}

impl<T: Float> Model<T> {
    /// Fan-out scaled normal for convolutions, uniform `+-1/sqrt(fan_in)` for
    /// the classifier weight. Biases and BN parameters keep their defaults.
    pub fn init_weights(&mut self, seed: u64) {
        for (i, p) in self.store.iter_mut().enumerate() {
            let mut rng = stream(seed, Purpose::Init, i as u64, 0);
            let shape = p.value.shape().to_vec();
            match p.kind {
                ParamKind::ConvWeight => {
                    let fan_out = shape[0] * shape[2] * shape[3];
                    let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
                    p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
                }
                ParamKind::DenseWeight => {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    p.value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = T::lit(rng.random_range(-bound..bound)));
                }
                _ => {}
            }
        }
    }

    pub fn plans(&self) -> &[BlockPlan] {
        &self.plans
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if self.folded && mode == Mode::Train {
            return Err(Error::WrongMode {
                expected: "a folded model is inference-only",
            });
        }
        self.mode = mode;
        Ok(())
    }

    fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.store.get(self.store.id(name)?).value)
    }

    fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(&self.store, self.store.id(name)?))
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(g, &format!("{name}.w"))?;
        let b = if self.folded {
            Some(self.param(g, &format!("{name}.b"))?)
        } else {
            None
        };
        g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&self, g: &mut Graph<T>, x: Var, prefix: &str, ctx: &mut ForwardCtx) -> Result<Var> {
        if self.folded {
            return Ok(x);
        }
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta)?;
                let s = g.shape(x);
                let m = (s[0] * s[2] * s[3]) as f64;
                let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                ctx.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean: mean.iter().map(|v| v.as_f64()).collect(),
                    var: var.iter().map(|v| v.as_f64() * correction).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.value(&format!("{prefix}.mean"))?.data().to_vec();
                let var = self.value(&format!("{prefix}.var"))?.data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }

    fn block(&self, g: &mut Graph<T>, x: Var, p: &BlockPlan, ctx: &mut ForwardCtx) -> Result<Var> {
        let b = format!("block{}", p.index);
        let mut h = self.bn(g, x, &format!("{b}.bn1"), ctx)?;
        h = self.conv(g, h, &format!("{b}.conv1"), 1, 0)?;
        h = self.bn(g, h, &format!("{b}.bn2"), ctx)?;
        h = g.relu(h);
        h = self.conv(g, h, &format!("{b}.conv2"), p.stride, 1)?;
        h = self.bn(g, h, &format!("{b}.bn3"), ctx)?;
        h = g.relu(h);
        h = self.conv(g, h, &format!("{b}.conv3"), 1, 0)?;
        h = self.bn(g, h, &format!("{b}.bn4"), ctx)?;

        let mut shortcut = x;
        if p.stride == 2 {
            shortcut = g.avg_pool2(shortcut)?;
        }
        if p.out_channels > p.in_channels {
            shortcut = g.pad_channels(shortcut, p.out_channels)?;
        }

        let cfg = &self.shakedrop;
        if !cfg.enabled {
            return g.add(shortcut, h);
        }
        let gate = cfg.layer_gate_prob(p.index, self.plans.len());
        match self.mode {
            Mode::Eval => shakedrop_inference(g, shortcut, h, cfg, gate),
            Mode::Train => {
                let key = StreamKey {
                    seed: ctx.seed,
                    layer: p.index as u64,
                    step: ctx.step,
                };
                let (out, samples) = if ctx.plain_join {
                    let samples = crate::regularizers::sample_forward(cfg, gate, key, g.shape(h)[0]);
                    (shakedrop_plain(g, shortcut, h, &samples)?, samples)
                } else {
                    shakedrop_forward(g, shortcut, h, cfg, gate, key)?
                };
                ctx.shakedrop.push(samples);
                Ok(out)
            }
        }
    }

    /// Logits `[N, num_classes]` for an `[N, C, H, W]` input already on the
    /// tape.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels || shape[2] != shape[3] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("model expects square [N, {}, H, H] images", self.spec.in_channels),
            });
        }
        self.spec.check_resolution(shape[2])?;

        let stem_convs = self.spec.stem_downsample_factor.trailing_zeros().max(1) as usize;
        let stem_stride = if self.spec.stem_downsample_factor == 1 { 1 } else { 2 };
        let mut h = x;
        for i in 0..stem_convs {
            if i > 0 {
                h = g.relu(h);
            }
            h = self.conv(g, h, &format!("stem.conv{i}"), stem_stride, 1)?;
            h = self.bn(g, h, &format!("stem.bn{i}"), ctx)?;
        }
        for p in &self.plans {
            h = self.block(g, h, p, ctx)?;
        }
        h = self.bn(g, h, "head.bn", ctx)?;
        h = g.global_avg_pool(h)?;
        let w = self.param(g, "head.fc.w")?;
        let b = self.param(g, "head.fc.b")?;
        g.dense(h, w, Some(b))
    }

    /// Evaluates logits on a fresh tape without keeping it.
    pub fn logits(&self, images: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, x, ctx)?;
        Ok(g.value(y).clone())
    }

    /// Folds the collected batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, fresh) in [("mean", &u.mean), ("var", &u.var)] {
                let id = self.store.id(&format!("{}.{suffix}", u.prefix))?;
                let run = self.store.get_mut(id).value.data_mut();
                if run.len() != fresh.len() {
                    return Err(Error::ParameterMismatch(format!("{}.{suffix}", u.prefix)));
                }
                for (r, &f) in run.iter_mut().zip(fresh.iter()) {
                    *r = T::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * f);
                }
            }
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` equivalent of an eval-mode batch norm.
    fn bn_affine(&self, prefix: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |s: &str| -> Result<Vec<f64>> {
            Ok(self.value(&format!("{prefix}.{s}"))?.data().iter().map(|v| v.as_f64()).collect())
        };
        let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("mean")?, get("var")?);
        let scale: Vec<f64> = gamma.iter().zip(&var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
        let shift = beta.iter().zip(&mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        Ok((scale, shift))
    }

    /// Returns an equivalent inference model with every batch norm absorbed
    /// into a neighbouring linear op. Folding a folded model returns a copy.
    pub fn fold_batchnorm(&self) -> Result<Model<T>> {
        if self.folded {
            return Ok(self.clone());
        }
        if self.mode != Mode::Eval {
            return Err(Error::WrongMode {
                expected: "batch-norm folding needs an eval-mode model",
            });
        }
        let mut convs: Vec<(String, Vec<f64>, Vec<usize>, Vec<f64>)> = Vec::new();
        let conv_data = |name: &str| -> Result<(Vec<f64>, Vec<usize>)> {
            let t = self.value(&format!("{name}.w"))?;
            Ok((t.data().iter().map(|v| v.as_f64()).collect(), t.shape().to_vec()))
        };

        let stem_convs = self.spec.stem_downsample_factor.trailing_zeros().max(1) as usize;
        for i in 0..stem_convs {
            let name = format!("stem.conv{i}");
            let (w, shape) = conv_data(&name)?;
            let bias = vec![0.0; shape[0]];
            let (w, bias) = fold_output(w, &shape, bias, &self.bn_affine(&format!("stem.bn{i}"))?);
            convs.push((name, w, shape, bias));
        }
        for p in &self.plans {
            let b = format!("block{}", p.index);
            let (w, shape) = conv_data(&format!("{b}.conv1"))?;
            let (w, bias) = fold_input(w, &shape, vec![0.0; shape[0]], &self.bn_affine(&format!("{b}.bn1"))?);
            let (w, bias) = fold_output(w, &shape, bias, &self.bn_affine(&format!("{b}.bn2"))?);
            convs.push((format!("{b}.conv1"), w, shape, bias));
            for (conv, bn) in [("conv2", "bn3"), ("conv3", "bn4")] {
                let (w, shape) = conv_data(&format!("{b}.{conv}"))?;
                let (w, bias) = fold_output(w, &shape, vec![0.0; shape[0]], &self.bn_affine(&format!("{b}.{bn}"))?);
                convs.push((format!("{b}.{conv}"), w, shape, bias));
            }
        }

        let mut store = ParamStore::new();
        for (name, w, shape, bias) in convs {
            let n_out = shape[0];
            store.insert(format!("{name}.w"), ParamKind::ConvWeight, Tensor::new(shape, w.into_iter().map(T::lit).collect())?)?;
            store.insert(format!("{name}.b"), ParamKind::Bias, Tensor::new(vec![n_out], bias.into_iter().map(T::lit).collect())?)?;
        }
        // head: fc(a * gap(x) + c) = (W diag a) gap(x) + (W c + b)
        let (scale, shift) = self.bn_affine("head.bn")?;
        let fc = self.value("head.fc.w")?;
        let (classes, width) = (fc.shape()[0], fc.shape()[1]);
        let fc_b = self.value("head.fc.b")?;
        let mut w = Vec::with_capacity(classes * width);
        let mut bias = Vec::with_capacity(classes);
        for o in 0..classes {
            let row = &fc.data()[o * width..(o + 1) * width];
            let mut acc = fc_b.data()[o].as_f64();
            for (j, v) in row.iter().enumerate() {
                w.push(T::lit(v.as_f64() * scale[j]));
                acc += v.as_f64() * shift[j];
            }
            bias.push(T::lit(acc));
        }
        store.insert("head.fc.w", ParamKind::DenseWeight, Tensor::new(vec![classes, width], w)?)?;
        store.insert("head.fc.b", ParamKind::Bias, Tensor::new(vec![classes], bias)?)?;

        Ok(Model {
            spec: self.spec.clone(),
            shakedrop: self.shakedrop.clone(),
            store,
            plans: self.plans.clone(),
            mode: Mode::Eval,
            folded: true,
        })
    }

    /// Writes the model as a self-describing checkpoint.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let header = Header {
            format: HEADER_FORMAT.to_string(),
            spec: self.spec.clone(),
            shakedrop: self.shakedrop.clone(),
            folded: self.folded,
        };
        let bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_checkpoint(w, &bytes, &self.store)
    }

    /// Reads a checkpoint written by [`Model::save`]. The model is returned in
    /// eval mode.
    pub fn load<R: Read>(r: R) -> Result<Model<T>> {
        let (bytes, store) = read_checkpoint::<T, _>(r)?;
        let header: Header = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != HEADER_FORMAT {
            return Err(Error::Checkpoint(format!("unknown model format `{}`", header.format)));
        }
        let mut model = build_model::<T>(&header.spec, &header.shakedrop, 0)?;
        if header.folded {
            model.set_mode(Mode::Eval)?;
            model = model.fold_batchnorm()?;
        }
        model.store.check_aligned(&store)?;
        model.store = store;
        model.mode = Mode::Eval;
        Ok(model)
    }

    /// Copies all parameter and buffer values from `other`, which must share
    /// the layout.
    pub fn load_values_from(&mut self, other: &Model<T>) -> Result<()> {
        self.store.check_aligned(&other.store)?;
        for (dst, src) in self.store.iter_mut().zip(other.store.iter()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// `BN(conv(x))`: scales output filter `o` by `a[o]` and maps the bias.
fn fold_output(mut w: Vec<f64>, shape: &[usize], bias: Vec<f64>, (a, c): &(Vec<f64>, Vec<f64>)) -> (Vec<f64>, Vec<f64>) {
    let per = shape[1..].iter().product::<usize>();
    for (o, filter) in w.chunks_mut(per).enumerate() {
        filter.iter_mut().for_each(|v| *v *= a[o]);
    }
    let bias = bias.iter().enumerate().map(|(o, b)| a[o] * b + c[o]).collect();
    (w, bias)
}

/// `conv(BN(x))` for an unpadded 1x1 convolution: scales input channel `i`
/// by `a[i]` and adds `W c` to the bias.
fn fold_input(mut w: Vec<f64>, shape: &[usize], mut bias: Vec<f64>, (a, c): &(Vec<f64>, Vec<f64>)) -> (Vec<f64>, Vec<f64>) {
    let (out, inp) = (shape[0], shape[1]);
    debug_assert_eq!(shape[2] * shape[3], 1);
    for o in 0..out {
        for i in 0..inp {
            bias[o] += w[o * inp + i] * c[i];
            w[o * inp + i] *= a[i];
        }
    }
    (w, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PyramidSpec {
        PyramidSpec {
            input_resolution: 8,
            base_channels: 4,
            total_channel_add: 8,
            num_stages: 2,
            blocks_per_stage: 2,
            ..PyramidSpec::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let spec = tiny();
        let s: Vec<usize> = (1..=4).map(|k| channel_schedule(&spec, k).unwrap()).collect();
        assert_eq!(s, vec![6, 8, 10, 12]);
        let wide = PyramidSpec {
            widen_factor: 2.0,
            ..tiny()
        };
        let s: Vec<usize> = (1..=4).map(|k| channel_schedule(&wide, k).unwrap()).collect();
        assert_eq!(s, vec![12, 16, 20, 24]);
        let d = PyramidSpec::default();
        assert_eq!(channel_schedule(&d, d.num_blocks()).unwrap(), 8 + 24);
        assert!(channel_schedule(&d, 0).is_err());
    }

    #[test]
    fn schedule_rounds_half_up() {
        // 1 + k * 1/2 -> 1.5 rounds to 2, 2.5 to 3
        let spec = PyramidSpec {
            base_channels: 1,
            total_channel_add: 1,
            num_stages: 1,
            blocks_per_stage: 2,
            ..PyramidSpec::default()
        };
        assert_eq!(channel_schedule(&spec, 1).unwrap(), 2);
        assert_eq!(channel_schedule(&spec, 2).unwrap(), 2);
        let spec = PyramidSpec {
            widen_factor: 1.25,
            ..spec
        };
        // 1.25 * 2 = 2.5 -> 3
        assert_eq!(channel_schedule(&spec, 1).unwrap(), 3);
    }

    #[test]
    fn full_scale_layout_metadata() {
        let spec = PyramidSpec::full_scale();
        assert_eq!(spec.num_blocks(), 90);
        assert_eq!(spec.stage1_resolution(), 56);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn desk_forward_shape() {
        let spec = PyramidSpec {
            blocks_per_stage: 2,
            total_channel_add: 16,
            ..PyramidSpec::default()
        };
        let model = build_model::<f32>(&spec, &ShakeDropConfig::default(), 1).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 16, 16], |i| (i as f32 * 0.37).sin()).unwrap();
        let y = model.logits(&x, &mut ForwardCtx::new(0, 0)).unwrap();
        assert_eq!(y.shape(), &[2, spec.num_classes]);
    }

    #[test]
    fn blocks_have_two_activations_and_expected_strides() {
        let plans = block_plans(&PyramidSpec::default()).unwrap();
        let strides: Vec<usize> = plans.iter().map(|p| p.stride).collect();
        assert_eq!(strides, vec![1, 1, 1, 2, 1, 1, 2, 1, 1]);
        assert!(plans.windows(2).all(|w| w[0].out_channels <= w[1].out_channels));
        assert!(plans.iter().all(|p| p.inner_channels == (p.out_channels as f64 / 4.0 + 0.5).floor() as usize));
    }

    #[test]
    fn stem_downsampling() {
        let spec = PyramidSpec {
            input_resolution: 32,
            stem_downsample_factor: 4,
            ..PyramidSpec::default()
        };
        let model = build_model::<f32>(&spec, &ShakeDropConfig::default(), 1).unwrap();
        assert!(model.store.by_name("stem.conv1.w").is_some());
        let x = Tensor::zeros(vec![1, 3, 32, 32]).unwrap();
        assert_eq!(model.logits(&x, &mut ForwardCtx::new(0, 0)).unwrap().shape(), &[1, 4]);
        let bad = Tensor::zeros(vec![1, 3, 24, 24]).unwrap();
        assert!(model.logits(&bad, &mut ForwardCtx::new(0, 0)).is_err());
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let spec = PyramidSpec {
            input_resolution: 18,
            ..PyramidSpec::default()
        };
        assert!(build_model::<f32>(&spec, &ShakeDropConfig::default(), 0).is_err());
        let spec = PyramidSpec {
            stem_downsample_factor: 3,
            input_resolution: 48,
            ..PyramidSpec::default()
        };
        assert!(build_model::<f32>(&spec, &ShakeDropConfig::default(), 0).is_err());
    }

    #[test]
    fn conv_bn_fold_scalar_identity() {
        // conv(w=2, b=0) then BN(mean 0, var 1, gamma 3, beta 1) -> conv(w=6, b=1)
        let a = 3.0 / (1.0 + BN_EPS).sqrt();
        let (w, b) = fold_output(vec![2.0], &[1, 1, 1, 1], vec![0.0], &(vec![a], vec![1.0]));
        assert!((w[0] - 6.0).abs() < 1e-4 && b[0] == 1.0);
        let exact = fold_output(vec![2.0], &[1, 1, 1, 1], vec![0.0], &(vec![3.0], vec![1.0]));
        assert_eq!(exact, (vec![6.0], vec![1.0]));
    }

    #[test]
    fn fold_requires_eval_and_is_idempotent() {
        let mut model = build_model::<f64>(&tiny(), &ShakeDropConfig::default(), 3).unwrap();
        assert!(model.fold_batchnorm().is_err());
        model.set_mode(Mode::Eval).unwrap();
        let once = model.fold_batchnorm().unwrap();
        let twice = once.fold_batchnorm().unwrap();
        for (a, b) in once.store.iter().zip(twice.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let mut once = once;
        assert!(once.set_mode(Mode::Train).is_err());
    }

    #[test]
    fn bn_updates_use_momentum() {
        let mut model = build_model::<f64>(&tiny(), &ShakeDropConfig::default(), 3).unwrap();
        let update = BnUpdate {
            prefix: "head.bn".into(),
            mean: vec![1.0; 12],
            var: vec![3.0; 12],
        };
        model.apply_bn_updates(&[update]).unwrap();
        assert_eq!(model.store.by_name("head.bn.mean").unwrap().value.data()[0], 0.1);
        assert_eq!(model.store.by_name("head.bn.var").unwrap().value.data()[0], 0.9 + 0.1 * 3.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = build_model::<f32>(&tiny(), &ShakeDropConfig::default(), 9).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let back = Model::<f32>::load(&bytes[..]).unwrap();
        assert_eq!(back.spec, model.spec);
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
