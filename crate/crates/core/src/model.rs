//! The full network: 3D convolutional front end, (deformable) ConvLSTM,
//! a per-frame 2D head shared across time, global average pooling over
//! `(t, h, w)` and a fully connected classifier.
//!
//! ```text
//! [32,112,112,3] → conv3d+relu → pool(1,2,2) → conv3d+relu → pool(2,2,2)
//!   → [16,28,28,64] → ConvLSTM → [16,28,28,64]
//!   → per frame 3 × (conv2d 3×3 + relu → avgpool 2×2, floor) → [16,3,3,128]
//!   → mean over (t,h,w) → [128] → fc → [17]
//! ```

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Tape, Var};
use crate::convlstm::{unroll, ConvLstmCellParams, DeformableSchedule};
use crate::error::{Error, Result};
use crate::kernels::{Conv3dGeometry, Remainder};
use crate::kv::{self, KeyValues};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

/// Architecture hyperparameters. Serializes to `key=value` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One conv3d + relu + maxpool block per entry. Every pool halves
    /// height and width; only the last one also halves time.
    pub conv3d_channels: Vec<usize>,
    pub convlstm_hidden: usize,
    pub convlstm_layers: usize,
    /// Deformable frames after each of the 25/50/75% marks of the
    /// ConvLSTM's sequence. Zero gives the plain ConvLSTM baseline.
    pub deformable_per_quartile: usize,
    /// One conv2d + relu + avgpool block per entry, applied to every frame.
    pub head_channels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 32,
            height: 112,
            width: 112,
            channels: 3,
            conv3d_channels: vec![32, 64],
            convlstm_hidden: 64,
            convlstm_layers: 1,
            deformable_per_quartile: 3,
            head_channels: vec![64, 96, 128],
            num_classes: 17,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for 16-frame 32×32 clips.
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 16,
            height: 32,
            width: 32,
            channels: 3,
            conv3d_channels: vec![8, 16],
            convlstm_hidden: 16,
            convlstm_layers: 1,
            deformable_per_quartile: 3,
            head_channels: vec![16, 16, 16],
            num_classes: 4,
            seed: 0,
        }
    }

    /// The same architecture with an empty deformable schedule.
    pub fn baseline(&self) -> Self {
        ModelConfig { deformable_per_quartile: 0, ..self.clone() }
    }

    pub fn is_deformable(&self) -> bool {
        self.deformable_per_quartile > 0
    }

    /// Length of the sequence entering the ConvLSTM.
    pub fn lstm_frames(&self) -> usize {
        self.frames / 2
    }

    pub fn schedule(&self) -> DeformableSchedule {
        DeformableSchedule::quartiles(self.lstm_frames(), self.deformable_per_quartile)
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nheight={}\nwidth={}\nchannels={}\nconv3d_channels={}\nconvlstm_hidden={}\n\
             convlstm_layers={}\ndeformable_per_quartile={}\nhead_channels={}\nnum_classes={}\nseed={}\n",
            self.frames,
            self.height,
            self.width,
            self.channels,
            kv::join(&self.conv3d_channels),
            self.convlstm_hidden,
            self.convlstm_layers,
            self.deformable_per_quartile,
            kv::join(&self.head_channels),
            self.num_classes,
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Consumes the model keys of `kv`, defaulting the absent ones.
    pub(crate) fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            frames: kv.take("frames", d.frames)?,
            height: kv.take("height", d.height)?,
            width: kv.take("width", d.width)?,
            channels: kv.take("channels", d.channels)?,
            conv3d_channels: kv.take_list("conv3d_channels", d.conv3d_channels)?,
            convlstm_hidden: kv.take("convlstm_hidden", d.convlstm_hidden)?,
            convlstm_layers: kv.take("convlstm_layers", d.convlstm_layers)?,
            deformable_per_quartile: kv.take("deformable_per_quartile", d.deformable_per_quartile)?,
            head_channels: kv.take_list("head_channels", d.head_channels)?,
            num_classes: kv.take("num_classes", d.num_classes)?,
            seed: kv.take("seed", d.seed)?,
        };
        cfg.shape_table()?;
        Ok(cfg)
    }

    /// FNV-1a of [`to_text`](Self::to_text).
    pub fn hash(&self) -> u64 {
        kv::fnv1a(self.to_text().as_bytes())
    }

    /// Activation extents after every stage. Fails when the configuration
    /// cannot produce a valid network.
    pub fn shape_table(&self) -> Result<ShapeTable> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dims().contains(&0) {
            return bad(format!("input extents must be positive, got {:?}", self.input_dims()));
        }
        if self.conv3d_channels.is_empty() || self.head_channels.is_empty() {
            return bad("conv3d_channels and head_channels must be non-empty".into());
        }
        if self.conv3d_channels.contains(&0) || self.head_channels.contains(&0) || self.convlstm_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.convlstm_layers == 0 {
            return bad("convlstm_layers must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let mut rows = vec![("input".to_string(), self.input_dims().to_vec())];
        let [mut t, mut h, mut w, _] = self.input_dims();
        let blocks = self.conv3d_channels.len();
        for (i, &c) in self.conv3d_channels.iter().enumerate() {
            rows.push((format!("conv3d.{i}"), vec![t, h, w, c]));
            let dt = if i + 1 == blocks { 2 } else { 1 };
            if t % dt != 0 || h % 2 != 0 || w % 2 != 0 {
                return bad(format!("3D pool {i} cannot divide [{t},{h},{w}] by [{dt},2,2]"));
            }
            (t, h, w) = (t / dt, h / 2, w / 2);
            rows.push((format!("maxpool3d.{i}"), vec![t, h, w, c]));
        }
        for l in 0..self.convlstm_layers {
            rows.push((format!("convlstm.{l}"), vec![t, h, w, self.convlstm_hidden]));
        }
        for (i, &c) in self.head_channels.iter().enumerate() {
            rows.push((format!("head.{i}.conv"), vec![t, h, w, c]));
            if h < 2 || w < 2 {
                return bad(format!("head pool {i} needs extents ≥ 2, got {h}×{w}"));
            }
            (h, w) = (h / 2, w / 2);
            rows.push((format!("head.{i}.avgpool"), vec![t, h, w, c]));
        }
        rows.push(("gap".into(), vec![*self.head_channels.last().expect("non-empty")]));
        rows.push(("fc".into(), vec![self.num_classes]));
        Ok(ShapeTable(rows))
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Stage names and their activation extents, in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTable(pub Vec<(String, Vec<usize>)>);

impl ShapeTable {
    pub fn get(&self, stage: &str) -> Option<&[usize]> {
        self.0.iter().find(|(n, _)| n == stage).map(|(_, d)| d.as_slice())
    }

    /// Extents entering the ConvLSTM, i.e. leaving the 3D component.
    pub fn front_end_output(&self) -> &[usize] {
        let last = self.0.iter().rev().find(|(n, _)| n.starts_with("maxpool3d."));
        &last.expect("at least one 3D block").1
    }

    /// How many 3D pools shrink the time axis.
    pub fn temporal_pools(&self) -> usize {
        let mut t = self.0[0].1[0];
        let mut count = 0;
        for (name, dims) in &self.0 {
            if name.starts_with("maxpool3d.") {
                if dims[0] < t {
                    count += 1;
                }
                t = dims[0];
            }
        }
        count
    }
}

impl fmt::Display for ShapeTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, dims) in &self.0 {
            writeln!(f, "{name}: {dims:?}")?;
        }
        Ok(())
    }
}

/// Named parameter tensors plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

pub type BoundParams<'t> = BTreeMap<String, Var<'t, f32>>;

fn he_uniform(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.gen_range(-bound..=bound) as f32)
}

/// Initializes every parameter from `cfg.seed`.
///
/// Relu-fed convolutions use `U(±√(6/fan_in))`, the classifier
/// `U(±√(1/fan_in))`, biases start at zero; ConvLSTM cells follow
/// [`ConvLstmCellParams::init`].
pub fn build(cfg: &ModelConfig) -> Result<ModelParams> {
    let table = cfg.shape_table()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    let mut c_in = cfg.channels;
    for (i, &c) in cfg.conv3d_channels.iter().enumerate() {
        let fan_in = KERNEL * KERNEL * KERNEL * c_in;
        tensors.insert(format!("conv3d.{i}.weight"), he_uniform(&[KERNEL, KERNEL, KERNEL, c_in, c], fan_in, &mut rng)?);
        tensors.insert(format!("conv3d.{i}.bias"), Tensor::zeros(&[c])?);
        c_in = c;
    }
    for l in 0..cfg.convlstm_layers {
        let cell =
            ConvLstmCellParams::<Tensor>::init(c_in, cfg.convlstm_hidden, KERNEL, cfg.is_deformable(), &mut rng)?;
        for (name, t) in cell.named() {
            tensors.insert(format!("convlstm.{l}.{name}"), t.clone());
        }
        c_in = cfg.convlstm_hidden;
    }
    for (i, &c) in cfg.head_channels.iter().enumerate() {
        let fan_in = KERNEL * KERNEL * c_in;
        tensors.insert(format!("head.{i}.weight"), he_uniform(&[KERNEL, KERNEL, c_in, c], fan_in, &mut rng)?);
        tensors.insert(format!("head.{i}.bias"), Tensor::zeros(&[c])?);
        c_in = c;
    }
    let bound = (1.0 / c_in as f64).sqrt();
    let fc = Tensor::from_fn(&[c_in, cfg.num_classes], |_| rng.gen_range(-bound..=bound) as f32)?;
    tensors.insert("fc.weight".into(), fc);
    tensors.insert("fc.bias".into(), Tensor::zeros(&[cfg.num_classes])?);
    debug_assert_eq!(table.get("gap"), Some(&[c_in][..]));
    Ok(ModelParams { config: cfg.clone(), tensors })
}

impl ModelParams {
    /// Reassembles parameters, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = build(&config)?;
        let want: Vec<_> = reference.tensors.iter().map(|(n, t)| (n, t.dims())).collect();
        let got: Vec<_> = tensors.iter().map(|(n, t)| (n, t.dims())).collect();
        if want != got {
            for ((wn, wd), (gn, gd)) in want.iter().zip(&got) {
                if wn != gn || wd != gd {
                    return Err(Error::Config(format!("parameter {gn} {gd:?} does not match expected {wn} {wd:?}")));
                }
            }
            return Err(Error::Config(format!("expected {} parameters, found {}", want.len(), got.len())));
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<f32>) -> Result<BoundParams<'t>> {
        self.tensors.iter().map(|(n, t)| Ok((n.clone(), tape.param(t.clone())?))).collect()
    }
}

/// Total number of scalar parameters.
pub fn param_count(params: &ModelParams) -> usize {
    params.tensors.values().map(Tensor::len).sum()
}

fn lookup<'t>(bound: &BoundParams<'t>, name: &str) -> Result<Var<'t, f32>> {
    bound.get(name).copied().ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))
}

fn expect_dims(stage: &'static str, v: &Var<'_, f32>, table: &ShapeTable, row: &str) -> Result<()> {
    let want = table.get(row).expect("stage present in table");
    let got = v.dims();
    if got != want {
        return Err(Error::mismatch(stage, want, &got));
    }
    Ok(())
}

/// Records the forward pass of `cfg` on `clip`'s tape and returns the
/// logits `[num_classes]`.
pub fn forward_on<'t>(cfg: &ModelConfig, bound: &BoundParams<'t>, clip: Var<'t, f32>) -> Result<Var<'t, f32>> {
    let table = cfg.shape_table()?;
    if clip.dims() != cfg.input_dims() {
        return Err(Error::mismatch("model input", &cfg.input_dims(), &clip.dims()));
    }
    let mut x = clip;
    let blocks = cfg.conv3d_channels.len();
    for i in 0..blocks {
        let w = lookup(bound, &format!("conv3d.{i}.weight"))?;
        let b = lookup(bound, &format!("conv3d.{i}.bias"))?;
        x = autodiff::conv3d(x, w, Some(b), Conv3dGeometry::same(KERNEL, KERNEL, KERNEL))?.relu()?;
        let window = if i + 1 == blocks { (2, 2, 2) } else { (1, 2, 2) };
        x = autodiff::maxpool3d(x, window, window, Remainder::Strict)?;
    }
    expect_dims("3D component output", &x, &table, &format!("maxpool3d.{}", blocks - 1))?;

    let schedule = cfg.schedule();
    for l in 0..cfg.convlstm_layers {
        let cell = ConvLstmCellParams::from_named(KERNEL, cfg.is_deformable(), |n| {
            lookup(bound, &format!("convlstm.{l}.{n}"))
        })?;
        x = unroll(x, &cell, &schedule)?;
    }

    let t = x.dims()[0];
    for i in 0..cfg.head_channels.len() {
        let w = lookup(bound, &format!("head.{i}.weight"))?;
        let b = lookup(bound, &format!("head.{i}.bias"))?;
        // A 1×3×3 conv3d is the shared-weight 2D conv applied to every frame.
        let wd = w.dims();
        let w3 = w.reshape(&[1, wd[0], wd[1], wd[2], wd[3]])?;
        let geom = Conv3dGeometry { stride: (1, 1, 1), padding: (0, KERNEL / 2, KERNEL / 2) };
        let y = autodiff::conv3d(x, w3, Some(b), geom)?.relu()?;
        let frames = (0..t)
            .map(|f| autodiff::avgpool2d(y.index_axis0(f)?, (2, 2), (2, 2), Remainder::Floor))
            .collect::<Result<Vec<_>>>()?;
        x = autodiff::stack(&frames)?;
        expect_dims("2D head output", &x, &table, &format!("head.{i}.avgpool"))?;
    }

    let features = x.reduce_mean(&[0, 1, 2])?;
    let c = features.dims()[0];
    let logits = features.reshape(&[1, c])?.matmul(lookup(bound, "fc.weight")?)?.reshape(&[cfg.num_classes])?;
    logits.add(lookup(bound, "fc.bias")?)
}

/// Inference: logits for one clip `[t, h, w, c]`.
pub fn forward(params: &ModelParams, clip: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound =
        params.tensors.iter().map(|(n, t)| Ok((n.clone(), tape.constant(t.clone())?))).collect::<Result<_>>()?;
    let logits = forward_on(&params.config, &bound, tape.input(clip)?)?;
    let value = logits.value();
    Ok(value.as_ref().clone())
}
