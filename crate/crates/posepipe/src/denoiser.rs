//! The time-conditioned noise prediction network: a small multi-resolution
//! U-Net over latent frames with spatial self-attention, text
//! cross-attention and FFN in every attention block, plus — after inflation
//! to video form — cross-frame self-attention and temporal self-attention
//! appended to each block with identity initialization.
//!
//! Convolutions are spatial 3x3 kernels applied per frame (the pseudo-3D
//! form with temporal extent 1), so inflation reuses the image weights
//! unchanged and only adds the new attention modules.

use crate::error::{PipelineError, Result};
use crate::graph::{Graph, Var};
use crate::pose_control;
use crate::tensor::{Scalar, Tensor};
use crate::text_cond::{self, SEQ_LEN};
use crate::util::{self, NormalSource};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Backbone,
    PoseEncoder,
    TemporalSa,
    CrossFrameSa,
}

impl ParamTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamTag::Backbone => "backbone",
            ParamTag::PoseEncoder => "pose_encoder",
            ParamTag::TemporalSa => "temporal_sa",
            ParamTag::CrossFrameSa => "cross_frame_sa",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(ParamTag::Backbone),
            "pose_encoder" => Ok(ParamTag::PoseEncoder),
            "temporal_sa" => Ok(ParamTag::TemporalSa),
            "cross_frame_sa" => Ok(ParamTag::CrossFrameSa),
            other => Err(PipelineError::Integrity(format!("unknown parameter tag {:?}", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub tag: ParamTag,
}

/// Named parameter store. Iteration is always in name order, so every
/// consumer (optimizer, serializer, binder) sees the same sequence.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, tag: ParamTag) {
        assert!(
            self.entries
                .insert(name.to_string(), Param { tensor, tag })
                .is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| PipelineError::Integrity(format!("missing parameter {:?}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| PipelineError::Integrity(format!("missing parameter {:?}", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast::<U>(),
                            tag: p.tag,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn is_inflated(&self) -> bool {
        self.entries.values().any(|p| p.tag == ParamTag::TemporalSa)
    }
}

/// Per-stage trainable flags: stage 0 trains the backbone, stage 1 exactly
/// the pose encoder, stage 2 exactly the temporal and cross-frame modules.
pub fn trainable_mask<T: Scalar>(store: &ParamStore<T>, stage: u8) -> Result<BTreeMap<String, bool>> {
    if stage > 2 {
        return Err(PipelineError::Parameter(format!("unknown training stage {}", stage)));
    }
    let mut mask = BTreeMap::new();
    for (name, p) in store.iter() {
        let trainable = match stage {
            0 => p.tag == ParamTag::Backbone,
            1 => p.tag == ParamTag::PoseEncoder,
            _ => p.tag == ParamTag::TemporalSa || p.tag == ParamTag::CrossFrameSa,
        };
        mask.insert(name.clone(), trainable);
    }
    Ok(mask)
}

/// Parameters bound into a graph as leaves, looked up by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds every parameter as a graph leaf. Names in `trainable` (when
    /// given) become gradient-requiring leaves; everything else is frozen
    /// structurally — the graph will not even compute their gradients.
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trainable: Option<&BTreeMap<String, bool>>,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, p) in store.iter() {
            let requires = trainable
                .map(|m| m.get(name).copied().unwrap_or(false))
                .unwrap_or(false);
            vars.insert(name.clone(), g.leaf(p.tensor.clone(), requires));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PipelineError::Integrity(format!("parameter {:?} not bound", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossFrameKv {
    /// Keys/values from the first and previous frames (frame 1 attends to
    /// itself only).
    FirstPrev,
    First,
    Prev,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Multi-resolution residual injection via the pose encoder.
    Residual,
    /// Channel-wise concatenation of the latentized pose map (ablation).
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "level")]
pub enum InjectMode {
    /// Residuals added after every encoder level's residual block.
    AllEncoder,
    /// Residuals added on encoder and decoder levels.
    AllEncoderDecoder,
    /// Residuals added at a single encoder level (ablation).
    Single(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    /// Maximum frames per window.
    pub frames: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub image_size: usize,
    pub norm_groups: usize,
    /// Pose encoder trunk widths, one per stride-2 conv.
    pub pose_hidden: Vec<usize>,
    pub cross_frame_kv: CrossFrameKv,
    pub inject: InjectMode,
    pub pose_mode: PoseMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            heads: 2,
            text_dim: 32,
            time_dim: 64,
            frames: 8,
            latent_channels: 48,
            latent_size: 8,
            image_size: 32,
            norm_groups: 8,
            pose_hidden: vec![16, 16, 32, 32],
            cross_frame_kv: CrossFrameKv::FirstPrev,
            inject: InjectMode::AllEncoder,
            pose_mode: PoseMode::Residual,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial side length at a level: latent_size / 2^level.
    pub fn level_size(&self, level: usize) -> usize {
        self.latent_size >> level
    }

    /// Number of stride-2 convs in the pose encoder trunk.
    pub fn pose_convs(&self) -> usize {
        let mut n_pre = 0usize;
        let mut s = self.image_size;
        while s > self.latent_size {
            s /= 2;
            n_pre += 1;
        }
        n_pre + self.levels() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() == 0 {
            return Err(PipelineError::Parameter("channel_mults must be non-empty".into()));
        }
        if self.latent_size >> (self.levels() - 1) < 1 {
            return Err(PipelineError::Parameter(format!(
                "latent size {} too small for {} levels",
                self.latent_size,
                self.levels()
            )));
        }
        for l in 0..self.levels() {
            if self.channels(l) % self.norm_groups != 0 {
                return Err(PipelineError::Parameter(format!(
                    "level {} channels {} not divisible by norm groups {}",
                    l,
                    self.channels(l),
                    self.norm_groups
                )));
            }
            if self.channels(l) % self.heads != 0 {
                return Err(PipelineError::Parameter(format!(
                    "level {} channels {} not divisible by heads {}",
                    l,
                    self.channels(l),
                    self.heads
                )));
            }
        }
        if !self.image_size.is_power_of_two() || !self.latent_size.is_power_of_two() {
            return Err(PipelineError::Parameter(
                "image and latent sizes must be powers of two".into(),
            ));
        }
        if self.image_size < self.latent_size {
            return Err(PipelineError::Parameter("image smaller than latent".into()));
        }
        if self.pose_hidden.len() != self.pose_convs() {
            return Err(PipelineError::Parameter(format!(
                "pose_hidden needs {} widths, got {}",
                self.pose_convs(),
                self.pose_hidden.len()
            )));
        }
        if let InjectMode::Single(l) = self.inject {
            if l >= self.levels() {
                return Err(PipelineError::Parameter(format!(
                    "injection level {} out of range (levels {})",
                    l,
                    self.levels()
                )));
            }
        }
        Ok(())
    }

    /// Attention block prefixes in forward order.
    pub fn attn_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.levels() {
            out.push(format!("down.{}.attn", l));
        }
        out.push("mid.attn".into());
        for l in (0..self.levels()).rev() {
            out.push(format!("up.{}.attn", l));
        }
        out
    }
}

const SIN_DIM: usize = 64;

/// Sinusoidal timestep features (computed outside the graph; no params).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (10_000f64).powf(-exponent);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn conv_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    tag: ParamTag,
    src: &mut NormalSource,
) {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    store.insert(
        &format!("{name}.weight"),
        Tensor::randn_scaled(&[kh, kw, cin, cout], std, src),
        tag,
    );
    store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]), tag);
}

fn conv_init_zero<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    tag: ParamTag,
) {
    store.insert(
        &format!("{name}.weight"),
        Tensor::zeros(&[kh, kw, cin, cout]),
        tag,
    );
    store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]), tag);
}

fn linear_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    tag: ParamTag,
    src: &mut NormalSource,
) {
    let std = (cin as f64).sqrt().recip();
    store.insert(
        &format!("{name}.weight"),
        Tensor::randn_scaled(&[cin, cout], std, src),
        tag,
    );
    store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]), tag);
}

fn norm_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, tag: ParamTag) {
    store.insert(&format!("{name}.gamma"), Tensor::filled(&[c], T::one()), tag);
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]), tag);
}

fn res_block_init<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
    src: &mut NormalSource,
) {
    let tag = ParamTag::Backbone;
    norm_init(store, &format!("{prefix}.norm1"), cin, tag);
    conv_init(store, &format!("{prefix}.conv1"), 3, 3, cin, cout, tag, src);
    linear_init(store, &format!("{prefix}.temb"), time_dim, cout, tag, src);
    norm_init(store, &format!("{prefix}.norm2"), cout, tag);
    conv_init(store, &format!("{prefix}.conv2"), 3, 3, cout, cout, tag, src);
    if cin != cout {
        conv_init(store, &format!("{prefix}.skip"), 1, 1, cin, cout, tag, src);
    }
}

fn attn_block_init<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    text_dim: usize,
    src: &mut NormalSource,
) {
    let tag = ParamTag::Backbone;
    norm_init(store, &format!("{prefix}.ln_self"), c, tag);
    for part in ["q", "k", "v", "out"] {
        linear_init(store, &format!("{prefix}.self.{part}"), c, c, tag, src);
    }
    norm_init(store, &format!("{prefix}.ln_cross"), c, tag);
    linear_init(store, &format!("{prefix}.cross.q"), c, c, tag, src);
    linear_init(store, &format!("{prefix}.cross.k"), text_dim, c, tag, src);
    linear_init(store, &format!("{prefix}.cross.v"), text_dim, c, tag, src);
    linear_init(store, &format!("{prefix}.cross.out"), c, c, tag, src);
    norm_init(store, &format!("{prefix}.ln_ffn"), c, tag);
    linear_init(store, &format!("{prefix}.ffn.fc1"), c, 4 * c, tag, src);
    linear_init(store, &format!("{prefix}.ffn.fc2"), 4 * c, c, tag, src);
}

fn pose_encoder_init<T: Scalar>(cfg: &DenoiserConfig, store: &mut ParamStore<T>, src: &mut NormalSource) {
    let tag = ParamTag::PoseEncoder;
    let n_convs = cfg.pose_convs();
    let n_pre = n_convs + 1 - cfg.levels();
    let mut cin = pose_control::POSE_CHANNELS;
    for i in 0..n_convs {
        let cout = cfg.pose_hidden[i];
        conv_init(store, &format!("pose.conv{i}"), 3, 3, cin, cout, tag, src);
        if i + 1 >= n_pre {
            let level = i + 1 - n_pre;
            conv_init_zero(
                store,
                &format!("pose.proj{level}"),
                1,
                1,
                cout,
                cfg.channels(level),
                tag,
            );
        }
        cin = cout;
    }
}

/// Builds the image-model parameter store (stage-0 starting point).
pub fn init_image_params<T: Scalar>(
    cfg: &DenoiserConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut src = NormalSource::from_seed(util::derive_seed(seed, util::domains::INIT_PARAMS, 0));
    let mut store = ParamStore::new();
    let tag = ParamTag::Backbone;

    match cfg.pose_mode {
        PoseMode::Residual => {
            conv_init(&mut store, "conv_in", 3, 3, cfg.latent_channels, cfg.channels(0), tag, &mut src);
        }
        PoseMode::Concat => {
            conv_init(
                &mut store,
                "conv_in_concat",
                3,
                3,
                2 * cfg.latent_channels,
                cfg.channels(0),
                tag,
                &mut src,
            );
        }
    }
    linear_init(&mut store, "time.mlp1", SIN_DIM, cfg.time_dim, tag, &mut src);
    linear_init(&mut store, "time.mlp2", cfg.time_dim, cfg.time_dim, tag, &mut src);
    store.insert(
        "text.table",
        text_cond::init_embedding_table(vocab_size, cfg.text_dim, &mut src),
        tag,
    );

    for l in 0..cfg.levels() {
        let cin = if l == 0 { cfg.channels(0) } else { cfg.channels(l) };
        res_block_init(&mut store, &format!("down.{l}.res"), cin, cfg.channels(l), cfg.time_dim, &mut src);
        attn_block_init(&mut store, &format!("down.{l}.attn"), cfg.channels(l), cfg.text_dim, &mut src);
        if l + 1 < cfg.levels() {
            conv_init(
                &mut store,
                &format!("down.{l}.down"),
                3,
                3,
                cfg.channels(l),
                cfg.channels(l + 1),
                tag,
                &mut src,
            );
        }
    }
    let top = cfg.levels() - 1;
    res_block_init(&mut store, "mid.res1", cfg.channels(top), cfg.channels(top), cfg.time_dim, &mut src);
    attn_block_init(&mut store, "mid.attn", cfg.channels(top), cfg.text_dim, &mut src);
    res_block_init(&mut store, "mid.res2", cfg.channels(top), cfg.channels(top), cfg.time_dim, &mut src);

    for l in (0..cfg.levels()).rev() {
        res_block_init(
            &mut store,
            &format!("up.{l}.res"),
            2 * cfg.channels(l),
            cfg.channels(l),
            cfg.time_dim,
            &mut src,
        );
        attn_block_init(&mut store, &format!("up.{l}.attn"), cfg.channels(l), cfg.text_dim, &mut src);
        if l > 0 {
            conv_init(
                &mut store,
                &format!("up.{l}.upconv"),
                3,
                3,
                cfg.channels(l),
                cfg.channels(l - 1),
                tag,
                &mut src,
            );
        }
    }
    norm_init(&mut store, "out.norm", cfg.channels(0), tag);
    conv_init_zero(&mut store, "out.conv", 3, 3, cfg.channels(0), cfg.latent_channels, tag);

    if cfg.pose_mode == PoseMode::Residual {
        pose_encoder_init(cfg, &mut store, &mut src);
    }
    Ok(store)
}

/// Switches a residual-variant store to the concatenation ablation variant:
/// drops the pose encoder, replaces the first conv with a widened,
/// re-initialized one (tagged pose_encoder — it is the pose pathway that
/// stage 1 trains in this variant).
pub fn to_concat_variant<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<ParamStore<T>> {
    if store.contains("conv_in_concat.weight") {
        return Err(PipelineError::State("store is already the concat variant".into()));
    }
    let mut out = store.clone();
    out.remove_prefix("conv_in.");
    out.remove_prefix("pose.");
    let mut src = NormalSource::from_seed(util::derive_seed(seed, util::domains::INIT_PARAMS, 1));
    let std = (2.0 / (9 * 2 * cfg.latent_channels) as f64).sqrt();
    out.insert(
        "conv_in_concat.weight",
        Tensor::randn_scaled(&[3, 3, 2 * cfg.latent_channels, cfg.channels(0)], std, &mut src),
        ParamTag::PoseEncoder,
    );
    out.insert(
        "conv_in_concat.bias",
        Tensor::zeros(&[cfg.channels(0)]),
        ParamTag::PoseEncoder,
    );
    Ok(out)
}

/// Adds the video modules: per attention block, a cross-frame attention and
/// a temporal self-attention, both warm-started from the block's spatial
/// attention weights with zero output projections, so the inflated model is
/// identical to the image model until stage-2 training moves the new
/// parameters. The 3x3 convolutions already act per frame (1x3x3), so their
/// weights carry over untouched.
pub fn inflate_to_pseudo3d<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &DenoiserConfig,
) -> Result<ParamStore<T>> {
    if store.is_inflated() {
        return Err(PipelineError::State("parameters are already inflated".into()));
    }
    let mut out = store.clone();
    for prefix in cfg.attn_prefixes() {
        let c = store.get(&format!("{prefix}.ln_self.gamma"))?.tensor.numel();
        for (module, tag) in [("cf", ParamTag::CrossFrameSa), ("temp", ParamTag::TemporalSa)] {
            out.insert(
                &format!("{prefix}.ln_{module}.gamma"),
                Tensor::filled(&[c], T::one()),
                tag,
            );
            out.insert(&format!("{prefix}.ln_{module}.beta"), Tensor::zeros(&[c]), tag);
            for part in ["q", "k", "v"] {
                let w = store.get(&format!("{prefix}.self.{part}.weight"))?.tensor.clone();
                let b = store.get(&format!("{prefix}.self.{part}.bias"))?.tensor.clone();
                out.insert(&format!("{prefix}.{module}.{part}.weight"), w, tag);
                out.insert(&format!("{prefix}.{module}.{part}.bias"), b, tag);
            }
            out.insert(
                &format!("{prefix}.{module}.out.weight"),
                Tensor::zeros(&[c, c]),
                tag,
            );
            out.insert(&format!("{prefix}.{module}.out.bias"), Tensor::zeros(&[c]), tag);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Pose conditioning input for a forward pass.
pub enum PoseInput<'a, T> {
    /// No pose pathway at all.
    Absent,
    /// Rasterized pose maps [N, image, image, 3]; run the pose encoder and
    /// inject residuals.
    Residual(&'a Tensor<T>),
    /// Pre-encoded residuals, one per level (used by tests/ablation taps).
    ResidualFeatures(Vec<Var>),
    /// Latentized pose map [N, latent, latent, c] for the concat variant.
    ConcatLatent(&'a Tensor<T>),
}

pub struct ForwardArgs<'a, T> {
    /// Noisy latents [N, s, s, c] with N = videos * frames.
    pub latents: &'a Tensor<T>,
    /// Frames per video (1 for image batches).
    pub frames: usize,
    /// One timestep per video.
    pub timesteps: &'a [usize],
    /// Token ids, SEQ_LEN per video.
    pub text_tokens: &'a [u32],
    pub pose: PoseInput<'a, T>,
    /// Enables cross-frame and temporal attention (requires inflated params).
    pub video_mode: bool,
}

/// Runs the denoiser and returns the predicted noise, same shape as the
/// input latents.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    args: &ForwardArgs<'_, T>,
) -> Result<Var> {
    let d = args.latents.dims().to_vec();
    if d.len() != 4 || d[1] != cfg.latent_size || d[2] != cfg.latent_size || d[3] != cfg.latent_channels
    {
        return Err(PipelineError::Shape(format!(
            "forward: latents {:?}, expected [N, {}, {}, {}]",
            d, cfg.latent_size, cfg.latent_size, cfg.latent_channels
        )));
    }
    let n = d[0];
    if args.frames == 0 || n % args.frames != 0 {
        return Err(PipelineError::Shape(format!(
            "forward: batch {} not divisible by frames {}",
            n, args.frames
        )));
    }
    if args.frames > cfg.frames {
        return Err(PipelineError::Parameter(format!(
            "forward: {} frames exceeds configured max {}",
            args.frames, cfg.frames
        )));
    }
    let videos = n / args.frames;
    if args.timesteps.len() != videos {
        return Err(PipelineError::Shape(format!(
            "forward: {} timesteps for {} videos",
            args.timesteps.len(),
            videos
        )));
    }
    if args.text_tokens.len() != videos * SEQ_LEN {
        return Err(PipelineError::Shape(format!(
            "forward: {} token ids for {} videos",
            args.text_tokens.len(),
            videos
        )));
    }
    if args.video_mode && !p.contains(&format!("{}. ", "")) {
        // placeholder never matches; real check below via cf params
    }
    if args.video_mode && !p.contains("mid.attn.temp.out.weight") {
        return Err(PipelineError::State(
            "video mode requires inflated parameters".into(),
        ));
    }

    // frame index -> video index mապping for broadcasts
    let expand: Vec<usize> = (0..n).map(|i| i / args.frames).collect();

    // timestep embedding
    let mut temb_data = Vec::with_capacity(videos * SIN_DIM);
    for &t in args.timesteps {
        temb_data.extend(sinusoidal_embedding(t, SIN_DIM).into_iter().map(T::from_f64));
    }
    let temb0 = {
        let t = Tensor::from_vec(&[videos, SIN_DIM], temb_data)?;
        g.leaf(t, false)
    };
    let h1 = g.linear(temb0, p.var("time.mlp1.weight")?, p.var("time.mlp1.bias")?)?;
    let h1 = g.silu(h1);
    let temb_video = g.linear(h1, p.var("time.mlp2.weight")?, p.var("time.mlp2.bias")?)?;
    let temb = g.select_rows(temb_video, expand.clone())?; // [N, time_dim]

    // text conditioning
    let text_video = text_cond::embed(g, p.var("text.table")?, args.text_tokens)?; // [videos, L, d]
    let text = g.select_rows(text_video, expand)?; // [N, L, d]

    // pose pathway and first conv
    let z = g.leaf(args.latents.clone(), false);
    let (mut x, residuals): (Var, Option<Vec<Var>>) = match (&args.pose, cfg.pose_mode) {
        (PoseInput::Absent, PoseMode::Residual) => {
            let x = g.conv2d(z, p.var("conv_in.weight")?, p.var("conv_in.bias")?, 1, 1)?;
            (x, None)
        }
        (PoseInput::Residual(maps), PoseMode::Residual) => {
            let res = pose_encode(g, p, cfg, maps)?;
            let x = g.conv2d(z, p.var("conv_in.weight")?, p.var("conv_in.bias")?, 1, 1)?;
            (x, Some(res.levels_vars))
        }
        (PoseInput::ResidualFeatures(vars), PoseMode::Residual) => {
            let x = g.conv2d(z, p.var("conv_in.weight")?, p.var("conv_in.bias")?, 1, 1)?;
            (x, Some(vars.clone()))
        }
        (pose, PoseMode::Concat) => {
            if !p.contains("conv_in_concat.weight") {
                return Err(PipelineError::State(
                    "concat pose mode requested on residual-variant weights".into(),
                ));
            }
            let pose_var = match pose {
                PoseInput::ConcatLatent(lat) => {
                    let ld = lat.dims();
                    if ld != [n, cfg.latent_size, cfg.latent_size, cfg.latent_channels] {
                        return Err(PipelineError::Shape(format!(
                            "concat pose latent {:?} does not match latents {:?}",
                            ld,
                            args.latents.dims()
                        )));
                    }
                    g.leaf(lat.clone(), false)
                }
                PoseInput::Absent => g.leaf(Tensor::zeros(args.latents.dims()), false),
                _ => {
                    return Err(PipelineError::Parameter(
                        "concat pose mode takes ConcatLatent (or Absent for the null branch)".into(),
                    ))
                }
            };
            let zp = pose_control::concat_inject(g, z, pose_var)?;
            let x = g.conv2d(zp, p.var("conv_in_concat.weight")?, p.var("conv_in_concat.bias")?, 1, 1)?;
            (x, None)
        }
        (_, PoseMode::Residual) => unreachable!(),
    };

    let video = if args.video_mode && args.frames >= 1 {
        Some(args.frames)
    } else {
        None
    };

    let inject_here = |level: usize, decoder: bool| -> bool {
        match cfg.inject {
            InjectMode::AllEncoder => !decoder,
            InjectMode::AllEncoderDecoder => true,
            InjectMode::Single(l) => !decoder && l == level,
        }
    };

    // encoder
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        x = res_block(g, p, cfg, &format!("down.{l}.res"), x, temb)?;
        if let Some(res) = &residuals {
            if inject_here(l, false) {
                x = pose_control::inject(g, x, res[l], l)?;
            }
        }
        x = attention_block(g, p, cfg, &format!("down.{l}.attn"), x, text, video)?;
        skips.push(x);
        if l + 1 < cfg.levels() {
            x = g.conv2d(
                x,
                p.var(&format!("down.{l}.down.weight"))?,
                p.var(&format!("down.{l}.down.bias"))?,
                2,
                1,
            )?;
        }
    }

    // middle
    x = res_block(g, p, cfg, "mid.res1", x, temb)?;
    x = attention_block(g, p, cfg, "mid.attn", x, text, video)?;
    x = res_block(g, p, cfg, "mid.res2", x, temb)?;

    // decoder
    for l in (0..cfg.levels()).rev() {
        let skip = skips[l];
        x = g.concat(x, skip, 3)?;
        x = res_block(g, p, cfg, &format!("up.{l}.res"), x, temb)?;
        if let Some(res) = &residuals {
            if inject_here(l, true) {
                x = pose_control::inject(g, x, res[l], l)?;
            }
        }
        x = attention_block(g, p, cfg, &format!("up.{l}.attn"), x, text, video)?;
        if l > 0 {
            x = g.upsample2x(x)?;
            x = g.conv2d(
                x,
                p.var(&format!("up.{l}.upconv.weight"))?,
                p.var(&format!("up.{l}.upconv.bias"))?,
                1,
                1,
            )?;
        }
    }

    // output head
    x = g.group_norm(x, p.var("out.norm.gamma")?, p.var("out.norm.beta")?, cfg.norm_groups)?;
    x = g.silu(x);
    g.conv2d(x, p.var("out.conv.weight")?, p.var("out.conv.bias")?, 1, 1)
}

fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    prefix: &str,
    x: Var,
    temb: Var,
) -> Result<Var> {
    let mut h = g.group_norm(
        x,
        p.var(&format!("{prefix}.norm1.gamma"))?,
        p.var(&format!("{prefix}.norm1.beta"))?,
        cfg.norm_groups,
    )?;
    h = g.silu(h);
    h = g.conv2d(
        h,
        p.var(&format!("{prefix}.conv1.weight"))?,
        p.var(&format!("{prefix}.conv1.bias"))?,
        1,
        1,
    )?;
    let te = g.linear(
        temb,
        p.var(&format!("{prefix}.temb.weight"))?,
        p.var(&format!("{prefix}.temb.bias"))?,
    )?;
    h = g.add_per_row(h, te)?;
    h = g.group_norm(
        h,
        p.var(&format!("{prefix}.norm2.gamma"))?,
        p.var(&format!("{prefix}.norm2.beta"))?,
        cfg.norm_groups,
    )?;
    h = g.silu(h);
    h = g.conv2d(
        h,
        p.var(&format!("{prefix}.conv2.weight"))?,
        p.var(&format!("{prefix}.conv2.bias"))?,
        1,
        1,
    )?;
    let skip = if p.contains(&format!("{prefix}.skip.weight")) {
        g.conv2d(
            x,
            p.var(&format!("{prefix}.skip.weight"))?,
            p.var(&format!("{prefix}.skip.bias"))?,
            1,
            0,
        )?
    } else {
        x
    };
    g.add(skip, h)
}

/// Multi-head attention: q_tokens [N, Lq, C] against kv_tokens [N, Lkv, D].
fn mha<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    q_tokens: Var,
    kv_tokens: Var,
    heads: usize,
) -> Result<Var> {
    let qd = g.value(q_tokens).dims().to_vec();
    let (n, lq, c) = (qd[0], qd[1], qd[2]);
    let lkv = g.value(kv_tokens).dims()[1];
    let dh = c / heads;

    let q = g.linear(q_tokens, p.var(&format!("{prefix}.q.weight"))?, p.var(&format!("{prefix}.q.bias"))?)?;
    let k = g.linear(kv_tokens, p.var(&format!("{prefix}.k.weight"))?, p.var(&format!("{prefix}.k.bias"))?)?;
    let v = g.linear(kv_tokens, p.var(&format!("{prefix}.v.weight"))?, p.var(&format!("{prefix}.v.bias"))?)?;

    let split = |g: &mut Graph<T>, t: Var, l: usize| -> Result<Var> {
        let t = g.reshape(t, &[n, l, heads, dh])?;
        let t = g.permute_0213(t)?; // [n, heads, l, dh]
        g.reshape(t, &[n * heads, l, dh])
    };
    let qh = split(g, q, lq)?;
    let kh = split(g, k, lkv)?;
    let vh = split(g, v, lkv)?;

    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, (dh as f64).sqrt().recip());
    let probs = g.softmax_last(scores);
    let mixed = g.bmm(probs, vh, false)?;
    let mixed = g.reshape(mixed, &[n, heads, lq, dh])?;
    let mixed = g.permute_0213(mixed)?;
    let mixed = g.reshape(mixed, &[n, lq, c])?;
    g.linear(mixed, p.var(&format!("{prefix}.out.weight"))?, p.var(&format!("{prefix}.out.bias"))?)
}

/// Cross-frame self-attention: queries from frame i, keys/values from the
/// concatenation of frame 1 and frame i-1 (frame 1 attends to itself only).
/// Pure attention over the given tokens — no pre-norm or residual.
pub fn cross_frame_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    tokens: Var,
    frames: usize,
    mode: CrossFrameKv,
    heads: usize,
) -> Result<Var> {
    let d = g.value(tokens).dims().to_vec();
    let (n, l, c) = (d[0], d[1], d[2]);
    if frames == 0 || n % frames != 0 {
        return Err(PipelineError::Shape(format!(
            "cross_frame_attention: {} rows not divisible by {} frames",
            n, frames
        )));
    }
    let videos = n / frames;
    let frame_rows = |f: usize| -> Vec<usize> { (0..videos).map(|b| b * frames + f).collect() };

    let mut outputs = Vec::with_capacity(frames);
    for f in 0..frames {
        let q = g.select_rows(tokens, frame_rows(f))?;
        let kv = match mode {
            CrossFrameKv::FirstPrev => {
                if f == 0 {
                    q
                } else {
                    let first = g.select_rows(tokens, frame_rows(0))?;
                    let prev = g.select_rows(tokens, frame_rows(f - 1))?;
                    g.concat(first, prev, 1)?
                }
            }
            CrossFrameKv::First => g.select_rows(tokens, frame_rows(0))?,
            CrossFrameKv::Prev => g.select_rows(tokens, frame_rows(f.saturating_sub(1)))?,
        };
        outputs.push(mha(g, p, prefix, q, kv, heads)?);
    }
    // reassemble from frame-major back to video-major row order
    let mut stacked = outputs[0];
    for &o in &outputs[1..] {
        stacked = g.concat(stacked, o, 0)?;
    }
    let mut order = Vec::with_capacity(n);
    for b in 0..videos {
        for f in 0..frames {
            order.push(f * videos + b);
        }
    }
    let out = g.select_rows(stacked, order)?;
    g.reshape(out, &[n, l, c])
}

/// Temporal self-attention across the frame axis, independently at each
/// spatial location, with pre-norm and residual add. The output projection
/// is zero at init, making the whole op the identity.
pub fn temporal_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    tokens: Var,
    frames: usize,
    heads: usize,
) -> Result<Var> {
    let d = g.value(tokens).dims().to_vec();
    let (n, l, c) = (d[0], d[1], d[2]);
    if frames == 0 || n % frames != 0 {
        return Err(PipelineError::Shape(format!(
            "temporal_self_attention: {} rows not divisible by {} frames",
            n, frames
        )));
    }
    let videos = n / frames;
    let normed = g.layer_norm(
        tokens,
        p.var(&format!("{prefix}.ln_temp.gamma"))?,
        p.var(&format!("{prefix}.ln_temp.beta"))?,
    )?;
    let t = g.reshape(normed, &[videos, frames, l, c])?;
    let t = g.permute_0213(t)?; // [videos, l, frames, c]
    let t = g.reshape(t, &[videos * l, frames, c])?;
    let a = mha(g, p, &format!("{prefix}.temp"), t, t, heads)?;
    let a = g.reshape(a, &[videos, l, frames, c])?;
    let a = g.permute_0213(a)?;
    let a = g.reshape(a, &[n, l, c])?;
    g.add(tokens, a)
}

fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    prefix: &str,
    x: Var,
    text: Var,
    video: Option<usize>,
) -> Result<Var> {
    let d = g.value(x).dims().to_vec();
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    let mut tokens = g.reshape(x, &[n, h * w, c])?;

    // spatial self-attention
    let normed = g.layer_norm(
        tokens,
        p.var(&format!("{prefix}.ln_self.gamma"))?,
        p.var(&format!("{prefix}.ln_self.beta"))?,
    )?;
    let sa = mha(g, p, &format!("{prefix}.self"), normed, normed, cfg.heads)?;
    tokens = g.add(tokens, sa)?;

    // cross-frame self-attention (video form only)
    if let Some(frames) = video {
        let normed = g.layer_norm(
            tokens,
            p.var(&format!("{prefix}.ln_cf.gamma"))?,
            p.var(&format!("{prefix}.ln_cf.beta"))?,
        )?;
        let cf = cross_frame_attention(
            g,
            p,
            &format!("{prefix}.cf"),
            normed,
            frames,
            cfg.cross_frame_kv,
            cfg.heads,
        )?;
        tokens = g.add(tokens, cf)?;
    }

    // text cross-attention
    let normed = g.layer_norm(
        tokens,
        p.var(&format!("{prefix}.ln_cross.gamma"))?,
        p.var(&format!("{prefix}.ln_cross.beta"))?,
    )?;
    let ca = mha(g, p, &format!("{prefix}.cross"), normed, text, cfg.heads)?;
    tokens = g.add(tokens, ca)?;

    // feed-forward
    let normed = g.layer_norm(
        tokens,
        p.var(&format!("{prefix}.ln_ffn.gamma"))?,
        p.var(&format!("{prefix}.ln_ffn.beta"))?,
    )?;
    let f = g.linear(normed, p.var(&format!("{prefix}.ffn.fc1.weight"))?, p.var(&format!("{prefix}.ffn.fc1.bias"))?)?;
    let f = g.silu(f);
    let f = g.linear(f, p.var(&format!("{prefix}.ffn.fc2.weight"))?, p.var(&format!("{prefix}.ffn.fc2.bias"))?)?;
    tokens = g.add(tokens, f)?;

    // temporal self-attention (video form only; includes its own residual)
    if let Some(frames) = video {
        tokens = temporal_self_attention(g, p, prefix, tokens, frames, cfg.heads)?;
    }

    g.reshape(tokens, &[n, h, w, c])
}

/// Pose encoder output: one residual per level plus the graph vars.
pub struct PoseResidualVars {
    pub levels_vars: Vec<Var>,
}

/// Runs the pose encoder: a stack of stride-2 convolutions (temporal extent
/// 1, i.e. applied per frame) with a zero-initialized 1x1 projection at
/// each level tap.
pub fn pose_encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    maps: &Tensor<T>,
) -> Result<PoseResidualVars> {
    let d = maps.dims().to_vec();
    if d.len() != 4 || d[1] != cfg.image_size || d[2] != cfg.image_size || d[3] != pose_control::POSE_CHANNELS
    {
        return Err(PipelineError::Shape(format!(
            "pose_encode: maps {:?}, expected [N, {}, {}, {}]",
            d,
            cfg.image_size,
            cfg.image_size,
            pose_control::POSE_CHANNELS
        )));
    }
    let n_convs = cfg.pose_convs();
    let n_pre = n_convs + 1 - cfg.levels();
    let mut x = g.leaf(maps.clone(), false);
    let mut levels_vars = Vec::with_capacity(cfg.levels());
    for i in 0..n_convs {
        x = g.conv2d(
            x,
            p.var(&format!("pose.conv{i}.weight"))?,
            p.var(&format!("pose.conv{i}.bias"))?,
            2,
            1,
        )?;
        x = g.silu(x);
        if i + 1 >= n_pre {
            let level = i + 1 - n_pre;
            let r = g.conv2d(
                x,
                p.var(&format!("pose.proj{level}.weight"))?,
                p.var(&format!("pose.proj{level}.bias"))?,
                1,
                0,
            )?;
            levels_vars.push(r);
        }
    }
    Ok(PoseResidualVars { levels_vars })
}

#[cfg(test)]
pub(crate) fn toy_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        channel_mults: vec![1],
        heads: 2,
        text_dim: 8,
        time_dim: 16,
        frames: 4,
        latent_channels: 3,
        latent_size: 2,
        image_size: 8,
        norm_groups: 4,
        pose_hidden: vec![4, 6],
        cross_frame_kv: CrossFrameKv::FirstPrev,
        inject: InjectMode::AllEncoder,
        pose_mode: PoseMode::Residual,
    }
}
