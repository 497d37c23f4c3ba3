//! The windowed encoder: strided conv pyramid, frequency attention, parallel
//! temporal/spectral streams, fusion, and a window-local transformer, with a
//! supervised classification head and a self-supervised projection head.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{apply_bn_updates, BnUpdate, Graph};
use crate::nn::layers::{BatchNorm1d, Builder, Conv1d, LayerNorm, Linear, TransformerLayer};
use crate::nn::ops::conv::ConvGeometry;
use crate::nn::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;
use crate::window::{self, StitchMode, StitchPlan, StitchedPosteriors, WindowConfig, CONV_PYRAMID};

pub use checkpoint::Checkpoint;

pub const CLASSIFIER_PREFIX: &str = "classifier.";
pub const PROJECTION_PREFIX: &str = "projection.";
pub const SSL_PREFIX: &str = "ssl.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel count `n`; the pyramid widens to `n, 2n, 4n, 8n`.
    pub base_channels: usize,
    pub model_dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub transformer_dropout: f64,
    pub conv_dropout: f64,
    /// Phoneme classes, excluding blank.
    pub num_classes: usize,
    pub classifier_hidden: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub projection_dropout: f64,
    /// Groups of the last pyramid conv.
    pub pyramid_groups: usize,
    /// Groups of the temporal and spectral stream convs.
    pub stream_groups: usize,
    /// Groups of the 1x1 fusion conv.
    pub fusion_groups: usize,
    /// Bottleneck reduction of the frequency attention.
    pub attention_reduction: usize,
    pub window: WindowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 256,
            model_dim: 512,
            transformer_layers: 4,
            heads: 8,
            ffn_hidden: 2048,
            transformer_dropout: 0.25,
            conv_dropout: 0.1,
            num_classes: 65,
            classifier_hidden: 2048,
            projection_hidden: 2048,
            projection_dim: 256,
            projection_dropout: 0.1,
            pyramid_groups: 4,
            stream_groups: 8,
            fusion_groups: 8,
            attention_reduction: 4,
            window: WindowConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            base_channels: 8,
            model_dim: 64,
            ffn_hidden: 256,
            classifier_hidden: 256,
            projection_hidden: 256,
            num_classes,
            ..Self::default()
        }
    }

    pub fn frames_per_window(&self) -> usize {
        self.window.frames_per_window()
    }

    /// Channels after the pyramid (`8n`).
    pub fn feature_channels(&self) -> usize {
        8 * self.base_channels
    }

    /// Output width of the classifier: classes plus blank.
    pub fn output_classes(&self) -> usize {
        self.num_classes + 1
    }

    pub fn blank(&self) -> usize {
        self.num_classes
    }

    pub fn pyramid(&self) -> [ConvGeometry; 4] {
        let n = self.base_channels;
        let chans = [1, n, 2 * n, 4 * n, 8 * n];
        let groups = [1, 1, 1, self.pyramid_groups];
        std::array::from_fn(|i| {
            let (kernel, stride, padding) = CONV_PYRAMID[i];
            ConvGeometry {
                in_channels: chans[i],
                out_channels: chans[i + 1],
                kernel,
                stride,
                padding,
                groups: groups[i],
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let positive = [
            ("base_channels", self.base_channels),
            ("model_dim", self.model_dim),
            ("transformer_layers", self.transformer_layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("num_classes", self.num_classes),
            ("classifier_hidden", self.classifier_hidden),
            ("projection_hidden", self.projection_hidden),
            ("projection_dim", self.projection_dim),
            ("attention_reduction", self.attention_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.feature_channels() % self.attention_reduction != 0 {
            return Err(Error::Config(format!(
                "feature channels {} not divisible by attention_reduction {}",
                self.feature_channels(),
                self.attention_reduction
            )));
        }
        for d in [self.transformer_dropout, self.conv_dropout, self.projection_dropout] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("dropout {d} outside [0, 1)")));
            }
        }
        for g in self.pyramid() {
            g.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let f = self.feature_channels();
        for (cin, cout, groups) in [
            (f, f, self.stream_groups),
            (f, 3 * f / 2, self.stream_groups),
            (3 * f / 2, f, self.stream_groups),
            (2 * f, f, self.fusion_groups),
        ] {
            if groups == 0 || cin % groups != 0 || cout % groups != 0 {
                return Err(Error::Config(format!(
                    "stream/fusion channels {cin}->{cout} not divisible by {groups} groups"
                )));
            }
        }
        if (3 * f) % 2 != 0 {
            return Err(Error::Config("spectral stream width 12n must be integral".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    norm: BatchNorm1d,
}

impl ConvBlock {
    fn new(b: &mut Builder<'_>, name: &str, geo: ConvGeometry) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(b, &format!("{name}.conv"), geo, ParamGroup::FeatureExtractor)?,
            norm: BatchNorm1d::new(b, &format!("{name}.bn"), geo.out_channels, ParamGroup::FeatureExtractor)?,
        })
    }

    /// conv -> batch norm -> GELU
    fn forward(&self, g: &mut Graph<'_>, x: Var, training: bool) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h, training)?;
        Ok(g.tape.gelu(h))
    }
}

/// Squeeze-excitation style channel gating over the frame axis.
#[derive(Clone, Debug)]
struct FrequencyAttention {
    squeeze: Linear,
    excite: Linear,
}

impl FrequencyAttention {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let pooled = g.tape.mean_last(x)?;
        let h = self.squeeze.forward(g, pooled)?;
        let h = g.tape.gelu(h);
        let h = self.excite.forward(g, h)?;
        let gate = g.tape.sigmoid(h);
        g.tape.mul_channel(x, gate)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    pyramid: Vec<ConvBlock>,
    pyramid_sites: Vec<u64>,
    attention: FrequencyAttention,
    temporal: [ConvBlock; 2],
    spectral: [ConvBlock; 2],
    fusion: ConvBlock,
    input_projection: Linear,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct ClassifierHead {
    hidden: Linear,
    output: Linear,
    site: u64,
}

#[derive(Clone, Debug)]
struct ProjectionHead {
    norm: LayerNorm,
    hidden: Linear,
    output: Linear,
    skip: Linear,
    site: u64,
}

/// Pieces only used by self-supervised pretraining.
#[derive(Clone, Debug)]
pub struct SslComponents {
    pub mask_embedding: ParamId,
    quantizer: Linear,
}

/// Per-layer output shapes of one forward pass.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

/// Model parameters plus the layer wiring that reads them.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub frozen_feature_extractor: bool,
    encoder: Encoder,
    classifier: Option<ClassifierHead>,
    projection: Option<ProjectionHead>,
    ssl: Option<SslComponents>,
    positional: Tensor,
    next_site: u64,
}

/// Fixed sinusoidal position table `[frames, dim]`.
pub fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for f in 0..frames {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = f as f64 / rate;
            data[f * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[frames, dim], data).expect("sized")
}

/// Parameter counts by component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub feature_extractor: usize,
    pub transformer: usize,
    pub classifier: usize,
    pub projection: usize,
    pub quantizer: usize,
    /// Transformer layers only (attention, feed-forward and their norms).
    pub transformer_layers: usize,
}

impl EncoderState {
    /// Build the encoder and a freshly initialized classifier head.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let encoder = build_encoder(&mut b, &config)?;
        let next_site = b.sites_used();
        let positional = positional_encoding(config.frames_per_window(), config.model_dim);
        let mut state = Self {
            config,
            store,
            frozen_feature_extractor: false,
            encoder,
            classifier: None,
            projection: None,
            ssl: None,
            positional,
            next_site,
        };
        state.attach_classifier(seed.wrapping_add(1))?;
        Ok(state)
    }

    fn builder(&mut self, seed: u64) -> Builder<'_> {
        let mut b = Builder::new(&mut self.store, seed);
        b.skip_sites(self.next_site);
        b
    }

    /// Replace any classifier head with a fresh one.
    pub fn attach_classifier(&mut self, seed: u64) -> Result<()> {
        self.store.remove_prefix(CLASSIFIER_PREFIX);
        let (d, h, c) = (self.config.model_dim, self.config.classifier_hidden, self.config.output_classes());
        let mut b = self.builder(seed);
        let head = ClassifierHead {
            hidden: Linear::new(&mut b, "classifier.hidden", d, h, true, ParamGroup::Classifier)?,
            output: Linear::new(&mut b, "classifier.output", h, c, true, ParamGroup::Classifier)?,
            site: b.site(),
        };
        self.next_site = b.sites_used();
        self.classifier = Some(head);
        Ok(())
    }

    /// Attach the projection head, quantizer input projection and mask
    /// embedding used by pretraining.
    pub fn attach_pretraining(&mut self, seed: u64) -> Result<()> {
        self.drop_pretraining_head();
        self.store.remove_prefix(SSL_PREFIX);
        let cfg = self.config.clone();
        let (d, h, p, f) = (cfg.model_dim, cfg.projection_hidden, cfg.projection_dim, cfg.feature_channels());
        let mut b = self.builder(seed);
        let head = ProjectionHead {
            norm: LayerNorm::new(&mut b, "projection.norm", d, ParamGroup::Projection)?,
            hidden: Linear::new(&mut b, "projection.hidden", d, h, true, ParamGroup::Projection)?,
            output: Linear::new(&mut b, "projection.output", h, p, true, ParamGroup::Projection)?,
            skip: Linear::new(&mut b, "projection.skip", d, p, false, ParamGroup::Projection)?,
            site: b.site(),
        };
        let mask_embedding = b.randn("ssl.mask_embedding", &[f], 0.1, ParamGroup::Transformer)?;
        let quantizer = Linear::new(&mut b, "ssl.quantizer", f, p, true, ParamGroup::Quantizer)?;
        self.next_site = b.sites_used();
        self.projection = Some(head);
        self.ssl = Some(SslComponents {
            mask_embedding,
            quantizer,
        });
        Ok(())
    }

    /// Remove the projection head; returns the number of values dropped.
    pub fn drop_pretraining_head(&mut self) -> usize {
        self.projection = None;
        self.store.remove_prefix(PROJECTION_PREFIX)
    }

    /// Remove the quantizer projection and mask embedding.
    pub fn drop_ssl_components(&mut self) -> usize {
        self.ssl = None;
        self.store.remove_prefix(SSL_PREFIX)
    }

    pub fn drop_classifier(&mut self) -> usize {
        self.classifier = None;
        self.store.remove_prefix(CLASSIFIER_PREFIX)
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn ssl(&self) -> Option<&SslComponents> {
        self.ssl.as_ref()
    }

    pub fn param_report(&self) -> ParamReport {
        let by = |g: ParamGroup| self.store.count_where(|p| p.group == g);
        ParamReport {
            total: self.store.trainable_count(),
            feature_extractor: by(ParamGroup::FeatureExtractor),
            transformer: by(ParamGroup::Transformer),
            classifier: by(ParamGroup::Classifier),
            projection: by(ParamGroup::Projection),
            quantizer: by(ParamGroup::Quantizer),
            transformer_layers: self.store.count_where(|p| p.name.starts_with("transformer.layer")),
        }
    }

    /// A graph bound to this model, with the feature extractor frozen when
    /// requested.
    pub fn graph(&self, step_seed: u64) -> Graph<'_> {
        let g = Graph::new(&self.store, step_seed);
        if self.frozen_feature_extractor {
            g.with_frozen([ParamGroup::FeatureExtractor])
        } else {
            g
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        apply_bn_updates(&mut self.store, updates);
    }

    fn check_windows(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let w = self.config.window.window_samples;
        match shape {
            [n, 1, len] | [n, len] if *len == w => Ok((*n, w)),
            s => Err(Error::shape(
                "encode_window",
                format!("windows {s:?}, expected [N, 1, {w}]"),
            )),
        }
    }

    /// Conv features `[N, 8n, F_w]` of windows `[N, 1, W]`. A frozen
    /// feature extractor always runs in eval mode.
    pub fn features_on(&self, g: &mut Graph<'_>, windows: Var, training: bool, trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let (n, w) = self.check_windows(g.tape.shape(windows))?;
        let training = training && !self.frozen_feature_extractor;
        let enc = &self.encoder;
        let mut local = ShapeTrace::new();
        let mut h = g.tape.reshape(windows, &[n, 1, w])?;
        for (block, &site) in enc.pyramid.iter().zip(&enc.pyramid_sites) {
            h = block.forward(g, h, training)?;
            h = g.dropout(h, self.config.conv_dropout, training, site)?;
            local.push(("pyramid", g.tape.shape(h).to_vec()));
        }
        h = enc.attention.forward(g, h)?;
        local.push(("frequency_attention", g.tape.shape(h).to_vec()));
        let mut ts = h;
        for block in &enc.temporal {
            ts = block.forward(g, ts, training)?;
            local.push(("temporal_stream", g.tape.shape(ts).to_vec()));
        }
        let mut ss = h;
        for block in &enc.spectral {
            ss = block.forward(g, ss, training)?;
            local.push(("spectral_stream", g.tape.shape(ss).to_vec()));
        }
        let fused = g.tape.concat_grouped(ts, ss, self.config.fusion_groups)?;
        let out = enc.fusion.forward(g, fused, training)?;
        local.push(("fusion", g.tape.shape(out).to_vec()));
        if let Some(t) = trace {
            t.extend(local);
        }
        Ok(out)
    }

    /// Transformer embeddings `[N, F_w, D]` from frame features `[N, F_w, 8n]`.
    pub fn transform_on(&self, g: &mut Graph<'_>, frames: Var, training: bool) -> Result<Var> {
        let [n, f, _] = g.tape.shape(frames)[..] else {
            return Err(Error::shape("transform", "expected [N, F, C] frame features"));
        };
        let enc = &self.encoder;
        let mut h = enc.input_projection.forward(g, frames)?;
        let pos_data = self.positional.data().repeat(n);
        let pos = g.tape.constant(Tensor::new(&[n, f, self.config.model_dim], pos_data)?);
        h = g.tape.add(h, pos)?;
        for layer in &enc.layers {
            h = layer.forward(g, h, training)?;
        }
        enc.final_norm.forward(g, h)
    }

    /// Windows `[N, 1, W]` to embeddings `[N, F_w, D]`.
    pub fn encode_on(&self, g: &mut Graph<'_>, windows: Var, training: bool) -> Result<Var> {
        let feats = self.features_on(g, windows, training, None)?;
        let frames = g.tape.transpose12(feats)?;
        self.transform_on(g, frames, training)
    }

    pub fn classify_on(&self, g: &mut Graph<'_>, emb: Var, training: bool) -> Result<Var> {
        let head = self.classifier.as_ref().ok_or(Error::Missing("classifier head"))?;
        let h = head.hidden.forward(g, emb)?;
        let h = g.tape.gelu(h);
        let h = g.dropout(h, self.config.transformer_dropout, training, head.site)?;
        head.output.forward(g, h)
    }

    pub fn project_on(&self, g: &mut Graph<'_>, emb: Var, training: bool) -> Result<Var> {
        let head = self.projection.as_ref().ok_or(Error::Missing("projection head"))?;
        let h = head.norm.forward(g, emb)?;
        let h = head.hidden.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = g.dropout(h, self.config.projection_dropout, training, head.site)?;
        let h = head.output.forward(g, h)?;
        let skip = head.skip.forward(g, emb)?;
        g.tape.add(h, skip)
    }

    /// Quantizer input projection of frame features `[M, 8n]`.
    pub fn quantizer_on(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let ssl = self.ssl.as_ref().ok_or(Error::Missing("quantizer"))?;
        ssl.quantizer.forward(g, frames)
    }

    fn windows_tensor(&self, windows: &Tensor) -> Result<Tensor> {
        let (n, w) = self.check_windows(windows.shape())?;
        windows.clone().reshape(&[n, 1, w])
    }

    /// Embeddings `[N, F_w, D]`. Batch-norm statistics are not updated.
    pub fn encode_window(&self, windows: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        let mut g = self.graph(seed);
        let x = g.tape.constant(self.windows_tensor(windows)?);
        let y = self.encode_on(&mut g, x, training)?;
        Ok(g.tape.value(y).clone())
    }

    /// Per-layer output shapes for windows `[N, 1, W]` (eval mode).
    pub fn trace_shapes(&self, windows: &Tensor) -> Result<ShapeTrace> {
        let mut g = self.graph(0);
        let x = g.tape.constant(self.windows_tensor(windows)?);
        let mut trace = ShapeTrace::new();
        let feats = self.features_on(&mut g, x, false, Some(&mut trace))?;
        let frames = g.tape.transpose12(feats)?;
        let emb = self.transform_on(&mut g, frames, false)?;
        trace.push(("transformer", g.tape.shape(emb).to_vec()));
        if self.classifier.is_some() {
            let logits = self.classify_on(&mut g, emb, false)?;
            trace.push(("classifier", g.tape.shape(logits).to_vec()));
        }
        if self.projection.is_some() {
            let p = self.project_on(&mut g, emb, false)?;
            trace.push(("projection", g.tape.shape(p).to_vec()));
        }
        Ok(trace)
    }

    /// Classifier logits `[N, F_w, C+1]` (eval mode).
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(0);
        let x = g.tape.constant(embeddings.clone());
        let y = self.classify_on(&mut g, x, false)?;
        Ok(g.tape.value(y).clone())
    }

    /// Projection-head features `[N, F_w, 256]` (eval mode).
    pub fn project(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(0);
        let x = g.tape.constant(embeddings.clone());
        let y = self.project_on(&mut g, x, false)?;
        Ok(g.tape.value(y).clone())
    }

    /// Per-window class probabilities `[N, F_w, C+1]` (eval mode).
    pub fn window_posteriors(&self, windows: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(0);
        let x = g.tape.constant(self.windows_tensor(windows)?);
        let emb = self.encode_on(&mut g, x, false)?;
        let logits = self.classify_on(&mut g, emb, false)?;
        let p = g.tape.softmax(logits);
        Ok(g.tape.value(p).clone())
    }

    /// Slice, encode, classify, softmax and stitch one clip (eval mode).
    pub fn forward_clip(&self, audio: &[f64]) -> Result<StitchedPosteriors> {
        let cfg = &self.config.window;
        let batch = window::slice_clip(audio, cfg)?;
        let probs = self.window_posteriors(&batch.windows)?;
        let plan = StitchPlan::new(&batch.offsets, batch.source_length, cfg)?;
        window::stitch_with_plan(&probs, 0, &plan, cfg, StitchMode::Probabilities)
    }
}

fn build_encoder(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Encoder> {
    let fe = ParamGroup::FeatureExtractor;
    let f = cfg.feature_channels();
    let geos = cfg.pyramid();
    let mut pyramid = Vec::new();
    let mut pyramid_sites = Vec::new();
    for (i, geo) in geos.iter().enumerate() {
        pyramid.push(ConvBlock::new(b, &format!("features.pyramid{}", i + 1), *geo)?);
        pyramid_sites.push(b.site());
    }
    let reduced = f / cfg.attention_reduction;
    let attention = FrequencyAttention {
        squeeze: Linear::new(b, "features.attention.squeeze", f, reduced, true, fe)?,
        excite: Linear::new(b, "features.attention.excite", reduced, f, true, fe)?,
    };
    let sg = cfg.stream_groups;
    let conv = |cin, cout, kernel, padding, groups| ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride: 1,
        padding,
        groups,
    };
    let temporal = [
        ConvBlock::new(b, "features.temporal1", conv(f, f, 7, 3, sg))?,
        ConvBlock::new(b, "features.temporal2", conv(f, f, 3, 1, sg))?,
    ];
    let wide = 3 * f / 2;
    let spectral = [
        ConvBlock::new(b, "features.spectral1", conv(f, wide, 1, 0, sg))?,
        ConvBlock::new(b, "features.spectral2", conv(wide, f, 1, 0, sg))?,
    ];
    let fusion = ConvBlock::new(b, "features.fusion", conv(2 * f, f, 1, 0, cfg.fusion_groups))?;
    let tr = ParamGroup::Transformer;
    let input_projection = Linear::new(b, "transformer.input", f, cfg.model_dim, true, tr)?;
    let layers = (0..cfg.transformer_layers)
        .map(|i| {
            TransformerLayer::new(
                b,
                &format!("transformer.layer{i}"),
                cfg.model_dim,
                cfg.heads,
                cfg.ffn_hidden,
                cfg.transformer_dropout,
                tr,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let final_norm = LayerNorm::new(b, "transformer.final_norm", cfg.model_dim, tr)?;
    Ok(Encoder {
        pyramid,
        pyramid_sites,
        attention,
        temporal,
        spectral,
        fusion,
        input_projection,
        layers,
        final_norm,
    })
}

/// Names of feature-extractor parameters and buffers.
pub fn feature_extractor_names(store: &ParamStore) -> Vec<String> {
    store
        .sorted()
        .into_iter()
        .filter(|(_, p)| p.group == ParamGroup::FeatureExtractor)
        .map(|(_, p)| p.name.clone())
        .collect()
}

/// Snapshot of a parameter group's values (trainable and buffers).
pub fn group_snapshot(store: &ParamStore, group: ParamGroup) -> Vec<(String, Vec<f64>)> {
    store
        .sorted()
        .into_iter()
        .filter(|(_, p)| p.group == group)
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

/// Every entry of the store is finite.
pub fn all_finite(store: &ParamStore) -> bool {
    store.iter().all(|(_, p)| p.value.is_finite())
}

/// Number of buffer (non-trainable) values.
pub fn buffer_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Buffer)
        .map(|(_, p)| p.value.len())
        .sum()
}
