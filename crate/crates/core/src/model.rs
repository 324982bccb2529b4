//! Backbone adapter and the hotspot classifier built on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abm::{abm_backward, abm_forward_cached, AbmCache, AbmConfig, AbmWeights};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, relu, softmax,
    Conv2d, FeatureTensor, Linear, Parameterized,
};

/// Scene class. Index 0 is the positive (hotspot) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Hotspot,
    NonHotspot,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Hotspot => 0,
            Label::NonHotspot => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Hotspot
        } else {
            Label::NonHotspot
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hotspot => "hotspot",
            Label::NonHotspot => "non_hotspot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub p_hotspot: f64,
    pub p_non_hotspot: f64,
}

impl ClassScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        let p = softmax(logits);
        Self {
            p_hotspot: p[0],
            p_non_hotspot: p[1],
        }
    }

    pub fn predicted(&self) -> Label {
        if self.p_hotspot >= self.p_non_hotspot {
            Label::Hotspot
        } else {
            Label::NonHotspot
        }
    }

    pub fn confidence(&self, label: Label) -> f64 {
        match label {
            Label::Hotspot => self.p_hotspot,
            Label::NonHotspot => self.p_non_hotspot,
        }
    }
}

/// Per-channel input normalisation applied to [0, 1] intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

/// Contract every feature extractor provides to the classifier and the CAM
/// explainers. Pretrained networks attach by implementing this trait.
pub trait Backbone: Parameterized + Clone + Send + Sync {
    type Cache: Clone + Send;

    fn name(&self) -> &str;
    fn out_channels(&self) -> usize;
    /// Name of the final convolutional layer (the CAM default target).
    fn last_conv_layer(&self) -> String;
    fn normalization(&self) -> Normalization;
    /// Final convolutional feature map.
    fn forward(&self, x: &FeatureTensor) -> Result<(FeatureTensor, Self::Cache)>;
    /// Backpropagate into parameter gradients; returns the input gradient when
    /// requested.
    fn backward(
        &self,
        cache: &Self::Cache,
        grad_out: &FeatureTensor,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<FeatureTensor>;
    /// Serializable description used to rebuild the architecture.
    fn describe(&self) -> serde_json::Value;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyBackboneConfig {
    /// Output channels of each conv block; every block but the last is
    /// followed by 2×2 max pooling.
    pub widths: Vec<usize>,
}

impl Default for TinyBackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
        }
    }
}

/// Small conv → ReLU (→ max-pool) stack for desk-scale work.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyBackbone {
    pub config: TinyBackboneConfig,
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct TinyBackboneCache {
    inputs: Vec<FeatureTensor>,
    pre: Vec<FeatureTensor>,
    pool_index: Vec<Option<Vec<usize>>>,
}

impl TinyBackbone {
    pub fn new<R: Rng + ?Sized>(config: TinyBackboneConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("backbone needs at least one non-empty block".into()));
        }
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &config.widths {
            convs.push(Conv2d::init(c_in, w, 3, rng));
            c_in = w;
        }
        Ok(Self { config, convs })
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        1 << (self.convs.len() - 1)
    }
}

impl Parameterized for TinyBackbone {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{p}.block{}.conv", i + 1), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{p}.block{}.conv", i + 1), f);
        }
    }
}

impl Backbone for TinyBackbone {
    type Cache = TinyBackboneCache;

    fn name(&self) -> &str {
        "tiny"
    }

    fn out_channels(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    fn last_conv_layer(&self) -> String {
        format!("backbone.block{}.conv", self.convs.len())
    }

    fn normalization(&self) -> Normalization {
        Normalization::IMAGENET
    }

    fn forward(&self, x: &FeatureTensor) -> Result<(FeatureTensor, TinyBackboneCache)> {
        let last = self.convs.len() - 1;
        let mut cache = TinyBackboneCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            pool_index: Vec::new(),
        };
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(&h)?;
            let act = pre.map(relu);
            cache.inputs.push(std::mem::replace(&mut h, act));
            cache.pre.push(pre);
            if i < last {
                let (pooled, idx) = max_pool2(&h);
                h = pooled;
                cache.pool_index.push(Some(idx));
            } else {
                cache.pool_index.push(None);
            }
        }
        Ok((h, cache))
    }

    fn backward(
        &self,
        cache: &TinyBackboneCache,
        grad_out: &FeatureTensor,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<FeatureTensor> {
        let mut g = grad_out.clone();
        for i in (0..self.convs.len()).rev() {
            let pre = &cache.pre[i];
            if let Some(idx) = &cache.pool_index[i] {
                g = max_pool2_backward((pre.channels, pre.height, pre.width), idx, &g);
            }
            g.data
                .iter_mut()
                .zip(&pre.data)
                .for_each(|(gv, p)| {
                    if *p <= 0.0 {
                        *gv = 0.0
                    }
                });
            let need = i > 0 || need_input_grad;
            match self.convs[i].backward(&cache.inputs[i], &g, &mut grad.convs[i], need) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        Some(g)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "name": "tiny", "widths": self.config.widths })
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone, ABM and classifier head are all trained.
    #[default]
    Full,
    /// Only the final fully connected layer is trained.
    FcOnly,
}

impl TrainMode {
    pub fn is_trainable(self, param_name: &str) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::FcOnly => param_name.starts_with("fc."),
        }
    }
}

/// Layer whose activations the CAM explainers read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CamLayer {
    /// Last convolutional layer of the backbone (pre-ABM).
    #[default]
    BackboneLastConv,
    /// Output of the attention module.
    AbmOutput,
}

/// Backbone → ABM → global average pooling → FC(2) → softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<B: Backbone> {
    pub backbone: B,
    pub abm_config: AbmConfig,
    pub abm: AbmWeights,
    pub fc: Linear,
    /// Side length of the square network input.
    pub input_size: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<B: Backbone> {
    backbone: B::Cache,
    pub features: FeatureTensor,
    abm: AbmCache,
    pub abm_out: FeatureTensor,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl<B: Backbone> Parameterized for Classifier<B> {
    fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.backbone.visit("backbone", f);
        self.abm.visit("abm", f);
        self.fc.visit("fc", f);
    }

    fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut("backbone", f);
        self.abm.visit_mut("abm", f);
        self.fc.visit_mut("fc", f);
    }
}

impl<B: Backbone> Classifier<B> {
    pub fn new<R: Rng + ?Sized>(
        backbone: B,
        abm_config: AbmConfig,
        input_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = backbone.out_channels();
        let abm = AbmWeights::init(c, &abm_config, rng)?;
        let fc = Linear::init(c, 2, rng);
        Ok(Self {
            backbone,
            abm_config,
            abm,
            fc,
            input_size,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    pub fn check_input(&self, x: &FeatureTensor) -> Result<()> {
        if x.channels != 3 || x.height != self.input_size || x.width != self.input_size {
            return Err(Error::shape(format!(
                "classifier expects 3x{s}x{s} input, got {}x{}x{}",
                x.channels,
                x.height,
                x.width,
                s = self.input_size
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &FeatureTensor) -> Result<ForwardCache<B>> {
        self.check_input(x)?;
        let (features, bcache) = self.backbone.forward(x)?;
        let (abm_out, acache) = abm_forward_cached(&features, self.abm_config.variant, &self.abm)?;
        let pooled = global_avg_pool(&abm_out);
        let logits = self.fc.forward(&pooled);
        Ok(ForwardCache {
            backbone: bcache,
            features,
            abm: acache,
            abm_out,
            pooled,
            logits,
        })
    }

    pub fn logits(&self, x: &FeatureTensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    pub fn classify(&self, x: &FeatureTensor) -> Result<ClassScores> {
        Ok(ClassScores::from_logits(&self.logits(x)?))
    }

    /// Backbone feature map only.
    pub fn features(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        self.check_input(x)?;
        Ok(self.backbone.forward(x)?.0)
    }

    /// Activations of `layer` for input `x`.
    pub fn layer_activations(&self, x: &FeatureTensor, layer: CamLayer) -> Result<FeatureTensor> {
        let cache = self.forward_cached(x)?;
        Ok(match layer {
            CamLayer::BackboneLastConv => cache.features,
            CamLayer::AbmOutput => cache.abm_out,
        })
    }

    /// Logits computed from activations injected at `layer`.
    pub fn logits_from_layer(&self, layer: CamLayer, activations: &FeatureTensor) -> Result<Vec<f64>> {
        let abm_out = match layer {
            CamLayer::BackboneLastConv => {
                abm_forward_cached(activations, self.abm_config.variant, &self.abm)?.0
            }
            CamLayer::AbmOutput => activations.clone(),
        };
        Ok(self.fc.forward(&global_avg_pool(&abm_out)))
    }

    /// Gradient of `logits[class]` with respect to the activations at `layer`.
    pub fn layer_gradient(
        &self,
        cache: &ForwardCache<B>,
        layer: CamLayer,
        class: Label,
    ) -> FeatureTensor {
        let mut g_logits = vec![0.0; 2];
        g_logits[class.index()] = 1.0;
        let mut scratch = self.zeros_like();
        let g_pooled = self.fc.backward(&cache.pooled, &g_logits, &mut scratch.fc);
        let shape = (cache.abm_out.channels, cache.abm_out.height, cache.abm_out.width);
        let g_abm_out = global_avg_pool_backward(shape, &g_pooled);
        match layer {
            CamLayer::AbmOutput => g_abm_out,
            CamLayer::BackboneLastConv => {
                abm_backward(&self.abm, &cache.abm, &g_abm_out, &mut scratch.abm)
            }
        }
    }

    /// Backpropagate `grad_logits` into `grad`, skipping groups `mode` keeps
    /// frozen.
    pub fn backward(
        &self,
        cache: &ForwardCache<B>,
        grad_logits: &[f64],
        grad: &mut Self,
        mode: TrainMode,
    ) {
        let g_pooled = self.fc.backward(&cache.pooled, grad_logits, &mut grad.fc);
        if mode == TrainMode::FcOnly {
            return;
        }
        let shape = (cache.abm_out.channels, cache.abm_out.height, cache.abm_out.width);
        let g_abm_out = global_avg_pool_backward(shape, &g_pooled);
        let g_features = abm_backward(&self.abm, &cache.abm, &g_abm_out, &mut grad.abm);
        self.backbone
            .backward(&cache.backbone, &g_features, &mut grad.backbone, false);
    }

    pub fn named_params(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.to_vec())));
        out
    }
}
