//! The segmentation model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{self, EncodeOutput, EncoderConfig, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{self, Prediction};
use crate::hra::{self, AssocLayout, AssociationMap, ConvModuleVars};
use crate::mca::{self, GcaMap};
use crate::metrics::LabelMap;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Associations mix class-attention region logits.
    Full,
    /// Class-attention region logits upsampled directly.
    McaOnly,
    /// Associations mix linear per-patch logits.
    HraOnly,
    /// Linear per-patch classifier, upsampled.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::McaOnly, Variant::HraOnly, Variant::Baseline];

    pub fn uses_hra(self) -> bool {
        matches!(self, Variant::Full | Variant::HraOnly)
    }

    pub fn uses_mca(self) -> bool {
        matches!(self, Variant::Full | Variant::McaOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::McaOnly => "mca-only",
            Variant::HraOnly => "hra-only",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model variant {s:?}")))
    }
}

/// Default class-attention logit scale, in units of the patch count.
pub const DEFAULT_LOGIT_SCALE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
    /// Affinity refinement rounds on the class-attention map.
    pub refine_steps: usize,
    /// Class-attention region logits are multiplied by
    /// `logit_scale · E` before fusion.
    pub logit_scale: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, variant: Variant) -> Self {
        Self { encoder, variant, refine_steps: 1, logit_scale: DEFAULT_LOGIT_SCALE }
    }

    pub fn tiny() -> Self {
        Self::new(EncoderConfig::tiny(), Variant::Full)
    }

    pub fn class_tokens(&self) -> usize {
        if self.variant.uses_mca() {
            self.encoder.num_classes
        } else {
            0
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let n = self.encoder.grid_size();
        (n, n)
    }

    pub fn layout(&self) -> AssocLayout {
        AssocLayout::new(self.grid(), self.encoder.output_stride)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config(format!("logit scale {} must be positive", self.logit_scale)));
        }
        self.encoder.validate()
    }

    /// Parameter layout in store order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let e = &self.encoder;
        let mut specs = e.param_specs(self.class_tokens());
        if self.variant.uses_hra() {
            specs.extend(hra::param_specs(e.embed_dim, e.output_stride));
        }
        if !self.variant.uses_mca() {
            specs.extend([
                ParamSpec::new("head.linear.weight", &[e.embed_dim, e.num_classes], Init::TruncNormal),
                ParamSpec::new("head.linear.bias", &[e.num_classes], Init::Zeros),
            ]);
        }
        specs
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let e = &self.encoder;
        let mut n = e.param_count(self.class_tokens());
        if self.variant.uses_hra() {
            n += hra::param_count(e.embed_dim, e.output_stride);
        }
        if !self.variant.uses_mca() {
            n += e.embed_dim * e.num_classes + e.num_classes;
        }
        n
    }
}

/// Graph handles and intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Stride-map logits, `H_m×W_m×C`.
    pub logits: Var,
    pub encoding: EncodeOutput,
    pub assoc: Option<AssociationMap>,
    pub gca: Option<GcaMap>,
    /// Per-region logits fed to fusion or upsampling, `E×C`.
    pub region_logits: Var,
    /// Parameter handles in store order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&config.param_specs(), seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.matches(&config.param_specs())?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Registers every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.tensors().map(|t| g.param(t.clone())).collect()
    }

    fn lookup<'a>(&'a self, vars: &'a [Var]) -> impl Fn(&str) -> Result<Var> + 'a {
        move |name| {
            self.params
                .position(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))
        }
    }

    /// Builds the forward graph for one `S×S×3` image.
    pub fn forward(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<ForwardOutput> {
        let params = self.bind(g);
        self.forward_with(g, image, params)
    }

    /// Forward pass over already-bound parameter handles.
    pub fn forward_with(&self, g: &mut Graph<T>, image: &Tensor<T>, params: Vec<Var>) -> Result<ForwardOutput> {
        let e = &self.config.encoder;
        let enc_vars = EncoderVars::resolve(e.depth, &self.lookup(&params))?;
        let encoding = encoder::encode_with(g, image, &enc_vars, e, self.needs_encoder_output())?;
        self.readout(g, encoding, params)
    }

    /// Whether the heads read the last layer's tokens.
    pub fn needs_encoder_output(&self) -> bool {
        let cfg = &self.config;
        !cfg.variant.uses_mca() || (cfg.variant.uses_hra() && cfg.encoder.token_head_depth == cfg.encoder.depth)
    }

    /// Proxy heads and fusion on top of a finished encoding.
    pub fn readout(&self, g: &mut Graph<T>, encoding: EncodeOutput, params: Vec<Var>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let e = &cfg.encoder;
        let lookup = self.lookup(&params);
        let grid = cfg.grid();
        let classes = e.num_classes;

        let gca = if cfg.variant.uses_mca() {
            Some(mca::gca_map(g, &encoding, e.attn_agg_layers, cfg.refine_steps)?)
        } else {
            None
        };
        let region_logits = match &gca {
            Some(gca) => g.scale(gca.region_logits, T::lit(cfg.logit_scale * encoding.num_patches as f64)),
            None => {
                let normed = encoding.normed.ok_or_else(|| Error::config("linear readout needs the final encoder norm"))?;
                let patches = g.slice_rows(normed, encoding.class_tokens, encoding.num_patches)?;
                g.linear(patches, lookup("head.linear.weight")?, lookup("head.linear.bias")?)?
            }
        };

        let assoc = if cfg.variant.uses_hra() {
            let conv = ConvModuleVars::resolve(&lookup)?;
            let tokens = hra::token_head(g, &encoding, e.token_head_depth, grid)?;
            let logits = hra::conv_module(g, tokens, &conv, e.output_stride)?;
            Some(hra::normalize_associations(g, logits, cfg.layout())?)
        } else {
            None
        };

        drop(lookup);
        let logits = match &assoc {
            Some(assoc) => head::fuse(g, assoc, region_logits)?,
            None => g.reshape(region_logits, &[grid.0, grid.1, classes])?,
        };
        Ok(ForwardOutput { logits, encoding, assoc, gca, region_logits, params })
    }

    /// Segmentation loss of one image against its labels.
    pub fn loss(&self, g: &mut Graph<T>, image: &Tensor<T>, labels: &LabelMap) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, image)?;
        let loss = head::seg_loss(g, out.logits, labels)?;
        Ok((loss, out))
    }

    /// Loss value and gradients for every parameter, in store order.
    pub fn loss_and_grads(&self, image: &Tensor<T>, labels: &LabelMap) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let (loss, out) = self.loss(&mut g, image, labels)?;
        let mut grads = g.backward(loss)?;
        let grads = out
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((g.value(loss).item(), grads))
    }

    /// Loss value only.
    pub fn loss_value(&self, image: &Tensor<T>, labels: &LabelMap) -> Result<T> {
        let mut g = Graph::new();
        let (loss, _) = self.loss(&mut g, image, labels)?;
        Ok(g.value(loss).item())
    }

    /// Full-resolution class probabilities for one input-sized image.
    pub fn predict_probs(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, _) = image.dims3()?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, image)?;
        Ok(head::upsample_and_classify(g.value(out.logits), h, w)?.probs)
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        Prediction::from_probs(self.predict_probs(image)?)
    }

    /// Tiled, multi-scale inference on an arbitrary-size image.
    pub fn infer(&self, image: &Tensor<T>, opts: &InferOptions) -> Result<Prediction<T>> {
        let window = opts.window.unwrap_or(self.config.encoder.image_size);
        if window != self.config.encoder.image_size {
            return Err(Error::config(format!(
                "window {window} differs from the model input size {}",
                self.config.encoder.image_size
            )));
        }
        let stride = opts.stride.unwrap_or(window / 2).max(1);
        let infer = |tile: &Tensor<T>| self.predict_probs(tile);
        head::multiscale_infer(&infer, image, &opts.scales, opts.flip, window, stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Defaults to the model input size.
    pub window: Option<usize>,
    /// Defaults to half the window.
    pub stride: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { scales: vec![1.0], flip: false, window: None, stride: None }
    }
}
