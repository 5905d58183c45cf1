//! ViT encoder with one learnable token per class.
//!
//! Token rows `0..C` hold the class tokens and rows `C..C+E` the patch
//! tokens in raster order. Each layer is pre-norm:
//! `a = MSA(LN(T)) + T`, `T' = MLP(LN(a)) + a`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Side of the square input image in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of transformer layers `L`.
    pub depth: usize,
    /// Token size `D`.
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    /// Layers shared with the region-association head (`M`).
    pub token_head_depth: usize,
    /// Trailing layers whose attention is aggregated (`P`).
    pub attn_agg_layers: usize,
    /// Pixels per token cell in the association map, `(h, w)`.
    pub output_stride: (usize, usize),
}

impl EncoderConfig {
    /// Desk-scale configuration used for gradient checks and tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            depth: 4,
            embed_dim: 32,
            head_dim: 16,
            num_classes: 4,
            token_head_depth: 2,
            attn_agg_layers: 2,
            output_stride: (4, 4),
        }
    }

    fn vit(depth: usize, embed_dim: usize) -> Self {
        Self {
            image_size: 512,
            patch_size: 16,
            depth,
            embed_dim,
            head_dim: 64,
            num_classes: 7,
            token_head_depth: 3,
            attn_agg_layers: 4,
            output_stride: (4, 4),
        }
    }

    pub fn vit_ti() -> Self {
        Self::vit(12, 192)
    }

    pub fn vit_s() -> Self {
        Self::vit(12, 384)
    }

    pub fn vit_b() -> Self {
        Self::vit(12, 768)
    }

    pub fn vit_l() -> Self {
        Self::vit(24, 1024)
    }

    /// Looks up a preset by its short name (`tiny`, `ti`, `s`, `b`, `l`).
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::tiny(),
            "ti" => Self::vit_ti(),
            "s" => Self::vit_s(),
            "b" => Self::vit_b(),
            "l" => Self::vit_l(),
            other => return Err(Error::config(format!("unknown model preset {other:?}"))),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.embed_dim / self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    /// Token grid side `N` (patches per row).
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `E = N²`.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.head_dim == 0 || self.embed_dim == 0 || self.embed_dim % self.head_dim != 0 {
            return fail(format!(
                "embed dim {} is not a positive multiple of head dim {}",
                self.embed_dim, self.head_dim
            ));
        }
        if self.num_classes == 0 {
            return fail("at least one class is required".into());
        }
        if self.token_head_depth < 1 || self.token_head_depth > self.depth {
            return fail(format!(
                "token head depth {} outside 1..={}",
                self.token_head_depth, self.depth
            ));
        }
        if self.attn_agg_layers < 1 || self.attn_agg_layers > self.depth {
            return fail(format!(
                "attention aggregation layers {} outside 1..={}",
                self.attn_agg_layers, self.depth
            ));
        }
        if self.output_stride.0 == 0 || self.output_stride.1 == 0 {
            return fail("output stride must be positive".into());
        }
        Ok(())
    }

    /// Parameter layout of the encoder with `class_tokens` class tokens.
    pub fn param_specs(&self, class_tokens: usize) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let n = self.num_patches() + class_tokens;
        let mut specs = vec![
            ParamSpec::new("encoder.patch_embed.weight", &[self.patch_dim(), d], Init::TruncNormal),
            ParamSpec::new("encoder.patch_embed.bias", &[d], Init::Zeros),
            ParamSpec::new("encoder.cls_tokens", &[class_tokens, d], Init::TruncNormal),
            ParamSpec::new("encoder.pos_embed", &[n, d], Init::TruncNormal),
        ];
        for l in 0..self.depth {
            let p = |s: &str| format!("encoder.layers.{l}.{s}");
            specs.extend([
                ParamSpec::new(p("ln1.gamma"), &[d], Init::Ones),
                ParamSpec::new(p("ln1.beta"), &[d], Init::Zeros),
            ]);
            for proj in ["q", "k", "v", "o"] {
                specs.push(ParamSpec::new(p(&format!("attn.{proj}.weight")), &[d, d], Init::TruncNormal));
                specs.push(ParamSpec::new(p(&format!("attn.{proj}.bias")), &[d], Init::Zeros));
            }
            specs.extend([
                ParamSpec::new(p("ln2.gamma"), &[d], Init::Ones),
                ParamSpec::new(p("ln2.beta"), &[d], Init::Zeros),
                ParamSpec::new(p("mlp.fc1.weight"), &[d, hidden], Init::TruncNormal),
                ParamSpec::new(p("mlp.fc1.bias"), &[hidden], Init::Zeros),
                ParamSpec::new(p("mlp.fc2.weight"), &[hidden, d], Init::TruncNormal),
                ParamSpec::new(p("mlp.fc2.bias"), &[d], Init::Zeros),
            ]);
        }
        specs.extend([
            ParamSpec::new("encoder.norm.gamma", &[d], Init::Ones),
            ParamSpec::new("encoder.norm.beta", &[d], Init::Zeros),
        ]);
        specs
    }

    /// Closed-form encoder parameter count.
    pub fn param_count(&self, class_tokens: usize) -> usize {
        let d = self.embed_dim;
        let embed = self.patch_dim() * d + d + class_tokens * d + (self.num_patches() + class_tokens) * d;
        let attention = 4 * (d * d + d);
        let mlp = 2 * (4 * d * d) + 4 * d + d;
        let norms = 4 * d;
        embed + self.depth * (attention + mlp + norms) + 2 * d
    }
}

/// Graph handles of one transformer layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_embed: (Var, Var),
    pub cls_tokens: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub norm: (Var, Var),
}

impl EncoderVars {
    /// Resolves handles by parameter name.
    pub fn resolve(depth: usize, lookup: &dyn Fn(&str) -> Result<Var>) -> Result<Self> {
        let pair = |prefix: &str, a: &str, b: &str| -> Result<(Var, Var)> {
            Ok((lookup(&format!("{prefix}.{a}"))?, lookup(&format!("{prefix}.{b}"))?))
        };
        let layers = (0..depth)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                Ok(LayerVars {
                    ln1: pair(&format!("{p}.ln1"), "gamma", "beta")?,
                    q: pair(&format!("{p}.attn.q"), "weight", "bias")?,
                    k: pair(&format!("{p}.attn.k"), "weight", "bias")?,
                    v: pair(&format!("{p}.attn.v"), "weight", "bias")?,
                    o: pair(&format!("{p}.attn.o"), "weight", "bias")?,
                    ln2: pair(&format!("{p}.ln2"), "gamma", "beta")?,
                    fc1: pair(&format!("{p}.mlp.fc1"), "weight", "bias")?,
                    fc2: pair(&format!("{p}.mlp.fc2"), "weight", "bias")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed: pair("encoder.patch_embed", "weight", "bias")?,
            cls_tokens: lookup("encoder.cls_tokens")?,
            pos_embed: lookup("encoder.pos_embed")?,
            layers,
            norm: pair("encoder.norm", "gamma", "beta")?,
        })
    }
}

/// Everything the two proxies read from the encoder.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// `tokens[0]` is the input sequence, `tokens[l]` the output of layer `l`.
    /// Without the full output the last layer's token sequence is absent.
    pub tokens: Vec<Var>,
    /// `attention[l][h]`: row-stochastic `(E+C)×(E+C)` map of head `h` in
    /// layer `l + 1`.
    pub attention: Vec<Vec<Var>>,
    /// Final layer norm applied to the last token sequence.
    pub normed: Option<Var>,
    pub class_tokens: usize,
    pub num_patches: usize,
}

impl EncodeOutput {
    pub fn depth(&self) -> usize {
        self.attention.len()
    }

    pub fn layer_output(&self, l: usize) -> Option<Var> {
        self.tokens.get(l).copied()
    }
}

/// Splits an `H×W×3` image into `E` rows of `patch²·3` values: patches in
/// raster order, pixels in raster order within a patch, then channel.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::config(format!(
            "image {h}×{w} is not divisible into {patch_size}-pixel patches"
        )));
    }
    let index = patch_index(h, w, c, patch_size);
    let src = image.data();
    let data = index.iter().map(|&i| src[i]).collect();
    Tensor::new([(h / patch_size) * (w / patch_size), patch_size * patch_size * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize, patch_size: usize) -> Result<Tensor<T>> {
    let (rows, cols) = patches.dims2()?;
    let c = cols / (patch_size * patch_size).max(1);
    if rows * cols != h * w * c || patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::dim(format!(
            "patches {:?} do not tile a {h}×{w} image",
            patches.shape()
        )));
    }
    let mut out = vec![T::zero(); h * w * c];
    for (&dst, &v) in patch_index(h, w, c, patch_size).iter().zip(patches.data()) {
        out[dst] = v;
    }
    Tensor::new([h, w, c], out)
}

/// Source offset in the image for every element of the patch matrix.
fn patch_index(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    let base = ((py * p + y) * w + px * p + x) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

/// `T_in`: class tokens followed by projected patches, plus position
/// embeddings for every row.
pub fn embed_tokens<T: Scalar>(g: &mut Graph<T>, patches: Var, vars: &EncoderVars) -> Result<Var> {
    let projected = g.linear(patches, vars.patch_embed.0, vars.patch_embed.1)?;
    let tokens = if g.value(vars.cls_tokens).is_empty() {
        projected
    } else {
        g.concat_rows(&[vars.cls_tokens, projected])?
    };
    g.add(tokens, vars.pos_embed)
}

/// Multi-head scaled dot-product self-attention over `x`. Returns the
/// projected output and each head's attention map.
pub fn msa<T: Scalar>(g: &mut Graph<T>, x: Var, layer: &LayerVars, head_dim: usize) -> Result<(Var, Vec<Var>)> {
    let (maps, d) = attention_maps(g, x, layer, head_dim)?;
    let v = g.linear(x, layer.v.0, layer.v.1)?;
    let mut projected = Vec::with_capacity(maps.len());
    for (h, &attn) in maps.iter().enumerate() {
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let mixed = g.matmul(attn, vh)?;
        // concat(heads) · W_o == Σ_h head_h · W_o[rows of h]
        let wo = g.slice_rows(layer.o.0, h * head_dim, head_dim)?;
        projected.push(g.matmul(mixed, wo)?);
    }
    debug_assert_eq!(projected.len() * head_dim, d);
    let out = g.scaled_sum(&projected, T::one())?;
    let out = g.add_bias(out, layer.o.1)?;
    Ok((out, maps))
}

/// Per-head softmax attention maps of `x` and the token size.
pub fn attention_maps<T: Scalar>(g: &mut Graph<T>, x: Var, layer: &LayerVars, head_dim: usize) -> Result<(Vec<Var>, usize)> {
    let (_, d) = g.value(x).dims2()?;
    if head_dim == 0 || d % head_dim != 0 {
        return Err(Error::config(format!("token size {d} not divisible by head dim {head_dim}")));
    }
    let q = g.linear(x, layer.q.0, layer.q.1)?;
    let k = g.linear(x, layer.k.0, layer.k.1)?;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut maps = Vec::with_capacity(d / head_dim);
    for h in 0..d / head_dim {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        maps.push(g.softmax(scores, 1)?);
    }
    Ok((maps, d))
}

/// One pre-norm transformer layer.
pub fn encoder_layer<T: Scalar>(g: &mut Graph<T>, t: Var, layer: &LayerVars, head_dim: usize) -> Result<(Var, Vec<Var>)> {
    let normed = g.layer_norm(t, layer.ln1.0, layer.ln1.1, 1)?;
    let (attn_out, maps) = msa(g, normed, layer, head_dim)?;
    let a = g.add(attn_out, t)?;
    let normed = g.layer_norm(a, layer.ln2.0, layer.ln2.1, 1)?;
    let hidden = g.linear(normed, layer.fc1.0, layer.fc1.1)?;
    let hidden = g.gelu(hidden);
    let mlp = g.linear(hidden, layer.fc2.0, layer.fc2.1)?;
    Ok((g.add(mlp, a)?, maps))
}

/// Runs the full encoder on an `H×W×3` image tensor.
pub fn encode<T: Scalar>(g: &mut Graph<T>, image: &Tensor<T>, vars: &EncoderVars, cfg: &EncoderConfig) -> Result<EncodeOutput> {
    encode_with(g, image, vars, cfg, true)
}

/// Like [`encode`]; with `full_output` off the last layer stops after its
/// attention maps and the final norm is skipped.
pub fn encode_with<T: Scalar>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    full_output: bool,
) -> Result<EncodeOutput> {
    let (h, w, _) = image.dims3()?;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::dim(format!(
            "image is {h}×{w}, encoder expects {0}×{0}",
            cfg.image_size
        )));
    }
    let patches = g.constant(patchify(image, cfg.patch_size)?);
    let t_in = embed_tokens(g, patches, vars)?;
    encode_from(g, vec![t_in], Vec::new(), vars, cfg, full_output)
}

/// Continues an encoding whose first `attention.len()` layers are already
/// in `tokens` and `attention`.
pub fn encode_from<T: Scalar>(
    g: &mut Graph<T>,
    mut tokens: Vec<Var>,
    mut attention: Vec<Vec<Var>>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    full_output: bool,
) -> Result<EncodeOutput> {
    let start = attention.len();
    if tokens.len() != start + 1 || start > vars.layers.len() {
        return Err(Error::config(format!(
            "cannot resume at layer {start} from {} token sequences",
            tokens.len()
        )));
    }
    let depth = vars.layers.len();
    let mut t = tokens[start];
    for (l, layer) in vars.layers.iter().enumerate().skip(start) {
        if !full_output && l + 1 == depth {
            let normed = g.layer_norm(t, layer.ln1.0, layer.ln1.1, 1)?;
            attention.push(attention_maps(g, normed, layer, cfg.head_dim)?.0);
            break;
        }
        let (next, maps) = encoder_layer(g, t, layer, cfg.head_dim)?;
        tokens.push(next);
        attention.push(maps);
        t = next;
    }
    let normed = if tokens.len() > depth {
        Some(g.layer_norm(t, vars.norm.0, vars.norm.1, 1)?)
    } else {
        None
    };
    let class_tokens = g.value(vars.cls_tokens).shape()[0];
    Ok(EncodeOutput { tokens, attention, normed, class_tokens, num_patches: cfg.num_patches() })
}
