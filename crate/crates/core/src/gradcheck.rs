//! Central finite-difference verification of analytic gradients.

use crate::encoder::{self, EncodeOutput, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head;
use crate::metrics::LabelMap;
use crate::data::{gen_synthetic, image_to_tensor, SyntheticSpec};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)` for one coordinate.
pub fn central_difference(f_plus: f64, f_minus: f64, eps: f64) -> f64 {
    (f_plus - f_minus) / (2.0 * eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat coordinate holding the worst error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>, want_grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        let xv = g.leaf(point.clone(), want_grad);
        let out = f(&mut g, xv)?;
        let value = g.value(out).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {value}")));
        }
        let grad = if want_grad {
            Some(g.backward(out)?.get_or_zeros(xv, point.shape()))
        } else {
            None
        };
        Ok((value, grad))
    };

    let (_, grad) = eval(x, true)?;
    let analytic: Vec<f64> = grad.expect("requested").into_data();
    let mut numeric = Vec::with_capacity(x.len());
    let mut point = x.clone();
    for i in 0..x.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let (fp, _) = eval(&point, false)?;
        point.data_mut()[i] = orig - eps;
        let (fm, _) = eval(&point, false)?;
        point.data_mut()[i] = orig;
        numeric.push(central_difference(fp, fm, eps));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Finite-difference results for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamCheck {
    pub fn rel_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.analytic.iter().zip(&self.numeric).map(|(&a, &n)| relative_error(a, n))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors().fold(0.0, f64::max)
    }

    /// Coordinate of the largest relative error.
    pub fn worst(&self) -> Option<usize> {
        self.rel_errors()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
                Some((_, b)) if b >= e => best,
                _ => Some((i, e)),
            })
            .map(|(i, _)| i)
    }

    pub fn count_above(&self, tol: f64) -> usize {
        self.rel_errors().filter(|&e| e > tol).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl ModelCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(ParamCheck::max_rel_error).fold(0.0, f64::max)
    }

    pub fn coordinates(&self) -> usize {
        self.params.iter().map(|p| p.analytic.len()).sum()
    }

    pub fn count_above(&self, tol: f64) -> usize {
        self.params.iter().map(|p| p.count_above(tol)).sum()
    }
}

/// First part of the forward pass a parameter feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Embed,
    Layer(usize),
    Readout,
}

impl Stage {
    /// Whether replaying from this stage reads the named parameter.
    fn reads(self, name: &str) -> bool {
        match (self, stage_of(name)) {
            (_, Stage::Readout) | (Stage::Embed, _) => true,
            (Stage::Layer(from), Stage::Layer(l)) => l >= from,
            _ => name == "encoder.cls_tokens",
        }
    }
}

fn stage_of(name: &str) -> Stage {
    match name.strip_prefix("encoder.layers.") {
        Some(rest) => rest
            .split('.')
            .next()
            .and_then(|l| l.parse().ok())
            .map_or(Stage::Embed, Stage::Layer),
        None if name.starts_with("encoder.") && !name.starts_with("encoder.norm.") => Stage::Embed,
        None => Stage::Readout,
    }
}

/// Loss evaluator that replays the forward pass only from the stage a
/// perturbed parameter enters, reusing cached encoder activations.
struct StagedLoss<'a> {
    image: &'a Tensor<f64>,
    labels: &'a LabelMap,
    full_output: bool,
    tokens: Vec<Tensor<f64>>,
    attention: Vec<Vec<Tensor<f64>>>,
    class_tokens: usize,
    num_patches: usize,
}

impl<'a> StagedLoss<'a> {
    fn new(model: &'a Model<f64>, image: &'a Tensor<f64>, labels: &'a LabelMap) -> Result<Self> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, image)?;
        let enc = &out.encoding;
        Ok(Self {
            image,
            labels,
            full_output: model.needs_encoder_output(),
            tokens: enc.tokens.iter().map(|&t| g.value(t).clone()).collect(),
            attention: enc.attention.iter().map(|l| l.iter().map(|&a| g.value(a).clone()).collect()).collect(),
            class_tokens: enc.class_tokens,
            num_patches: enc.num_patches,
        })
    }

    fn eval(&self, model: &Model<f64>, stage: Stage) -> Result<f64> {
        let mut g = Graph::new();
        let skipped = g.constant(Tensor::zeros([0]));
        let params: Vec<Var> = model
            .params
            .iter()
            .map(|(name, t)| if stage.reads(name) { g.constant(t.clone()) } else { skipped })
            .collect();
        let e = &model.config.encoder;
        let lookup = |name: &str| {
            model
                .params
                .position(name)
                .map(|i| params[i])
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))
        };
        let vars = EncoderVars::resolve(e.depth, &lookup)?;
        let encoding = match stage {
            Stage::Embed => encoder::encode_with(&mut g, self.image, &vars, e, self.full_output)?,
            Stage::Layer(l) => {
                let tokens = self.tokens[..=l].iter().map(|t| g.constant(t.clone())).collect();
                let attention = self.cached_attention(&mut g, l);
                encoder::encode_from(&mut g, tokens, attention, &vars, e, self.full_output)?
            }
            Stage::Readout if self.full_output => {
                let tokens = self.tokens.iter().map(|t| g.constant(t.clone())).collect();
                let attention = self.cached_attention(&mut g, e.depth);
                encoder::encode_from(&mut g, tokens, attention, &vars, e, true)?
            }
            Stage::Readout => EncodeOutput {
                tokens: self.tokens.iter().map(|t| g.constant(t.clone())).collect(),
                attention: self.cached_attention(&mut g, e.depth),
                normed: None,
                class_tokens: self.class_tokens,
                num_patches: self.num_patches,
            },
        };
        let out = model.readout(&mut g, encoding, params)?;
        let loss = head::seg_loss(&mut g, out.logits, self.labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        Ok(value)
    }

    fn cached_attention(&self, g: &mut Graph<f64>, layers: usize) -> Vec<Vec<Var>> {
        self.attention[..layers]
            .iter()
            .map(|maps| maps.iter().map(|a| g.constant(a.clone())).collect())
            .collect()
    }
}

/// A 64-bit model initialized from `seed` and one synthetic scene of the
/// model's input size drawn from the same seed.
pub fn seeded_problem(config: &ModelConfig, seed: u64) -> Result<(Model<f64>, Tensor<f64>, LabelMap)> {
    let model = Model::new(config.clone(), seed)?;
    let spec = SyntheticSpec {
        seed,
        count: 1,
        image_size: config.encoder.image_size,
        num_classes: config.encoder.num_classes,
        ..SyntheticSpec::default()
    };
    let sample = gen_synthetic(&spec)?.pop().expect("one sample");
    Ok((model, image_to_tensor(&sample.image), sample.labels))
}

/// Checks the analytic gradient of the segmentation loss against central
/// differences at every coordinate of every parameter.
pub fn model_grad_check(model: &Model<f64>, image: &Tensor<f64>, labels: &LabelMap, eps: f64) -> Result<ModelCheck> {
    let (loss, grads) = model.loss_and_grads(image, labels)?;
    let staged = StagedLoss::new(model, image, labels)?;
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(grads.len());
    for (i, grad) in grads.into_iter().enumerate() {
        let name = model.params.entry(i).0.to_string();
        let stage = stage_of(&name);
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = probe.params.entry(i).1.data()[j];
            probe.params.entry_mut(i).data_mut()[j] = orig + eps;
            let fp = staged.eval(&probe, stage)?;
            probe.params.entry_mut(i).data_mut()[j] = orig - eps;
            let fm = staged.eval(&probe, stage)?;
            probe.params.entry_mut(i).data_mut()[j] = orig;
            numeric.push(central_difference(fp, fm, eps));
        }
        params.push(ParamCheck { name, analytic: grad.into_data(), numeric });
    }
    Ok(ModelCheck { loss, params })
}
