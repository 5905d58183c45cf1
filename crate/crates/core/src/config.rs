//! Line-oriented `key = value` run configuration.
//!
//! Keys are dotted (`encoder.depth`, `train.base_lr`). Lines starting with
//! `#` and blank lines are skipped. Every field has a default and unknown
//! keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{InferOptions, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Synthetic training set, used when `train_dir` is unset.
    pub synthetic: SyntheticSpec,
    /// Size of the synthetic validation split, generated from `seed + 1`.
    pub val_count: usize,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synthetic: SyntheticSpec::default(), val_count: 8, train_dir: None, val_dir: None }
    }
}

impl DataConfig {
    pub fn val_spec(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.synthetic.seed.wrapping_add(1), count: self.val_count, ..self.synthetic.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seed of the parameter initializer.
    pub init_seed: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub infer: InferOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::tiny();
        let train = TrainConfig { crop_size: model.encoder.image_size, ..TrainConfig::default() };
        let data = DataConfig {
            synthetic: SyntheticSpec { num_classes: model.encoder.num_classes, ..SyntheticSpec::default() },
            ..DataConfig::default()
        };
        Self { model, init_seed: 0, train, data, infer: InferOptions::default() }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::config(format!("{key}: expected two comma-separated values, got {value:?}"))),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Replaces the encoder with a named preset and matches the crop size
    /// and class count to it.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        self.model.encoder = EncoderConfig::preset(name)?;
        self.train.crop_size = self.model.encoder.image_size;
        self.data.synthetic.num_classes = self.model.encoder.num_classes;
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let t = &mut self.train;
        let d = &mut self.data;
        let s = &mut d.synthetic;
        let i = &mut self.infer;
        match key {
            "encoder.image_size" => e.image_size = parse(key, value)?,
            "encoder.patch_size" => e.patch_size = parse(key, value)?,
            "encoder.depth" => e.depth = parse(key, value)?,
            "encoder.embed_dim" => e.embed_dim = parse(key, value)?,
            "encoder.head_dim" => e.head_dim = parse(key, value)?,
            "encoder.num_classes" => e.num_classes = parse(key, value)?,
            "encoder.token_head_depth" => e.token_head_depth = parse(key, value)?,
            "encoder.attn_agg_layers" => e.attn_agg_layers = parse(key, value)?,
            "encoder.output_stride" => e.output_stride = parse_pair(key, value)?,
            "model.variant" => self.model.variant = value.parse()?,
            "model.refine_steps" => self.model.refine_steps = parse(key, value)?,
            "model.logit_scale" => self.model.logit_scale = parse(key, value)?,
            "model.init_seed" => self.init_seed = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.power" => t.power = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.crops_per_image" => t.crops_per_image = parse_auto(key, value)?,
            "train.crop_size" => t.crop_size = parse(key, value)?,
            "train.flip" => t.flip = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.precision" => t.precision = value.parse()?,
            "data.seed" => s.seed = parse(key, value)?,
            "data.count" => s.count = parse(key, value)?,
            "data.val_count" => d.val_count = parse(key, value)?,
            "data.image_size" => s.image_size = parse(key, value)?,
            "data.num_classes" => s.num_classes = parse(key, value)?,
            "data.shapes" => s.shapes = parse_list(key, value)?,
            "data.shapes_per_image" => s.shapes_per_image = parse_pair(key, value)?,
            "data.train_dir" => d.train_dir = parse_path(value),
            "data.val_dir" => d.val_dir = parse_path(value),
            "infer.scales" => i.scales = parse_list(key, value)?,
            "infer.flip" => i.flip = parse(key, value)?,
            "infer.window" => i.window = parse_auto(key, value)?,
            "infer.stride" => i.stride = parse_auto(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let t = &self.train;
        let d = &self.data;
        let s = &d.synthetic;
        let i = &self.infer;
        vec![
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.head_dim", e.head_dim.to_string()),
            ("encoder.num_classes", e.num_classes.to_string()),
            ("encoder.token_head_depth", e.token_head_depth.to_string()),
            ("encoder.attn_agg_layers", e.attn_agg_layers.to_string()),
            ("encoder.output_stride", join([e.output_stride.0, e.output_stride.1])),
            ("model.variant", self.model.variant.to_string()),
            ("model.refine_steps", self.model.refine_steps.to_string()),
            ("model.logit_scale", self.model.logit_scale.to_string()),
            ("model.init_seed", self.init_seed.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.power", t.power.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.crops_per_image", auto(t.crops_per_image)),
            ("train.crop_size", t.crop_size.to_string()),
            ("train.flip", t.flip.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", t.precision.to_string()),
            ("data.seed", s.seed.to_string()),
            ("data.count", s.count.to_string()),
            ("data.val_count", d.val_count.to_string()),
            ("data.image_size", s.image_size.to_string()),
            ("data.num_classes", s.num_classes.to_string()),
            ("data.shapes", join(s.shapes.iter().map(|s| s.name()))),
            ("data.shapes_per_image", join([s.shapes_per_image.0, s.shapes_per_image.1])),
            ("data.train_dir", path(&d.train_dir)),
            ("data.val_dir", path(&d.val_dir)),
            ("infer.scales", join(&i.scales)),
            ("infer.flip", i.flip.to_string()),
            ("infer.window", auto(i.window)),
            ("infer.stride", auto(i.stride)),
        ]
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let head = key.split('.').next().unwrap_or_default();
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.crop_size != self.model.encoder.image_size {
            return Err(Error::config(format!(
                "train.crop_size {} differs from encoder.image_size {}",
                self.train.crop_size, self.model.encoder.image_size
            )));
        }
        if self.data.synthetic.num_classes != self.model.encoder.num_classes {
            return Err(Error::config(format!(
                "data.num_classes {} differs from encoder.num_classes {}",
                self.data.synthetic.num_classes, self.model.encoder.num_classes
            )));
        }
        if self.infer.scales.is_empty() || self.infer.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("infer.scales {:?} must be positive", self.infer.scales)));
        }
        if self.train.crops_per_image == Some(0) {
            return Err(Error::config("train.crops_per_image must be positive"));
        }
        if self.infer.stride == Some(0) || self.infer.window == Some(0) {
            return Err(Error::config("infer.window and infer.stride must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Shape;
    use crate::model::Variant;
    use crate::train::Precision;

    #[test]
    fn default_text_is_a_fixed_point() {
        let text = RunConfig::default().to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.to_text(), text);
        assert!(parsed.validate().is_ok());
    }

    #[test]
    fn edited_config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("b").unwrap();
        cfg.model.variant = Variant::HraOnly;
        cfg.train.base_lr = 0.1 + 0.2;
        cfg.train.precision = Precision::F64;
        cfg.data.synthetic.shapes = vec![Shape::Stripe, Shape::Disk];
        cfg.data.train_dir = Some(PathBuf::from("/tmp/a b"));
        cfg.infer.scales = vec![0.5, 0.75, 1.0, 1.25];
        cfg.infer.window = Some(64);
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg = RunConfig::parse("# tiny run\n\n  train.epochs = 3 \nencoder.output_stride = 2, 2\ninfer.stride = 8\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.encoder.output_stride, (2, 2));
        assert_eq!(cfg.infer.stride, Some(8));
        assert_eq!(cfg.infer.window, None);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        for text in ["encoder.dpeth = 3", "train.epochs", "train.epochs = three", "model.variant = huge", "train.flip = 1\ntrain.flip = 0", "data.shapes = square"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let err = RunConfig::parse("\n\nbogus = 1").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.train.crop_size = 48;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("data.num_classes = 6").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("infer.scales = 1.0, 0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
