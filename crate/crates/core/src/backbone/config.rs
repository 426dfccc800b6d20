//! Model configuration, presets and the derived shape ladder.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmu::{GmuOrder, GmuPlacement};

pub const STAGES: usize = 4;

/// Front end mapping coordinates to the first feature level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Parameter-free blended embedding.
    Nape,
    /// Learned linear map from coordinates followed by ReLU.
    Mlp,
    /// Parameter-free embedding with the Gaussian basis only.
    Gaussian,
    /// Parameter-free embedding with the cosine basis only.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Fps,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classify,
    PartSegment,
}

/// Every architectural choice of a model. Serialized into checkpoints as
/// `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub embedding: EmbeddingKind,
    pub gmu_placement: GmuPlacement,
    pub gmu_order: GmuOrder,
    pub neighbors: usize,
    pub stage_depths: [usize; STAGES],
    pub expansion: [usize; STAGES],
    pub lrb_ratio: f64,
    pub sampling: Sampling,
    pub n_points: usize,
    pub n_classes: usize,
    pub head: HeadKind,
    /// Hidden width of the classification MLP; `None` means four times the
    /// final stage width.
    pub classifier_hidden: Option<usize>,
    pub dropout: f64,
    /// Object categories conditioning the segmentation head.
    pub seg_categories: usize,
    pub class_embed_dim: usize,
    pub seg_hidden: usize,
    /// Center and scale inputs to the unit sphere before embedding.
    pub normalize: bool,
}

impl ModelConfig {
    /// 0.14M-parameter classifier for 40 classes.
    pub fn slnet_s() -> Self {
        ModelConfig {
            embed_dim: 16,
            embedding: EmbeddingKind::Nape,
            gmu_placement: GmuPlacement::AfterEmbedding,
            gmu_order: GmuOrder::ScaleShift,
            neighbors: 32,
            stage_depths: [1, 1, 2, 1],
            expansion: [2, 2, 2, 1],
            lrb_ratio: 0.25,
            sampling: Sampling::Fps,
            n_points: 1024,
            n_classes: 40,
            head: HeadKind::Classify,
            classifier_hidden: None,
            dropout: 0.5,
            seg_categories: 16,
            class_embed_dim: 64,
            seg_hidden: 128,
            normalize: true,
        }
    }

    /// Twice the embedding width of [`ModelConfig::slnet_s`].
    pub fn slnet_m() -> Self {
        ModelConfig {
            embed_dim: 32,
            ..Self::slnet_s()
        }
    }

    /// Variant for scanned objects: 24 neighbors, a deeper third stage, no
    /// modulation, 15 classes.
    pub fn scan_variant(base: Self) -> Self {
        ModelConfig {
            neighbors: 24,
            stage_depths: [1, 1, 3, 1],
            gmu_placement: GmuPlacement::None,
            n_classes: 15,
            ..base
        }
    }

    /// Part segmentation over 2048 points, 16 categories and 50 parts.
    pub fn part_segmentation(base: Self) -> Self {
        ModelConfig {
            head: HeadKind::PartSegment,
            n_points: 2048,
            n_classes: 50,
            ..base
        }
    }

    /// Desk-scale classifier: 256 points, 8 neighbors.
    pub fn tiny(n_classes: usize) -> Self {
        ModelConfig {
            neighbors: 8,
            n_points: 256,
            n_classes,
            ..Self::slnet_s()
        }
    }

    /// Preset by name: `slnet-s`, `slnet-m`, their `-scan` and `-seg`
    /// variants, or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "slnet-s" => Self::slnet_s(),
            "slnet-m" => Self::slnet_m(),
            "slnet-s-scan" => Self::scan_variant(Self::slnet_s()),
            "slnet-m-scan" => Self::scan_variant(Self::slnet_m()),
            "slnet-s-seg" => Self::part_segmentation(Self::slnet_s()),
            "slnet-m-seg" => Self::part_segmentation(Self::slnet_m()),
            "tiny" => Self::tiny(4),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        })
    }

    /// Output width of every stage.
    pub fn stage_widths(&self) -> [usize; STAGES] {
        let mut w = [0; STAGES];
        let mut prev = self.embed_dim;
        for (s, out) in w.iter_mut().enumerate() {
            prev *= self.expansion[s];
            *out = prev;
        }
        w
    }

    /// Point count of every stage.
    pub fn stage_points(&self) -> [usize; STAGES] {
        std::array::from_fn(|s| self.n_points >> (s + 1))
    }

    /// Bottleneck width of a residual block at width `c`.
    pub fn bottleneck(&self, c: usize) -> usize {
        (c as f64 * self.lrb_ratio).round() as usize
    }

    pub fn classifier_hidden_width(&self) -> usize {
        self.classifier_hidden.unwrap_or(4 * self.stage_widths()[STAGES - 1])
    }

    /// Width of the segmentation decoder after each upsampling step,
    /// coarsest first.
    pub fn decoder_widths(&self) -> [usize; STAGES] {
        let w = self.stage_widths();
        [w[2], w[1], w[0], w[0]]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.neighbors == 0 {
            return fail("neighbors must be positive".into());
        }
        if self.n_points < 1 << STAGES {
            return fail(format!("n_points must be at least {}", 1 << STAGES));
        }
        if self.expansion.contains(&0) {
            return fail("expansion factors must be positive".into());
        }
        if !(self.lrb_ratio > 0.0 && self.lrb_ratio <= 1.0) {
            return fail(format!("lrb_ratio {} outside (0, 1]", self.lrb_ratio));
        }
        for w in self.stage_widths() {
            if self.bottleneck(w) < 1 {
                return fail(format!(
                    "lrb_ratio {} leaves width {w} with an empty bottleneck",
                    self.lrb_ratio
                ));
            }
        }
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.classifier_hidden == Some(0) {
            return fail("classifier_hidden must be positive".into());
        }
        if self.head == HeadKind::PartSegment
            && (self.seg_categories == 0 || self.class_embed_dim == 0 || self.seg_hidden == 0)
        {
            return fail("segmentation widths and category count must be positive".into());
        }
        Ok(())
    }

    /// Keys accepted by [`ModelConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 18] = [
        "embed_dim",
        "embedding",
        "gmu_placement",
        "gmu_order",
        "neighbors",
        "stage_depths",
        "expansion",
        "lrb_ratio",
        "sampling",
        "n_points",
        "n_classes",
        "head",
        "classifier_hidden",
        "dropout",
        "seg_categories",
        "class_embed_dim",
        "seg_hidden",
        "normalize",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "embed_dim" => self.embed_dim = num(key, value)?,
            "embedding" => self.embedding = value.parse()?,
            "gmu_placement" => self.gmu_placement = parse_placement(value)?,
            "gmu_order" => self.gmu_order = parse_order(value)?,
            "neighbors" => self.neighbors = num(key, value)?,
            "stage_depths" => self.stage_depths = quad(key, value)?,
            "expansion" => self.expansion = quad(key, value)?,
            "lrb_ratio" => self.lrb_ratio = num(key, value)?,
            "sampling" => self.sampling = value.parse()?,
            "n_points" => self.n_points = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "head" => self.head = value.parse()?,
            "classifier_hidden" => self.classifier_hidden = if value == "auto" { None } else { Some(num(key, value)?) },
            "dropout" => self.dropout = num(key, value)?,
            "seg_categories" => self.seg_categories = num(key, value)?,
            "class_embed_dim" => self.class_embed_dim = num(key, value)?,
            "seg_hidden" => self.seg_hidden = num(key, value)?,
            "normalize" => self.normalize = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let quad = |q: &[usize; STAGES]| q.map(|v| v.to_string()).join(",");
        match key {
            "embed_dim" => self.embed_dim.to_string(),
            "embedding" => self.embedding.to_string(),
            "gmu_placement" => placement_name(self.gmu_placement).into(),
            "gmu_order" => order_name(self.gmu_order).into(),
            "neighbors" => self.neighbors.to_string(),
            "stage_depths" => quad(&self.stage_depths),
            "expansion" => quad(&self.expansion),
            "lrb_ratio" => self.lrb_ratio.to_string(),
            "sampling" => self.sampling.to_string(),
            "n_points" => self.n_points.to_string(),
            "n_classes" => self.n_classes.to_string(),
            "head" => self.head.to_string(),
            "classifier_hidden" => self.classifier_hidden.map_or_else(|| "auto".into(), |v| v.to_string()),
            "dropout" => self.dropout.to_string(),
            "seg_categories" => self.seg_categories.to_string(),
            "class_embed_dim" => self.class_embed_dim.to_string(),
            "seg_hidden" => self.seg_hidden.to_string(),
            "normalize" => self.normalize.to_string(),
            _ => unreachable!("key list and accessor disagree"),
        }
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Parses [`ModelConfig::to_text`] output. Missing keys keep the
    /// SLNet-S defaults; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::slnet_s();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn quad(key: &str, value: &str) -> Result<[usize; STAGES]> {
    let parts: Vec<usize> = value.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {STAGES} comma-separated values")))
}

fn placement_name(p: GmuPlacement) -> &'static str {
    match p {
        GmuPlacement::None => "none",
        GmuPlacement::AfterEmbedding => "after-embedding",
        GmuPlacement::AfterGrouping => "after-grouping",
        GmuPlacement::Both => "both",
    }
}

fn parse_placement(v: &str) -> Result<GmuPlacement> {
    Ok(match v {
        "none" => GmuPlacement::None,
        "after-embedding" => GmuPlacement::AfterEmbedding,
        "after-grouping" => GmuPlacement::AfterGrouping,
        "both" => GmuPlacement::Both,
        other => return Err(Error::Config(format!("unknown gmu_placement `{other}`"))),
    })
}

fn order_name(o: GmuOrder) -> &'static str {
    match o {
        GmuOrder::ScaleShift => "scale-shift",
        GmuOrder::ShiftScale => "shift-scale",
    }
}

fn parse_order(v: &str) -> Result<GmuOrder> {
    Ok(match v {
        "scale-shift" => GmuOrder::ScaleShift,
        "shift-scale" => GmuOrder::ShiftScale,
        other => return Err(Error::Config(format!("unknown gmu_order `{other}`"))),
    })
}

macro_rules! text_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

text_enum!(EmbeddingKind, "embedding", Nape => "nape", Mlp => "mlp", Gaussian => "gaussian", Cosine => "cosine");
text_enum!(Sampling, "sampling", Fps => "fps", Random => "random");
text_enum!(HeadKind, "head", Classify => "classify", PartSegment => "part-segment");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_for_default_small_model() {
        let cfg = ModelConfig::slnet_s();
        assert_eq!(cfg.stage_widths(), [32, 64, 128, 128]);
        assert_eq!(cfg.stage_points(), [512, 256, 128, 64]);
        assert_eq!(cfg.bottleneck(128), 32);
    }

    #[test]
    fn text_round_trip_for_every_preset() {
        for name in [
            "slnet-s",
            "slnet-m",
            "slnet-s-scan",
            "slnet-m-scan",
            "slnet-s-seg",
            "tiny",
        ] {
            let mut cfg = ModelConfig::preset(name).unwrap();
            cfg.classifier_hidden = Some(77);
            cfg.lrb_ratio = 0.125;
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ModelConfig::from_text("nieghbors = 3").is_err());
        assert!(ModelConfig::from_text("stage_depths = 1,2").is_err());
        assert!(ModelConfig::from_text("lrb_ratio = 0").is_err());
        assert!(ModelConfig::from_text("embed_dim = 1\nlrb_ratio = 0.125").is_err());
        assert!(ModelConfig::from_text("n_points = 8").is_err());
        assert!(ModelConfig::from_text("embedding = fourier").is_err());
        assert!(ModelConfig::preset("slnet-xl").is_err());
    }
}
