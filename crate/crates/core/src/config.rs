//! Model and training configuration.
//!
//! Desk-scale defaults train in minutes on a laptop; the larger published
//! operating point (12-layer encoders, plug layer 10, batch 768) stays
//! representable and validates cleanly.
//!
//! Config files are flat `key = value` text. `#` starts a comment, every key
//! has a default, and unknown keys are hard errors so sweep typos surface
//! immediately.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden width of both encoders.
    pub hidden: usize,
    pub heads: usize,
    pub layers_text: usize,
    pub layers_image: usize,
    /// Image-encoder layer after which the grouping module is inserted.
    pub plug_layer: usize,
    /// Cross-attention depth inside the grouping module.
    pub cross_attn_depth: usize,
    /// Number of learnable centers (regions).
    pub centers: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_text_len: usize,
    /// Fraction of patches hidden from the reconstruction encoder.
    pub mask_rate: f64,
    pub decoder_layers: usize,
    /// Gumbel-Softmax temperature for the patch assignment.
    pub gumbel_temperature: f64,
    /// Superpixel parameters: Gaussian pre-smoothing, merge threshold scale,
    /// minimum segment size.
    pub sp_sigma: f64,
    pub sp_k: f64,
    pub sp_min_size: usize,
    pub enable_rec: bool,
    pub enable_sup: bool,
    /// Minimum cosine similarity a pixel's best class must reach to escape
    /// the background label at inference.
    pub threshold: f64,
    /// Learning rate for the pretrained-analog group (embeddings, text
    /// encoder, image layers before the plug point).
    pub lr_pretrained: f64,
    /// Learning rate for freshly initialized parameters (grouping module,
    /// later image layers, reconstruction stack, heads).
    pub lr_fresh: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Restrict the reconstruction error to masked patches instead of the
    /// whole image.
    pub mask_loss_masked_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            layers_text: 4,
            layers_image: 6,
            plug_layer: 5,
            cross_attn_depth: 2,
            centers: 8,
            patch_size: 8,
            image_size: 64,
            max_text_len: 16,
            mask_rate: 0.75,
            decoder_layers: 3,
            gumbel_temperature: 1.0,
            sp_sigma: 0.8,
            sp_k: 0.4,
            sp_min_size: 32,
            enable_rec: true,
            enable_sup: true,
            threshold: 0.25,
            lr_pretrained: 5e-3,
            lr_fresh: 5e-3,
            batch_size: 16,
            epochs: 500,
            seed: 42,
            mask_loss_masked_only: false,
        }
    }
}

impl ModelConfig {
    /// Patch grid edge length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.plug_layer < 1 || self.plug_layer >= self.layers_image {
            return fail(format!(
                "plug_layer {} must satisfy 1 <= plug_layer < layers_image {}",
                self.plug_layer, self.layers_image
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.centers == 0 {
            return fail("centers must be at least 1".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate {} must lie in (0, 1)", self.mask_rate));
        }
        if self.gumbel_temperature <= 0.0 {
            return fail(format!("gumbel_temperature {} must be > 0", self.gumbel_temperature));
        }
        if self.max_text_len < 2 {
            return fail("max_text_len must be at least 2".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if self.sp_k <= 0.0 || self.sp_min_size == 0 {
            return fail("superpixel k must be > 0 and min_size >= 1".into());
        }
        if self.layers_text == 0 || self.decoder_layers == 0 {
            return fail("layers_text and decoder_layers must be positive".into());
        }
        Ok(())
    }

    /// The published operating point, for sweeps that scale up.
    pub fn paper_scale() -> Self {
        ModelConfig {
            hidden: 512,
            heads: 8,
            layers_text: 12,
            layers_image: 12,
            plug_layer: 10,
            cross_attn_depth: 2,
            centers: 8,
            patch_size: 16,
            image_size: 224,
            max_text_len: 32,
            mask_rate: 0.75,
            decoder_layers: 3,
            lr_pretrained: 4e-6,
            lr_fresh: 4e-3,
            batch_size: 768,
            epochs: 10,
            ..Default::default()
        }
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("hidden", self.hidden.to_string());
        kv("heads", self.heads.to_string());
        kv("layers_text", self.layers_text.to_string());
        kv("layers_image", self.layers_image.to_string());
        kv("plug_layer", self.plug_layer.to_string());
        kv("cross_attn_depth", self.cross_attn_depth.to_string());
        kv("centers", self.centers.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("image_size", self.image_size.to_string());
        kv("max_text_len", self.max_text_len.to_string());
        kv("mask_rate", format!("{:?}", self.mask_rate));
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("gumbel_temperature", format!("{:?}", self.gumbel_temperature));
        kv("sp_sigma", format!("{:?}", self.sp_sigma));
        kv("sp_k", format!("{:?}", self.sp_k));
        kv("sp_min_size", self.sp_min_size.to_string());
        kv("enable_rec", self.enable_rec.to_string());
        kv("enable_sup", self.enable_sup.to_string());
        kv("threshold", format!("{:?}", self.threshold));
        kv("lr_pretrained", format!("{:?}", self.lr_pretrained));
        kv("lr_fresh", format!("{:?}", self.lr_fresh));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("mask_loss_masked_only", self.mask_loss_masked_only.to_string());
        s
    }

    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("cannot parse `{value}` for key `{key}`"))
            })
        }
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers_text" => self.layers_text = parse(key, value)?,
            "layers_image" => self.layers_image = parse(key, value)?,
            "plug_layer" => self.plug_layer = parse(key, value)?,
            "cross_attn_depth" => self.cross_attn_depth = parse(key, value)?,
            "centers" => self.centers = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "max_text_len" => self.max_text_len = parse(key, value)?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "gumbel_temperature" => self.gumbel_temperature = parse(key, value)?,
            "sp_sigma" => self.sp_sigma = parse(key, value)?,
            "sp_k" => self.sp_k = parse(key, value)?,
            "sp_min_size" => self.sp_min_size = parse(key, value)?,
            "enable_rec" => self.enable_rec = parse(key, value)?,
            "enable_sup" => self.enable_sup = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "lr_pretrained" => self.lr_pretrained = parse(key, value)?,
            "lr_fresh" => self.lr_fresh = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mask_loss_masked_only" => self.mask_loss_masked_only = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_key_values(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_key_values(&text)
    }
}
