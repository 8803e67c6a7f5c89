//! Region and global visual branches and their language-space projections.

use candle_core::Tensor;
use image::imageops;
use serde::{Deserialize, Serialize};

use super::markers::{check_resolution, MarkedImage, Resolution};
use crate::error::{Error, Result};
use crate::nn::{self, layer_norm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Marker-aware branch over the high-resolution image.
    Region,
    /// Whole-image branch over the low-resolution image.
    Global,
}

impl Branch {
    pub fn resolution(self) -> Resolution {
        match self {
            Branch::Region => Resolution::High,
            Branch::Global => Resolution::Low,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Branch::Region => "vfe.region",
            Branch::Global => "vfe.global",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Small seeded patch-embedding stack.
    Toy,
    /// Placeholder for externally pretrained encoders; not bundled.
    PretrainedAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub branch: Branch,
    pub mode: BackboneMode,
    /// Side of one square patch, in pixels of the pooled image.
    pub patch_size: usize,
    /// Patches per side; the branch emits `grid * grid` tokens.
    pub grid: usize,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn toy(branch: Branch, seed: u64) -> Self {
        Self { branch, mode: BackboneMode::Toy, patch_size: 8, grid: 4, depth: 1, width: 32, seed }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let field = self.branch.prefix();
        if self.patch_size == 0 || self.grid == 0 || self.width == 0 {
            return Err(Error::validation(field, "patch_size, grid and width must be positive"));
        }
        if self.mode == BackboneMode::PretrainedAdapter {
            return Err(Error::Unsupported("pretrained backbone weights are not bundled; use mode \"toy\"".into()));
        }
        Ok(())
    }
}

/// Patch embedding followed by `depth` pre-norm residual MLP blocks.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    cfg: BackboneConfig,
    embed: Linear,
    positions: Tensor,
    blocks: Vec<Mlp>,
}

impl ToyBackbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let prefix = cfg.branch.prefix();
        let previous = store.set_seed(cfg.seed);
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let built = (|| -> Result<Self> {
            let embed = Linear::new(store, &format!("{prefix}.embed"), patch_dim, cfg.width, trainable)?;
            let blocks = (0..cfg.depth)
                .map(|i| {
                    Mlp::new(store, &format!("{prefix}.blocks.{i}"), cfg.width, cfg.width * 2, cfg.width, trainable)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { cfg: cfg.clone(), embed, positions: nn::sinusoidal_positions(cfg.tokens(), cfg.width)?, blocks })
        })();
        store.set_seed(previous);
        built
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Pools the image to `grid * patch` pixels per side and flattens each
    /// patch into a row of normalized RGB values (`tokens x patch*patch*3`).
    pub fn patches(&self, image: &MarkedImage) -> Result<Tensor> {
        check_resolution(image, self.cfg.branch.resolution())?;
        let side = (self.cfg.grid * self.cfg.patch_size) as u32;
        let pooled = imageops::resize(&image.pixels, side, side, imageops::FilterType::Triangle);
        let p = self.cfg.patch_size;
        let mut data = Vec::with_capacity(self.cfg.tokens() * p * p * 3);
        for gy in 0..self.cfg.grid {
            for gx in 0..self.cfg.grid {
                for y in 0..p {
                    for x in 0..p {
                        let px = pooled.get_pixel((gx * p + x) as u32, (gy * p + y) as u32);
                        for c in px.0 {
                            data.push((f64::from(c) / 255.0 - 0.5) / 0.25);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (self.cfg.tokens(), p * p * 3), &nn::device())?)
    }

    pub fn forward_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let mut x = self.embed.forward(patches)?.add(&self.positions)?;
        for block in &self.blocks {
            x = (&x + block.forward(&layer_norm(&x)?)?)?;
        }
        Ok(x)
    }

    pub fn forward(&self, image: &MarkedImage) -> Result<Tensor> {
        self.forward_patches(&self.patches(image)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfeConfig {
    pub region: BackboneConfig,
    pub global: BackboneConfig,
    /// Output dimension `d` of each projection.
    pub feature_dim: usize,
    pub projection_hidden: usize,
}

impl VfeConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            region: BackboneConfig::toy(Branch::Region, seed.wrapping_add(11)),
            global: BackboneConfig::toy(Branch::Global, seed.wrapping_add(23)),
            feature_dim: 64,
            projection_hidden: 64,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.region.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        self.global.validate()?;
        if self.region.branch != Branch::Region || self.global.branch != Branch::Global {
            return Err(Error::validation("vfe", "branch configs are swapped"));
        }
        if self.region.tokens() != self.global.tokens() {
            return Err(Error::validation(
                "vfe.global.grid",
                format!(
                    "both branches must emit the same token count ({} vs {})",
                    self.region.tokens(),
                    self.global.tokens()
                ),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("vfe.feature_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Region features `v_r`, global features `v_g` and their feature-axis
/// concatenation `v` (region first).
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub region: Tensor,
    pub global: Tensor,
    pub integrated: Tensor,
}

impl VisualFeatures {
    pub fn from_branches(region: Tensor, global: Tensor) -> Result<Self> {
        if region.dims() != global.dims() {
            return Err(Error::validation(
                "visual_features",
                format!("branch shapes differ: {:?} vs {:?}", region.dims(), global.dims()),
            ));
        }
        let integrated = Tensor::cat(&[&region, &global], 1)?;
        Ok(Self { region, global, integrated })
    }

    pub fn tokens(&self) -> usize {
        self.integrated.dims()[0]
    }
}

/// Both backbones plus the two projection MLPs.
#[derive(Debug, Clone)]
pub struct VisualFeatureExtractor {
    pub region: ToyBackbone,
    pub global: ToyBackbone,
    pub project_region: Mlp,
    pub project_global: Mlp,
}

impl VisualFeatureExtractor {
    /// Backbones are trainable only when `train_region` is set (stage 1);
    /// projections are always trainable.
    pub fn new(store: &mut ParamStore, cfg: &VfeConfig, train_region: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            region: ToyBackbone::new(store, &cfg.region, train_region)?,
            global: ToyBackbone::new(store, &cfg.global, false)?,
            project_region: Mlp::new(
                store,
                "vfe.proj_r",
                cfg.region.width,
                cfg.projection_hidden,
                cfg.feature_dim,
                true,
            )?,
            project_global: Mlp::new(
                store,
                "vfe.proj_g",
                cfg.global.width,
                cfg.projection_hidden,
                cfg.feature_dim,
                true,
            )?,
        })
    }

    /// Raw backbone outputs, before projection.
    pub fn backbone_outputs(&self, high: &MarkedImage, low: &MarkedImage) -> Result<(Tensor, Tensor)> {
        Ok((self.region.forward(high)?, self.global.forward(low)?))
    }

    pub fn project(&self, region_raw: &Tensor, global_raw: &Tensor) -> Result<VisualFeatures> {
        VisualFeatures::from_branches(
            self.project_region.forward(region_raw)?,
            self.project_global.forward(global_raw)?,
        )
    }

    pub fn extract(&self, high: &MarkedImage, low: &MarkedImage) -> Result<VisualFeatures> {
        let (r, g) = self.backbone_outputs(high, low)?;
        self.project(&r, &g)
    }
}

/// One-shot extraction with freshly initialized weights.
pub fn extract_features(high: &MarkedImage, low: &MarkedImage, cfg: &VfeConfig) -> Result<VisualFeatures> {
    let mut store = ParamStore::new(cfg.region.seed ^ cfg.global.seed.rotate_left(17));
    VisualFeatureExtractor::new(&mut store, cfg, false)?.extract(high, low)
}
