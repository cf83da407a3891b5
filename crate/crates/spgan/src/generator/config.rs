//! Generator architecture description and validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stylization sites by synthesis-path level; levels name the three earliest
/// upsampling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdainLayer {
    L1,
    L2,
    L3,
}

impl AdainLayer {
    /// L1/L2/L3 sit at the 8/16/32 pixel layers.
    pub fn resolution(self) -> usize {
        match self {
            AdainLayer::L1 => 8,
            AdainLayer::L2 => 16,
            AdainLayer::L3 => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// upsample, conv, noise, batch norm, twice.
    Original,
    /// upsample, conv, noise; normalization left to a following AdaIN.
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SleVariant {
    #[default]
    Deep,
    Lite,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootKind {
    /// Learned 4x4 constant; the latent acts only through the styles.
    #[default]
    Const,
    /// Latent projected to the 4x4 root map.
    NoiseProjected,
}

fn default_z_dim() -> usize {
    256
}
fn default_w_dim() -> usize {
    256
}
fn default_mapping_depth() -> usize {
    2
}
fn default_base_channels() -> usize {
    256
}

/// Full description of one generator variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_w_dim")]
    pub w_dim: usize,
    #[serde(default = "default_mapping_depth")]
    pub mapping_depth: usize,
    pub out_res: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Stylized levels; empty list disables the mapping network.
    #[serde(default)]
    pub adain_layers: Vec<AdainLayer>,
    /// Block kind per synthesis layer, from the 8px layer up to `out_res`.
    /// Omitted: light exactly at AdaIN layers, original elsewhere.
    #[serde(default)]
    pub fg_blocks: Option<Vec<BlockKind>>,
    #[serde(default)]
    pub sle_variant: SleVariant,
    /// (low_res, high_res) gate pairs. Omitted: (8, out_res/2), (16, out_res)
    /// at out_res >= 64, the single pair (8, 32) at out_res 32.
    #[serde(default)]
    pub sle_pairs: Option<Vec<(usize, usize)>>,
    /// Also stylize the SLE-bearing high-res layers.
    #[serde(default)]
    pub adain_with_sle: bool,
    #[serde(default)]
    pub root: RootKind,
}

impl GeneratorConfig {
    /// Resolutions of the synthesis layers: 8, 16, ..., out_res.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        let mut res = Vec::new();
        let mut r = 8;
        while r <= self.out_res {
            res.push(r);
            r *= 2;
        }
        res
    }

    /// Channel schedule: base_channels at the 4x4 root, halved at each
    /// doubling, floored at 8.
    pub fn channels_at(&self, res: usize) -> usize {
        let mut c = self.base_channels;
        let mut r = 4;
        while r < res {
            c /= 2;
            r *= 2;
        }
        c.max(8)
    }

    /// Resolutions that get an AdaIN site from `adain_layers`.
    pub fn adain_resolutions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.adain_layers.iter().map(|l| l.resolution()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Effective gate pairs after applying the defaults.
    pub fn effective_sle_pairs(&self) -> Vec<(usize, usize)> {
        if self.sle_variant == SleVariant::None {
            return Vec::new();
        }
        match &self.sle_pairs {
            Some(pairs) => pairs.clone(),
            None => {
                if self.out_res >= 64 {
                    vec![(8, self.out_res / 2), (16, self.out_res)]
                } else {
                    vec![(8, 32)]
                }
            }
        }
    }

    /// Block kind per layer after applying the default rule.
    pub fn effective_blocks(&self) -> Vec<BlockKind> {
        let layers = self.layer_resolutions();
        match &self.fg_blocks {
            Some(kinds) => kinds.clone(),
            None => {
                let adain = self.adain_resolutions();
                layers
                    .iter()
                    .map(|r| if adain.contains(r) { BlockKind::Light } else { BlockKind::Original })
                    .collect()
            }
        }
    }

    /// All stylized resolutions, including SLE-high layers when
    /// `adain_with_sle` is set.
    pub fn style_sites(&self) -> Vec<usize> {
        let mut v = self.adain_resolutions();
        if self.adain_with_sle {
            for (_, high) in self.effective_sle_pairs() {
                v.push(high);
            }
        }
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn uses_mapping(&self) -> bool {
        !self.style_sites().is_empty()
    }

    /// Checks every structural invariant; the error names the violated one.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if !self.out_res.is_power_of_two() || !(32..=256).contains(&self.out_res) {
            return fail(format!(
                "out_res must be a power of two in [32, 256], got {}",
                self.out_res
            ));
        }
        if ![2, 4, 8].contains(&self.mapping_depth) {
            return fail(format!("mapping_depth must be one of 2, 4, 8, got {}", self.mapping_depth));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.base_channels == 0 {
            return fail("z_dim, w_dim, and base_channels must be positive".to_string());
        }
        let layers = self.layer_resolutions();
        if let Some(kinds) = &self.fg_blocks {
            if kinds.len() != layers.len() {
                return fail(format!(
                    "fg_blocks lists {} kinds but the synthesis path has {} layers ({:?})",
                    kinds.len(),
                    layers.len(),
                    layers
                ));
            }
        }
        let adain = self.adain_resolutions();
        for r in &adain {
            if !layers.contains(r) {
                return fail(format!("adain layer at {r} is outside the synthesis path"));
            }
        }
        let pairs = self.effective_sle_pairs();
        for (low, high) in &pairs {
            if !low.is_power_of_two() || !high.is_power_of_two() {
                return fail(format!("sle pair ({low}, {high}): resolutions must be powers of two"));
            }
            if low >= high {
                return fail(format!("sle pair ({low}, {high}): low_res must be below high_res"));
            }
            if !layers.contains(low) || !layers.contains(high) {
                return fail(format!(
                    "sle pair ({low}, {high}): both resolutions must be synthesis layers {layers:?}"
                ));
            }
        }
        for r in &adain {
            for (_, high) in &pairs {
                if r >= high {
                    return fail(format!(
                        "adain layer at {r} must sit below every sle high_res (violated by {high})"
                    ));
                }
            }
        }
        if !self.adain_with_sle {
            let blocks = self.effective_blocks();
            for (res, kind) in layers.iter().zip(&blocks) {
                if adain.contains(res) && *kind != BlockKind::Light {
                    return fail(format!(
                        "layer {res} carries AdaIN and must use the light block"
                    ));
                }
            }
        }
        if self.adain_with_sle && self.sle_variant == SleVariant::None {
            return fail("adain_with_sle requires an SLE variant".to_string());
        }
        Ok(())
    }
}
