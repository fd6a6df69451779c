use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the full-width network: blocks of `Linear -> BN -> ReLU`
/// layers followed by classifier heads over the last block's features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub block_max_widths: Vec<usize>,
    pub layers_per_block: usize,
    pub class_count: usize,
}

/// One fully connected layer at the widths of a particular config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub block: usize,
    pub in_width: usize,
    pub out_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { input_dim: 16, block_max_widths: vec![32, 64, 128, 256], layers_per_block: 1, class_count: 4 }
    }
}

impl Architecture {
    pub fn new(input_dim: usize, block_max_widths: Vec<usize>, layers_per_block: usize, class_count: usize) -> Result<Self> {
        let arch = Architecture { input_dim, block_max_widths, layers_per_block, class_count };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.block_max_widths.is_empty() || self.block_max_widths.contains(&0) {
            return Err(Error::config("every block needs a width of at least 1"));
        }
        if self.layers_per_block == 0 {
            return Err(Error::config("layers_per_block must be at least 1"));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.block_max_widths.len()
    }

    pub fn layer_count(&self) -> usize {
        self.blocks() * self.layers_per_block
    }

    /// Narrowest legal width of a block: one eighth of its channels, rounded up.
    pub fn min_width(&self, block: usize) -> usize {
        self.block_max_widths[block].div_ceil(8)
    }

    pub fn width_range(&self, block: usize) -> (usize, usize) {
        (self.min_width(block), self.block_max_widths[block])
    }

    pub fn feature_max(&self) -> usize {
        *self.block_max_widths.last().expect("validated non-empty")
    }

    /// Layer shapes for a width vector, in forward order.
    pub fn layers(&self, widths: &[usize]) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.layer_count());
        let mut prev = self.input_dim;
        for (block, &w) in widths.iter().enumerate() {
            for _ in 0..self.layers_per_block {
                out.push(LayerShape { block, in_width: prev, out_width: w });
                prev = w;
            }
        }
        out
    }

    pub fn check_widths(&self, widths: &[usize]) -> Result<()> {
        if widths.len() != self.blocks() {
            return Err(Error::config(format!(
                "width config has {} blocks, architecture has {}",
                widths.len(),
                self.blocks()
            )));
        }
        for (b, &w) in widths.iter().enumerate() {
            let (lo, hi) = self.width_range(b);
            if w < lo || w > hi {
                return Err(Error::config(format!("block {b} width {w} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn config(&self, widths: Vec<usize>) -> Result<WidthConfig> {
        self.check_widths(&widths)?;
        let flops = self.flops_of(&widths);
        Ok(WidthConfig { widths, flops })
    }

    pub fn full_config(&self) -> WidthConfig {
        self.config(self.block_max_widths.clone()).expect("max widths are legal")
    }

    /// The 1/8-channel config.
    pub fn smallest_config(&self) -> WidthConfig {
        let widths = (0..self.blocks()).map(|b| self.min_width(b)).collect();
        self.config(widths).expect("min widths are legal")
    }

    /// Per-sample FLOPs: a multiply-add counts as 2, every layer contributes
    /// `2 * in * out`, and one deployment head adds `2 * K * features`.
    pub fn flops_of(&self, widths: &[usize]) -> f64 {
        let layers: usize = self.layers(widths).iter().map(|l| 2 * l.in_width * l.out_width).sum();
        let head = 2 * self.class_count * widths.last().copied().unwrap_or(0);
        (layers + head) as f64
    }

    pub fn full_flops(&self) -> f64 {
        self.flops_of(&self.block_max_widths)
    }
}

/// Active width per block. Built through [`Architecture::config`], which
/// validates the widths and derives `flops`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub widths: Vec<usize>,
    pub flops: f64,
}

impl WidthConfig {
    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    /// True when every block is at least as wide as in `other`.
    pub fn dominates(&self, other: &WidthConfig) -> bool {
        self.widths.len() == other.widths.len() && self.widths.iter().zip(&other.widths).all(|(a, b)| a >= b)
    }

    /// `8-16-32-64` style label used in reports.
    pub fn label(&self) -> String {
        self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }

    pub fn parse_label(label: &str) -> Result<Vec<usize>> {
        label
            .split('-')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::config(format!("bad width list `{label}`"))))
            .collect()
    }
}

impl fmt::Display for WidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_flops_by_hand() {
        let arch = Architecture::new(4, vec![8], 1, 2).unwrap();
        // 4*8 = 32 multiply-adds at 2 FLOPs each, plus the 8->2 head
        let layers: usize = arch.layers(&[8]).iter().map(|l| 2 * l.in_width * l.out_width).sum();
        assert_eq!(layers, 64);
        assert_eq!(arch.flops_of(&[8]), 64.0 + 2.0 * 16.0);
    }

    #[test]
    fn full_ratio_is_one_and_eighth_channels_is_about_one_64th() {
        let arch = Architecture::new(16, vec![64, 128, 256, 512], 2, 4).unwrap();
        let full = arch.full_config();
        assert_eq!(full.flops / arch.full_flops(), 1.0);
        let ratio = arch.smallest_config().flops / arch.full_flops();
        assert!((ratio * 64.0 - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn widening_any_block_increases_flops() {
        let arch = Architecture::new(16, vec![32, 64, 128, 256], 1, 4).unwrap();
        let base = arch.smallest_config();
        for b in 0..arch.blocks() {
            let mut w = base.widths.clone();
            w[b] += 1;
            assert!(arch.config(w).unwrap().flops > base.flops);
        }
    }

    #[test]
    fn illegal_configs_rejected() {
        let arch = Architecture::new(16, vec![32, 64], 1, 4).unwrap();
        assert!(arch.config(vec![3, 64]).is_err());
        assert!(arch.config(vec![33, 64]).is_err());
        assert!(arch.config(vec![32]).is_err());
        assert!(arch.config(vec![4, 8]).is_ok());
        assert!(Architecture::new(0, vec![8], 1, 2).is_err());
        assert!(Architecture::new(4, vec![8, 0], 1, 2).is_err());
        assert!(Architecture::new(4, vec![8], 0, 2).is_err());
    }

    #[test]
    fn label_round_trip() {
        let arch = Architecture::default();
        let c = arch.smallest_config();
        assert_eq!(c.label(), "4-8-16-32");
        assert_eq!(WidthConfig::parse_label(&c.label()).unwrap(), c.widths);
        assert!(WidthConfig::parse_label("4-x").is_err());
    }
}
