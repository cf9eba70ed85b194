use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub blocks_per_level: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    pub base_channels: usize,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: f64,
    pub refinement_blocks: usize,
    pub num_exposures: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            blocks_per_level: vec![4, 6, 6, 8],
            heads_per_level: vec![1, 2, 4, 8],
            base_channels: 48,
            window: 8,
            shift: 4,
            mlp_ratio: 2.0,
            refinement_blocks: 4,
            num_exposures: 3,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale configuration used for the training smoke test.
    pub fn tiny() -> Self {
        Self { base_channels: 8, blocks_per_level: vec![1, 1, 1, 1], refinement_blocks: 1, ..Self::default() }
    }

    /// Smallest configuration that still exercises every layer type, including
    /// shifted windows; sized for finite-difference checks on 16x16 inputs.
    pub fn grad_check() -> Self {
        Self {
            base_channels: 2,
            blocks_per_level: vec![2, 1, 1, 1],
            window: 2,
            shift: 1,
            refinement_blocks: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, "levels must be at least 1");
        ensure!(
            self.blocks_per_level.len() == self.levels,
            "blocks_per_level has {} entries for {} levels",
            self.blocks_per_level.len(),
            self.levels
        );
        ensure!(
            self.heads_per_level.len() == self.levels,
            "heads_per_level has {} entries for {} levels",
            self.heads_per_level.len(),
            self.levels
        );
        ensure!(self.base_channels >= 2 && self.base_channels % 2 == 0, "base_channels must be even and >= 2");
        ensure!(self.window >= 1, "window must be positive");
        ensure!(self.shift < self.window, "shift {} must be smaller than window {}", self.shift, self.window);
        ensure!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        ensure!(self.num_exposures >= 1, "num_exposures must be positive");
        for l in 0..self.levels {
            let (c, h) = (self.channels(l), self.heads_per_level[l]);
            ensure!(h >= 1 && c % h == 0, "level {l}: {c} channels not divisible by {h} heads");
        }
        Ok(())
    }

    /// Feature width `2^l · C` at level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        ((channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Inputs are reflect-padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        (1 << (self.levels - 1)) * self.window
    }

    /// `key = value` rendering, stable and parseable by [`Self::from_map`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("levels".into(), self.levels.to_string()),
            ("blocks_per_level".into(), list(&self.blocks_per_level)),
            ("heads_per_level".into(), list(&self.heads_per_level)),
            ("base_channels".into(), self.base_channels.to_string()),
            ("window".into(), self.window.to_string()),
            ("shift".into(), self.shift.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("refinement_blocks".into(), self.refinement_blocks.to_string()),
            ("num_exposures".into(), self.num_exposures.to_string()),
        ]
    }

    /// Applies any recognised keys from `map` on top of `self`.
    pub fn apply_map(mut self, map: &BTreeMap<String, String>) -> Result<Self> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Contract(format!("{k}: cannot parse {v:?}")))
        }
        fn list(k: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(k, x)).collect()
        }
        for (k, v) in map {
            match k.as_str() {
                "levels" => self.levels = num(k, v)?,
                "blocks_per_level" => self.blocks_per_level = list(k, v)?,
                "heads_per_level" => self.heads_per_level = list(k, v)?,
                "base_channels" => self.base_channels = num(k, v)?,
                "window" => self.window = num(k, v)?,
                "shift" => self.shift = num(k, v)?,
                "mlp_ratio" => self.mlp_ratio = num(k, v)?,
                "refinement_blocks" => self.refinement_blocks = num(k, v)?,
                "num_exposures" => self.num_exposures = num(k, v)?,
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = Self::default().apply_map(map)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [NetworkConfig::default(), NetworkConfig::tiny(), NetworkConfig::grad_check()] {
            c.validate().unwrap();
        }
        assert_eq!(NetworkConfig::default().pad_multiple(), 64);
    }

    #[test]
    fn invalid_configs_name_the_invariant() {
        let c = NetworkConfig { heads_per_level: vec![1, 2, 4, 5], ..Default::default() };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("level 3"), "{e}");
        let c = NetworkConfig { shift: 8, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let c = NetworkConfig::grad_check();
        let map: BTreeMap<_, _> = c.to_pairs().into_iter().collect();
        assert_eq!(NetworkConfig::from_map(&map).unwrap(), c);
    }
}
