use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Number of resolution levels (three downsampling stages).
pub const LEVELS: usize = 4;

/// Architectural hyperparameters of the fusion network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels per input modality.
    pub in_channels: usize,
    /// Patch-embedding kernel and stride.
    pub patch: usize,
    /// Channels at the finest level; each downsampling stage doubles them.
    pub base_embed: usize,
    pub heads: [usize; LEVELS],
    pub blocks_per_level: usize,
    pub window: [usize; 3],
    /// Depth-wise kernel of the offset head.
    pub offset_kernel: usize,
    /// Hidden expansion of the per-token feed-forward sublayer.
    pub mlp_ratio: usize,
    /// Width of the two 3×3×3 convolutions in the fusion layer.
    pub fusion_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            patch: 2,
            base_embed: 24,
            heads: [3, 6, 12, 24],
            blocks_per_level: 1,
            window: [2, 2, 2],
            offset_kernel: 3,
            mlp_ratio: 4,
            fusion_hidden: 12,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            in_channels: 1,
            patch: 1,
            base_embed: 4,
            heads: [1, 1, 2, 2],
            blocks_per_level: 1,
            window: [2, 2, 2],
            offset_kernel: 3,
            mlp_ratio: 2,
            fusion_hidden: 4,
        }
    }

    pub fn level_channels(&self) -> [usize; LEVELS] {
        core::array::from_fn(|l| self.base_embed << l)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.patch == 0 || self.base_embed == 0 {
            return bad(format!(
                "in_channels {}, patch {}, base_embed {} must be positive",
                self.in_channels, self.patch, self.base_embed
            ));
        }
        if self.blocks_per_level == 0 || self.mlp_ratio == 0 || self.fusion_hidden == 0 {
            return bad("blocks_per_level, mlp_ratio and fusion_hidden must be positive".into());
        }
        if self.offset_kernel.is_multiple_of(2) {
            return bad(format!("offset_kernel {} must be odd", self.offset_kernel));
        }
        if self.window.contains(&0) {
            return bad(format!("window {:?} has a zero extent", self.window));
        }
        for (l, (&ch, &h)) in self.level_channels().iter().zip(&self.heads).enumerate() {
            if h == 0 || ch % h != 0 {
                return bad(format!("level {l}: {ch} channels not divisible by {h} heads"));
            }
        }
        Ok(())
    }

    /// Spatial extents of level `l` features for an input of `dims`.
    pub fn level_dims(&self, dims: [usize; 3], l: usize) -> [usize; 3] {
        core::array::from_fn(|a| (dims[a] / self.patch) >> l)
    }

    /// Checks that an input of `dims` survives patching, every downsampling
    /// stage and window partition at every level.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        for &e in &dims {
            let need = self.patch << (LEVELS - 1);
            if e % need != 0 {
                return Err(Error::Indivisible {
                    what: "input extent",
                    extent: e,
                    divisor: need,
                });
            }
        }
        for l in 0..LEVELS {
            let ld = self.level_dims(dims, l);
            for a in 0..3 {
                if !ld[a].is_multiple_of(self.window[a]) {
                    return Err(Error::Indivisible {
                        what: "window at level",
                        extent: ld[a],
                        divisor: self.window[a],
                    });
                }
            }
        }
        Ok(())
    }

    /// Flat `(key, value)` view, in the order used by checkpoints and config files.
    pub fn fields(&self) -> Vec<(&'static str, usize)> {
        let mut f = alloc::vec![
            ("in_channels", self.in_channels),
            ("patch", self.patch),
            ("base_embed", self.base_embed),
        ];
        for (i, &h) in self.heads.iter().enumerate() {
            f.push((["heads0", "heads1", "heads2", "heads3"][i], h));
        }
        f.push(("blocks_per_level", self.blocks_per_level));
        for (i, &w) in self.window.iter().enumerate() {
            f.push((["window_x", "window_y", "window_z"][i], w));
        }
        f.push(("offset_kernel", self.offset_kernel));
        f.push(("mlp_ratio", self.mlp_ratio));
        f.push(("fusion_hidden", self.fusion_hidden));
        f
    }

    /// Inverse of [`ModelConfig::fields`]; values must come in the same order.
    pub fn from_values(v: &[usize]) -> Result<Self> {
        if v.len() != Self::default().fields().len() {
            return Err(Error::InvalidConfig(format!(
                "expected 14 config values, got {}",
                v.len()
            )));
        }
        let cfg = Self {
            in_channels: v[0],
            patch: v[1],
            base_embed: v[2],
            heads: [v[3], v[4], v[5], v[6]],
            blocks_per_level: v[7],
            window: [v[8], v[9], v[10]],
            offset_kernel: v[11],
            mlp_ratio: v[12],
            fusion_hidden: v[13],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by its key name (see [`ModelConfig::fields`]); `heads`
    /// and `window` also accept comma-separated lists.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("{key}: `{s}` is not a non-negative integer")))
        };
        let list = |s: &str, n: usize| -> Result<Vec<usize>> {
            let v = s.split(',').map(parse).collect::<Result<Vec<_>>>()?;
            if v.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "{key}: expected {n} values, got {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        match key {
            "in_channels" => self.in_channels = parse(value)?,
            "patch" => self.patch = parse(value)?,
            "base_embed" => self.base_embed = parse(value)?,
            "heads" => self.heads.copy_from_slice(&list(value, LEVELS)?),
            "heads0" => self.heads[0] = parse(value)?,
            "heads1" => self.heads[1] = parse(value)?,
            "heads2" => self.heads[2] = parse(value)?,
            "heads3" => self.heads[3] = parse(value)?,
            "blocks_per_level" => self.blocks_per_level = parse(value)?,
            "window" => self.window.copy_from_slice(&list(value, 3)?),
            "window_x" => self.window[0] = parse(value)?,
            "window_y" => self.window[1] = parse(value)?,
            "window_z" => self.window[2] = parse(value)?,
            "offset_kernel" => self.offset_kernel = parse(value)?,
            "mlp_ratio" => self.mlp_ratio = parse(value)?,
            "fusion_hidden" => self.fusion_hidden = parse(value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}
