use std::str::FromStr;

use crate::error::{Error, Result};

/// Variance stabilizer added inside every group norm.
pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Two-level, 8-channel networks for CPU runs on 16×16 frames.
    Desk,
    P64,
    P128,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "64" => Ok(Self::P64),
            "128" => Ok(Self::P128),
            other => Err(Error::invalid(format!("profile must be desk, 64 or 128, got `{other}`"))),
        }
    }
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::P64 => "64",
            Self::P128 => "128",
        }
    }

    /// Frame side length the profile is meant for.
    pub fn frame_size(self) -> usize {
        match self {
            Self::Desk => 16,
            Self::P64 => 64,
            Self::P128 => 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channel_dim: usize,
    pub denoise_multipliers: Vec<usize>,
    pub transform_multipliers: Vec<usize>,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub gru_kernel: usize,
    pub resblock_kernel: usize,
    pub frame_channels: usize,
    /// Length of the sinusoidal step encoding fed to each residual block.
    pub pe_dim: usize,
}

impl BlockConfig {
    pub fn profile(p: Profile, frame_channels: usize) -> Self {
        let (channel_dim, denoise, transform) = match p {
            Profile::Desk => (8, vec![1, 2], vec![1, 2]),
            Profile::P64 => (48, vec![1, 2, 4, 8], vec![1, 2, 2, 4]),
            Profile::P128 => (64, vec![1, 1, 2, 2, 4, 4], vec![1, 2, 3, 4]),
        };
        Self {
            channel_dim,
            denoise_multipliers: denoise,
            transform_multipliers: transform,
            attn_heads: 4,
            attn_head_dim: 16,
            gru_kernel: 3,
            resblock_kernel: 3,
            frame_channels,
            pe_dim: 4 * channel_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("block config: {m}")));
        if self.channel_dim == 0 || self.frame_channels == 0 {
            return bad("channel counts must be positive");
        }
        for (name, m) in [("denoise", &self.denoise_multipliers), ("transform", &self.transform_multipliers)] {
            if m.is_empty() || m.contains(&0) {
                return bad(&format!("{name} multipliers must be nonempty and >= 1"));
            }
        }
        if self.attn_heads == 0 || self.attn_head_dim == 0 {
            return bad("attention heads and head dim must be positive");
        }
        if self.gru_kernel.is_multiple_of(2) || self.resblock_kernel.is_multiple_of(2) {
            return bad("kernels must be odd to preserve spatial size");
        }
        if self.pe_dim < 2 || !self.pe_dim.is_multiple_of(2) {
            return bad("pe_dim must be even and >= 2");
        }
        Ok(())
    }

    /// Frames must be divisible by `2^(L-1)` for both U-Nets.
    pub fn check_frame(&self, frame_shape: &[usize]) -> Result<()> {
        let &[c, h, w] = frame_shape else {
            return Err(Error::invalid(format!("frame shape must be [C, H, W], got {frame_shape:?}")));
        };
        if c != self.frame_channels {
            return Err(Error::invalid(format!("frame has {c} channels, config expects {}", self.frame_channels)));
        }
        let levels = self.denoise_multipliers.len().max(self.transform_multipliers.len());
        let div = 1usize << (levels - 1);
        if h % div != 0 || w % div != 0 || h < div || w < div {
            return Err(Error::invalid(format!("frame {h}x{w} is not divisible by 2^{} = {div}", levels - 1)));
        }
        Ok(())
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub(crate) fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap()
}
