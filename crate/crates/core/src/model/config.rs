use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Internal layer order of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum BlockOrder {
    /// Mamba layers → feed-forward → one self-attention layer.
    #[default]
    #[serde(rename = "MFA")]
    Mfa,
    /// Self-attention → feed-forward → Mamba layers.
    #[serde(rename = "AFM")]
    Afm,
    /// Feed-forward → Mamba layers → self-attention.
    #[serde(rename = "FMA")]
    Fma,
    /// Mamba layers → feed-forward → two self-attention layers.
    #[serde(rename = "MFA-2SA")]
    Mfa2Sa,
    /// MFA with every Mamba layer replaced by self-attention; the
    /// quadratic-cost comparator used by the profiler.
    #[serde(rename = "ATTN-ONLY")]
    AttentionOnly,
}

impl BlockOrder {
    /// The block orders compared by the ablation harness.
    pub const ALL: [BlockOrder; 4] = [
        BlockOrder::Mfa,
        BlockOrder::Afm,
        BlockOrder::Fma,
        BlockOrder::Mfa2Sa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockOrder::Mfa => "MFA",
            BlockOrder::Afm => "AFM",
            BlockOrder::Fma => "FMA",
            BlockOrder::Mfa2Sa => "MFA-2SA",
            BlockOrder::AttentionOnly => "ATTN-ONLY",
        }
    }

    fn code(self) -> u8 {
        match self {
            BlockOrder::Mfa => 0,
            BlockOrder::Afm => 1,
            BlockOrder::Fma => 2,
            BlockOrder::Mfa2Sa => 3,
            BlockOrder::AttentionOnly => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL
            .into_iter()
            .chain([BlockOrder::AttentionOnly])
            .find(|o| o.code() == code)
    }

    /// Stage sequence of one block with `n_mamba` Mamba layers.
    pub fn stages(self, n_mamba: usize) -> Vec<Stage> {
        let mamba = (0..n_mamba).map(Stage::Mamba);
        match self {
            BlockOrder::Mfa => mamba
                .chain([Stage::FeedForward, Stage::Attention(0)])
                .collect(),
            BlockOrder::Afm => [Stage::Attention(0), Stage::FeedForward]
                .into_iter()
                .chain(mamba)
                .collect(),
            BlockOrder::Fma => std::iter::once(Stage::FeedForward)
                .chain(mamba)
                .chain([Stage::Attention(0)])
                .collect(),
            BlockOrder::Mfa2Sa => mamba
                .chain([Stage::FeedForward, Stage::Attention(0), Stage::Attention(1)])
                .collect(),
            BlockOrder::AttentionOnly => (0..n_mamba)
                .map(Stage::Attention)
                .chain([Stage::FeedForward, Stage::Attention(n_mamba)])
                .collect(),
        }
    }

    /// Number of self-attention layers in a block with `n_mamba` Mamba slots.
    pub fn attention_layers(self, n_mamba: usize) -> usize {
        match self {
            BlockOrder::Mfa2Sa => 2,
            BlockOrder::AttentionOnly => n_mamba + 1,
            _ => 1,
        }
    }

    /// Number of Mamba layers in a block with `n_mamba` Mamba slots.
    pub fn mamba_layers(self, n_mamba: usize) -> usize {
        match self {
            BlockOrder::AttentionOnly => 0,
            _ => n_mamba,
        }
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockOrder {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .chain([BlockOrder::AttentionOnly])
            .find(|o| o.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "unknown block order '{s}' (expected MFA, AFM, FMA, MFA-2SA or ATTN-ONLY)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mamba(usize),
    FeedForward,
    Attention(usize),
}

/// Position signal added to the token embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    /// Position comes only from the causal convolution and the scan order.
    #[default]
    None,
    /// Fixed sine/cosine table over the token axis; no parameters.
    Sinusoidal,
}

impl Positional {
    fn code(self) -> u8 {
        match self {
            Positional::None => 0,
            Positional::Sinusoidal => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        [Positional::None, Positional::Sinusoidal]
            .into_iter()
            .find(|p| p.code() == code)
    }
}

/// Dimensions of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfaConfig {
    /// Full vocabulary size including PAD and MASK; the head predicts `vocab_size - 1` classes.
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// Mamba expansion width (2 · d_model unless overridden).
    pub d_expand: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub n_mamba_per_block: usize,
    pub down_kernel: usize,
    pub down_stride: usize,
    /// Width of the causal convolution inside each Mamba layer.
    pub conv_kernel: usize,
    pub diffusion_steps: usize,
    pub order: BlockOrder,
    /// Token whose all-PAD windows are hidden from attention keys.
    pub pad_token: Option<usize>,
    pub positional: Positional,
}

impl Default for MfaConfig {
    fn default() -> Self {
        Self::desk(275, 64)
    }
}

impl MfaConfig {
    /// Desk-scale model: D=64, N=8, 2 blocks of 2 Mamba layers.
    pub fn desk(vocab_size: usize, diffusion_steps: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            d_state: 8,
            d_expand: 128,
            n_heads: 4,
            n_blocks: 2,
            n_mamba_per_block: 2,
            down_kernel: 4,
            down_stride: 4,
            conv_kernel: 4,
            diffusion_steps,
            order: BlockOrder::Mfa,
            pad_token: vocab_size.checked_sub(2),
            positional: Positional::Sinusoidal,
        }
    }

    /// Full-size model: D=512, 8 heads, 8 blocks.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            d_state: 16,
            d_expand: 1024,
            n_heads: 8,
            n_blocks: 8,
            diffusion_steps: 1024,
            ..Self::desk(vocab_size, 1024)
        }
    }

    pub fn with_order(mut self, order: BlockOrder) -> Self {
        self.order = order;
        self
    }

    pub fn mask_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn num_classes(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 2 {
            return err(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_expand", self.d_expand),
            ("n_heads", self.n_heads),
            ("down_kernel", self.down_kernel),
            ("down_stride", self.down_stride),
            ("conv_kernel", self.conv_kernel),
            ("diffusion_steps", self.diffusion_steps),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if let Some(p) = self.pad_token {
            if p >= self.vocab_size - 1 {
                return err(format!("pad_token {p} must be a non-mask vocabulary index"));
            }
        }
        Ok(())
    }

    /// Sequence length the network actually runs on: at least one window and
    /// aligned so the strided convolution covers every position.
    pub fn padded_len(&self, len: usize) -> usize {
        let (k, s) = (self.down_kernel, self.down_stride);
        if len <= k {
            return k;
        }
        k + (len - k).div_ceil(s) * s
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) {
        for v in [
            self.vocab_size,
            self.d_model,
            self.d_state,
            self.d_expand,
            self.n_heads,
            self.n_blocks,
            self.n_mamba_per_block,
            self.down_kernel,
            self.down_stride,
            self.conv_kernel,
            self.diffusion_steps,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.order.code());
        let pad = self.pad_token.map_or(-1i64, |p| p as i64);
        out.extend_from_slice(&pad.to_le_bytes());
        out.push(self.positional.code());
    }

    pub(crate) fn decode_from(r: &mut super::checkpoint::Reader<'_>) -> Result<Self, ModelError> {
        let mut f = [0usize; 11];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let code = r.u8()?;
        let order = BlockOrder::from_code(code)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown block order code {code}")))?;
        let pad = r.i64()?;
        let code = r.u8()?;
        let positional = Positional::from_code(code)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown positional code {code}")))?;
        Ok(Self {
            vocab_size: f[0],
            d_model: f[1],
            d_state: f[2],
            d_expand: f[3],
            n_heads: f[4],
            n_blocks: f[5],
            n_mamba_per_block: f[6],
            down_kernel: f[7],
            down_stride: f[8],
            conv_kernel: f[9],
            diffusion_steps: f[10],
            order,
            pad_token: (pad >= 0).then_some(pad as usize),
            positional,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_parsing() {
        assert_eq!("mfa-2sa".parse::<BlockOrder>().unwrap(), BlockOrder::Mfa2Sa);
        assert_eq!("AFM".parse::<BlockOrder>().unwrap(), BlockOrder::Afm);
        assert!("MAF".parse::<BlockOrder>().is_err());
    }

    #[test]
    fn default_block_has_one_attention_layer() {
        let stages = BlockOrder::Mfa.stages(2);
        assert_eq!(
            stages,
            vec![
                Stage::Mamba(0),
                Stage::Mamba(1),
                Stage::FeedForward,
                Stage::Attention(0)
            ]
        );
        let attn = stages
            .iter()
            .filter(|s| matches!(s, Stage::Attention(_)))
            .count();
        assert_eq!(attn, 1);
    }

    #[test]
    fn stage_counts_match_declared_layers() {
        for order in BlockOrder::ALL
            .into_iter()
            .chain([BlockOrder::AttentionOnly])
        {
            for n in 1..4 {
                let st = order.stages(n);
                let attn = st
                    .iter()
                    .filter(|s| matches!(s, Stage::Attention(_)))
                    .count();
                let mamba = st.iter().filter(|s| matches!(s, Stage::Mamba(_))).count();
                assert_eq!(attn, order.attention_layers(n), "{order}");
                assert_eq!(mamba, order.mamba_layers(n), "{order}");
                assert_eq!(order.as_str().parse::<BlockOrder>().unwrap(), order);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = MfaConfig::desk(20, 8);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn padded_len_aligns_to_stride() {
        let c = MfaConfig::desk(20, 8);
        assert_eq!(c.padded_len(16), 16);
        assert_eq!(c.padded_len(17), 20);
        assert_eq!(c.padded_len(2), 4);
    }
}
