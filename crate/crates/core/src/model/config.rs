use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How raw input becomes a sequence of hidden vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrontEnd {
    /// Token ids looked up in a learned table.
    Tokens { vocab_size: usize },
    /// Non-overlapping `patch_frames × patch_mels` tiles of a frames × mel matrix.
    Patches {
        mel_bins: usize,
        patch_frames: usize,
        patch_mels: usize,
    },
}

impl FrontEnd {
    pub fn patch_dim(&self) -> Option<usize> {
        match self {
            FrontEnd::Patches {
                patch_frames,
                patch_mels,
                ..
            } => Some(patch_frames * patch_mels),
            FrontEnd::Tokens { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub front_end: FrontEnd,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale token encoder: 4 layers, width 32, 2 heads.
    pub fn token_default(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            max_seq_len,
            front_end: FrontEnd::Tokens { vocab_size },
            dropout: 0.1,
        }
    }

    /// Desk-scale audio encoder over 8 mel bins with 2×2 patches.
    pub fn patch_default(max_seq_len: usize) -> Self {
        Self {
            front_end: FrontEnd::Patches {
                mel_bins: 8,
                patch_frames: 2,
                patch_mels: 2,
            },
            ..Self::token_default(1, max_seq_len)
        }
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.front_end {
            FrontEnd::Tokens { vocab_size: 0 } => Err(Error::Config("vocab_size must be positive".into())),
            FrontEnd::Patches {
                mel_bins,
                patch_frames,
                patch_mels,
            } if mel_bins == 0 || patch_frames == 0 || patch_mels == 0 || mel_bins % patch_mels != 0 => {
                Err(Error::Config(format!(
                    "patch geometry {patch_frames}x{patch_mels} incompatible with {mel_bins} mel bins"
                )))
            }
            _ => Ok(()),
        }
    }
}
