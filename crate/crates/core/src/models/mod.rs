//! The six fusion classifiers.
//!
//! Every architecture takes a batch of `side x side x 3` sign images and a
//! batch of MFCC vectors and produces five-way logits
//! (`go`, `right`, `left`, `stop`, `anomaly`). Layer tables are listed in the
//! README; [`ModelSpec::paper`] gives the full-size widths and
//! [`ModelSpec::tiny`] a shrunken variant with the same topology for
//! gradient checks and quick tests.

mod checkpoint;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{ForwardOptions, Heads, Logits, Model};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classes::N_TARGETS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Baseline,
    Attention,
    Block,
    DeconvCbp,
    Xflow,
    Bnn,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Baseline,
        Arch::Attention,
        Arch::Block,
        Arch::DeconvCbp,
        Arch::Xflow,
        Arch::Bnn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::Attention => "attention",
            Arch::Block => "block",
            Arch::DeconvCbp => "deconv_cbp",
            Arch::Xflow => "xflow",
            Arch::Bnn => "bnn",
        }
    }

    /// Display name used in reports.
    pub fn network_name(self) -> &'static str {
        match self {
            Arch::Baseline => "CNN_MLP_Baseline",
            Arch::Attention => "CNN_Attention_MLP",
            Arch::Block => "CNN_Block_Attention_MLP",
            Arch::DeconvCbp => "Deconv_CBP",
            Arch::Xflow => "XFlow",
            Arch::Bnn => "BNN",
        }
    }

    /// Indices of the conv blocks followed by a CBAM module.
    pub(crate) fn cbam_after(self, n_blocks: usize) -> Vec<usize> {
        match self {
            Arch::Attention => vec![1, 2],
            Arch::Block => vec![n_blocks - 1],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected one of baseline, attention, block, deconv_cbp, xflow, bnn)")))
    }
}

/// Architecture plus the widths of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub image_side: usize,
    pub audio_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    /// Filters of each 3x3 conv block (each block halves the spatial size).
    pub conv_widths: Vec<usize>,
    /// Width of the dense layer closing the image branch (unused by deconv_cbp).
    pub image_dense: usize,
    pub audio_widths: Vec<usize>,
    pub head: usize,
    pub cbp_dim: usize,
    pub cbam_ratio: usize,
    pub cbam_kernel: usize,
}

impl ModelSpec {
    pub fn paper(arch: Arch) -> Self {
        let (conv_widths, audio_widths) = match arch {
            Arch::Block => (vec![32, 64], vec![512, 256]),
            Arch::DeconvCbp => (vec![32, 64, 64], vec![256]),
            _ => (vec![32, 64, 128], vec![512, 256]),
        };
        ModelSpec {
            arch,
            image_side: 64,
            audio_dim: 1000,
            n_classes: N_TARGETS,
            dropout: 0.25,
            conv_widths,
            image_dense: 256,
            audio_widths,
            head: 128,
            cbp_dim: 1024,
            cbam_ratio: 8,
            cbam_kernel: 7,
        }
    }

    /// Same topology on 16x16 images and 20-dimensional audio.
    pub fn tiny(arch: Arch) -> Self {
        let (conv_widths, audio_widths) = match arch {
            Arch::Block => (vec![4, 8], vec![10, 8]),
            Arch::DeconvCbp => (vec![4, 8, 8], vec![8]),
            _ => (vec![4, 8, 8], vec![10, 8]),
        };
        ModelSpec {
            arch,
            image_side: 16,
            audio_dim: 20,
            n_classes: N_TARGETS,
            dropout: 0.25,
            conv_widths,
            image_dense: 6,
            audio_widths,
            head: 6,
            cbp_dim: 16,
            cbam_ratio: 4,
            cbam_kernel: 3,
        }
    }

    /// Full-size inputs (64x64 images, 1000-dimensional audio) with narrow
    /// layers, for quick end-to-end runs.
    pub fn compact(arch: Arch) -> Self {
        let (conv_widths, audio_widths) = match arch {
            Arch::Block => (vec![8, 16], vec![64, 32]),
            Arch::DeconvCbp => (vec![8, 16, 16], vec![32]),
            _ => (vec![8, 16, 16], vec![64, 32]),
        };
        ModelSpec {
            arch,
            image_side: 64,
            audio_dim: 1000,
            n_classes: N_TARGETS,
            dropout: 0.25,
            conv_widths,
            image_dense: 32,
            audio_widths,
            head: 32,
            cbp_dim: 256,
            cbam_ratio: 4,
            cbam_kernel: 7,
        }
    }

    pub fn paper_arch(arch: &str) -> Result<Self> {
        Ok(Self::paper(arch.parse()?))
    }

    /// Spatial side of the image map after `blocks` conv blocks.
    pub(crate) fn side_after(&self, blocks: usize) -> usize {
        self.image_side >> blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes != N_TARGETS {
            return bad(format!("n_classes must be {N_TARGETS}, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.conv_widths.is_empty() || self.audio_widths.is_empty() {
            return bad("conv_widths and audio_widths must be nonempty".into());
        }
        let blocks = self.conv_widths.len();
        if self.image_side == 0 || self.image_side % (1 << blocks) != 0 {
            return bad(format!("image_side {} is not divisible by 2^{blocks}", self.image_side));
        }
        if self.audio_dim == 0 || self.head == 0 || self.image_dense == 0 || self.cbam_kernel % 2 == 0 {
            return bad("layer widths must be positive and cbam_kernel odd".into());
        }
        for b in self.arch.cbam_after(blocks) {
            let Some(&c) = self.conv_widths.get(b) else {
                return bad(format!("{} needs at least {} conv blocks", self.arch, b + 1));
            };
            if self.cbam_ratio == 0 || c % self.cbam_ratio != 0 {
                return bad(format!("{c} channels not divisible by CBAM ratio {}", self.cbam_ratio));
            }
        }
        match self.arch {
            Arch::DeconvCbp => {
                if self.cbp_dim == 0 {
                    return bad("cbp_dim must be positive".into());
                }
                self.seed_grid(blocks, self.audio_widths[self.audio_widths.len() - 1])?;
            }
            Arch::Xflow => {
                if blocks < 3 || self.audio_widths.len() < 2 {
                    return bad("xflow needs three conv blocks and two audio layers".into());
                }
                self.seed_grid(2, self.audio_widths[1])?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Seed grid `(s, s, c)` for reshaping an audio vector of length `n`
    /// before deconvolving it to the image map after `blocks` blocks: half
    /// the side for one block of depth, a quarter for two.
    pub(crate) fn seed_grid(&self, blocks: usize, n: usize) -> Result<(usize, usize, usize)> {
        let target = self.side_after(blocks);
        let s = match self.arch {
            Arch::Xflow => target / 4,
            _ => target / 2,
        };
        if s == 0 || n % (s * s) != 0 {
            return Err(Error::Config(format!(
                "audio width {n} cannot be reshaped to a {s}x{s} seed grid"
            )));
        }
        Ok((s, s, n / (s * s)))
    }
}
