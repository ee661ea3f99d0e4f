//! The toy stand-in for a pretrained text-to-image model: noise schedule,
//! conditional denoiser, training with optional prior preservation, guided
//! sampling, and noise-and-denoise translation.

pub mod denoiser;
pub mod sampling;
pub mod schedule;
pub mod train;

pub use denoiser::{Denoise, DenoiserModel};
pub use sampling::{cfg_denoise, ddim_ladder, ddim_reverse, sample, sdedit_translate};
pub use schedule::{make_schedule, q_sample, DiffusionSchedule};
pub use train::{
    diffusion_loss, draw_batch, prior_preservation_step, train_step, EmbeddingFreeze, TrainDraw,
    TrainItem,
};

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng;

/// Training lineage of a denoiser checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lineage {
    Pretrained,
    Partial,
    Full,
    Multiview,
}

impl Lineage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Lineage::Pretrained => "pretrained",
            Lineage::Partial => "partial",
            Lineage::Full => "full",
            Lineage::Multiview => "multiview",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Lineage::Pretrained),
            "partial" => Ok(Lineage::Partial),
            "full" => Ok(Lineage::Full),
            "multiview" => Ok(Lineage::Multiview),
            other => Err(Error::State(format!("unknown lineage {other:?}"))),
        }
    }

    /// Allowed finetuning transitions: the partial and full checkpoints both
    /// branch off the pretrained model; multi-view finetuning continues from
    /// the partial checkpoint only.
    pub fn can_finetune_to(&self, to: Lineage) -> bool {
        matches!(
            (self, to),
            (Lineage::Pretrained, Lineage::Partial)
                | (Lineage::Pretrained, Lineage::Full)
                | (Lineage::Partial, Lineage::Multiview)
        )
    }
}

/// Denoiser parameters tagged with their training provenance.
#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint {
    pub model: DenoiserModel,
    pub lineage: Lineage,
    pub steps_trained: u64,
}

impl DenoiserCheckpoint {
    pub fn save(&self, path: &Path, config: &Config) -> Result<()> {
        Checkpoint::from_params(
            "denoiser",
            self.lineage.as_str(),
            self.steps_trained,
            &config.hash(),
            &self.model.params,
        )
        .save(path)
    }

    pub fn load(path: &Path, config: &Config) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.header.kind != "denoiser" {
            return Err(Error::State(format!(
                "expected a denoiser checkpoint, found kind {:?}",
                ck.header.kind
            )));
        }
        let lineage = Lineage::parse(&ck.header.lineage)?;
        let mut model = DenoiserModel::init(config, &mut rng::stream(0, "denoiser-shape"));
        ck.load_into(&mut model.params)?;
        Ok(DenoiserCheckpoint { model, lineage, steps_trained: ck.header.steps_trained })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_transitions_are_restricted() {
        use Lineage::*;
        assert!(Pretrained.can_finetune_to(Partial));
        assert!(Pretrained.can_finetune_to(Full));
        assert!(Partial.can_finetune_to(Multiview));
        assert!(!Full.can_finetune_to(Multiview));
        assert!(!Partial.can_finetune_to(Full));
        assert!(!Multiview.can_finetune_to(Partial));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_lineage_and_weights() {
        let mut cfg = Config::new();
        cfg.diffusion.resolution = 8;
        cfg.diffusion.base_channels = 4;
        let model = DenoiserModel::init(&cfg, &mut rng::stream(1, "ckpt-test"));
        let ck = DenoiserCheckpoint { model, lineage: Lineage::Partial, steps_trained: 150 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        ck.save(&path, &cfg).unwrap();
        let back = DenoiserCheckpoint::load(&path, &cfg).unwrap();
        assert_eq!(back.lineage, Lineage::Partial);
        assert_eq!(back.steps_trained, 150);
        for (a, b) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a.1.data(), b.1.data());
        }
    }
}
