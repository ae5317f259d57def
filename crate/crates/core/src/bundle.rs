//! On-disk set of checkpoints making up a deployable pipeline.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::defense::{AdvDetector, DefenseConfig, DndPipeline};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, SequenceDetector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPaths {
    pub registry: Vec<PathBuf>,
    pub ae: PathBuf,
    pub vae: PathBuf,
    pub adv_detector: PathBuf,
    pub decoy: PathBuf,
    pub sequence_detector: PathBuf,
}

impl CheckpointPaths {
    /// Conventional file names inside `dir` for an `n`-model registry.
    pub fn in_dir(dir: impl AsRef<Path>, n: usize) -> Self {
        let dir = dir.as_ref();
        CheckpointPaths {
            registry: (0..n)
                .map(|i| dir.join(format!("registry_{i}.dndw")))
                .collect(),
            ae: dir.join("ae.dndw"),
            vae: dir.join("vae.dndw"),
            adv_detector: dir.join("adv_detector.dndw"),
            decoy: dir.join("decoy.dndw"),
            sequence_detector: dir.join("sequence_detector.dndw"),
        }
    }

    /// Relative paths are taken relative to `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        CheckpointPaths {
            registry: self.registry.iter().map(r).collect(),
            ae: r(&self.ae),
            vae: r(&self.vae),
            adv_detector: r(&self.adv_detector),
            decoy: r(&self.decoy),
            sequence_detector: r(&self.sequence_detector),
        }
    }

    fn all(&self) -> impl Iterator<Item = &PathBuf> {
        self.registry.iter().chain([
            &self.ae,
            &self.vae,
            &self.adv_detector,
            &self.decoy,
            &self.sequence_detector,
        ])
    }

    /// Every path must exist before anything is parsed.
    pub fn check_exist(&self) -> Result<()> {
        if self.registry.is_empty() {
            return Err(Error::Validation(
                "checkpoint registry list is empty".into(),
            ));
        }
        for p in self.all() {
            if !p.is_file() {
                return Err(Error::Validation(format!(
                    "checkpoint not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load(&self, cfg: DefenseConfig) -> Result<(DndPipeline, SequenceDetector)> {
        self.check_exist()?;
        let models = self
            .registry
            .iter()
            .map(|p| load_checkpoint(p)?.into_classifier())
            .collect::<Result<Vec<_>>>()?;
        let pipeline = DndPipeline {
            models: Arc::new(models),
            ae: load_checkpoint(&self.ae)?.into_autoencoder()?,
            vae: load_checkpoint(&self.vae)?.into_vae()?,
            detector: AdvDetector {
                model: load_checkpoint(&self.adv_detector)?.into_classifier()?,
            },
            decoy: load_checkpoint(&self.decoy)?.into_classifier()?,
            cfg,
        };
        let seq = load_checkpoint(&self.sequence_detector)?.into_sequence_detector()?;
        Ok((pipeline, seq))
    }
}

/// Writes every component of `pipeline` under `dir`.
pub fn save_pipeline(
    pipeline: &DndPipeline,
    seq: &SequenceDetector,
    dir: impl AsRef<Path>,
) -> Result<CheckpointPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CheckpointPaths::in_dir(dir, pipeline.models.len());
    for (m, p) in pipeline.models.iter().zip(&paths.registry) {
        save_checkpoint(p, &Checkpoint::Classifier(m.clone()))?;
    }
    save_checkpoint(
        &paths.ae,
        &Checkpoint::DenoisingAutoencoder(pipeline.ae.clone()),
    )?;
    save_checkpoint(&paths.vae, &Checkpoint::Vae(pipeline.vae.clone()))?;
    save_checkpoint(
        &paths.adv_detector,
        &Checkpoint::Classifier(pipeline.detector.model.clone()),
    )?;
    save_checkpoint(
        &paths.decoy,
        &Checkpoint::Classifier(pipeline.decoy.clone()),
    )?;
    save_checkpoint(
        &paths.sequence_detector,
        &Checkpoint::SequenceDetector(seq.clone()),
    )?;
    Ok(paths)
}
