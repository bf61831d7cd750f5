//! Deterministic per-step batch producers for each training stage.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Stage, TrainConfig, TrainError};
use crate::model::ModelConfig;
use crate::packing::{
    pack_edit_uno, pack_pretrain_caption, pack_pretrain_edit, pack_pretrain_t2i, pack_t2i_uno, sample_prompt,
    MaskToggles, PackConfig, PackedSample,
};
use crate::seed;
use crate::worldgen::{read_manifest, sample_edit, sample_scene, EditPair, ManifestRecord, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub max_objects: usize,
    /// Share of edit samples in post-training batches.
    pub edit_fraction: f64,
    /// Stage-0 task shares; the remainder is text-to-image.
    pub pretrain_caption_fraction: f64,
    pub pretrain_edit_fraction: f64,
    /// Optional dataset manifest; scenes are drawn from it instead of sampled.
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_objects: 3,
            edit_fraction: 0.25,
            pretrain_caption_fraction: 0.4,
            pretrain_edit_fraction: 0.2,
            manifest: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(1..=3).contains(&self.max_objects) {
            return Err(format!("max_objects must be in 1..=3, got {}", self.max_objects));
        }
        if !unit(self.edit_fraction)
            || !unit(self.pretrain_caption_fraction)
            || !unit(self.pretrain_edit_fraction)
            || self.pretrain_caption_fraction + self.pretrain_edit_fraction > 1.0
        {
            return Err("task fractions must lie in [0,1] and the stage-0 shares must sum to at most 1".into());
        }
        Ok(())
    }
}

/// Produces the batch for a given step; must be a pure function of `(step, size)`.
pub trait DataStream: Sync {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<PackedSample>, TrainError>;
}

#[derive(Clone, Debug)]
pub enum SceneSource {
    Synthetic { max_objects: usize },
    Fixed { scenes: Vec<Scene>, edits: Vec<EditPair> },
}

impl SceneSource {
    pub fn from_config(cfg: &DataConfig) -> Result<Self, TrainError> {
        match &cfg.manifest {
            None => Ok(SceneSource::Synthetic { max_objects: cfg.max_objects }),
            Some(path) => {
                let records = read_manifest(path).map_err(|e| TrainError::Data(e.to_string()))?;
                let mut scenes = Vec::new();
                let mut edits = Vec::new();
                for r in records {
                    match r {
                        ManifestRecord::Scene { scene, .. } => scenes.push(scene),
                        ManifestRecord::Edit { edit, .. } => {
                            scenes.push(edit.source.clone());
                            edits.push(edit);
                        }
                    }
                }
                if scenes.is_empty() {
                    return Err(TrainError::Data(format!("manifest {} holds no scenes", path.display())));
                }
                Ok(SceneSource::Fixed { scenes, edits })
            }
        }
    }

    fn scene(&self, s: u64) -> Result<Scene, TrainError> {
        match self {
            SceneSource::Synthetic { max_objects } => {
                sample_scene(seed::derive_str(s, "scene"), *max_objects).map_err(|e| TrainError::Data(e.to_string()))
            }
            SceneSource::Fixed { scenes, .. } => {
                Ok(scenes[(seed::derive_str(s, "pick") % scenes.len() as u64) as usize].clone())
            }
        }
    }

    fn edit(&self, s: u64) -> Result<EditPair, TrainError> {
        if let SceneSource::Fixed { edits, .. } = self {
            if !edits.is_empty() {
                return Ok(edits[(seed::derive_str(s, "pick-edit") % edits.len() as u64) as usize].clone());
            }
        }
        let mut scene = self.scene(s)?;
        if scene.objects().len() == 9 {
            scene = Scene::empty();
        }
        sample_edit(&scene, seed::derive_str(s, "edit")).map_err(|e| TrainError::Data(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Caption,
    TextToImage,
    Edit,
}

/// Batch producer shared by all stages. Post-training stages draw the same
/// scenes, prompts, timesteps and noise for a given seed, so `uno` and `sft`
/// differ only in the packed layout.
#[derive(Clone, Debug)]
pub struct StageStream {
    pub stage: Stage,
    pub source: SceneSource,
    pub data: DataConfig,
    pub pack: PackConfig,
    pub toggles: MaskToggles,
    pub seed: u64,
}

impl StageStream {
    /// Stream for `cfg.stage` with packing derived from `cfg` and `model`.
    pub fn for_config(cfg: &TrainConfig, model: &ModelConfig, data: &DataConfig) -> Result<Self, TrainError> {
        Ok(StageStream {
            stage: cfg.stage,
            source: SceneSource::from_config(data)?,
            data: data.clone(),
            pack: cfg.pack_config(model),
            toggles: cfg.toggles,
            seed: cfg.seed,
        })
    }

    /// Seed of sample `i` in step `step`, always inside the training range.
    pub fn sample_seed(&self, step: usize, i: usize) -> u64 {
        seed::train_seed(seed::derive(seed::derive(seed::derive_str(self.seed, "data"), step as u64), i as u64))
    }

    fn task(&self, s: u64) -> Task {
        let u: f64 = seed::rng_for(s, "task").random();
        match self.stage {
            Stage::Pretrain => {
                if u < self.data.pretrain_caption_fraction {
                    Task::Caption
                } else if u < self.data.pretrain_caption_fraction + self.data.pretrain_edit_fraction {
                    Task::Edit
                } else {
                    Task::TextToImage
                }
            }
            Stage::Uno | Stage::Sft => {
                if u < self.data.edit_fraction {
                    Task::Edit
                } else {
                    Task::TextToImage
                }
            }
        }
    }

    pub fn sample(&self, s: u64) -> Result<PackedSample, TrainError> {
        let task = self.task(s);
        let pe = |e: crate::packing::PackError| TrainError::Data(e.to_string());
        match (self.stage, task) {
            (_, Task::Caption) => pack_pretrain_caption(&self.source.scene(s)?, s, &self.pack).map_err(pe),
            (Stage::Pretrain, Task::TextToImage) | (Stage::Sft, Task::TextToImage) => {
                let scene = self.source.scene(s)?;
                let prompt = sample_prompt(&scene, seed::derive_str(s, "prompt"));
                pack_pretrain_t2i(&prompt, &scene, s, &self.pack).map_err(pe)
            }
            (Stage::Uno, Task::TextToImage) => {
                let scene = self.source.scene(s)?;
                let prompt = sample_prompt(&scene, seed::derive_str(s, "prompt"));
                pack_t2i_uno(&prompt, &scene, s, &self.pack, &self.toggles).map_err(pe)
            }
            (Stage::Pretrain, Task::Edit) | (Stage::Sft, Task::Edit) => {
                pack_pretrain_edit(&self.source.edit(s)?, s, &self.pack).map_err(pe)
            }
            (Stage::Uno, Task::Edit) => pack_edit_uno(&self.source.edit(s)?, s, &self.pack, &self.toggles).map_err(pe),
        }
    }
}

impl DataStream for StageStream {
    fn batch(&self, step: usize, size: usize) -> Result<Vec<PackedSample>, TrainError> {
        (0..size).map(|i| self.sample(self.sample_seed(step, i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::SegmentKind;

    fn stream(stage: Stage) -> StageStream {
        StageStream {
            stage,
            source: SceneSource::Synthetic { max_objects: 3 },
            data: DataConfig::default(),
            pack: PackConfig::default(),
            toggles: MaskToggles::default(),
            seed: 17,
        }
    }

    #[test]
    fn batches_are_pure_functions_of_step() {
        let s = stream(Stage::Pretrain);
        let a = s.batch(3, 8).unwrap();
        let b = s.batch(3, 8).unwrap();
        assert_eq!(a.iter().map(|x| x.seed).collect::<Vec<_>>(), b.iter().map(|x| x.seed).collect::<Vec<_>>());
        assert_eq!(a[0].token_ids, b[0].token_ids);
        assert!(a.iter().all(|x| !seed::is_eval_seed(x.seed)));
    }

    #[test]
    fn uno_and_sft_share_noise_and_timesteps() {
        let (u, f) = (stream(Stage::Uno), stream(Stage::Sft));
        for (a, b) in u.batch(5, 16).unwrap().iter().zip(f.batch(5, 16).unwrap().iter()) {
            assert_eq!(a.t(), b.t());
            assert_eq!(a.gen_tokens, b.gen_tokens);
            assert_eq!(a.velocity_target, b.velocity_target);
            assert!(a.layout.find(SegmentKind::Metaquery).is_some());
            assert!(b.layout.find(SegmentKind::Metaquery).is_none());
        }
    }

    #[test]
    fn pretrain_mix_follows_fractions() {
        let s = stream(Stage::Pretrain);
        let batch = s.batch(0, 400).unwrap();
        let caps = batch.iter().filter(|x| x.layout.find(SegmentKind::GenImage).is_none()).count();
        let edits = batch.iter().filter(|x| x.layout.find(SegmentKind::UndImage).is_some() && x.layout.find(SegmentKind::GenImage).is_some()).count();
        assert!((caps as f64 / 400.0 - 0.4).abs() < 0.08, "{caps}");
        assert!((edits as f64 / 400.0 - 0.2).abs() < 0.07, "{edits}");
    }
}
