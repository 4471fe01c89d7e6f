//! Pipeline configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::assemble::AlignConfig;
use crate::backend::BackendsConfig;
use crate::collision::CollisionConfig;
use crate::error::{Error, Result};
use crate::render::RenderOptions;
use crate::restore::RestoreConfig;
use crate::segment::SegmentationConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scene: PathBuf,
    pub trajectory: PathBuf,
    /// Generator metadata for the mock backends; defaults to `oracle.json`
    /// next to the scene.
    pub oracle: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub decompose: bool,
    pub restore: bool,
    pub assemble: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            decompose: true,
            restore: true,
            assemble: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Added to every stage seed.
    pub seed: u64,
    /// World up; also used for plane classification, overriding
    /// `collision.ransac.up`.
    pub up: [f64; 3],
    pub backends: BackendsConfig,
    /// Options for the frames the backends see and for mask fusion.
    pub render: RenderOptions,
    pub agent: AgentConfig,
    pub segmentation: SegmentationConfig,
    pub restore: RestoreConfig,
    pub collision: CollisionConfig,
    #[serde(deserialize_with = "align_over_pipeline_defaults")]
    pub align: AlignConfig,
    pub stages: StageToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            up: [0.0, 1.0, 0.0],
            backends: BackendsConfig::default(),
            render: RenderOptions::default(),
            agent: AgentConfig::default(),
            segmentation: SegmentationConfig::default(),
            restore: RestoreConfig::default(),
            collision: CollisionConfig::default(),
            // the whole run has to fit a two-minute budget on one core
            align: AlignConfig {
                max_iterations: 20,
                ..Default::default()
            },
            stages: StageToggles::default(),
        }
    }
}

/// A partial `align` section overrides the pipeline's defaults, not the
/// library's (which allow more iterations).
fn align_over_pipeline_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<AlignConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(PipelineConfig::default().align).map_err(D::Error::custom)?;
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(D::Error::custom)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Interpret relative paths against `base` (the config file's directory).
    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.scene);
        fix(&mut self.paths.trajectory);
        fix(&mut self.paths.output);
        if let Some(o) = self.paths.oracle.as_mut() {
            fix(o);
        }
    }

    /// Parameter checks that need no file system.
    pub fn validate_parameters(&self) -> Result<()> {
        let up = nalgebra::Vector3::from(self.up);
        if !(up.norm() > 1e-9 && up.iter().all(|v| v.is_finite())) {
            return Err(Error::Config("up must be a nonzero vector".into()));
        }
        if self.paths.output.as_os_str().is_empty() {
            return Err(Error::Config("paths.output is not set".into()));
        }
        self.backends.validate()?;
        self.agent.validate()?;
        self.segmentation.validate()?;
        self.restore.validate()?;
        self.align.validate()?;
        if self.collision.samples == 0 || self.collision.target_faces < 4 {
            return Err(Error::Config("collision: need samples > 0 and target_faces >= 4".into()));
        }
        Ok(())
    }

    /// Full check for a run starting at the decompose stage: inputs must exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_parameters()?;
        for (key, p) in [("paths.scene", &self.paths.scene), ("paths.trajectory", &self.paths.trajectory)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{key} is not set")));
            }
            if !p.is_file() {
                return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
            }
        }
        if let Some(o) = self.oracle_path() {
            if self.needs_oracle() && !o.is_file() {
                return Err(Error::Config(format!(
                    "mock backends need {} (set paths.oracle or use http backends)",
                    o.display()
                )));
            }
        }
        Ok(())
    }

    pub fn oracle_path(&self) -> Option<PathBuf> {
        self.paths.oracle.clone().or_else(|| {
            self.paths
                .scene
                .parent()
                .map(|d| d.join("oracle.json"))
        })
    }

    pub fn needs_oracle(&self) -> bool {
        use crate::backend::BackendKind::Mock;
        let b = &self.backends;
        [&b.vlm, &b.segmenter, &b.depth].iter().any(|k| **k == Mock)
    }

    /// The configuration with the output directory blanked, so the same
    /// settings hash alike wherever they write.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        serde_json::to_value(&c).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.snapshot()).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn segmentation_effective(&self) -> SegmentationConfig {
        SegmentationConfig {
            seed: self.segmentation.seed.wrapping_add(self.seed),
            ..self.segmentation.clone()
        }
    }

    pub fn collision_effective(&self) -> CollisionConfig {
        let mut c = self.collision.clone();
        c.sampling.seed = c.sampling.seed.wrapping_add(self.seed);
        c.ransac.seed = c.ransac.seed.wrapping_add(self.seed);
        c.ransac.up = self.up;
        c
    }

    pub fn align_effective(&self) -> AlignConfig {
        AlignConfig {
            sample_seed: self.align.sample_seed.wrapping_add(self.seed),
            ..self.align.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.align.max_iterations, 20);
        let c: PipelineConfig = serde_json::from_str(r#"{"align": {"fd_step": 1e-3}}"#).unwrap();
        assert_eq!(c.align.max_iterations, 20);
        let partial: PipelineConfig = serde_json::from_str(r#"{"segmentation": {"tau": 0.6}}"#).unwrap();
        assert_eq!(partial.segmentation.tau, 0.6);
        assert_eq!(partial.segmentation.lambda, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sead": 3}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"agent": {"dedup": 0.5}}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"align": {"icp": {"yaws": 4}}}"#).is_err());
    }

    #[test]
    fn missing_scene_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let c = PipelineConfig {
            paths: Paths {
                scene: dir.path().join("nope.ply"),
                trajectory: dir.path().join("nope.json"),
                oracle: None,
                output: dir.path().join("out"),
            },
            ..Default::default()
        };
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("paths.scene"), "{e}");
    }

    #[test]
    fn hash_ignores_the_output_directory_only() {
        let mut a = PipelineConfig::default();
        let mut b = a.clone();
        a.paths.output = "x".into();
        b.paths.output = "y".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn both_thresholds_are_separate_keys() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"agent": {"segmenter_threshold": 0.3}, "segmentation": {"tau": 0.7}}"#).unwrap();
        assert_eq!(c.agent.segmenter_threshold, 0.3);
        assert_eq!(c.segmentation.tau, 0.7);
    }
}
