//! The full pipeline: voxelize → detect → refine → per-point masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{decode_proposals, BackboneOutput, Detector, DetectorConfig, Proposal};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::refiner::{InstanceMask, Refiner, RefinerConfig};
use crate::scene::PointCloud;
use crate::voxel::{voxelize, Featurizer, GeometricFeaturizer, SparseGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub refiner: RefinerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.refiner.validate()?;
        if self.detector.in_channels != GeometricFeaturizer.channels() {
            return Err(Error::Config(format!(
                "detector in_channels must be {} for geometric features",
                GeometricFeaturizer.channels()
            )));
        }
        Ok(())
    }
}

/// Output of one inference pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub proposals: Vec<Proposal>,
    pub masks: Vec<InstanceMask>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub detector: Detector,
    pub refiner: Refiner,
}

impl Model {
    /// Fresh parameters drawn from `seed`; detector parameters come first.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let detector = Detector::new(cfg.detector.clone(), &mut params, &mut rng)?;
        let refiner = Refiner::new(cfg.refiner.clone(), cfg.detector.widths[0], &mut params, &mut rng)?;
        Ok(Model {
            cfg,
            params,
            detector,
            refiner,
        })
    }

    /// Same detector weights, freshly initialized refiner of another config.
    pub fn with_refiner(&self, refiner: RefinerConfig, seed: u64) -> Result<Model> {
        let cfg = ModelConfig {
            detector: self.cfg.detector.clone(),
            refiner,
        };
        let mut m = Model::new(cfg, seed)?;
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with("detector.")) {
            let id = m.params.find(name).expect("detector parameter set is config-determined");
            *m.params.get_mut(id) = t.clone();
        }
        Ok(m)
    }

    pub fn voxelize(&self, cloud: &PointCloud) -> Result<SparseGrid> {
        voxelize(cloud, self.cfg.detector.voxel_size, &GeometricFeaturizer)
    }

    pub fn propose(&self, grid: &SparseGrid) -> Result<(BackboneOutput, Vec<Proposal>)> {
        let bb = self.detector.backbone_forward(&self.params, grid)?;
        let heads = self.detector.head_forward(&self.params, &bb);
        let proposals = decode_proposals(&heads, self.cfg.detector.voxel_size, &self.cfg.detector.nms);
        Ok((bb, proposals))
    }

    pub fn infer(&self, cloud: &PointCloud) -> Result<Prediction> {
        let grid = self.voxelize(cloud)?;
        let (bb, proposals) = self.propose(&grid)?;
        let masks = self
            .refiner
            .predict_masks(&self.params, &grid, &bb.levels[0].features, &proposals);
        Ok(Prediction { proposals, masks })
    }

    /// Refines externally supplied proposals instead of detected ones.
    pub fn infer_with_proposals(&self, cloud: &PointCloud, proposals: &[Proposal]) -> Result<Vec<InstanceMask>> {
        let grid = self.voxelize(cloud)?;
        let bb = self.detector.backbone_forward(&self.params, &grid)?;
        Ok(self
            .refiner
            .predict_masks(&self.params, &grid, &bb.levels[0].features, proposals))
    }
}
