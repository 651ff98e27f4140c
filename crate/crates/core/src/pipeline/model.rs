//! Every trainable piece of one estimator in a single parameter store.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Composition, Config, ModelKind};
use crate::direction::{DirectionNet, DirectionNetConfig};
use crate::error::{Error, Result};
use crate::length::{LengthNet, LengthNetConfig};
use crate::nn::{load_checkpoint, save_checkpoint, Init, ParamId, ParameterStore};
use crate::skeleton::{SkeletonPreset, SkeletonTopology};
use crate::synth::substream;

use super::loss::shift_matrix;

/// Millimeters per training unit: targets are expressed in meters.
pub const MM_PER_UNIT: f64 = 1000.0;

/// Affine heads regressing shifts and joints from `[lengths; directions]`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub shift: (ParamId, ParamId),
    pub joints: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: Config,
    pub topo: SkeletonTopology,
    pub store: ParameterStore,
    pub direction: DirectionNet,
    pub length: Option<LengthNet>,
    pub heads: Option<Heads>,
    shift_matrix: Vec<f64>,
}

/// Progress saved next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mpjpe_mm: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Mean loss terms over one epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss_d: f64,
    pub loss_l: f64,
    pub loss_j: f64,
    pub loss_js: f64,
    pub total: f64,
    pub val_mpjpe_mm: Option<f64>,
    pub val_p_mpjpe_mm: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointExtra {
    config: Config,
    train_state: TrainState,
}

impl Model {
    /// Fresh parameters drawn from the stream `(cfg.seed, 0, 0)`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let topo = SkeletonPreset::by_name(&cfg.skeleton)?.topology;
        let mut rng = substream(cfg.seed, 0, 0);
        let mut store = ParameterStore::new();
        let (direction, length, heads) = build(&mut store, cfg, &topo, &mut rng)?;
        let shift_matrix = shift_matrix(&topo);
        Ok(Self { cfg: cfg.clone(), topo, store, direction, length, heads, shift_matrix })
    }

    pub fn num_joints(&self) -> usize {
        self.topo.num_joints()
    }

    pub fn num_bones(&self) -> usize {
        self.topo.num_bones()
    }

    pub fn shift_matrix(&self) -> &[f64] {
        &self.shift_matrix
    }

    /// Trainable parameter groups by name prefix, for routing audits.
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = (0..self.cfg.subnets).map(DirectionNet::prefix).collect();
        if self.length.is_some() {
            groups.push(LengthNet::PREFIX.into());
            groups.push(LengthNet::ATTENTION.into());
        }
        if self.heads.is_some() {
            groups.push("head.shift.".into());
            groups.push("head.joints.".into());
        }
        groups
    }

    pub fn save(&self, dir: &Path, state: &TrainState) -> Result<()> {
        let extra = serde_json::to_value(CheckpointExtra { config: self.cfg.clone(), train_state: state.clone() })?;
        save_checkpoint(dir, &self.store, &self.cfg.hash(), extra)
    }

    /// Rebuilds the architecture from the stored configuration and adopts the
    /// stored parameters after checking names and shapes.
    pub fn load(dir: &Path) -> Result<(Self, TrainState)> {
        let (store, manifest) = load_checkpoint(dir)?;
        let extra: CheckpointExtra = serde_json::from_value(manifest.extra)
            .map_err(|e| Error::Format { line: 1, message: format!("checkpoint state: {e}") })?;
        let mut model = Self::new(&extra.config)?;
        if model.store.len() != store.len() {
            return Err(Error::Format {
                line: 1,
                message: format!("checkpoint has {} entries, architecture needs {}", store.len(), model.store.len()),
            });
        }
        for (a, b) in model.store.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Format {
                    line: 1,
                    message: format!("checkpoint entry `{}` {:?} does not match `{}` {:?}", b.name, b.shape, a.name, a.shape),
                });
            }
        }
        model.store = store;
        Ok((model, extra.train_state))
    }
}

type Parts = (DirectionNet, Option<LengthNet>, Option<Heads>);

fn build(store: &mut ParameterStore, cfg: &Config, topo: &SkeletonTopology, rng: &mut impl Rng) -> Result<Parts> {
    let (j, nb) = (topo.num_joints(), topo.num_bones());
    match cfg.model {
        ModelKind::Direct => {
            let direction = DirectionNet::new(store, DirectionNetConfig::from_config(cfg, j, 3 * j), rng)?;
            Ok((direction, None, None))
        }
        ModelKind::Decomposed => {
            let direction = DirectionNet::new(store, DirectionNetConfig::from_config(cfg, j, 3 * nb), rng)?;
            let length = LengthNet::new(store, LengthNetConfig::from_config(cfg, j), rng)?;
            let heads = match cfg.composition {
                Composition::Analytic => None,
                Composition::Heads => {
                    let pairs = topo.nonadjacent_pairs().len();
                    Some(Heads {
                        shift: (
                            store.add("head.shift.w", &[3 * pairs, 4 * nb], Init::FanInUniform, rng)?,
                            store.add("head.shift.b", &[3 * pairs], Init::Zeros, rng)?,
                        ),
                        joints: (
                            store.add("head.joints.w", &[3 * j, 4 * nb], Init::FanInUniform, rng)?,
                            store.add("head.joints.b", &[3 * j], Init::Zeros, rng)?,
                        ),
                    })
                }
            };
            Ok((direction, Some(length), heads))
        }
    }
}
