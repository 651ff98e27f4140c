//! Component toggles trained side by side over several seeds.

use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelKind, Strategy};
use crate::error::Result;
use crate::sequence::PoseSequence;

use super::evaluate::evaluate;
use super::model::{Model, TrainState};
use super::train::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    /// Whole-video random sampling vs the consecutive frames ending at `t`.
    Sampling,
    /// Length/direction decomposition vs direct joint regression.
    Decomposition,
    /// Bone-length augmentation on vs off.
    Augmentation,
    /// Visibility fusion on vs off.
    VisFusion,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::Sampling, Toggle::Decomposition, Toggle::Augmentation, Toggle::VisFusion];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Sampling => "sampling",
            Toggle::Decomposition => "decomposition",
            Toggle::Augmentation => "augmentation",
            Toggle::VisFusion => "vis-fusion",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// The configuration with this component switched off.
    pub fn ablate(self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        match self {
            Toggle::Sampling => c.strategy = Strategy::Consecutive,
            Toggle::Decomposition => c.model = ModelKind::Direct,
            Toggle::Augmentation => c.augment = false,
            Toggle::VisFusion => c.vis_fusion = false,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggle: Toggle,
    pub seed: u64,
    pub full_mm: f64,
    pub ablated_mm: f64,
    /// `ablated - full`; positive when the component helps.
    pub delta_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToggleSummary {
    pub toggle: Toggle,
    pub median_full_mm: f64,
    pub median_ablated_mm: f64,
    pub median_delta_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ToggleSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Validation MPJPE of a model trained from scratch under `cfg`.
pub fn train_and_score(cfg: &Config, train_videos: &[PoseSequence], val_videos: &[PoseSequence]) -> Result<f64> {
    let mut model = Model::new(cfg)?;
    let mut state = TrainState::default();
    train(&mut model, &mut state, train_videos, val_videos, &TrainOptions::default())?;
    Ok(evaluate(&model, val_videos)?.mpjpe_mm)
}

/// Trains the full model once per seed and each ablated variant next to
/// it. `progress` sees every finished row.
pub fn run_ablation(
    base: &Config,
    toggles: &[Toggle],
    seeds: &[u64],
    train_videos: &[PoseSequence],
    val_videos: &[PoseSequence],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let full_cfg = Config { seed, ..base.clone() };
        let full_mm = train_and_score(&full_cfg, train_videos, val_videos)?;
        for &toggle in toggles {
            let ablated_mm = train_and_score(&toggle.ablate(&full_cfg), train_videos, val_videos)?;
            let row = AblationRow { toggle, seed, full_mm, ablated_mm, delta_mm: ablated_mm - full_mm };
            progress(&row);
            rows.push(row);
        }
    }
    let summary = toggles
        .iter()
        .map(|&toggle| {
            let pick = |f: fn(&AblationRow) -> f64| median(&rows.iter().filter(|r| r.toggle == toggle).map(f).collect::<Vec<_>>());
            ToggleSummary {
                toggle,
                median_full_mm: pick(|r| r.full_mm),
                median_ablated_mm: pick(|r| r.ablated_mm),
                median_delta_mm: pick(|r| r.delta_mm),
            }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}
