//! Per-query modality reliability by free energy, and the split of queries
//! into RGB- and Flow-dominant groups.
//!
//! For a query with distances `ψ` and posterior `p = softmax(-ψ)`, the
//! variational free energy is the expected energy minus the entropy,
//! `F = Σ p·ψ − H(p)`, which equals `−ln Σ exp(−ψ)`. Lower `F` means the
//! modality explains the query better.

use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{check_len, Result};
use crate::metric::PosteriorMatrix;
use crate::scalar::Scalar;

option_names!(ReliabilityMode { Vfe => "vfe", Entropy => "entropy" });
option_names!(AsiForce { Off => "off", ForceRgb => "force_rgb", ForceFlow => "force_flow" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityMode {
    #[default]
    Vfe,
    Entropy,
}

/// Overrides the free-energy grouping (ablation rows).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsiForce {
    #[default]
    Off,
    ForceRgb,
    ForceFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupTag {
    RgbDominant,
    FlowDominant,
}

impl GroupTag {
    pub fn modality(self) -> Modality {
        match self {
            GroupTag::RgbDominant => Modality::Rgb,
            GroupTag::FlowDominant => Modality::Flow,
        }
    }
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.ln())
        .sum::<T>()
}

pub fn free_energy<T: Scalar>(distances: &[T], posterior: &[T], mode: ReliabilityMode) -> Result<T> {
    check_len("free energy posterior", distances.len(), posterior.len())?;
    let h = entropy(posterior);
    Ok(match mode {
        ReliabilityMode::Entropy => h,
        ReliabilityMode::Vfe => {
            let expected: T = posterior
                .iter()
                .zip(distances)
                .filter(|(&p, _)| p > T::zero())
                .map(|(&p, &d)| p * d)
                .sum();
            expected - h
        }
    })
}

/// Free energies `[F_r, F_f]` per query.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityScores<T> {
    pub values: Vec<[T; 2]>,
    pub mode: ReliabilityMode,
}

impl<T: Scalar> ReliabilityScores<T> {
    pub fn compute(
        rgb: &PosteriorMatrix<T>,
        flow: &PosteriorMatrix<T>,
        mode: ReliabilityMode,
    ) -> Result<Self> {
        check_len("flow posterior rows", rgb.num_queries(), flow.num_queries())?;
        let one = |pm: &PosteriorMatrix<T>, i| free_energy(pm.distances.row(i), pm.probs.row(i), mode);
        let values = (0..rgb.num_queries())
            .map(|i| Ok([one(rgb, i)?, one(flow, i)?]))
            .collect::<Result<_>>()?;
        Ok(Self { values, mode })
    }

    pub fn mean(&self, m: Modality) -> T {
        let col = match m {
            Modality::Rgb => 0,
            Modality::Flow => 1,
        };
        let n = T::lit(self.values.len().max(1) as f64);
        self.values.iter().map(|v| v[col]).sum::<T>() / n
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub tags: Vec<GroupTag>,
    /// Whether the query's reliability gap reaches the margin; only decisive
    /// queries take part in distillation.
    pub decisive: Vec<bool>,
}

impl GroupAssignment {
    pub fn forced(num_queries: usize, tag: GroupTag) -> Self {
        Self {
            tags: vec![tag; num_queries],
            decisive: vec![true; num_queries],
        }
    }

    /// Decisive members of the group dominated by `m`.
    pub fn members(&self, m: Modality) -> Vec<usize> {
        self.tags
            .iter()
            .zip(&self.decisive)
            .enumerate()
            .filter(|(_, (t, &d))| d && t.modality() == m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.tags.iter().filter(|t| t.modality() == m).count()
    }
}

/// Lower free energy dominates; exact ties go to RGB.
pub fn assign_groups<T: Scalar>(scores: &ReliabilityScores<T>, margin: T) -> GroupAssignment {
    let (tags, decisive) = scores
        .values
        .iter()
        .map(|&[fr, ff]| {
            let tag = if ff < fr {
                GroupTag::FlowDominant
            } else {
                GroupTag::RgbDominant
            };
            (tag, (fr - ff).abs() >= margin)
        })
        .unzip();
    GroupAssignment { tags, decisive }
}

pub fn group_queries<T: Scalar>(
    scores: &ReliabilityScores<T>,
    margin: T,
    force: AsiForce,
) -> GroupAssignment {
    let n = scores.values.len();
    match force {
        AsiForce::Off => assign_groups(scores, margin),
        AsiForce::ForceRgb => GroupAssignment::forced(n, GroupTag::RgbDominant),
        AsiForce::ForceFlow => GroupAssignment::forced(n, GroupTag::FlowDominant),
    }
}
