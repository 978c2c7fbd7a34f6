use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, sgd_step};
use crate::asi::{free_energy, ReliabilityMode};
use crate::dataset::{sample_episode, EpisodeConfig, Modality, MultimodalDataset};
use crate::encoder::ModelBundle;
use crate::error::{Error, Result};
use crate::pipeline::ModalityForward;
use crate::rng::{self, DOMAIN_TRAIN};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub seed: u64,
}

/// One training episode, measured before that episode's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub total: f64,
    pub ce_r: f64,
    pub ce_f: f64,
    pub d_rf: f64,
    pub d_fr: f64,
    /// Mean variational free energy over the episode's queries.
    pub f_r: f64,
    pub f_f: f64,
    pub rgb_dominant: usize,
    pub flow_dominant: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelBundle<T>,
    pub trace: Vec<TraceRow>,
}

fn mean_vfe<T: Scalar>(fwd: &ModalityForward<T>) -> Result<f64> {
    let pm = &fwd.posteriors;
    let mut sum = 0.0;
    for i in 0..pm.num_queries() {
        sum += free_energy(pm.distances.row(i), pm.probs.row(i), ReliabilityMode::Vfe)?.as_f64();
    }
    Ok(sum / pm.num_queries().max(1) as f64)
}

/// Episodic meta-training with plain SGD. Both heads step from gradients
/// computed on the same parameters.
pub fn train_meta<T: Scalar>(
    dataset: &MultimodalDataset<T>,
    config: &TrainConfig,
    mut model: ModelBundle<T>,
) -> Result<TrainOutcome<T>> {
    let meta = dataset.meta();
    model.check_dims(meta.dim_rgb, meta.dim_flow)?;
    config.episode.validate()?;
    let gamma = model.hyper.gamma;
    let mut trace = Vec::with_capacity(config.episodes);
    for ep in 0..config.episodes {
        let mut rng = rng::substream(config.seed, DOMAIN_TRAIN, ep as u64);
        let episode = sample_episode(dataset, config.episode, &mut rng)?;
        let view = episode.view(dataset);
        let (loss, grads, fwd) = loss_and_gradients(&view, &model)?;
        let non_finite = |quantity| Error::NonFinite {
            quantity,
            episode: ep,
            seed: config.seed,
        };
        if !loss.is_finite() {
            return Err(non_finite("loss"));
        }
        if !grads.is_finite() {
            return Err(non_finite("gradient"));
        }
        trace.push(TraceRow {
            episode: ep,
            total: loss.total.as_f64(),
            ce_r: loss.ce_r.as_f64(),
            ce_f: loss.ce_f.as_f64(),
            d_rf: loss.distill_r_to_f.as_f64(),
            d_fr: loss.distill_f_to_r.as_f64(),
            f_r: mean_vfe(&fwd.rgb)?,
            f_f: mean_vfe(&fwd.flow)?,
            rgb_dominant: fwd.groups.count(Modality::Rgb),
            flow_dominant: fwd.groups.count(Modality::Flow),
        });
        sgd_step(&mut model, &grads, gamma)?;
        if !(model.head_r.is_finite() && model.head_f.is_finite()) {
            return Err(non_finite("parameters"));
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Tab-separated: episode, total, ce_r, ce_f, d_rf, d_fr, F_r, F_f.
pub fn write_trace(rows: &[TraceRow], mut w: impl Write) -> Result<()> {
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.episode, r.total, r.ce_r, r.ce_f, r.d_rf, r.d_fr, r.f_r, r.f_f
        )?;
    }
    Ok(())
}
