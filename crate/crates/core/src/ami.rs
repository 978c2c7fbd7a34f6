//! Test-time fusion of the two modalities and evaluation bookkeeping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asi::GroupTag;
use crate::dataset::{sample_episode, EpisodeConfig, EpisodeView, Modality, MultimodalDataset};
use crate::encoder::ModelBundle;
use crate::error::{check_len, Error, Result};
use crate::metric::{argmax, posterior};
use crate::pipeline::EpisodeForward;
use crate::rng::{self, DOMAIN_EVAL};
use crate::scalar::Scalar;

option_names!(FusionMode { Adaptive => "adaptive", RgbOnly => "rgb_only" | "rgb", FlowOnly => "flow_only" | "flow", Mean => "mean" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Adaptive,
    RgbOnly,
    FlowOnly,
    Mean,
}

/// Certainty-ratio weights `(α_r, α_f)`.
pub fn fusion_weights<T: Scalar>(c_r: T, c_f: T) -> (T, T) {
    let total = c_r + c_f;
    (c_r / total, c_f / total)
}

/// Softmax of `−(α_r ψ_r + α_f ψ_f)`.
pub fn fused_posterior<T: Scalar>(psi_r: &[T], psi_f: &[T], weights: (T, T)) -> Result<Vec<T>> {
    check_len("fused distance rows", psi_r.len(), psi_f.len())?;
    let (a_r, a_f) = weights;
    let energies: Vec<T> = psi_r.iter().zip(psi_f).map(|(&r, &f)| a_r * r + a_f * f).collect();
    Ok(posterior(&energies))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome<T> {
    pub posterior: Vec<T>,
    pub predicted: usize,
    pub truth: usize,
    pub group: GroupTag,
    pub predicted_rgb: usize,
    pub predicted_flow: usize,
    pub weights: (T, T),
    pub dominant: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult<T> {
    pub queries: Vec<QueryOutcome<T>>,
    pub accuracy: f64,
    pub accuracy_rgb: f64,
    pub accuracy_flow: f64,
    /// `(matching, labelled)` counts of group tag vs ground-truth dominance.
    pub asi_agreement: (usize, usize),
    pub rgb_dominant: usize,
    pub flow_dominant: usize,
}

pub fn evaluate_episode<T: Scalar>(
    view: &EpisodeView<'_, T>,
    model: &ModelBundle<T>,
    fusion: FusionMode,
) -> Result<EpisodeResult<T>> {
    let fwd = EpisodeForward::run(view, model)?;
    let (pr, pf) = (&fwd.rgb.posteriors, &fwd.flow.posteriors);
    let half = T::lit(0.5);
    let mut queries = Vec::with_capacity(view.query.len());
    for i in 0..view.query.len() {
        let weights = match fusion {
            FusionMode::Adaptive => fusion_weights(fwd.rgb.certainty[i], fwd.flow.certainty[i]),
            FusionMode::Mean => (half, half),
            FusionMode::RgbOnly => (T::one(), T::zero()),
            FusionMode::FlowOnly => (T::zero(), T::one()),
        };
        let fused = match fusion {
            FusionMode::RgbOnly => pr.probs.row(i).to_vec(),
            FusionMode::FlowOnly => pf.probs.row(i).to_vec(),
            _ => fused_posterior(pr.distances.row(i), pf.distances.row(i), weights)?,
        };
        queries.push(QueryOutcome {
            predicted: argmax(&fused),
            posterior: fused,
            truth: view.query_labels[i],
            group: fwd.groups.tags[i],
            predicted_rgb: argmax(pr.probs.row(i)),
            predicted_flow: argmax(pf.probs.row(i)),
            weights,
            dominant: view.query[i].dominant,
        });
    }
    let m = queries.len().max(1) as f64;
    let frac = |f: &dyn Fn(&QueryOutcome<T>) -> bool| queries.iter().filter(|q| f(q)).count() as f64 / m;
    let accuracy = frac(&|q| q.predicted == q.truth);
    let accuracy_rgb = frac(&|q| q.predicted_rgb == q.truth);
    let accuracy_flow = frac(&|q| q.predicted_flow == q.truth);
    let labelled: Vec<_> = queries.iter().filter_map(|q| q.dominant.map(|d| (q.group, d))).collect();
    let agree = labelled.iter().filter(|(g, d)| g.modality() == *d).count();
    Ok(EpisodeResult {
        accuracy,
        accuracy_rgb,
        accuracy_flow,
        asi_agreement: (agree, labelled.len()),
        rgb_dominant: fwd.groups.count(Modality::Rgb),
        flow_dominant: fwd.groups.count(Modality::Flow),
        queries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub fusion: FusionMode,
    pub mean_accuracy: f64,
    /// 95% normal-approximation half-width over episode accuracies.
    pub ci95_half_width: f64,
    pub mean_accuracy_rgb: f64,
    pub mean_accuracy_flow: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asi_agreement: Option<f64>,
}

pub fn aggregate_metrics<T: Scalar>(results: &[EpisodeResult<T>], fusion: FusionMode) -> Result<RunMetrics> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no episode results to aggregate"));
    }
    let n = results.len() as f64;
    let mean = |f: fn(&EpisodeResult<T>) -> f64| results.iter().map(f).sum::<f64>() / n;
    let mean_accuracy = mean(|r| r.accuracy);
    let std = if results.len() > 1 {
        let ss: f64 = results.iter().map(|r| (r.accuracy - mean_accuracy).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let (agree, labelled) = results
        .iter()
        .fold((0, 0), |(a, l), r| (a + r.asi_agreement.0, l + r.asi_agreement.1));
    Ok(RunMetrics {
        episodes: results.len(),
        fusion,
        mean_accuracy,
        ci95_half_width: 1.96 * std / n.sqrt(),
        mean_accuracy_rgb: mean(|r| r.accuracy_rgb),
        mean_accuracy_flow: mean(|r| r.accuracy_flow),
        asi_agreement: (labelled > 0).then(|| agree as f64 / labelled as f64),
    })
}

/// Evaluates `episodes` episodes in parallel. Episode `i` draws from its own
/// substream of `seed`, so the episode stream does not depend on `fusion`.
pub fn evaluate_run<T: Scalar>(
    dataset: &MultimodalDataset<T>,
    model: &ModelBundle<T>,
    config: EpisodeConfig,
    episodes: usize,
    seed: u64,
    fusion: FusionMode,
) -> Result<Vec<EpisodeResult<T>>> {
    let meta = dataset.meta();
    model.check_dims(meta.dim_rgb, meta.dim_flow)?;
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, DOMAIN_EVAL, i as u64);
            let episode = sample_episode(dataset, config, &mut rng)?;
            evaluate_episode(&episode.view(dataset), model, fusion)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn weights_hand_values() {
        assert_eq!(fusion_weights(0.4, 0.4), (0.5, 0.5));
        let (a, b) = fusion_weights(0.9, 0.3);
        assert!(close(a, 0.75, 1e-15) && close(b, 0.25, 1e-15));
        let (c, d) = fusion_weights(0.9 * 0.7, 0.3 * 0.7);
        assert!(close(a, c, 1e-15) && close(b, d, 1e-15));
    }

    #[test]
    fn fused_posterior_hand_values() {
        let p = fused_posterior(&[0.0, 2.0], &[2.0, 0.0], (0.5, 0.5)).unwrap();
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.5, 1e-15));
        let psi_r = [0.0, 3f64.ln() * 4.0 / 3.0];
        let p = fused_posterior(&psi_r, &[0.0, 0.0], (0.75, 0.25)).unwrap();
        assert!(close(p[0], 0.75, 1e-12) && close(p[1], 0.25, 1e-12));
        let shared = [0.3, 1.2, 4.0];
        let p = fused_posterior(&shared, &shared, (0.3, 0.7)).unwrap();
        for (a, b) in p.iter().zip(posterior(&shared)) {
            assert!(close(*a, b, 1e-12));
        }
        assert!(fused_posterior(&[0.0], &[0.0, 1.0], (0.5, 0.5)).is_err());
    }

    #[test]
    fn near_degenerate_weight_recovers_rgb() {
        let psi_r = [0.2f64, 1.7, 0.9, 3.3];
        let psi_f = [5.0, 0.1, 2.0, 0.4];
        let p = fused_posterior(&psi_r, &psi_f, (1.0 - 1e-9, 1e-9)).unwrap();
        for (a, b) in p.iter().zip(posterior(&psi_r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn result(acc: f64) -> EpisodeResult<f64> {
        EpisodeResult {
            queries: Vec::new(),
            accuracy: acc,
            accuracy_rgb: acc,
            accuracy_flow: acc,
            asi_agreement: (0, 0),
            rgb_dominant: 0,
            flow_dominant: 0,
        }
    }

    #[test]
    fn aggregate_edge_cases() {
        let one = aggregate_metrics(&[result(0.6)], FusionMode::Adaptive).unwrap();
        assert_eq!(one.ci95_half_width, 0.0);
        assert_eq!(one.asi_agreement, None);
        let perfect = aggregate_metrics(&[result(1.0), result(1.0), result(1.0)], FusionMode::Mean).unwrap();
        assert_eq!((perfect.mean_accuracy, perfect.ci95_half_width), (1.0, 0.0));
        let two = aggregate_metrics(&[result(0.8), result(1.0)], FusionMode::Adaptive).unwrap();
        assert!(close(two.mean_accuracy, 0.9, 1e-15));
        let expected_hw = 1.96 * (0.02f64).sqrt() / 2f64.sqrt();
        assert!(close(two.ci95_half_width, expected_hw, 1e-12));
        assert!(aggregate_metrics::<f64>(&[], FusionMode::Adaptive).is_err());
    }

    proptest! {
        #[test]
        fn weights_on_simplex(c_r in 0.1f64..1.0, c_f in 0.1f64..1.0) {
            let (a, b) = fusion_weights(c_r, c_f);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        }

        #[test]
        fn fused_simplex_and_shift(
            rows in (2usize..10).prop_flat_map(|n| (prop::collection::vec(0.0f64..20.0, n), prop::collection::vec(0.0f64..20.0, n))),
            c_r in 0.1f64..1.0, c_f in 0.1f64..1.0, shift in -200.0f64..200.0,
        ) {
            let (psi_r, psi_f) = rows;
            let w = fusion_weights(c_r, c_f);
            let p = fused_posterior(&psi_r, &psi_f, w).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let sr: Vec<f64> = psi_r.iter().map(|v| v + shift).collect();
            let sf: Vec<f64> = psi_f.iter().map(|v| v + shift).collect();
            let q = fused_posterior(&sr, &sf, w).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(argmax(&p), argmax(&q));
        }
    }
}
