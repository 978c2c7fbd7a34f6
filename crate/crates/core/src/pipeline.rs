//! Forward pass of one episode through both modality heads.

use crate::asi::{group_queries, GroupAssignment, ReliabilityScores};
use crate::dataset::{EpisodeView, Modality};
use crate::encoder::{HeadParams, ModelBundle};
use crate::error::Result;
use crate::metric::{compute_prototypes, distances, DistanceMode, PosteriorMatrix, Prototypes};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ModalityForward<T> {
    pub support_features: Vec<Vec<T>>,
    pub query_features: Vec<Vec<T>>,
    pub prototypes: Prototypes<T>,
    pub posteriors: PosteriorMatrix<T>,
    pub certainty: Vec<T>,
}

impl<T: Scalar> ModalityForward<T> {
    pub fn run(
        head: &HeadParams<T>,
        support: &[&[T]],
        support_labels: &[usize],
        queries: &[&[T]],
        n_way: usize,
        mode: DistanceMode,
    ) -> Result<Self> {
        let embed_all = |xs: &[&[T]]| -> Result<Vec<Vec<T>>> { xs.iter().map(|x| head.embed(x)).collect() };
        let support_features = embed_all(support)?;
        let query_features = embed_all(queries)?;
        let prototypes = compute_prototypes(&support_features, support_labels, n_way)?;
        let posteriors = PosteriorMatrix::from_distances(distances(&query_features, &prototypes, mode)?);
        let certainty = posteriors.certainties();
        Ok(Self {
            support_features,
            query_features,
            prototypes,
            posteriors,
            certainty,
        })
    }
}

/// Everything downstream of the heads for one episode: per-modality
/// posteriors, reliability scores and the dominance groups.
#[derive(Clone, Debug)]
pub struct EpisodeForward<T> {
    pub rgb: ModalityForward<T>,
    pub flow: ModalityForward<T>,
    pub reliability: ReliabilityScores<T>,
    pub groups: GroupAssignment,
}

impl<T: Scalar> EpisodeForward<T> {
    pub fn run(view: &EpisodeView<'_, T>, model: &ModelBundle<T>) -> Result<Self> {
        let hyper = &model.hyper;
        let one = |m: Modality| {
            ModalityForward::run(
                model.head(m),
                &view.support_inputs(m),
                &view.support_labels,
                &view.query_inputs(m),
                view.n_way,
                hyper.distance_mode,
            )
        };
        let rgb = one(Modality::Rgb)?;
        let flow = one(Modality::Flow)?;
        let reliability =
            ReliabilityScores::compute(&rgb.posteriors, &flow.posteriors, hyper.reliability_mode)?;
        let groups = group_queries(&reliability, T::lit(hyper.asi_margin), hyper.asi_force);
        Ok(Self {
            rgb,
            flow,
            reliability,
            groups,
        })
    }

    pub fn modality(&self, m: Modality) -> &ModalityForward<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}
