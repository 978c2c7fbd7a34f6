//! Certainty-weighted mutual distillation, the training objective, its
//! closed-form gradient and the SGD update.
//!
//! For modality `m` with partner `n` the head `θ^m` minimises
//!
//! ```text
//! L^m = CE^m + λ · L_{n→m}
//! L_{n→m} = Σ_{i∈G^n} c_i^n KL(p_i^n ‖ p_i^m) / Σ_{i∈G^n} c_i^n
//! ```
//!
//! Teacher posteriors, certainties and group membership are constants.
//! Both losses are functions of the distances `ψ_ik`, and
//! `∂(−ln p_y)/∂ψ_k = δ_ky − p_k`, `∂KL(a‖p)/∂ψ_k = a_k − p_k`; the chain then
//! runs through the distance into query features and prototypes, and from
//! there into the affine head.

mod train;

pub use train::{train_meta, write_trace, TraceRow, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeView, Modality};
use crate::encoder::{HeadParams, ModelBundle};
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::metric::{DistanceMode, PosteriorMatrix};
use crate::pipeline::{EpisodeForward, ModalityForward};
use crate::scalar::Scalar;

option_names!(DistillMode { Both => "both", TRgb => "t_rgb", TFlow => "t_flow", None => "none" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    #[default]
    Both,
    TRgb,
    TFlow,
    None,
}

impl DistillMode {
    /// Whether `teacher` distils into the other modality.
    pub fn teaches(self, teacher: Modality) -> bool {
        matches!(
            (self, teacher),
            (DistillMode::Both, _)
                | (DistillMode::TRgb, Modality::Rgb)
                | (DistillMode::TFlow, Modality::Flow)
        )
    }
}

/// `Σ p (ln p − ln q)` in nats.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    check_len("kl divergence", p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > T::zero())
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum())
}

fn kl_from_logs<T: Scalar>(p: &[T], log_p: &[T], log_q: &[T]) -> T {
    p.iter()
        .zip(log_p.iter().zip(log_q))
        .filter(|(&a, _)| a > T::zero())
        .map(|(&a, (&lp, &lq))| a * (lp - lq))
        .sum()
}

/// `Σ w_i v_i / Σ w_i`, zero for an empty or zero-weight set.
pub fn certainty_weighted_mean<T: Scalar>(weights: &[T], values: &[T]) -> T {
    let total: T = weights.iter().copied().sum();
    if weights.is_empty() || total <= T::zero() {
        return T::zero();
    }
    weights.iter().zip(values).map(|(&w, &v)| w * v).sum::<T>() / total
}

/// Distillation from `teacher` into `student` over the teacher-dominant
/// `group`, weighted by the teacher's certainty.
pub fn distillation_loss<T: Scalar>(
    group: &[usize],
    teacher: &PosteriorMatrix<T>,
    teacher_certainty: &[T],
    student: &PosteriorMatrix<T>,
) -> T {
    let weights: Vec<T> = group.iter().map(|&i| teacher_certainty[i]).collect();
    let kls: Vec<T> = group
        .iter()
        .map(|&i| {
            kl_from_logs(
                teacher.probs.row(i),
                teacher.log_probs.row(i),
                student.log_probs.row(i),
            )
        })
        .collect();
    certainty_weighted_mean(&weights, &kls)
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy_loss<T: Scalar>(posteriors: &PosteriorMatrix<T>, labels: &[usize]) -> Result<T> {
    check_len("query labels", posteriors.num_queries(), labels.len())?;
    let n = posteriors.log_probs.cols();
    let mut sum = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::InvalidConfig(format!("query label {y} >= n_way {n}")));
        }
        sum -= posteriors.log_probs.get(i, y);
    }
    Ok(sum / T::lit(labels.len().max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce_r: T,
    pub ce_f: T,
    pub distill_r_to_f: T,
    pub distill_f_to_r: T,
    pub total: T,
    pub lambda: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn is_finite(&self) -> bool {
        [self.ce_r, self.ce_f, self.distill_r_to_f, self.distill_f_to_r, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Gradients of each modality's own objective, shaped like its head.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub rgb: HeadParams<T>,
    pub flow: HeadParams<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, m: Modality) -> &HeadParams<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.is_finite() && self.flow.is_finite()
    }

    pub fn norm(&self) -> T {
        self.rgb
            .weight
            .iter()
            .chain(&self.rgb.bias)
            .chain(&self.flow.weight)
            .chain(&self.flow.bias)
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }
}

/// Distillation into `student`: `L_{teacher→student}` where the teacher is the
/// other modality, or zero when that direction is switched off.
fn distill_into<T: Scalar>(fwd: &EpisodeForward<T>, student: Modality, mode: DistillMode) -> T {
    let teacher = student.other();
    if !mode.teaches(teacher) {
        return T::zero();
    }
    let t = fwd.modality(teacher);
    distillation_loss(
        &fwd.groups.members(teacher),
        &t.posteriors,
        &t.certainty,
        &fwd.modality(student).posteriors,
    )
}

fn assemble<T: Scalar>(
    fwd: &EpisodeForward<T>,
    labels: &[usize],
    model: &ModelBundle<T>,
) -> Result<LossBreakdown<T>> {
    let lambda = T::lit(model.hyper.lambda);
    let mode = model.hyper.distill_mode;
    let ce_r = cross_entropy_loss(&fwd.rgb.posteriors, labels)?;
    let ce_f = cross_entropy_loss(&fwd.flow.posteriors, labels)?;
    let distill_r_to_f = distill_into(fwd, Modality::Flow, mode);
    let distill_f_to_r = distill_into(fwd, Modality::Rgb, mode);
    Ok(LossBreakdown {
        ce_r,
        ce_f,
        distill_r_to_f,
        distill_f_to_r,
        total: ce_r + ce_f + lambda * (distill_r_to_f + distill_f_to_r),
        lambda,
    })
}

pub fn total_loss<T: Scalar>(view: &EpisodeView<'_, T>, model: &ModelBundle<T>) -> Result<LossBreakdown<T>> {
    let fwd = EpisodeForward::run(view, model)?;
    assemble(&fwd, &view.query_labels, model)
}

pub fn grad_total_loss<T: Scalar>(view: &EpisodeView<'_, T>, model: &ModelBundle<T>) -> Result<GradientSet<T>> {
    loss_and_gradients(view, model).map(|(_, g, _)| g)
}

/// Loss, gradients and the forward pass they were computed from.
pub fn loss_and_gradients<T: Scalar>(
    view: &EpisodeView<'_, T>,
    model: &ModelBundle<T>,
) -> Result<(LossBreakdown<T>, GradientSet<T>, EpisodeForward<T>)> {
    let fwd = EpisodeForward::run(view, model)?;
    let loss = assemble(&fwd, &view.query_labels, model)?;
    let grad = |m: Modality| {
        let dpsi = distance_gradient(&fwd, m, &view.query_labels, model);
        backprop_head(
            fwd.modality(m),
            &dpsi,
            &view.support_inputs(m),
            &view.support_labels,
            &view.query_inputs(m),
            model.head(m),
            model.hyper.distance_mode,
        )
    };
    let grads = GradientSet {
        rgb: grad(Modality::Rgb),
        flow: grad(Modality::Flow),
    };
    Ok((loss, grads, fwd))
}

/// `∂L^m/∂ψ^m_ik` for modality `m`'s objective.
fn distance_gradient<T: Scalar>(
    fwd: &EpisodeForward<T>,
    m: Modality,
    labels: &[usize],
    model: &ModelBundle<T>,
) -> Matrix<T> {
    let own = &fwd.modality(m).posteriors;
    let (rows, n) = (own.probs.rows(), own.probs.cols());
    let inv_m = T::one() / T::lit(rows.max(1) as f64);
    let mut g = Matrix::zeros(rows, n);
    for (i, &y) in labels.iter().enumerate() {
        let row = g.row_mut(i);
        for k in 0..n {
            let delta = if k == y { T::one() } else { T::zero() };
            row[k] = (delta - own.probs.get(i, k)) * inv_m;
        }
    }

    let teacher = m.other();
    if model.hyper.distill_mode.teaches(teacher) {
        let t = fwd.modality(teacher);
        let group = fwd.groups.members(teacher);
        let total_c: T = group.iter().map(|&i| t.certainty[i]).sum();
        if total_c > T::zero() {
            let scale = T::lit(model.hyper.lambda) / total_c;
            for &i in &group {
                let w = scale * t.certainty[i];
                let row = g.row_mut(i);
                for k in 0..n {
                    row[k] += w * (t.posteriors.probs.get(i, k) - own.probs.get(i, k));
                }
            }
        }
    }
    g
}

fn backprop_head<T: Scalar>(
    fwd: &ModalityForward<T>,
    dpsi: &Matrix<T>,
    support_inputs: &[&[T]],
    support_labels: &[usize],
    query_inputs: &[&[T]],
    head: &HeadParams<T>,
    mode: DistanceMode,
) -> HeadParams<T> {
    let n = fwd.prototypes.n_way();
    let d = head.d_proj();
    let two = T::lit(2.0);
    let mut d_query = vec![vec![T::zero(); d]; fwd.query_features.len()];
    let mut d_proto = vec![vec![T::zero(); d]; n];
    for (i, q) in fwd.query_features.iter().enumerate() {
        for k in 0..n {
            let coef = dpsi.get(i, k);
            if coef == T::zero() {
                continue;
            }
            let factor = match mode {
                DistanceMode::SqEuclidean => two * coef,
                DistanceMode::Euclidean => {
                    let dist = fwd.posteriors.distances.get(i, k);
                    if dist > T::zero() {
                        coef / dist
                    } else {
                        T::zero()
                    }
                }
            };
            let t = fwd.prototypes.get(k);
            for c in 0..d {
                let diff = factor * (q[c] - t[c]);
                d_query[i][c] += diff;
                d_proto[k][c] -= diff;
            }
        }
    }

    let mut counts = vec![0usize; n];
    for &y in support_labels {
        counts[y] += 1;
    }
    let d_support: Vec<Vec<T>> = support_labels
        .iter()
        .map(|&y| {
            let inv = T::one() / T::lit(counts[y] as f64);
            d_proto[y].iter().map(|&v| v * inv).collect()
        })
        .collect();

    let mut grad = HeadParams::zeros(head.d_in(), d);
    let d_in = head.d_in();
    let pairs = d_query
        .iter()
        .zip(query_inputs)
        .chain(d_support.iter().zip(support_inputs));
    for (dy, x) in pairs {
        for r in 0..d {
            let g = dy[r];
            if g == T::zero() {
                continue;
            }
            grad.bias[r] += g;
            let row = &mut grad.weight[r * d_in..(r + 1) * d_in];
            for (w, &xv) in row.iter_mut().zip(x.iter()) {
                *w += g * xv;
            }
        }
    }
    grad
}

/// `θ^m ← θ^m − γ ∇^m` for both heads independently.
pub fn sgd_step<T: Scalar>(model: &mut ModelBundle<T>, grads: &GradientSet<T>, gamma: f64) -> Result<()> {
    let gamma = T::lit(gamma);
    for m in [Modality::Rgb, Modality::Flow] {
        let g = grads.get(m);
        let head = model.head_mut(m);
        check_len("gradient weight", head.weight.len(), g.weight.len())?;
        check_len("gradient bias", head.bias.len(), g.bias.len())?;
        for (p, &dp) in head.weight.iter_mut().zip(&g.weight) {
            *p -= gamma * dp;
        }
        for (p, &dp) in head.bias.iter_mut().zip(&g.bias) {
            *p -= gamma * dp;
        }
    }
    Ok(())
}
