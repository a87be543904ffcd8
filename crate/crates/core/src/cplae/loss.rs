//! The loss surface: prototypes, few-shot classification loss, the
//! contrastive prototype loss, their weighted combination, and
//! nearest-prototype classification.

use super::config::{AnchorMode, CplConfig, FslConfig};
use crate::autodiff::{Element, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mounted, ProjectionHead};

/// Scalar diagnostics for one episode. `l_total = l_fsl + λ·l_cpl` holds in
/// 64-bit arithmetic by construction; posteriors are row-normalized in
/// 64-bit too.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_fsl: f64,
    pub l_cpl: f64,
    pub l_total: f64,
    /// (n·q, n) rows summing to 1: query posterior over episode classes.
    pub posteriors: Tensor<f64>,
}

/// Class means of class-major support embeddings: rows c·k..(c+1)·k of
/// `support` average (left to right) into prototype c. Shape (n·k, A) →
/// (n, A).
pub fn compute_prototypes<T: Element>(
    tape: &mut Tape<T>,
    support: Var,
    n: usize,
    k: usize,
) -> Result<Var> {
    let shape = tape.value(support).shape().to_vec();
    if shape.len() != 2 || shape[0] != n * k {
        return Err(Error::Contract(format!(
            "compute_prototypes: expected ({} , dim) = (n·k, dim) support matrix, got {shape:?}",
            n * k
        )));
    }
    let dim = shape[1];
    let grouped = tape.reshape(support, vec![n, k, dim])?;
    tape.mean(grouped, &[1], false)
}

/// −log softmax(−distance²) at the true class, averaged over queries.
/// Returns the loss node and the (n·q, n) posterior matrix (computed in
/// 64-bit off the tape).
pub fn fsl_loss<T: Element>(
    tape: &mut Tape<T>,
    queries: Var,
    prototypes: Var,
    labels: &[usize],
    config: &FslConfig,
) -> Result<(Var, Tensor<f64>)> {
    let qshape = tape.value(queries).shape().to_vec();
    let pshape = tape.value(prototypes).shape().to_vec();
    if qshape.len() != 2 || pshape.len() != 2 || qshape[1] != pshape[1] {
        return Err(Error::Dimension(format!(
            "fsl_loss: queries {qshape:?} and prototypes {pshape:?} must be (rows, dim) with equal dim"
        )));
    }
    let (nq, n) = (qshape[0], pshape[0]);
    if labels.len() != nq {
        return Err(Error::Contract(format!(
            "fsl_loss: {} labels for {nq} queries",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Contract(format!(
            "fsl_loss: label {bad} out of range for {n} prototypes"
        )));
    }
    let sq = tape.pairwise_sqdist(queries, prototypes)?;
    let dist = if config.plain_distance {
        tape.sqrt(sq)?
    } else {
        sq
    };
    let logits = tape.neg(dist)?;
    let logp = tape.log_softmax(logits, 1)?;

    // Posterior diagnostics: 64-bit row softmax of the logits.
    let logit_values = tape.value(logits);
    let mut posterior = vec![0.0f64; nq * n];
    for row in 0..nq {
        let vals: Vec<f64> = (0..n).map(|c| logit_values.data()[row * n + c].tof()).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..n {
            posterior[row * n + c] = exps[c] / z;
        }
    }
    let posteriors = Tensor::new(vec![nq, n], posterior)?;

    let mut one_hot = vec![T::zero(); nq * n];
    for (row, &label) in labels.iter().enumerate() {
        one_hot[row * n + label] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![nq, n], one_hot)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked, &[], false)?;
    let denom = if config.literal_q_normalization {
        nq / n // q alone
    } else {
        nq
    };
    let loss = tape.mul_scalar(total, T::fromf(-1.0 / denom as f64))?;
    Ok((loss, posteriors))
}

/// Negative query draws for the contrastive loss: `per_positive[c·q + i]`
/// holds the m·(n−1) global query indices contrasted against positive i of
/// class c, in draw order.
///
/// Draw order (the replay contract): classes ascending by episode position;
/// within a class, positives in query order; for each positive, the other
/// classes ascending, and from each, m offsets drawn uniformly without
/// replacement.
#[derive(Debug, Clone)]
pub struct NegativeDraws {
    pub per_positive: Vec<Vec<usize>>,
    pub n: usize,
    pub q: usize,
    pub m: usize,
}

pub fn draw_negatives(n: usize, q: usize, m: usize, rng: &mut Rng) -> NegativeDraws {
    let mut per_positive = Vec::with_capacity(n * q);
    for c in 0..n {
        for _i in 0..q {
            let mut negatives = Vec::with_capacity(m * (n - 1));
            for other in 0..n {
                if other == c {
                    continue;
                }
                for off in rng.sample_without_replacement(q, m) {
                    negatives.push(other * q + off);
                }
            }
            per_positive.push(negatives);
        }
    }
    NegativeDraws {
        per_positive,
        n,
        q,
        m,
    }
}

fn normalize_rows<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let sums = tape.sum(sq, &[1], true)?;
    let norms = tape.sqrt(sums)?;
    tape.div(x, norms)
}

/// The contrastive prototype loss.
///
/// `anchors` is (n, A) in prototype mode or (n·k, A) class-major in
/// support-sample mode; `queries` is the (n·q, A) query matrix (shuffled or
/// ordered per the caller). For every positive, sim⁺ = exp(cos(anchor,
/// h(query))/T) and sim⁻ sums the same kernel over that positive's drawn
/// negatives; the loss averages −log(sim⁺/(sim⁺+sim⁻)) over all
/// (anchor, positive) pairs. Anchors bypass h unless `project_anchor`.
#[allow(clippy::too_many_arguments)]
pub fn cpl_loss<T: Element>(
    tape: &mut Tape<T>,
    m: &Mounted,
    anchors: Var,
    queries: Var,
    n: usize,
    q: usize,
    projection: Option<&ProjectionHead>,
    config: &CplConfig,
    draws: &NegativeDraws,
) -> Result<Var> {
    config.validate_for_queries(q)?;
    if draws.n != n || draws.q != q || draws.m != config.negatives_per_class {
        return Err(Error::Contract(format!(
            "cpl_loss: negative draws shaped for (n={}, q={}, m={}), episode has (n={n}, q={q}, m={})",
            draws.n, draws.q, draws.m, config.negatives_per_class
        )));
    }
    let a_shape = tape.value(anchors).shape().to_vec();
    let q_shape = tape.value(queries).shape().to_vec();
    if q_shape.len() != 2 || q_shape[0] != n * q {
        return Err(Error::Dimension(format!(
            "cpl_loss: queries must be (n·q, dim) = ({}, _), got {q_shape:?}",
            n * q
        )));
    }
    if a_shape.len() != 2 || !a_shape[0].is_multiple_of(n) {
        return Err(Error::Dimension(format!(
            "cpl_loss: anchors must be (n·k_anchor, dim) with n = {n}, got {a_shape:?}"
        )));
    }
    let anchors_per_class = a_shape[0] / n;
    match config.anchor_mode {
        AnchorMode::Prototype if anchors_per_class != 1 => {
            return Err(Error::Contract(format!(
                "cpl_loss: prototype anchors must be one per class, got {} rows for {n} classes",
                a_shape[0]
            )));
        }
        _ => {}
    }

    let projected_queries = match projection {
        Some(head) if config.use_projection => head.forward(tape, m, queries)?,
        _ => queries,
    };
    let projected_anchors = match projection {
        Some(head) if config.use_projection && config.project_anchor => {
            head.forward(tape, m, anchors)?
        }
        _ => anchors,
    };
    let pa_shape = tape.value(projected_anchors).shape().to_vec();
    let pq_shape = tape.value(projected_queries).shape().to_vec();
    if pa_shape[1] != pq_shape[1] {
        return Err(Error::Config(format!(
            "cpl_loss: anchor dim {} and projected query dim {} differ — set the projection \
             output dim to the augmented-embedding dim or enable project_anchor",
            pa_shape[1], pq_shape[1]
        )));
    }

    let a_norm = normalize_rows(tape, projected_anchors)?;
    let q_norm = normalize_rows(tape, projected_queries)?;
    let q_norm_t = tape.transpose2d(q_norm)?;
    let cos = tape.matmul(a_norm, q_norm_t)?; // (anchor rows, n·q)
    let scaled = tape.mul_scalar(cos, T::fromf(1.0 / config.temperature))?;
    let scores = tape.exp(scaled)?;
    let nq = n * q;
    let flat = tape.reshape(scores, vec![a_shape[0] * nq])?;

    let neg_count = config.negatives_per_class * (n - 1);
    let mut pos_idx = Vec::with_capacity(a_shape[0] * q);
    let mut neg_idx = Vec::with_capacity(a_shape[0] * q * neg_count);
    for c in 0..n {
        for s in 0..anchors_per_class {
            let anchor_row = c * anchors_per_class + s;
            for i in 0..q {
                let qi = c * q + i;
                pos_idx.push(anchor_row * nq + qi);
                for &t_idx in &draws.per_positive[qi] {
                    neg_idx.push(anchor_row * nq + t_idx);
                }
            }
        }
    }
    let term_count = pos_idx.len();
    let pos = tape.index_select(flat, 0, &pos_idx)?;
    let negs = tape.index_select(flat, 0, &neg_idx)?;
    let negs_by_term = tape.reshape(negs, vec![term_count, neg_count])?;
    let neg_sum = tape.sum(negs_by_term, &[1], false)?;
    let denom = tape.add(pos, neg_sum)?;
    let log_denom = tape.log(denom)?;
    let log_pos = tape.log(pos)?;
    let terms = tape.sub(log_denom, log_pos)?;
    let total = tape.sum(terms, &[], false)?;
    tape.mul_scalar(total, T::fromf(1.0 / term_count as f64))
}

/// l_fsl + λ·l_cpl on the tape.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    l_fsl: Var,
    l_cpl: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    match l_cpl {
        Some(cpl) if lambda != 0.0 => {
            let weighted = tape.mul_scalar(cpl, T::fromf(lambda))?;
            tape.add(l_fsl, weighted)
        }
        _ => Ok(l_fsl),
    }
}

/// Nearest-prototype prediction: argmin squared Euclidean distance, ties
/// broken toward the lowest class index. Pure value computation.
pub fn classify_queries<T: Element>(
    queries: &Tensor<T>,
    prototypes: &Tensor<T>,
) -> Result<Vec<usize>> {
    let qs = queries.shape();
    let ps = prototypes.shape();
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::Dimension(format!(
            "classify_queries: queries {qs:?} and prototypes {ps:?} must share dim"
        )));
    }
    let (nq, n, dim) = (qs[0], ps[0], qs[1]);
    let mut predictions = Vec::with_capacity(nq);
    for i in 0..nq {
        let qrow = &queries.data()[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..n {
            let prow = &prototypes.data()[c * dim..(c + 1) * dim];
            let mut d = 0.0f64;
            for j in 0..dim {
                let diff = qrow[j].tof() - prow[j].tof();
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        predictions.push(best);
    }
    Ok(predictions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat<T: Element>(tape: &mut Tape<T>, rows: usize, cols: usize, vals: &[f64]) -> Var {
        let data: Vec<T> = vals.iter().map(|&v| T::fromf(v)).collect();
        tape.param(Tensor::new(vec![rows, cols], data).unwrap())
    }

    #[test]
    fn prototype_of_one_is_the_sample_and_means_are_exact() {
        let mut tape = Tape::<f64>::new();
        let single = mat(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p1 = compute_prototypes(&mut tape, single, 2, 1).unwrap();
        assert_eq!(tape.value(p1).data(), &[1.0, 2.0, 3.0, 4.0]);

        let pair = mat(&mut tape, 2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let p2 = compute_prototypes(&mut tape, pair, 1, 2).unwrap();
        assert_eq!(tape.value(p2).data(), &[2.0, 4.0]);

        let wrong = mat(&mut tape, 3, 2, &[0.0; 6]);
        assert!(matches!(
            compute_prototypes(&mut tape, wrong, 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn equidistant_query_costs_ln_n() {
        // 5 prototypes forming a regular simplex around the origin query.
        let mut tape = Tape::<f64>::new();
        let mut proto_vals = vec![0.0; 5 * 5];
        for c in 0..5 {
            proto_vals[c * 5 + c] = 2.0;
        }
        let protos = mat(&mut tape, 5, 5, &proto_vals);
        let queries = mat(&mut tape, 1, 5, &[0.0; 5]);
        let (loss, posteriors) =
            fsl_loss(&mut tape, queries, protos, &[3], &FslConfig::default()).unwrap();
        let got = tape.item(loss).unwrap();
        assert!((got - 5.0f64.ln()).abs() < 1e-12, "{got}");
        for c in 0..5 {
            assert!((posteriors.data()[c] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn query_at_prototype_beats_uniform_and_posterior_peaks() {
        let mut tape = Tape::<f64>::new();
        let protos = mat(&mut tape, 2, 2, &[0.0, 0.0, 3.0, 0.0]);
        let queries = mat(&mut tape, 1, 2, &[0.0, 0.0]);
        let (loss, posteriors) =
            fsl_loss(&mut tape, queries, protos, &[0], &FslConfig::default()).unwrap();
        let got = tape.item(loss).unwrap();
        assert!(got < 2.0f64.ln());
        assert!(posteriors.data()[0] > posteriors.data()[1]);
        let row_sum: f64 = posteriors.data().iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn literal_normalization_scales_by_n() {
        let mut tape = Tape::<f64>::new();
        let protos = mat(&mut tape, 2, 1, &[0.0, 1.0]);
        let queries = mat(&mut tape, 4, 1, &[0.1, 0.2, 0.8, 0.9]);
        let labels = [0, 0, 1, 1];
        let (mean_loss, _) =
            fsl_loss(&mut tape, queries, protos, &labels, &FslConfig::default()).unwrap();
        let (literal_loss, _) = fsl_loss(
            &mut tape,
            queries,
            protos,
            &labels,
            &FslConfig {
                literal_q_normalization: true,
                ..FslConfig::default()
            },
        )
        .unwrap();
        let a = tape.item(mean_loss).unwrap();
        let b = tape.item(literal_loss).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12, "literal = n·mean for n=2");
    }

    #[test]
    fn plain_distance_flag_changes_metric() {
        let mut tape = Tape::<f64>::new();
        let protos = mat(&mut tape, 2, 1, &[0.0, 4.0]);
        let queries = mat(&mut tape, 1, 1, &[1.0]);
        let (sq_loss, _) =
            fsl_loss(&mut tape, queries, protos, &[0], &FslConfig::default()).unwrap();
        // squared: softmax over [-1, -9]; term = ln(1 + e^{-8})
        let want_sq = (1.0 + (-8.0f64).exp()).ln();
        assert!((tape.item(sq_loss).unwrap() - want_sq).abs() < 1e-12);
        let (pl_loss, _) = fsl_loss(
            &mut tape,
            queries,
            protos,
            &[0],
            &FslConfig {
                plain_distance: true,
                ..FslConfig::default()
            },
        )
        .unwrap();
        // plain: softmax over [-1, -3]; term = ln(1 + e^{-2})
        let want_pl = (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.item(pl_loss).unwrap() - want_pl).abs() < 1e-12);
    }

    #[test]
    fn negative_draws_replay_and_stay_in_other_classes() {
        let (n, q, m) = (5, 7, 3);
        let mut r1 = Rng::derive(99, 6, 4);
        let mut r2 = Rng::derive(99, 6, 4);
        let d1 = draw_negatives(n, q, m, &mut r1);
        let d2 = draw_negatives(n, q, m, &mut r2);
        assert_eq!(d1.per_positive, d2.per_positive);
        assert_eq!(d1.per_positive.len(), n * q);
        for c in 0..n {
            for i in 0..q {
                let negs = &d1.per_positive[c * q + i];
                assert_eq!(negs.len(), m * (n - 1));
                for &t in negs {
                    assert_ne!(t / q, c, "negative drawn from the anchor class");
                }
                // without replacement within each class
                for other in 0..n {
                    let from_class: Vec<usize> =
                        negs.iter().filter(|&&t| t / q == other).cloned().collect();
                    let mut dedup = from_class.clone();
                    dedup.sort_unstable();
                    dedup.dedup();
                    assert_eq!(dedup.len(), from_class.len());
                }
            }
        }
    }

    /// All-equal similarities ⇒ every term is log(1 + m(n−1)).
    #[test]
    fn constant_similarity_gives_log_1_plus_negative_count() {
        let (n, q, mneg) = (5, 6, 6);
        let mut tape = Tape::<f64>::new();
        // Identical unit-direction rows: all cosines equal 1.
        let anchor_vals: Vec<f64> = (0..n).flat_map(|_| [1.0, 0.0]).collect();
        let query_vals: Vec<f64> = (0..n * q).flat_map(|_| [1.0, 0.0]).collect();
        let anchors = mat(&mut tape, n, 2, &anchor_vals);
        let queries = mat(&mut tape, n * q, 2, &query_vals);
        let config = CplConfig {
            use_projection: false,
            ..CplConfig::default()
        };
        let mut rng = Rng::new(5);
        let draws = draw_negatives(n, q, mneg, &mut rng);
        let store = crate::nn::ParamStore::<f64>::new();
        let mounted = store.mount(&mut tape);
        let loss = cpl_loss(
            &mut tape, &mounted, anchors, queries, n, q, None, &config, &draws,
        )
        .unwrap();
        let got = tape.item(loss).unwrap();
        assert!((got - 25.0f64.ln()).abs() < 1e-12, "{got} vs ln 25");
    }

    /// cos⁺ = 1 and every negative cosine −1 at T=1:
    /// term = log(1 + 24·e⁻²) — evaluated from the formula itself.
    #[test]
    fn opposed_negatives_match_direct_formula() {
        let (n, q, mneg) = (5, 6, 6);
        let mut tape = Tape::<f64>::new();
        // Class 0 points +x; all other classes point −x. Anchor 0's
        // positives have cosine 1, its negatives cosine −1.
        let mut anchor_vals = Vec::new();
        let mut query_vals = Vec::new();
        for c in 0..n {
            let dir = if c == 0 { 1.0 } else { -1.0 };
            anchor_vals.extend([dir, 0.0]);
            for _ in 0..q {
                query_vals.extend([dir, 0.0]);
            }
        }
        let anchors = mat(&mut tape, n, 2, &anchor_vals);
        let queries = mat(&mut tape, n * q, 2, &query_vals);
        let config = CplConfig {
            use_projection: false,
            ..CplConfig::default()
        };
        let mut rng = Rng::new(5);
        let draws = draw_negatives(n, q, mneg, &mut rng);
        let store = crate::nn::ParamStore::<f64>::new();
        let mounted = store.mount(&mut tape);
        let loss = cpl_loss(
            &mut tape, &mounted, anchors, queries, n, q, None, &config, &draws,
        )
        .unwrap();
        // Extract class 0's terms by a loop oracle over the same draws.
        // Class 0: sim+ = e^1, negatives all −1 → sim− = 24·e^{−1};
        // term0 = log(1 + 24·e^{−2}).
        let term0 = (1.0 + 24.0 * (-2.0f64).exp()).ln();
        // Other classes c: positives cos 1; negatives from class 0 have
        // cos 1 (−x·−x... wait: anchor c points −x, class-0 queries point
        // +x → cos −1; other-class negatives point −x → cos 1).
        // sim− = 6·e^{−1} + 18·e^{1} → term = log:
        let e = std::f64::consts::E;
        let term_other = (1.0 + (6.0 * (1.0f64 / e) + 18.0 * e) / e).ln();
        let want = (6.0 * term0 + 24.0 * term_other) / 30.0;
        let got = tape.item(loss).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!((term0 - 1.446459300281666).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_exactly() {
        let mut tape = Tape::<f64>::new();
        let fsl = tape.scalar(1.0);
        let cpl = tape.scalar(2.0);
        let total = total_loss(&mut tape, fsl, Some(cpl), 0.1).unwrap();
        assert!((tape.item(total).unwrap() - 1.2).abs() < 1e-15);
        let zero_lambda = total_loss(&mut tape, fsl, Some(cpl), 0.0).unwrap();
        assert_eq!(zero_lambda.index(), fsl.index());
        let unit = total_loss(&mut tape, fsl, None, 1.0).unwrap();
        assert_eq!(unit.index(), fsl.index());
    }

    #[test]
    fn classification_ties_break_low_and_exact_match_wins() {
        let protos = Tensor::new(vec![4, 1], vec![0.0f64, 2.0, 4.0, 6.0]).unwrap();
        let queries = Tensor::new(vec![3, 1], vec![4.0, 3.0, 0.1]).unwrap();
        let preds = classify_queries(&queries, &protos).unwrap();
        // 4.0 → exactly prototype 2; 3.0 → tie between 1 and 2 → 1; 0.1 → 0.
        assert_eq!(preds, vec![2, 1, 0]);
    }
}
