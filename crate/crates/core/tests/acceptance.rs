//! Acceptance suite — one test per criterion, each ending in a `PASS` line.
//!
//! 1. gradient correctness of the three losses on a toy episode
//! 2. loss-oracle equivalence against naive loops
//! 3. closed-form spot values
//! 4. augmentation exactness
//! 5. episode protocol invariants
//! 6. overfit smoke test
//! 7. component-ablation accuracy trend at desk scale
//! 8. clustering-index trend on the same runs
//! 9. bit-reproducibility of run artifacts
//! 10. reporting fidelity (confidence interval and format)
//!
//! Criteria 7 and 8 share one set of trained models (a `OnceLock` fixture);
//! everything else is self-contained.

// the loss oracles are deliberately written as naive index loops
#![allow(clippy::needless_range_loop)]

use cplae_core::autodiff::{grad_check, Rng, Tape, Tensor};
use cplae_core::cplae::{
    compute_prototypes, cpl_loss, draw_negatives, embed_episode, episode_loss,
    fixed_shuffle_permutation, fsl_loss, total_loss, AnchorMode, CplConfig, EpisodeViews,
    FslConfig, Model, ModelConfig,
};
use cplae_core::data::{
    augment, sample_episode, synth_generate, AugmentationKind, EpisodeConfig, Split,
};
use cplae_core::eval::{mean_and_ci, meta_test, AblationTable, EvalReport};
use cplae_core::nn::{BackboneConfig, ParamId, ParamStore, ProjectionHead};
use cplae_core::seeds::{TAG_EPISODE_TRAIN, TAG_NEG};
use cplae_core::train::{run_training, OptimizerConfig, Preset, TrainConfig};
use std::collections::HashSet;
use std::sync::OnceLock;

fn eval_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get().min(4))
        .unwrap_or(1)
}

// ---------------------------------------------------------------------------
// Criterion 1 — gradient correctness
// ---------------------------------------------------------------------------

/// A 2-way 2-shot 3-query episode over continuous random images with flip
/// views (pure pixel permutations), so no maxpool/relu kink sits within eps
/// of a tie. Returns the model and views.
fn toy_episode(model_seed: u64, img_seed: u64) -> (Model, EpisodeViews) {
    let config = ModelConfig {
        backbone: BackboneConfig {
            channels: vec![2, 3],
            in_channels: 1,
            in_h: 8,
            in_w: 8,
            use_batchnorm: true,
            ..BackboneConfig::default()
        },
        views: 3,
        cpl: CplConfig {
            negatives_per_class: 2,
            ..CplConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(model_seed);
    let model = Model::new(config, &mut rng).unwrap();

    let mut img_rng = Rng::new(img_seed);
    let batch = 2 * (2 + 3); // n(k+q)
    let base: Vec<Tensor<f32>> = (0..batch)
        .map(|_| {
            let data: Vec<f32> = (0..64).map(|_| img_rng.normal() as f32).collect();
            Tensor::new(vec![1, 8, 8], data).unwrap()
        })
        .collect();
    let stack = |imgs: &[Tensor<f32>]| {
        let mut data = Vec::new();
        for img in imgs {
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![batch, 1, 8, 8], data).unwrap()
    };
    let hflip: Vec<Tensor<f32>> = base
        .iter()
        .map(|i| augment(AugmentationKind::Hflip, i).unwrap())
        .collect();
    let vflip: Vec<Tensor<f32>> = base
        .iter()
        .map(|i| augment(AugmentationKind::Vflip, i).unwrap())
        .collect();
    let views = EpisodeViews {
        views: vec![stack(&base), stack(&hflip), stack(&vflip)],
        n: 2,
        k: 2,
        q: 3,
    };
    (model, views)
}

enum LossKind {
    Fsl,
    Cpl,
    Total,
}

/// Finite-difference check of one loss over every parameter in the store
/// (64-bit); returns the worst relative error.
fn toy_loss_gradcheck(kind: &LossKind, model_seed: u64, img_seed: u64, eps: f64) -> f64 {
    let (model, views) = toy_episode(model_seed, img_seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let store64 = model.store.cast::<f64>();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store64.get(id).clone()).collect();
    let frozen = Rng::derive(123, TAG_NEG, 0);

    grad_check(&inputs, eps, |tape, vars| {
        let mut st = store64.clone();
        for (&id, &var) in ids.iter().zip(vars) {
            st.set(id, tape.value(var).clone())?;
        }
        let mounted = {
            let mut m = st.mount(tape);
            for (&id, &var) in ids.iter().zip(vars) {
                m.replace(id, var);
            }
            m
        };
        match kind {
            LossKind::Total => {
                let mut neg_rng = frozen.clone();
                episode_loss(&model, tape, Some(&mut st), &mounted, &views, &mut neg_rng)
                    .map(|(loss, _)| loss)
            }
            LossKind::Fsl => {
                let perm = fixed_shuffle_permutation(model.config.views);
                let emb = embed_episode(&model, tape, Some(&mut st), &mounted, &views, &perm)?;
                let protos = compute_prototypes(tape, emb.support, views.n, views.k)?;
                let labels: Vec<usize> = (0..views.n)
                    .flat_map(|c| std::iter::repeat_n(c, views.q))
                    .collect();
                let (loss, _) =
                    fsl_loss(tape, emb.query_ordered, protos, &labels, &model.config.fsl)?;
                Ok(loss)
            }
            LossKind::Cpl => {
                let perm = fixed_shuffle_permutation(model.config.views);
                let emb = embed_episode(&model, tape, Some(&mut st), &mounted, &views, &perm)?;
                let protos = compute_prototypes(tape, emb.support, views.n, views.k)?;
                let mut neg_rng = frozen.clone();
                let draws = draw_negatives(
                    views.n,
                    views.q,
                    model.config.cpl.negatives_per_class,
                    &mut neg_rng,
                );
                cpl_loss(
                    tape,
                    &mounted,
                    protos,
                    emb.query_shuffled,
                    views.n,
                    views.q,
                    model.projection.as_ref(),
                    &model.config.cpl,
                    &draws,
                )
            }
        }
    })
    .unwrap()
}

#[test]
#[ignore = "calibration helper: scans seeds/eps for clean gradcheck points"]
fn gradcheck_seed_scan() {
    for img_seed in [78u64, 79, 80, 81, 82, 83] {
        for eps in [1e-5f64, 3e-5] {
            let f = toy_loss_gradcheck(&LossKind::Fsl, 16, img_seed, eps);
            let c = toy_loss_gradcheck(&LossKind::Cpl, 16, img_seed, eps);
            let t = toy_loss_gradcheck(&LossKind::Total, 16, img_seed, eps);
            println!("img_seed {img_seed} eps {eps:.0e}: fsl {f:.3e} cpl {c:.3e} total {t:.3e}");
        }
    }
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = std::time::Instant::now();
    for (name, kind) in [
        ("l_fsl", LossKind::Fsl),
        ("l_cpl", LossKind::Cpl),
        ("l_total", LossKind::Total),
    ] {
        // seeds and eps picked by `gradcheck_seed_scan`: all three losses sit
        // far from relu/maxpool kinks here, worst case 3.8e-6
        let rel = toy_loss_gradcheck(&kind, 16, 79, 1e-5);
        assert!(
            rel < 1e-4,
            "{name}: worst relative gradient error {rel} exceeds 1e-4"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s, budget 60s");
    println!(
        "PASS criterion 1: l_fsl, l_cpl, l_total finite-difference checks < 1e-4 over all \
         parameter groups ({secs:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2 — loss-oracle equivalence
// ---------------------------------------------------------------------------

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Naive FSL loss: explicit loops, shifted log-sum-exp.
fn fsl_oracle(queries: &Tensor<f64>, prototypes: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (nq, dim) = (queries.shape()[0], queries.shape()[1]);
    let n = prototypes.shape()[0];
    let mut total = 0.0;
    for i in 0..nq {
        let mut logits = vec![0.0f64; n];
        for c in 0..n {
            let mut d2 = 0.0;
            for j in 0..dim {
                let d = queries.data()[i * dim + j] - prototypes.data()[c * dim + j];
                d2 += d * d;
            }
            logits[c] = -d2;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += -(logits[labels[i]] - lse);
    }
    total / nq as f64
}

/// Re-derive the negative draws with a replayed RNG, by the documented draw
/// order: classes ascending, positives in query order, other classes
/// ascending, m offsets each without replacement.
fn replay_negatives(n: usize, q: usize, m: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut per_positive = Vec::new();
    for c in 0..n {
        for _ in 0..q {
            let mut negs = Vec::new();
            for other in 0..n {
                if other != c {
                    for off in rng.sample_without_replacement(q, m) {
                        negs.push(other * q + off);
                    }
                }
            }
            per_positive.push(negs);
        }
    }
    per_positive
}

struct OracleProjection {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
}

impl OracleProjection {
    /// x (in) -> relu(x·W1 + b1)·W2 + b2, plain loops.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (in_dim, hidden) = (self.w1.shape()[0], self.w1.shape()[1]);
        let out = self.w2.shape()[1];
        let mut h = vec![0.0f64; hidden];
        for j in 0..hidden {
            let mut v = self.b1.data()[j];
            for i in 0..in_dim {
                v += x[i] * self.w1.data()[i * hidden + j];
            }
            h[j] = v.max(0.0);
        }
        let mut y = vec![0.0f64; out];
        for j in 0..out {
            let mut v = self.b2.data()[j];
            for i in 0..hidden {
                v += h[i] * self.w2.data()[i * out + j];
            }
            y[j] = v;
        }
        y
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Naive CPL loss: per anchor row and positive, cos/T similarities against
/// the drawn negatives, fully looped.
fn cpl_oracle(
    anchors: &Tensor<f64>,
    queries: &Tensor<f64>,
    n: usize,
    q: usize,
    projection: Option<&OracleProjection>,
    config: &CplConfig,
    per_positive: &[Vec<usize>],
) -> f64 {
    let a_rows = anchors.shape()[0];
    let a_dim = anchors.shape()[1];
    let q_dim = queries.shape()[1];
    let anchors_per_class = a_rows / n;
    let project = |row: &[f64]| -> Vec<f64> {
        match projection {
            Some(p) if config.use_projection => p.apply(row),
            _ => row.to_vec(),
        }
    };
    let projected: Vec<Vec<f64>> = (0..n * q)
        .map(|i| project(&queries.data()[i * q_dim..(i + 1) * q_dim]))
        .collect();
    let mut total = 0.0;
    let mut terms = 0usize;
    for c in 0..n {
        for s in 0..anchors_per_class {
            let row = c * anchors_per_class + s;
            let anchor = &anchors.data()[row * a_dim..(row + 1) * a_dim];
            let anchor = if config.project_anchor {
                project(anchor)
            } else {
                anchor.to_vec()
            };
            for i in 0..q {
                let qi = c * q + i;
                let pos = (cosine(&anchor, &projected[qi]) / config.temperature).exp();
                let mut neg_sum = 0.0;
                for &t in &per_positive[qi] {
                    neg_sum += (cosine(&anchor, &projected[t]) / config.temperature).exp();
                }
                total += -(pos / (pos + neg_sum)).ln();
                terms += 1;
            }
        }
    }
    total / terms as f64
}

#[test]
fn criterion_02_loss_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = Rng::new(0xACCE55);
    let mut worst_fsl = 0.0f64;
    let mut worst_cpl = 0.0f64;
    let episodes = 60;
    for e in 0..episodes {
        let n = 2 + rng.below_usize(4); // 2..=5
        let k = 1 + rng.below_usize(3);
        let q = 2 + rng.below_usize(4); // 2..=5
        let m = 1 + rng.below_usize(q); // 1..=q
        let dim = 3 + rng.below_usize(6);

        // --- FSL ---
        let queries = random_matrix(&mut rng, n * q, dim);
        let prototypes = random_matrix(&mut rng, n, dim);
        let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
        let fsl_cfg = FslConfig::default();
        let mut tape: Tape<f64> = Tape::new();
        let qv = tape.constant(queries.clone());
        let pv = tape.constant(prototypes.clone());
        let (loss, _) = fsl_loss(&mut tape, qv, pv, &labels, &fsl_cfg).unwrap();
        let vectorized = tape.item(loss).unwrap();
        let naive = fsl_oracle(&queries, &prototypes, &labels);
        worst_fsl = worst_fsl.max((vectorized - naive).abs());

        // --- CPL ---
        let use_projection = e % 2 == 0;
        let support_anchors = e % 3 == 0;
        let cpl_cfg = CplConfig {
            temperature: 0.5 + rng.uniform(),
            negatives_per_class: m,
            lambda: 1.0,
            anchor_mode: if support_anchors {
                AnchorMode::SupportSample
            } else {
                AnchorMode::Prototype
            },
            use_projection,
            project_anchor: use_projection && e % 4 == 0,
            ..CplConfig::default()
        };
        let anchor_rows = if support_anchors { n * k } else { n };
        let anchors = random_matrix(&mut rng, anchor_rows, dim);
        let queries = random_matrix(&mut rng, n * q, dim);

        // the negative-sampling stream, drawn once and replayed by the oracle
        let neg_seed = Rng::derive(7, TAG_NEG, e as u64);
        let mut pipeline_rng = neg_seed.clone();
        let draws = draw_negatives(n, q, m, &mut pipeline_rng);
        let mut oracle_rng = neg_seed.clone();
        let replayed = replay_negatives(n, q, m, &mut oracle_rng);
        assert_eq!(draws.per_positive, replayed, "negative replay diverged");

        let mut tape: Tape<f64> = Tape::new();
        let mut store: ParamStore<f64> = ParamStore::new();
        let (head, oracle_head) = if use_projection {
            // redraw heads whose relu layer goes fully dead on some row
            // (zero bias makes a zero output row possible, which has no
            // direction to normalize)
            let mut attempt = 0u64;
            loop {
                let mut trial: ParamStore<f64> = ParamStore::new();
                let mut prng = Rng::new(1000 + e as u64 + 100_000 * attempt);
                let head =
                    ProjectionHead::new(&mut trial, &mut prng, "h", dim, dim + 2, dim).unwrap();
                let oracle_head = OracleProjection {
                    w1: trial.get(head.l1.weight).clone(),
                    b1: trial.get(head.l1.bias).clone(),
                    w2: trial.get(head.l2.weight).clone(),
                    b2: trial.get(head.l2.bias).clone(),
                };
                let rows = (0..n * q)
                    .map(|i| queries.data()[i * dim..(i + 1) * dim].to_vec())
                    .chain((0..anchor_rows).filter(|_| cpl_cfg.project_anchor).map(|r| {
                        anchors.data()[r * dim..(r + 1) * dim].to_vec()
                    }));
                let alive = rows
                    .map(|r| oracle_head.apply(&r).iter().map(|v| v * v).sum::<f64>())
                    .all(|norm2| norm2 > 1e-16);
                if alive {
                    store = trial;
                    break (Some(head), Some(oracle_head));
                }
                attempt += 1;
                assert!(attempt < 50, "could not draw a projection without dead rows");
            }
        } else {
            (None, None)
        };
        let mounted = store.mount(&mut tape);
        let av = tape.constant(anchors.clone());
        let qv = tape.constant(queries.clone());
        let loss = cpl_loss(
            &mut tape,
            &mounted,
            av,
            qv,
            n,
            q,
            head.as_ref(),
            &cpl_cfg,
            &draws,
        )
        .unwrap();
        let vectorized = tape.item(loss).unwrap();
        let naive = cpl_oracle(
            &anchors,
            &queries,
            n,
            q,
            oracle_head.as_ref(),
            &cpl_cfg,
            &replayed,
        );
        worst_cpl = worst_cpl.max((vectorized - naive).abs());
    }
    assert!(worst_fsl < 1e-10, "fsl oracle gap {worst_fsl}");
    assert!(worst_cpl < 1e-10, "cpl oracle gap {worst_cpl}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "oracle sweep took {secs:.1}s, budget 60s");
    println!(
        "PASS criterion 2: fsl/cpl losses match looped oracles over {episodes} random episodes \
         (worst gaps {worst_fsl:.2e} / {worst_cpl:.2e}, {secs:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3 — closed-form spot values
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_closed_form_spot_values() {
    // Uniform posterior: queries at the origin, prototypes on the unit axes
    // -> all distances equal -> loss = ln n with n = 5.
    let n = 5;
    let q = 3;
    let mut tape: Tape<f64> = Tape::new();
    let queries = tape.constant(Tensor::zeros(vec![n * q, n]));
    let mut eye = vec![0.0f64; n * n];
    for c in 0..n {
        eye[c * n + c] = 1.0;
    }
    let prototypes = tape.constant(Tensor::new(vec![n, n], eye).unwrap());
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let (loss, posterior) =
        fsl_loss(&mut tape, queries, prototypes, &labels, &FslConfig::default()).unwrap();
    let v = tape.item(loss).unwrap();
    assert!(
        (v - (n as f64).ln()).abs() <= 1e-9,
        "uniform-posterior FSL loss {v} != ln 5"
    );
    for &p in posterior.data() {
        assert!((p - 1.0 / n as f64).abs() <= 1e-9);
    }

    // Equal similarity everywhere: all queries identical -> every term is
    // -ln(1 / (1 + m(n-1))) = ln 25 for n = 5, m = 6.
    let m = 6;
    let q = 6; // m <= q
    let dim = 4;
    let mut tape: Tape<f64> = Tape::new();
    let store: ParamStore<f64> = ParamStore::new();
    let mounted = store.mount(&mut tape);
    let one_row: Vec<f64> = (0..dim).map(|j| (j + 1) as f64).collect();
    let mut qdata = Vec::new();
    for _ in 0..n * q {
        qdata.extend_from_slice(&one_row);
    }
    let queries = tape.constant(Tensor::new(vec![n * q, dim], qdata).unwrap());
    let mut adata = Vec::new();
    for _ in 0..n {
        adata.extend_from_slice(&one_row);
    }
    let anchors = tape.constant(Tensor::new(vec![n, dim], adata).unwrap());
    let cfg = CplConfig {
        negatives_per_class: m,
        use_projection: false,
        ..CplConfig::default()
    };
    let mut rng = Rng::new(5);
    let draws = draw_negatives(n, q, m, &mut rng);
    let loss = cpl_loss(&mut tape, &mounted, anchors, queries, n, q, None, &cfg, &draws).unwrap();
    let v = tape.item(loss).unwrap();
    let expected = (1.0 + (m * (n - 1)) as f64).ln();
    assert!(
        (v - expected).abs() <= 1e-9,
        "equal-similarity CPL loss {v} != ln 25"
    );
    assert!((expected - 25f64.ln()).abs() < 1e-15);

    // Composition: l_total = l_fsl + lambda*l_cpl exactly, lambda = 0.1.
    let mut tape: Tape<f64> = Tape::new();
    let lf = tape.constant(Tensor::new(vec![], vec![1.0]).unwrap());
    let lc = tape.constant(Tensor::new(vec![], vec![2.0]).unwrap());
    let lt = total_loss(&mut tape, lf, Some(lc), 0.1).unwrap();
    let v = tape.item(lt).unwrap();
    assert!((v - 1.2).abs() <= 1e-9, "total loss {v} != 1.2");

    println!(
        "PASS criterion 3: uniform-posterior FSL = ln 5, equal-similarity CPL = ln 25, \
         total-loss composition exact at lambda = 0.1"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4 — augmentation exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_augmentation_exactness() {
    let mut rng = Rng::new(44);
    let image_count = 1000;
    for _ in 0..image_count {
        let (c, s) = (1 + rng.below_usize(3), 5 + rng.below_usize(6));
        let data: Vec<f32> = (0..c * s * s).map(|_| rng.normal() as f32).collect();
        let img = Tensor::new(vec![c, s, s], data).unwrap();
        let bits = |t: &Tensor<f32>| -> Vec<u32> { t.data().iter().map(|v| v.to_bits()).collect() };

        // group laws, bit-exact
        let r1 = augment(AugmentationKind::Rot90, &img).unwrap();
        let r2 = augment(AugmentationKind::Rot90, &r1).unwrap();
        let r3 = augment(AugmentationKind::Rot90, &r2).unwrap();
        let r4 = augment(AugmentationKind::Rot90, &r3).unwrap();
        assert_eq!(bits(&r4), bits(&img), "rot90^4 != id");
        let h2 = augment(
            AugmentationKind::Hflip,
            &augment(AugmentationKind::Hflip, &img).unwrap(),
        )
        .unwrap();
        assert_eq!(bits(&h2), bits(&img), "hflip^2 != id");
        let v2 = augment(
            AugmentationKind::Vflip,
            &augment(AugmentationKind::Vflip, &img).unwrap(),
        )
        .unwrap();
        assert_eq!(bits(&v2), bits(&img), "vflip^2 != id");
        let r270 = augment(AugmentationKind::Rot270, &img).unwrap();
        assert_eq!(bits(&r270), bits(&r3), "rot270 != rot90^3");
        let r180 = augment(AugmentationKind::Rot180, &img).unwrap();
        assert_eq!(bits(&r180), bits(&r2), "rot180 != rot90^2");

        // pixel multiset preserved by every augmentation
        let mut original = bits(&img);
        original.sort_unstable();
        for kind in AugmentationKind::ALL {
            let mut permuted = bits(&augment(kind, &img).unwrap());
            permuted.sort_unstable();
            assert_eq!(permuted, original, "{} changed the pixel multiset", kind.name());
        }
    }
    println!(
        "PASS criterion 4: augmentation group laws bit-exact and pixel multisets preserved \
         on {image_count} random images"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5 — episode protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_episode_protocol() {
    let dataset = synth_generate(20, 25, 12, 9).unwrap();
    let config = EpisodeConfig::default(); // 5-way 5-shot 15-query
    let draws = 1000;
    for i in 0..draws {
        let mut rng = Rng::derive(77, TAG_EPISODE_TRAIN, i as u64);
        let ep = sample_episode(&dataset, Split::Train, &config, &mut rng).unwrap();

        assert_eq!(ep.support_ids.len(), 25, "|S| = n*k");
        assert_eq!(ep.query_ids.len(), 75, "|Q| = n*q");
        assert_eq!(ep.classes.len(), 5);
        let class_set: HashSet<usize> = ep.classes.iter().copied().collect();
        assert_eq!(class_set.len(), 5, "episode classes distinct");

        // disjointness by sample id
        let support: HashSet<usize> = ep.support_ids.iter().copied().collect();
        let query: HashSet<usize> = ep.query_ids.iter().copied().collect();
        assert_eq!(support.len(), 25, "support ids distinct");
        assert_eq!(query.len(), 75, "query ids distinct");
        assert!(support.is_disjoint(&query), "support and query overlap");

        // class balance, class-major order
        for (c, &class) in ep.classes.iter().enumerate() {
            for s in 0..config.k_shot {
                assert_eq!(dataset.label(ep.support_ids[c * config.k_shot + s]), class);
            }
            for t in 0..config.q_queries {
                assert_eq!(dataset.label(ep.query_ids[c * config.q_queries + t]), class);
            }
        }

        // all samples from the requested split
        for &id in ep.support_ids.iter().chain(&ep.query_ids) {
            assert_eq!(dataset.split_of(id), Split::Train);
        }

        // determinism: replaying the seed reproduces the draw exactly
        let mut rng2 = Rng::derive(77, TAG_EPISODE_TRAIN, i as u64);
        let ep2 = sample_episode(&dataset, Split::Train, &config, &mut rng2).unwrap();
        assert_eq!(ep.classes, ep2.classes);
        assert_eq!(ep.support_ids, ep2.support_ids);
        assert_eq!(ep.query_ids, ep2.query_ids);
    }
    println!(
        "PASS criterion 5: {draws} seeded 5-way 5-shot draws are disjoint, class-balanced, \
         and deterministic"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — overfit smoke test
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_overfit_smoke() {
    let start = std::time::Instant::now();
    let dataset = synth_generate(20, 30, 16, 21).unwrap();
    let config = TrainConfig {
        preset: Preset::Cplae,
        epochs: 12,
        episodes_per_epoch: 50,
        val_episodes: 40,
        model: ModelConfig {
            backbone: BackboneConfig {
                channels: vec![8, 16],
                in_channels: 1,
                in_h: 16,
                in_w: 16,
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        },
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        seed: 6,
        ..TrainConfig::default()
    };
    assert!(config.epochs <= 20 && config.episodes_per_epoch <= 50);
    let out = run_training(&dataset, &config, None).unwrap();

    // accuracy on fresh episodes over the TRAINING classes
    let report = meta_test(
        &out.model,
        &dataset,
        &config.episode,
        Split::Train,
        100,
        606,
        eval_threads(),
        serde_json::json!({}),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(
        report.mean_accuracy > 0.90,
        "training-class accuracy {:.4} below 0.90",
        report.mean_accuracy
    );
    assert!(secs < 600.0, "overfit smoke took {secs:.1}s, budget 600s");
    println!(
        "PASS criterion 6: full model reaches {:.2}% on training-class episodes within \
         {} epochs x {} episodes ({secs:.1}s)",
        report.mean_accuracy * 100.0,
        config.epochs,
        config.episodes_per_epoch
    );
}

// ---------------------------------------------------------------------------
// Criteria 7 & 8 — ablation trends at desk scale (shared fixture)
// ---------------------------------------------------------------------------

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ablation_fixture() -> &'static AblationTable {
    static TABLE: OnceLock<AblationTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let dataset = synth_generate(20, 40, 10, 0).unwrap();
        let base = TrainConfig {
            epochs: 20,
            episodes_per_epoch: 40,
            val_episodes: 100,
            model: ModelConfig {
                backbone: BackboneConfig {
                    channels: vec![8, 16],
                    in_channels: 1,
                    in_h: 10,
                    in_w: 10,
                    ..BackboneConfig::default()
                },
                cpl: CplConfig {
                    lambda: 0.25,
                    temperature: 0.5,
                    ..CplConfig::default()
                },
                ..ModelConfig::default()
            },
            optimizer: OptimizerConfig {
                lr: 1e-3,
                halve_every: 8,
                ..OptimizerConfig::default()
            },
            pretrain: None,
            ..TrainConfig::default()
        };
        cplae_core::eval::ablation_run(
            &dataset,
            &base,
            &ABLATION_SEEDS,
            500,
            eval_threads(),
            None,
        )
        .unwrap()
    })
}

#[test]
fn criterion_07_ablation_accuracy_trend() {
    let start = std::time::Instant::now();
    let table = ablation_fixture();
    let (protonet, _, _) = table.aggregate(Preset::Protonet);
    let (protonet_ae, _, _) = table.aggregate(Preset::ProtonetAe);
    let (noshuffle, _, _) = table.aggregate(Preset::CplaeNoshuffle);
    let (cplae, _, _) = table.aggregate(Preset::Cplae);

    assert!(
        protonet <= protonet_ae && protonet_ae <= cplae,
        "ordering violated: protonet {:.2} / protonet_ae {:.2} / cplae {:.2}",
        protonet * 100.0,
        protonet_ae * 100.0,
        cplae * 100.0
    );
    let gap = (cplae - protonet) * 100.0;
    assert!(gap >= 1.0, "cplae - protonet = {gap:.2} points, need >= 1");
    let between = noshuffle >= protonet_ae && noshuffle <= cplae;
    let near_cplae = (cplae - noshuffle).abs() * 100.0 <= 0.5;
    assert!(
        between || near_cplae,
        "cplae_noshuffle {:.2} neither between protonet_ae {:.2} and cplae {:.2} nor within \
         0.5 points of cplae",
        noshuffle * 100.0,
        protonet_ae * 100.0,
        cplae * 100.0
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 7200.0, "ablation took {secs:.0}s, budget 2h");
    println!(
        "PASS criterion 7: over {} seeds, protonet {:.2} <= protonet_ae {:.2} <= cplae {:.2} \
         (gap {gap:.2} points), cplae_noshuffle {:.2} consistent ({secs:.0}s)",
        ABLATION_SEEDS.len(),
        protonet * 100.0,
        protonet_ae * 100.0,
        cplae * 100.0,
        noshuffle * 100.0
    );
}

#[test]
fn criterion_08_clustering_index_trend() {
    let table = ablation_fixture();
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let db_of = |preset: Preset| {
            table
                .cells
                .iter()
                .find(|c| c.preset == preset && c.seed == seed)
                .map(|c| c.db_index)
                .expect("cell present")
        };
        let (p, c) = (db_of(Preset::Protonet), db_of(Preset::Cplae));
        if c <= p {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {c:.3} vs {p:.3}"));
    }
    assert!(
        wins >= 4,
        "cplae DB index beat protonet in only {wins}/5 seeds ({})",
        detail.join(", ")
    );
    println!(
        "PASS criterion 8: cplae Davies-Bouldin index <= protonet on the same test episodes \
         in {wins}/5 seeds"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9 — determinism of artifacts
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_bit_reproducible_artifacts() {
    let dataset = synth_generate(12, 24, 12, 4).unwrap();
    let config = TrainConfig {
        epochs: 2,
        episodes_per_epoch: 3,
        val_episodes: 3,
        episode: EpisodeConfig {
            n_way: 3,
            k_shot: 2,
            q_queries: 6,
            ..EpisodeConfig::default()
        },
        model: ModelConfig {
            backbone: BackboneConfig {
                channels: vec![4, 8],
                in_channels: 1,
                in_h: 12,
                in_w: 12,
                use_batchnorm: false, // the bit-reproducibility mode
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        },
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        pretrain: Some(cplae_core::train::PretrainConfig {
            epochs: 1,
            batch_size: 16,
            ..cplae_core::train::PretrainConfig::default()
        }),
        seed: 14,
        ..TrainConfig::default()
    };

    let base = std::env::temp_dir().join(format!("cplae_accept_{}", std::process::id()));
    let dir_a = base.join("a");
    let dir_b = base.join("b");
    let out_a = run_training(&dataset, &config, Some(&dir_a)).unwrap();
    let out_b = run_training(&dataset, &config, Some(&dir_b)).unwrap();

    let csv_a = std::fs::read(dir_a.join("runlog.csv")).unwrap();
    let csv_b = std::fs::read(dir_b.join("runlog.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "runlog.csv differs between identical runs");
    let ckpt_a = std::fs::read(dir_a.join("best.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir_b.join("best.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "best.ckpt differs between identical runs");

    let eval = |model: &Model| {
        meta_test(
            model,
            &dataset,
            &config.episode,
            Split::Test,
            10,
            99,
            1,
            serde_json::to_value(&config).unwrap(),
        )
        .unwrap()
        .to_json()
    };
    let report_a = eval(&out_a.model);
    let report_b = eval(&out_b.model);
    assert_eq!(report_a, report_b, "EvalReport JSON differs");
    // a second evaluation of the same model is also identical
    assert_eq!(report_a, eval(&out_a.model));

    std::fs::remove_dir_all(&base).ok();
    println!(
        "PASS criterion 9: batchnorm-off train/eval artifacts (runlog.csv, best.ckpt, \
         EvalReport JSON) bit-identical across repeated runs"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10 — reporting fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_reporting_fidelity() {
    // hand-computed two-episode case: mean 0.5, ci 1.96*sd/sqrt(2) with
    // sd = sqrt(0.5) -> 1.96*0.5 = 0.98
    let (mean, ci) = mean_and_ci(&[1.0, 0.0]);
    assert!((mean - 0.5).abs() < 1e-12);
    assert!((ci - 0.98).abs() < 1e-12);

    // single episode: ci 0 by convention
    let (_, ci1) = mean_and_ci(&[0.6]);
    assert_eq!(ci1, 0.0);

    // the reporting line uses the "acc ± ci" percent format
    let report = EvalReport {
        episode_count: 2,
        accuracies: vec![1.0, 0.0],
        mean_accuracy: mean,
        ci_halfwidth: ci,
        db_index_mean: 1.0,
        seed: 0,
        config: serde_json::json!({}),
    };
    assert_eq!(report.format_line(5, 1), "5-way 1-shot: 50.00 ± 98.00");
    let pretty = EvalReport {
        episode_count: 3,
        accuracies: vec![0.7431; 3],
        mean_accuracy: 0.7431,
        ci_halfwidth: 0.0034,
        db_index_mean: 1.0,
        seed: 0,
        config: serde_json::json!({}),
    };
    assert_eq!(pretty.format_line(5, 5), "5-way 5-shot: 74.31 ± 0.34");

    println!(
        "PASS criterion 10: confidence interval matches the hand-computed case \
         (0.50 ± 0.98) and reports use the acc ± ci format"
    );
}
