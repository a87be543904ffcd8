//! Meta-test harness: accuracy with a 95% confidence interval, the
//! Davies-Bouldin clustering index, embedding export, and the four-preset
//! ablation runner.

use crate::autodiff::Rng;
use crate::cplae::{evaluate_episode, prepare_views, Model};
use crate::data::{sample_episode, EpisodeConfig, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::seeds::{TAG_EPISODE_TEST, TAG_INIT};
use crate::train::{
    pretrain_backbone, run_training_warm, Preset, TrainConfig, TrainOutput,
};
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

/// Mean and 95% confidence-interval half-width (normal approximation,
/// sample standard deviation). Fewer than two values → half-width 0.
pub fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Standard Davies-Bouldin index over points in row-major layout
/// (`points.len() == labels.len() * dim`): per-class scatter s_i is the mean
/// Euclidean distance to the class centroid, R_ij = (s_i+s_j)/‖μ_i−μ_j‖,
/// and the index averages max_{j≠i} R_ij over classes. Lower means clearer
/// cluster structure.
pub fn davies_bouldin(points: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    if dim == 0 || points.len() != labels.len() * dim {
        return Err(Error::Contract(format!(
            "points buffer holds {} values, expected {} labels x dim {dim}",
            points.len(),
            labels.len()
        )));
    }
    let k = match labels.iter().max() {
        Some(&m) => m + 1,
        None => 0,
    };
    if k < 2 {
        return Err(Error::Contract(
            "davies_bouldin needs at least 2 classes".into(),
        ));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Contract(
            "davies_bouldin needs at least 1 point per class".into(),
        ));
    }

    let mut centroids = vec![0.0f64; k * dim];
    for (row, &l) in labels.iter().enumerate() {
        for j in 0..dim {
            centroids[l * dim + j] += points[row * dim + j] / counts[l] as f64;
        }
    }
    let mut scatter = vec![0.0f64; k];
    for (row, &l) in labels.iter().enumerate() {
        let d2: f64 = (0..dim)
            .map(|j| {
                let d = points[row * dim + j] - centroids[l * dim + j];
                d * d
            })
            .sum();
        scatter[l] += d2.sqrt() / counts[l] as f64;
    }

    let mut sum = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep: f64 = (0..dim)
                .map(|t| {
                    let d = centroids[i * dim + t] - centroids[j * dim + t];
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            if sep == 0.0 {
                return Err(Error::Domain(format!(
                    "classes {i} and {j} have coincident centroids"
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / sep);
        }
        sum += worst;
    }
    Ok(sum / k as f64)
}

/// Meta-test results over a seeded episode set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub episode_count: usize,
    /// Per-episode accuracy, indexed by episode id.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci_halfwidth: f64,
    /// Mean per-episode Davies-Bouldin index of the episode embeddings
    /// (support and queries jointly, ordered concatenation).
    pub db_index_mean: f64,
    pub seed: u64,
    /// Resolved configuration this report was produced under.
    pub config: serde_json::Value,
}

impl EvalReport {
    /// The conventional reporting line, accuracy in percent:
    /// `5-way 5-shot: 74.31 ± 0.34`.
    pub fn format_line(&self, n_way: usize, k_shot: usize) -> String {
        format!(
            "{n_way}-way {k_shot}-shot: {:.2} ± {:.2}",
            self.mean_accuracy * 100.0,
            self.ci_halfwidth * 100.0
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn eval_one(
    model: &Model,
    dataset: &LabeledDataset,
    episode_config: &EpisodeConfig,
    split: Split,
    seed: u64,
    index: u64,
) -> Result<(f64, f64)> {
    let mut rng = Rng::derive(seed, TAG_EPISODE_TEST, index);
    let episode = sample_episode(dataset, split, episode_config, &mut rng)?;
    let augs = &episode_config.augmentations[..model.config.views - 1];
    let views = prepare_views(dataset, &episode, augs)?;
    let ev = evaluate_episode(model, &views)?;

    let (n, k, q) = (episode.classes.len(), episode.k_shot, episode.q_queries);
    let dim = model.ae_dim();
    let mut points = Vec::with_capacity((n * (k + q)) * dim);
    for &v in ev.support.data() {
        points.push(v as f64);
    }
    for &v in ev.queries.data() {
        points.push(v as f64);
    }
    let labels: Vec<usize> = (0..n)
        .flat_map(|c| std::iter::repeat_n(c, k))
        .chain((0..n).flat_map(|c| std::iter::repeat_n(c, q)))
        .collect();
    let db = davies_bouldin(&points, dim, &labels)?;
    Ok((ev.accuracy, db))
}

/// Evaluate a trained model on seeded episodes from the given split
/// (meta-test protocol: eval mode, ordered embeddings, nearest prototype).
/// Episode `i` is derived from `seed` alone, so reports are reproducible
/// and identical across `threads` settings.
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    model: &Model,
    dataset: &LabeledDataset,
    episode_config: &EpisodeConfig,
    split: Split,
    episode_count: usize,
    seed: u64,
    threads: usize,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if episode_count == 0 {
        return Err(Error::Config("episode_count must be positive".into()));
    }
    let threads = threads.max(1).min(episode_count);
    let mut results: Vec<(f64, f64)> = Vec::with_capacity(episode_count);
    if threads == 1 {
        for i in 0..episode_count {
            results.push(eval_one(
                model,
                dataset,
                episode_config,
                split,
                seed,
                i as u64,
            )?);
        }
    } else {
        let mut worker_outputs: Vec<Result<Vec<(usize, f64, f64)>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    scope.spawn(move || {
                        let mut rows = Vec::new();
                        for i in (w..episode_count).step_by(threads) {
                            let (acc, db) = eval_one(
                                model,
                                dataset,
                                episode_config,
                                split,
                                seed,
                                i as u64,
                            )?;
                            rows.push((i, acc, db));
                        }
                        Ok(rows)
                    })
                })
                .collect();
            for h in handles {
                worker_outputs.push(h.join().expect("evaluation worker panicked"));
            }
        });
        let mut merged: Vec<Option<(f64, f64)>> = vec![None; episode_count];
        for output in worker_outputs {
            for (i, acc, db) in output? {
                merged[i] = Some((acc, db));
            }
        }
        results = merged
            .into_iter()
            .map(|r| r.expect("every episode index assigned to a worker"))
            .collect();
    }

    let accuracies: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (mean_accuracy, ci_halfwidth) = mean_and_ci(&accuracies);
    let db_index_mean = results.iter().map(|r| r.1).sum::<f64>() / episode_count as f64;
    Ok(EvalReport {
        episode_count,
        accuracies,
        mean_accuracy,
        ci_halfwidth,
        db_index_mean,
        seed,
        config: config_echo,
    })
}

/// Write episode embeddings as CSV for external projection tools. Columns:
/// episode id, dataset sample id, role (support/query), dataset label, then
/// the embedding components.
pub fn export_embeddings(
    model: &Model,
    dataset: &LabeledDataset,
    episode_config: &EpisodeConfig,
    split: Split,
    episode_count: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let dim = model.ae_dim();
    let mut out = String::new();
    out.push_str("episode,sample,role,label");
    for j in 0..dim {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for i in 0..episode_count {
        let mut rng = Rng::derive(seed, TAG_EPISODE_TEST, i as u64);
        let episode = sample_episode(dataset, split, episode_config, &mut rng)?;
        let augs = &episode_config.augmentations[..model.config.views - 1];
        let views = prepare_views(dataset, &episode, augs)?;
        let ev = evaluate_episode(model, &views)?;
        let mut write_rows = |ids: &[usize], role: &str, emb: &crate::autodiff::Tensor<f32>| {
            for (row, &id) in ids.iter().enumerate() {
                out.push_str(&format!("{i},{id},{role},{}", dataset.label(id)));
                for j in 0..dim {
                    out.push_str(&format!(",{}", emb.data()[row * dim + j]));
                }
                out.push('\n');
            }
        };
        write_rows(&episode.support_ids, "support", &ev.support);
        write_rows(&episode.query_ids, "query", &ev.queries);
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// One preset × seed outcome in the ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub preset: Preset,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub ci_halfwidth: f64,
    pub db_index: f64,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Across-seed mean accuracy, mean CI half-width, and mean DB index for
    /// one preset.
    pub fn aggregate(&self, preset: Preset) -> (f64, f64, f64) {
        let rows: Vec<&AblationCell> =
            self.cells.iter().filter(|c| c.preset == preset).collect();
        let n = rows.len().max(1) as f64;
        (
            rows.iter().map(|c| c.mean_accuracy).sum::<f64>() / n,
            rows.iter().map(|c| c.ci_halfwidth).sum::<f64>() / n,
            rows.iter().map(|c| c.db_index).sum::<f64>() / n,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,seed,mean_accuracy,ci_halfwidth,db_index,best_val_accuracy\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.preset.name(),
                c.seed,
                c.mean_accuracy,
                c.ci_halfwidth,
                c.db_index,
                c.best_val_accuracy
            ));
        }
        out
    }

    /// Aligned-text comparison table, one row per preset in ablation order.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut out = format!(
            "# seeds: {}   ({} test episodes per run)\n",
            seeds.join(" "),
            self.eval_episodes
        );
        out.push_str(&format!(
            "{:<16} {:>18} {:>10}\n",
            "preset", "accuracy (%)", "db_index"
        ));
        for p in Preset::ALL {
            let (acc, ci, db) = self.aggregate(p);
            out.push_str(&format!(
                "{:<16} {:>11.2} ± {:<4.2} {:>10.3}\n",
                p.name(),
                acc * 100.0,
                ci * 100.0,
                db
            ));
        }
        out
    }
}

/// Train and meta-test all four presets over the given seeds on identical
/// episode streams. One backbone is pre-trained per seed (when the base
/// config enables pre-training) and shared across presets so rows differ
/// only in the preset flags. Writes `ablation.csv` and `ablation.txt` when
/// `out_dir` is given.
pub fn ablation_run(
    dataset: &LabeledDataset,
    base: &TrainConfig,
    seeds: &[u64],
    eval_episodes: usize,
    threads: usize,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::with_capacity(seeds.len() * Preset::ALL.len());
    for &seed in seeds {
        let pretrained = match &base.pretrain {
            Some(pcfg) => {
                // Pre-train a backbone-only scratch model. Its init draws
                // are the backbone's own (first in registration order), so
                // every preset would have started from these exact values.
                let mut scratch_cfg = base.clone();
                scratch_cfg.preset = Preset::Protonet;
                scratch_cfg.seed = seed;
                let mut init_rng = Rng::derive(seed, TAG_INIT, 0);
                let mut scratch = Model::new(scratch_cfg.effective_model(), &mut init_rng)?;
                pretrain_backbone(&mut scratch, dataset, pcfg, seed)?;
                Some(scratch.store)
            }
            None => None,
        };
        for preset in Preset::ALL {
            let mut config = base.clone();
            config.preset = preset;
            config.seed = seed;
            config.pretrain = None;
            let TrainOutput { model, log, .. } =
                run_training_warm(dataset, &config, None, pretrained.as_ref())?;
            let report = meta_test(
                &model,
                dataset,
                &config.episode,
                Split::Test,
                eval_episodes,
                seed,
                threads,
                serde_json::to_value(&config).expect("config serializes"),
            )?;
            cells.push(AblationCell {
                preset,
                seed,
                mean_accuracy: report.mean_accuracy,
                ci_halfwidth: report.ci_halfwidth,
                db_index: report.db_index_mean,
                best_val_accuracy: log.best_val_accuracy,
            });
        }
    }
    let table = AblationTable {
        seeds: seeds.to_vec(),
        eval_episodes,
        cells,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(csv.display().to_string(), e))?;
        let txt = dir.join("ablation.txt");
        std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(txt.display().to_string(), e))?;
    }
    Ok(table)
}
