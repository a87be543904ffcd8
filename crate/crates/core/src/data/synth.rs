//! Deterministic procedural dataset generator.
//!
//! Each class is a parametric arrangement of oriented bars and radial blobs
//! on a dark background. Class identity is carried entirely by features that
//! survive flips and right-angle rotations — bar count, bar length, bar
//! intensity, and blob configuration (count/size/brightness) — drawn from a
//! collision-free feature grid, so every augmentation is label-preserving.
//! Each class also owns a characteristic orientation and blob placement
//! angle; samples jitter around them, so flips/rotations shift the pose
//! distribution without touching class identity.
//!
//! All randomness comes from per-class and per-sample derived streams of the
//! master seed: the same seed yields a bit-identical dataset regardless of
//! generation order or platform.

use super::dataset::{LabeledDataset, Split};
use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};
use crate::seeds::{TAG_SYNTH_CLASS, TAG_SYNTH_GRID, TAG_SYNTH_SAMPLE};

const GRID_BAR_COUNTS: [usize; 3] = [1, 2, 3];
const GRID_BAR_LENGTHS: [f64; 2] = [0.32, 0.60];
const GRID_BAR_INTENSITIES: [f64; 2] = [0.55, 0.95];
/// (count, sigma, intensity) — fused so no two combinations are degenerate
/// (e.g. radius variants of a zero-blob class).
const GRID_BLOBS: [(usize, f64, f64); 7] = [
    (0, 0.0, 0.0),
    (1, 0.10, 0.50),
    (1, 0.10, 0.95),
    (1, 0.20, 0.50),
    (1, 0.20, 0.95),
    (2, 0.10, 0.80),
    (2, 0.20, 0.60),
];
/// Total distinct class archetypes available.
pub const MAX_CLASSES: usize =
    GRID_BAR_COUNTS.len() * GRID_BAR_LENGTHS.len() * GRID_BAR_INTENSITIES.len() * GRID_BLOBS.len();

const BAR_THICKNESS: f64 = 0.10;
const ORIENT_JITTER: f64 = 0.12;
const CENTER_JITTER: f64 = 0.04;
const SIZE_JITTER: f64 = 0.10;
const INTENSITY_JITTER: f64 = 0.05;
const BAR_PLACE_JITTER: f64 = 0.03;
const BLOB_ANGLE_JITTER: f64 = 0.15;
const BACKGROUND: f64 = 0.08;
const BACKGROUND_JITTER: f64 = 0.02;
const PIXEL_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
struct Archetype {
    bar_count: usize,
    bar_length: f64,
    bar_intensity: f64,
    blob_count: usize,
    blob_sigma: f64,
    blob_intensity: f64,
}

fn archetype(index: usize) -> Archetype {
    let bar_count = GRID_BAR_COUNTS[index % 3];
    let bar_length = GRID_BAR_LENGTHS[(index / 3) % 2];
    let bar_intensity = GRID_BAR_INTENSITIES[(index / 6) % 2];
    let (blob_count, blob_sigma, blob_intensity) = GRID_BLOBS[(index / 12) % 7];
    Archetype {
        bar_count,
        bar_length,
        bar_intensity,
        blob_count,
        blob_sigma,
        blob_intensity,
    }
}

/// Class-level pose parameters (jittered per sample).
struct ClassPose {
    theta: f64,
    blob_angle: f64,
    bar_spacing: f64,
    blob_radius: f64,
}

fn class_pose(seed: u64, class: usize) -> ClassPose {
    let mut rng = Rng::derive(seed, TAG_SYNTH_CLASS, class as u64);
    ClassPose {
        theta: rng.uniform() * std::f64::consts::PI,
        blob_angle: rng.uniform() * std::f64::consts::TAU,
        bar_spacing: rng.uniform_in(0.32, 0.50),
        blob_radius: rng.uniform_in(0.45, 0.70),
    }
}

fn edge(t: f64, soft: f64) -> f64 {
    (t / soft + 0.5).clamp(0.0, 1.0)
}

fn render_sample(
    arch: Archetype,
    pose: &ClassPose,
    size: usize,
    rng: &mut Rng,
) -> Tensor<f32> {
    let theta = pose.theta + rng.normal() * ORIENT_JITTER;
    let cx = rng.normal() * CENTER_JITTER;
    let cy = rng.normal() * CENTER_JITTER;
    let len_mult = (rng.normal() * SIZE_JITTER).exp();
    let thick_mult = (rng.normal() * SIZE_JITTER).exp();
    let bar_intensity = (arch.bar_intensity + rng.normal() * INTENSITY_JITTER).clamp(0.2, 1.0);
    let mut bar_offsets = Vec::with_capacity(arch.bar_count);
    for _ in 0..arch.bar_count {
        bar_offsets.push((
            rng.normal() * BAR_PLACE_JITTER,
            rng.normal() * BAR_PLACE_JITTER,
        ));
    }
    let (blob_angle, blob_radius, blob_sigma, blob_intensity) = if arch.blob_count > 0 {
        let angle = pose.blob_angle + rng.normal() * BLOB_ANGLE_JITTER;
        let radius = pose.blob_radius * (rng.normal() * SIZE_JITTER).exp();
        let sigma = arch.blob_sigma * (rng.normal() * SIZE_JITTER).exp();
        let intensity = (arch.blob_intensity + rng.normal() * INTENSITY_JITTER).clamp(0.2, 1.0);
        (angle, radius, sigma, intensity)
    } else {
        (0.0, 0.0, 1.0, 0.0)
    };
    let background = BACKGROUND + rng.normal() * BACKGROUND_JITTER;

    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let (perp_x, perp_y) = (-dir_y, dir_x);
    let half_len = arch.bar_length * len_mult;
    let half_thick = BAR_THICKNESS * thick_mult;
    let soft = 2.0 / size as f64;

    let mut bar_centers = Vec::with_capacity(arch.bar_count);
    for (b, (jx, jy)) in bar_offsets.iter().enumerate() {
        let lane = (b as f64 - (arch.bar_count as f64 - 1.0) / 2.0) * pose.bar_spacing;
        bar_centers.push((cx + perp_x * lane + jx, cy + perp_y * lane + jy));
    }
    let mut blob_centers = Vec::with_capacity(arch.blob_count);
    for j in 0..arch.blob_count {
        let angle = blob_angle + j as f64 * std::f64::consts::TAU / arch.blob_count.max(1) as f64;
        blob_centers.push((
            cx + blob_radius * angle.cos(),
            cy + blob_radius * angle.sin(),
        ));
    }

    let mut values = vec![0.0f32; size * size];
    for row in 0..size {
        let y = (row as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let mut v = background;
            for &(bx, by) in &bar_centers {
                let along = ((x - bx) * dir_x + (y - by) * dir_y).abs();
                let across = ((x - bx) * perp_x + (y - by) * perp_y).abs();
                v += bar_intensity
                    * edge(half_len - along, soft)
                    * edge(half_thick - across, soft);
            }
            for &(gx, gy) in &blob_centers {
                let d2 = (x - gx) * (x - gx) + (y - gy) * (y - gy);
                v += blob_intensity * (-d2 / (2.0 * blob_sigma * blob_sigma)).exp();
            }
            v += rng.normal() * PIXEL_NOISE;
            // Quantize to the byte grid so the PGM round trip is bit-exact.
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            values[row * size + col] = super::netpbm::byte_to_unit(byte);
        }
    }
    Tensor::new(vec![1, size, size], values).expect("rendered shape is consistent")
}

/// Number of classes assigned to each split for a given class count:
/// half (meta-)train, a quarter validation, the rest meta-test.
pub fn split_sizes(class_count: usize) -> (usize, usize, usize) {
    let train = (class_count / 2).max(1);
    let val = (class_count / 4).max(1);
    (train, val, class_count - train - val)
}

/// Generate a deterministic dataset of grayscale `image_size`² images:
/// `class_count` classes (≤ `MAX_CLASSES`), `samples_per_class` each.
/// Classes are assigned to splits in id order per `split_sizes`.
pub fn synth_generate(
    class_count: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(4..=MAX_CLASSES).contains(&class_count) {
        return Err(Error::Config(format!(
            "class_count must be in 4..={MAX_CLASSES}, got {class_count}"
        )));
    }
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    if image_size < 8 {
        return Err(Error::Config(format!(
            "image_size must be at least 8, got {image_size}"
        )));
    }
    let mut combo_ids: Vec<usize> = (0..MAX_CLASSES).collect();
    Rng::derive(seed, TAG_SYNTH_GRID, 0).shuffle(&mut combo_ids);
    let (train, val, _) = split_sizes(class_count);

    let mut images = Vec::with_capacity(class_count * samples_per_class);
    let mut labels = Vec::with_capacity(class_count * samples_per_class);
    let mut splits = Vec::with_capacity(class_count * samples_per_class);
    for (class, &combo) in combo_ids.iter().take(class_count).enumerate() {
        let arch = archetype(combo);
        let pose = class_pose(seed, class);
        let split = if class < train {
            Split::Train
        } else if class < train + val {
            Split::Val
        } else {
            Split::Test
        };
        for sample in 0..samples_per_class {
            let mut rng = Rng::derive(
                seed,
                TAG_SYNTH_SAMPLE,
                (class * samples_per_class + sample) as u64,
            );
            images.push(render_sample(arch, &pose, image_size, &mut rng));
            labels.push(format!("class_{class:02}"));
            splits.push(split);
        }
    }
    LabeledDataset::from_parts(images, labels, splits)
}
