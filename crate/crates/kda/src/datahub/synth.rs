//! Synthetic clustered dataset generator. Every class draws one latent
//! prototype; audio, visual, and knowledge vectors are modality-specific
//! linear images of that prototype plus Gaussian noise, so cross-modal
//! alignment is learnable by construction.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassKnowledge, DataError, Dataset, FeatureRecord, GzslSplit};

/// Latent prototype width shared by all modalities. Kept low so the seen
/// classes cover the prototype space and unseen classes interpolate rather
/// than extrapolate.
const LATENT_DIM: usize = 2;
/// Description embeddings per class, so per-class Gaussian margins see a
/// nonzero spread rather than only the single-description degenerate case.
const DESCRIPTIONS_PER_CLASS: usize = 3;
/// Minimum pairwise distance between latent prototypes; resampling below
/// this keeps classes separable instead of colliding by luck of the draw.
const MIN_PROTOTYPE_SEPARATION: f64 = 1.0;
const PROTOTYPE_ATTEMPTS: usize = 200;

/// Configuration of the generator; generation is a pure function of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub cluster_spread: f64,
    pub modality_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seen_classes: 5,
            unseen_classes: 3,
            samples_per_class: 100,
            audio_dim: 64,
            visual_dim: 64,
            text_dim: 32,
            cluster_spread: 0.1,
            modality_noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [
            ("seen_classes", self.seen_classes),
            ("unseen_classes", self.unseen_classes),
            ("samples_per_class", self.samples_per_class),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
        ] {
            if v == 0 {
                return Err(DataError::Validation {
                    rule: format!("synth config: {name} must be ≥ 1"),
                });
            }
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("modality_noise", self.modality_noise),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(DataError::Validation {
                    rule: format!("synth config: {name} = {v} must be a non-negative float"),
                });
            }
        }
        Ok(())
    }
}

/// Box–Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A LATENT_DIM×dim projection with entries scaled so projected prototypes
/// keep roughly unit per-coordinate variance.
fn projection(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    (0..LATENT_DIM * dim).map(|_| normal(rng) * scale).collect()
}

fn project(latent: &[f64], proj: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (l, row) in latent.iter().zip(proj.chunks(dim)) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += l * p;
        }
    }
    out
}

fn min_distance(candidate: &[f64], existing: &[Vec<f64>]) -> f64 {
    existing
        .iter()
        .map(|p| {
            p.iter()
                .zip(candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Draw latent prototypes with pairwise separation, falling back to the most
/// isolated candidate if the attempt cap is hit (keeps crowded latent spaces
/// deterministic rather than looping). Seen prototypes are standard normal
/// draws; unseen prototypes are convex combinations of the seen ones, so
/// unseen classes interpolate the seen latent structure instead of landing
/// where no training signal ever reaches.
fn draw_prototype(rng: &mut ChaCha8Rng, seen: &[Vec<f64>], existing: &[Vec<f64>]) -> Vec<f64> {
    let interpolate = !seen.is_empty();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..PROTOTYPE_ATTEMPTS {
        let candidate: Vec<f64> = if interpolate {
            let mut weights: Vec<f64> = (0..seen.len()).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let mut c = vec![0.0; LATENT_DIM];
            for (w, p) in weights.iter().zip(seen) {
                for (acc, v) in c.iter_mut().zip(p) {
                    *acc += w * v;
                }
            }
            c
        } else {
            (0..LATENT_DIM).map(|_| normal(rng)).collect()
        };
        let nearest = min_distance(&candidate, existing);
        if nearest >= MIN_PROTOTYPE_SEPARATION {
            return candidate;
        }
        if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
            best = Some((nearest, candidate));
        }
    }
    best.expect("attempt cap is positive").1
}

/// Generate a validated synthetic dataset. Classes 0..seen_classes are seen;
/// the rest are unseen. One fifth of each seen class's samples (at least none
/// for tiny classes) is held out as test-seen; every unseen sample is
/// test-unseen.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p_audio = projection(&mut rng, config.audio_dim);
    let p_visual = projection(&mut rng, config.visual_dim);
    let p_text = projection(&mut rng, config.text_dim);

    let total_classes = config.seen_classes + config.unseen_classes;
    let mut records = Vec::new();
    let mut knowledge = BTreeMap::new();
    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    let holdout = config.samples_per_class / 5;

    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(total_classes);
    for class in 0..total_classes {
        let class_id = class as i64;
        let seen = class < config.seen_classes;
        let seen_protos = &prototypes[..config.seen_classes.min(prototypes.len())];
        let prototype = if seen {
            draw_prototype(&mut rng, &[], &prototypes)
        } else {
            draw_prototype(&mut rng, seen_protos, &prototypes)
        };
        prototypes.push(prototype.clone());

        let text_base = project(&prototype, &p_text, config.text_dim);
        let embeddings: Vec<Vec<f64>> = (0..DESCRIPTIONS_PER_CLASS)
            .map(|_| {
                text_base
                    .iter()
                    .map(|v| v + config.cluster_spread * normal(&mut rng))
                    .collect()
            })
            .collect();
        knowledge.insert(
            class_id,
            ClassKnowledge {
                class_id,
                name: format!("class_{class:03}"),
                embeddings,
            },
        );

        let audio_base = project(&prototype, &p_audio, config.audio_dim);
        let visual_base = project(&prototype, &p_visual, config.visual_dim);
        for s in 0..config.samples_per_class {
            let id = format!("c{class:03}_s{s:04}");
            let audio = audio_base
                .iter()
                .map(|v| v + config.modality_noise * normal(&mut rng))
                .collect();
            let visual = visual_base
                .iter()
                .map(|v| v + config.modality_noise * normal(&mut rng))
                .collect();
            records.push(FeatureRecord {
                id: id.clone(),
                class_id,
                audio,
                visual,
            });
            if !seen {
                test_unseen.push(id);
            } else if s >= config.samples_per_class - holdout {
                test_seen.push(id);
            } else {
                train.push(id);
            }
        }
    }

    let split = GzslSplit {
        seen: (0..config.seen_classes as i64).collect(),
        unseen: (config.seen_classes as i64..total_classes as i64).collect(),
        train,
        test_seen,
        test_unseen,
    };
    Dataset::assemble(
        config.audio_dim,
        config.visual_dim,
        config.text_dim,
        records,
        knowledge,
        split,
    )
}
