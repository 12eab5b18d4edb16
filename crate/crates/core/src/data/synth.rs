//! Synthetic domain-shift benchmark.
//!
//! Class centers live in a shared random `latent_rank`-dimensional subspace:
//! `c = A·u` with `A` a fixed `dim × latent_rank` Gaussian matrix scaled by
//! `1/√latent_rank` and `u ~ N(0, class_separation²)`, so that every class,
//! real or game, differs from the others only inside that subspace. With
//! `latent_rank == dim` the centers are plain isotropic Gaussians.
//!
//! Every real class has a latent center `c`. Ground features are Gaussian
//! around `c`; real aerial features are the same kind of draw pushed through
//! one fixed random linear map `M = I + ρ·G/√dim` (shared by all classes),
//! shifted, and perturbed with isotropic noise. Game aerial features live in
//! the aerial domain too: the first `game_overlap` game classes reuse real
//! class centers, the rest get fresh centers, and all of them are offset by
//! one game-specific vector. Every aerial draw, real or game, also carries a
//! nuisance component `B·ξ` with `B` a fixed `dim × nuisance_rank` matrix of
//! unit columns and `ξ ~ N(0, nuisance_scale²)`. A constant baseline is added
//! and a final ReLU keeps every feature non-negative.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBenchConfig {
    pub num_classes: usize,
    pub game_overlap: usize,
    pub game_extra_classes: usize,
    pub dim: usize,
    /// Dimension of the subspace holding the class centers.
    pub latent_rank: usize,
    pub ground_per_class: usize,
    pub aerial_per_class: usize,
    pub game_per_class: usize,
    /// Standard deviation of the latent class centers.
    pub class_separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    /// ρ in `M = I + ρ·G/√dim`.
    pub map_perturbation: f64,
    /// Standard deviation of the isotropic noise added to aerial features.
    pub aerial_noise: f64,
    /// Norm of the shift applied after the map.
    pub aerial_shift: f64,
    /// Number of high-variance nuisance directions shared by aerial data.
    pub nuisance_rank: usize,
    /// Standard deviation along each nuisance direction.
    pub nuisance_scale: f64,
    /// Norm of the offset separating game clusters from real ones.
    pub game_offset: f64,
    /// Constant added to every feature before the final ReLU.
    pub baseline: f64,
    pub seed: u64,
}

impl Default for SynthBenchConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            game_overlap: 3,
            game_extra_classes: 4,
            dim: 64,
            latent_rank: 8,
            ground_per_class: 100,
            aerial_per_class: 50,
            game_per_class: 100,
            class_separation: 1.0,
            spread: 1.0,
            map_perturbation: 1.0,
            aerial_noise: 0.2,
            aerial_shift: 2.0,
            nuisance_rank: 8,
            nuisance_scale: 5.5,
            game_offset: 0.5,
            baseline: 3.0,
            seed: 0,
        }
    }
}

impl SynthBenchConfig {
    pub fn game_classes(&self) -> usize {
        self.game_overlap + self.game_extra_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("benchmark dim must be at least 2".into()));
        }
        if self.latent_rank == 0 || self.latent_rank > self.dim {
            return Err(Error::Config(format!(
                "latent_rank must be in 1..={}",
                self.dim
            )));
        }
        if self.nuisance_rank > self.dim {
            return Err(Error::Config(format!("nuisance_rank must be at most {}", self.dim)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("benchmark needs at least one real class".into()));
        }
        if self.game_overlap > self.num_classes {
            return Err(Error::Config(format!(
                "game_overlap {} exceeds {} real classes",
                self.game_overlap, self.num_classes
            )));
        }
        let reals = [
            ("class_separation", self.class_separation),
            ("spread", self.spread),
            ("map_perturbation", self.map_perturbation),
            ("aerial_noise", self.aerial_noise),
            ("aerial_shift", self.aerial_shift),
            ("nuisance_scale", self.nuisance_scale),
            ("game_offset", self.game_offset),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.baseline.is_finite() {
            return Err(Error::Config("baseline must be finite".into()));
        }
        Ok(())
    }
}

/// The three datasets of one benchmark draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub ground: Dataset,
    pub real_aerial: Dataset,
    pub game_aerial: Dataset,
}

pub fn real_label(class: usize) -> String {
    format!("action_{class:02}")
}

pub fn game_label(class: usize) -> String {
    format!("game_{class:02}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian vector rescaled to an exact norm.
fn direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Array1<f64> {
    let v = gaussian_vec(rng, dim, 1.0);
    let len = v.dot(&v).sqrt();
    if len == 0.0 {
        return Array1::zeros(dim);
    }
    v * (norm / len)
}

pub fn synth_benchmark(config: &SynthBenchConfig) -> Result<SynthBenchmark> {
    config.validate()?;
    let d = config.dim;
    let mut rng = rng::stream_rng(config.seed, rng::stream::SYNTH);

    let g = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    let map = Array2::<f64>::eye(d) + g * (config.map_perturbation / (d as f64).sqrt());
    let shift = direction(&mut rng, d, config.aerial_shift);
    let game_offset = direction(&mut rng, d, config.game_offset);

    let r = config.latent_rank;
    let basis = if r == d {
        Array2::eye(d)
    } else {
        Array2::from_shape_fn((d, r), |_| rng.sample::<f64, _>(StandardNormal)) / (r as f64).sqrt()
    };
    let center = |rng: &mut ChaCha8Rng| basis.dot(&gaussian_vec(rng, r, config.class_separation));
    let real_centers: Vec<Array1<f64>> = (0..config.num_classes).map(|_| center(&mut rng)).collect();
    let extra_centers: Vec<Array1<f64>> = (0..config.game_extra_classes).map(|_| center(&mut rng)).collect();

    let finish = |v: Array1<f64>| -> Vec<f64> {
        v.iter().map(|x| (x + config.baseline).max(0.0)).collect()
    };

    let mut ground = Vec::new();
    for (c, center) in real_centers.iter().enumerate() {
        for i in 0..config.ground_per_class {
            let x = center + &gaussian_vec(&mut rng, d, config.spread);
            ground.push(FeatureRecord {
                id: format!("ground-{c:02}-{i:04}"),
                label: real_label(c),
                domain: Domain::RealGround,
                features: finish(x),
            });
        }
    }

    let nuisance: Vec<Array1<f64>> = (0..config.nuisance_rank).map(|_| direction(&mut rng, d, 1.0)).collect();
    let to_aerial = |rng: &mut ChaCha8Rng, latent: Array1<f64>, offset: &Array1<f64>| {
        let mut x = map.dot(&latent) + &shift + offset + gaussian_vec(rng, d, config.aerial_noise);
        for b in &nuisance {
            x.scaled_add(config.nuisance_scale * rng.sample::<f64, _>(StandardNormal), b);
        }
        x
    };

    let zero = Array1::zeros(d);
    let mut aerial = Vec::new();
    for (c, center) in real_centers.iter().enumerate() {
        for i in 0..config.aerial_per_class {
            let latent = center + &gaussian_vec(&mut rng, d, config.spread);
            aerial.push(FeatureRecord {
                id: format!("aerial-{c:02}-{i:04}"),
                label: real_label(c),
                domain: Domain::RealAerial,
                features: finish(to_aerial(&mut rng, latent, &zero)),
            });
        }
    }

    let game_centers = real_centers[..config.game_overlap]
        .iter()
        .chain(extra_centers.iter());
    let mut game = Vec::new();
    for (c, center) in game_centers.enumerate() {
        for i in 0..config.game_per_class {
            let latent = center + &gaussian_vec(&mut rng, d, config.spread);
            game.push(FeatureRecord {
                id: format!("game-{c:02}-{i:04}"),
                label: game_label(c),
                domain: Domain::GameAerial,
                features: finish(to_aerial(&mut rng, latent, &game_offset)),
            });
        }
    }

    let real_space: Vec<String> = (0..config.num_classes).map(real_label).collect();
    let game_space: Vec<String> = (0..config.game_classes()).map(game_label).collect();
    Ok(SynthBenchmark {
        ground: Dataset::with_label_space(ground, real_space.clone())?,
        real_aerial: Dataset::with_label_space(aerial, real_space)?,
        game_aerial: Dataset::with_label_space(game, game_space)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthBenchConfig {
        SynthBenchConfig {
            dim: 6,
            nuisance_rank: 2,
            latent_rank: 3,
            ground_per_class: 7,
            aerial_per_class: 5,
            game_per_class: 4,
            ..SynthBenchConfig::default()
        }
    }

    #[test]
    fn same_seed_same_triple() {
        assert_eq!(synth_benchmark(&small()).unwrap(), synth_benchmark(&small()).unwrap());
        let other = SynthBenchConfig { seed: 1, ..small() };
        assert_ne!(synth_benchmark(&small()).unwrap(), synth_benchmark(&other).unwrap());
    }

    #[test]
    fn counts_match_config() {
        let cfg = small();
        let b = synth_benchmark(&cfg).unwrap();
        assert!(b.ground.class_counts().iter().all(|&c| c == 7));
        assert!(b.real_aerial.class_counts().iter().all(|&c| c == 5));
        assert_eq!(b.game_aerial.num_classes(), 7);
        assert!(b.game_aerial.class_counts().iter().all(|&c| c == 4));
        assert_eq!(b.ground.label_space(), b.real_aerial.label_space());
        assert!(b
            .ground
            .records()
            .iter()
            .chain(b.real_aerial.records())
            .chain(b.game_aerial.records())
            .all(|r| r.features.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn no_gap_means_equal_class_means() {
        let cfg = SynthBenchConfig {
            spread: 0.0,
            aerial_noise: 0.0,
            map_perturbation: 0.0,
            aerial_shift: 0.0,
            nuisance_scale: 0.0,
            ..small()
        };
        let b = synth_benchmark(&cfg).unwrap();
        let mean = |d: &Dataset, class: usize| {
            let idx = &d.indices_by_class()[class];
            d.rows(idx).mean_axis(ndarray::Axis(0)).unwrap()
        };
        for c in 0..cfg.num_classes {
            let (a, g) = (mean(&b.real_aerial, c), mean(&b.ground, c));
            assert!(a.iter().zip(g.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn rank_one_centers_are_collinear() {
        let cfg = SynthBenchConfig {
            latent_rank: 1,
            spread: 0.0,
            baseline: 50.0,
            ..small()
        };
        let b = synth_benchmark(&cfg).unwrap();
        let centers: Vec<Vec<f64>> = b
            .ground
            .indices_by_class()
            .iter()
            .map(|idx| b.ground.records()[idx[0]].features.iter().map(|v| v - 50.0).collect())
            .collect();
        let first = &centers[0];
        for c in &centers[1..] {
            let dot: f64 = first.iter().zip(c).map(|(a, b)| a * b).sum();
            let n1: f64 = first.iter().map(|a| a * a).sum::<f64>().sqrt();
            let n2: f64 = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((dot.abs() / (n1 * n2) - 1.0).abs() < 1e-9);
        }
        let too_big = SynthBenchConfig { latent_rank: 7, ..small() };
        assert!(matches!(synth_benchmark(&too_big), Err(Error::Config(_))));
    }

    #[test]
    fn overlap_larger_than_real_classes_is_rejected() {
        let cfg = SynthBenchConfig {
            num_classes: 2,
            game_overlap: 3,
            ..small()
        };
        assert!(matches!(synth_benchmark(&cfg), Err(Error::Config(_))));
    }
}
