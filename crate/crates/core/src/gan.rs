//! Conditional WGAN-GP feature synthesizer.
//!
//! The generator `G(z, f_g)` maps unit-Gaussian noise plus a ground feature
//! to an aerial feature. The critic `D(x | f_g)` scores an aerial feature
//! given the same ground condition. Conditioning is by concatenation: the
//! generator sees `[z, f_g]`, the critic `[x, f_g]`.
//!
//! Critic objective (minimized over D):
//!
//! ```text
//! E[D(G(z, f_g) | f_g)] − E[D(f_a | f_g)] + λ · E[(‖∇_m D(m | f_g)‖₂ − 1)²]
//! m = t · G(z, f_g) + (1 − t) · f_g,    t ~ U(0, 1)
//! ```
//!
//! Generator objective (minimized over G):
//!
//! ```text
//! −E[D(G(z, f_g) | f_g)] + β · E[−log P(y_g | G(z, f_g))]
//! ```
//!
//! where `P` is a softmax classifier pretrained on the few real aerial
//! examples and frozen afterwards, and `y_g` is the ground record's label.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, Dataset, Domain, FeatureRecord, NetworkState};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, LayerSpec, Mlp, DEFAULT_LEAKY_SLOPE, PROB_FLOOR};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng;

/// Shape of the generator: four dense layers, leaky ReLU on the first three
/// and ReLU on the last, so synthesized features are non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub condition_dim: usize,
    pub output_dim: usize,
    pub hidden: [usize; 3],
    pub leaky_slope: f64,
}

impl GeneratorSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let leaky = Activation::LeakyRelu {
            slope: self.leaky_slope,
        };
        let [h1, h2, h3] = self.hidden;
        vec![
            LayerSpec::new(self.noise_dim + self.condition_dim, h1, leaky),
            LayerSpec::new(h1, h2, leaky),
            LayerSpec::new(h2, h3, leaky),
            LayerSpec::new(h3, self.output_dim, Activation::Relu),
        ]
    }
}

/// Shape of the critic: four dense layers, leaky ReLU on the first three,
/// scalar linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub feature_dim: usize,
    pub condition_dim: usize,
    pub hidden: [usize; 3],
    pub leaky_slope: f64,
}

impl CriticSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let leaky = Activation::LeakyRelu {
            slope: self.leaky_slope,
        };
        let [h1, h2, h3] = self.hidden;
        vec![
            LayerSpec::new(self.feature_dim + self.condition_dim, h1, leaky),
            LayerSpec::new(h1, h2, leaky),
            LayerSpec::new(h2, h3, leaky),
            LayerSpec::new(h3, 1, Activation::Linear),
        ]
    }
}

/// Which real point the gradient-penalty interpolates pair with the
/// generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// `m = t·G(z, f_g) + (1 − t)·f_g`; needs equal ground and aerial dims.
    GeneratedToGround,
    /// `m = t·G(z, f_g) + (1 − t)·f_a`, the usual WGAN-GP pairing.
    GeneratedToRealAerial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub generator_hidden: [usize; 3],
    pub critic_hidden: [usize; 3],
    pub leaky_slope: f64,
    pub lambda_gp: f64,
    pub beta_cls: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    /// One epoch is `ceil(|ground| / batch)` generator steps.
    pub epochs: usize,
    pub generator_adam: AdamHyper,
    pub critic_adam: AdamHyper,
    pub classifier_adam: AdamHyper,
    /// Full-batch steps for the frozen softmax classifier.
    pub classifier_steps: usize,
    /// Use `−E[log D(f_a | f_g)]` for the real term instead of `−E[D(f_a | f_g)]`.
    pub eq2_literal: bool,
    pub interpolation: Interpolation,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 312,
            generator_hidden: [256, 256, 256],
            critic_hidden: [256, 256, 256],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            lambda_gp: 10.0,
            beta_cls: 0.01,
            n_critic: 5,
            batch_size: 64,
            epochs: 100,
            generator_adam: AdamHyper::gan(),
            critic_adam: AdamHyper::gan(),
            classifier_adam: AdamHyper::classifier(),
            classifier_steps: 1000,
            eq2_literal: false,
            interpolation: Interpolation::GeneratedToGround,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.generator_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("GAN layer sizes must be positive".into()));
        }
        if self.n_critic == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_critic and batch_size must be positive".into()));
        }
        if !(self.lambda_gp >= 0.0) || !(self.beta_cls >= 0.0) {
            return Err(Error::Config("lambda_gp and beta_cls must be non-negative".into()));
        }
        self.generator_adam.validate()?;
        self.critic_adam.validate()?;
        self.classifier_adam.validate()
    }

    /// Critic updates performed by [`train_wcgan`] for `ground_len` records.
    pub fn critic_steps(&self, ground_len: usize) -> usize {
        let batch = self.batch_size.min(ground_len).max(1);
        self.epochs * ground_len.div_ceil(batch) * self.n_critic
    }
}

/// Loss terms of one critic or generator evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLossReport {
    pub critic_wasserstein_gap: f64,
    pub gradient_penalty: f64,
    pub generator_adversarial: f64,
    pub classification_loss: f64,
}

impl GanLossReport {
    fn mean(reports: &[GanLossReport]) -> GanLossReport {
        let n = reports.len().max(1) as f64;
        let mut out = GanLossReport::default();
        for r in reports {
            out.critic_wasserstein_gap += r.critic_wasserstein_gap / n;
            out.gradient_penalty += r.gradient_penalty / n;
            out.generator_adversarial += r.generator_adversarial / n;
            out.classification_loss += r.classification_loss / n;
        }
        out
    }
}

/// A trained (or fresh) generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub net: Mlp,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let net = Mlp::new(spec.layer_specs(), seed)?;
        Ok(Self { spec, net })
    }

    fn input(&self, noise: ArrayView2<f64>, condition: ArrayView2<f64>) -> Result<Array2<f64>> {
        if noise.ncols() != self.spec.noise_dim || condition.ncols() != self.spec.condition_dim {
            return Err(Error::Shape(format!(
                "generator expects noise {} and condition {}, got {} and {}",
                self.spec.noise_dim,
                self.spec.condition_dim,
                noise.ncols(),
                condition.ncols()
            )));
        }
        if noise.nrows() != condition.nrows() {
            return Err(Error::Shape("noise and condition batch sizes differ".into()));
        }
        Ok(concatenate![Axis(1), noise, condition])
    }

    /// `G(z, f_g)` for a batch.
    pub fn generate(&self, noise: ArrayView2<f64>, condition: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict(self.input(noise, condition)?.view())
    }
}

fn hcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), a, b]
}

/// Inputs of one critic evaluation. Row `i` of every matrix belongs to the
/// same sample.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub ground: Array2<f64>,
    pub aerial: Array2<f64>,
    pub noise: Array2<f64>,
    /// Interpolation coefficients in `[0, 1]`.
    pub t: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    pub report: GanLossReport,
    /// Gradient with respect to the critic parameters.
    pub grads: nn::ParamBundle,
    pub generated: Array2<f64>,
    pub interpolates: Array2<f64>,
}

/// Options that change the critic objective.
#[derive(Debug, Clone, Copy)]
pub struct CriticObjective {
    pub lambda_gp: f64,
    pub eq2_literal: bool,
    pub interpolation: Interpolation,
}

impl From<&GanConfig> for CriticObjective {
    fn from(c: &GanConfig) -> Self {
        Self {
            lambda_gp: c.lambda_gp,
            eq2_literal: c.eq2_literal,
            interpolation: c.interpolation,
        }
    }
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("non-finite {what}")))
    }
}

/// Build gradient-penalty interpolates `t·generated + (1 − t)·anchor`.
pub fn interpolate(generated: ArrayView2<f64>, anchor: ArrayView2<f64>, t: &Array1<f64>) -> Result<Array2<f64>> {
    if generated.dim() != anchor.dim() {
        return Err(Error::Shape(format!(
            "cannot interpolate {:?} with {:?}; equal feature dimensions are required",
            generated.dim(),
            anchor.dim()
        )));
    }
    if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Input("interpolation coefficient outside [0, 1]".into()));
    }
    let mut m = anchor.to_owned();
    for ((mut row, g), &t) in m.rows_mut().into_iter().zip(generated.rows()).zip(t) {
        row.zip_mut_with(&g, |a, &g| *a = t * g + (1.0 - t) * *a);
    }
    Ok(m)
}

/// Critic objective and its gradient with respect to the critic.
pub fn critic_loss(
    generator: &Generator,
    critic: &Mlp,
    batch: &CriticBatch,
    objective: CriticObjective,
) -> Result<CriticLoss> {
    let n = batch.ground.nrows();
    if n == 0 || batch.aerial.nrows() != n || batch.t.len() != n {
        return Err(Error::Shape("critic batch parts must share one non-zero size".into()));
    }
    let feature_dim = batch.aerial.ncols();
    let generated = generator.generate(batch.noise.view(), batch.ground.view())?;
    let anchor = match objective.interpolation {
        Interpolation::GeneratedToGround => batch.ground.view(),
        Interpolation::GeneratedToRealAerial => batch.aerial.view(),
    };
    let interpolates = interpolate(generated.view(), anchor, &batch.t)?;

    let fake_in = hcat(generated.view(), batch.ground.view());
    let real_in = hcat(batch.aerial.view(), batch.ground.view());
    let fake_cache = critic.forward(fake_in.view())?;
    let real_cache = critic.forward(real_in.view())?;
    let nf = n as f64;

    let fake_mean = fake_cache.output().sum() / nf;
    let fake_back = critic.backprop(&fake_cache, Array2::from_elem((n, 1), 1.0 / nf).view())?;

    let real_out = real_cache.output();
    let (real_term, real_grad) = if objective.eq2_literal {
        // −E[log D] with D floored; the floor region has zero gradient.
        let term = -real_out.iter().map(|d| d.max(PROB_FLOOR).ln()).sum::<f64>() / nf;
        let grad = real_out.mapv(|d| if d > PROB_FLOOR { -1.0 / (nf * d) } else { 0.0 });
        (term, grad)
    } else {
        (-real_out.sum() / nf, Array2::from_elem((n, 1), -1.0 / nf))
    };
    let real_back = critic.backprop(&real_cache, real_grad.view())?;

    let gap = check_finite(fake_mean + real_term, "critic output")?;
    let mut grads = fake_back.params;
    grads.add_scaled(&real_back.params, 1.0);

    let mut gradient_penalty = 0.0;
    if objective.lambda_gp > 0.0 {
        let interp_in = hcat(interpolates.view(), batch.ground.view());
        let gp = critic.gradient_penalty(interp_in.view(), feature_dim, 1.0)?;
        gradient_penalty = check_finite(gp.penalty, "gradient penalty")?;
        grads.add_scaled(&gp.params, objective.lambda_gp);
    }
    let loss = gap + objective.lambda_gp * gradient_penalty;
    Ok(CriticLoss {
        loss,
        report: GanLossReport {
            critic_wasserstein_gap: gap,
            gradient_penalty,
            ..GanLossReport::default()
        },
        grads,
        generated,
        interpolates,
    })
}

#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub loss: f64,
    pub report: GanLossReport,
    /// Gradient with respect to the generator parameters only.
    pub grads: nn::ParamBundle,
}

/// Generator objective and its gradient with respect to the generator.
/// Critic and classifier are read-only.
pub fn generator_loss(
    generator: &Generator,
    critic: &Mlp,
    classifier: &Mlp,
    ground: ArrayView2<f64>,
    ground_labels: &[usize],
    noise: ArrayView2<f64>,
    beta_cls: f64,
) -> Result<GeneratorLoss> {
    let n = ground.nrows();
    if n == 0 || ground_labels.len() != n {
        return Err(Error::Shape("ground batch and labels must share one non-zero size".into()));
    }
    if let Some(&bad) = ground_labels.iter().find(|&&y| y >= classifier.output_dim()) {
        return Err(Error::Dataset(format!(
            "label {bad} outside the classifier's {} classes",
            classifier.output_dim()
        )));
    }
    let nf = n as f64;
    let g_in = generator.input(noise, ground)?;
    let g_cache = generator.net.forward(g_in.view())?;
    let fake = g_cache.output().clone();
    let d = fake.ncols();

    let critic_in = hcat(fake.view(), ground);
    let d_cache = critic.forward(critic_in.view())?;
    let adversarial = check_finite(-d_cache.output().sum() / nf, "critic output")?;
    let d_back = critic.backprop(&d_cache, Array2::from_elem((n, 1), -1.0 / nf).view())?;
    let mut grad_fake = d_back.input.slice(s![.., ..d]).to_owned();

    let c_cache = classifier.forward(fake.view())?;
    let classification = nn::mean_cross_entropy(c_cache.output().view(), ground_labels)?;
    if beta_cls > 0.0 {
        let logit_grad = nn::cross_entropy_logit_grad(c_cache.output().view(), ground_labels, beta_cls)?;
        let c_back = classifier.backprop_logits(&c_cache, logit_grad.view())?;
        grad_fake += &c_back.input;
    }
    let grads = generator.net.backprop(&g_cache, grad_fake.view())?.params;
    let loss = check_finite(adversarial + beta_cls * classification, "generator loss")?;
    Ok(GeneratorLoss {
        loss,
        report: GanLossReport {
            generator_adversarial: adversarial,
            classification_loss: classification,
            ..GanLossReport::default()
        },
        grads,
    })
}

/// Single-layer softmax classifier trained full-batch with Adam.
pub fn train_softmax_classifier(
    data: &Dataset,
    steps: usize,
    hyper: &AdamHyper,
    seed: u64,
) -> Result<Mlp> {
    if data.num_classes() < 2 {
        return Err(Error::Dataset(
            "a softmax classifier needs at least two classes".into(),
        ));
    }
    data.require_all_classes("classifier training set")?;
    let x = data.features();
    let y = data.label_indices();
    let mut net = Mlp::new(
        vec![LayerSpec::new(data.dim(), data.num_classes(), Activation::Softmax)],
        rng::derive_seed(seed, rng::stream::CLASSIFIER),
    )?;
    let mut adam = AdamState::new(&net.params);
    for _ in 0..steps {
        let cache = net.forward(x.view())?;
        let g = nn::cross_entropy_logit_grad(cache.output().view(), &y, 1.0)?;
        let grads = net.backprop_logits(&cache, g.view())?.params;
        adam_step(&mut adam, &mut net.params, &grads, hyper)?;
    }
    Ok(net)
}

/// The frozen classifier used inside the generator objective.
pub fn pretrain_classifier(few_aerial: &Dataset, config: &GanConfig, seed: u64) -> Result<Mlp> {
    if few_aerial.is_empty() {
        return Err(Error::Dataset("few-shot aerial set is empty".into()));
    }
    few_aerial.require_domain(Domain::RealAerial, "few-shot aerial set")?;
    train_softmax_classifier(few_aerial, config.classifier_steps, &config.classifier_adam, seed)
}

/// Accuracy of a softmax classifier on a labeled dataset.
pub fn classifier_accuracy(classifier: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty dataset".into()));
    }
    let probs = classifier.predict(data.features().view())?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(data.label_indices())
        .filter(|(p, y)| nn::argmax(p.view()) == *y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedGan {
    pub generator: Generator,
    pub critic: Mlp,
    pub classifier: Mlp,
    pub generator_adam: AdamState,
    pub critic_adam: AdamState,
    pub label_space: Vec<String>,
    /// Mean losses per epoch.
    pub log: Vec<GanLossReport>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Draws batches: random ground records, and for each one a real aerial
/// record of the same class. Records are not paired beyond their class.
struct BatchSampler<'a> {
    ground: &'a Dataset,
    ground_labels: Vec<usize>,
    aerial: &'a Dataset,
    aerial_by_class: Vec<Vec<usize>>,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler<'_> {
    fn ground_indices(&mut self) -> Vec<usize> {
        index::sample(&mut self.rng, self.ground.len(), self.batch).into_vec()
    }

    fn critic_batch(&mut self, noise_rng: &mut ChaCha8Rng, noise_dim: usize) -> CriticBatch {
        let gi = self.ground_indices();
        let ai: Vec<usize> = gi
            .iter()
            .map(|&i| {
                let pool = &self.aerial_by_class[self.ground_labels[i]];
                pool[self.rng.random_range(0..pool.len())]
            })
            .collect();
        CriticBatch {
            ground: self.ground.rows(&gi),
            aerial: self.aerial.rows(&ai),
            noise: gaussian(noise_rng, gi.len(), noise_dim),
            t: Array1::from_shape_fn(gi.len(), |_| noise_rng.random_range(0.0..=1.0)),
        }
    }
}

/// Train generator and critic with `n_critic` critic updates per generator
/// update.
pub fn train_wcgan(ground: &Dataset, few_aerial: &Dataset, config: &GanConfig, seed: u64) -> Result<TrainedGan> {
    config.validate()?;
    if ground.is_empty() || few_aerial.is_empty() {
        return Err(Error::Dataset("GAN training needs ground and aerial records".into()));
    }
    if ground.label_space() != few_aerial.label_space() {
        return Err(Error::Dataset(
            "ground and aerial label spaces differ".into(),
        ));
    }
    ground.require_domain(Domain::RealGround, "ground set")?;
    if config.interpolation == Interpolation::GeneratedToGround && ground.dim() != few_aerial.dim() {
        return Err(Error::Config(format!(
            "interpolating toward ground features needs equal dims (ground {}, aerial {})",
            ground.dim(),
            few_aerial.dim()
        )));
    }
    if few_aerial.records().iter().any(|r| r.features.iter().any(|&v| v < 0.0)) {
        log::warn!(
            "real aerial features contain negative values; the generator's final ReLU cannot produce them"
        );
    }

    let classifier = pretrain_classifier(few_aerial, config, seed)?;
    let mut generator = Generator::new(
        GeneratorSpec {
            noise_dim: config.noise_dim,
            condition_dim: ground.dim(),
            output_dim: few_aerial.dim(),
            hidden: config.generator_hidden,
            leaky_slope: config.leaky_slope,
        },
        rng::derive_seed(seed, 1),
    )?;
    let mut critic = Mlp::new(
        CriticSpec {
            feature_dim: few_aerial.dim(),
            condition_dim: ground.dim(),
            hidden: config.critic_hidden,
            leaky_slope: config.leaky_slope,
        }
        .layer_specs(),
        rng::derive_seed(seed, 2),
    )?;
    let mut generator_adam = AdamState::new(&generator.net.params);
    let mut critic_adam = AdamState::new(&critic.params);

    let batch = config.batch_size.min(ground.len());
    let mut sampler = BatchSampler {
        ground,
        ground_labels: ground.label_indices(),
        aerial: few_aerial,
        aerial_by_class: few_aerial.indices_by_class(),
        batch,
        rng: rng::stream_rng(seed, rng::stream::GAN_BATCH),
    };
    let mut noise_rng = rng::stream_rng(seed, rng::stream::GAN_NOISE);
    let objective = CriticObjective::from(config);
    let iterations = ground.len().div_ceil(batch);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut reports = Vec::with_capacity(iterations);
        let fail = |e: Error| Error::Training(format!("epoch {epoch}: {e}"));
        for _ in 0..iterations {
            let mut critic_report = GanLossReport::default();
            for _ in 0..config.n_critic {
                let cb = sampler.critic_batch(&mut noise_rng, config.noise_dim);
                let out = critic_loss(&generator, &critic, &cb, objective).map_err(fail)?;
                adam_step(&mut critic_adam, &mut critic.params, &out.grads, &config.critic_adam)
                    .map_err(fail)?;
                critic_report = out.report;
            }
            let gi = sampler.ground_indices();
            let labels: Vec<usize> = gi.iter().map(|&i| sampler.ground_labels[i]).collect();
            let noise = gaussian(&mut noise_rng, gi.len(), config.noise_dim);
            let out = generator_loss(
                &generator,
                &critic,
                &classifier,
                ground.rows(&gi).view(),
                &labels,
                noise.view(),
                config.beta_cls,
            )
            .map_err(fail)?;
            adam_step(&mut generator_adam, &mut generator.net.params, &out.grads, &config.generator_adam)
                .map_err(fail)?;
            reports.push(GanLossReport {
                generator_adversarial: out.report.generator_adversarial,
                classification_loss: out.report.classification_loss,
                ..critic_report
            });
        }
        log.push(GanLossReport::mean(&reports));
    }

    Ok(TrainedGan {
        generator,
        critic,
        classifier,
        generator_adam,
        critic_adam,
        label_space: ground.label_space().to_vec(),
        log,
    })
}

/// Fresh interpolates for probing a trained critic, drawn the same way as
/// during training.
pub fn sample_critic_batch(
    ground: &Dataset,
    few_aerial: &Dataset,
    noise_dim: usize,
    size: usize,
    seed: u64,
) -> Result<CriticBatch> {
    if ground.is_empty() || few_aerial.is_empty() {
        return Err(Error::Dataset("cannot sample from empty datasets".into()));
    }
    let mut sampler = BatchSampler {
        ground,
        ground_labels: ground.label_indices(),
        aerial: few_aerial,
        aerial_by_class: few_aerial.indices_by_class(),
        batch: size.min(ground.len()),
        rng: rng::stream_rng(seed, rng::stream::GAN_BATCH),
    };
    let mut noise_rng = rng::stream_rng(seed, rng::stream::GAN_NOISE);
    let mut parts = Vec::new();
    let mut remaining = size;
    while remaining > 0 {
        let mut b = sampler.critic_batch(&mut noise_rng, noise_dim);
        let take = remaining.min(b.ground.nrows());
        if take < b.ground.nrows() {
            b = CriticBatch {
                ground: b.ground.slice(s![..take, ..]).to_owned(),
                aerial: b.aerial.slice(s![..take, ..]).to_owned(),
                noise: b.noise.slice(s![..take, ..]).to_owned(),
                t: b.t.slice(s![..take]).to_owned(),
            };
        }
        remaining -= take;
        parts.push(b);
    }
    let cat2 = |f: fn(&CriticBatch) -> ArrayView2<f64>| {
        let views: Vec<_> = parts.iter().map(f).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    Ok(CriticBatch {
        ground: cat2(|b| b.ground.view()),
        aerial: cat2(|b| b.aerial.view()),
        noise: cat2(|b| b.noise.view()),
        t: parts.iter().flat_map(|b| b.t.iter().copied()).collect(),
    })
}

/// `‖∇_m D(m | f_g)‖₂` at the interpolates of a batch.
pub fn interpolate_gradient_norms(
    generator: &Generator,
    critic: &Mlp,
    batch: &CriticBatch,
    interpolation: Interpolation,
) -> Result<Vec<f64>> {
    let generated = generator.generate(batch.noise.view(), batch.ground.view())?;
    let anchor = match interpolation {
        Interpolation::GeneratedToGround => batch.ground.view(),
        Interpolation::GeneratedToRealAerial => batch.aerial.view(),
    };
    let m = interpolate(generated.view(), anchor, &batch.t)?;
    let grads = critic.input_gradients(hcat(m.view(), batch.ground.view()).view())?;
    let d = m.ncols();
    Ok(grads
        .slice(s![.., ..d])
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect())
}

/// Emit `per_record` generated aerial features for every ground record,
/// labeled with the conditioning record's label.
pub fn synthesize_features(
    generator: &Generator,
    ground: &Dataset,
    per_record: usize,
    seed: u64,
) -> Result<Dataset> {
    if ground.is_empty() {
        return Err(Error::Dataset("cannot synthesize from an empty ground set".into()));
    }
    if ground.dim() != generator.spec.condition_dim {
        return Err(Error::Shape(format!(
            "ground dim {} does not match generator condition dim {}",
            ground.dim(),
            generator.spec.condition_dim
        )));
    }
    let mut rng = rng::stream_rng(seed, rng::stream::SYNTHESIZE);
    let n = ground.len() * per_record;
    let noise = gaussian(&mut rng, n, generator.spec.noise_dim);
    let conditions: Vec<usize> = (0..ground.len())
        .flat_map(|i| std::iter::repeat_n(i, per_record))
        .collect();
    let features = if n == 0 {
        Array2::zeros((0, generator.spec.output_dim))
    } else {
        generator.generate(noise.view(), ground.rows(&conditions).view())?
    };
    let records = conditions
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let source = &ground.records()[i];
            FeatureRecord {
                id: format!("gen-{}-{}", source.id, row % per_record.max(1)),
                label: source.label.clone(),
                domain: Domain::GeneratedAerial,
                features: features.row(row).to_vec(),
            }
        })
        .collect();
    Dataset::with_label_space(records, ground.label_space().to_vec())
}

pub const GENERATOR_CHECKPOINT_KIND: &str = "generator";

impl TrainedGan {
    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        Checkpoint {
            kind: GENERATOR_CHECKPOINT_KIND.into(),
            seed,
            config_hash: config_hash.into(),
            metadata: serde_json::json!({
                "generator_spec": self.generator.spec,
                "label_space": self.label_space,
            }),
            networks: vec![
                NetworkState {
                    name: "generator".into(),
                    net: self.generator.net.clone(),
                    adam: Some(self.generator_adam.clone()),
                },
                NetworkState {
                    name: "critic".into(),
                    net: self.critic.clone(),
                    adam: Some(self.critic_adam.clone()),
                },
                NetworkState {
                    name: "classifier".into(),
                    net: self.classifier.clone(),
                    adam: None,
                },
            ],
        }
    }
}

impl Generator {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.require_kind(GENERATOR_CHECKPOINT_KIND)?;
        let spec: GeneratorSpec = serde_json::from_value(ckpt.metadata["generator_spec"].clone())
            .map_err(|e| Error::Config(format!("generator_spec: {e}")))?;
        let net = ckpt.network("generator")?.net.clone();
        if net.specs() != spec.layer_specs().as_slice() {
            return Err(Error::Config("generator layers do not match its spec".into()));
        }
        Ok(Self { spec, net })
    }
}

pub fn gan_log_csv(log: &[GanLossReport]) -> String {
    let mut out = String::from("epoch,critic_wasserstein_gap,gradient_penalty,generator_adversarial,classification_loss\n");
    for (i, r) in log.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            r.critic_wasserstein_gap, r.gradient_penalty, r.generator_adversarial, r.classification_loss
        );
    }
    out
}

pub fn write_gan_log(log: &[GanLossReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, gan_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_benchmark, SynthBenchConfig};
    use crate::optim::finite_diff_gradcheck;
    use ndarray::array;

    fn tiny_generator(seed: u64) -> Generator {
        Generator::new(
            GeneratorSpec {
                noise_dim: 3,
                condition_dim: 4,
                output_dim: 4,
                hidden: [6, 5, 6],
                leaky_slope: 0.2,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_critic(seed: u64) -> Mlp {
        Mlp::new(
            CriticSpec {
                feature_dim: 4,
                condition_dim: 4,
                hidden: [7, 6, 5],
                leaky_slope: 0.2,
            }
            .layer_specs(),
            seed,
        )
        .unwrap()
    }

    fn tiny_batch(seed: u64) -> CriticBatch {
        let mut r = rng::stream_rng(seed, 77);
        CriticBatch {
            ground: Array2::from_shape_fn((6, 4), |_| r.random_range(0.0..2.0)),
            aerial: Array2::from_shape_fn((6, 4), |_| r.random_range(0.0..2.0)),
            noise: gaussian(&mut r, 6, 3),
            t: Array1::from_shape_fn(6, |_| r.random_range(0.0..1.0)),
        }
    }

    fn objective(lambda_gp: f64) -> CriticObjective {
        CriticObjective {
            lambda_gp,
            eq2_literal: false,
            interpolation: Interpolation::GeneratedToGround,
        }
    }

    #[test]
    fn generator_ends_in_relu_critic_in_scalar() {
        let g = tiny_generator(0);
        assert_eq!(g.net.specs().len(), 4);
        assert_eq!(g.net.specs()[3].activation, Activation::Relu);
        assert!(g.net.specs()[..3].iter().all(|s| matches!(s.activation, Activation::LeakyRelu { .. })));
        let c = tiny_critic(0);
        assert_eq!(c.output_dim(), 1);
        assert_eq!(c.specs()[3].activation, Activation::Linear);
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let g = tiny_generator(seed);
            let c = tiny_critic(seed + 10);
            let b = tiny_batch(seed);
            for obj in [objective(10.0), CriticObjective { interpolation: Interpolation::GeneratedToRealAerial, ..objective(10.0) }] {
                let analytic = critic_loss(&g, &c, &b, obj).unwrap().grads;
                let loss = |p: &nn::ParamBundle| {
                    let m = Mlp::from_parts(c.specs().to_vec(), p.clone()).unwrap();
                    critic_loss(&g, &m, &b, obj).unwrap().loss
                };
                let err = finite_diff_gradcheck(loss, &c.params, &analytic, 1e-5).unwrap();
                assert!(err < 1e-4, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn literal_critic_loss_gradient_matches_finite_differences() {
        let g = tiny_generator(1);
        let mut c = tiny_critic(2);
        // Keep D(real) positive so the log term is differentiable.
        c.params.layers[3].bias[0] = 5.0;
        let b = tiny_batch(4);
        let obj = CriticObjective { eq2_literal: true, ..objective(10.0) };
        let out = critic_loss(&g, &c, &b, obj).unwrap();
        let loss = |p: &nn::ParamBundle| {
            let m = Mlp::from_parts(c.specs().to_vec(), p.clone()).unwrap();
            critic_loss(&g, &m, &b, obj).unwrap().loss
        };
        let err = finite_diff_gradcheck(loss, &c.params, &out.grads, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        let plain = critic_loss(&g, &c, &b, objective(10.0)).unwrap();
        assert_ne!(plain.loss, out.loss);
    }

    #[test]
    fn interpolates_follow_recorded_t() {
        let g = tiny_generator(3);
        let c = tiny_critic(3);
        let b = tiny_batch(3);
        let out = critic_loss(&g, &c, &b, objective(1.0)).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let expected = b.t[i] * out.generated[[i, j]] + (1.0 - b.t[i]) * b.ground[[i, j]];
                assert!((out.interpolates[[i, j]] - expected).abs() < 1e-15);
            }
        }
        assert!(out.report.gradient_penalty >= 0.0);
    }

    #[test]
    fn constant_critic_gives_zero_gap() {
        let g = tiny_generator(0);
        let mut c = tiny_critic(0);
        for l in &mut c.params.layers {
            l.weight.fill(0.0);
        }
        c.params.layers[3].bias[0] = 0.7;
        let out = critic_loss(&g, &c, &tiny_batch(1), objective(0.0)).unwrap();
        assert_eq!(out.report.critic_wasserstein_gap, 0.0);
    }

    #[test]
    fn linear_critic_with_matching_batches_has_zero_loss() {
        // A generator whose output equals the aerial batch: zero weights
        // everywhere except a final bias equal to the (constant) aerial row.
        let mut g = tiny_generator(0);
        for l in &mut g.net.params.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        g.net.params.layers[3].bias = array![0.5, 1.0, 1.5, 2.0];
        let mut b = tiny_batch(2);
        for mut row in b.aerial.rows_mut() {
            row.assign(&array![0.5, 1.0, 1.5, 2.0]);
        }
        let c = Mlp::new(vec![LayerSpec::new(8, 1, Activation::Linear)], 9).unwrap();
        let out = critic_loss(&g, &c, &b, objective(0.0)).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_linear_critic_is_mean_difference() {
        let g = tiny_generator(5);
        let c = Mlp::new(vec![LayerSpec::new(8, 1, Activation::Linear)], 4).unwrap();
        let b = tiny_batch(5);
        let out = critic_loss(&g, &c, &b, objective(0.0)).unwrap();
        let fake = c.predict(hcat(out.generated.view(), b.ground.view()).view()).unwrap();
        let real = c.predict(hcat(b.aerial.view(), b.ground.view()).view()).unwrap();
        let expected = fake.mean().unwrap() - real.mean().unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_gradient_and_isolation() {
        let g = tiny_generator(7);
        let c = tiny_critic(8);
        let classifier = Mlp::new(vec![LayerSpec::new(4, 3, Activation::Softmax)], 9).unwrap();
        let b = tiny_batch(6);
        let labels = [0, 1, 2, 2, 1, 0];
        let (c_sum, k_sum) = (c.params.checksum(), classifier.params.checksum());
        for beta in [0.0, 0.5] {
            let out = generator_loss(&g, &c, &classifier, b.ground.view(), &labels, b.noise.view(), beta).unwrap();
            let loss = |p: &nn::ParamBundle| {
                let gen = Generator {
                    spec: g.spec.clone(),
                    net: Mlp::from_parts(g.net.specs().to_vec(), p.clone()).unwrap(),
                };
                generator_loss(&gen, &c, &classifier, b.ground.view(), &labels, b.noise.view(), beta)
                    .unwrap()
                    .loss
            };
            let err = finite_diff_gradcheck(loss, &g.net.params, &out.grads, 1e-5).unwrap();
            assert!(err < 1e-4, "beta {beta}: {err}");
            if beta == 0.0 {
                assert_eq!(out.loss, out.report.generator_adversarial);
            }
        }
        assert_eq!(c.params.checksum(), c_sum);
        assert_eq!(classifier.params.checksum(), k_sum);
    }

    #[test]
    fn generator_loss_rejects_foreign_labels() {
        let g = tiny_generator(0);
        let c = tiny_critic(0);
        let classifier = Mlp::new(vec![LayerSpec::new(4, 3, Activation::Softmax)], 9).unwrap();
        let b = tiny_batch(0);
        let labels = [0, 1, 2, 3, 1, 0];
        assert!(matches!(
            generator_loss(&g, &c, &classifier, b.ground.view(), &labels, b.noise.view(), 0.1),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn confident_classifier_has_zero_classification_term() {
        let mut g = tiny_generator(0);
        for l in &mut g.net.params.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        g.net.params.layers[3].bias.fill(1.0);
        let c = tiny_critic(0);
        let mut classifier = Mlp::new(vec![LayerSpec::new(4, 2, Activation::Softmax)], 9).unwrap();
        classifier.params.layers[0].weight.fill(0.0);
        classifier.params.layers[0].bias = array![0.0, 1000.0];
        let b = tiny_batch(0);
        let out = generator_loss(&g, &c, &classifier, b.ground.view(), &[1; 6], b.noise.view(), 1.0).unwrap();
        assert_eq!(out.report.classification_loss, 0.0);
    }

    fn benchmark_2d() -> crate::data::SynthBenchmark {
        synth_benchmark(&SynthBenchConfig {
            num_classes: 2,
            game_overlap: 0,
            game_extra_classes: 0,
            dim: 2,
            latent_rank: 2,
            nuisance_rank: 0,
            ground_per_class: 30,
            aerial_per_class: 10,
            game_per_class: 0,
            class_separation: 2.0,
            spread: 0.3,
            seed: 3,
            ..SynthBenchConfig::default()
        })
        .unwrap()
    }

    fn small_config() -> GanConfig {
        GanConfig {
            noise_dim: 4,
            generator_hidden: [8, 8, 8],
            critic_hidden: [8, 8, 8],
            batch_size: 16,
            epochs: 3,
            classifier_steps: 50,
            ..GanConfig::default()
        }
    }

    #[test]
    fn pretrain_separable_reaches_full_accuracy() {
        // Two clusters on either side of the line x = y.
        let mut r = rng::stream_rng(4, 78);
        let records = (0..40)
            .map(|i| {
                let (cx, cy, label) = if i % 2 == 0 { (3.0, 1.0, "a") } else { (1.0, 3.0, "b") };
                FeatureRecord {
                    id: format!("r{i}"),
                    label: label.into(),
                    domain: Domain::RealAerial,
                    features: vec![cx + r.random_range(-0.5..0.5), cy + r.random_range(-0.5..0.5)],
                }
            })
            .collect();
        let data = Dataset::from_records(records).unwrap();
        let cfg = GanConfig {
            classifier_steps: 2000,
            classifier_adam: AdamHyper::classifier().with_lr(0.05),
            ..small_config()
        };
        let clf = pretrain_classifier(&data, &cfg, 0).unwrap();
        assert_eq!(classifier_accuracy(&clf, &data).unwrap(), 1.0);
    }

    #[test]
    fn pretrain_rejects_single_class_and_missing_class() {
        let b = benchmark_2d();
        let idx = &b.real_aerial.indices_by_class()[0];
        let one = Dataset::from_records(b.real_aerial.subset(idx).into_records()).unwrap();
        assert!(matches!(pretrain_classifier(&one, &small_config(), 0), Err(Error::Dataset(_))));
        let missing = b.real_aerial.subset(idx);
        assert!(matches!(pretrain_classifier(&missing, &small_config(), 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let b = benchmark_2d();
        let a = train_wcgan(&b.ground, &b.real_aerial, &small_config(), 5).unwrap();
        let c = train_wcgan(&b.ground, &b.real_aerial, &small_config(), 5).unwrap();
        assert_eq!(a.log, c.log);
        assert_eq!(a.generator, c.generator);
        assert_eq!(a.log.len(), 3);
        assert!(a.log.iter().all(|r| r.gradient_penalty >= 0.0 && r.classification_loss >= 0.0));
    }

    #[test]
    fn mismatched_label_spaces_are_rejected() {
        let b = benchmark_2d();
        let relabeled: Vec<_> = b
            .real_aerial
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.label = format!("other_{}", r.label);
                r
            })
            .collect();
        let other = Dataset::from_records(relabeled).unwrap();
        assert!(matches!(train_wcgan(&b.ground, &other, &small_config(), 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn synthesize_counts_labels_and_determinism() {
        let b = benchmark_2d();
        let g = Generator::new(
            GeneratorSpec { noise_dim: 4, condition_dim: 2, output_dim: 2, hidden: [5, 5, 5], leaky_slope: 0.2 },
            1,
        )
        .unwrap();
        let out = synthesize_features(&g, &b.ground, 1, 9).unwrap();
        assert_eq!(out.len(), b.ground.len());
        for (gen, src) in out.records().iter().zip(b.ground.records()) {
            assert_eq!(gen.label, src.label);
            assert_eq!(gen.domain, Domain::GeneratedAerial);
        }
        let three = synthesize_features(&g, &b.ground, 3, 9).unwrap();
        let expect: Vec<usize> = b.ground.class_counts().iter().map(|c| 3 * c).collect();
        assert_eq!(three.class_counts(), expect);
        assert!(synthesize_features(&g, &b.ground, 0, 9).unwrap().is_empty());
        assert_eq!(synthesize_features(&g, &b.ground, 1, 9).unwrap(), out);
    }

    #[test]
    fn checkpoint_restores_generator() {
        let b = benchmark_2d();
        let t = train_wcgan(&b.ground, &b.real_aerial, &GanConfig { epochs: 1, ..small_config() }, 2).unwrap();
        let ckpt = t.to_checkpoint(2, "h");
        let text = crate::data::checkpoint_to_string(&ckpt);
        let back = crate::data::parse_checkpoint(&text).unwrap();
        assert_eq!(Generator::from_checkpoint(&back).unwrap(), t.generator);
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let csv = gan_log_csv(&[GanLossReport::default(); 2]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("epoch,critic_wasserstein_gap"));
    }
}
