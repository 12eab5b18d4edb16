//! Disjoint multitask learning.
//!
//! A shared trunk feeds four softmax heads:
//!
//! | head | label space | trained on | target |
//! |------|-------------|------------|--------|
//! | ①    | real        | real       | ground truth |
//! | ②    | real        | auxiliary  | pseudo-labels from ① |
//! | ③    | auxiliary   | real       | pseudo-labels from ④ |
//! | ④    | auxiliary   | auxiliary  | ground truth |
//!
//! Each step draws one real batch and one auxiliary batch and minimizes
//!
//! ```text
//! w1·L(y_r, P①(x_r)) + w4·L(y_a, P④(x_a)) + w2·L(ŷ_r, P②(x_a)) + w3·L(ŷ_a, P③(x_r))
//! ```
//!
//! where `ŷ_r = argmax P①(x_a)` and `ŷ_a = argmax P④(x_r)` are captured
//! before the step's update and treated as constants.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, Dataset, Domain, NetworkState};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ClassProbabilities, LayerSpec, Mlp, ParamBundle};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng;

/// Branch numbering follows the table in the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    RealOnReal,
    RealOnAux,
    AuxOnReal,
    AuxOnAux,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::RealOnReal, Head::RealOnAux, Head::AuxOnReal, Head::AuxOnAux];

    pub fn index(self) -> usize {
        match self {
            Head::RealOnReal => 0,
            Head::RealOnAux => 1,
            Head::AuxOnReal => 2,
            Head::AuxOnAux => 3,
        }
    }

    /// Name used in checkpoints.
    pub fn name(self) -> &'static str {
        ["head_1", "head_2", "head_3", "head_4"][self.index()]
    }
}

/// Heads allowed to produce pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    RealOnReal,
    AuxOnAux,
}

impl Teacher {
    pub fn head(self) -> Head {
        match self {
            Teacher::RealOnReal => Head::RealOnReal,
            Teacher::AuxOnAux => Head::AuxOnAux,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmlMode {
    Baseline,
    Games,
    Generated,
    GamesPlusGenerated,
}

impl DmlMode {
    pub const ALL: [DmlMode; 4] = [
        DmlMode::Baseline,
        DmlMode::Games,
        DmlMode::Generated,
        DmlMode::GamesPlusGenerated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DmlMode::Baseline => "baseline",
            DmlMode::Games => "games",
            DmlMode::Generated => "generated",
            DmlMode::GamesPlusGenerated => "games_plus_generated",
        }
    }
}

impl fmt::Display for DmlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DmlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DmlMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown DML mode {s}")))
    }
}

/// Which heads answer at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    #[default]
    HeadOne,
    /// Mean of the ① and ② distributions.
    EnsembleOneTwo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlArch {
    pub trunk_hidden: Vec<usize>,
    pub trunk_activation: Activation,
}

impl Default for DmlArch {
    fn default() -> Self {
        Self {
            trunk_hidden: vec![512, 256],
            trunk_activation: Activation::Relu,
        }
    }
}

impl DmlArch {
    fn trunk_specs(&self, input_dim: usize) -> Result<Vec<LayerSpec>> {
        if self.trunk_hidden.is_empty() {
            return Err(Error::Config("trunk needs at least one layer".into()));
        }
        if self.trunk_activation == Activation::Softmax {
            return Err(Error::Config("trunk activation cannot be softmax".into()));
        }
        let mut specs = Vec::with_capacity(self.trunk_hidden.len());
        let mut width = input_dim;
        for &h in &self.trunk_hidden {
            specs.push(LayerSpec::new(width, h, self.trunk_activation));
            width = h;
        }
        Ok(specs)
    }
}

/// Shared trunk plus four single-layer softmax heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlNet {
    pub trunk: Mlp,
    /// Indexed by [`Head::index`].
    pub heads: [Mlp; 4],
}

const TRUNK_SEED: u64 = 100;
const HEAD_SEED: u64 = 101;

pub fn build_dml(
    input_dim: usize,
    real_classes: usize,
    aux_classes: usize,
    arch: &DmlArch,
    seed: u64,
) -> Result<DmlNet> {
    if real_classes < 2 || aux_classes < 2 {
        return Err(Error::Config(format!(
            "DML needs at least two classes per label space (real {real_classes}, aux {aux_classes})"
        )));
    }
    let trunk = Mlp::new(arch.trunk_specs(input_dim)?, rng::derive_seed(seed, TRUNK_SEED))?;
    let width = trunk.output_dim();
    let head = |h: Head, classes: usize| {
        Mlp::new(
            vec![LayerSpec::new(width, classes, Activation::Softmax)],
            rng::derive_seed(seed, HEAD_SEED + h.index() as u64),
        )
    };
    Ok(DmlNet {
        heads: [
            head(Head::RealOnReal, real_classes)?,
            head(Head::RealOnAux, real_classes)?,
            head(Head::AuxOnReal, aux_classes)?,
            head(Head::AuxOnAux, aux_classes)?,
        ],
        trunk,
    })
}

impl DmlNet {
    pub fn head(&self, h: Head) -> &Mlp {
        &self.heads[h.index()]
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn real_classes(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn aux_classes(&self) -> usize {
        self.heads[3].output_dim()
    }

    /// Trunk then heads ①–④.
    pub fn bundles(&self) -> Vec<ParamBundle> {
        std::iter::once(&self.trunk)
            .chain(&self.heads)
            .map(|m| m.params.clone())
            .collect()
    }

    pub fn set_bundles(&mut self, bundles: Vec<ParamBundle>) -> Result<()> {
        if bundles.len() != 5 {
            return Err(Error::Shape(format!("expected 5 parameter bundles, got {}", bundles.len())));
        }
        let nets = std::iter::once(&mut self.trunk).chain(self.heads.iter_mut());
        for (net, b) in nets.zip(bundles) {
            if !net.params.same_shape(&b) {
                return Err(Error::Shape("parameter bundle shape mismatch".into()));
            }
            net.params = b;
        }
        Ok(())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamBundle> {
        std::iter::once(&mut self.trunk)
            .chain(self.heads.iter_mut())
            .map(|m| &mut m.params)
    }

    fn trunk_features(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.trunk.predict(features)
    }
}

/// Copy trunk and head ① from `source` into `target`, keeping the target's
/// other heads.
pub fn warm_start(target: &DmlNet, source: &DmlNet) -> Result<DmlNet> {
    if target.trunk.specs() != source.trunk.specs() {
        return Err(Error::Config("warm start: trunk shapes differ".into()));
    }
    if target.heads[0].specs() != source.heads[0].specs() {
        return Err(Error::Config(format!(
            "warm start: real head has {} classes in the source and {} in the target",
            source.real_classes(),
            target.real_classes()
        )));
    }
    let mut out = target.clone();
    out.trunk = source.trunk.clone();
    out.heads[0] = source.heads[0].clone();
    Ok(out)
}

/// Hard labels (and the distributions they came from) produced by a teacher head.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub teacher: Teacher,
    pub hard_labels: Vec<usize>,
    pub probabilities: Array2<f64>,
}

fn teach(net: &DmlNet, teacher: Teacher, trunk_out: ArrayView2<f64>) -> Result<PseudoLabelBatch> {
    let probabilities = net.head(teacher.head()).predict(trunk_out)?;
    let hard_labels = probabilities.rows().into_iter().map(nn::argmax).collect();
    Ok(PseudoLabelBatch {
        teacher,
        hard_labels,
        probabilities,
    })
}

pub fn pseudo_labels(net: &DmlNet, teacher: Teacher, features: ArrayView2<f64>) -> Result<PseudoLabelBatch> {
    teach(net, teacher, net.trunk_features(features)?.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
        }
    }
}

impl BranchWeights {
    pub fn real_only() -> Self {
        Self {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.w3, self.w4];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("branch weights must be finite and non-negative".into()));
        }
        if self.w1 <= 0.0 {
            return Err(Error::Config("branch weight w1 must be positive".into()));
        }
        Ok(())
    }
}

/// One real batch and one auxiliary batch. Auxiliary labels may be absent,
/// in which case branch ④ is skipped for that batch.
#[derive(Debug, Clone)]
pub struct DmlBatch {
    pub real: Array2<f64>,
    pub real_labels: Vec<usize>,
    pub aux: Array2<f64>,
    pub aux_labels: Option<Vec<usize>>,
}

/// Pseudo-labels used by branches ③ (on real data) and ② (on aux data).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub on_real: PseudoLabelBatch,
    pub on_aux: PseudoLabelBatch,
}

/// Capture the teacher outputs for a batch with the current parameters.
pub fn capture_targets(net: &DmlNet, batch: &DmlBatch) -> Result<PseudoTargets> {
    Ok(PseudoTargets {
        on_real: pseudo_labels(net, Teacher::AuxOnAux, batch.real.view())?,
        on_aux: pseudo_labels(net, Teacher::RealOnReal, batch.aux.view())?,
    })
}

#[derive(Debug, Clone)]
pub struct DmlLoss {
    /// Unweighted mean loss of each branch, indexed by [`Head::index`].
    pub branch: [f64; 4],
    pub total: f64,
    /// Trunk then heads ①–④.
    pub grads: Vec<ParamBundle>,
}

enum Target<'a> {
    Hard(&'a [usize]),
    Soft(ArrayView2<'a, f64>),
}

struct BranchOut {
    loss: f64,
    grads: ParamBundle,
    grad_trunk_out: Array2<f64>,
}

fn branch(head: &Mlp, trunk_out: ArrayView2<f64>, target: Target<'_>, weight: f64) -> Result<BranchOut> {
    let cache = head.forward(trunk_out)?;
    let probs = cache.output().view();
    let (loss, g) = match target {
        Target::Hard(y) => (
            nn::mean_cross_entropy(probs, y)?,
            nn::cross_entropy_logit_grad(probs, y, weight)?,
        ),
        Target::Soft(q) => (
            nn::mean_soft_cross_entropy(probs, q)?,
            nn::soft_cross_entropy_logit_grad(probs, q, weight)?,
        ),
    };
    let back = head.backprop_logits(&cache, g.view())?;
    Ok(BranchOut {
        loss,
        grads: back.params,
        grad_trunk_out: back.input,
    })
}

/// Weighted objective and its gradient with the pseudo-labels held fixed.
pub fn dml_loss(
    net: &DmlNet,
    batch: &DmlBatch,
    targets: &PseudoTargets,
    weights: &BranchWeights,
    soft_labels: bool,
) -> Result<DmlLoss> {
    let real_cache = net.trunk.forward(batch.real.view())?;
    let aux_cache = net.trunk.forward(batch.aux.view())?;
    let h_real = real_cache.output().view();
    let h_aux = aux_cache.output().view();
    fn pseudo(p: &PseudoLabelBatch, soft: bool) -> Target<'_> {
        if soft {
            Target::Soft(p.probabilities.view())
        } else {
            Target::Hard(&p.hard_labels)
        }
    }

    let b1 = branch(net.head(Head::RealOnReal), h_real, Target::Hard(&batch.real_labels), weights.w1)?;
    let b4 = match &batch.aux_labels {
        Some(y) => Some(branch(net.head(Head::AuxOnAux), h_aux, Target::Hard(y), weights.w4)?),
        None => None,
    };
    let b2 = branch(net.head(Head::RealOnAux), h_aux, pseudo(&targets.on_aux, soft_labels), weights.w2)?;
    let b3 = branch(net.head(Head::AuxOnReal), h_real, pseudo(&targets.on_real, soft_labels), weights.w3)?;

    let l4 = b4.as_ref().map_or(0.0, |b| b.loss);
    let branch_losses = [b1.loss, b2.loss, b3.loss, l4];
    let total = weights.w1 * b1.loss + weights.w4 * l4 + weights.w2 * b2.loss + weights.w3 * b3.loss;
    if !total.is_finite() {
        return Err(Error::Training("non-finite DML loss".into()));
    }

    let grad_real = &b1.grad_trunk_out + &b3.grad_trunk_out;
    let mut grad_aux = b2.grad_trunk_out;
    if let Some(b) = &b4 {
        grad_aux = &b.grad_trunk_out + &grad_aux;
    }
    let mut trunk_grads = net.trunk.backprop(&real_cache, grad_real.view())?.params;
    trunk_grads.add_scaled(&net.trunk.backprop(&aux_cache, grad_aux.view())?.params, 1.0);

    let head4 = b4.map_or_else(|| net.head(Head::AuxOnAux).params.zeros_like(), |b| b.grads);
    Ok(DmlLoss {
        branch: branch_losses,
        total,
        grads: vec![trunk_grads, b1.grads, b2.grads, b3.grads, head4],
    })
}

/// Adam state for the trunk and each head.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlAdam {
    /// Trunk then heads ①–④.
    pub states: Vec<AdamState>,
}

impl DmlAdam {
    pub fn new(net: &DmlNet) -> Self {
        Self {
            states: net.bundles().iter().map(AdamState::new).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub branch: [f64; 4],
    pub total: f64,
    /// Pseudo-labels the step trained against, captured before the update.
    pub targets: PseudoTargets,
}

/// Capture pseudo-labels, evaluate the weighted objective, and apply one
/// Adam update to the trunk and every head.
pub fn dml_step(
    net: &mut DmlNet,
    adam: &mut DmlAdam,
    batch: &DmlBatch,
    weights: &BranchWeights,
    hyper: &AdamHyper,
    soft_labels: bool,
) -> Result<StepReport> {
    let targets = capture_targets(net, batch)?;
    let loss = dml_loss(net, batch, &targets, weights, soft_labels)?;
    if let Some(i) = loss.grads.iter().position(|g| g.first_non_finite_layer().is_some()) {
        return Err(Error::Training(format!("non-finite gradient in DML bundle {i}")));
    }
    for ((params, state), grads) in net.params_mut().zip(&mut adam.states).zip(&loss.grads) {
        adam_step(state, params, grads, hyper)?;
    }
    Ok(StepReport {
        branch: loss.branch,
        total: loss.total,
        targets,
    })
}

/// Predicted real-label indices and their distributions, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probabilities: Vec<ClassProbabilities>,
}

pub fn classify(net: &DmlNet, features: ArrayView2<f64>, inference: Inference) -> Result<Predictions> {
    let h = net.trunk_features(features)?;
    let mut probs = net.head(Head::RealOnReal).predict(h.view())?;
    if inference == Inference::EnsembleOneTwo {
        probs = (probs + net.head(Head::RealOnAux).predict(h.view())?) * 0.5;
    }
    let labels = probs.rows().into_iter().map(nn::argmax).collect();
    let probabilities = probs
        .rows()
        .into_iter()
        .map(|r| {
            let sum: f64 = r.sum();
            ClassProbabilities::new(r.iter().map(|p| p / sum).collect())
        })
        .collect::<Result<_>>()?;
    Ok(Predictions { labels, probabilities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub arch: DmlArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub weights: BranchWeights,
    /// w2 and w4 while fine-tuning on generated data after the warm start.
    pub generated_weight: f64,
    /// Train ② and ③ against teacher distributions instead of argmax labels.
    pub soft_labels: bool,
    /// Keep feeding game batches (to branch ② only) while fine-tuning.
    pub finetune_with_games: bool,
    pub inference: Inference,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            arch: DmlArch::default(),
            epochs: 200,
            batch_size: 32,
            adam: AdamHyper::classifier(),
            weights: BranchWeights::default(),
            generated_weight: 0.5,
            soft_labels: false,
            finetune_with_games: false,
            inference: Inference::HeadOne,
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("DML epochs and batch_size must be positive".into()));
        }
        if !self.generated_weight.is_finite() || self.generated_weight < 0.0 {
            return Err(Error::Config("generated_weight must be finite and non-negative".into()));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}

/// Datasets handed to [`train_dml`]. Which ones are required depends on the mode.
#[derive(Debug, Clone, Copy)]
pub struct DmlInputs<'a> {
    pub real: &'a Dataset,
    pub val: &'a Dataset,
    pub games: Option<&'a Dataset>,
    pub generated: Option<&'a Dataset>,
    /// A trained games-mode network to start fine-tuning from.
    pub warm_start: Option<&'a DmlNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEpochLog {
    /// The configuration this epoch belonged to; a games-plus-generated run
    /// logs its games pretraining first.
    pub mode: DmlMode,
    pub epoch: usize,
    pub branch: [f64; 4],
    pub total: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedDml {
    pub net: DmlNet,
    pub adam: DmlAdam,
    pub mode: DmlMode,
    pub real_labels: Vec<String>,
    pub aux_labels: Vec<String>,
    pub inference: Inference,
    pub log: Vec<DmlEpochLog>,
    /// Epoch of the selected weights within the final stage.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainedDml {
    pub fn classify(&self, features: ArrayView2<f64>) -> Result<Predictions> {
        classify(&self.net, features, self.inference)
    }
}

/// Infinite shuffled stream over record indices; reshuffles after each pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream_rng(seed, rng::stream::DML_BATCH);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let mut out = Vec::with_capacity(size.min(n));
        while out.len() < size.min(n) {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct AuxSource<'a> {
    data: &'a Dataset,
    labeled: bool,
    cycler: Cycler,
}

struct Stage<'a> {
    mode: DmlMode,
    real: &'a Dataset,
    val: &'a Dataset,
    aux: Vec<AuxSource<'a>>,
    weights: BranchWeights,
}

struct StageResult {
    net: DmlNet,
    adam: DmlAdam,
    log: Vec<DmlEpochLog>,
    best_epoch: usize,
    best_val_accuracy: f64,
}

fn accuracy(net: &DmlNet, data: &Dataset, inference: Inference) -> Result<f64> {
    let pred = classify(net, data.features().view(), inference)?;
    let hits = pred.labels.iter().zip(data.label_indices()).filter(|(p, y)| **p == *y).count();
    Ok(hits as f64 / data.len() as f64)
}

fn run_stage(mut net: DmlNet, mut stage: Stage<'_>, config: &DmlConfig, seed: u64) -> Result<StageResult> {
    let mut adam = DmlAdam::new(&net);
    let mut real_cycler = Cycler::new(stage.real.len(), rng::derive_seed(seed, 200));
    let real_labels = stage.real.label_indices();
    let aux_labels: Vec<Vec<usize>> = stage.aux.iter().map(|a| a.data.label_indices()).collect();
    let largest = stage.aux.iter().map(|a| a.data.len()).sum::<usize>().max(stage.real.len());
    let iterations = largest.div_ceil(config.batch_size);

    let mut best: Option<(f64, usize, DmlNet, DmlAdam)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let fail = |e: Error| Error::Training(format!("{} epoch {epoch}: {e}", stage.mode));
        let mut sums = [0.0; 5];
        for it in 0..iterations {
            let ri = real_cycler.next(config.batch_size);
            let (aux, labels) = if stage.aux.is_empty() {
                (Array2::zeros((0, stage.real.dim())), Some(Vec::new()))
            } else {
                let k = it % stage.aux.len();
                let source = &mut stage.aux[k];
                let ai = source.cycler.next(config.batch_size);
                let labels = source.labeled.then(|| ai.iter().map(|&i| aux_labels[k][i]).collect());
                let x = if ai.is_empty() {
                    Array2::zeros((0, stage.real.dim()))
                } else {
                    source.data.rows(&ai)
                };
                (x, labels)
            };
            let batch = DmlBatch {
                real: stage.real.rows(&ri),
                real_labels: ri.iter().map(|&i| real_labels[i]).collect(),
                aux,
                aux_labels: labels,
            };
            let report = dml_step(&mut net, &mut adam, &batch, &stage.weights, &config.adam, config.soft_labels)
                .map_err(fail)?;
            for (s, v) in sums.iter_mut().zip(report.branch.iter().chain([report.total].iter())) {
                *s += v;
            }
        }
        let val_accuracy = accuracy(&net, stage.val, config.inference).map_err(fail)?;
        let n = iterations as f64;
        log.push(DmlEpochLog {
            mode: stage.mode,
            epoch,
            branch: [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n],
            total: sums[4] / n,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|b| val_accuracy > b.0) {
            best = Some((val_accuracy, epoch, net.clone(), adam.clone()));
        }
        log::debug!("{} epoch {epoch}: loss {:.4} val {:.3}", stage.mode, sums[4] / n, val_accuracy);
    }
    let (best_val_accuracy, best_epoch, net, adam) = best.expect("at least one epoch");
    Ok(StageResult {
        net,
        adam,
        log,
        best_epoch,
        best_val_accuracy,
    })
}

const FINETUNE_SEED: u64 = 300;

fn require<'a>(d: Option<&'a Dataset>, mode: DmlMode, what: &str) -> Result<&'a Dataset> {
    d.ok_or_else(|| Error::Config(format!("mode {mode} requires a {what} dataset")))
}

fn check_aux(aux: &Dataset, domain: Domain, real: &Dataset, what: &str) -> Result<()> {
    aux.require_domain(domain, what)?;
    if !aux.is_empty() && aux.dim() != real.dim() {
        return Err(Error::Config(format!(
            "{what} has dimension {} but real features have {}",
            aux.dim(),
            real.dim()
        )));
    }
    Ok(())
}

/// Train one of the four configurations and return the weights with the
/// best validation accuracy.
pub fn train_dml(mode: DmlMode, inputs: &DmlInputs<'_>, config: &DmlConfig, seed: u64) -> Result<TrainedDml> {
    config.validate()?;
    let DmlInputs {
        real,
        val,
        games,
        generated,
        warm_start: source,
    } = *inputs;
    if real.is_empty() || val.is_empty() {
        return Err(Error::Dataset("DML needs non-empty real and validation sets".into()));
    }
    real.require_domain(Domain::RealAerial, "real training set")?;
    val.require_domain(Domain::RealAerial, "validation set")?;
    if val.label_space() != real.label_space() || val.dim() != real.dim() {
        return Err(Error::Config("validation set does not match the real training set".into()));
    }
    let real_space = real.label_space().to_vec();
    let single = |mode: DmlMode, aux: Option<&Dataset>, aux_space: Vec<String>, weights: BranchWeights| {
        let net = build_dml(real.dim(), real_space.len(), aux_space.len(), &config.arch, seed)?;
        let aux = aux
            .map(|d| {
                vec![AuxSource {
                    data: d,
                    labeled: true,
                    cycler: Cycler::new(d.len(), rng::derive_seed(seed, 201)),
                }]
            })
            .unwrap_or_default();
        let r = run_stage(net, Stage { mode, real, val, aux, weights }, config, seed)?;
        Ok::<_, Error>((r, aux_space))
    };

    let (result, aux_labels, log) = match mode {
        DmlMode::Baseline => {
            if games.is_some() || generated.is_some() {
                log::warn!("baseline mode ignores auxiliary datasets");
            }
            let (r, space) = single(mode, None, real_space.clone(), BranchWeights::real_only())?;
            let log = r.log.clone();
            (r, space, log)
        }
        DmlMode::Games => {
            let g = require(games, mode, "game_aerial")?;
            check_aux(g, Domain::GameAerial, real, "game set")?;
            let (r, space) = single(mode, Some(g), g.label_space().to_vec(), config.weights)?;
            let log = r.log.clone();
            (r, space, log)
        }
        DmlMode::Generated => {
            let g = require(generated, mode, "generated_aerial")?;
            check_aux(g, Domain::GeneratedAerial, real, "generated set")?;
            if g.label_space() != real.label_space() {
                return Err(Error::Config("generated labels must use the real label space".into()));
            }
            let (r, space) = single(mode, Some(g), real_space.clone(), config.weights)?;
            let log = r.log.clone();
            (r, space, log)
        }
        DmlMode::GamesPlusGenerated => {
            let gen = require(generated, mode, "generated_aerial")?;
            check_aux(gen, Domain::GeneratedAerial, real, "generated set")?;
            if gen.label_space() != real.label_space() {
                return Err(Error::Config("generated labels must use the real label space".into()));
            }
            let game_set = match games {
                Some(g) => {
                    check_aux(g, Domain::GameAerial, real, "game set")?;
                    Some(g)
                }
                None => None,
            };
            if config.finetune_with_games && game_set.is_none() {
                return Err(Error::Config("finetune_with_games needs a game_aerial dataset".into()));
            }
            let mut log = Vec::new();
            let pretrained = match (source, game_set) {
                (Some(net), _) => net.clone(),
                (None, Some(g)) => {
                    let (r, _) = single(DmlMode::Games, Some(g), g.label_space().to_vec(), config.weights)?;
                    log.extend(r.log);
                    r.net
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "mode {mode} requires a game_aerial dataset or a warm-start network"
                    )))
                }
            };
            let fresh = build_dml(
                real.dim(),
                real_space.len(),
                real_space.len(),
                &config.arch,
                rng::derive_seed(seed, FINETUNE_SEED),
            )?;
            let net = warm_start(&fresh, &pretrained)?;
            let mut aux = vec![AuxSource {
                data: gen,
                labeled: true,
                cycler: Cycler::new(gen.len(), rng::derive_seed(seed, 201)),
            }];
            if config.finetune_with_games {
                let g = game_set.expect("checked above");
                aux.push(AuxSource {
                    data: g,
                    labeled: false,
                    cycler: Cycler::new(g.len(), rng::derive_seed(seed, 202)),
                });
            }
            let weights = BranchWeights {
                w2: config.generated_weight,
                w4: config.generated_weight,
                ..config.weights
            };
            let r = run_stage(net, Stage { mode, real, val, aux, weights }, config, seed)?;
            log.extend(r.log.iter().cloned());
            (r, real_space.clone(), log)
        }
    };
    Ok(TrainedDml {
        net: result.net,
        adam: result.adam,
        mode,
        real_labels: real_space,
        aux_labels,
        inference: config.inference,
        log,
        best_epoch: result.best_epoch,
        best_val_accuracy: result.best_val_accuracy,
    })
}

pub const DML_CHECKPOINT_KIND: &str = "dml";

#[derive(Serialize, Deserialize)]
struct DmlMetadata {
    mode: DmlMode,
    real_labels: Vec<String>,
    aux_labels: Vec<String>,
    inference: Inference,
    best_epoch: usize,
    best_val_accuracy: f64,
}

impl TrainedDml {
    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let nets = std::iter::once(("trunk", &self.net.trunk))
            .chain(Head::ALL.iter().map(|&h| (h.name(), self.net.head(h))));
        let networks = nets
            .zip(&self.adam.states)
            .map(|((name, net), adam)| NetworkState {
                name: name.into(),
                net: net.clone(),
                adam: Some(adam.clone()),
            })
            .collect();
        let metadata = DmlMetadata {
            mode: self.mode,
            real_labels: self.real_labels.clone(),
            aux_labels: self.aux_labels.clone(),
            inference: self.inference,
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
        };
        Checkpoint {
            kind: DML_CHECKPOINT_KIND.into(),
            seed,
            config_hash: config_hash.into(),
            metadata: serde_json::to_value(metadata).expect("metadata always serializes"),
            networks,
        }
    }

    /// Rebuild a trained model. The training log is not stored in checkpoints.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.require_kind(DML_CHECKPOINT_KIND)?;
        let meta: DmlMetadata = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Config(format!("DML checkpoint metadata: {e}")))?;
        let fetch = |name: &str| -> Result<(Mlp, AdamState)> {
            let n = ckpt.network(name)?;
            let adam = n.adam.clone().unwrap_or_else(|| AdamState::new(&n.net.params));
            Ok((n.net.clone(), adam))
        };
        let (trunk, trunk_adam) = fetch("trunk")?;
        let mut heads = Vec::with_capacity(4);
        let mut states = vec![trunk_adam];
        for h in Head::ALL {
            let (net, adam) = fetch(h.name())?;
            if net.input_dim() != trunk.output_dim() {
                return Err(Error::Shape(format!("{} does not fit the trunk", h.name())));
            }
            heads.push(net);
            states.push(adam);
        }
        let heads: [Mlp; 4] = heads.try_into().expect("four heads");
        if heads[0].output_dim() != meta.real_labels.len() || heads[3].output_dim() != meta.aux_labels.len() {
            return Err(Error::Config("DML checkpoint head widths do not match its label spaces".into()));
        }
        Ok(Self {
            net: DmlNet { trunk, heads },
            adam: DmlAdam { states },
            mode: meta.mode,
            real_labels: meta.real_labels,
            aux_labels: meta.aux_labels,
            inference: meta.inference,
            log: Vec::new(),
            best_epoch: meta.best_epoch,
            best_val_accuracy: meta.best_val_accuracy,
        })
    }
}

pub fn dml_log_csv(log: &[DmlEpochLog]) -> String {
    let mut out = String::from("mode,epoch,loss_1,loss_2,loss_3,loss_4,total,val_accuracy\n");
    for r in log {
        let [a, b, c, d] = r.branch;
        let _ = writeln!(out, "{},{},{a},{b},{c},{d},{},{}", r.mode, r.epoch, r.total, r.val_accuracy);
    }
    out
}

pub fn write_dml_log(log: &[DmlEpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dml_log_csv(log)).map_err(|e| Error::io(path, e))
}
