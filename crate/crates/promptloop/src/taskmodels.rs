//! Supervised task models: small tanh MLPs for k-way classification or
//! dense per-pixel regression, their losses, mixture training with
//! best-validation checkpoint selection, and group-aware evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use rand::seq::SliceRandom;

use crate::autodiff::{grad, optim_step, OptimKind, OptimState, Tape, Tensor, Var};
use crate::dataio::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::rng::{mix, normal_vec, rng, str_tag};
use crate::toyworlds::{eval_group, Label, ToyDataset, IMG_LEN, MAP_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchId {
    MlpSmall,
    MlpWide,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::MlpSmall => "mlp_small",
            ArchId::MlpWide => "mlp_wide",
        }
    }

    pub fn parse(s: &str) -> Option<ArchId> {
        match s {
            "mlp_small" => Some(ArchId::MlpSmall),
            "mlp_wide" => Some(ArchId::MlpWide),
            _ => None,
        }
    }

    fn hidden(self) -> &'static [usize] {
        match self {
            ArchId::MlpSmall => &[64],
            ArchId::MlpWide => &[256, 256],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classify(usize),
    Dense,
}

impl TaskKind {
    pub fn out_dim(self) -> usize {
        match self {
            TaskKind::Classify(k) => k,
            TaskKind::Dense => MAP_LEN,
        }
    }

    pub fn as_str(self) -> String {
        match self {
            TaskKind::Classify(k) => format!("classify{k}"),
            TaskKind::Dense => "dense".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        if s == "dense" {
            return Some(TaskKind::Dense);
        }
        s.strip_prefix("classify").and_then(|k| k.parse().ok()).map(TaskKind::Classify)
    }

    pub fn for_world(world: crate::toyworlds::WorldKind) -> TaskKind {
        match world.num_classes() {
            Some(k) => TaskKind::Classify(k),
            None => TaskKind::Dense,
        }
    }
}

/// Weight layout: alternating [in, out] matrices and rank-1 biases, one pair
/// per layer.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub arch: ArchId,
    pub task: TaskKind,
    pub weights: Vec<Tensor<f64>>,
}

impl TaskModel {
    pub fn init(arch: ArchId, task: TaskKind, seed: u64) -> TaskModel {
        let mut dims = vec![IMG_LEN];
        dims.extend_from_slice(arch.hidden());
        dims.push(task.out_dim());
        let mut r = rng(mix(seed, &[str_tag("taskmodel-init"), str_tag(arch.as_str())]));
        let mut weights = Vec::new();
        for w in dims.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            let data: Vec<f64> =
                normal_vec(&mut r, w[0] * w[1]).into_iter().map(|v| v * scale).collect();
            weights.push(Tensor::new(&[w[0], w[1]], data));
            weights.push(Tensor::zeros(&[w[1]]));
        }
        TaskModel { arch, task, weights }
    }

    fn arch_string(&self) -> String {
        format!("{}-{}", self.arch.as_str(), self.task.as_str())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tensors = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let name = if i % 2 == 0 { format!("w{}", i / 2) } else { format!("b{}", i / 2) };
                (name, t.clone())
            })
            .collect();
        save_checkpoint(path, &Checkpoint::new(self.arch_string(), tensors))
    }

    pub fn load(path: &std::path::Path) -> Result<TaskModel> {
        let ck = load_checkpoint(path)?;
        let (arch_s, task_s) = ck
            .arch
            .split_once('-')
            .ok_or_else(|| Error::config("checkpoint", format!("bad arch `{}`", ck.arch)))?;
        let arch = ArchId::parse(arch_s)
            .ok_or_else(|| Error::config("checkpoint", format!("unknown arch `{arch_s}`")))?;
        let task = TaskKind::parse(task_s)
            .ok_or_else(|| Error::config("checkpoint", format!("unknown task `{task_s}`")))?;
        let template = TaskModel::init(arch, task, 0);
        let mut weights = Vec::new();
        for (i, like) in template.weights.iter().enumerate() {
            let name = if i % 2 == 0 { format!("w{}", i / 2) } else { format!("b{}", i / 2) };
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::config("checkpoint", format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::config("checkpoint", format!("tensor `{name}` has wrong shape")));
            }
            weights.push(t.clone());
        }
        Ok(TaskModel { arch, task, weights })
    }
}

/// Forward pass on the tape: logits for classification, squashed [0,1] map
/// for dense models. `images` is a [B, IMG_LEN] variable, so gradients can
/// flow into the images themselves (the model weights enter as leaves).
pub fn forward_var<'t>(model: &TaskModel, tape: &'t Tape<f64>, images: Var<'t, f64>) -> Var<'t, f64> {
    let vars: Vec<Var<'t, f64>> = model.weights.iter().map(|w| tape.leaf(w.clone())).collect();
    forward_with(&vars, images, model.task)
}

fn forward_with<'t>(weights: &[Var<'t, f64>], images: Var<'t, f64>, task: TaskKind) -> Var<'t, f64> {
    let layers = weights.len() / 2;
    let mut h = images;
    for l in 0..layers {
        h = h.matmul(weights[2 * l]).add(weights[2 * l + 1]);
        if l + 1 < layers {
            h = h.tanh();
        }
    }
    match task {
        TaskKind::Classify(_) => h,
        // sigmoid(x) = (tanh(x/2) + 1) / 2 keeps dense outputs in (0,1)
        TaskKind::Dense => h.scale(0.5).tanh().scale(0.5).add_const(0.5),
    }
}

/// Deterministic prediction for one image: softmax probabilities for
/// classification, the squashed map for dense models.
pub fn predict(model: &TaskModel, image: &[f64]) -> Vec<f64> {
    assert_eq!(image.len(), IMG_LEN, "predict expects one flattened image");
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, IMG_LEN], image.to_vec()));
    let out = forward_var(model, &tape, x);
    match model.task {
        TaskKind::Classify(_) => out.softmax().value().data().to_vec(),
        TaskKind::Dense => out.value().data().to_vec(),
    }
}

// ── Losses ──

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Xent,
    NegXentFlip,
    EntropyUniform,
    L1,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Xent => "xent",
            LossKind::NegXentFlip => "neg_xent_flip",
            LossKind::EntropyUniform => "entropy_uniform",
            LossKind::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s {
            "xent" => Some(LossKind::Xent),
            "neg_xent_flip" => Some(LossKind::NegXentFlip),
            "entropy_uniform" => Some(LossKind::EntropyUniform),
            "l1" => Some(LossKind::L1),
            _ => None,
        }
    }

    fn check_task(self, task: TaskKind) -> Result<()> {
        let ok = match self {
            LossKind::L1 => task == TaskKind::Dense,
            LossKind::NegXentFlip => task == TaskKind::Classify(2),
            LossKind::Xent | LossKind::EntropyUniform => matches!(task, TaskKind::Classify(_)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "loss",
                format!("{} incompatible with task {}", self.as_str(), task.as_str()),
            ))
        }
    }
}

/// Loss of one prediction (probabilities for classification, squashed map
/// for dense) against a label, mean reduction.
pub fn loss_value(kind: LossKind, task: TaskKind, prediction: &[f64], label: &Label) -> Result<f64> {
    kind.check_task(task)?;
    if prediction.len() != task.out_dim() {
        return Err(Error::config("loss", "prediction has wrong dimension"));
    }
    match (kind, label) {
        (LossKind::Xent, Label::Class(c)) if *c < prediction.len() => Ok(-prediction[*c].ln()),
        (LossKind::NegXentFlip, Label::Class(c)) if *c < 2 => Ok(-prediction[1 - *c].ln()),
        (LossKind::EntropyUniform, Label::Class(_)) => {
            let k = prediction.len() as f64;
            Ok(-prediction.iter().map(|p| p.ln()).sum::<f64>() / k)
        }
        (LossKind::L1, Label::Dense(d)) if d.len() == prediction.len() => {
            Ok(prediction.iter().zip(d).map(|(p, t)| (p - t).abs()).sum::<f64>() / d.len() as f64)
        }
        _ => Err(Error::config("loss", "label does not match loss kind")),
    }
}

/// Numerically stable log-softmax: subtracting the per-row max as a constant
/// leaf leaves the gradient exact.
pub(crate) fn log_softmax<'t>(tape: &'t Tape<f64>, logits: Var<'t, f64>) -> Var<'t, f64> {
    let v = logits.value();
    let (m, n) = (v.shape()[0], v.shape()[1]);
    let mut maxes = Vec::with_capacity(m);
    for i in 0..m {
        maxes.push(v.data()[i * n..(i + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let shifted = logits.sub(tape.leaf(Tensor::new(&[m, 1], maxes)));
    shifted.sub(shifted.exp().sum_axis(1).log())
}

/// Batched differentiable loss on the tape. `output` is `forward_var`
/// output: logits [B,k] for classification kinds, squashed maps [B,256]
/// for l1.
pub fn loss_var<'t>(
    tape: &'t Tape<f64>,
    kind: LossKind,
    task: TaskKind,
    output: Var<'t, f64>,
    labels: &[Label],
) -> Result<Var<'t, f64>> {
    kind.check_task(task)?;
    let b = labels.len();
    let shape = output.shape();
    if shape != [b, task.out_dim()] {
        return Err(Error::config("loss", format!("output shape {shape:?} does not match batch")));
    }
    let class_rows = |flip: bool| -> Result<Tensor<f64>> {
        let k = task.out_dim();
        let mut rows = vec![0.0; b * k];
        for (i, label) in labels.iter().enumerate() {
            let c = label
                .class()
                .ok_or_else(|| Error::config("loss", "classification loss needs class labels"))?;
            if c >= k {
                return Err(Error::config("loss", format!("class {c} out of range")));
            }
            let c = if flip { 1 - c } else { c };
            rows[i * k + c] = 1.0;
        }
        Ok(Tensor::new(&[b, k], rows))
    };
    match kind {
        LossKind::Xent | LossKind::NegXentFlip => {
            let onehot = tape.leaf(class_rows(kind == LossKind::NegXentFlip)?);
            Ok(log_softmax(tape, output).mul(onehot).sum_axis(1).mean().neg())
        }
        LossKind::EntropyUniform => {
            Ok(log_softmax(tape, output).mean_axis(1).mean().neg())
        }
        LossKind::L1 => {
            let mut rows = Vec::with_capacity(b * MAP_LEN);
            for label in labels {
                let d = label
                    .dense()
                    .ok_or_else(|| Error::config("loss", "l1 loss needs dense labels"))?;
                rows.extend_from_slice(d);
            }
            let target = tape.leaf(Tensor::new(&[b, MAP_LEN], rows));
            let diff = output.sub(target);
            Ok(diff.relu().add(diff.neg().relu()).mean())
        }
    }
}

// ── Training ──

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Scratch,
    FinetuneLast,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::FinetuneLast => "finetune_last",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "scratch" => Some(Regime::Scratch),
            "finetune_last" => Some(Regime::FinetuneLast),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub regime: Regime,
    pub seed: u64,
}

impl TrainHyper {
    pub fn defaults(regime: Regime, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: match regime {
                Regime::Scratch => 100,
                Regime::FinetuneLast => 20,
            },
            batch: 32,
            regime,
            seed,
        }
    }
}

/// One dataset in a training mixture with a relative sampling weight.
pub struct MixtureItem<'a> {
    pub data: &'a ToyDataset,
    pub weight: f64,
}

/// Equal-weight-per-example mixture (weights proportional to sizes).
pub fn concat_mixture<'a>(datasets: &[&'a ToyDataset]) -> Vec<MixtureItem<'a>> {
    datasets
        .iter()
        .map(|d| MixtureItem { data: d, weight: d.len() as f64 })
        .collect()
}

fn val_metric(model: &TaskModel, val: &ToyDataset) -> f64 {
    let m = evaluate(model, val);
    match model.task {
        // higher is better either way
        TaskKind::Classify(_) => m.accuracy.unwrap_or(0.0),
        TaskKind::Dense => -m.mean_l1.unwrap_or(f64::INFINITY),
    }
}

/// Train on a weighted dataset mixture, selecting the epoch checkpoint with
/// the best validation metric. `FinetuneLast` updates only the final layer;
/// all other weights stay bit-identical. Zero epochs returns the model
/// unchanged.
pub fn train(
    model: TaskModel,
    mixture: &[MixtureItem],
    val: &ToyDataset,
    hyper: &TrainHyper,
) -> Result<TaskModel> {
    if mixture.is_empty() || mixture.iter().any(|m| m.data.is_empty()) {
        return Err(Error::config("train", "mixture is empty"));
    }
    if mixture.iter().any(|m| m.weight <= 0.0 || !m.weight.is_finite()) {
        return Err(Error::config("train", "mixture weights must be positive"));
    }
    if hyper.epochs == 0 {
        return Ok(model);
    }
    let task = model.task;
    let train_loss = match task {
        TaskKind::Classify(_) => LossKind::Xent,
        TaskKind::Dense => LossKind::L1,
    };

    let mut model = model;
    let trained_range = match hyper.regime {
        Regime::Scratch => 0..model.weights.len(),
        Regime::FinetuneLast => model.weights.len() - 2..model.weights.len(),
    };
    let mut trained: Vec<Tensor<f64>> = model.weights[trained_range.clone()].to_vec();
    let mut opt =
        OptimState::for_params(OptimKind::Adam, hyper.lr, hyper.weight_decay, &trained);

    // Cumulative weights for dataset selection.
    let total_examples: usize = mixture.iter().map(|m| m.data.len()).sum();
    let steps_per_epoch = total_examples.div_ceil(hyper.batch);
    let weight_sum: f64 = mixture.iter().map(|m| m.weight).sum();

    let mut best: Option<(f64, Vec<Tensor<f64>>)> = None;
    for epoch in 0..hyper.epochs {
        for step in 0..steps_per_epoch {
            let mut r = rng(mix(hyper.seed, &[str_tag("train"), epoch as u64, step as u64]));
            let mut images = Vec::with_capacity(hyper.batch * IMG_LEN);
            let mut labels = Vec::with_capacity(hyper.batch);
            for _ in 0..hyper.batch {
                let mut pick = r.gen::<f64>() * weight_sum;
                let mut chosen = &mixture[mixture.len() - 1];
                for item in mixture {
                    if pick < item.weight {
                        chosen = item;
                        break;
                    }
                    pick -= item.weight;
                }
                let ex = &chosen.data.examples[(r.gen::<u64>() % chosen.data.len() as u64) as usize];
                images.extend_from_slice(&ex.image);
                labels.push(ex.label.clone());
            }

            let tape = Tape::new();
            model.weights[trained_range.clone()].clone_from_slice(&trained);
            let weight_vars: Vec<Var<f64>> =
                model.weights.iter().map(|w| tape.leaf(w.clone())).collect();
            let x = tape.leaf(Tensor::new(&[labels.len(), IMG_LEN], images));
            let out = forward_with(&weight_vars, x, task);
            let loss = loss_var(&tape, train_loss, task, out, &labels)?;
            if !loss.item().is_finite() {
                return Err(Error::numerical("train", format!("loss diverged at epoch {epoch}")));
            }
            let grads = grad(loss, &weight_vars[trained_range.clone()])?;
            optim_step(&mut opt, &mut trained, &grads)?;
        }
        model.weights[trained_range.clone()].clone_from_slice(&trained);
        let metric = val_metric(&model, val);
        if best.as_ref().is_none_or(|(b, _)| metric > *b) {
            best = Some((metric, trained.clone()));
        }
    }
    let (_, weights) = best.expect("at least one epoch ran");
    model.weights[trained_range].clone_from_slice(&weights);
    Ok(model)
}

// ── Evaluation ──

#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub n: usize,
    /// Overall classification accuracy.
    pub accuracy: Option<f64>,
    /// Unweighted mean of per-group accuracies.
    pub balanced_accuracy: Option<f64>,
    pub worst_group: Option<f64>,
    /// Classification: per-group (correct, total) counts.
    pub group_counts: BTreeMap<String, (usize, usize)>,
    /// Per-group accuracy or mean l1.
    pub per_group: BTreeMap<String, f64>,
    pub mean_l1: Option<f64>,
}

/// Group-aware metrics. Results are exactly invariant to example order:
/// classification aggregates integer counts, dense sums per-example l1 in
/// id order.
pub fn evaluate(model: &TaskModel, ds: &ToyDataset) -> Metrics {
    assert!(!ds.is_empty(), "evaluate needs a nonempty dataset");
    let mut m = Metrics { n: ds.len(), ..Metrics::default() };
    match model.task {
        TaskKind::Classify(_) => {
            let mut correct_total = 0usize;
            for ex in &ds.examples {
                let probs = predict(model, &ex.image);
                let pred = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                let hit = ex.label.class() == Some(pred);
                correct_total += hit as usize;
                let g = m.group_counts.entry(eval_group(ds.world, ex)).or_insert((0, 0));
                g.0 += hit as usize;
                g.1 += 1;
            }
            m.accuracy = Some(correct_total as f64 / ds.len() as f64);
            for (name, (c, t)) in &m.group_counts {
                m.per_group.insert(name.clone(), *c as f64 / *t as f64);
            }
            let accs: Vec<f64> = m.per_group.values().copied().collect();
            m.balanced_accuracy = Some(accs.iter().sum::<f64>() / accs.len() as f64);
            m.worst_group = accs.into_iter().reduce(f64::min);
        }
        TaskKind::Dense => {
            let mut rows: Vec<(String, String, f64)> = ds
                .examples
                .iter()
                .map(|ex| {
                    let pred = predict(model, &ex.image);
                    let l1 = loss_value(LossKind::L1, TaskKind::Dense, &pred, &ex.label)
                        .expect("dense labels");
                    (ex.id.clone(), eval_group(ds.world, ex), l1)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            let mut total = 0.0;
            for (_, group, l1) in &rows {
                total += l1;
                let g = groups.entry(group.clone()).or_insert((0.0, 0));
                g.0 += l1;
                g.1 += 1;
            }
            m.mean_l1 = Some(total / rows.len() as f64);
            for (name, (sum, count)) in groups {
                m.per_group.insert(name, sum / count as f64);
            }
        }
    }
    m
}

/// Deterministic seeded shuffle helper shared by experiment drivers.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(mix(seed, &[str_tag("shuffle")])));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::toyworlds::{build_world, WorldConfig, WorldKind};

    fn spurbirds(seed: u64, corr: f64) -> crate::toyworlds::World {
        let mut cfg = WorldConfig::defaults(WorldKind::Spurbirds, seed);
        cfg.train = 64;
        cfg.val = 16;
        cfg.test = 32;
        cfg.correlation = corr;
        build_world(&cfg).unwrap()
    }

    #[test]
    fn zero_weight_classifier_predicts_uniform() {
        let mut model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(7), 0);
        for w in model.weights.iter_mut() {
            *w = Tensor::zeros(w.shape());
        }
        let probs = predict(&model, &vec![0.3; IMG_LEN]);
        for p in probs {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_predictions_stay_in_unit_interval_and_are_deterministic() {
        let model = TaskModel::init(ArchId::MlpWide, TaskKind::Dense, 3);
        let img: Vec<f64> = (0..IMG_LEN).map(|i| (i % 11) as f64 / 10.0).collect();
        let a = predict(&model, &img);
        let b = predict(&model, &img);
        assert_eq!(a, b);
        assert_eq!(a.len(), MAP_LEN);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn loss_values_match_analytic_cases() {
        let k7 = TaskKind::Classify(7);
        let uniform = vec![1.0 / 7.0; 7];
        let h = loss_value(LossKind::EntropyUniform, k7, &uniform, &Label::Class(0)).unwrap();
        assert!((h - 7f64.ln()).abs() < 1e-12, "{h} vs ln 7 = {}", 7f64.ln());
        assert!((h - 1.945910).abs() < 1e-6);

        let k2 = TaskKind::Classify(2);
        let sure = vec![1.0, 0.0];
        assert_eq!(loss_value(LossKind::Xent, k2, &sure, &Label::Class(0)).unwrap(), 0.0);

        let map = vec![0.25; MAP_LEN];
        let same = Label::Dense(map.clone());
        assert_eq!(loss_value(LossKind::L1, TaskKind::Dense, &map, &same).unwrap(), 0.0);
    }

    #[test]
    fn flip_loss_equals_xent_of_flipped_label_exactly() {
        let k2 = TaskKind::Classify(2);
        let mut r = rng(5);
        for _ in 0..50 {
            let a: f64 = r.gen::<f64>().max(1e-6);
            let p = vec![a, 1.0 - a];
            for c in 0..2 {
                let flip = loss_value(LossKind::NegXentFlip, k2, &p, &Label::Class(c)).unwrap();
                let xent = loss_value(LossKind::Xent, k2, &p, &Label::Class(1 - c)).unwrap();
                assert_eq!(flip.to_bits(), xent.to_bits());
            }
        }
    }

    #[test]
    fn entropy_uniform_is_minimized_at_the_uniform_distribution() {
        let k = 7;
        let uniform = vec![1.0 / k as f64; k];
        let at_uniform =
            loss_value(LossKind::EntropyUniform, TaskKind::Classify(k), &uniform, &Label::Class(0))
                .unwrap();
        let mut r = rng(11);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..k).map(|_| r.gen::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let val =
                loss_value(LossKind::EntropyUniform, TaskKind::Classify(k), &p, &Label::Class(0))
                    .unwrap();
            assert!(val >= at_uniform - 1e-12, "{val} < {at_uniform}");
        }
    }

    #[test]
    fn incompatible_loss_task_pairs_are_rejected() {
        let k7 = TaskKind::Classify(7);
        let p = vec![1.0 / 7.0; 7];
        assert!(loss_value(LossKind::NegXentFlip, k7, &p, &Label::Class(0)).is_err());
        assert!(loss_value(LossKind::L1, k7, &p, &Label::Class(0)).is_err());
        let d = TaskKind::Dense;
        let map = vec![0.5; MAP_LEN];
        assert!(loss_value(LossKind::Xent, d, &map, &Label::Dense(map.clone())).is_err());
    }

    #[test]
    fn loss_gradients_pass_finite_difference() {
        let b = 3;
        let labels = vec![Label::Class(0), Label::Class(1), Label::Class(0)];
        for kind in [LossKind::Xent, LossKind::NegXentFlip, LossKind::EntropyUniform] {
            let logits = Tensor::new(&[b, 2], normal_vec(&mut rng(7), b * 2));
            let max_rel = finite_diff_check(
                |tape, vars| {
                    loss_var(tape, kind, TaskKind::Classify(2), vars[0], &labels).unwrap()
                },
                &[logits],
                1e-5,
            )
            .unwrap();
            assert!(max_rel < 1e-6, "{kind:?}: {max_rel}");
        }
    }

    #[test]
    fn training_separable_world_beats_logistic_oracle_threshold() {
        let world = spurbirds(1, 1.0);
        // Oracle: plain logistic regression on the same pixels separates the
        // classes, so a model at least as expressive must reach 0.95 too.
        let mut w = Tensor::zeros(&[IMG_LEN, 2]);
        let labels: Vec<Label> = world.train.examples.iter().map(|e| e.label.clone()).collect();
        let images: Vec<f64> =
            world.train.examples.iter().flat_map(|e| e.image.iter().copied()).collect();
        let mut opt = OptimState::for_params(OptimKind::Adam, 1e-2, 0.0, std::slice::from_ref(&w));
        for _ in 0..200 {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let x = tape.leaf(Tensor::new(&[labels.len(), IMG_LEN], images.clone()));
            let loss =
                loss_var(&tape, LossKind::Xent, TaskKind::Classify(2), x.matmul(wv), &labels)
                    .unwrap();
            let grads = grad(loss, &[wv]).unwrap();
            let mut params = [w];
            optim_step(&mut opt, &mut params, &grads).unwrap();
            [w] = params;
        }
        let oracle_acc = {
            let mut correct = 0;
            for ex in &world.train.examples {
                let tape = Tape::new();
                let x = tape.leaf(Tensor::new(&[1, IMG_LEN], ex.image.clone()));
                let logits = x.matmul(tape.leaf(w.clone())).value();
                let pred = (logits.data()[1] > logits.data()[0]) as usize;
                correct += (ex.label.class() == Some(pred)) as usize;
            }
            correct as f64 / world.train.len() as f64
        };
        assert!(oracle_acc > 0.95, "classes are not separable: oracle acc {oracle_acc}");

        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 2);
        let hyper = TrainHyper { epochs: 30, ..TrainHyper::defaults(Regime::Scratch, 3) };
        let mixture = concat_mixture(&[&world.train]);
        let trained = train(model, &mixture, &world.val, &hyper).unwrap();
        let acc = evaluate(&trained, &world.train).accuracy.unwrap();
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn finetune_last_only_touches_the_final_layer() {
        let world = spurbirds(4, 0.9);
        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 5);
        let frozen: Vec<Tensor<f64>> = model.weights[..model.weights.len() - 2].to_vec();
        let hyper = TrainHyper { epochs: 3, ..TrainHyper::defaults(Regime::FinetuneLast, 6) };
        let mixture = concat_mixture(&[&world.train]);
        let tuned = train(model, &mixture, &world.val, &hyper).unwrap();
        for (a, b) in frozen.iter().zip(&tuned.weights) {
            assert_eq!(a.data(), b.data(), "frozen weights must stay bit-identical");
        }
        let last = tuned.weights.len() - 2;
        assert_ne!(frozen.len(), last + 2);
    }

    #[test]
    fn zero_epochs_returns_the_model_unchanged() {
        let world = spurbirds(7, 0.9);
        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 8);
        let before = model.weights.clone();
        let hyper = TrainHyper { epochs: 0, ..TrainHyper::defaults(Regime::Scratch, 9) };
        let mixture = concat_mixture(&[&world.train]);
        let out = train(model, &mixture, &world.val, &hyper).unwrap();
        for (a, b) in before.iter().zip(&out.weights) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn constant_classifier_scores_half_on_balanced_data() {
        let world = spurbirds(10, 0.95);
        let mut model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 0);
        for w in model.weights.iter_mut() {
            *w = Tensor::zeros(w.shape());
        }
        let n = model.weights.len();
        // bias the last layer so class 0 always wins
        model.weights[n - 1] = Tensor::new(&[2], vec![1.0, 0.0]);
        let m = evaluate(&model, &world.test);
        assert_eq!(m.accuracy, Some(0.5));
        assert_eq!(m.worst_group, Some(0.0));
    }

    #[test]
    fn group_counts_recombine_to_overall_accuracy() {
        let world = spurbirds(12, 0.95);
        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 13);
        let m = evaluate(&model, &world.test);
        let (c, t) = m
            .group_counts
            .values()
            .fold((0usize, 0usize), |acc, (c, t)| (acc.0 + c, acc.1 + t));
        assert_eq!(t, m.n);
        assert_eq!(m.accuracy.unwrap(), c as f64 / t as f64);
    }

    #[test]
    fn evaluation_is_exactly_order_invariant() {
        let mut cfg = WorldConfig::defaults(WorldKind::Depthrooms, 14);
        cfg.train = 8;
        cfg.val = 4;
        cfg.test = 12;
        let world = build_world(&cfg).unwrap();
        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Dense, 15);
        let m1 = evaluate(&model, &world.test);
        let mut reversed = world.test.clone();
        reversed.examples.reverse();
        let m2 = evaluate(&model, &reversed);
        assert_eq!(m1.mean_l1.unwrap().to_bits(), m2.mean_l1.unwrap().to_bits());
        assert_eq!(m1.per_group, m2.per_group);
    }

    #[test]
    fn dense_model_evaluated_against_its_own_predictions_has_zero_l1() {
        let mut cfg = WorldConfig::defaults(WorldKind::Depthrooms, 16);
        cfg.train = 4;
        cfg.val = 4;
        cfg.test = 6;
        let world = build_world(&cfg).unwrap();
        let model = TaskModel::init(ArchId::MlpWide, TaskKind::Dense, 17);
        let mut echo = world.test.clone();
        for ex in echo.examples.iter_mut() {
            ex.label = Label::Dense(predict(&model, &ex.image));
        }
        assert_eq!(evaluate(&model, &echo).mean_l1, Some(0.0));
    }

    #[test]
    fn checkpoints_roundtrip_bitwise() {
        let model = TaskModel::init(ArchId::MlpWide, TaskKind::Classify(7), 19);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ck");
        model.save(&p).unwrap();
        let back = TaskModel::load(&p).unwrap();
        assert_eq!(back.arch, model.arch);
        assert_eq!(back.task, model.task);
        for (a, b) in model.weights.iter().zip(&back.weights) {
            assert_eq!(a.data(), b.data());
        }
    }
}
