//! Prompt-space optimization against frozen models: push generated examples
//! toward high task loss, optionally pulled toward a target distribution by
//! guidance terms, plus banking of optimized prompts and the multi-round
//! retraining protocol.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{grad, optim_step, OptimKind, OptimState, Tape, Tensor};
use crate::dataio::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::generator::{
    ddim_sample_batch, ddim_sample_var, DenoiserParams, NoiseSchedule, PromptEmbedding,
    PromptProvenance, SampleJob, SamplerConfig,
};
use crate::guidance::{clip_guidance_var, ti_guidance_var, GuidanceTarget, JointEmbedder};
use crate::rng::{mix, normal_vec, rng, str_tag};
use crate::taskmodels::{forward_var, loss_var, train, LossKind, MixtureItem, TaskKind, TaskModel, TrainHyper};
use crate::toyworlds::{Label, ToyDataset, ToyExample, World, EMBED_DIM};

// ── Prompt initialization ──

/// Draw `n` tokens i.i.d. from the per-dimension vocabulary moments.
pub fn init_prompt(
    n: usize,
    stats: &(Vec<f64>, Vec<f64>),
    seed: u64,
) -> Result<PromptEmbedding> {
    let (mu, sd) = stats;
    if n == 0 || mu.len() != EMBED_DIM || sd.len() != EMBED_DIM {
        return Err(Error::config("init_prompt", "need n >= 1 tokens and full-width moments"));
    }
    let mut r = rng(mix(seed, &[str_tag("init-prompt"), n as u64]));
    let mut data = Vec::with_capacity(n * EMBED_DIM);
    for _ in 0..n {
        for (z, (&m, &s)) in normal_vec(&mut r, EMBED_DIM).iter().zip(mu.iter().zip(sd)) {
            data.push(m + s * z);
        }
    }
    PromptEmbedding::new(
        format!("rand-n{n}-s{seed}"),
        Tensor::new(&[n, EMBED_DIM], data),
        PromptProvenance { method: "random".to_string(), seed, iteration: 0 },
    )
}

// ── Optimization config ──

/// Sign that turns a task-loss spec into a term to minimize: flip and
/// uniform targets already describe hard examples, the plain losses get
/// maximized by negation.
pub fn adversarial_sign(kind: LossKind) -> f64 {
    match kind {
        LossKind::Xent | LossKind::L1 => -1.0,
        LossKind::NegXentFlip | LossKind::EntropyUniform => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub tokens: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Steps at the start that optimize only the guidance terms.
    pub warmup_skip: usize,
    /// Stop once the running-mean task loss reaches this value.
    pub early_stop: Option<f64>,
    /// Running-mean window for early stopping.
    pub window: usize,
    pub batch: usize,
    pub sampler: SamplerConfig,
    pub adv_loss: LossKind,
    pub seed: u64,
}

impl OptimConfig {
    pub fn defaults(kind: crate::toyworlds::WorldKind, seed: u64) -> OptimConfig {
        use crate::toyworlds::WorldKind;
        let (adv_loss, condition) = match kind {
            WorldKind::Spurbirds => (LossKind::NegXentFlip, crate::generator::CondKind::MaskInpaint),
            WorldKind::Wildspots => (LossKind::EntropyUniform, crate::generator::CondKind::MaskInpaint),
            WorldKind::Depthrooms => (LossKind::L1, crate::generator::CondKind::DenseMap),
        };
        OptimConfig {
            tokens: 16,
            lr: 0.05,
            max_steps: 300,
            warmup_skip: 0,
            early_stop: None,
            window: 10,
            batch: 8,
            sampler: SamplerConfig {
                steps: crate::generator::OPT_SAMPLE_STEPS,
                sdedit_strength: 0.8,
                cfg_scale: 1.0,
                condition,
                seed,
            },
            adv_loss,
            seed,
        }
    }

    /// Guided variant: longer run with a guidance-only warmup phase.
    pub fn guided_defaults(kind: crate::toyworlds::WorldKind, seed: u64) -> OptimConfig {
        let mut cfg = OptimConfig::defaults(kind, seed);
        cfg.max_steps = 600;
        cfg.warmup_skip = 120;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::config("optim.tokens", "need at least one token"));
        }
        if self.lr <= 0.0 || self.lr.is_nan() {
            return Err(Error::config("optim.lr", format!("{} not positive", self.lr)));
        }
        if self.max_steps > 0 && self.warmup_skip >= self.max_steps {
            return Err(Error::config(
                "optim.warmup_skip",
                format!("{} must be below max_steps {}", self.warmup_skip, self.max_steps),
            ));
        }
        if self.max_steps == 0 && self.warmup_skip > 0 {
            return Err(Error::config("optim.warmup_skip", "warmup without steps"));
        }
        if let Some(t) = self.early_stop {
            if t.is_nan() {
                return Err(Error::config("optim.early_stop", "threshold is NaN"));
            }
        }
        if self.window == 0 || self.batch == 0 {
            return Err(Error::config("optim", "window and batch must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "tokens={};lr={};steps={};warmup={};stop={:?};window={};batch={};\
             sampler=S{}k{}g{}c{};loss={};seed={}",
            self.tokens,
            self.lr,
            self.max_steps,
            self.warmup_skip,
            self.early_stop,
            self.window,
            self.batch,
            self.sampler.steps,
            self.sampler.sdedit_strength,
            self.sampler.cfg_scale,
            self.sampler.condition.as_str(),
            self.adv_loss.as_str(),
            self.seed
        );
        format!("{:016x}", str_tag(&s))
    }
}

/// Everything the guided objective needs beyond the config: the embedder,
/// the distribution target, and optional denoising-reconstruction targets.
pub struct GuidanceSetup<'a> {
    pub embedder: &'a JointEmbedder,
    pub target: GuidanceTarget,
    /// Raw target images for the reconstruction term; empty disables it.
    pub ti_images: Vec<Vec<f64>>,
    pub ti_weight: f64,
    pub ti_batch: usize,
}

impl<'a> GuidanceSetup<'a> {
    pub fn clip_only(embedder: &'a JointEmbedder, target: GuidanceTarget) -> GuidanceSetup<'a> {
        GuidanceSetup { embedder, target, ti_images: Vec::new(), ti_weight: 0.0, ti_batch: 4 }
    }

    fn enabled(&self) -> bool {
        self.target.lambda_t > 0.0
            || self.target.lambda_i > 0.0
            || (!self.ti_images.is_empty() && self.ti_weight > 0.0)
    }
}

// ── The optimization loop ──

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopReason {
    MaxSteps,
    /// Running-mean task loss crossed the threshold at this step.
    EarlyStop { step: usize },
    /// Objective or task loss went non-finite at this step; the returned
    /// prompt is the last finite state.
    NumericalAbort { step: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub step: usize,
    /// The value actually minimized this step.
    pub objective: f64,
    /// Signed adversarial component (recorded during warmup too).
    pub adversarial: f64,
    /// Guidance component; exactly 0 when guidance is disabled.
    pub guidance: f64,
    /// Plain task loss of the frozen model on the generated batch.
    pub task_loss: f64,
    /// Running minimum of the objective column.
    pub best_objective: f64,
}

#[derive(Clone, Debug)]
pub struct OptRun {
    pub prompt: PromptEmbedding,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

/// Optimize prompt tokens against a frozen model and generator. Guidance
/// `None` (or a setup with everything zero) gives the pure adversarial
/// loop; with guidance, the first `warmup_skip` steps minimize only the
/// guidance terms. Non-finite losses abort, returning the trace so far.
pub fn optimize(
    model: &TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    guidance: Option<&GuidanceSetup>,
    cfg: &OptimConfig,
    init: PromptEmbedding,
) -> Result<OptRun> {
    optimize_impl(model, gen, sch, source, guidance, cfg, init, true)
}

/// Distribution matching alone: every step minimizes only the guidance
/// terms; the model enters the trace's task-loss column but never the
/// objective.
pub fn optimize_guided(
    model: &TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    guidance: &GuidanceSetup,
    cfg: &OptimConfig,
    init: PromptEmbedding,
) -> Result<OptRun> {
    if !guidance.enabled() {
        return Err(Error::config("optimize", "guided runs need an enabled guidance term"));
    }
    if cfg.warmup_skip > 0 {
        return Err(Error::config("optimize", "guided-only runs have no warmup phase"));
    }
    optimize_impl(model, gen, sch, source, Some(guidance), cfg, init, false)
}

#[allow(clippy::too_many_arguments)]
fn optimize_impl(
    model: &TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    guidance: Option<&GuidanceSetup>,
    cfg: &OptimConfig,
    init: PromptEmbedding,
    adversarial: bool,
) -> Result<OptRun> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::config("optimize", "source dataset is empty"));
    }
    let guidance = guidance.filter(|g| g.enabled());
    if let Some(g) = guidance {
        g.target.validate()?;
    }
    if (cfg.warmup_skip > 0 || !adversarial) && guidance.is_none() {
        return Err(Error::config("optimize", "warmup steps need an enabled guidance term"));
    }
    let task = model.task;
    let true_loss = match task {
        TaskKind::Classify(_) => LossKind::Xent,
        TaskKind::Dense => LossKind::L1,
    };
    let sign = adversarial_sign(cfg.adv_loss);

    let mut tokens = init.tokens.clone();
    let mut opt = OptimState::for_params(OptimKind::Adam, cfg.lr, 0.0, std::slice::from_ref(&tokens));
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut stop = StopReason::MaxSteps;

    for step in 0..cfg.max_steps {
        let mut r = rng(mix(cfg.seed, &[str_tag("opt-batch"), step as u64]));
        let jobs: Vec<SampleJob> = (0..cfg.batch)
            .map(|j| {
                let ex = &source.examples[(r.gen::<u64>() % source.len() as u64) as usize];
                SampleJob {
                    y: ex.label.clone(),
                    source: Some(ex),
                    seed: mix(cfg.seed, &[str_tag("opt-sample"), step as u64, j as u64]),
                }
            })
            .collect();
        let labels: Vec<Label> = jobs.iter().map(|j| j.y.clone()).collect();

        let tape = Tape::new();
        let tvar = tape.leaf(tokens.clone());
        let x = ddim_sample_var(&tape, gen, sch, tvar, &jobs, &cfg.sampler)?;
        let out = forward_var(model, &tape, x);
        let adv = loss_var(&tape, cfg.adv_loss, task, out, &labels)?.scale(sign);
        let task_loss = loss_var(&tape, true_loss, task, out, &labels)?.item();

        let gvar = match guidance {
            Some(g) => {
                let mut gv = clip_guidance_var(&tape, g.embedder, tvar, x, &g.target)?;
                if !g.ti_images.is_empty() && g.ti_weight > 0.0 {
                    let refs: Vec<&[f64]> = g.ti_images.iter().map(|v| v.as_slice()).collect();
                    let ti = ti_guidance_var(
                        &tape,
                        gen,
                        sch,
                        tvar,
                        &refs,
                        g.ti_batch,
                        g.ti_weight,
                        mix(cfg.seed, &[str_tag("opt-ti"), step as u64]),
                    )?;
                    gv = gv.add(ti);
                }
                Some(gv)
            }
            None => None,
        };

        let objective = if !adversarial || step < cfg.warmup_skip {
            gvar.expect("validated: guidance present on guidance-only steps")
        } else {
            match gvar {
                Some(g) => adv.add(g),
                None => adv,
            }
        };

        let obj_val = objective.item();
        if !obj_val.is_finite() || !task_loss.is_finite() {
            stop = StopReason::NumericalAbort { step };
            break;
        }
        let best = trace.last().map_or(obj_val, |r| r.best_objective.min(obj_val));
        trace.push(TraceRow {
            step,
            objective: obj_val,
            adversarial: adv.item(),
            guidance: gvar.map_or(0.0, |g| g.item()),
            task_loss,
            best_objective: best,
        });

        if let Some(threshold) = cfg.early_stop {
            let from = trace.len().saturating_sub(cfg.window);
            let window = &trace[from..];
            let mean = window.iter().map(|r| r.task_loss).sum::<f64>() / window.len() as f64;
            if mean >= threshold {
                stop = StopReason::EarlyStop { step };
                break;
            }
        }

        let grads = grad(objective, &[tvar])?;
        let mut params = [tokens];
        optim_step(&mut opt, &mut params, &grads)?;
        [tokens] = params;
    }

    let prompt = PromptEmbedding::new(init.id.clone(), tokens, init.provenance.clone())?;
    Ok(OptRun { prompt, trace, stop })
}

/// Pure adversarial optimization: no guidance, no warmup.
pub fn optimize_adversarial(
    model: &TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    cfg: &OptimConfig,
    init: PromptEmbedding,
) -> Result<OptRun> {
    if cfg.warmup_skip > 0 {
        return Err(Error::config("optimize", "adversarial runs take no warmup"));
    }
    optimize(model, gen, sch, source, None, cfg, init)
}

/// Guided adversarial optimization; the guidance setup must carry at least
/// one active term.
pub fn optimize_guided_adversarial(
    model: &TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    guidance: &GuidanceSetup,
    cfg: &OptimConfig,
    init: PromptEmbedding,
) -> Result<OptRun> {
    if !guidance.enabled() {
        return Err(Error::config("optimize", "guided runs need an enabled guidance term"));
    }
    optimize(model, gen, sch, source, Some(guidance), cfg, init)
}

// ── Prompt bank ──

#[derive(Clone, Debug)]
pub struct BankEntry {
    pub prompt: PromptEmbedding,
    pub iteration: usize,
    /// Source-class lane the prompt was optimized in, when restricted.
    pub class: Option<usize>,
    /// Final running task loss when the prompt was banked.
    pub task_loss: f64,
    /// Final guidance component (0 for unguided prompts).
    pub guidance_loss: f64,
    pub config_hash: String,
    /// Architecture of the model that provided gradients, or "none".
    pub feedback: String,
}

#[derive(Clone, Debug, Default)]
pub struct PromptBank {
    pub entries: Vec<BankEntry>,
}

fn check_bank_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        || id.starts_with('.')
    {
        return Err(Error::config("bank", format!("unusable prompt id `{id}`")));
    }
    Ok(())
}

impl PromptBank {
    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        check_bank_id(&entry.prompt.id)?;
        if self.entries.iter().any(|e| e.prompt.id == entry.prompt.id) {
            return Err(Error::config("bank", format!("duplicate prompt id `{}`", entry.prompt.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn prompts(&self) -> Vec<&PromptEmbedding> {
        self.entries.iter().map(|e| &e.prompt).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tsv = String::from(BANK_HEADER);
        tsv.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                tsv,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.prompt.id,
                e.prompt.provenance.method,
                e.prompt.provenance.seed,
                e.iteration,
                e.prompt.tokens.shape()[0],
                e.class.map_or("-".to_string(), |c| c.to_string()),
                e.task_loss,
                e.guidance_loss,
                e.config_hash,
                e.feedback,
            );
            save_checkpoint(
                &dir.join(format!("{}.ck", e.prompt.id)),
                &Checkpoint::new("prompt", vec![("tokens".to_string(), e.prompt.tokens.clone())]),
            )?;
        }
        std::fs::write(dir.join("bank.tsv"), tsv).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<PromptBank> {
        let text = std::fs::read_to_string(dir.join("bank.tsv")).map_err(|e| Error::io(dir, e))?;
        let rows = parse_bank_index(&text)?;
        let mut entries = Vec::with_capacity(rows.len());
        for row in rows {
            let ck = load_checkpoint(&dir.join(format!("{}.ck", row.id)))?;
            let tokens = ck
                .tensor("tokens")
                .ok_or_else(|| Error::config("bank", format!("checkpoint for `{}` lacks tokens", row.id)))?;
            if tokens.shape() != [row.tokens, EMBED_DIM] {
                return Err(Error::config("bank", format!("token shape mismatch for `{}`", row.id)));
            }
            entries.push(BankEntry {
                prompt: PromptEmbedding::new(
                    row.id,
                    tokens.clone(),
                    PromptProvenance { method: row.method, seed: row.seed, iteration: row.iteration },
                )?,
                iteration: row.iteration,
                class: row.class,
                task_loss: row.task_loss,
                guidance_loss: row.guidance_loss,
                config_hash: row.config_hash,
                feedback: row.feedback,
            });
        }
        Ok(PromptBank { entries })
    }
}

pub const BANK_HEADER: &str =
    "id\tmethod\tseed\titeration\ttokens\tclass\ttask_loss\tguidance_loss\tconfig_hash\tfeedback";

#[derive(Clone, Debug, PartialEq)]
pub struct BankRow {
    pub id: String,
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub tokens: usize,
    pub class: Option<usize>,
    pub task_loss: f64,
    pub guidance_loss: f64,
    pub config_hash: String,
    pub feedback: String,
}

/// Parse a bank index. Pure: rejects malformed headers, field counts,
/// non-finite losses, unusable ids, and duplicates without touching disk.
pub fn parse_bank_index(text: &str) -> Result<Vec<BankRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(BANK_HEADER) {
        return Err(Error::config("bank.tsv", "bad or missing header"));
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(Error::config("bank.tsv", format!("line {}: {} fields, want 10", no + 2, f.len())));
        }
        check_bank_id(f[0])?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::config("bank.tsv", format!("duplicate prompt id `{}`", f[0])));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::config("bank.tsv", format!("line {}: bad {what}", no + 2)))?;
            if !v.is_finite() {
                return Err(Error::config("bank.tsv", format!("line {}: non-finite {what}", no + 2)));
            }
            Ok(v)
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::config("bank.tsv", format!("line {}: bad {what}", no + 2)))
        };
        let tokens = int(f[4], "token count")? as usize;
        if tokens == 0 {
            return Err(Error::config("bank.tsv", format!("line {}: zero tokens", no + 2)));
        }
        let class = match f[5] {
            "-" => None,
            s => Some(int(s, "class")? as usize),
        };
        rows.push(BankRow {
            id: f[0].to_string(),
            method: f[1].to_string(),
            seed: int(f[2], "seed")?,
            iteration: int(f[3], "iteration")? as usize,
            tokens,
            class,
            task_loss: num(f[6], "task loss")?,
            guidance_loss: num(f[7], "guidance loss")?,
            config_hash: f[8].to_string(),
            feedback: f[9].to_string(),
        });
    }
    Ok(rows)
}

// ── Generation from banked prompts ──

/// Round-robin generation: sample i uses prompt i mod |prompts| and source
/// i, with a per-sample seed derived from the job seed and both ids. One
/// sample per source; asking for more than the pool holds is an error.
pub fn generate_round_robin(
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    prompts: &[&PromptEmbedding],
    sources: &[&ToyExample],
    sampler: &SamplerConfig,
    job_seed: u64,
    budget: usize,
) -> Result<Vec<ToyExample>> {
    if prompts.is_empty() {
        return Err(Error::config("generate", "empty prompt bank"));
    }
    if budget == 0 {
        return Err(Error::config("generate", "budget must be positive"));
    }
    if budget > sources.len() {
        return Err(Error::config(
            "generate",
            format!("budget {budget} exceeds source pool of {}", sources.len()),
        ));
    }
    let mut out: Vec<Option<ToyExample>> = vec![None; budget];
    for (p_idx, prompt) in prompts.iter().enumerate() {
        let assigned: Vec<usize> =
            (0..budget).filter(|i| i % prompts.len() == p_idx).collect();
        for chunk in assigned.chunks(32) {
            let jobs: Vec<SampleJob> = chunk
                .iter()
                .map(|&i| SampleJob {
                    y: sources[i].label.clone(),
                    source: Some(sources[i]),
                    seed: mix(job_seed, &[str_tag(&prompt.id), str_tag(&sources[i].id)]),
                })
                .collect();
            let samples = ddim_sample_batch(gen, sch, prompt, &jobs, sampler)?;
            for (&i, sample) in chunk.iter().zip(samples) {
                out[i] = Some(sample.into_example(format!("{}.{}", prompt.id, sources[i].id)));
            }
        }
    }
    Ok(out.into_iter().map(|e| e.expect("all indices assigned")).collect())
}

// ── Multi-iteration protocol ──

#[derive(Clone, Debug)]
pub struct IterationSchedule {
    /// Token count of every prompt optimized in each iteration.
    pub tokens: Vec<usize>,
    pub prompts_per_iter: usize,
    pub budget_per_iter: usize,
}

impl IterationSchedule {
    pub fn defaults(iterations: usize, budget_per_iter: usize) -> IterationSchedule {
        let mut tokens = Vec::with_capacity(iterations);
        let mut n = 1;
        for i in 0..iterations {
            tokens.push(n);
            n = if i == 0 { 8 } else { (n * 2).min(64) };
        }
        IterationSchedule { tokens, prompts_per_iter: 4, budget_per_iter }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.contains(&0) {
            return Err(Error::config("schedule", "token counts must be nonempty and positive"));
        }
        if self.prompts_per_iter == 0 || self.budget_per_iter == 0 {
            return Err(Error::config("schedule", "prompts and budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IterationReport {
    pub iteration: usize,
    pub bank_ids: Vec<String>,
    pub generated: usize,
    pub metrics: crate::taskmodels::Metrics,
}

/// Alternate prompt optimization against the current model with finetuning
/// on original plus all generated data, evaluating after each round.
#[allow(clippy::too_many_arguments)]
pub fn run_multi_iteration(
    model: TaskModel,
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    world: &World,
    stats: &(Vec<f64>, Vec<f64>),
    guidance: Option<&GuidanceSetup>,
    base_cfg: &OptimConfig,
    schedule: &IterationSchedule,
    finetune: &TrainHyper,
    eval_on: &ToyDataset,
) -> Result<(PromptBank, TaskModel, Vec<IterationReport>)> {
    schedule.validate()?;
    if schedule.budget_per_iter > world.train.len() {
        return Err(Error::config(
            "schedule",
            format!(
                "budget {} exceeds the {}-example source pool",
                schedule.budget_per_iter,
                world.train.len()
            ),
        ));
    }
    let mut model = model;
    let mut bank = PromptBank::default();
    let mut reports = Vec::new();
    let mut generated: Vec<ToyDataset> = Vec::new();

    for (it, &tokens) in schedule.tokens.iter().enumerate() {
        let mut ids = Vec::new();
        for p in 0..schedule.prompts_per_iter {
            let mut cfg = base_cfg.clone();
            cfg.tokens = tokens;
            cfg.seed = mix(base_cfg.seed, &[str_tag("iter"), it as u64, p as u64]);
            let mut init = init_prompt(tokens, stats, cfg.seed)?;
            init.id = format!("it{it}-p{p}");
            init.provenance.iteration = it;
            init.provenance.method =
                if guidance.is_some() { "guided_adversarial".into() } else { "adversarial".into() };
            let run = optimize(&model, gen, sch, &world.train, guidance, &cfg, init)?;
            if let StopReason::NumericalAbort { step } = run.stop {
                return Err(Error::numerical(
                    "run_multi_iteration",
                    format!("prompt it{it}-p{p} aborted at step {step}"),
                ));
            }
            let last = run.trace.last();
            ids.push(run.prompt.id.clone());
            bank.push(BankEntry {
                prompt: run.prompt,
                iteration: it,
                class: None,
                task_loss: last.map_or(f64::NAN, |r| r.task_loss),
                guidance_loss: last.map_or(0.0, |r| r.guidance),
                config_hash: cfg.hash(),
                feedback: model.arch.as_str().to_string(),
            })?;
        }

        let iter_prompts: Vec<&PromptEmbedding> = bank
            .entries
            .iter()
            .filter(|e| e.iteration == it)
            .map(|e| &e.prompt)
            .collect();
        let sources: Vec<&ToyExample> = world.train.examples.iter().collect();
        let examples = generate_round_robin(
            gen,
            sch,
            &iter_prompts,
            &sources,
            &base_cfg.sampler,
            mix(base_cfg.seed, &[str_tag("gen"), it as u64]),
            schedule.budget_per_iter,
        )?;
        let count = examples.len();
        generated.push(ToyDataset {
            world: world.cfg.kind,
            split: format!("gen-it{it}"),
            examples,
        });

        let mut mixture = vec![MixtureItem { data: &world.train, weight: world.train.len() as f64 }];
        for g in &generated {
            mixture.push(MixtureItem { data: g, weight: g.len() as f64 });
        }
        model = train(model, &mixture, &world.val, finetune)?;
        reports.push(IterationReport {
            iteration: it,
            bank_ids: ids,
            generated: count,
            metrics: crate::taskmodels::evaluate(&model, eval_on),
        });
    }
    Ok((bank, model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::generator::{train_denoiser, CondKind, DenoiserHyper};
    use crate::guidance::{build_target, reference_norms, Metric};
    use crate::taskmodels::{evaluate, ArchId, Regime};
    use crate::toyworlds::{
        build_world, generator_pool, vocab_stats, vocabulary, WorldConfig, WorldKind,
    };

    fn tiny_setup() -> (World, DenoiserParams, NoiseSchedule, TaskModel, (Vec<f64>, Vec<f64>)) {
        let mut wc = WorldConfig::defaults(WorldKind::Spurbirds, 7);
        wc.train = 24;
        wc.val = 8;
        wc.test = 16;
        wc.correlation = 1.0;
        let world = build_world(&wc).unwrap();
        let sch = NoiseSchedule::new(100);
        let pool = generator_pool(&wc, 48);
        let hyper = DenoiserHyper {
            hidden: 24,
            iters: 60,
            batch: 16,
            ..DenoiserHyper::defaults(3)
        };
        let gen = train_denoiser(&pool, &sch, &hyper).unwrap();
        let model = TaskModel::init(ArchId::MlpSmall, TaskKind::Classify(2), 5);
        let vocab = vocabulary(WorldKind::Spurbirds, hyper.vocab_seed);
        let stats = vocab_stats(&vocab);
        (world, gen, sch, model, stats)
    }

    fn tiny_cfg(seed: u64) -> OptimConfig {
        let mut cfg = OptimConfig::defaults(WorldKind::Spurbirds, seed);
        cfg.max_steps = 4;
        cfg.batch = 2;
        cfg.tokens = 2;
        cfg.sampler.steps = 2;
        cfg
    }

    #[test]
    fn init_prompt_is_seeded_and_matches_moments() {
        let mu: Vec<f64> = (0..EMBED_DIM).map(|i| i as f64 / 8.0 - 2.0).collect();
        let sd: Vec<f64> = (0..EMBED_DIM).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
        let stats = (mu.clone(), sd.clone());

        let a = init_prompt(4, &stats, 11).unwrap();
        let b = init_prompt(4, &stats, 11).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
        assert_ne!(a.tokens.data(), init_prompt(4, &stats, 12).unwrap().tokens.data());

        let frozen = init_prompt(3, &(mu.clone(), vec![0.0; EMBED_DIM]), 13).unwrap();
        for row in 0..3 {
            assert_eq!(&frozen.tokens.data()[row * EMBED_DIM..(row + 1) * EMBED_DIM], &mu[..]);
        }

        let n = 10_000;
        let big = init_prompt(n, &stats, 14).unwrap();
        for d in 0..EMBED_DIM {
            let col: Vec<f64> = (0..n).map(|t| big.tokens.data()[t * EMBED_DIM + d]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            assert!((m - mu[d]).abs() < 0.03 * (sd[d] + mu[d].abs()), "dim {d} mean {m}");
            assert!((v.sqrt() - sd[d]).abs() / sd[d] < 0.03, "dim {d} sd {}", v.sqrt());
        }
    }

    #[test]
    fn adversarial_signs_flip_only_the_plain_losses() {
        assert_eq!(adversarial_sign(LossKind::Xent), -1.0);
        assert_eq!(adversarial_sign(LossKind::L1), -1.0);
        assert_eq!(adversarial_sign(LossKind::NegXentFlip), 1.0);
        assert_eq!(adversarial_sign(LossKind::EntropyUniform), 1.0);
    }

    #[test]
    fn zero_max_steps_returns_the_init_prompt_unchanged() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let mut cfg = tiny_cfg(1);
        cfg.max_steps = 0;
        let init = init_prompt(2, &stats, 2).unwrap();
        let before = init.tokens.clone();
        let run = optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init).unwrap();
        assert_eq!(run.prompt.tokens.data(), before.data());
        assert!(run.trace.is_empty());
        assert_eq!(run.stop, StopReason::MaxSteps);
    }

    #[test]
    fn bottom_threshold_stops_at_the_first_step() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let mut cfg = tiny_cfg(3);
        cfg.early_stop = Some(f64::NEG_INFINITY);
        let init = init_prompt(2, &stats, 4).unwrap();
        let before = init.tokens.clone();
        let run = optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init).unwrap();
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.stop, StopReason::EarlyStop { step: 0 });
        // stopping precedes the update, so the prompt is untouched
        assert_eq!(run.prompt.tokens.data(), before.data());
    }

    #[test]
    fn early_stop_truncates_exactly_at_the_crossing_step() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let mut cfg = tiny_cfg(5);
        cfg.max_steps = 6;
        let init = init_prompt(2, &stats, 6).unwrap();
        let free = optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init.clone()).unwrap();
        assert_eq!(free.trace.len(), 6);
        let running = |rows: &[TraceRow], upto: usize| {
            let from = (upto + 1).saturating_sub(cfg.window);
            rows[from..=upto].iter().map(|r| r.task_loss).sum::<f64>() / (upto + 1 - from) as f64
        };
        // pick a threshold that crosses somewhere after the first step
        let target_step = 2;
        let threshold = running(&free.trace, target_step);
        let first_cross = (0..free.trace.len())
            .find(|&s| running(&free.trace, s) >= threshold)
            .unwrap();
        cfg.early_stop = Some(threshold);
        let stopped = optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init).unwrap();
        assert_eq!(stopped.stop, StopReason::EarlyStop { step: first_cross });
        assert_eq!(stopped.trace.len(), first_cross + 1);
        for (a, b) in stopped.trace.iter().zip(&free.trace) {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        }
    }

    #[test]
    fn disabled_guidance_degenerates_to_the_adversarial_loop_bitwise() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let cfg = tiny_cfg(8);
        let init = init_prompt(2, &stats, 9).unwrap();
        let plain =
            optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init.clone()).unwrap();

        let emb = JointEmbedder::init(10);
        let setup = GuidanceSetup::clip_only(&emb, GuidanceTarget::none());
        let guided =
            optimize(&model, &gen, &sch, &world.train, Some(&setup), &cfg, init).unwrap();

        assert_eq!(plain.prompt.tokens.data(), guided.prompt.tokens.data());
        assert_eq!(plain.trace.len(), guided.trace.len());
        for (a, b) in plain.trace.iter().zip(&guided.trace) {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
            assert_eq!(b.guidance, 0.0);
        }
    }

    #[test]
    fn frozen_models_stay_bit_identical_through_optimization() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let cfg = tiny_cfg(11);
        let gen_before: Vec<Vec<u64>> =
            gen.weights.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect();
        let model_before: Vec<Vec<u64>> =
            model.weights.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect();
        let init = init_prompt(2, &stats, 12).unwrap();
        optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init).unwrap();
        let gen_after: Vec<Vec<u64>> =
            gen.weights.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect();
        let model_after: Vec<Vec<u64>> =
            model.weights.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(gen_before, gen_after);
        assert_eq!(model_before, model_after);
    }

    #[test]
    fn best_objective_column_never_increases() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let mut cfg = tiny_cfg(13);
        cfg.max_steps = 8;
        let init = init_prompt(2, &stats, 14).unwrap();
        let run = optimize_adversarial(&model, &gen, &sch, &world.train, &cfg, init).unwrap();
        for w in run.trace.windows(2) {
            assert!(w[1].best_objective <= w[0].best_objective);
        }
        for row in &run.trace {
            assert!(row.best_objective <= row.objective);
        }
    }

    #[test]
    fn full_guided_objective_gradient_passes_finite_difference() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let emb = JointEmbedder::init(15);
        let vocab = vocabulary(WorldKind::Spurbirds, 16);
        let norms = reference_norms(&emb, &vocab);
        let texts: Vec<&[f64]> = vocab.iter().take(2).map(|e| e.embedding.as_slice()).collect();
        let images: Vec<&[f64]> =
            world.train.examples.iter().take(4).map(|e| e.image.as_slice()).collect();
        let mut target = build_target(&emb, &texts, &images, &norms, 2.0, 3.0).unwrap();
        target.image_metric = Metric::NegCos;

        let sampler = SamplerConfig {
            steps: 2,
            sdedit_strength: 1.0,
            cfg_scale: 2.0,
            condition: CondKind::MaskInpaint,
            seed: 17,
        };
        let jobs: Vec<SampleJob> = world.train.examples[..2]
            .iter()
            .enumerate()
            .map(|(i, ex)| SampleJob { y: ex.label.clone(), source: Some(ex), seed: 100 + i as u64 })
            .collect();
        let labels: Vec<Label> = jobs.iter().map(|j| j.y.clone()).collect();
        let ti_refs: Vec<Vec<f64>> =
            world.train.examples.iter().take(2).map(|e| e.image.clone()).collect();

        let tokens = init_prompt(2, &stats, 18).unwrap().tokens;
        let err = finite_diff_check(
            |tape, vars| {
                let x = ddim_sample_var(tape, &gen, &sch, vars[0], &jobs, &sampler).unwrap();
                let out = forward_var(&model, tape, x);
                let adv = loss_var(tape, LossKind::NegXentFlip, TaskKind::Classify(2), out, &labels)
                    .unwrap();
                let clip = clip_guidance_var(tape, &emb, vars[0], x, &target).unwrap();
                let refs: Vec<&[f64]> = ti_refs.iter().map(|v| v.as_slice()).collect();
                let ti = ti_guidance_var(tape, &gen, &sch, vars[0], &refs, 2, 5.0, 19).unwrap();
                adv.add(clip).add(ti)
            },
            &[tokens],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "max_rel_error {err}");
    }

    #[test]
    fn warmup_steps_minimize_guidance_alone() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let emb = JointEmbedder::init(20);
        let vocab = vocabulary(WorldKind::Spurbirds, 21);
        let norms = reference_norms(&emb, &vocab);
        let texts: Vec<&[f64]> = vocab.iter().take(1).map(|e| e.embedding.as_slice()).collect();
        let target = build_target(&emb, &texts, &[], &norms, 20.0, 0.0).unwrap();
        let setup = GuidanceSetup::clip_only(&emb, target);
        let mut cfg = tiny_cfg(22);
        cfg.max_steps = 3;
        cfg.warmup_skip = 2;
        let init = init_prompt(2, &stats, 23).unwrap();
        let run =
            optimize(&model, &gen, &sch, &world.train, Some(&setup), &cfg, init).unwrap();
        assert_eq!(run.trace.len(), 3);
        for row in &run.trace[..2] {
            assert_eq!(row.objective.to_bits(), row.guidance.to_bits());
        }
        let last = &run.trace[2];
        assert_eq!(last.objective.to_bits(), (last.adversarial + last.guidance).to_bits());
    }

    #[test]
    fn guided_only_runs_keep_the_adversarial_term_out_of_the_objective() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let emb = JointEmbedder::init(50);
        let vocab = vocabulary(WorldKind::Spurbirds, 51);
        let norms = reference_norms(&emb, &vocab);
        let texts: Vec<&[f64]> = vocab.iter().take(1).map(|e| e.embedding.as_slice()).collect();
        let target = build_target(&emb, &texts, &[], &norms, 5.0, 0.0).unwrap();
        let setup = GuidanceSetup::clip_only(&emb, target);
        let mut cfg = tiny_cfg(52);
        cfg.max_steps = 3;
        let init = init_prompt(2, &stats, 53).unwrap();
        let run =
            optimize_guided(&model, &gen, &sch, &world.train, &setup, &cfg, init.clone()).unwrap();
        assert_eq!(run.trace.len(), 3);
        for row in &run.trace {
            assert_eq!(row.objective.to_bits(), row.guidance.to_bits());
            assert!(row.task_loss.is_finite());
        }
        let off = GuidanceSetup::clip_only(&emb, GuidanceTarget::none());
        assert!(optimize_guided(&model, &gen, &sch, &world.train, &off, &cfg, init).is_err());
    }

    #[test]
    fn bank_roundtrips_bitwise_and_rejects_duplicates() {
        let stats = (vec![0.0; EMBED_DIM], vec![1.0; EMBED_DIM]);
        let mut bank = PromptBank::default();
        for i in 0..3 {
            let mut p = init_prompt(1 + i, &stats, i as u64).unwrap();
            p.id = format!("p{i}");
            bank.push(BankEntry {
                prompt: p,
                iteration: i / 2,
                class: if i == 0 { None } else { Some(i - 1) },
                task_loss: 0.25 * i as f64 + 0.125,
                guidance_loss: 0.5 / (i + 1) as f64,
                config_hash: format!("{:016x}", i),
                feedback: "mlp_small".to_string(),
            })
            .unwrap();
        }
        let dup = BankEntry {
            prompt: {
                let mut p = init_prompt(1, &stats, 9).unwrap();
                p.id = "p0".to_string();
                p
            },
            iteration: 0,
            class: None,
            task_loss: 0.0,
            guidance_loss: 0.0,
            config_hash: String::new(),
            feedback: "none".to_string(),
        };
        assert!(bank.clone().push(dup).is_err());

        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let back = PromptBank::load(dir.path()).unwrap();
        assert_eq!(back.entries.len(), 3);
        for (a, b) in bank.entries.iter().zip(&back.entries) {
            assert_eq!(a.prompt.id, b.prompt.id);
            assert_eq!(a.prompt.tokens.data(), b.prompt.tokens.data());
            assert_eq!(a.class, b.class);
            assert_eq!(a.task_loss.to_bits(), b.task_loss.to_bits());
            assert_eq!(a.guidance_loss.to_bits(), b.guidance_loss.to_bits());
            assert_eq!(a.feedback, b.feedback);
            assert_eq!(a.iteration, b.iteration);
        }
    }

    #[test]
    fn malformed_bank_indices_are_rejected() {
        let good = format!("{BANK_HEADER}\npX\trandom\t1\t0\t2\t-\t0.5\t0\tdeadbeef\tnone\n");
        assert_eq!(parse_bank_index(&good).unwrap().len(), 1);
        let classy = format!("{BANK_HEADER}\npX\trandom\t1\t0\t2\t1\t0.5\t0\tdeadbeef\tnone\n");
        assert_eq!(parse_bank_index(&classy).unwrap()[0].class, Some(1));
        let cases = [
            "id\tmethod\n".to_string(),
            format!("{BANK_HEADER}\npX\trandom\t1\t0\t2\t-\t0.5\t0\tdeadbeef\n"),
            format!("{BANK_HEADER}\npX\trandom\t1\t0\t2\t-\tNaN\t0\tdeadbeef\tnone\n"),
            format!("{BANK_HEADER}\npX\trandom\t1\t0\t0\t-\t0.5\t0\tdeadbeef\tnone\n"),
            format!("{BANK_HEADER}\npX\trandom\t1\t0\t2\tx\t0.5\t0\tdeadbeef\tnone\n"),
            format!("{BANK_HEADER}\n../up\trandom\t1\t0\t2\t-\t0.5\t0\tdeadbeef\tnone\n"),
            format!(
                "{BANK_HEADER}\npX\trandom\t1\t0\t2\t-\t0.5\t0\tdeadbeef\tnone\npX\trandom\t1\t0\t2\t-\t0.5\t0\tdeadbeef\tnone\n"
            ),
        ];
        for (i, c) in cases.iter().enumerate() {
            assert!(parse_bank_index(c).is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn round_robin_generation_is_deterministic_and_budgeted() {
        let (world, gen, sch, _, stats) = tiny_setup();
        let p0 = {
            let mut p = init_prompt(2, &stats, 30).unwrap();
            p.id = "a".into();
            p
        };
        let p1 = {
            let mut p = init_prompt(2, &stats, 31).unwrap();
            p.id = "b".into();
            p
        };
        let prompts = [&p0, &p1];
        let sources: Vec<&ToyExample> = world.train.examples.iter().collect();
        let cfg = tiny_cfg(32);
        let once =
            generate_round_robin(&gen, &sch, &prompts, &sources, &cfg.sampler, 33, 8).unwrap();
        let twice =
            generate_round_robin(&gen, &sch, &prompts, &sources, &cfg.sampler, 33, 8).unwrap();
        assert_eq!(once.len(), 8);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
        }
        let per_prompt =
            once.iter().filter(|e| e.provenance.as_ref().unwrap().prompt_id == "a").count();
        assert_eq!(per_prompt, 4);
        // inpainted masked region matches the source bitwise
        for (ex, src) in once.iter().zip(&world.train.examples) {
            for p in 0..crate::toyworlds::MAP_LEN {
                if src.mask[p] == 1.0 {
                    for c in 0..3 {
                        assert_eq!(ex.image[3 * p + c].to_bits(), src.image[3 * p + c].to_bits());
                    }
                }
            }
        }
        assert!(
            generate_round_robin(&gen, &sch, &prompts, &sources, &cfg.sampler, 33, 99).is_err()
        );
    }

    #[test]
    fn multi_iteration_bookkeeping_follows_the_schedule() {
        let (world, gen, sch, model, stats) = tiny_setup();
        let model = {
            let hyper = TrainHyper { epochs: 2, ..TrainHyper::defaults(Regime::Scratch, 40) };
            let mixture = [MixtureItem { data: &world.train, weight: 1.0 }];
            train(model, &mixture, &world.val, &hyper).unwrap()
        };
        let mut cfg = tiny_cfg(41);
        cfg.max_steps = 2;
        let schedule = IterationSchedule {
            tokens: vec![1, 8],
            prompts_per_iter: 2,
            budget_per_iter: 4,
        };
        let finetune = TrainHyper { epochs: 1, ..TrainHyper::defaults(Regime::FinetuneLast, 42) };
        let before = evaluate(&model, &world.test);
        let (bank, tuned, reports) = run_multi_iteration(
            model,
            &gen,
            &sch,
            &world,
            &stats,
            None,
            &cfg,
            &schedule,
            &finetune,
            &world.test,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(bank.entries.len(), 4);
        let token_counts: Vec<usize> =
            bank.entries.iter().map(|e| e.prompt.tokens.shape()[0]).collect();
        assert_eq!(token_counts, vec![1, 1, 8, 8]);
        for r in &reports {
            assert_eq!(r.generated, 4);
            assert_eq!(r.bank_ids.len(), 2);
        }
        assert_eq!(before.n, reports[0].metrics.n);
        assert_eq!(tuned.arch, ArchId::MlpSmall);
    }
}
