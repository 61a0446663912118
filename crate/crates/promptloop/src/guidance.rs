//! Tiny joint image/text embedding space and the guidance losses built on
//! it: squared-l2 pull toward a text target, negative-cosine pull toward an
//! image target, and a denoising-reconstruction pull toward example images.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{grad, optim_step, OptimKind, OptimState, Tape, Tensor, Var};
use crate::dataio::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::generator::{
    eps_forward, forward_noise, t_embedding, t_onehot, DenoiserParams, NoiseSchedule, T_STEPS,
};
use crate::rng::{mix, normal_vec, rng, str_tag};
use crate::taskmodels::log_softmax;
use crate::toyworlds::{attr_embedding, attr_name, ToyDataset, VocabEntry, WorldKind, EMBED_DIM, IMG_LEN, MAP_LEN};

pub const JOINT_DIM: usize = 24;
pub const TEMPERATURE: f64 = 0.07;
pub const TI_WEIGHT_DEFAULT: f64 = 1000.0;

/// Two small tanh MLP encoders mapping images and pooled prompt embeddings
/// into a shared `JOINT_DIM` space.
#[derive(Clone, Debug)]
pub struct JointEmbedder {
    pub temperature: f64,
    /// [IMG_LEN,64], [64], [64,JOINT_DIM], [JOINT_DIM]
    pub img_w: Vec<Tensor<f64>>,
    /// [EMBED_DIM,32], [32], [32,JOINT_DIM], [JOINT_DIM]
    pub txt_w: Vec<Tensor<f64>>,
}

fn mlp_init(r: &mut rand_chacha::ChaCha8Rng, dims: &[usize]) -> Vec<Tensor<f64>> {
    let mut w = Vec::new();
    for d in dims.windows(2) {
        let scale = 1.0 / (d[0] as f64).sqrt();
        let data: Vec<f64> = normal_vec(r, d[0] * d[1]).into_iter().map(|v| v * scale).collect();
        w.push(Tensor::new(&[d[0], d[1]], data));
        w.push(Tensor::zeros(&[d[1]]));
    }
    w
}

fn encode_with<'t>(weights: &[Var<'t, f64>], x: Var<'t, f64>) -> Var<'t, f64> {
    x.matmul(weights[0]).add(weights[1]).tanh().matmul(weights[2]).add(weights[3])
}

impl JointEmbedder {
    pub fn init(seed: u64) -> JointEmbedder {
        let mut r = rng(mix(seed, &[str_tag("jointembed-init")]));
        JointEmbedder {
            temperature: TEMPERATURE,
            img_w: mlp_init(&mut r, &[IMG_LEN, 64, JOINT_DIM]),
            txt_w: mlp_init(&mut r, &[EMBED_DIM, 32, JOINT_DIM]),
        }
    }

    pub fn encode_image_var<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Var<'t, f64> {
        let w: Vec<Var<f64>> = self.img_w.iter().map(|t| tape.leaf(t.clone())).collect();
        encode_with(&w, x)
    }

    /// `pooled` is [B, EMBED_DIM]: prompt token matrices are mean-pooled
    /// over tokens before encoding.
    pub fn encode_text_var<'t>(&self, tape: &'t Tape<f64>, pooled: Var<'t, f64>) -> Var<'t, f64> {
        let w: Vec<Var<f64>> = self.txt_w.iter().map(|t| tape.leaf(t.clone())).collect();
        encode_with(&w, pooled)
    }

    pub fn encode_image(&self, image: &[f64]) -> Vec<f64> {
        assert_eq!(image.len(), IMG_LEN);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, IMG_LEN], image.to_vec()));
        self.encode_image_var(&tape, x).value().data().to_vec()
    }

    pub fn encode_text(&self, pooled: &[f64]) -> Vec<f64> {
        assert_eq!(pooled.len(), EMBED_DIM);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, EMBED_DIM], pooled.to_vec()));
        self.encode_text_var(&tape, x).value().data().to_vec()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (i, t) in self.img_w.iter().enumerate() {
            tensors.push((format!("i{i}"), t.clone()));
        }
        for (i, t) in self.txt_w.iter().enumerate() {
            tensors.push((format!("t{i}"), t.clone()));
        }
        tensors.push(("temperature".to_string(), Tensor::new(&[1], vec![self.temperature])));
        save_checkpoint(path, &Checkpoint::new(format!("jointembed-d{JOINT_DIM}"), tensors))
    }

    pub fn load(path: &std::path::Path) -> Result<JointEmbedder> {
        let ck = load_checkpoint(path)?;
        if ck.arch != format!("jointembed-d{JOINT_DIM}") {
            return Err(Error::config("checkpoint", format!("unexpected arch `{}`", ck.arch)));
        }
        let template = JointEmbedder::init(0);
        let fetch = |prefix: &str, like: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> {
            let mut out = Vec::new();
            for (i, l) in like.iter().enumerate() {
                let name = format!("{prefix}{i}");
                let t = ck.tensor(&name).ok_or_else(|| {
                    Error::config("checkpoint", format!("missing tensor `{name}`"))
                })?;
                if t.shape() != l.shape() {
                    return Err(Error::config("checkpoint", format!("tensor `{name}` has wrong shape")));
                }
                out.push(t.clone());
            }
            Ok(out)
        };
        let temperature = ck
            .tensor("temperature")
            .ok_or_else(|| Error::config("checkpoint", "missing tensor `temperature`"))?
            .data()[0];
        Ok(JointEmbedder {
            temperature,
            img_w: fetch("i", &template.img_w)?,
            txt_w: fetch("t", &template.txt_w)?,
        })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine", "zero-norm embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

// ── Contrastive pretraining ──

/// One (image, reference text embedding) pair; `attr` names the group the
/// text stands for.
#[derive(Clone, Debug)]
pub struct EmbedPair {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub attr: String,
}

/// Pair every example with its group's fixed reference embedding.
pub fn embedding_pairs(
    kind: WorldKind,
    ds: &ToyDataset,
    vocab: &[VocabEntry],
) -> Result<Vec<EmbedPair>> {
    ds.examples
        .iter()
        .map(|ex| {
            let attr = attr_name(kind, &ex.group);
            Ok(EmbedPair {
                image: ex.image.clone(),
                text: attr_embedding(vocab, &attr)?.to_vec(),
                attr,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EmbedHyper {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EmbedHyper {
    pub fn defaults(seed: u64) -> EmbedHyper {
        EmbedHyper { iters: 500, batch: 32, lr: 3e-3, seed }
    }
}

fn normalize_rows<'t>(z: Var<'t, f64>) -> Var<'t, f64> {
    z.mul(z.square().sum_axis(1).sqrt().powf(-1.0))
}

/// Symmetric InfoNCE over (image, text) pairs. Batches whose pairs all come
/// from the same group carry no contrastive signal and are skipped.
pub fn train_joint_embedder(
    embedder: JointEmbedder,
    pairs: &[EmbedPair],
    hyper: &EmbedHyper,
) -> Result<JointEmbedder> {
    if pairs.is_empty() {
        return Err(Error::config("train_joint_embedder", "no pairs"));
    }
    let mut emb = embedder;
    let n_img = emb.img_w.len();
    let mut trained: Vec<Tensor<f64>> =
        emb.img_w.iter().chain(emb.txt_w.iter()).cloned().collect();
    let mut opt = OptimState::for_params(OptimKind::Adam, hyper.lr, 0.0, &trained);
    let inv_temp = 1.0 / emb.temperature;

    for step in 0..hyper.iters {
        let mut r = rng(mix(hyper.seed, &[str_tag("embed-train"), step as u64]));
        let batch: Vec<&EmbedPair> = (0..hyper.batch)
            .map(|_| &pairs[(r.gen::<u64>() % pairs.len() as u64) as usize])
            .collect();
        if batch.iter().all(|p| p.attr == batch[0].attr) {
            continue;
        }
        let b = batch.len();
        let images: Vec<f64> = batch.iter().flat_map(|p| p.image.iter().copied()).collect();
        let texts: Vec<f64> = batch.iter().flat_map(|p| p.text.iter().copied()).collect();

        let tape = Tape::new();
        let vars: Vec<Var<f64>> = trained.iter().map(|t| tape.leaf(t.clone())).collect();
        let zi = encode_with(&vars[..n_img], tape.leaf(Tensor::new(&[b, IMG_LEN], images)));
        let zt = encode_with(&vars[n_img..], tape.leaf(Tensor::new(&[b, EMBED_DIM], texts)));
        if zi.value().data().iter().any(|v| !v.is_finite())
            || row_norms(&zi.value()).iter().chain(row_norms(&zt.value()).iter()).any(|&n| n == 0.0)
        {
            continue;
        }
        let logits = normalize_rows(zi).matmul(normalize_rows(zt).transpose()).scale(inv_temp);
        let eye = {
            let mut d = vec![0.0; b * b];
            for i in 0..b {
                d[i * b + i] = 1.0;
            }
            tape.leaf(Tensor::new(&[b, b], d))
        };
        let i2t = log_softmax(&tape, logits).mul(eye).sum();
        let t2i = log_softmax(&tape, logits.transpose()).mul(eye).sum();
        let loss = i2t.add(t2i).scale(-0.5 / b as f64);
        if !loss.item().is_finite() {
            return Err(Error::numerical("train_joint_embedder", format!("loss diverged at step {step}")));
        }
        let grads = grad(loss, &vars)?;
        optim_step(&mut opt, &mut trained, &grads)?;
    }
    emb.img_w = trained[..n_img].to_vec();
    emb.txt_w = trained[n_img..].to_vec();
    Ok(emb)
}

fn row_norms(z: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (z.shape()[0], z.shape()[1]);
    (0..m)
        .map(|i| z.data()[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Fraction of pairs whose image retrieves its own group's text among all
/// distinct texts appearing in `pairs`.
pub fn retrieval_accuracy(embedder: &JointEmbedder, pairs: &[EmbedPair]) -> Result<f64> {
    assert!(!pairs.is_empty());
    let mut candidates: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        candidates.entry(&p.attr).or_insert_with(|| embedder.encode_text(&p.text));
    }
    let mut correct = 0usize;
    for p in pairs {
        let zi = embedder.encode_image(&p.image);
        let mut best: Option<(&str, f64)> = None;
        for (attr, zt) in &candidates {
            let c = cosine(&zi, zt)?;
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((attr, c));
            }
        }
        correct += (best.unwrap().0 == p.attr) as usize;
    }
    Ok(correct as f64 / pairs.len() as f64)
}

pub fn distinct_attrs(pairs: &[EmbedPair]) -> usize {
    pairs.iter().map(|p| p.attr.as_str()).collect::<std::collections::BTreeSet<_>>().len()
}

// ── Guidance targets ──

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SquaredL2,
    NegCos,
}

#[derive(Clone, Debug)]
pub struct GuidanceTarget {
    pub e_t: Option<Vec<f64>>,
    pub e_i: Option<Vec<f64>>,
    pub lambda_t: f64,
    pub lambda_i: f64,
    pub text_metric: Metric,
    pub image_metric: Metric,
}

impl GuidanceTarget {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda_t", self.lambda_t), ("lambda_i", self.lambda_i)] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::config("guidance", format!("{name} must be nonnegative, got {l}")));
            }
        }
        if self.lambda_t > 0.0 && self.e_t.is_none() {
            return Err(Error::config("guidance", "lambda_t > 0 without a text target"));
        }
        if self.lambda_i > 0.0 && self.e_i.is_none() {
            return Err(Error::config("guidance", "lambda_i > 0 without an image target"));
        }
        Ok(())
    }

    /// Disabled guidance: both terms absent, loss identically zero.
    pub fn none() -> GuidanceTarget {
        GuidanceTarget {
            e_t: None,
            e_i: None,
            lambda_t: 0.0,
            lambda_i: 0.0,
            text_metric: Metric::SquaredL2,
            image_metric: Metric::NegCos,
        }
    }
}

/// Per-world (λ_t, λ_i) defaults.
pub fn lambda_defaults(kind: WorldKind) -> (f64, f64) {
    match kind {
        WorldKind::Spurbirds => (20.0, 0.0),
        WorldKind::Wildspots => (0.0, 10.0),
        WorldKind::Depthrooms => (1.0, 5.0),
    }
}

/// Norm of each vocabulary entry's text embedding; the renormalization
/// reference for averaged text targets.
pub fn reference_norms(embedder: &JointEmbedder, vocab: &[VocabEntry]) -> Vec<f64> {
    vocab
        .iter()
        .map(|e| embedder.encode_text(&e.embedding).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Sorted summation makes the mean exactly permutation-invariant.
fn sorted_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![0.0; dim];
    for row in sorted {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// Average text embeddings (renormalized to the mean reference norm) and/or
/// image embeddings into a guidance target. Images are consumed unlabeled.
pub fn build_target(
    embedder: &JointEmbedder,
    texts: &[&[f64]],
    images: &[&[f64]],
    ref_norms: &[f64],
    lambda_t: f64,
    lambda_i: f64,
) -> Result<GuidanceTarget> {
    if texts.is_empty() && images.is_empty() {
        return Err(Error::config("build_target", "no text or image targets given"));
    }
    if !texts.is_empty() && ref_norms.is_empty() {
        return Err(Error::config("build_target", "text targets need reference norms"));
    }
    let e_t = if texts.is_empty() {
        None
    } else {
        let encoded: Vec<Vec<f64>> = texts.iter().map(|t| embedder.encode_text(t)).collect();
        let avg = sorted_mean(&encoded);
        let norm = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numerical("build_target", "averaged text target has zero norm"));
        }
        let mut norms = ref_norms.to_vec();
        norms.sort_by(f64::total_cmp);
        let target_norm = norms.iter().sum::<f64>() / norms.len() as f64;
        Some(avg.into_iter().map(|v| v * (target_norm / norm)).collect())
    };
    let e_i = if images.is_empty() {
        None
    } else {
        let encoded: Vec<Vec<f64>> = images.iter().map(|x| embedder.encode_image(x)).collect();
        Some(sorted_mean(&encoded))
    };
    let lambda_t = if e_t.is_some() { lambda_t } else { 0.0 };
    let lambda_i = if e_i.is_some() { lambda_i } else { 0.0 };
    let target = GuidanceTarget {
        e_t,
        e_i,
        lambda_t,
        lambda_i,
        text_metric: Metric::SquaredL2,
        image_metric: Metric::NegCos,
    };
    target.validate()?;
    Ok(target)
}

// ── Guidance losses ──

/// Mean cosine between each row of `z` and the constant vector `e`.
pub fn mean_cos_rows<'t>(tape: &'t Tape<f64>, z: Var<'t, f64>, e: &[f64]) -> Result<Var<'t, f64>> {
    let ne: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne == 0.0 || row_norms(&z.value()).contains(&0.0) {
        return Err(Error::numerical("cosine", "zero-norm embedding"));
    }
    let er = tape.leaf(Tensor::new(&[e.len()], e.to_vec()));
    let num = z.mul(er).sum_axis(1);
    let den = z.square().sum_axis(1).sqrt().scale(ne);
    Ok(num.mul(den.powf(-1.0)).mean())
}

fn sq_l2_rows<'t>(tape: &'t Tape<f64>, z: Var<'t, f64>, e: &[f64]) -> Var<'t, f64> {
    let er = tape.leaf(Tensor::new(&[e.len()], e.to_vec()));
    z.sub(er).square().sum_axis(1).mean()
}

/// λ_t · d_text(E_t(pooled prompt), e_t) + λ_i · d_image(E_i(x̃), e_i),
/// averaged over the generated batch. Differentiable with respect to both
/// the prompt tokens and the generated images; identically zero when both
/// λ's are zero.
pub fn clip_guidance_var<'t>(
    tape: &'t Tape<f64>,
    embedder: &JointEmbedder,
    prompt_tokens: Var<'t, f64>,
    gen_images: Var<'t, f64>,
    target: &GuidanceTarget,
) -> Result<Var<'t, f64>> {
    target.validate()?;
    let mut acc = tape.leaf(Tensor::new(&[1], vec![0.0]));
    if target.lambda_t > 0.0 {
        let e_t = target.e_t.as_ref().expect("validated");
        let pooled = prompt_tokens.mean_axis(0).reshape(&[1, EMBED_DIM]);
        let zt = embedder.encode_text_var(tape, pooled);
        let term = match target.text_metric {
            Metric::SquaredL2 => sq_l2_rows(tape, zt, e_t),
            Metric::NegCos => mean_cos_rows(tape, zt, e_t)?.neg(),
        };
        acc = acc.add(term.scale(target.lambda_t));
    }
    if target.lambda_i > 0.0 {
        let e_i = target.e_i.as_ref().expect("validated");
        let zi = embedder.encode_image_var(tape, gen_images);
        let term = match target.image_metric {
            Metric::NegCos => mean_cos_rows(tape, zi, e_i)?.neg(),
            Metric::SquaredL2 => sq_l2_rows(tape, zi, e_i),
        };
        acc = acc.add(term.scale(target.lambda_i));
    }
    Ok(acc)
}

/// Plain-value wrapper over `clip_guidance_var` for a single image.
pub fn clip_guidance_loss(
    embedder: &JointEmbedder,
    gen_image: &[f64],
    prompt_tokens: &Tensor<f64>,
    target: &GuidanceTarget,
) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.leaf(prompt_tokens.clone());
    let x = tape.leaf(Tensor::new(&[1, IMG_LEN], gen_image.to_vec()));
    Ok(clip_guidance_var(&tape, embedder, p, x, target)?.item())
}

/// Denoising-reconstruction guidance: noise seeded draws from the target
/// images and score the prompt by the denoiser's eps-prediction error,
/// averaged over the batch and scaled by `weight`. Differentiable with
/// respect to the prompt tokens; the denoiser stays frozen.
#[allow(clippy::too_many_arguments)]
pub fn ti_guidance_var<'t>(
    tape: &'t Tape<f64>,
    params: &DenoiserParams,
    sch: &NoiseSchedule,
    prompt_tokens: Var<'t, f64>,
    target_images: &[&[f64]],
    batch: usize,
    weight: f64,
    seed: u64,
) -> Result<Var<'t, f64>> {
    if target_images.is_empty() {
        return Err(Error::config("ti_guidance", "no target images"));
    }
    assert!(batch > 0);
    let mut zs = Vec::with_capacity(batch * IMG_LEN);
    let mut tembs = Vec::new();
    let mut t1hs = Vec::with_capacity(batch * T_STEPS);
    let mut epss = Vec::with_capacity(batch * IMG_LEN);
    for j in 0..batch {
        let mut r = rng(mix(seed, &[str_tag("ti-guidance"), j as u64]));
        let x = target_images[(r.gen::<u64>() % target_images.len() as u64) as usize];
        if x.len() != IMG_LEN {
            return Err(Error::config("ti_guidance", "target image has wrong length"));
        }
        let t = r.gen_range(0..sch.t_steps);
        let eps = normal_vec(&mut r, IMG_LEN);
        zs.extend(forward_noise(sch, x, t, &eps)?);
        tembs.extend(t_embedding(t));
        t1hs.extend(t_onehot(t));
        epss.extend(eps);
    }
    let temb_dim = tembs.len() / batch;
    let z = tape.leaf(Tensor::new(&[batch, IMG_LEN], zs));
    let temb = tape.leaf(Tensor::new(&[batch, temb_dim], tembs));
    let t1h = tape.leaf(Tensor::new(&[batch, T_STEPS], t1hs));
    let eps_target = tape.leaf(Tensor::new(&[batch, IMG_LEN], epss));
    let cond = tape.leaf(Tensor::zeros(&[batch, MAP_LEN]));
    let pooled = prompt_tokens.mean_axis(0).tile_rows(batch);
    let pvars = params.vars(tape);
    let pred = eps_forward(tape, &pvars, z, t1h, temb, pooled, cond);
    Ok(pred.sub(eps_target).square().sum_axis(1).mean().scale(weight))
}
