//! Training procedures: masked-image pretraining, supervised fine-tuning,
//! the sequential continual-learning protocol, and evaluation.
//!
//! Determinism contract: identical (config, seed) reproduce byte-identical
//! metric CSVs. All randomness flows through derived streams (see `rng`);
//! sample order, augmentation, and masks never depend on wall time or
//! scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{OptimConfig, OptimName, Replay, RunConfig};
use crate::data::{
    eval_view, intensity_stats, normalize, stack_batch, train_view, DataSource,
};
use crate::encoder::{Encoder, EncoderConfig, Head};
use crate::error::{Error, Result};
use crate::metrics::{macro_f1, metrics_report_csv, per_class_scores, ConfusionMatrix, PerfMatrix};
use crate::mim::{corrupt, make_mask, mim_loss, Decoder, MaskSpec};
use crate::optim::{AdamW, AdamWCfg, DeepMomentum, DeepMomentumCfg, MomentumCfg, MomentumSgd};
use crate::params::Params;
use crate::rng::{derive_seed, stream};
use crate::synth::{
    generate_continual_batches, generate_dataset, generate_unlabeled_pool, DatasetManifest,
    DatasetSpec, GenConfig, Split, NUM_CLASSES,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── Model bundle ─────────────────────────────────────────────────────

/// Encoder plus the stage-specific heads, owning the parameter store.
pub struct Model {
    pub ecfg: EncoderConfig,
    pub params: Params,
    pub encoder: Encoder,
    pub head: Option<Head>,
    pub decoder: Option<Decoder>,
}

impl Model {
    /// Encoder + classifier head.
    pub fn classifier(ecfg: &EncoderConfig, seed: u64) -> Result<Model> {
        let mut params = Params::new();
        let mut rng = stream(seed, "init", 0);
        let encoder = Encoder::build(&mut params, ecfg, &mut rng)?;
        let head = Head::build(&mut params, ecfg, &mut rng)?;
        Ok(Model {
            ecfg: ecfg.clone(),
            params,
            encoder,
            head: Some(head),
            decoder: None,
        })
    }

    /// Encoder + reconstruction decoder for masked pretraining.
    pub fn pretrainer(ecfg: &EncoderConfig, seed: u64) -> Result<Model> {
        let mut params = Params::new();
        let mut rng = stream(seed, "init", 0);
        let encoder = Encoder::build(&mut params, ecfg, &mut rng)?;
        let patch = ecfg.image_size / ecfg.final_grid();
        let decoder = Decoder::build(
            &mut params,
            ecfg.final_dim(),
            ecfg.d_state,
            patch,
            ecfg.nl_enabled,
            ecfg.alpha,
            ecfg.lambda,
            &mut rng,
        )?;
        Ok(Model {
            ecfg: ecfg.clone(),
            params,
            encoder,
            head: None,
            decoder: Some(decoder),
        })
    }

    /// Fast/slow consolidation across every projection that carries a
    /// trace; called by the training loop after each optimizer step.
    pub fn slow_update_all(&mut self) {
        self.encoder.slow_update(&mut self.params);
        if let Some(h) = &self.head {
            h.slow_update(&mut self.params);
        }
        if let Some(d) = &self.decoder {
            d.slow_update(&mut self.params);
        }
    }
}

fn ecfg_placeholder() -> EncoderConfig {
    EncoderConfig::default()
}

// ── Optimizer dispatch ───────────────────────────────────────────────

pub enum AnyOptim {
    Deep(DeepMomentum),
    Momentum(MomentumSgd),
    Adam(AdamW),
}

impl AnyOptim {
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        match self {
            AnyOptim::Deep(o) => o.step(params),
            AnyOptim::Momentum(o) => o.step(params),
            AnyOptim::Adam(o) => o.step(params),
        }
    }
}

pub fn build_optimizer(
    ocfg: &OptimConfig,
    lr: f64,
    mults: (f64, f64),
    ids: Vec<crate::params::ParamId>,
    params: &Params,
) -> Result<AnyOptim> {
    match ocfg.name {
        OptimName::DeepMomentum => Ok(AnyOptim::Deep(DeepMomentum::new(
            DeepMomentumCfg {
                lr,
                mu: ocfg.mu,
                rho: ocfg.rho,
                gamma: ocfg.gamma,
                weight_decay: ocfg.weight_decay,
                backbone_mult: mults.0,
                head_mult: mults.1,
            },
            ids,
            params,
        )?)),
        OptimName::Momentum => Ok(AnyOptim::Momentum(MomentumSgd::new(
            MomentumCfg {
                lr,
                mu: ocfg.mu,
                weight_decay: ocfg.weight_decay,
                backbone_mult: mults.0,
                head_mult: mults.1,
            },
            ids,
            params,
        )?)),
        OptimName::AdamW => Ok(AnyOptim::Adam(AdamW::new(
            AdamWCfg {
                lr,
                beta1: ocfg.beta1,
                beta2: ocfg.beta2,
                eps: ocfg.eps,
                weight_decay: ocfg.weight_decay,
            },
            ids,
            params,
        )?)),
    }
}

// ── Shared helpers ───────────────────────────────────────────────────

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn shuffled(indices: &[usize], seed: u64, label: &str, epoch: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = stream(seed, label, epoch);
    order.shuffle(&mut rng);
    order
}

/// Inverse-frequency class weights over a pool, normalized to mean 1.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| 1.0 / (c.max(1) as f64))
        .collect();
    let mean = inv.iter().sum::<f64>() / classes as f64;
    inv.into_iter().map(|w| w / mean).collect()
}

struct Loader<'a> {
    source: &'a DataSource,
    mean: f64,
    std: f64,
    image_size: usize,
    seed: u64,
    aug_counter: u64,
}

impl<'a> Loader<'a> {
    fn train_batch(&mut self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut views = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            let raw = self.source.read(idx)?;
            let mut rng = stream(self.seed, "aug", self.aug_counter);
            self.aug_counter += 1;
            let view = train_view(&raw, self.image_size, &mut rng)?;
            views.push(normalize(&view, self.mean, self.std));
            labels.push(self.source.entry(idx).label.max(0) as usize);
        }
        Ok((stack_batch(&views)?, labels))
    }

    fn eval_batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut views = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            let raw = self.source.read(idx)?;
            let view = eval_view(&raw, self.image_size)?;
            views.push(normalize(&view, self.mean, self.std));
            labels.push(self.source.entry(idx).label.max(0) as usize);
        }
        Ok((stack_batch(&views)?, labels))
    }
}

/// Forward the classifier on a batch and collect arg-max predictions.
fn predict(model: &Model, batch: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.data.clone(), batch.shape.clone());
    let out = model.encoder.forward(&mut tape, &model.params, x)?;
    let head = model.head.as_ref().expect("classifier model");
    let logits = head.forward(&mut tape, &model.params, out.pooled)?;
    let classes = model.ecfg.num_classes;
    let vals = tape.value(logits);
    let mut preds = Vec::with_capacity(batch.shape[0]);
    for i in 0..batch.shape[0] {
        let row = &vals[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Evaluate macro F1 (fraction, not percent) and the confusion matrix over
/// a split.
pub fn evaluate_split(
    model: &Model,
    loader: &Loader,
    indices: &[usize],
) -> Result<(ConfusionMatrix, f64)> {
    let mut cm = ConfusionMatrix::new(model.ecfg.num_classes);
    for chunk in indices.chunks(32) {
        let (batch, labels) = loader.eval_batch(chunk)?;
        let preds = predict(model, &batch)?;
        for (t, p) in labels.iter().zip(preds.iter()) {
            cm.add(*t, *p)?;
        }
    }
    let (_, macro_v) = macro_f1(&cm)?;
    Ok((cm, macro_v))
}

fn classifier_checkpoint(model: &Model, cfg: &RunConfig, mean: f64, std: f64, step: u64) -> Checkpoint {
    let mut ck = Checkpoint::from_params(&model.params);
    ck.set_step(step);
    ck.set_seed(cfg.seed);
    ck.set_config_echo(&cfg.resolved_text());
    ck.set_norm_stats(mean, std);
    ck
}

// ── Stage: generate-data ─────────────────────────────────────────────

/// Build the labeled dataset, the unlabeled pretraining pool, and the
/// sequential continual batches under `data.dir`.
pub fn run_generate_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let gen = GenConfig {
        image_size: d.image_size,
        cell_pitch: d.cell_pitch,
        noise: d.noise,
    };
    let labeled = DatasetSpec {
        n_orders: d.n_orders,
        slices_per_order: d.slices_per_order,
        drift_range: (0.0, d.drift_max),
        gen,
        seed: cfg.seed,
        ..Default::default()
    };
    generate_dataset(&labeled, &d.dir)?;
    let unlabeled = DatasetSpec {
        n_orders: d.unlabeled_orders,
        slices_per_order: d.slices_per_order,
        drift_range: (0.0, d.unlabeled_drift_max),
        gen,
        seed: derive_seed(cfg.seed, "pool", 0),
        ..Default::default()
    };
    generate_unlabeled_pool(&unlabeled, &d.dir)?;
    let levels: Vec<f64> = (0..d.continual_batches)
        .map(|b| {
            if d.continual_batches <= 1 {
                d.continual_drift_start
            } else {
                d.continual_drift_start
                    + (d.continual_drift_end - d.continual_drift_start) * b as f64
                        / (d.continual_batches - 1) as f64
            }
        })
        .collect();
    let continual = DatasetSpec {
        n_orders: d.n_orders,
        slices_per_order: d.slices_per_order,
        gen,
        seed: derive_seed(cfg.seed, "continual", 0),
        ..Default::default()
    };
    generate_continual_batches(
        &continual,
        d.continual_batches,
        d.continual_orders_per_batch,
        &levels,
        &d.dir,
    )?;
    Ok(())
}

// ── Stage: MIM pretraining ───────────────────────────────────────────

pub struct PretrainOutput {
    pub encoder_ckpt: PathBuf,
    pub recon_ckpt: PathBuf,
    pub epoch_losses: Vec<f64>,
}

/// Mean masked-reconstruction loss over a set of slices without touching
/// the parameters (the pre-training baseline for smoke tests).
pub fn evaluate_mim_loss(
    model: &Model,
    source: &DataSource,
    indices: &[usize],
    mean: f64,
    std: f64,
    mask_ratio: f64,
    mask_patch: usize,
    seed: u64,
) -> Result<f64> {
    let decoder = model.decoder.as_ref().expect("pretrain model");
    let size = model.ecfg.image_size;
    let mut total = 0.0;
    let mut batches = 0usize;
    for (bi, chunk) in indices.chunks(32).enumerate() {
        let mut corrupted = Vec::new();
        let mut targets = Vec::new();
        let mut masks = Vec::new();
        for (ii, &idx) in chunk.iter().enumerate() {
            let img = normalize(&eval_view(&source.read(idx)?, size)?, mean, std);
            let spec = MaskSpec::new(
                mask_patch,
                mask_ratio,
                derive_seed(seed, "eval-mask", bi as u64).wrapping_add(ii as u64),
            )?;
            let mask = make_mask(size, size, &spec)?;
            corrupted.push(corrupt(&img, &mask, 0.0)?);
            targets.push(img);
            masks.push(mask);
        }
        let batch = stack_batch(&corrupted)?;
        let target = stack_batch(&targets)?;
        let mask_t = stack_batch(
            &masks
                .iter()
                .map(|m| Tensor::new(vec![1, size, size], m.data.clone()).unwrap())
                .collect::<Vec<_>>(),
        )?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.data.clone(), batch.shape.clone());
        let out = model.encoder.forward(&mut tape, &model.params, x)?;
        let recon = decoder.forward(&mut tape, &model.params, out.tokens, out.grid)?;
        let loss = mim_loss(&mut tape, recon, &target, &mask_t)?;
        total += tape.value(loss)[0];
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

pub fn pretrain_mim(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainOutput> {
    fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(&cfg.data.dir.join("unlabeled_manifest.txt"))?;
    let source = DataSource::new(cfg.data.dir.clone(), manifest);
    let pool = source.split_indices(Split::Train);
    if pool.is_empty() {
        return Err(Error::config("unlabeled pool is empty"));
    }
    let (mean, std) = intensity_stats(&source, &pool)?;
    let mut model = Model::pretrainer(&cfg.model, cfg.seed)?;
    let size = cfg.model.image_size;
    let ids: Vec<_> = model
        .params
        .trainable_ids()
        .into_iter()
        .filter(|&id| {
            let n = model.params.name(id);
            n.starts_with("encoder.") || n.starts_with("decoder.")
        })
        .collect();
    let mut opt = build_optimizer(&cfg.optim, cfg.optim.learning_rate, (1.0, 1.0), ids, &model.params)?;
    eprintln!(
        "pretrain: {} slices, {} trainable values",
        pool.len(),
        model.params.trainable_count()
    );

    let mut loader = Loader {
        source: &source,
        mean,
        std,
        image_size: size,
        seed: cfg.seed,
        aug_counter: 0,
    };
    let encoder_path = out_dir.join("encoder.nlck");
    let recon_path = out_dir.join("recon_head.nlck");
    let mut epoch_losses = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.train.epochs {
        let order = shuffled(&pool, cfg.seed, "shuffle", epoch as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let (batch, _) = loader.train_batch(chunk)?;
            // per-item masks, seeds derived from the step with item offsets
            let mask_base = derive_seed(cfg.seed, "mask", step);
            let mut targets = batch.clone();
            let mut masks = vec![1.0; batch.numel()];
            let per = size * size;
            for (ii, _) in chunk.iter().enumerate() {
                let spec = MaskSpec::new(
                    cfg.train.mask_patch,
                    cfg.train.mask_ratio,
                    mask_base.wrapping_add(ii as u64),
                )?;
                let m = make_mask(size, size, &spec)?;
                masks[ii * per..(ii + 1) * per].copy_from_slice(&m.data);
            }
            let mask_t = Tensor::new(batch.shape.clone(), masks)?;
            let corrupted = corrupt(&batch, &mask_t, 0.0)?;
            targets.data.copy_from_slice(&batch.data);

            let mut tape = Tape::new();
            let x = tape.constant(corrupted.data.clone(), corrupted.shape.clone());
            let out = model.encoder.forward(&mut tape, &model.params, x)?;
            let decoder = model.decoder.as_ref().expect("pretrain model");
            let recon = decoder.forward(&mut tape, &model.params, out.tokens, out.grid)?;
            let loss = mim_loss(&mut tape, recon, &targets, &mask_t)?;
            let loss_v = tape.value(loss)[0];
            if !loss_v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "masked reconstruction loss".into(),
                });
            }
            tape.backward(loss)?;
            model.params.write_grads(&tape);
            opt.step(&mut model.params)?;
            model.slow_update_all();
            sum += loss_v;
            count += 1;
            step += 1;
        }
        let mean_loss = sum / count.max(1) as f64;
        epoch_losses.push(mean_loss);
        eprintln!("pretrain epoch {epoch}: mean loss {mean_loss:.6}");

        // retain the latest finished epoch as the good checkpoint
        let mut ck = classifier_checkpoint(&model, cfg, mean, std, step);
        ck.tensors.retain(|t| t.name.starts_with("encoder."));
        ck.write(&encoder_path)?;
        let mut rk = Checkpoint::from_params(&model.params);
        rk.tensors.retain(|t| t.name.starts_with("decoder."));
        rk.set_step(step);
        rk.set_seed(cfg.seed);
        rk.write(&recon_path)?;
    }
    let mut curve = String::from("epoch,mean_loss\n");
    for (i, l) in epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{},{:.6}\n", i + 1, l));
    }
    write_text(&out_dir.join("loss_curve.csv"), &curve)?;
    Ok(PretrainOutput {
        encoder_ckpt: encoder_path,
        recon_ckpt: recon_path,
        epoch_losses,
    })
}

// ── Stage: supervised fine-tuning ────────────────────────────────────

pub struct FinetuneOutput {
    pub model_ckpt: PathBuf,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub val_curve: Vec<f64>,
}

pub fn finetune(cfg: &RunConfig, out_dir: &Path) -> Result<FinetuneOutput> {
    fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(&cfg.data.dir.join("manifest.txt"))?;
    let source = DataSource::new(cfg.data.dir.clone(), manifest);
    finetune_on(cfg, &source, out_dir)
}

/// Fine-tune against an explicit data source (the label-efficiency study
/// swaps in stratified manifests).
pub fn finetune_on(cfg: &RunConfig, source: &DataSource, out_dir: &Path) -> Result<FinetuneOutput> {
    fs::create_dir_all(out_dir)?;
    let train_idx = source.split_indices(Split::Train);
    let val_idx = source.split_indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::config("finetune needs non-empty train and val splits"));
    }
    let (mean, std) = intensity_stats(source, &train_idx)?;
    let mut model = Model::classifier(&cfg.model, cfg.seed)?;
    if let Some(init) = &cfg.init_checkpoint {
        let ck = Checkpoint::read(init)?;
        ck.load_into(&mut model.params, Some("encoder."))?;
    }
    let ids = model.params.trainable_ids();
    let mut opt = build_optimizer(&cfg.optim, cfg.optim.learning_rate, (1.0, 1.0), ids, &model.params)?;
    eprintln!(
        "finetune: {} train / {} val slices, {} trainable values",
        train_idx.len(),
        val_idx.len(),
        model.params.trainable_count()
    );

    let class_weights = if cfg.train.class_weighting {
        let labels: Vec<usize> = train_idx
            .iter()
            .map(|&i| source.entry(i).label.max(0) as usize)
            .collect();
        Some(inverse_frequency_weights(&labels, cfg.model.num_classes))
    } else {
        None
    };

    let mut loader = Loader {
        source,
        mean,
        std,
        image_size: cfg.model.image_size,
        seed: cfg.seed,
        aug_counter: 0,
    };

    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut val_curve = Vec::new();
    let mut stale = 0usize;
    let mut step = 0u64;
    for epoch in 1..=cfg.train.epochs {
        let order = shuffled(&train_idx, cfg.seed, "shuffle", epoch as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let (batch, labels) = loader.train_batch(chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.data.clone(), batch.shape.clone());
            let out = model.encoder.forward(&mut tape, &model.params, x)?;
            let head = model.head.as_ref().expect("classifier");
            let logits = head.forward(&mut tape, &model.params, out.pooled)?;
            let loss = tape.softmax_cross_entropy(logits, &labels, class_weights.as_deref())?;
            let loss_v = tape.value(loss)[0];
            if !loss_v.is_finite() {
                if let Some((_, _, ck)) = &best {
                    ck.write(&out_dir.join("last_good.nlck"))?;
                }
                return Err(Error::Diverged { epoch, what: "cross-entropy loss".into() });
            }
            tape.backward(loss)?;
            model.params.write_grads(&tape);
            opt.step(&mut model.params)?;
            model.slow_update_all();
            sum += loss_v;
            count += 1;
            step += 1;
        }
        let (_, val_f1) = evaluate_split(&model, &loader, &val_idx)?;
        val_curve.push(val_f1);
        eprintln!(
            "finetune epoch {epoch}: mean loss {:.6}, val macro F1 {:.4}",
            sum / count.max(1) as f64,
            val_f1
        );
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_f1 > *b);
        if improved {
            best = Some((val_f1, epoch, classifier_checkpoint(&model, cfg, mean, std, step)));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.train.patience {
                eprintln!("finetune: early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_f1, best_epoch, best_ck) = best.expect("at least one epoch ran");
    let model_path = out_dir.join("model.nlck");
    best_ck.write(&model_path)?;
    let mut curve = String::from("epoch,val_macro_f1\n");
    for (i, v) in val_curve.iter().enumerate() {
        curve.push_str(&format!("{},{:.6}\n", i + 1, v));
    }
    write_text(&out_dir.join("val_curve.csv"), &curve)?;
    Ok(FinetuneOutput {
        model_ckpt: model_path,
        best_val_f1: best_f1,
        best_epoch,
        val_curve,
    })
}

// ── Stage: sequential continual updates ──────────────────────────────

pub struct ContinualOutput {
    pub perf: PerfMatrix,
    pub mf: f64,
    pub maxf: f64,
    pub bwt: f64,
    pub iag: f64,
    pub avg_batch: f64,
}

pub fn continual_run(cfg: &RunConfig, out_dir: &Path) -> Result<ContinualOutput> {
    fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(&cfg.data.dir.join("continual_manifest.txt"))?;
    let source = DataSource::new(cfg.data.dir.clone(), manifest);
    let n_batches = cfg.continual.n_batches;
    let mut batch_indices = Vec::with_capacity(n_batches);
    for b in 1..=n_batches {
        let idx = source.split_indices(Split::Batch(b as u8));
        if idx.is_empty() {
            return Err(Error::config(format!("continual batch {b} is empty")));
        }
        batch_indices.push(idx);
    }

    let init_path = cfg
        .init_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("continual requires init_checkpoint"))?;
    let init = Checkpoint::read(init_path)?;
    let (mean, std) = init
        .norm_stats()
        .ok_or_else(|| Error::config("init checkpoint lacks normalization statistics"))?;
    let mut model = Model::classifier(&cfg.model, cfg.seed)?;
    init.load_into(&mut model.params, Some("encoder."))?;
    init.load_into(&mut model.params, Some("head."))?;

    let ids = model.params.trainable_ids();
    let mut opt = build_optimizer(
        &cfg.optim,
        cfg.continual.learning_rate,
        (cfg.continual.backbone_lr_mult, cfg.continual.head_lr_mult),
        ids,
        &model.params,
    )?;

    let mut loader = Loader {
        source: &source,
        mean,
        std,
        image_size: cfg.model.image_size,
        seed: cfg.seed,
        aug_counter: 0,
    };

    let mut perf = PerfMatrix::new(n_batches);
    let mut step = 0u64;
    for t in 0..n_batches {
        // training pool: full replay keeps all batches seen so far
        let pool: Vec<usize> = match cfg.continual.replay {
            Replay::Full => batch_indices[..=t].iter().flatten().cloned().collect(),
            Replay::None => batch_indices[t].clone(),
        };
        let labels: Vec<usize> = pool
            .iter()
            .map(|&i| source.entry(i).label.max(0) as usize)
            .collect();
        let weights = inverse_frequency_weights(&labels, cfg.model.num_classes);
        for epoch in 1..=cfg.continual.epochs_per_batch {
            let order = shuffled(&pool, cfg.seed, &format!("shuffle-batch{}", t + 1), epoch as u64);
            for chunk in order.chunks(cfg.train.batch_size) {
                let (batch, lbls) = loader.train_batch(chunk)?;
                let mut tape = Tape::new();
                let x = tape.constant(batch.data.clone(), batch.shape.clone());
                let out = model.encoder.forward(&mut tape, &model.params, x)?;
                let head = model.head.as_ref().expect("classifier");
                let logits = head.forward(&mut tape, &model.params, out.pooled)?;
                let loss = tape.softmax_cross_entropy(logits, &lbls, Some(&weights))?;
                let loss_v = tape.value(loss)[0];
                if !loss_v.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        what: format!("weighted cross-entropy on batch {}", t + 1),
                    });
                }
                tape.backward(loss)?;
                model.params.write_grads(&tape);
                opt.step(&mut model.params)?;
                model.slow_update_all();
                step += 1;
            }
        }
        // row t: post-update scores on all batches; entries right of the
        // diagonal become the pre-adaptation scores of future batches
        for (b, idx) in batch_indices.iter().enumerate() {
            let (_, f1) = evaluate_split(&model, &loader, idx)?;
            perf.set(t, b, 100.0 * f1);
        }
        eprintln!(
            "continual: after batch {} row {:?}",
            t + 1,
            (0..n_batches).map(|b| perf.get(t, b)).collect::<Vec<_>>()
        );
    }

    let (per_batch, mf, maxf) = perf.forgetting()?;
    let bwt = perf.bwt()?;
    let iag = perf.iag()?;
    let avg_batch = perf.avg_batch_f1();

    write_text(&out_dir.join("perf_matrix.csv"), &perf.to_csv())?;
    let mut rows: Vec<(&str, f64)> = vec![
        ("avg_batch_macro_f1", avg_batch),
        ("mf", mf),
        ("maxf", maxf),
        ("bwt", bwt),
        ("iag", iag),
    ];
    let forget_names: Vec<String> = (0..per_batch.len())
        .map(|b| format!("forgetting_batch{}", b + 1))
        .collect();
    for (b, v) in per_batch.iter().enumerate() {
        rows.push((forget_names[b].as_str(), *v));
    }
    write_text(&out_dir.join("continual_metrics.csv"), &metrics_report_csv(&rows))?;
    classifier_checkpoint(&model, cfg, mean, std, step).write(&out_dir.join("model_final.nlck"))?;
    Ok(ContinualOutput { perf, mf, maxf, bwt, iag, avg_batch })
}

// ── Stage: evaluation ────────────────────────────────────────────────

pub struct EvalOutput {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub cm: ConfusionMatrix,
}

pub fn eval_run(cfg: &RunConfig, out_dir: &Path) -> Result<EvalOutput> {
    fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(&cfg.data.dir.join("manifest.txt"))?;
    let source = DataSource::new(cfg.data.dir.clone(), manifest);
    let test_idx = source.split_indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let init_path = cfg
        .init_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval requires init_checkpoint"))?;
    let ck = Checkpoint::read(init_path)?;
    let (mean, std) = ck
        .norm_stats()
        .ok_or_else(|| Error::config("checkpoint lacks normalization statistics"))?;
    let mut model = Model::classifier(&cfg.model, cfg.seed)?;
    ck.load_into(&mut model.params, Some("encoder."))?;
    ck.load_into(&mut model.params, Some("head."))?;
    let loader = Loader {
        source: &source,
        mean,
        std,
        image_size: cfg.model.image_size,
        seed: cfg.seed,
        aug_counter: 0,
    };
    let (cm, macro_v) = evaluate_split(&model, &loader, &test_idx)?;
    let scores = per_class_scores(&cm)?;
    let macro_p = crate::metrics::macro_average(&scores.precision);
    let macro_r = crate::metrics::macro_average(&scores.recall);
    let accuracy = cm.accuracy();

    write_text(&out_dir.join("confusion_matrix.csv"), &cm.to_csv())?;
    let mut rows: Vec<(String, f64)> = vec![
        ("accuracy".into(), accuracy),
        ("macro_precision".into(), macro_p),
        ("macro_recall".into(), macro_r),
        ("macro_f1".into(), macro_v),
    ];
    for c in 0..cm.classes() {
        rows.push((format!("class{c}_precision"), scores.precision[c]));
        rows.push((format!("class{c}_recall"), scores.recall[c]));
        rows.push((format!("class{c}_f1"), scores.f1[c]));
    }
    let row_refs: Vec<(&str, f64)> = rows.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    write_text(&out_dir.join("metrics.csv"), &metrics_report_csv(&row_refs))?;
    Ok(EvalOutput {
        accuracy,
        macro_precision: macro_p,
        macro_recall: macro_r,
        macro_f1: macro_v,
        cm,
    })
}
