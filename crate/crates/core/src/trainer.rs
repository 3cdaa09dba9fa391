//! Robust source training, target adaptation, and whole-experiment runs.
//!
//! Stage state is checkpointed at epoch boundaries. Every random draw is
//! derived from `(seed, stage, counter)`, so a run resumed from a checkpoint
//! follows the same trajectory as an uninterrupted one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::attacks::{label_free_attack, pgd_attack};
use crate::config::{DataConfig, ExperimentConfig, StageSchedule, Switches};
use crate::data::{
    ingest_dataset, make_batches, stack_pixels, Domain, DomainPair, HeldOutLabels, IngestOptions, Sample,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EpochPseudoStats, ResultRecord};
use crate::losses::{
    contrastive_loss, cross_entropy, curda_total, discriminator_loss, encoder_adversarial_loss, saa_contrastive_loss,
    trade_kl_from_logits, PairSet, TradeTarget,
};
use crate::metrics::{MetricRecord, MetricsSink};
use crate::models::{clone_encoder, Checkpoint, Classifier, Discriminator, Encoder, Role};
use crate::nn::{Parameters, Sgd, SgdState};
use crate::pseudo_label::{
    accepted_targets, generate_pseudo_labels, labels_from_probs, pseudo_label_stats, Generator, PseudoLabel,
    PseudoLabelStats,
};
use crate::rng::rng_for;

pub const SOURCE_STATE_FILE: &str = "source_state.json";
pub const ADAPT_STATE_FILE: &str = "adapt_state.json";
pub const SOURCE_ENCODER_FILE: &str = "source_encoder.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const TARGET_ENCODER_FILE: &str = "target_encoder.json";
pub const DISCRIMINATOR_FILE: &str = "discriminator.json";
pub const RESULT_FILE: &str = "result.json";

/// Training and evaluation splits of one domain pair.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Labeled source training set and unlabeled target training set.
    pub pair: DomainPair,
    /// Target training labels, used only for pseudo-label statistics.
    pub target_train_truth: Option<HeldOutLabels>,
    pub target_test: Vec<Sample>,
    pub target_test_truth: HeldOutLabels,
    pub source_test: Option<Vec<Sample>>,
}

impl ExperimentData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let opts = IngestOptions {
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
        };
        let mut source = ingest_dataset(&cfg.source_train, cfg.format, Domain::Source, &opts)?.samples;
        let mut target = ingest_dataset(&cfg.target_train, cfg.format, Domain::Target, &opts)?;
        let test = ingest_dataset(&cfg.target_test, cfg.format, Domain::Target, &opts)?;
        let target_test_truth = test.held_out.ok_or_else(|| {
            Error::Structural(format!(
                "target test data at {} has no labels",
                cfg.target_test.display()
            ))
        })?;
        if let Some(n) = cfg.source_limit {
            source.truncate(n);
        }
        let mut target_train_truth = target.held_out;
        if let Some(n) = cfg.target_limit {
            target.samples.truncate(n);
            target_train_truth =
                target_train_truth.map(|h| HeldOutLabels::new(h.for_evaluation()[..n.min(h.len())].to_vec()));
        }
        let source_test = cfg
            .source_test
            .as_ref()
            .map(|p| ingest_dataset(p, cfg.format, Domain::Source, &opts).map(|i| i.samples))
            .transpose()?;
        Ok(Self {
            pair: DomainPair::new(source, target.samples, cfg.num_classes)?,
            target_train_truth,
            target_test: test.samples,
            target_test_truth,
            source_test,
        })
    }
}

/// Frozen outputs of the source stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModels {
    pub encoder: Encoder<f32>,
    pub classifier: Classifier<f32>,
}

/// Resumable source-stage state, written at epoch boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceState {
    pub resume_key: String,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub iteration: u64,
    pub encoder: Encoder<f32>,
    pub classifier: Classifier<f32>,
    pub encoder_opt: SgdState<f32>,
    pub classifier_opt: SgdState<f32>,
    pub history: Vec<MetricRecord>,
    /// Training time accumulated over all invocations.
    #[serde(default)]
    pub wall_clock_secs: f64,
}

/// Resumable adaptation-stage state, written at epoch boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptState {
    pub resume_key: String,
    pub epoch: usize,
    pub iteration: u64,
    pub target_encoder: Encoder<f32>,
    pub discriminator: Discriminator<f32>,
    pub encoder_opt: SgdState<f32>,
    pub discriminator_opt: SgdState<f32>,
    pub history: Vec<MetricRecord>,
    pub pseudo_history: Vec<EpochPseudoStats>,
    #[serde(default)]
    pub wall_clock_secs: f64,
}

/// Where a stage writes checkpoints and metrics.
pub struct StageIo<'a> {
    pub dir: Option<&'a Path>,
    pub metrics: &'a mut MetricsSink,
}

impl StageIo<'_> {
    fn path(&self, file: &str) -> Option<PathBuf> {
        self.dir.map(|d| d.join(file))
    }
}

fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Serde(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Digest of a stage's inputs with the epoch count left out, so a finished
/// run can be extended by raising `epochs`.
fn resume_key<S: Serialize>(parts: &S) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(parts).expect("key serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

fn schedule_without_epochs(s: &StageSchedule) -> StageSchedule {
    StageSchedule {
        epochs: 0,
        checkpoint_every: 0,
        ..s.clone()
    }
}

fn source_resume_key(cfg: &ExperimentConfig) -> String {
    resume_key(&(
        "source",
        &cfg.data,
        &cfg.model.encoder,
        schedule_without_epochs(&cfg.source),
        &cfg.attack.train,
        cfg.losses.lambda_con,
        cfg.losses.margin_source,
        &cfg.pairs,
        cfg.switches().use_con,
        cfg.seed,
    ))
}

fn adapt_resume_key(cfg: &ExperimentConfig, source_fp: &str) -> String {
    resume_key(&(
        "adapt",
        source_fp,
        schedule_without_epochs(&cfg.adapt),
        &cfg.attack.label_free,
        &cfg.losses,
        &cfg.labeler,
        cfg.switches(),
        cfg.model.discriminator_hidden,
        cfg.seed,
    ))
}

fn sgd(s: &StageSchedule, state: Option<SgdState<f32>>) -> Sgd<f32> {
    let mut opt = Sgd::new(s.lr, s.momentum, s.weight_decay);
    if let Some(st) = state {
        opt.restore(st);
    }
    opt
}

fn non_finite(what: &str, iteration: u64) -> Error {
    Error::Numerical(format!("{what} became non-finite at step {iteration}"))
}

/// Loss components of one source step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceLosses {
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// One robust source step on an already stacked batch.
#[allow(clippy::too_many_arguments)]
pub fn source_step<R: rand::Rng + ?Sized>(
    cfg: &ExperimentConfig,
    encoder: &mut Encoder<f32>,
    classifier: &mut Classifier<f32>,
    enc_opt: &mut Sgd<f32>,
    clf_opt: &mut Sgd<f32>,
    x: &Array4<f32>,
    labels: &[usize],
    budget: &crate::attacks::AttackBudget,
    rng: &mut R,
    iteration: u64,
) -> Result<SourceLosses> {
    let x_adv = pgd_attack(encoder, classifier, x, Some(labels), budget, rng)?;
    let (features, enc_cache) = encoder.forward_train(&x_adv)?;
    let (logits, clf_cache) = classifier.forward_train(&features)?;
    let ce = cross_entropy(&logits, labels)?;
    let (g_clf, mut d_features) = classifier.backward(&clf_cache, &ce.grad, true);
    let mut losses = SourceLosses {
        cross_entropy: f64::from(ce.value),
        ..SourceLosses::default()
    };
    let lambda = cfg.losses.lambda_con;
    if cfg.switches().use_con && lambda > 0.0 {
        let pairs = match cfg.pairs.max_pairs {
            Some(m) => PairSet::sampled(labels, m, rng),
            None => PairSet::all_pairs(labels),
        };
        let con = contrastive_loss(&features, labels, cfg.losses.margin_source, &pairs)?;
        let l = lambda as f32;
        d_features.zip_mut_with(&con.grad, |d, &g| *d += l * g);
        losses.contrastive = f64::from(con.value);
    }
    losses.total = losses.cross_entropy + lambda * losses.contrastive;
    let (g_enc, _) = encoder.backward(&enc_cache, &d_features, true);
    let (g_enc, g_clf) = (g_enc.expect("requested"), g_clf.expect("requested"));
    if !losses.total.is_finite() || !g_enc.all_finite() || !g_clf.all_finite() {
        return Err(non_finite("source loss", iteration));
    }
    enc_opt.step(encoder, &g_enc);
    clf_opt.step(classifier, &g_clf);
    Ok(losses)
}

/// Adversarial training of a fresh encoder and classifier on labeled source
/// data: PGD examples, cross-entropy, plus the margin contrastive term on
/// adversarial features when enabled.
pub fn train_source_robust(cfg: &ExperimentConfig, source: &[Sample], io: &mut StageIo<'_>) -> Result<SourceModels> {
    let key = source_resume_key(cfg);
    let state_path = io.path(SOURCE_STATE_FILE);
    let resumed = match &state_path {
        Some(p) if p.exists() => {
            let st: SourceState = load_json(p)?;
            if st.resume_key == key && st.epoch <= cfg.source.epochs {
                Some(st)
            } else {
                log::info!("ignoring source checkpoint from a different configuration");
                None
            }
        }
        _ => None,
    };
    let mut st = match resumed {
        Some(st) => {
            for r in &st.history {
                io.metrics.record(r.step, r.key.clone(), r.value);
            }
            st
        }
        None => {
            let mut rng = rng_for(cfg.seed, "source-init", 0);
            let encoder = Encoder::new(&mut rng, cfg.model.encoder.clone(), Role::Source)?;
            let classifier = Classifier::new(&mut rng, encoder.feature_dim(), cfg.data.num_classes);
            SourceState {
                resume_key: key,
                epoch: 0,
                iteration: 0,
                encoder,
                classifier,
                encoder_opt: SgdState::default(),
                classifier_opt: SgdState::default(),
                history: Vec::new(),
                wall_clock_secs: 0.0,
            }
        }
    };
    let mut enc_opt = sgd(&cfg.source, Some(std::mem::take(&mut st.encoder_opt)));
    let mut clf_opt = sgd(&cfg.source, Some(std::mem::take(&mut st.classifier_opt)));
    let mut clock = Instant::now();
    while st.epoch < cfg.source.epochs {
        let epoch = st.epoch;
        let lr = cfg.source.lr_at(epoch);
        enc_opt.lr = lr;
        clf_opt.lr = lr;
        let budget = cfg.source.warmed_budget(&cfg.attack.train, epoch);
        let batches = make_batches(
            source,
            cfg.source.batch_size,
            crate::rng::derive_seed(cfg.seed, "source-batches", epoch as u64),
        )?;
        let mut sums = SourceLosses::default();
        for batch in &batches {
            let labels = batch
                .labels()
                .ok_or_else(|| Error::Contract("source batch without labels".into()))?;
            let mut rng = rng_for(cfg.seed, "source-step", st.iteration);
            let before = (st.encoder.clone(), st.classifier.clone());
            let step = source_step(
                cfg,
                &mut st.encoder,
                &mut st.classifier,
                &mut enc_opt,
                &mut clf_opt,
                &batch.pixels(),
                &labels,
                &budget,
                &mut rng,
                st.iteration,
            );
            let losses = match step {
                Ok(l) if st.encoder.all_finite() && st.classifier.all_finite() => l,
                other => {
                    let err = other
                        .err()
                        .unwrap_or_else(|| non_finite("source parameters", st.iteration));
                    write_last_good(io, &before.0, &before.1, cfg)?;
                    return Err(err);
                }
            };
            st.iteration += 1;
            sums.cross_entropy += losses.cross_entropy;
            sums.contrastive += losses.contrastive;
            sums.total += losses.total;
        }
        let n = batches.len() as f64;
        st.epoch += 1;
        for (k, v) in [
            ("source/lr", lr),
            ("source/epsilon", budget.epsilon),
            ("source/cross_entropy", sums.cross_entropy / n),
            ("source/contrastive", sums.contrastive / n),
            ("source/loss", sums.total / n),
        ] {
            record(io.metrics, &mut st.history, st.epoch as u64, k, v);
        }
        log::info!(
            "source epoch {}/{} loss {:.4}",
            st.epoch,
            cfg.source.epochs,
            sums.total / n
        );
        let due = cfg.source.checkpoint_every > 0 && st.epoch % cfg.source.checkpoint_every == 0;
        if let Some(p) = &state_path {
            if due || st.epoch == cfg.source.epochs {
                st.wall_clock_secs += clock.elapsed().as_secs_f64();
                clock = Instant::now();
                st.encoder_opt = enc_opt.state().clone();
                st.classifier_opt = clf_opt.state().clone();
                save_json(p, &st)?;
            }
        }
    }
    io.metrics.flush();
    let mut models = SourceModels {
        encoder: st.encoder,
        classifier: st.classifier,
    };
    models.encoder.frozen = true;
    models.classifier.frozen = true;
    if let Some(dir) = io.dir {
        save_source_models(dir, &models, cfg)?;
    }
    Ok(models)
}

fn record(sink: &mut MetricsSink, history: &mut Vec<MetricRecord>, step: u64, key: &str, value: f64) {
    sink.record(step, key, value);
    history.push(MetricRecord {
        step,
        key: key.to_string(),
        value,
    });
}

fn write_last_good(
    io: &StageIo<'_>,
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    cfg: &ExperimentConfig,
) -> Result<()> {
    if let Some(dir) = io.dir {
        let path = dir.join("last_good.json");
        Checkpoint::new(
            "last_good",
            cfg.seed,
            &cfg.fingerprint(),
            SourceModels {
                encoder: encoder.clone(),
                classifier: classifier.clone(),
            },
        )
        .save(&path)?;
        log::error!("non-finite values; last good parameters written to {}", path.display());
    }
    Ok(())
}

pub fn save_source_models(dir: &Path, models: &SourceModels, cfg: &ExperimentConfig) -> Result<()> {
    let fp = cfg.fingerprint();
    Checkpoint::new("source_encoder", cfg.seed, &fp, models.encoder.clone()).save(&dir.join(SOURCE_ENCODER_FILE))?;
    Checkpoint::new("classifier", cfg.seed, &fp, models.classifier.clone()).save(&dir.join(CLASSIFIER_FILE))
}

pub fn load_source_models(dir: &Path) -> Result<SourceModels> {
    let mut encoder = Checkpoint::<Encoder<f32>>::load(&dir.join(SOURCE_ENCODER_FILE))?.model;
    let mut classifier = Checkpoint::<Classifier<f32>>::load(&dir.join(CLASSIFIER_FILE))?.model;
    encoder.frozen = true;
    classifier.frozen = true;
    Ok(SourceModels { encoder, classifier })
}

/// Loss components of one adaptation step. Disabled terms stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLosses {
    /// Discriminator objective before its update.
    pub discriminator: f64,
    /// Inverted-label objective of the target encoder.
    pub dis: f64,
    pub saa: f64,
    pub trade: f64,
    pub total: f64,
    pub accepted: usize,
}

/// What an observer sees after each adaptation step.
pub struct AdaptStep<'a> {
    pub epoch: usize,
    pub iteration: u64,
    pub generator: Generator,
    pub labels: &'a [PseudoLabel],
    pub losses: AdaptLosses,
    pub target_encoder: &'a Encoder<f32>,
}

/// Models an adaptation step reads and writes.
pub struct AdaptModels<'a> {
    pub source: &'a SourceModels,
    pub target_encoder: &'a mut Encoder<f32>,
    pub discriminator: &'a mut Discriminator<f32>,
    pub encoder_opt: &'a mut Sgd<f32>,
    pub discriminator_opt: &'a mut Sgd<f32>,
}

/// Inputs of one adaptation step.
pub struct AdaptBatch<'a> {
    pub source_pixels: &'a Array4<f32>,
    pub source_labels: &'a [usize],
    pub target_pixels: &'a Array4<f32>,
    pub target_indices: &'a [usize],
    /// Counter compared against the labeler's `tau`.
    pub schedule_counter: usize,
    pub iteration: u64,
}

/// One discriminator update followed by one target-encoder update on the
/// enabled terms. Returns the losses and this step's pseudo-labels.
pub fn adapt_step<R: rand::Rng + ?Sized>(
    cfg: &ExperimentConfig,
    m: &mut AdaptModels<'_>,
    b: &AdaptBatch<'_>,
    rng: &mut R,
) -> Result<(AdaptLosses, Vec<PseudoLabel>)> {
    let sw: Switches = cfg.switches();
    let src = m.source;
    let f_s = src.encoder.forward(b.source_pixels)?;
    let (f_t, cache_t) = m.target_encoder.forward_train(b.target_pixels)?;
    let mut losses = AdaptLosses::default();

    if sw.use_dis {
        let (p_s, cache_s) = m.discriminator.forward_train(&f_s)?;
        let (p_t, cache_tt) = m.discriminator.forward_train(&f_t)?;
        let dl = discriminator_loss(&p_s, &p_t)?;
        let (g, _) = m.discriminator.backward(&cache_s, &dl.grad_source, true, false);
        let (g_t, _) = m.discriminator.backward(&cache_tt, &dl.grad_target, true, false);
        let mut g = g.expect("requested");
        g.accumulate(&g_t.expect("requested"));
        losses.discriminator = f64::from(dl.value);
        if !losses.discriminator.is_finite() || !g.all_finite() {
            return Err(non_finite("discriminator loss", b.iteration));
        }
        m.discriminator_opt.step(m.discriminator, &g);
    }

    let x_adv = if sw.use_trade || sw.use_saa {
        Some(label_free_attack(
            m.target_encoder,
            &src.classifier,
            b.target_pixels,
            &cfg.attack.label_free,
            rng,
        )?)
    } else {
        None
    };
    let labels = generate_pseudo_labels(
        b.target_pixels,
        b.target_indices,
        b.schedule_counter,
        &cfg.labeler,
        sw.switch_encoders,
        &src.encoder,
        m.target_encoder,
        &src.classifier,
    )?;

    let mut d_ft = Array2::<f32>::zeros(f_t.dim());
    if sw.use_dis {
        let (p_t, cache) = m.discriminator.forward_train(&f_t)?;
        let (v, g) = encoder_adversarial_loss(&p_t)?;
        let (_, d_in) = m.discriminator.backward(&cache, &g, false, true);
        d_ft += &d_in.expect("requested");
        losses.dis = f64::from(v);
    }
    let mut grads = None;
    if let Some(x_adv) = &x_adv {
        let (f_adv, cache_adv) = m.target_encoder.forward_train(x_adv)?;
        let mut d_fadv = Array2::<f32>::zeros(f_adv.dim());
        if sw.use_trade {
            let (lc, cc) = src.classifier.forward_train(&f_t)?;
            let (la, ca) = src.classifier.forward_train(&f_adv)?;
            let kl = trade_kl_from_logits(&lc, &la)?;
            if cfg.losses.trade_target == TradeTarget::Joint {
                let (_, d1) = src.classifier.backward(&cc, &kl.grad_clean, false);
                d_ft += &d1;
            }
            let (_, d2) = src.classifier.backward(&ca, &kl.grad_adv, false);
            d_fadv += &d2;
            losses.trade = f64::from(kl.value);
        }
        if sw.use_saa {
            let accepted = accepted_targets(&labels);
            losses.accepted = accepted.len();
            let saa = saa_contrastive_loss(&f_s, b.source_labels, &f_t, &f_adv, &accepted, cfg.losses.margin_target)?;
            let l = cfg.losses.lambda_saa as f32;
            d_ft.zip_mut_with(&saa.grad_clean, |d, &g| *d += l * g);
            d_fadv.zip_mut_with(&saa.grad_adv, |d, &g| *d += l * g);
            losses.saa = f64::from(saa.value);
        }
        grads = m.target_encoder.backward(&cache_adv, &d_fadv, true).0;
    }
    let (g_clean, _) = m.target_encoder.backward(&cache_t, &d_ft, true);
    let mut g = g_clean.expect("requested");
    if let Some(g_adv) = grads {
        g.accumulate(&g_adv);
    }
    losses.total = curda_total(losses.saa, losses.dis, losses.trade, cfg.losses.lambda_saa);
    if !losses.total.is_finite() || !g.all_finite() {
        return Err(non_finite("adaptation loss", b.iteration));
    }
    m.encoder_opt.step(m.target_encoder, &g);
    Ok((losses, labels))
}

/// Adapts a copy of the source encoder to the unlabeled target set. The
/// source encoder and classifier are only read. `truth` feeds per-epoch
/// pseudo-label statistics and never reaches a gradient.
pub fn adapt_target(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    source: &SourceModels,
    truth: Option<&HeldOutLabels>,
    io: &mut StageIo<'_>,
    observer: &mut dyn FnMut(&AdaptStep<'_>),
) -> Result<(Encoder<f32>, Vec<EpochPseudoStats>)> {
    if !source.encoder.frozen || !source.classifier.frozen {
        return Err(Error::Contract(
            "source encoder and classifier must be frozen before adaptation".into(),
        ));
    }
    let key = adapt_resume_key(cfg, &resume_key(&(&source.encoder, &source.classifier)));
    let state_path = io.path(ADAPT_STATE_FILE);
    let resumed = match &state_path {
        Some(p) if p.exists() => {
            let st: AdaptState = load_json(p)?;
            (st.resume_key == key && st.epoch <= cfg.adapt.epochs).then_some(st)
        }
        _ => None,
    };
    let mut st = match resumed {
        Some(st) => {
            for r in &st.history {
                io.metrics.record(r.step, r.key.clone(), r.value);
            }
            st
        }
        None => {
            let mut rng = rng_for(cfg.seed, "adapt-init", 0);
            AdaptState {
                resume_key: key,
                epoch: 0,
                iteration: 0,
                target_encoder: clone_encoder(&source.encoder),
                discriminator: Discriminator::new(
                    &mut rng,
                    source.encoder.feature_dim(),
                    cfg.model.discriminator_hidden,
                ),
                encoder_opt: SgdState::default(),
                discriminator_opt: SgdState::default(),
                history: Vec::new(),
                pseudo_history: Vec::new(),
                wall_clock_secs: 0.0,
            }
        }
    };
    let mut enc_opt = sgd(&cfg.adapt, Some(std::mem::take(&mut st.encoder_opt)));
    let mut disc_opt = sgd(&cfg.adapt, Some(std::mem::take(&mut st.discriminator_opt)));
    let sw = cfg.switches();
    let mut clock = Instant::now();
    while st.epoch < cfg.adapt.epochs {
        let epoch = st.epoch;
        let lr = cfg.adapt.lr_at(epoch);
        enc_opt.lr = lr;
        disc_opt.lr = lr;
        let bs = cfg.adapt.batch_size;
        let targets = make_batches(
            &pair.target_set,
            bs,
            crate::rng::derive_seed(cfg.seed, "adapt-target-batches", epoch as u64),
        )?;
        let sources = make_batches(
            &pair.source_set,
            bs,
            crate::rng::derive_seed(cfg.seed, "adapt-source-batches", epoch as u64),
        )?;
        let mut sums = AdaptLosses::default();
        let mut epoch_labels: Vec<PseudoLabel> = Vec::with_capacity(pair.target_set.len());
        let mut last_generator = Generator::SourceModel;
        for (ti, tb) in targets.iter().enumerate() {
            let sb = &sources[ti % sources.len()];
            let source_labels = sb
                .labels()
                .ok_or_else(|| Error::Contract("source batch without labels".into()))?;
            let (xs, xt) = (sb.pixels(), tb.pixels());
            let counter = cfg.labeler.counter(st.iteration as usize, epoch);
            let batch = AdaptBatch {
                source_pixels: &xs,
                source_labels: &source_labels,
                target_pixels: &xt,
                target_indices: tb.indices(),
                schedule_counter: counter,
                iteration: st.iteration,
            };
            let mut rng = rng_for(cfg.seed, "adapt-step", st.iteration);
            let before = st.target_encoder.clone();
            let mut models = AdaptModels {
                source,
                target_encoder: &mut st.target_encoder,
                discriminator: &mut st.discriminator,
                encoder_opt: &mut enc_opt,
                discriminator_opt: &mut disc_opt,
            };
            let (losses, labels) = match adapt_step(cfg, &mut models, &batch, &mut rng) {
                Ok(out) if st.target_encoder.all_finite() => out,
                other => {
                    let err = other
                        .err()
                        .unwrap_or_else(|| non_finite("target encoder parameters", st.iteration));
                    write_last_good(io, &before, &source.classifier, cfg)?;
                    return Err(err);
                }
            };
            let generator = cfg.labeler.generator_at(counter, sw.switch_encoders);
            if generator == Generator::TargetModel
                && last_generator == Generator::SourceModel
                && sw.use_saa
                && !st.history.iter().any(|r| r.key == "adapt/generator_switch")
            {
                record(io.metrics, &mut st.history, st.iteration, "adapt/generator_switch", 1.0);
            }
            last_generator = generator;
            observer(&AdaptStep {
                epoch,
                iteration: st.iteration,
                generator,
                labels: &labels,
                losses,
                target_encoder: &st.target_encoder,
            });
            st.iteration += 1;
            sums.discriminator += losses.discriminator;
            sums.dis += losses.dis;
            sums.saa += losses.saa;
            sums.trade += losses.trade;
            sums.total += losses.total;
            sums.accepted += labels.iter().filter(|l| l.accepted).count();
            epoch_labels.extend(labels);
        }
        let n = targets.len() as f64;
        st.epoch += 1;
        let step = st.epoch as u64;
        for (k, v) in [
            ("adapt/lr", lr),
            ("adapt/discriminator", sums.discriminator / n),
            ("adapt/dis", sums.dis / n),
            ("adapt/saa", sums.saa / n),
            ("adapt/trade", sums.trade / n),
            ("adapt/loss", sums.total / n),
        ] {
            record(io.metrics, &mut st.history, step, k, v);
        }
        if let Some(truth) = truth {
            let stats = pseudo_label_stats(&epoch_labels, truth)?;
            record(io.metrics, &mut st.history, step, "pseudo/coverage", stats.coverage);
            if let Some(a) = stats.accuracy_on_accepted {
                record(io.metrics, &mut st.history, step, "pseudo/accuracy", a);
            }
            st.pseudo_history.push(EpochPseudoStats {
                epoch: st.epoch,
                generator: last_generator,
                stats,
            });
        } else {
            let coverage = sums.accepted as f64 / epoch_labels.len().max(1) as f64;
            record(io.metrics, &mut st.history, step, "pseudo/coverage", coverage);
        }
        log::info!(
            "adapt epoch {}/{} loss {:.4}",
            st.epoch,
            cfg.adapt.epochs,
            sums.total / n
        );
        let due = cfg.adapt.checkpoint_every > 0 && st.epoch % cfg.adapt.checkpoint_every == 0;
        if let Some(p) = &state_path {
            if due || st.epoch == cfg.adapt.epochs {
                st.wall_clock_secs += clock.elapsed().as_secs_f64();
                clock = Instant::now();
                st.encoder_opt = enc_opt.state().clone();
                st.discriminator_opt = disc_opt.state().clone();
                save_json(p, &st)?;
            }
        }
    }
    io.metrics.flush();
    if let Some(dir) = io.dir {
        let fp = cfg.fingerprint();
        Checkpoint::new("target_encoder", cfg.seed, &fp, st.target_encoder.clone())
            .save(&dir.join(TARGET_ENCODER_FILE))?;
        Checkpoint::new("discriminator", cfg.seed, &fp, st.discriminator.clone())
            .save(&dir.join(DISCRIMINATOR_FILE))?;
    }
    Ok((st.target_encoder, st.pseudo_history))
}

/// Labels every target training sample with one pipeline at the given threshold.
pub fn pseudo_label_snapshot(
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    target: &[Sample],
    truth: &HeldOutLabels,
    p_pseudo: f64,
    generator: Generator,
) -> Result<PseudoLabelStats> {
    let mut labels = Vec::with_capacity(target.len());
    for (c, chunk) in target.chunks(crate::evaluation::EVAL_CHUNK).enumerate() {
        let x = stack_pixels(chunk);
        let (_, probs) = classifier.forward(&encoder.forward(&x)?)?;
        let offset = c * crate::evaluation::EVAL_CHUNK;
        let idx: Vec<usize> = (offset..offset + chunk.len()).collect();
        labels.extend(labels_from_probs(&probs, &idx, p_pseudo, generator));
    }
    pseudo_label_stats(&labels, truth)
}

/// Source models already trained in this process, keyed by the source-stage
/// fingerprint, so sweep arms sharing a source stage train it once.
#[derive(Default)]
pub struct SourceCache {
    models: HashMap<String, SourceModels>,
}

impl SourceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Trained pipelines of one run.
#[derive(Debug, Clone)]
pub struct RunModels {
    pub source: SourceModels,
    /// `None` for methods without an adaptation stage.
    pub target_encoder: Option<Encoder<f32>>,
}

impl RunModels {
    /// The encoder deployed on the target domain.
    pub fn deployed_encoder(&self) -> &Encoder<f32> {
        self.target_encoder.as_ref().unwrap_or(&self.source.encoder)
    }
}

/// Runs the stages the method needs, evaluates on the target test split,
/// and writes checkpoints plus `result.json` when `dir` is given. A failing
/// stage leaves a record flagged incomplete before the error is returned.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    dir: Option<&Path>,
    metrics: &mut MetricsSink,
    cache: &mut SourceCache,
) -> Result<(ResultRecord, RunModels)> {
    cfg.validate()?;
    let start = Instant::now();
    match run_stages(cfg, data, dir, metrics, cache) {
        Ok((models, history)) => {
            let record = build_record(cfg, data, &models, history, start.elapsed().as_secs_f64())?;
            metrics.record(0, "eval/clean_acc", record.clean_acc);
            metrics.record(0, "eval/adv_rob", record.adv_rob);
            metrics.flush();
            if let Some(d) = dir {
                record.save(&d.join(RESULT_FILE))?;
            }
            Ok((record, models))
        }
        Err(e) => {
            let mut record = empty_record(cfg);
            record.wall_clock_secs = start.elapsed().as_secs_f64();
            record.error = Some(e.to_string());
            if let Some(d) = dir {
                record.save(&d.join(RESULT_FILE))?;
            }
            Err(e)
        }
    }
}

fn empty_record(cfg: &ExperimentConfig) -> ResultRecord {
    ResultRecord {
        fingerprint: cfg.fingerprint(),
        name: cfg.name.clone(),
        tag: cfg.tag(),
        method: cfg.method,
        arm: cfg.arm,
        pair_id: cfg.data.pair_id.clone(),
        seed: cfg.seed,
        clean_acc: 0.0,
        adv_rob: 0.0,
        per_class_clean: Vec::new(),
        per_class_adv: Vec::new(),
        eval_samples: 0,
        eval_attack: cfg.attack.eval,
        source_model_pseudo: None,
        target_model_pseudo: None,
        pseudo_history: Vec::new(),
        wall_clock_secs: 0.0,
        complete: false,
        error: None,
    }
}

/// Evaluates trained pipelines into a complete record. Deterministic in its
/// inputs, so re-evaluating the same checkpoints reproduces the record.
pub fn build_record(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    models: &RunModels,
    pseudo_history: Vec<EpochPseudoStats>,
    wall_clock_secs: f64,
) -> Result<ResultRecord> {
    let eval = evaluate_run(cfg, data, models)?;
    let mut record = empty_record(cfg);
    record.clean_acc = eval.clean_acc;
    record.adv_rob = eval.adv_rob;
    record.per_class_clean = eval.per_class_clean;
    record.per_class_adv = eval.per_class_adv;
    record.eval_samples = eval.samples;
    record.pseudo_history = pseudo_history;
    record.wall_clock_secs = wall_clock_secs;
    if let Some(truth) = &data.target_train_truth {
        let snapshot = |enc: &Encoder<f32>, g| {
            pseudo_label_snapshot(
                enc,
                &models.source.classifier,
                &data.pair.target_set,
                truth,
                cfg.labeler.p_pseudo,
                g,
            )
        };
        record.source_model_pseudo = Some(snapshot(&models.source.encoder, Generator::SourceModel)?);
        if let Some(t) = &models.target_encoder {
            record.target_model_pseudo = Some(snapshot(t, Generator::TargetModel)?);
        }
    }
    record.complete = true;
    Ok(record)
}

/// Clean and robust accuracy of the deployed pipeline on the target test split.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    models: &RunModels,
) -> Result<crate::evaluation::Evaluation> {
    evaluate(
        models.deployed_encoder(),
        &models.source.classifier,
        &stack_pixels(&data.target_test),
        data.target_test_truth.for_evaluation(),
        &cfg.attack.eval,
        crate::rng::derive_seed(cfg.seed, "evaluate", 0),
    )
}

/// Source models for `cfg`, trained unless the cache already holds them.
pub fn source_stage(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    dir: Option<&Path>,
    metrics: &mut MetricsSink,
    cache: &mut SourceCache,
) -> Result<SourceModels> {
    let source_fp = cfg.source_fingerprint();
    if let Some(m) = cache.models.get(&source_fp) {
        log::info!("reusing source models {source_fp}");
        if let Some(d) = dir {
            save_source_models(d, m, cfg)?;
        }
        return Ok(m.clone());
    }
    let mut io = StageIo { dir, metrics };
    let m = train_source_robust(cfg, &data.pair.source_set, &mut io)?;
    cache.models.insert(source_fp, m.clone());
    Ok(m)
}

fn run_stages(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    dir: Option<&Path>,
    metrics: &mut MetricsSink,
    cache: &mut SourceCache,
) -> Result<(RunModels, Vec<EpochPseudoStats>)> {
    let source = source_stage(cfg, data, dir, metrics, cache)?;
    if !cfg.method.adapts() {
        let models = RunModels {
            source,
            target_encoder: None,
        };
        return Ok((models, Vec::new()));
    }
    let mut io = StageIo { dir, metrics };
    let truth = data.target_train_truth.as_ref();
    let (target_encoder, history) = adapt_target(cfg, &data.pair, &source, truth, &mut io, &mut |_| {})?;
    let models = RunModels {
        source,
        target_encoder: Some(target_encoder),
    };
    Ok((models, history))
}

/// Runs every `(arm, seed)` of the sweep section, one child directory each.
pub fn run_sweep(cfg: &ExperimentConfig, data: &ExperimentData, dir: Option<&Path>) -> Result<Vec<ResultRecord>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("configuration has no [sweep] section".into()))?;
    let seeds = sweep.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let mut cache = SourceCache::new();
    let mut records = Vec::new();
    for &seed in &seeds {
        for &arm in &sweep.arms {
            let child = cfg.for_arm(arm, seed);
            child.validate()?;
            let child_dir = dir.map(|d| d.join(format!("{}-seed{seed}", arm.slug())));
            if let Some(rec) = child_dir.as_deref().and_then(|d| finished_record(d, &child)) {
                log::info!("sweep arm {} seed {seed} already complete", arm.tag());
                let d = child_dir.as_deref().expect("finished record implies a directory");
                if let Ok(m) = load_source_models(d) {
                    cache.models.entry(child.source_fingerprint()).or_insert(m);
                }
                records.push(rec);
                continue;
            }
            let mut metrics = match &child_dir {
                Some(d) => {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                    std::fs::write(d.join("config.toml"), child.to_toml_string()?).map_err(|e| Error::io(d, e))?;
                    MetricsSink::to_file(&d.join("metrics.jsonl"))?
                }
                None => MetricsSink::in_memory(),
            };
            log::info!("sweep arm {} seed {seed}", arm.tag());
            let (rec, _) = run_experiment(&child, data, child_dir.as_deref(), &mut metrics, &mut cache)?;
            records.push(rec);
        }
    }
    Ok(records)
}

/// The complete record in `dir` when it was produced by `cfg`.
fn finished_record(dir: &Path, cfg: &ExperimentConfig) -> Option<ResultRecord> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return None;
    }
    ResultRecord::load(&path)
        .ok()
        .filter(|r| r.complete && r.fingerprint == cfg.fingerprint())
}
