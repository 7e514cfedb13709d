//! Training loop, validation and evaluation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{evaluate_texts, MetricReport};
use crate::nn::ModelState;
use crate::objectives::{irc_loss, irm_loss, momentum_update, rg_loss, total_loss, LossValue};
use crate::optim::AdamW;
use crate::params::Gradients;
use crate::pipeline::{forward_visual, generate, GraphSettings, Queues, Resources};
use crate::synth::{Corpus, Split};
use crate::vocab;

/// A corpus record prepared for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub report: String,
    /// Report token ids, without special tokens.
    pub tokens: Vec<usize>,
}

/// Scalar loss nodes of one sample.
pub struct SampleLoss {
    pub total: Var,
    pub rg: Var,
    pub irc: Var,
    pub irm: Var,
}

fn prefixed(prefix: usize, tokens: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(prefix);
    v.extend_from_slice(tokens);
    v
}

/// Full training objective for one sample. `negative` supplies a mismatched
/// report for the matching loss; without it only the positive pair counts.
pub fn sample_loss(
    t: &mut Tape,
    state: &ModelState,
    res: &Resources,
    settings: &GraphSettings,
    queues: &Queues,
    sample: &Sample,
    negative: Option<&[usize]>,
) -> Result<SampleLoss> {
    let model = &state.model;
    let vf = forward_visual(
        t,
        state,
        res,
        settings,
        queues,
        &[&sample.image],
        Some(&sample.id),
    )?;

    let lp = model.decode(t, &prefixed(vocab::DECODE, &sample.tokens), vf.enhanced)?;
    let mut targets = sample.tokens.clone();
    targets.push(vocab::EOS);
    let rg = rg_loss(t, lp, &targets)?;

    let f_t = model.encode_report(t, &sample.tokens)?;
    let rep_emb = model.report_embedding(t, f_t);
    let inv_tau = model.inverse_temperature(t);
    let irc = irc_loss(t, vf.image_emb, rep_emb, &queues.image, &queues.report, inv_tau)?;

    let fused = model.multimodal_encode(t, &prefixed(vocab::ENCODE, &sample.tokens), vf.enhanced)?;
    let logits = model.itm_logits(t, fused);
    let mut irm = irm_loss(t, logits, true)?;
    if let Some(neg) = negative {
        let fused = model.multimodal_encode(t, &prefixed(vocab::ENCODE, neg), vf.enhanced)?;
        let logits = model.itm_logits(t, fused);
        let l = irm_loss(t, logits, false)?;
        let both = t.add(irm, l);
        irm = t.scale(both, 0.5);
    }
    let a = t.add(rg, irc);
    let total = t.add(a, irm);
    Ok(SampleLoss { total, rg, irc, irm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: LossValue,
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub epoch: usize,
    pub kind: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<CheckpointLog>,
    pub best_epoch: Option<usize>,
    pub best_cider: Option<f64>,
}

impl RunLog {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }
}

/// Index of the first maximum; `None` for an empty or all-NaN list.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Predictions for one split plus their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub metrics: MetricReport,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub text: String,
    pub reference: String,
}

/// Model, optimizer, queues and data for one run.
pub struct Session {
    pub cfg: RunConfig,
    pub res: Resources,
    pub state: ModelState,
    pub opt: AdamW,
    pub queues: Queues,
    pub settings: GraphSettings,
    pub config_hash: String,
    pub samples: HashMap<Split, Vec<Sample>>,
    pub step: u64,
    pub epoch: usize,
    pub best_cider: Option<f64>,
}

impl Session {
    /// Validates the config, loads every input and initializes the model.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_inputs()?;
        let corpus = Corpus::load(&cfg.data.dir)?;
        let mut train: Vec<_> = corpus.split(Split::Train).collect();
        if let Some(limit) = cfg.train_limit {
            train.truncate(limit);
        }
        let reports = train.iter().map(|r| (r.id.clone(), r.report.clone())).collect();
        let res = Resources::load(cfg, reports)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = res.vocab.len();
        let state = ModelState::new(&model_cfg, cfg.seed)?;
        let opt = AdamW::new(&state.params, cfg.learning_rate, cfg.weight_decay);
        let queues = Queues::new(cfg.queue_capacity, model_cfg.proj_dim)?;
        let max_tokens = model_cfg.max_text_len - 1;
        let prepare = |r: &crate::synth::Record| {
            let mut tokens = res.vocab.encode(&r.report);
            if tokens.len() > max_tokens {
                log::warn!("report {} truncated to {max_tokens} tokens", r.id);
                tokens.truncate(max_tokens);
            }
            Sample {
                id: r.id.clone(),
                image: r.image.clone(),
                report: r.report.clone(),
                tokens,
            }
        };
        let mut samples = HashMap::new();
        samples.insert(Split::Train, train.into_iter().map(&prepare).collect());
        for split in [Split::Val, Split::Test] {
            samples.insert(split, corpus.split(split).map(&prepare).collect());
        }
        Ok(Session {
            config_hash: res.model_hash(cfg),
            cfg: cfg.clone(),
            res,
            state,
            opt,
            queues,
            settings: GraphSettings::from(cfg),
            samples,
            step: 0,
            epoch: 0,
            best_cider: None,
        })
    }

    /// A session whose state, optimizer and queues come from `path`.
    pub fn resume(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        let ck = Checkpoint::load(path)?;
        ck.check_hash(&s.config_hash)?;
        ck.apply_to(&mut s.state)?;
        ck.restore_optimizer(&mut s.opt)?;
        s.queues = Queues {
            image: ck.image_queue,
            report: ck.report_queue,
        };
        s.step = ck.step;
        s.epoch = ck.epoch;
        s.best_cider = ck.best_cider;
        Ok(s)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        self.samples.get(&split).map_or(&[], Vec::as_slice)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// One optimizer step over the given training indices.
    pub fn train_step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<LossValue> {
        let train = &self.samples[&Split::Train];
        let mut grads = Gradients::zeros_like(&self.state.params);
        let mut losses = Vec::with_capacity(batch.len());
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let sample = &train[i];
            let others: Vec<usize> = batch
                .iter()
                .copied()
                .filter(|&j| train[j].tokens != sample.tokens)
                .collect();
            let negative = others.choose(rng).map(|&j| train[j].tokens.as_slice());
            let mut t = Tape::new(&self.state.params);
            let l = sample_loss(
                &mut t,
                &self.state,
                &self.res,
                &self.settings,
                &self.queues,
                sample,
                negative,
            )?;
            let v = |x: Var| t.value(x).scalar_value();
            let value = total_loss(v(l.rg), v(l.irc), v(l.irm)).inspect_err(|_e| {
                log::error!(
                    "non-finite loss at step {} on sample {}",
                    self.step + 1,
                    sample.id
                );
            })?;
            t.backward_into(l.total, scale, &mut grads);
            losses.push(value);
        }
        self.opt.step(&mut self.state.params, &grads)?;
        let ids = self.state.momentum_ids();
        momentum_update(
            &self.state.params,
            &mut self.state.momentum,
            &ids,
            self.cfg.momentum,
        )?;
        self.enqueue(batch)?;
        self.step += 1;
        Ok(LossValue::mean(&losses))
    }

    /// Momentum-encoder embeddings of the batch go into the queues.
    fn enqueue(&mut self, batch: &[usize]) -> Result<()> {
        let train = &self.samples[&Split::Train];
        let model = &self.state.model;
        let mut images = Vec::with_capacity(batch.len());
        let mut reports = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &train[i];
            let mut t = Tape::new(&self.state.momentum);
            let v = model.encode_image(&mut t, &s.image)?;
            let ie = model.image_embedding(&mut t, v);
            let r = model.encode_report(&mut t, &s.tokens)?;
            let re = model.report_embedding(&mut t, r);
            images.push((t.value(ie).data().to_vec(), s.id.clone()));
            reports.push((t.value(re).data().to_vec(), s.id.clone()));
        }
        self.queues.image.enqueue(images)?;
        self.queues.report.enqueue(reports)
    }

    /// One pass over the training split in a seeded order.
    pub fn train_epoch(&mut self, log: &mut RunLog) -> Result<LossValue> {
        let n = self.split(Split::Train).len();
        if n == 0 {
            return Err(Error::Empty("training split"));
        }
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(self.cfg.batch_size) {
            let loss = self.train_step(batch, &mut rng)?;
            log.steps.push(StepLog {
                step: self.step,
                epoch: self.epoch + 1,
                loss,
            });
            losses.push(loss);
        }
        self.epoch += 1;
        Ok(LossValue::mean(&losses))
    }

    pub fn generate_for(&self, sample: &Sample) -> Result<String> {
        let g = generate(
            &self.state,
            &self.res,
            &self.settings,
            &self.queues,
            &[&sample.image],
            self.cfg.max_generation_len,
            self.cfg.beam_width,
        )?;
        Ok(g.text)
    }

    /// Generates for every record of `split` and scores the outputs.
    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        let records = self.split(split);
        if records.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let mut predictions = Vec::with_capacity(records.len());
        for s in records {
            predictions.push(Prediction {
                id: s.id.clone(),
                text: self.generate_for(s)?,
                reference: s.report.clone(),
            });
        }
        let cands: Vec<&str> = predictions.iter().map(|p| p.text.as_str()).collect();
        let refs: Vec<&str> = predictions.iter().map(|p| p.reference.as_str()).collect();
        let metrics = evaluate_texts(&cands, &refs, &self.res.labels, self.cfg.bleu_smoothing)?;
        Ok(Evaluation {
            split,
            metrics,
            predictions,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config_hash,
            self.step,
            self.epoch,
            self.best_cider,
            &self.state,
            &self.opt,
            &self.queues.image,
            &self.queues.report,
        )
    }

    /// Trains for the remaining epochs, validating and checkpointing into
    /// the output directory. Metrics go to `metrics.jsonl` there.
    pub fn run(&mut self) -> Result<RunLog> {
        let out = self.cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let metrics_path = out.join("metrics.jsonl");
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut sink = BufWriter::new(file);
        let mut write_line = |v: serde_json::Value| -> Result<()> {
            writeln!(sink, "{v}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io(&metrics_path, e))
        };
        let mut log = RunLog {
            best_cider: self.best_cider,
            ..RunLog::default()
        };
        let has_val = !self.split(Split::Val).is_empty();
        while self.epoch < self.cfg.epochs {
            let first_step = log.steps.len();
            let train_loss = self.train_epoch(&mut log)?;
            for s in &log.steps[first_step..] {
                write_line(
                    serde_json::json!({"type": "step", "step": s.step, "epoch": s.epoch, "loss": s.loss}),
                )?;
            }
            let epoch = self.epoch;
            let due = epoch.is_multiple_of(self.cfg.validate_every) || epoch == self.cfg.epochs;
            let validation = if has_val && due {
                Some(self.evaluate(Split::Val)?.metrics)
            } else {
                None
            };
            if let Some(m) = &validation {
                if self.best_cider.is_none_or(|b| m.cider > b) {
                    self.best_cider = Some(m.cider);
                    log.best_epoch = Some(epoch);
                    log.best_cider = Some(m.cider);
                    let path = out.join("best.ckpt");
                    self.checkpoint().save(&path)?;
                    log.checkpoints.push(CheckpointLog {
                        epoch,
                        kind: "best".into(),
                        path,
                    });
                }
            }
            let path = out.join("last.ckpt");
            self.checkpoint().save(&path)?;
            log.checkpoints.push(CheckpointLog {
                epoch,
                kind: "last".into(),
                path,
            });
            write_line(serde_json::json!({
                "type": "epoch",
                "epoch": epoch,
                "train_loss": train_loss,
                "validation": validation,
            }))?;
            log::info!(
                "epoch {epoch}: loss {:.4}{}",
                train_loss.total,
                validation
                    .as_ref()
                    .map(|m| format!(", val CIDEr {:.4}, CE F1 {:.4}", m.cider, m.ce.micro.f1))
                    .unwrap_or_default()
            );
            log.epochs.push(EpochLog {
                epoch,
                train_loss,
                validation,
            });
        }
        if !has_val {
            // Without validation data the last weights double as the best.
            let path = out.join("best.ckpt");
            self.checkpoint().save(&path)?;
            log.checkpoints.push(CheckpointLog {
                epoch: self.epoch,
                kind: "best".into(),
                path,
            });
        }
        Ok(log)
    }
}

/// Trains from scratch with `cfg`.
pub fn train(cfg: &RunConfig) -> Result<RunLog> {
    Session::new(cfg)?.run()
}

/// Loads `checkpoint`, evaluates `split` and writes `predictions_<split>.jsonl`
/// and `metrics_<split>.json` into the output directory.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Evaluation> {
    let session = Session::resume(cfg, checkpoint)?;
    let ev = session.evaluate(split)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = serde_json::to_value(split)?;
    let name = name.as_str().unwrap_or("split");
    let mut lines = String::new();
    for p in &ev.predictions {
        lines.push_str(&serde_json::to_string(
            &serde_json::json!({"id": p.id, "text": p.text}),
        )?);
        lines.push('\n');
    }
    let path = out.join(format!("predictions_{name}.jsonl"));
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let path = out.join(format!("metrics_{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&ev.metrics)?).map_err(|e| Error::io(&path, e))?;
    Ok(ev)
}
