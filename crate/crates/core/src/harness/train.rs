//! Pre-training and the three-phase compression retrofit.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baselines::{fixed_pool_alphas, gqa_convert_model};
use crate::dmc::training::{anneal_factor, logistic_noise, GumbelParams, RampMode};
use crate::dmc::DmcVariant;
use crate::model::{AttentionMode, DecisionMode, DmcForward, Model, ParamVars};
use crate::numerics::{Tape, Var};

use super::checkpoint::{round_weights, AttentionSpec, Checkpoint, TrainingState};
use super::config::{BaselineKind, ExperimentConfig};
use super::corpus::Corpus;
use super::eval::{eval_loss, measure_cr, train_path_loss, uncompressed_mode};
use super::metrics::{MetricsLog, Phase, Record, StepRecord};
use super::optim::AdamW;
use super::{stream_rng, HarnessError, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLosses {
    pub lm: f64,
    pub cr: f64,
    /// Only nonzero for the head-consistency variant.
    pub head_consistency: f64,
    pub total: f64,
}

/// Attention used for one training step.
#[derive(Debug, Clone, Copy)]
pub enum StepMode<'a> {
    Vanilla {
        dim0_factor: f64,
        exclude_dim0: bool,
    },
    /// Relaxed learned decisions with fresh logistic noise per sequence,
    /// drawn from the stream `(seed, noise_step)`.
    Learned {
        variant: DmcVariant,
        gumbel: GumbelParams,
        window: usize,
        target_cr: f64,
        seed: u64,
        noise_step: u64,
    },
    /// Fixed decisions, `[layer][heads * n]`.
    Scripted {
        variant: DmcVariant,
        window: usize,
        alphas: &'a [Vec<f64>],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: TrainLosses,
    /// Compression implied by the step's decisions; 1 without compression.
    pub achieved_cr: f64,
    pub per_layer_cr: Vec<f64>,
    pub grad_norm: f64,
}

fn mean(tape: &mut Tape, vars: &[Var]) -> Result<Var, HarnessError> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Losses and gradients for `batch` (sequences of `n + 1` tokens) without
/// updating anything. Gradients follow [`ModelWeights::named`] order.
///
/// [`ModelWeights::named`]: crate::model::ModelWeights::named
pub fn batch_gradients(
    model: &Model,
    batch: &[Vec<usize>],
    mode: &StepMode<'_>,
) -> Result<(StepOutcome, Vec<Option<Vec<f64>>>), HarnessError> {
    if batch.is_empty() {
        return Err(HarnessError::Data("empty batch".into()));
    }
    let cfg = &model.config;
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, &model.weights, true);
    let mut lms = Vec::with_capacity(batch.len());
    let mut alphas = Vec::new();
    let mut noise_rng = match *mode {
        StepMode::Learned { seed, noise_step, .. } => Some(stream_rng(seed, Stream::RetrofitNoise, noise_step)),
        _ => None,
    };
    for seq in batch {
        let n = seq.len() - 1;
        let noise = noise_rng
            .as_mut()
            .map(|rng| logistic_noise(rng, cfg.n_layers * cfg.n_heads * n));
        let attention = match *mode {
            StepMode::Vanilla {
                dim0_factor,
                exclude_dim0,
            } => AttentionMode::Vanilla {
                dim0_factor,
                exclude_dim0,
            },
            StepMode::Learned {
                variant,
                gumbel,
                window,
                ..
            } => AttentionMode::Dmc(DmcForward {
                gumbel,
                window,
                variant,
                decisions: DecisionMode::Relaxed { noise: noise.as_deref() },
            }),
            StepMode::Scripted { variant, window, alphas } => AttentionMode::Dmc(DmcForward {
                gumbel: GumbelParams::default(),
                window,
                variant,
                decisions: DecisionMode::Scripted(alphas),
            }),
        };
        let out = model.forward_tape(&mut tape, &params, &seq[..n], &attention)?;
        lms.push(tape.cross_entropy(out.logits, &seq[1..])?);
        alphas.extend(out.alphas);
    }
    let lm = mean(&mut tape, &lms)?;
    let mut losses = TrainLosses {
        lm: tape.value(lm).item(),
        ..TrainLosses::default()
    };
    let mut total = lm;
    if let StepMode::Learned { variant, target_cr, .. } = *mode {
        let cr = tape.cr_loss(&alphas, target_cr);
        losses.cr = tape.value(cr).item();
        total = tape.add(total, cr)?;
        if variant == DmcVariant::DmcC {
            let hc = tape.head_consistency(&alphas)?;
            losses.head_consistency = tape.value(hc).item();
            total = tape.add(total, hc)?;
        }
    }
    losses.total = tape.value(total).item();
    if !losses.total.is_finite() {
        return Err(HarnessError::Numerical(format!("training loss is {} ({losses:?})", losses.total)));
    }
    let (achieved_cr, per_layer_cr) = if alphas.is_empty() {
        (1.0, vec![1.0; cfg.n_layers])
    } else {
        let mut kept = vec![0.0; cfg.n_layers];
        let mut count = vec![0usize; cfg.n_layers];
        for (i, a) in alphas.iter().enumerate() {
            let data = tape.value(*a).data();
            kept[i % cfg.n_layers] += data.iter().map(|x| 1.0 - x).sum::<f64>();
            count[i % cfg.n_layers] += data.len();
        }
        let global = count.iter().sum::<usize>() as f64 / kept.iter().sum::<f64>();
        (global, count.iter().zip(&kept).map(|(c, k)| *c as f64 / k).collect())
    };
    tape.backward(total);
    let grads = params.take_grads(&mut tape);
    Ok((
        StepOutcome {
            losses,
            achieved_cr,
            per_layer_cr,
            grad_norm: 0.0,
        },
        grads,
    ))
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[Vec<usize>],
    mode: &StepMode<'_>,
    lr: f64,
) -> Result<StepOutcome, HarnessError> {
    let (mut outcome, grads) = batch_gradients(model, batch, mode)?;
    outcome.grad_norm = opt.step(&mut model.weights, &grads, lr)?;
    Ok(outcome)
}

/// Warmup then cosine decay to 10% of the peak.
pub fn pretrain_lr_mult(step: usize, steps: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn step_record(phase: Phase, step: usize, o: &StepOutcome, target_cr: f64, lr: f64, lr_mult: f64) -> Record {
    Record::Step(StepRecord {
        phase,
        step,
        lm: o.losses.lm,
        cr_loss: o.losses.cr,
        head_consistency: o.losses.head_consistency,
        total: o.losses.total,
        target_cr,
        achieved_cr: o.achieved_cr,
        per_layer_cr: o.per_layer_cr.clone(),
        lr,
        lr_mult,
        grad_norm: o.grad_norm,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub val_loss: f64,
    pub path: Option<PathBuf>,
}

/// Trains the uncompressed model from scratch. Weights are kept at f32
/// precision at both ends so that the saved checkpoint is the evaluated
/// model.
pub fn pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    metrics: &mut MetricsLog,
) -> Result<PretrainOutcome, HarnessError> {
    cfg.validate()?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    round_weights(&mut model);
    let val = corpus.val_sequences(cfg.data.eval_sequences, cfg.data.seq_len)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.weights);
    let p = cfg.pretrain;
    let mode = StepMode::Vanilla {
        dim0_factor: 1.0,
        exclude_dim0: false,
    };
    for step in 0..p.steps {
        let mut rng = stream_rng(cfg.seed, Stream::PretrainData, step as u64);
        let batch = corpus.sample_batch(&mut rng, cfg.data.batch_size, cfg.data.seq_len)?;
        let mult = pretrain_lr_mult(step, p.steps, p.warmup_steps);
        let lr = cfg.optimizer.lr * mult;
        let o = train_step(&mut model, &mut opt, &batch, &mode, lr)
            .map_err(|e| diagnose(e, Phase::Pretrain, step))?;
        metrics.push(step_record(Phase::Pretrain, step, &o, 1.0, lr, mult))?;
        if p.eval_every > 0 && (step + 1) % p.eval_every == 0 && step + 1 < p.steps {
            let loss = eval_loss(&model, &val, &AttentionMode::STANDARD)?;
            info!("pretrain step {}: train {:.4} val {loss:.4}", step + 1, o.losses.lm);
            metrics.push(Record::Eval {
                phase: Phase::Pretrain,
                step: step + 1,
                val_loss: loss,
                val_ppl: loss.exp(),
            })?;
        }
    }
    round_weights(&mut model);
    let val_loss = eval_loss(&model, &val, &AttentionMode::STANDARD)?;
    metrics.push(Record::Eval {
        phase: Phase::Pretrain,
        step: p.steps,
        val_loss,
        val_ppl: val_loss.exp(),
    })?;
    let checkpoint = Checkpoint::new(
        model,
        AttentionSpec::Standard,
        TrainingState {
            phase: "pretrain".into(),
            step: p.steps,
            seed: cfg.seed,
            target_cr: None,
            achieved_cr: None,
            val_loss: Some(val_loss),
        },
    );
    let path = match out_dir {
        Some(dir) => {
            let path = dir.join("pretrain.ckpt");
            checkpoint.save(&path)?;
            metrics.push(Record::Checkpoint {
                phase: Phase::Pretrain,
                step: p.steps,
                file: "pretrain.ckpt".into(),
                target_cr: 1.0,
                achieved_cr: 1.0,
                val_loss,
            })?;
            Some(path)
        }
        None => None,
    };
    metrics.flush()?;
    Ok(PretrainOutcome {
        checkpoint,
        val_loss,
        path,
    })
}

fn diagnose(e: HarnessError, phase: Phase, step: usize) -> HarnessError {
    match e {
        HarnessError::Numerical(m) => HarnessError::Numerical(format!("{phase:?} step {step}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct EmittedCheckpoint {
    pub label: String,
    pub checkpoint: Checkpoint,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RetrofitOutcome {
    /// In emission order; the last one is the end of the solidify phase.
    pub checkpoints: Vec<EmittedCheckpoint>,
    /// Number of spike warnings raised.
    pub spike_warnings: usize,
}

impl RetrofitOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints.last().expect("retrofit emits a final checkpoint").checkpoint
    }
}

/// How the retrofitted model attends, given the experiment settings.
pub fn retrofit_attention(cfg: &ExperimentConfig) -> AttentionSpec {
    let compressed = |variant, pool_width| AttentionSpec::Compressed {
        variant,
        decision_offset: cfg.dmc.gumbel.c,
        window: cfg.dmc.effective_window(cfg.model.max_seq),
        pool_width,
    };
    match cfg.baseline.kind {
        BaselineKind::None => compressed(cfg.dmc.variant, None),
        BaselineKind::FixedPool => compressed(DmcVariant::UniformOmega, Some(cfg.baseline.pool_width)),
        BaselineKind::Dim0Blind => AttentionSpec::Dim0Blind,
        BaselineKind::Gqa => AttentionSpec::Standard,
    }
}

struct Emitter<'a> {
    cfg: &'a ExperimentConfig,
    spec: AttentionSpec,
    val: Vec<Vec<usize>>,
    out_dir: Option<&'a Path>,
    emitted: Vec<EmittedCheckpoint>,
}

impl Emitter<'_> {
    fn emit(
        &mut self,
        model: &Model,
        label: String,
        phase: Phase,
        step: usize,
        target_cr: f64,
        metrics: &mut MetricsLog,
    ) -> Result<(), HarnessError> {
        let mut snapshot = model.clone();
        round_weights(&mut snapshot);
        let achieved = measure_cr(&snapshot, &self.spec, &self.val)?.global;
        let val_loss = if matches!(self.spec, AttentionSpec::Compressed { .. }) {
            train_path_loss(&snapshot, &self.spec, &self.val)?
        } else {
            eval_loss(&snapshot, &self.val, &uncompressed_mode(&self.spec))?
        };
        info!("checkpoint {label}: target cr {target_cr:.3}, achieved {achieved:.3}, val loss {val_loss:.4}");
        let checkpoint = Checkpoint::new(
            snapshot,
            self.spec,
            TrainingState {
                phase: format!("{phase:?}").to_lowercase(),
                step,
                seed: self.cfg.seed,
                target_cr: Some(target_cr),
                achieved_cr: Some(achieved),
                val_loss: Some(val_loss),
            },
        );
        let file = format!("retrofit-{label}.ckpt");
        let path = match self.out_dir {
            Some(dir) => {
                let path = dir.join(&file);
                checkpoint.save(&path)?;
                Some(path)
            }
            None => None,
        };
        metrics.push(Record::Checkpoint {
            phase,
            step,
            file,
            target_cr,
            achieved_cr: achieved,
            val_loss,
        })?;
        self.emitted.push(EmittedCheckpoint { label, checkpoint, path });
        Ok(())
    }
}

/// Runs the anneal, ramp and solidify phases from `base`. Checkpoints are
/// emitted whenever the ramp target crosses an integer ratio, at the end of
/// the ramp and at the end of solidification.
pub fn retrofit(
    base: &Checkpoint,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    metrics: &mut MetricsLog,
) -> Result<RetrofitOutcome, HarnessError> {
    cfg.validate()?;
    if base.manifest.model != cfg.model {
        return Err(HarnessError::Config(
            "base checkpoint's model settings differ from the experiment's [model] section".into(),
        ));
    }
    if base.manifest.attention != AttentionSpec::Standard {
        return Err(HarnessError::Config("retrofit starts from a pre-trained uncompressed checkpoint".into()));
    }
    let kind = cfg.baseline.kind;
    let mut model = base.model.clone();
    if kind == BaselineKind::Gqa {
        model = gqa_convert_model(&model, cfg.baseline.gqa_groups)?;
    }
    let seq_len = cfg.data.seq_len;
    let val = corpus.val_sequences(cfg.data.eval_sequences, seq_len)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.weights);
    let lr = cfg.retrofit.lr;
    let n_t = cfg.retrofit.anneal_steps;
    let sample = |stream, step: usize| {
        corpus.sample_batch(&mut stream_rng(cfg.seed, stream, step as u64), cfg.data.batch_size, seq_len)
    };

    for step in 0..n_t {
        let factor = if kind == BaselineKind::Gqa { 1.0 } else { anneal_factor(step, n_t)? };
        let mode = StepMode::Vanilla {
            dim0_factor: factor,
            exclude_dim0: false,
        };
        let batch = sample(Stream::AnnealData, step)?;
        let o = train_step(&mut model, &mut opt, &batch, &mode, lr).map_err(|e| diagnose(e, Phase::Anneal, step))?;
        metrics.push(step_record(Phase::Anneal, step, &o, 1.0, lr, 1.0))?;
    }

    let spec = retrofit_attention(cfg);
    if matches!(spec, AttentionSpec::Compressed { .. }) {
        model.config.dmc_enabled = true;
    }
    let schedule = cfg.dmc.schedule;
    let pooled = match kind {
        BaselineKind::FixedPool => Some(fixed_pool_alphas(
            cfg.model.n_layers,
            cfg.model.n_heads,
            seq_len,
            cfg.baseline.pool_width,
        )),
        _ => None,
    };
    let mut emitter = Emitter {
        cfg,
        spec,
        val,
        out_dir,
        emitted: Vec::new(),
    };
    let total = schedule.total_steps();
    let mut next_integer = schedule.start_cr.floor() as usize + 1;
    let mut reference_ppl = None;
    let mut spike_warnings = 0;
    for step in 0..total {
        let state = schedule.at(step);
        let phase = if state.solidifying { Phase::Solidify } else { Phase::Ramp };
        let mode = match (kind, &pooled) {
            (BaselineKind::None, _) => StepMode::Learned {
                variant: cfg.dmc.variant,
                gumbel: cfg.dmc.gumbel,
                window: cfg.dmc.effective_window(cfg.model.max_seq),
                target_cr: state.target_cr,
                seed: cfg.seed,
                noise_step: step as u64,
            },
            (BaselineKind::FixedPool, Some(alphas)) => StepMode::Scripted {
                variant: DmcVariant::UniformOmega,
                window: cfg.dmc.effective_window(cfg.model.max_seq),
                alphas,
            },
            (BaselineKind::Gqa, _) => StepMode::Vanilla {
                dim0_factor: 1.0,
                exclude_dim0: false,
            },
            _ => StepMode::Vanilla {
                dim0_factor: 1.0,
                exclude_dim0: true,
            },
        };
        let target = match kind {
            BaselineKind::None => state.target_cr,
            BaselineKind::FixedPool => cfg.baseline.pool_width as f64,
            _ => 1.0,
        };
        let batch = sample(Stream::RetrofitData, step)?;
        let step_lr = lr * state.lr_mult;
        let o = train_step(&mut model, &mut opt, &batch, &mode, step_lr).map_err(|e| diagnose(e, phase, step))?;
        metrics.push(step_record(phase, step, &o, target, step_lr, state.lr_mult))?;

        let ppl = o.losses.lm.exp();
        let reference = *reference_ppl.get_or_insert(ppl);
        if ppl > cfg.retrofit.spike_guard * reference {
            if spike_warnings == 0 {
                let message = format!(
                    "training perplexity {ppl:.3} exceeds {}x the phase-start value {reference:.3}",
                    cfg.retrofit.spike_guard
                );
                warn!("step {step}: {message}");
                metrics.push(Record::Warning { phase, step, message })?;
            }
            spike_warnings += 1;
        }

        // Emission follows the schedule position after this step. Crossings
        // are only marked on a ramp; an immediate target is crossed before
        // any adaptation.
        let done = step + 1;
        let reached = schedule.at(done).target_cr;
        let mut labels = Vec::new();
        if kind == BaselineKind::None && schedule.mode == RampMode::LinearRamp && done <= schedule.ramp_steps {
            while next_integer as f64 <= reached {
                labels.push(format!("cr{next_integer}"));
                next_integer += 1;
            }
        }
        if done == schedule.ramp_steps {
            labels.push("ramp-end".into());
        }
        if done == total {
            labels.push("final".into());
        }
        if !labels.is_empty() {
            let target = if kind == BaselineKind::None { reached } else { target };
            emitter.emit(&model, labels.join("-"), phase, done, target, metrics)?;
        }
    }
    if total == 0 {
        emitter.emit(&model, "final".into(), Phase::Anneal, n_t, 1.0, metrics)?;
    }
    metrics.flush()?;
    Ok(RetrofitOutcome {
        checkpoints: emitter.emitted,
        spike_warnings,
    })
}
