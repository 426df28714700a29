//! Pipeline assembly and the three training stages.
//!
//! Stage 1 (mllm-align) trains the backbone plus query bank on the combined
//! next-token/alignment objective. Stage 2 (dit-cpt) freezes the backbone
//! and trains connector plus diffusion head under the flow objective with
//! conditioning dropout. The SFT stage reruns the stage-2 loop briefly on a
//! curated subset. All three are deterministic functions of
//! (config, seed, dataset).

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::alignment::{combined_mllm_loss, cosine_alignment_loss, LossWeights};
use crate::codec::{Connector, ConnectorInit, LatentCodec};
use crate::data::{Block, GenConfig, ImageBlock, InterleavedSequence, TextBlock, CLASS_TOKEN_BASE, TOK_SHOW};
use crate::diffusion::{
    euler_sample, flow_loss, select_targets, ConditionalSampler, DiffusionHead,
    DiffusionHeadConfig, DropoutPolicy, FrameConditioning, MaskOptions, PathwayDrop,
    SequenceConditioning,
};
use crate::error::{Error, Result};
use crate::mllm::{next_token_loss, MllmConfig, MllmModel, QueryBank};
use crate::params::ParamSet;
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{Adam, AdamConfig, Checkpoint, Ema, Stage, TrainConfig};
use crate::vision::{pool_grid, TargetGrid, VisionStub};

const SALT_ORDER: u64 = 1;
const SALT_MIX: u64 = 2;
const SALT_FLOW: u64 = 3;
const SALT_DROP: u64 = 4;
const SALT_EVAL: u64 = 5;
const SALT_SAMPLE: u64 = 6;

fn stream(salt: u64, a: u64, b: u64) -> u64 {
    (salt << 56) ^ (a << 28) ^ b
}

/// Every model the pipeline owns, built deterministically from one config.
pub struct PipelineState {
    pub cfg: TrainConfig,
    pub mllm: MllmModel,
    pub queries: QueryBank,
    pub connector: Connector,
    pub head: DiffusionHead,
    pub codec: LatentCodec,
    pub stub: VisionStub,
}

impl PipelineState {
    pub fn build(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mllm_cfg = MllmConfig {
            vocab: cfg.vocab,
            dim: cfg.mllm_dim,
            n_layers: cfg.mllm_layers,
            n_heads: cfg.mllm_heads,
            context: cfg.context,
            visual_dim: cfg.visual_dim,
            hidden_state_taps: cfg.hidden_state_taps.clone(),
            bidirectional_queries: cfg.bidirectional_queries,
            mlp_mult: 4,
        };
        let mllm = MllmModel::new(mllm_cfg, cfg.seed)?;
        let queries = QueryBank::new(cfg.n_queries, cfg.mllm_dim, cfg.seed)?;
        let connector = Connector::new(
            cfg.visual_dim,
            cfg.connector_width,
            cfg.dit_width,
            cfg.connector_depth,
            cfg.seed,
            ConnectorInit::Seeded,
        )?;
        let codec = LatentCodec::new_orthonormal(cfg.codec_patch, cfg.seed);
        let head_cfg = DiffusionHeadConfig {
            width: cfg.dit_width,
            layers: cfg.dit_layers,
            heads: cfg.dit_heads,
            latent_dim: cfg.codec_patch * cfg.codec_patch,
            text_dim: cfg.mllm_dim,
            max_frames: cfg.max_frames,
            img_tokens: codec.tokens_per_image(cfg.image_size),
            vl_tokens: cfg.n_queries,
            time_feats: cfg.time_feats,
            mlp_mult: 4,
            mask_options: MaskOptions {
                cond_attends_history: cfg.cond_attends_history,
            },
        };
        let head = DiffusionHead::new(head_cfg, cfg.seed)?;
        let stub = VisionStub::new(cfg.vision_patch, cfg.visual_dim, cfg.seed);
        Ok(Self {
            cfg,
            mllm,
            queries,
            connector,
            head,
            codec,
            stub,
        })
    }

    /// Backbone-side names: mllm.* and query.*.
    pub fn backbone_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.extend(self.mllm.params());
        set.extend(self.queries.params());
        set
    }

    /// Generator-side names: conn.* and dit.*.
    pub fn head_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.extend(self.connector.params());
        set.extend(self.head.params());
        set
    }

    pub fn all_params(&self) -> ParamSet {
        let mut set = self.backbone_params();
        set.extend(&self.head_params());
        set
    }

    pub fn backbone_hash(&self) -> String {
        self.backbone_params().state_hash()
    }

    /// Distillation target for one image.
    pub fn target_grid(&self, image: &ImageBlock) -> Result<TargetGrid> {
        let feats = self.stub.encode_patches(&image.pixels)?;
        pool_grid(&feats, self.cfg.grid_k)
    }
}

/// Frozen-backbone conditioning bundle for one sequence: per-frame text
/// states and visual latents from an inference pass, plus codec latents.
pub fn conditioning_for(
    state: &PipelineState,
    seq: &InterleavedSequence,
) -> Result<SequenceConditioning> {
    let mut tape = Tape::inference();
    let out = state.mllm.forward(&mut tape, seq, &state.queries)?;

    // Group text blocks by the image that follows them.
    let mut frames: Vec<FrameConditioning> = Vec::new();
    let mut image_latents = Vec::new();
    let mut classes = Vec::new();
    let mut pending_text: Vec<Tensor> = Vec::new();
    let mut text_idx = 0usize;
    let mut frame_idx = 0usize;
    for block in &seq.blocks {
        match block {
            Block::Text(_) => {
                pending_text.push(tape.tensor(out.text_embeddings[text_idx]));
                text_idx += 1;
            }
            Block::Image(img) => {
                if pending_text.is_empty() {
                    return Err(Error::Contract("image frame without text".into()));
                }
                let text_emb = concat_tensors(&pending_text)?;
                pending_text.clear();
                frames.push(FrameConditioning {
                    text_emb,
                    visual_latents: tape.tensor(out.visual_latents[frame_idx]),
                });
                image_latents.push(state.codec.encode(&img.pixels)?);
                classes.push(img.class_id);
                frame_idx += 1;
            }
        }
    }
    Ok(SequenceConditioning {
        frames,
        image_latents,
        classes,
    })
}

fn concat_tensors(parts: &[Tensor]) -> Result<Tensor> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let cols = parts[0].cols();
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![rows, cols], data)
}

/// Run-control knobs shared by the stage runners. `halt_at` stops the loop
/// early without touching the config (an interrupted run); resuming from
/// the resulting checkpoint continues toward the configured step count.
#[derive(Default)]
pub struct RunControl<'a> {
    pub resume: Option<&'a Checkpoint>,
    pub divergence_dir: Option<&'a Path>,
    pub halt_at: Option<u64>,
}

/// One training-log line: step, stage, loss terms, gradient norm, wall time.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    pub losses: Vec<(String, f64)>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!("step={} stage={}", self.step, self.stage);
        for (name, v) in &self.losses {
            line.push_str(&format!(" {name}={v:.6}"));
        }
        line.push_str(&format!(
            " grad_norm={:.6} wall_ms={:.3}",
            self.grad_norm, self.wall_ms
        ));
        line
    }
}

/// Everything a finished stage hands back.
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// Mean total loss over the final 10% of steps.
    pub final_loss: f64,
    /// Held-out mean alignment loss (stage 1).
    pub heldout_l_vis: Option<f64>,
    /// Held-out mean flow loss under forcing targets (stages 2/3).
    pub heldout_flow: Option<f64>,
    pub supervised_tokens: u64,
    pub total_image_tokens: u64,
    pub log: Vec<LogRecord>,
}

/// Deterministic 80/20 split.
pub fn split_dataset(dataset: &[InterleavedSequence]) -> (&[InterleavedSequence], &[InterleavedSequence]) {
    let cut = (dataset.len() * 4) / 5;
    let cut = cut.max(1).min(dataset.len());
    dataset.split_at(cut)
}

struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    cached_epoch: u64,
    perm: Vec<usize>,
}

impl BatchSchedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            seed,
            cached_epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    fn items(&mut self, step: u64) -> Vec<usize> {
        (0..self.batch)
            .map(|j| {
                let g = step * self.batch as u64 + j as u64;
                let epoch = g / self.n as u64;
                if epoch != self.cached_epoch {
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    DetRng::derive(self.seed, stream(SALT_ORDER, epoch, 0)).shuffle(&mut perm);
                    self.perm = perm;
                    self.cached_epoch = epoch;
                }
                self.perm[(g % self.n as u64) as usize]
            })
            .collect()
    }
}

fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::Contract(msg) if msg.contains("non-finite"))
}

fn divergence_abort(
    step: u64,
    snapshot: Vec<(String, Tensor)>,
    digest: [u8; 32],
    dir: Option<&Path>,
) -> Error {
    let ckpt = Checkpoint::new(digest, step, snapshot, Vec::new(), None);
    let path = match dir {
        Some(d) => {
            let p = d.join("diverged_last_good.mmck");
            if ckpt.save(&p).is_ok() {
                p
            } else {
                PathBuf::from("<unsaved>")
            }
        }
        None => PathBuf::from("<unsaved>"),
    };
    Error::Diverged {
        step,
        checkpoint: path,
    }
}

/// Stage 1: optimize the combined objective over backbone and query bank.
/// With `freeze_backbone` only the query bank and the visual projection
/// train, which is the frozen-interface baseline the full fine-tune is
/// compared against.
pub fn train_stage1(
    state: &mut PipelineState,
    dataset: &[InterleavedSequence],
    control: RunControl,
) -> Result<StageOutcome> {
    let cfg = state.cfg.clone();
    if cfg.stage != Stage::MllmAlign {
        return Err(Error::Config(format!(
            "stage-1 runner called with stage {}",
            cfg.stage
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let (train, heldout) = split_dataset(dataset);
    let weights = LossWeights {
        lambda_text: cfg.lambda_text,
        lambda_align: cfg.lambda_align,
    };
    weights.validate()?;

    // Precompute distillation targets once; images are immutable.
    let grids: Vec<Vec<TargetGrid>> = dataset
        .iter()
        .map(|seq| {
            seq.images()
                .map(|img| state.target_grid(img))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_grids, heldout_grids) = grids.split_at(train.len());

    state.mllm.unfreeze();
    state.queries.params().set_requires_grad(true);
    if cfg.freeze_backbone {
        // Frozen interface: queries and the visual projection only.
        for (name, h) in state.mllm.params().iter() {
            h.borrow_mut().set_requires_grad(name == "mllm.vproj");
        }
    }
    let trainable: Vec<_> = {
        let mut set = ParamSet::new();
        set.extend(state.mllm.params());
        set.extend(state.queries.params());
        set.trainable()
    };
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &trainable,
    );
    let mut ema = cfg.ema_decay.map(|d| Ema::new(d, &trainable));

    let all = state.all_params();
    let digest = cfg.digest();
    let mut start_step = 0u64;
    if let Some(ck) = control.resume {
        ck.ensure_digest(&digest)?;
        all.load(&ck.tensors)?;
        opt.load_state(&trainable, &ck.opt_moments, ck.step)?;
        if let (Some(e), Some(saved)) = (ema.as_mut(), ck.ema.as_ref()) {
            e.restore(saved)?;
        }
        start_step = ck.step;
    }

    let end_step = control.halt_at.map(|h| h.min(cfg.steps)).unwrap_or(cfg.steps);
    let mut schedule = BatchSchedule::new(train.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::new();
    let mut tail_losses = Vec::new();
    let tail_from = end_step.saturating_sub(end_step.div_ceil(10));
    let mut snapshot = all.snapshot();

    for step in start_step..end_step {
        let clock = Instant::now();
        let items = schedule.items(step);
        let step_result = (|| -> Result<(f64, f64, f64, f64)> {
            let mut tape = Tape::new();
            let mut item_losses = Vec::new();
            let mut llm_sum = 0.0;
            let mut vis_sum = 0.0;
            for (j, &idx) in items.iter().enumerate() {
                let seq = &train[idx];
                let out = state.mllm.forward(&mut tape, seq, &state.queries)?;
                let (targets, wts) = out.plan.lm_supervision();
                let l_llm = next_token_loss(&mut tape, out.logits, &targets, &wts)?;
                let mut vis_terms = Vec::new();
                for (f, grid) in train_grids[idx].iter().enumerate() {
                    vis_terms.push(cosine_alignment_loss(&mut tape, out.visual_latents[f], grid)?);
                }
                let mut l_vis = vis_terms[0];
                for &t in &vis_terms[1..] {
                    l_vis = tape.add(l_vis, t)?;
                }
                l_vis = tape.scale(l_vis, 1.0 / vis_terms.len() as f64)?;
                llm_sum += tape.scalar(l_llm)?;
                vis_sum += tape.scalar(l_vis)?;

                // Understanding/generation mix: understanding items carry
                // only the text objective.
                let mut mix_rng =
                    DetRng::derive(cfg.seed, stream(SALT_MIX, step, j as u64));
                let understanding = mix_rng.uniform() < cfg.understanding_fraction;
                let item_loss = if understanding {
                    tape.scale(l_llm, cfg.lambda_text)?
                } else {
                    combined_mllm_loss(&mut tape, l_llm, l_vis, &weights)?
                };
                item_losses.push(item_loss);
            }
            let mut total = item_losses[0];
            for &l in &item_losses[1..] {
                total = tape.add(total, l)?;
            }
            total = tape.scale(total, 1.0 / item_losses.len() as f64)?;
            let loss_value = tape.scalar(total)?;
            tape.backward(total)?;
            let grad_norm = opt.step(&trainable)?;
            Ok((
                loss_value,
                llm_sum / items.len() as f64,
                vis_sum / items.len() as f64,
                grad_norm,
            ))
        })();
        let (loss_value, l_llm, l_vis, grad_norm) = match step_result {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                return Err(divergence_abort(step, snapshot, digest, control.divergence_dir))
            }
            Err(e) => return Err(e),
        };
        if let Some(e) = ema.as_mut() {
            e.update(&trainable);
        }
        if step >= tail_from {
            tail_losses.push(loss_value);
        }
        snapshot = all.snapshot();
        log.push(LogRecord {
            step,
            stage: cfg.stage,
            losses: vec![
                ("l_total".into(), loss_value),
                ("l_llm".into(), l_llm),
                ("l_vis".into(), l_vis),
            ],
            grad_norm,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }

    // Held-out alignment quality with the final weights.
    let heldout_l_vis = eval_heldout_l_vis(state, heldout, heldout_grids)?;

    let checkpoint = Checkpoint::new(
        digest,
        end_step,
        all.snapshot(),
        opt.state(&trainable),
        ema.as_ref().map(|e| e.shadow().to_vec()),
    );
    let final_loss = mean(&tail_losses);
    Ok(StageOutcome {
        checkpoint,
        final_loss,
        heldout_l_vis: Some(heldout_l_vis),
        heldout_flow: None,
        supervised_tokens: 0,
        total_image_tokens: 0,
        log,
    })
}

fn eval_heldout_l_vis(
    state: &PipelineState,
    heldout: &[InterleavedSequence],
    grids: &[Vec<TargetGrid>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (seq, seq_grids) in heldout.iter().zip(grids) {
        let mut tape = Tape::inference();
        let out = state.mllm.forward(&mut tape, seq, &state.queries)?;
        for (f, grid) in seq_grids.iter().enumerate() {
            let l = cosine_alignment_loss(&mut tape, out.visual_latents[f], grid)?;
            total += tape.scalar(l)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no held-out frames".into()));
    }
    Ok(total / count as f64)
}

/// Stage 2 and the SFT pass share this loop: frozen backbone, trainable
/// connector and head, flow objective with per-sequence pathway dropout.
fn run_head_stage(
    state: &mut PipelineState,
    dataset: &[InterleavedSequence],
    init_from: Option<&Checkpoint>,
    init_prefixes: &[&str],
    control: RunControl,
) -> Result<StageOutcome> {
    let cfg = state.cfg.clone();
    if dataset.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let (train, heldout) = split_dataset(dataset);
    let policy = DropoutPolicy {
        p_text: cfg.p_text,
        p_vis: cfg.p_vis,
        p_text_end: cfg.p_text_end,
        p_vis_end: cfg.p_vis_end,
        anneal_steps: cfg.anneal_steps,
    };
    policy.validate()?;

    if let Some(ck) = init_from {
        let tensors = ck.tensors_with_prefix(init_prefixes);
        if tensors.is_empty() {
            return Err(Error::Integrity(format!(
                "checkpoint carries no tensors under {init_prefixes:?}; \
                 this stage requires a mllm-align checkpoint"
            )));
        }
        state.all_params().load(&tensors)?;
    }

    // The fine-tuned backbone stays frozen through head training.
    state.mllm.freeze();
    state.queries.freeze();
    let backbone_hash_before = state.backbone_hash();

    let head_params = state.head_params();
    head_params.set_requires_grad(true);
    let trainable = head_params.trainable();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &trainable,
    );
    let mut ema = cfg.ema_decay.map(|d| Ema::new(d, &trainable));

    let all = state.all_params();
    let digest = cfg.digest();
    let mut start_step = 0u64;
    if let Some(ck) = control.resume {
        ck.ensure_digest(&digest)?;
        all.load(&ck.tensors)?;
        opt.load_state(&trainable, &ck.opt_moments, ck.step)?;
        if let (Some(e), Some(saved)) = (ema.as_mut(), ck.ema.as_ref()) {
            e.restore(saved)?;
        }
        start_step = ck.step;
    }

    // Frozen backbone: conditioning is constant per sequence.
    let train_cond: Vec<SequenceConditioning> = train
        .iter()
        .map(|seq| conditioning_for(state, seq))
        .collect::<Result<Vec<_>>>()?;
    let heldout_cond: Vec<SequenceConditioning> = heldout
        .iter()
        .map(|seq| conditioning_for(state, seq))
        .collect::<Result<Vec<_>>>()?;
    let train_targets: Vec<Vec<usize>> = train
        .iter()
        .map(|seq| select_targets(seq, cfg.target_mode))
        .collect();

    let end_step = control.halt_at.map(|h| h.min(cfg.steps)).unwrap_or(cfg.steps);
    let mut schedule = BatchSchedule::new(train.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::new();
    let mut tail_losses = Vec::new();
    let tail_from = end_step.saturating_sub(end_step.div_ceil(10));
    let mut snapshot = all.snapshot();
    let mut supervised_tokens = 0u64;
    let mut total_image_tokens = 0u64;

    for step in start_step..end_step {
        let clock = Instant::now();
        let items = schedule.items(step);
        let step_result = (|| -> Result<(f64, f64)> {
            let mut tape = Tape::new();
            let mut item_losses = Vec::new();
            for (j, &idx) in items.iter().enumerate() {
                let mut drop_rng =
                    DetRng::derive(cfg.seed, stream(SALT_DROP, step, j as u64));
                let drop = policy.sample(step, &mut drop_rng);
                let mut flow_rng =
                    DetRng::derive(cfg.seed, stream(SALT_FLOW, step, j as u64));
                let (loss, stats) = flow_loss(
                    &mut tape,
                    &state.head,
                    &state.connector,
                    &train_cond[idx],
                    &train_targets[idx],
                    drop,
                    cfg.t_sampler,
                    cfg.noisy_history,
                    &mut flow_rng,
                )?;
                supervised_tokens += stats.supervised_tokens as u64;
                total_image_tokens += stats.total_image_tokens as u64;
                item_losses.push(loss);
            }
            let mut total = item_losses[0];
            for &l in &item_losses[1..] {
                total = tape.add(total, l)?;
            }
            total = tape.scale(total, 1.0 / item_losses.len() as f64)?;
            let loss_value = tape.scalar(total)?;
            tape.backward(total)?;
            let grad_norm = opt.step(&trainable)?;
            Ok((loss_value, grad_norm))
        })();
        let (loss_value, grad_norm) = match step_result {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                return Err(divergence_abort(step, snapshot, digest, control.divergence_dir))
            }
            Err(e) => return Err(e),
        };
        if let Some(e) = ema.as_mut() {
            e.update(&trainable);
        }
        if step >= tail_from {
            tail_losses.push(loss_value);
        }
        snapshot = all.snapshot();
        log.push(LogRecord {
            step,
            stage: cfg.stage,
            losses: vec![("l_flow".into(), loss_value)],
            grad_norm,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }

    if state.backbone_hash() != backbone_hash_before {
        return Err(Error::Integrity(
            "frozen backbone drifted during head training".into(),
        ));
    }

    let heldout_flow = eval_heldout_flow(state, heldout, &heldout_cond)?;
    let checkpoint = Checkpoint::new(
        digest,
        end_step,
        all.snapshot(),
        opt.state(&trainable),
        ema.as_ref().map(|e| e.shadow().to_vec()),
    );
    Ok(StageOutcome {
        checkpoint,
        final_loss: mean(&tail_losses),
        heldout_l_vis: None,
        heldout_flow: Some(heldout_flow),
        supervised_tokens,
        total_image_tokens,
        log,
    })
}

/// Held-out flow loss, always under forcing-style targets and without
/// dropout, so training variants stay comparable.
fn eval_heldout_flow(
    state: &PipelineState,
    heldout: &[InterleavedSequence],
    conds: &[SequenceConditioning],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, (seq, cond)) in heldout.iter().zip(conds).enumerate() {
        let targets = select_targets(seq, crate::diffusion::TargetMode::Forcing);
        // Average several fixed noise draws per item to tame variance.
        for rep in 0..4u64 {
            let mut rng = DetRng::derive(
                state.cfg.seed,
                stream(SALT_EVAL, idx as u64, rep),
            );
            let mut tape = Tape::inference();
            let (loss, _) = flow_loss(
                &mut tape,
                &state.head,
                &state.connector,
                cond,
                &targets,
                PathwayDrop::none(),
                crate::diffusion::TimeSampler::Uniform,
                false,
                &mut rng,
            )?;
            total += tape.scalar(loss)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no held-out sequences".into()));
    }
    Ok(total / count as f64)
}

/// Stage 2: continued pre-training of connector and head on frozen
/// backbone conditioning.
pub fn train_stage2(
    state: &mut PipelineState,
    dataset: &[InterleavedSequence],
    stage1: &Checkpoint,
    control: RunControl,
) -> Result<StageOutcome> {
    if state.cfg.stage != Stage::DitCpt {
        return Err(Error::Config(format!(
            "stage-2 runner called with stage {}",
            state.cfg.stage
        )));
    }
    run_head_stage(state, dataset, Some(stage1), &["mllm.", "query."], control)
}

/// Short fine-tune of the head on a curated subset, starting from a full
/// stage-2 checkpoint.
pub fn train_sft(
    state: &mut PipelineState,
    curated: &[InterleavedSequence],
    base: &Checkpoint,
    control: RunControl,
) -> Result<StageOutcome> {
    if state.cfg.stage != Stage::Sft {
        return Err(Error::Config(format!(
            "sft runner called with stage {}",
            state.cfg.stage
        )));
    }
    if state.cfg.steps == 0 {
        // Degenerate but well-defined: the checkpoint passes through.
        let all = state.all_params();
        all.load(&base.tensors_with_prefix(&["mllm.", "query.", "conn.", "dit."]))?;
        state.mllm.freeze();
        state.queries.freeze();
        return Ok(StageOutcome {
            checkpoint: Checkpoint::new(
                state.cfg.digest(),
                0,
                all.snapshot(),
                Vec::new(),
                None,
            ),
            final_loss: f64::NAN,
            heldout_l_vis: None,
            heldout_flow: None,
            supervised_tokens: 0,
            total_image_tokens: 0,
            log: Vec::new(),
        });
    }
    run_head_stage(
        state,
        curated,
        Some(base),
        &["mllm.", "query.", "conn.", "dit."],
        control,
    )
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Prompt sequence for sampling frame `history.len() + 1`: history images
/// are real rendered patterns, the target image slot is a zero dummy whose
/// pixels the backbone never reads.
pub fn prompt_sequence(gen: &GenConfig, history: &[u32], class: u32) -> Result<InterleavedSequence> {
    if class >= gen.n_classes {
        return Err(Error::Config(format!(
            "class {class} out of {} classes",
            gen.n_classes
        )));
    }
    let mut blocks = Vec::new();
    for &c in history {
        blocks.push(Block::Text(TextBlock {
            tokens: vec![TOK_SHOW, CLASS_TOKEN_BASE + c],
        }));
        blocks.push(Block::Image(ImageBlock {
            pixels: crate::data::render_pattern(c, gen.image_size),
            class_id: c,
        }));
    }
    blocks.push(Block::Text(TextBlock {
        tokens: vec![TOK_SHOW, CLASS_TOKEN_BASE + class],
    }));
    blocks.push(Block::Image(ImageBlock {
        pixels: Tensor::zeros(vec![1, gen.image_size, gen.image_size]),
        class_id: class,
    }));
    Ok(InterleavedSequence { blocks })
}

pub struct SampleOutput {
    pub latents: Tensor,
    /// Decoded image, clamped to [0,1].
    pub image: Tensor,
}

/// Euler-sample the final frame of `seq` from seeded noise.
pub fn sample_frame(
    state: &PipelineState,
    seq: &InterleavedSequence,
    steps: usize,
    seed: u64,
    guidance: f64,
) -> Result<SampleOutput> {
    let cond = conditioning_for(state, seq)?;
    let target_frame = cond.n_frames();
    if target_frame == 0 {
        return Err(Error::Contract("prompt has no image frame".into()));
    }
    let z = state.codec.tokens_per_image(state.cfg.image_size);
    let d = state.codec.latent_dim();
    let mut rng = DetRng::derive(seed, stream(SALT_SAMPLE, 0, 0));
    let mut x0 = Tensor::zeros(vec![z, d]);
    rng.fill_normal(x0.data_mut(), 1.0);
    let sampler = ConditionalSampler {
        head: &state.head,
        connector: &state.connector,
        cond: &cond,
        target_frame,
        guidance,
    };
    let latents = euler_sample(&sampler, x0, steps)?;
    let mut image = state.codec.decode(&latents, state.cfg.image_size)?;
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SampleOutput { latents, image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sequence;

    fn small_dataset(n: usize, cfg: &TrainConfig) -> Vec<InterleavedSequence> {
        let gen = cfg.gen_config();
        (0..n as u64).map(|s| generate_sequence(s, &gen).unwrap()).collect()
    }

    fn fast_cfg(stage: Stage) -> TrainConfig {
        let mut cfg = TrainConfig::for_stage(stage);
        cfg.steps = 12;
        cfg.batch_size = 2;
        cfg.mllm_dim = 32;
        cfg.visual_dim = 16;
        cfg.dit_width = 32;
        cfg.connector_width = 32;
        cfg.n_queries = 4;
        cfg.grid_k = 2;
        cfg.context = 128;
        cfg
    }

    #[test]
    fn stage1_runs_and_reports() {
        let cfg = fast_cfg(Stage::MllmAlign);
        let data = small_dataset(10, &cfg);
        let mut state = PipelineState::build(cfg).unwrap();
        let out = train_stage1(&mut state, &data, RunControl::default()).unwrap();
        assert_eq!(out.log.len(), 12);
        assert!(out.heldout_l_vis.unwrap().is_finite());
        assert!(out.checkpoint.tensor_names().iter().any(|n| n.starts_with("mllm.")));
    }

    #[test]
    fn stage1_deterministic_loss_curve() {
        let cfg = fast_cfg(Stage::MllmAlign);
        let data = small_dataset(8, &cfg);
        let run = || {
            let mut state = PipelineState::build(cfg.clone()).unwrap();
            train_stage1(&mut state, &data, RunControl::default())
                .unwrap()
                .log
                .iter()
                .map(|r| r.losses[0].1)
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stage2_freezes_backbone() {
        let mut cfg1 = fast_cfg(Stage::MllmAlign);
        cfg1.steps = 6;
        let data = small_dataset(8, &cfg1);
        let mut s1 = PipelineState::build(cfg1.clone()).unwrap();
        let out1 = train_stage1(&mut s1, &data, RunControl::default()).unwrap();

        let mut cfg2 = fast_cfg(Stage::DitCpt);
        cfg2.steps = 8;
        let mut s2 = PipelineState::build(cfg2).unwrap();
        let before_embed = out1
            .checkpoint
            .tensors
            .iter()
            .find(|(n, _)| n == "mllm.embed")
            .unwrap()
            .1
            .clone();
        let out2 = train_stage2(&mut s2, &data, &out1.checkpoint, RunControl::default()).unwrap();
        let after_embed = out2
            .checkpoint
            .tensors
            .iter()
            .find(|(n, _)| n == "mllm.embed")
            .unwrap()
            .1
            .clone();
        assert_eq!(before_embed, after_embed, "backbone must not move");
        assert!(out2.supervised_tokens > 0);
        assert!(out2.supervised_tokens <= out2.total_image_tokens);
    }

    #[test]
    fn stage2_requires_backbone_tensors() {
        let cfg2 = fast_cfg(Stage::DitCpt);
        let data = small_dataset(6, &cfg2);
        let mut s2 = PipelineState::build(cfg2.clone()).unwrap();
        // A checkpoint with no backbone names must be refused.
        let bogus = Checkpoint::new([0u8; 32], 0, Vec::new(), Vec::new(), None);
        let err = train_stage2(&mut s2, &data, &bogus, RunControl::default())
            .err()
            .expect("must fail");
        assert!(err.to_string().contains("mllm-align"), "{err}");
    }

    #[test]
    fn sft_zero_steps_passes_checkpoint_through() {
        let mut cfg1 = fast_cfg(Stage::MllmAlign);
        cfg1.steps = 4;
        let data = small_dataset(6, &cfg1);
        let mut s1 = PipelineState::build(cfg1).unwrap();
        let out1 = train_stage1(&mut s1, &data, RunControl::default()).unwrap();
        let mut cfg2 = fast_cfg(Stage::DitCpt);
        cfg2.steps = 4;
        let mut s2 = PipelineState::build(cfg2).unwrap();
        let out2 = train_stage2(&mut s2, &data, &out1.checkpoint, RunControl::default()).unwrap();

        let mut cfg3 = fast_cfg(Stage::Sft);
        cfg3.steps = 0;
        let mut s3 = PipelineState::build(cfg3).unwrap();
        let out3 = train_sft(&mut s3, &data, &out2.checkpoint, RunControl::default()).unwrap();
        assert_eq!(out3.checkpoint.tensors, out2.checkpoint.tensors);
    }

    #[test]
    fn resume_splices_loss_curve() {
        let cfg = fast_cfg(Stage::MllmAlign);
        let data = small_dataset(8, &cfg);
        // Full run.
        let mut full_state = PipelineState::build(cfg.clone()).unwrap();
        let full = train_stage1(&mut full_state, &data, RunControl::default()).unwrap();
        // Interrupt the same config at step 6, then resume it.
        let mut s = PipelineState::build(cfg.clone()).unwrap();
        let first = train_stage1(
            &mut s,
            &data,
            RunControl { halt_at: Some(6), ..RunControl::default() },
        )
        .unwrap();
        let mut s2 = PipelineState::build(cfg.clone()).unwrap();
        let second = train_stage1(
            &mut s2,
            &data,
            RunControl { resume: Some(&first.checkpoint), ..RunControl::default() },
        )
        .unwrap();
        let full_curve: Vec<f64> = full.log.iter().map(|r| r.losses[0].1).collect();
        let spliced: Vec<f64> = first
            .log
            .iter()
            .chain(second.log.iter())
            .map(|r| r.losses[0].1)
            .collect();
        assert_eq!(full_curve.len(), spliced.len());
        for (a, b) in full_curve.iter().zip(&spliced) {
            assert_eq!(a.to_bits(), b.to_bits(), "resume must splice exactly");
        }
        // Final checkpoints bitwise identical.
        assert_eq!(full.checkpoint.tensors, second.checkpoint.tensors);
    }

    #[test]
    fn resume_with_wrong_digest_refused() {
        let cfg = fast_cfg(Stage::MllmAlign);
        let data = small_dataset(6, &cfg);
        let mut s = PipelineState::build(cfg.clone()).unwrap();
        let out = train_stage1(&mut s, &data, RunControl::default()).unwrap();
        let mut other_cfg = cfg;
        other_cfg.lr = 5e-4;
        let mut s2 = PipelineState::build(other_cfg).unwrap();
        let res = train_stage1(
            &mut s2,
            &data,
            RunControl { resume: Some(&out.checkpoint), ..RunControl::default() },
        );
        assert!(res.is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = fast_cfg(Stage::DitCpt);
        let state = PipelineState::build(cfg.clone()).unwrap();
        let prompt = prompt_sequence(&cfg.gen_config(), &[], 3).unwrap();
        let a = sample_frame(&state, &prompt, 4, 9, 1.0).unwrap();
        let b = sample_frame(&state, &prompt, 4, 9, 1.0).unwrap();
        assert!(a
            .latents
            .data()
            .iter()
            .zip(b.latents.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
