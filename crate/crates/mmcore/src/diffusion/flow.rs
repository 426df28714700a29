//! Rectified-flow training objective and Euler sampling.
//!
//! The flow uses the linear interpolant x_t = (1-t) x0 + t x1 with velocity
//! target x1 - x0, regressed by mean squared error over the supervised
//! image-latent tokens only. Non-target frames enter the sequence as clean
//! t=1 context unless noisy-history teacher forcing is switched on.

use crate::codec::Connector;
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};

use super::head::{DiffusionHead, FrameInput, PathwayDrop, SequenceConditioning};

/// One frame's interpolant state.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

impl FlowState {
    /// Build the interpolant: x_t = (1-t) x0 + t x1, v = x1 - x0.
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::Dimension {
                op: "flow_state",
                left: x0.shape().to_vec(),
                right: x1.shape().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("time {t} outside [0,1]")));
        }
        let x_t = x0.scale(1.0 - t).add(&x1.scale(t))?;
        let v_target = x1.sub(&x0)?;
        Ok(Self {
            x0,
            x1,
            t,
            x_t,
            v_target,
        })
    }
}

/// How interpolation times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampler {
    Uniform,
    /// sigmoid of a standard normal; mid-heavy schedule.
    LogitNormal,
}

impl TimeSampler {
    pub fn sample(&self, rng: &mut DetRng) -> f64 {
        match self {
            TimeSampler::Uniform => rng.uniform(),
            TimeSampler::LogitNormal => {
                let z = rng.normal();
                1.0 / (1.0 + (-z).exp())
            }
        }
    }
}

impl std::str::FromStr for TimeSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimeSampler::Uniform),
            "logit-normal" | "logit_normal" => Ok(TimeSampler::LogitNormal),
            other => Err(Error::Config(format!("unknown time sampler '{other}'"))),
        }
    }
}

impl std::fmt::Display for TimeSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeSampler::Uniform => write!(f, "uniform"),
            TimeSampler::LogitNormal => write!(f, "logit-normal"),
        }
    }
}

/// Token accounting for the step, reported by the trainer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub supervised_tokens: usize,
    pub total_image_tokens: usize,
}

/// Flow-matching loss over one sequence. `target_frames` holds 1-based
/// frame ordinals from `select_targets`; per-frame noise and times are
/// drawn independently, which is what lets every target frame train at its
/// own noise level.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss(
    tape: &mut Tape,
    head: &DiffusionHead,
    connector: &Connector,
    cond: &SequenceConditioning,
    target_frames: &[usize],
    drop: PathwayDrop,
    t_sampler: TimeSampler,
    noisy_history: bool,
    rng: &mut DetRng,
) -> Result<(Var, FlowStats)> {
    if target_frames.is_empty() {
        return Err(Error::Contract("empty diffusion target set".into()));
    }
    let m = cond.n_frames();
    if let Some(&bad) = target_frames.iter().find(|&&f| f == 0 || f > m) {
        return Err(Error::Contract(format!("target frame {bad} outside 1..={m}")));
    }

    let mut inputs = Vec::with_capacity(m);
    let mut targets: Vec<(usize, Tensor)> = Vec::new();
    let mut stats = FlowStats::default();
    for f in 1..=m {
        let x1 = cond.image_latents[f - 1].clone();
        stats.total_image_tokens += x1.rows();
        if target_frames.contains(&f) {
            let t = t_sampler.sample(rng);
            let mut x0 = Tensor::zeros(x1.shape().to_vec());
            rng.fill_normal(x0.data_mut(), 1.0);
            let state = FlowState::new(x0, x1, t)?;
            stats.supervised_tokens += state.x_t.rows();
            inputs.push(FrameInput {
                tokens: state.x_t.clone(),
                t: state.t,
                is_target: true,
            });
            targets.push((f, state.v_target));
        } else if noisy_history {
            // Teacher forcing with noisy context: history frames carry their
            // own interpolant but contribute no loss.
            let t = t_sampler.sample(rng);
            let mut x0 = Tensor::zeros(x1.shape().to_vec());
            rng.fill_normal(x0.data_mut(), 1.0);
            let state = FlowState::new(x0, x1, t)?;
            inputs.push(FrameInput {
                tokens: state.x_t,
                t: state.t,
                is_target: false,
            });
        } else {
            inputs.push(FrameInput {
                tokens: x1,
                t: 1.0,
                is_target: false,
            });
        }
    }

    let velocities = head.forward(tape, connector, cond, &inputs, drop)?;
    debug_assert_eq!(velocities.len(), targets.len());

    // Mean over every supervised token coordinate; frames concatenated so
    // the normalization is global, not per frame.
    let pred_parts: Vec<Var> = velocities.iter().map(|&(_, v)| v).collect();
    let pred = tape.concat_rows(&pred_parts)?;
    let mut target_rows = Vec::new();
    for (f, v) in &targets {
        debug_assert!(velocities.iter().any(|(vf, _)| vf == f));
        target_rows.push(v.clone());
    }
    let target_data: Vec<f64> = target_rows
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let rows: usize = target_rows.iter().map(|t| t.rows()).sum();
    let cols = target_rows[0].cols();
    let target = Tensor::from_vec(vec![rows, cols], target_data)?;
    let loss = tape.mse_against(pred, &target)?;
    Ok((loss, stats))
}

/// Anything that maps (state, time) to a velocity. The trained head
/// implements it through [`ConditionalSampler`]; tests use closed-form
/// fields.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Euler integration of dx/dt = v(x, t) from t=0 to t=1 in `steps` steps.
/// Deterministic given the initial state.
pub fn euler_sample(field: &dyn VelocityField, x0: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Contract("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::Dimension {
                op: "euler_sample",
                left: x.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        x = x.add(&v.scale(dt))?;
    }
    Ok(x)
}

/// Velocity field of the trained head for one target frame, given frozen
/// history and conditioning. Guidance blends the conditional velocity with
/// the null-conditioned one; scale 1 disables the extra pass.
pub struct ConditionalSampler<'a> {
    pub head: &'a DiffusionHead,
    pub connector: &'a Connector,
    pub cond: &'a SequenceConditioning,
    /// 1-based frame being generated; earlier frames act as clean context.
    pub target_frame: usize,
    pub guidance: f64,
}

impl ConditionalSampler<'_> {
    fn eval(&self, x: &Tensor, t: f64, drop: PathwayDrop) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(self.target_frame);
        for f in 1..=self.target_frame {
            if f == self.target_frame {
                inputs.push(FrameInput {
                    tokens: x.clone(),
                    t,
                    is_target: true,
                });
            } else {
                inputs.push(FrameInput {
                    tokens: self.cond.image_latents[f - 1].clone(),
                    t: 1.0,
                    is_target: false,
                });
            }
        }
        let truncated = SequenceConditioning {
            frames: self.cond.frames[..self.target_frame].to_vec(),
            image_latents: self.cond.image_latents[..self.target_frame].to_vec(),
            classes: self.cond.classes[..self.target_frame].to_vec(),
        };
        let mut tape = Tape::inference();
        let v = self
            .head
            .forward(&mut tape, self.connector, &truncated, &inputs, drop)?;
        let (_, var) = v
            .into_iter()
            .find(|(f, _)| *f == self.target_frame)
            .ok_or_else(|| Error::Contract("sampler frame produced no velocity".into()))?;
        Ok(tape.tensor(var))
    }
}

impl VelocityField for ConditionalSampler<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let cond_v = self.eval(x, t, PathwayDrop::none())?;
        if (self.guidance - 1.0).abs() < 1e-12 {
            return Ok(cond_v);
        }
        let uncond_v = self.eval(x, t, PathwayDrop::unconditional())?;
        // v_u + s (v_c - v_u)
        let diff = cond_v.sub(&uncond_v)?;
        uncond_v.add(&diff.scale(self.guidance))
    }
}
