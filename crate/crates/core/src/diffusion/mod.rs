//! Noise schedules, the closed-form forward process, and the guided DDPM sampler.

mod process;
mod sampler;
mod schedule;

pub use process::{cfg_noise, ddpm_step, forward_sample, x0_estimate, LatentState};
pub use sampler::{sample, NoisePredictor, NoopHook, Prediction, StepContext, StepHook, StepOutcome};
pub use schedule::{NoiseSchedule, ScheduleKind};
