//! Deterministic DDIM machinery with pluggable noise predictors and decoders.
//!
//! Step `0` is the clean latent with signal level `ᾱ(0) = 1`; step `t ≥ 1`
//! uses `alpha_bar[t - 1]` of the linear-beta [`Schedule`].

mod codec;
mod ddim;
mod denoiser;
mod schedule;

pub use codec::{Decoder, LatentCodec};
pub use ddim::{ddim_denoise, ddim_invert, denoise_one_step, denoise_one_step_vjp, ddim_step_coefficients};
pub use denoiser::{Denoiser, ToyDenoiser};
pub use schedule::{make_schedule, step_for_strength, Schedule, DEFAULT_T_E, DEFAULT_T_R, DEFAULT_T_TOTAL};
