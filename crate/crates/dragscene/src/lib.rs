//! Files, command line and thread pool around [`dragscene_core`].
//!
//! * [`tensor`]: the `DSTN` binary tensor container.
//! * [`manifest`], [`edit_file`], [`config`]: JSON formats for scenes, drag
//!   instructions and run settings; [`mask_png`] reads PNG masks.
//! * [`artifacts`]: the output tree written by a run.
//! * [`app`]: what each subcommand does; [`cli`] parses arguments.
//! * [`exec`]: rayon executor honouring `DRAGSCENE_THREADS`.

pub mod app;
pub mod artifacts;
pub mod cli;
pub mod config;
pub mod edit_file;
mod error;
pub mod exec;
pub mod io;
pub mod manifest;
pub mod mask_png;
pub mod tensor;

pub use error::{Error, Result};
