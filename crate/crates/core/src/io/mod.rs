//! Image files, run configuration and CSV traces.

mod config;
mod pnm;
mod trace;

pub use config::{
    parse_config, render_config, Mode, PathsSection, RunConfig, TrainingSection, CONFIG_KEYS,
};
pub use pnm::{
    decode_pnm, encode_mask, encode_pnm, load_image, load_mask, mask_from_image, save_image,
    save_mask, PnmFormat,
};
pub use trace::{
    emit_loss_curve, emit_solve_trace, loss_curve_csv, solve_trace_csv, SOLVE_HEADER, TRAIN_HEADER,
};
