//! CSV traces of solver runs and training curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::solver::SolveResult;
use crate::unfolded::LossRecord;

pub const SOLVE_HEADER: &str =
    "stage,data_energy,sparsity_energy,surrogate_before,surrogate_after,mae,iou";
pub const TRAIN_HEADER: &str = "step,loss,bce,iou_loss,dice,mse";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per stage; `mae` and `iou` stay empty without ground truth.
pub fn solve_trace_csv(result: &SolveResult) -> String {
    let mut out = String::from(SOLVE_HEADER);
    out.push('\n');
    for t in &result.trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.stage,
            t.data_energy,
            t.sparsity_energy,
            t.surrogate_before,
            t.surrogate_after,
            opt(t.mae),
            opt(t.iou)
        )
        .expect("writing to a String");
    }
    out
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from(TRAIN_HEADER);
    out.push('\n');
    for r in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.loss, r.bce, r.iou_loss, r.dice, r.mse
        )
        .expect("writing to a String");
    }
    out
}

pub fn emit_solve_trace(path: impl AsRef<Path>, result: &SolveResult) -> Result<()> {
    fs::write(path, solve_trace_csv(result))?;
    Ok(())
}

pub fn emit_loss_curve(path: impl AsRef<Path>, curve: &[LossRecord]) -> Result<()> {
    fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}
