use std::fmt::Write as _;
use std::path::Path;

use super::{Config, ExperimentData, TrainState};
use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_acc,test_acc,n_generated_cum,n_adversarial_cum,wall_seconds";
pub const LINEAGE_HEADER: &str = "gen_id,epoch,guide_index,class,adversarial_flag,final_l_contra,final_l_adv";
pub const EVENTS_HEADER: &str = "gen_id,step,t,gamma,mask_mean,l_contra,l_adv,grad_norm,skipped_update";

/// Metrics history; `wall_seconds` is `NA` unless `wall_clock` is set, keeping the file reproducible.
pub fn metrics_csv(state: &TrainState, wall_clock: bool) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in &state.metrics {
        let wall = if wall_clock { format!("{:.3}", m.wall_seconds) } else { "NA".to_string() };
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{},{}",
            m.epoch, m.train_loss, m.val_acc, m.test_acc, m.n_generated_cum, m.n_adversarial_cum, wall
        )
        .expect("write to string");
    }
    out
}

pub fn lineage_csv(state: &TrainState) -> String {
    let mut out = format!("{LINEAGE_HEADER}\n");
    for l in state.lineage() {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            l.gen_id, l.epoch, l.guide_index, l.class, l.adversarial_flag as u8, l.final_l_contra, l.final_l_adv
        )
        .expect("write to string");
    }
    out
}

pub fn events_csv(state: &TrainState) -> String {
    let mut out = format!("{EVENTS_HEADER}\n");
    for r in &state.events {
        let e = &r.event;
        writeln!(
            out,
            "{},{},{},{:.6e},{:.6},{:.6},{:.6},{:.6e},{}",
            r.gen_id, e.step, e.t, e.gamma, e.mask_mean, e.l_contra, e.l_adv, e.grad_norm, e.skipped_update as u8
        )
        .expect("write to string");
    }
    out
}

pub fn mining_csv(state: &TrainState, data: &ExperimentData) -> String {
    let mut out = String::from("val_index,label,times_mined\n");
    for (i, c) in state.mining_counts.iter().enumerate() {
        writeln!(out, "{i},{},{c}", data.val[i].label).expect("write to string");
    }
    out
}

/// Writes metrics.csv, lineage.csv, events.csv and mining.csv into `dir`.
pub fn write_reports(dir: &Path, cfg: &Config, state: &TrainState, data: &ExperimentData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(state, cfg.output.wall_clock))?;
    std::fs::write(dir.join("lineage.csv"), lineage_csv(state))?;
    std::fs::write(dir.join("events.csv"), events_csv(state))?;
    std::fs::write(dir.join("mining.csv"), mining_csv(state, data))?;
    Ok(())
}
