//! Offline membership analysis.

use crate::cluster::fmt_nodes;
use crate::{emit, parse_nodes, CliError};
use clap::Subcommand;
use recraft_core::ids::NodeSet;
use recraft_core::membership::{heatmap_diffs, intermediate_quorum, jc_vote_counts, plan_change, StepKind};
use recraft_core::quorum::majority;
use serde::Serialize;
use std::fmt::Write;

#[derive(Subcommand)]
pub enum AnalyzeCmd {
    /// Extra votes the intermediate quorum needs over joint consensus, as CSV.
    Heatmap {
        /// Largest cluster size on either axis.
        #[arg(long, default_value_t = 9)]
        max: usize,
    },
    /// The configurations a change from OLD to NEW members goes through.
    Plan {
        #[arg(long, value_parser = parse_nodes)]
        old: NodeSet,
        #[arg(long, value_parser = parse_nodes)]
        new: NodeSet,
    },
}

#[derive(Serialize)]
struct Cell {
    n_old: usize,
    n_new: usize,
    quorum: usize,
    jc_best: usize,
    jc_worst: usize,
    diff_best: i64,
    diff_worst: i64,
}

#[derive(Serialize)]
struct Step {
    kind: &'static str,
    members: NodeSet,
    quorum: usize,
    final_members: NodeSet,
}

pub fn run(cmd: AnalyzeCmd, json: bool) -> Result<(), CliError> {
    match cmd {
        AnalyzeCmd::Heatmap { max } => {
            if max == 0 {
                return Err(CliError::Usage("--max must be at least 1".into()));
            }
            let map = heatmap_diffs(max);
            let cells: Vec<Cell> = map
                .cells
                .iter()
                .map(|(&(n_old, n_new), &(diff_best, diff_worst))| {
                    let (jc_best, jc_worst) = jc_vote_counts(n_old, n_new);
                    Cell {
                        n_old,
                        n_new,
                        quorum: intermediate_quorum(n_old, n_new),
                        jc_best,
                        jc_worst,
                        diff_best,
                        diff_worst,
                    }
                })
                .collect();
            emit(json, &cells, || map.to_csv());
        }
        AnalyzeCmd::Plan { old, new } => {
            let plan = plan_change(&old, &new)?;
            let steps: Vec<Step> = plan
                .steps
                .iter()
                .map(|s| Step {
                    kind: match s.kind {
                        StepKind::Stable => "stable",
                        StepKind::NewQ => "new_q",
                    },
                    members: s.members.clone(),
                    quorum: s.quorum.min_votes(),
                    final_members: s.final_members.clone(),
                })
                .collect();
            emit(json, &steps, || {
                let mut out = format!("from {} (quorum {})\n", fmt_nodes(&old), majority(old.len()));
                if steps.is_empty() {
                    out.push_str("  nothing to change\n");
                }
                for (i, s) in steps.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "  {}. {:<6} members {} quorum {} heading to {}",
                        i + 1,
                        s.kind,
                        fmt_nodes(&s.members),
                        s.quorum,
                        fmt_nodes(&s.final_members)
                    );
                }
                out
            });
        }
    }
    Ok(())
}
