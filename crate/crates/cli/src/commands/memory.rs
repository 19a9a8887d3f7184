//! The `memory` command: inspect, prune, or export the reward memory.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};

use promptsmith_core::memory::MemoryModule;

use crate::config::default_memory_path;

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[command(subcommand)]
    pub action: MemoryAction,
}

#[derive(Debug, Subcommand)]
pub enum MemoryAction {
    /// Summarize the stored entries.
    Show {
        /// Memory file (default: promptsmith_memory.json).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Drop actions observed fewer than --min-count times, then drop
    /// entries left with no actions.
    Prune {
        #[arg(long)]
        file: Option<PathBuf>,
        /// Minimum observation count an action needs to survive.
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
    /// Print the whole memory file as canonical JSON.
    Export {
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

pub fn cmd_memory(args: &MemoryArgs, out: &mut dyn Write) -> Result<()> {
    match &args.action {
        MemoryAction::Show { file } => {
            let path = file.clone().unwrap_or_else(default_memory_path);
            let memory = MemoryModule::load_or_default(&path)?;
            if memory.is_empty() {
                writeln!(out, "{}: no entries", path.display())?;
                return Ok(());
            }
            writeln!(
                out,
                "{}: {} entries, revision {}",
                path.display(),
                memory.len(),
                memory.revision()
            )?;
            for (key, actions) in memory.entries() {
                let observations: u64 = actions.iter().map(|a| a.count).sum();
                let best = actions.iter().max_by(|a, b| {
                    a.mean_reward
                        .total_cmp(&b.mean_reward)
                        .then_with(|| a.count.cmp(&b.count))
                });
                let best_desc = match best {
                    Some(a) => format!("{} (mean {:.4}, n={})", a.combo, a.mean_reward, a.count),
                    None => "-".to_string(),
                };
                writeln!(
                    out,
                    "  {} / {}: {} actions, {} observations, best {}",
                    key.task_id,
                    key.model_id,
                    actions.len(),
                    observations,
                    best_desc
                )?;
            }
        }
        MemoryAction::Prune { file, min_count } => {
            let path = file.clone().unwrap_or_else(default_memory_path);
            let mut memory = MemoryModule::load_or_default(&path)?;
            let before: usize = memory.entries().map(|(_, a)| a.len()).sum();
            memory.prune(*min_count);
            let after: usize = memory.entries().map(|(_, a)| a.len()).sum();
            memory.save_with_retry(&path, 3)?;
            writeln!(
                out,
                "pruned {} of {} actions (min count {}), {} entries remain",
                before - after,
                before,
                min_count,
                memory.len()
            )?;
        }
        MemoryAction::Export { file } => {
            let path = file.clone().unwrap_or_else(default_memory_path);
            let memory = MemoryModule::load_or_default(&path)?;
            writeln!(out, "{}", memory.to_json())?;
        }
    }
    Ok(())
}
