//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kpu_core::autodiff::OpKind;
use kpu_core::gradcheck::{run_suite, GradCheckOptions, ParamStatus};

use crate::ablation::{run_ablation, SUMMARY_FILE};
use crate::analyze::{analyze, format_table, GAPS_FILE};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{KpuError, Result};
use crate::runner::{train, TrainOptions, FINAL_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(name = "kpu", version, about = "Multi-teacher feature unification: train, verify, ablate, analyze")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// `key.path=value` applied to the config before validation. Repeatable.
    #[arg(long = "override", short = 'O', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient check tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the student and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps are complete.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Check every backward rule, layer and the full objective against
    /// finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sign-flips one operator's backward rule (testing aid).
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train every ablation row and write the summary table.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Measure native and unified feature gaps for a trained checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/final.kpuc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Images to measure on; defaults to the config value.
        #[arg(long)]
        images: Option<usize>,
    },
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(t) = self.tolerance {
            overrides.push(format!("run.gradcheck.tolerance={t}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self, exp: &ExperimentConfig) -> PathBuf {
        self.out.clone().or_else(|| exp.run.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/default"))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(KpuError::io(path))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, stop_after, verbose } => {
            let exp = common.experiment()?;
            let out = common.out_dir(&exp);
            let t = train(&exp, &out, &TrainOptions { resume, stop_after, verbose })?;
            println!("trained {} of {} steps into {}", t.step, t.config.steps, out.display());
            Ok(())
        }
        Command::Gradcheck { common, inject_fault } => {
            let exp = common.experiment()?;
            let g = &exp.run.gradcheck;
            let fault = inject_fault.as_deref().map(str::parse::<OpKind>).transpose()?;
            let opts = GradCheckOptions { step: g.step, tolerance: g.tolerance, floor: g.floor, fault };
            gradcheck(&opts)
        }
        Command::Ablate { common } => {
            let exp = common.experiment()?;
            let out = common.out_dir(&exp);
            let summary = run_ablation(&exp, &out)?;
            for r in &summary.rows {
                match &r.outcome {
                    Some(o) => println!("{:<24} ok    L_KPU {:.5}  hash {}", r.row.id, o.final_losses.totals.kpu, o.run_hash),
                    None => println!("{:<24} FAIL  {}", r.row.id, r.error.as_deref().unwrap_or("")),
                }
            }
            if let Some(c) = &summary.rec_comparison {
                println!("reconstruction error: kpu {:.5}  base_c probe {:.5}", c.kpu, c.base_c_probe);
            }
            println!("summary in {}", out.join(SUMMARY_FILE).display());
            let failed = summary.failed();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(KpuError::Ablation(failed.join(", ")))
            }
        }
        Command::Analyze { common, checkpoint: ck, images } => {
            let exp = common.experiment()?;
            let out = common.out_dir(&exp);
            let path = ck.unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
            let trainer = checkpoint::load(&path)?;
            let report = analyze(&trainer, images.unwrap_or(exp.run.analyze_images))?;
            std::fs::create_dir_all(&out).map_err(KpuError::io(&out))?;
            write_json(&out.join(GAPS_FILE), &report)?;
            print!("{}", format_table(&report));
            Ok(())
        }
    }
}

fn gradcheck(opts: &GradCheckOptions) -> Result<()> {
    let cases = run_suite(opts)?;
    let mut failing = Vec::new();
    for c in &cases {
        let ok = c.report.passed();
        println!("{:<24} max rel error {:>10.3e}  {}", c.case, c.report.max_rel_error(), if ok { "ok" } else { "FAIL" });
        if ok {
            continue;
        }
        let flagged: Vec<_> = c.report.flagged().collect();
        for p in flagged.iter().take(8) {
            if let ParamStatus::Checked { max_rel_error, worst_index, analytic, numeric, flagged } = p.status {
                println!(
                    "    {}[{worst_index}]: {flagged} entries over tolerance, worst {max_rel_error:.3e} (analytic {analytic:.6e}, numeric {numeric:.6e})",
                    p.name
                );
            }
        }
        if flagged.len() > 8 {
            println!("    ... and {} more parameters", flagged.len() - 8);
        }
        failing.push(c.case.clone());
    }
    if failing.is_empty() {
        println!("all {} cases within {:.1e}", cases.len(), opts.tolerance);
        Ok(())
    } else {
        Err(KpuError::GradCheck(failing.join(", ")))
    }
}
