// SPDX-License-Identifier: MIT OR Apache-2.0

//! `pathpatch`: run path patching experiments from TOML configs.
//!
//! Exit codes: 0 success, 1 other failures, 2 invalid config or argument,
//! 3 missing file, 4 path capacity exceeded, 5 shape mismatch, 6 pattern
//! syntax error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pathpatch::config::ExperimentConfig;
use pathpatch::report::ExperimentReport;
use pathpatch::runner::{self, Command, Overrides};

#[derive(Parser, Debug)]
#[command(name = "pathpatch", version, about = "Path patching experiments on computation graphs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and pairs.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score a hypothesis: AUE, ATE and proportion explained.
    Patch(Common),
    /// Signed per-position loss attribution for one example.
    Attribute(Common),
    /// Rank attention heads and sweep the top-k curve.
    Greedy(Common),
    /// Verify that the configured rewrites preserve the output.
    RewriteCheck(Common),
    /// Patch with Gaussian noise on the input embeddings.
    Trace(Common),
    /// Effect of zeroing the listed nodes.
    ZeroAblate(Common),
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::Patch(c) => (Command::Patch, c),
            Cmd::Attribute(c) => (Command::Attribute, c),
            Cmd::Greedy(c) => (Command::Greedy, c),
            Cmd::RewriteCheck(c) => (Command::RewriteCheck, c),
            Cmd::Trace(c) => (Command::Trace, c),
            Cmd::ZeroAblate(c) => (Command::ZeroAblate, c),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.6}"))
}

fn print_summary(report: &ExperimentReport) {
    if let Some(s) = &report.summary {
        println!("samples: {}", s.samples);
        println!("AUE: {:.6} ± {:.6}", s.aue, s.aue_standard_error);
        println!("ATE: {:.6} ± {:.6}", s.ate, s.ate_standard_error);
        println!("proportion explained: {}%", fmt_opt(s.proportion_explained));
        if let Some(gap) = &s.diff_expected_loss {
            println!("difference in expected loss: {:.6} (counterfactual baseline {:.6})", gap.value, gap.baseline);
        }
    }
    if let Some(rows) = &report.attribution {
        println!("position\ttoken\tlabel\tattribution");
        let cell = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in rows {
            println!("{}\t{}\t{}\t{:.6}", r.position, cell(r.token), cell(r.label), r.value);
        }
    }
    if let Some(g) = &report.greedy {
        println!("ATE: {:.6}", g.ate);
        for (rank, h) in g.ranking.iter().enumerate() {
            println!("rank {:>3}: head {} score {:.6}", rank + 1, h.head, h.score);
        }
        for p in &g.curve {
            println!("top {:>3}: AUE {:.6} proportion explained {}%", p.k, p.aue, fmt_opt(p.proportion_explained));
        }
    }
    if let Some(c) = &report.rewrite {
        println!(
            "{}: max deviation {:e} (tolerance {:e}), {} -> {} nodes",
            c.rewrite, c.max_deviation, c.tolerance, c.nodes_before, c.nodes_after
        );
    }
    if report.command == "zero-ablate" {
        if let Some(v) = &report.values {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            println!("examples: {}\nmean dissimilarity: {mean:.6}", v.len());
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = cli.command.split();
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
        parallelism: common.parallelism,
    };
    let result = ExperimentConfig::load(&common.config).and_then(|cfg| {
        let report = runner::run(command, &cfg, &overrides)?;
        let dir = runner::output_dir(&cfg, &overrides);
        report.write_to(&dir)?;
        print_summary(&report);
        println!("report written to {}", dir.display());
        runner::verdict(&report)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
