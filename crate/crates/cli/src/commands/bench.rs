//! The `bench` command: offline comparison of cold exhaustive search
//! against warm epsilon-greedy search on synthetic reward landscapes.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use promptsmith_core::simbench::{
    run_comparison, BenchConfig, BenchMethod, BenchReport, LandscapeParams,
};

use crate::config::SearchSpec;
use crate::output::write_atomic;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark configuration file (JSON); missing fields use defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the number of trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write an SVG regret plot next to the CSV.
    #[arg(long)]
    pub plot: bool,
    /// Directory for bench.csv (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Benchmark config file: every field optional, falling back to the
/// engine defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub landscape: Option<LandscapeParams>,
    pub search: Option<SearchSpec>,
    pub perturbation: Option<f64>,
    pub methods: Option<Vec<BenchMethod>>,
}

impl BenchSpec {
    pub fn to_config(&self) -> BenchConfig {
        let base = BenchConfig::default();
        BenchConfig {
            trials: self.trials.unwrap_or(base.trials),
            seed: self.seed.unwrap_or(base.seed),
            landscape: self.landscape.clone().unwrap_or(base.landscape),
            search: self
                .search
                .as_ref()
                .map(|s| s.to_config(0))
                .unwrap_or(base.search),
            perturbation: self.perturbation.unwrap_or(base.perturbation),
            methods: self.methods.clone().unwrap_or(base.methods),
        }
    }
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<BenchReport> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let spec: BenchSpec = serde_json::from_str(&text)
        .with_context(|| format!("invalid bench config {}", args.config.display()))?;
    let mut config = spec.to_config();
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let report = run_comparison(&config)?;

    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("bench.csv");
    write_atomic(&csv_path, render_csv(&report).as_bytes())?;

    for s in &report.summaries {
        writeln!(
            out,
            "{}: trials {}  mean regret {:.5}  max regret {:.5}  zero-regret {:.0}%  mean evals {:.1}",
            s.method,
            s.trials,
            s.mean_regret,
            s.max_regret,
            s.zero_regret_fraction * 100.0,
            s.mean_evaluations,
        )?;
    }
    writeln!(out, "rows written to {}", csv_path.display())?;

    if args.plot {
        let svg_path = out_dir.join("bench_plot.svg");
        write_atomic(&svg_path, render_svg(&report).as_bytes())?;
        writeln!(out, "plot written to {}", svg_path.display())?;
    }
    Ok(report)
}

pub fn render_csv(report: &BenchReport) -> String {
    let mut csv = String::from("method,trial,evaluations,best_reward,oracle_reward,regret\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method, row.trial, row.evaluations, row.best_reward, row.oracle_reward, row.regret
        ));
    }
    csv
}

/// Per-trial regret scatter, one color per method.
fn render_svg(report: &BenchReport) -> String {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const MARGIN: f64 = 48.0;
    let trials = report.config.trials.max(1) as f64;
    let max_regret = report
        .rows
        .iter()
        .map(|r| r.regret)
        .fold(0.0f64, f64::max)
        .max(0.05);
    let x = |trial: usize| MARGIN + (trial as f64 / trials) * (W - 2.0 * MARGIN);
    let y = |regret: f64| H - MARGIN - (regret / max_regret) * (H - 2.0 * MARGIN);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<line x1="{m}" y1="{base}" x2="{xe}" y2="{base}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{base}" stroke="black"/>
<text x="{xm}" y="{xl}" text-anchor="middle" font-size="12">trial</text>
<text x="14" y="{ym}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {ym})">regret</text>
<text x="{m}" y="{yt}" font-size="10">0</text>
<text x="{m}" y="{ytop}" font-size="10">{max_regret:.3}</text>
"#,
        m = MARGIN,
        base = H - MARGIN,
        xe = W - MARGIN,
        xm = W / 2.0,
        xl = H - 12.0,
        ym = H / 2.0,
        yt = H - MARGIN + 12.0,
        ytop = MARGIN - 6.0,
    );
    let mut legend_y = MARGIN;
    for (mi, method) in [BenchMethod::ColdExhaustive, BenchMethod::WarmEpsilonGreedy]
        .iter()
        .enumerate()
    {
        let color = colors[mi % colors.len()];
        let mut any = false;
        for row in report.rows.iter().filter(|r| r.method == method.name()) {
            any = true;
            svg.push_str(&format!(
                r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#,
                x(row.trial),
                y(row.regret)
            ));
            svg.push('\n');
        }
        if any {
            svg.push_str(&format!(
                r#"<circle cx="{lx}" cy="{legend_y}" r="4" fill="{color}"/><text x="{tx}" y="{ty}" font-size="12">{}</text>"#,
                method.name(),
                lx = W - MARGIN - 180.0,
                tx = W - MARGIN - 170.0,
                ty = legend_y + 4.0,
            ));
            svg.push('\n');
            legend_y += 18.0;
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Exposed for tests: where `bench.csv` lands for a given `--out`.
pub fn csv_path(out: Option<&Path>) -> PathBuf {
    out.unwrap_or_else(|| Path::new(".")).join("bench.csv")
}
