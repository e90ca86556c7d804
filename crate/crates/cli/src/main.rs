//! `sidelink` — experiment driver for multi-RIS sidelink positioning.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sidelink_cli::cdf_study::{default_epsilons, empirical_cdf, CdfStudyConfig};
use sidelink_cli::codebook_eval::CodebookEvalConfig;
use sidelink_cli::localize::LocalizeConfig;
use sidelink_cli::maps::{heatmap_rows, CostMapConfig, CrbMapConfig, HeatmapJson};
use sidelink_cli::mc_sweep::{McSweepConfig, SWEEP_COLUMNS, TRIAL_COLUMNS};
use sidelink_cli::output::{fmt, spec_line, write_csv, write_json};
use sidelink_core::crb::{GridSpec, Knowns};

#[derive(Parser)]
#[command(
    name = "sidelink",
    about = "Multi-RIS 3D sidelink positioning: simulation, bounds, and estimation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML); omits to use the built-in two-anchor default.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Fast profile: 128 pilots, 48 transmissions, reduced budgets.
    #[arg(long)]
    fast: bool,
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    x_max: f64,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    y_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    y_max: f64,
    /// Grid step, meters.
    #[arg(long, default_value_t = 0.25)]
    step: f64,
    /// Height of the swept plane, meters.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    z: f64,
}

impl GridArgs {
    fn to_spec(&self, fast: bool) -> GridSpec {
        GridSpec {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
            step_m: if fast { self.step * 4.0 } else { self.step },
            z_m: self.z,
        }
    }
}

fn parse_knowns(s: &str) -> Result<Knowns, String> {
    match s {
        "none" => Ok(Knowns::None),
        "b" => Ok(Knowns::ClockOffset),
        "height" => Ok(Knowns::Height),
        "tx" => Ok(Knowns::TxPosition),
        other => Err(format!("unknown value {other}; expected none|b|height|tx")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file against all invariants.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Run one synthesize-estimate-locate trial and emit the fix as JSON.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Trial index (changes the noise realization).
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Disable receiver noise.
        #[arg(long)]
        noise_free: bool,
        /// Read a channel-estimate JSON instead of synthesizing.
        #[arg(long)]
        from_estimate: Option<PathBuf>,
        /// Dump the synthesized received block to a binary file.
        #[arg(long)]
        dump_rx: Option<PathBuf>,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo sweep over transmit power: RMSE vs bounds table.
    McSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated power points, dBm.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        powers: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-trial CSV (defaults to `<out>` with a `_trials` suffix).
        #[arg(long)]
        trials_out: Option<PathBuf>,
    },
    /// RX position-error-bound heatmap over a grid of RX positions.
    CrbMap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridArgs,
        /// Known parameters: none, b, height, or tx.
        #[arg(long, default_value = "none", value_parser = parse_knowns)]
        knowns: Knowns,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON with grid metadata.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Coarse-positioning cost landscape over TX candidates.
    CostMap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridArgs,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bound CDF over all TX-RX pairs of the UE grid, per anchor layout.
    CdfStudy {
        #[command(flatten)]
        common: Common,
        /// Output CSV of per-pair bounds.
        #[arg(long)]
        out: PathBuf,
        /// Optional CDF summary CSV.
        #[arg(long)]
        cdf_out: Option<PathBuf>,
    },
    /// Bound vs prior error level for each codebook kind.
    CodebookEval {
        #[command(flatten)]
        common: Common,
        /// Evaluation transmit power, dBm.
        #[arg(long, default_value_t = 18.0)]
        power_dbm: f64,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn install_pool(workers: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("worker pool")?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { common } => {
            install_pool(common.workers)?;
            let scenario = sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            println!(
                "ok: {} anchors, {} scatterers (+{} clusters), K={}, G={}",
                scenario.n_ris(),
                scenario.scatterers.len(),
                scenario.clusters.len(),
                scenario.radio.n_subcarriers,
                scenario.radio.n_transmissions
            );
        }
        Command::Localize {
            common,
            trial,
            noise_free,
            from_estimate,
            dump_rx,
            out,
        } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let mut cfg = LocalizeConfig::for_scenario(&scenario);
            cfg.trial = trial;
            cfg.with_noise = !noise_free;
            cfg.dump_rx = dump_rx;
            let output = match from_estimate {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let estimate = serde_json::from_str(&text).context("channel estimate JSON")?;
                    sidelink_cli::localize::locate_from_estimate(&scenario, &estimate, &cfg)?
                }
                None => sidelink_cli::localize::run_localize(&scenario, &cfg)?,
            };
            match out {
                Some(path) => write_json(&path, &output)?,
                None => println!("{}", serde_json::to_string_pretty(&output)?),
            }
        }
        Command::McSweep {
            common,
            powers,
            trials,
            out,
            trials_out,
        } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let mut cfg = McSweepConfig::for_scenario(&scenario);
            if let Some(p) = powers {
                cfg.powers_dbm = p;
            }
            cfg.trials = if common.fast { trials.min(50) } else { trials };
            let (rows, records) = sidelink_cli::mc_sweep::run_mc_sweep(&scenario, &cfg)?;
            let header = vec![
                "sidelink mc-sweep".to_string(),
                spec_line("scenario", &scenario),
                spec_line("config", &cfg),
            ];
            write_csv(
                &out,
                &header,
                SWEEP_COLUMNS,
                &rows.iter().map(|r| r.to_csv_row()).collect::<Vec<_>>(),
            )?;
            let trials_path = trials_out.unwrap_or_else(|| {
                let mut p = out.clone();
                p.set_extension("");
                PathBuf::from(format!("{}_trials.csv", p.display()))
            });
            write_csv(
                &trials_path,
                &header,
                TRIAL_COLUMNS,
                &records.iter().map(|r| r.to_csv_row()).collect::<Vec<_>>(),
            )?;
        }
        Command::CrbMap {
            common,
            grid,
            knowns,
            out,
            json_out,
        } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let cfg = CrbMapConfig {
                grid: grid.to_spec(common.fast),
                knowns,
                block_count: scenario.n_ris() + 1,
            };
            let (xs, ys, map) = sidelink_cli::maps::run_crb_map(&scenario, &cfg)?;
            let header = vec![
                "sidelink crb-map".to_string(),
                spec_line("scenario", &scenario),
                spec_line("config", &cfg),
            ];
            write_csv(
                &out,
                &header,
                &["x_m", "y_m", "peb_m"],
                &heatmap_rows(&xs, &ys, &map),
            )?;
            if let Some(path) = json_out {
                let peb: Vec<Vec<f64>> = (0..ys.len())
                    .map(|iy| (0..xs.len()).map(|ix| map[(iy, ix)]).collect())
                    .collect();
                write_json(
                    &path,
                    &HeatmapJson {
                        scenario: &scenario,
                        grid: &cfg.grid,
                        knowns,
                        xs,
                        ys,
                        peb_m: peb,
                    },
                )?;
            }
        }
        Command::CostMap { common, grid, out } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let cfg = CostMapConfig {
                grid: grid.to_spec(common.fast),
            };
            let (xs, ys, map) = sidelink_cli::maps::run_cost_map(&scenario, &cfg)?;
            let header = vec![
                "sidelink cost-map".to_string(),
                spec_line("scenario", &scenario),
                spec_line("config", &cfg),
            ];
            write_csv(
                &out,
                &header,
                &["x_m", "y_m", "cost"],
                &heatmap_rows(&xs, &ys, &map),
            )?;
        }
        Command::CdfStudy {
            common,
            out,
            cdf_out,
        } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let mut cfg = CdfStudyConfig::default();
            if common.fast {
                cfg.ue_grid_step_m = 2.0;
            }
            let results = sidelink_cli::cdf_study::run_cdf_study(&scenario, &cfg)?;
            let header = vec![
                "sidelink cdf-study".to_string(),
                spec_line("scenario", &scenario),
                spec_line("config", &cfg),
            ];
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    vec![
                        r.layout.clone(),
                        r.pair.to_string(),
                        fmt(r.tx_m[0]),
                        fmt(r.tx_m[1]),
                        fmt(r.tx_m[2]),
                        fmt(r.rx_m[0]),
                        fmt(r.rx_m[1]),
                        fmt(r.rx_m[2]),
                        fmt(r.peb_r_m),
                    ]
                })
                .collect();
            write_csv(
                &out,
                &header,
                &[
                    "layout", "pair", "tx_x_m", "tx_y_m", "tx_z_m", "rx_x_m", "rx_y_m", "rx_z_m",
                    "peb_r_m",
                ],
                &rows,
            )?;
            if let Some(path) = cdf_out {
                let eps = default_epsilons();
                let mut layouts: Vec<String> = Vec::new();
                for r in &results {
                    if !layouts.contains(&r.layout) {
                        layouts.push(r.layout.clone());
                    }
                }
                let mut rows = Vec::new();
                for layout in &layouts {
                    let pebs: Vec<f64> = results
                        .iter()
                        .filter(|r| &r.layout == layout)
                        .map(|r| r.peb_r_m)
                        .collect();
                    let cdf = empirical_cdf(&pebs, &eps);
                    for (e, c) in eps.iter().zip(cdf.iter()) {
                        rows.push(vec![layout.clone(), fmt(*e), fmt(*c)]);
                    }
                }
                write_csv(&path, &header, &["layout", "epsilon_m", "cdf"], &rows)?;
            }
        }
        Command::CodebookEval {
            common,
            power_dbm,
            out,
        } => {
            install_pool(common.workers)?;
            let mut scenario =
                sidelink_cli::load_or_default(common.scenario.as_deref(), common.seed)?;
            if common.fast {
                sidelink_cli::apply_fast_profile(&mut scenario);
            }
            let cfg = CodebookEvalConfig {
                power_dbm,
                ..Default::default()
            };
            let rows = sidelink_cli::codebook_eval::run_codebook_eval(&scenario, &cfg)?;
            let header = vec![
                "sidelink codebook-eval".to_string(),
                spec_line("scenario", &scenario),
                spec_line("config", &cfg),
            ];
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        fmt(r.sigma_pri),
                        fmt(r.peb_random_m),
                        fmt(r.peb_dir_m),
                        fmt(r.peb_dir_der_opt_m),
                        fmt(r.gamma_opt),
                    ]
                })
                .collect();
            write_csv(
                &out,
                &header,
                &[
                    "sigma_pri",
                    "peb_random_m",
                    "peb_dir_m",
                    "peb_dir_der_opt_m",
                    "gamma_opt",
                ],
                &csv_rows,
            )?;
        }
    }
    Ok(())
}
