use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use vizpref_core::coxpref::{fit, geometric_lambdas, path_for_problem, PreparedProblem};
use vizpref_core::data::{load_preference_log, load_visualization_dir, save_visualization, write_preference_log};
use vizpref_core::harness::{render_tables, run_experiment};
use vizpref_core::measures::{compute_features, write_measures_csv};
use vizpref_core::synth::SynthPlan;
use vizpref_core::{ExperimentConfig, FitConfig, MeasureId};

use crate::service::{serve, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "vizpref", version, about = "Visualization quality measures and preference models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the quality measures of every visualization in a directory as CSV.
    Measures {
        #[arg(long)]
        vis: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic visualizations and an oracle preference log.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the user-permutation experiment on a preference log.
    Experiment {
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// Experiment configuration JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Skip printing the text tables.
        #[arg(long)]
        quiet: bool,
    },
    /// Fit the preference model on every trainable preference of a log.
    Fit {
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,
        /// Model JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also trace a regularization path over this many λ values and print the entry order.
        #[arg(long)]
        path: Option<usize>,
    },
    /// Serve the elicitation API and the UI bundle.
    Serve {
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, env = "VIZPREF_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory of static UI files served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Makes pair schedules reproducible.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Measures { vis, out } => {
            let visualizations = load_visualization_dir(&vis)?;
            let features = compute_features(visualizations.values())?;
            let mut sink = output(out.as_deref())?;
            write_measures_csv(&mut sink, features.values())?;
            sink.flush()?;
        }
        Command::Synth { config, out } => {
            let plan: SynthPlan = read_json(&config)?;
            let dataset = plan.run()?;
            let vis_dir = out.join("vis");
            fs::create_dir_all(&vis_dir)?;
            for vis in dataset.visualizations().values() {
                save_visualization(vis, vis_dir.join(format!("{}.json", vis.id())))?;
            }
            write_preference_log(dataset.records(), out.join("preferences.jsonl"))?;
            fs::write(out.join("users.json"), serde_json::to_string_pretty(&plan.all_users()?)?)?;
            eprintln!(
                "wrote {} visualizations and {} preferences ({} trainable) to {}",
                dataset.visualizations().len(),
                dataset.records().len(),
                dataset.trainable_count(),
                out.display()
            );
        }
        Command::Experiment {
            prefs,
            vis,
            config,
            out,
            workers,
            quiet,
        } => {
            let dataset = load_preference_log(&prefs, &vis)?;
            let mut cfg: ExperimentConfig = match config {
                Some(path) => read_json(&path)?,
                None => ExperimentConfig::default(),
            };
            if workers.is_some() {
                cfg.workers = workers;
            }
            let report = run_experiment(&dataset, &cfg)?;
            if let Some(path) = out {
                fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
            }
            if !quiet {
                print!("{}", render_tables(&report));
            }
        }
        Command::Fit {
            prefs,
            vis,
            lambda,
            out,
            path,
        } => {
            let dataset = load_preference_log(&prefs, &vis)?;
            let features = compute_features(dataset.visualizations().values())?;
            let cfg = FitConfig::default();
            let model = fit(&dataset, &features, lambda, &cfg)?;
            let d = model.diagnostics();
            println!(
                "λ = {lambda}: objective {:.6}, {} iterations, converged {}, separable {}",
                d.objective, d.iterations, d.converged, d.separable
            );
            for (m, b) in model.active_measures().iter().zip(model.beta()) {
                println!("  {:<10} β = {b:+.6}", m.name());
            }
            if let Some(count) = path {
                let problem = PreparedProblem::new(dataset.records(), &features, &MeasureId::ALL)?;
                let lambdas = geometric_lambdas(problem.critical_lambda(), 1e-3, count.max(1));
                let traced = path_for_problem(&problem, &lambdas, &cfg)?;
                println!("λ_max = {:.6}", traced.critical_lambda);
                for p in &traced.points {
                    let names: Vec<&str> = p.active.iter().map(|m| m.name()).collect();
                    println!("  λ = {:<12.6} active [{}]", p.lambda, names.join(", "));
                }
                let order: Vec<&str> = traced.entry_order().iter().map(|m| m.name()).collect();
                println!("entry order: {}", order.join(" → "));
            }
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&model)?)?;
            }
        }
        Command::Serve {
            vis,
            log,
            port,
            host,
            ui,
            seed,
        } => {
            let config = ServiceConfig {
                vis_dir: vis,
                log_path: log,
                ui_dir: ui,
                seed,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(&config, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
