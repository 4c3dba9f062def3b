use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use mstopo::cli_io::{
    export_cells_csv, export_convergence_csv, export_density_image, export_metadata, parse_config,
};
use mstopo::driver::{
    run_concurrent_multiscale, run_inverse_homog_field, run_metamaterial, threshold_and_evaluate,
    RunOutputs,
};
use mstopo::field_net::NetworkParams;
use mstopo::objectives::Mode;
use mstopo::sampling::upsample_grid;
use mstopo::{Error, Result};

#[derive(Parser)]
#[command(name = "mstopo", about = "Neural multi-scale topology optimization in 2D")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an optimization and export its reports.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the network seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Threshold a checkpoint and report per-cell HS ratios.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render an upsampled density image from a checkpoint.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        #[arg(long, default_value = "render.pgm")]
        out: PathBuf,
    },
}

/// Reverses row order so the highest-y lattice row becomes the top image row.
fn flip_rows(data: &[f64], shape: (usize, usize)) -> Vec<f64> {
    let (h, w) = shape;
    let mut out = Vec::with_capacity(data.len());
    for r in (0..h).rev() {
        out.extend_from_slice(&data[r * w..(r + 1) * w]);
    }
    out
}

fn load_micro_checkpoint(path: &PathBuf) -> Result<NetworkParams> {
    let (params, _, _) = NetworkParams::load(path)?;
    if params.input_dim != 4 {
        return Err(Error::Checkpoint(format!(
            "expected a 4-input micro network checkpoint, found input_dim {}",
            params.input_dim
        )));
    }
    Ok(params)
}

fn render_image(
    params: &NetworkParams,
    grid: &mstopo::sampling::MacroGrid,
    factor: usize,
    path: &PathBuf,
) -> Result<()> {
    let batch = upsample_grid(grid, factor)?;
    let rho = params.forward(&batch)?;
    export_density_image(&flip_rows(&rho, batch.grid_shape), batch.grid_shape, path)
}

fn cmd_optimize(config_path: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let mut config = parse_config(&config_path)?;
    if let Some(seed) = seed {
        config.network.seed = seed;
    }
    std::fs::create_dir_all(&out)?;
    config.checkpoint_dir = Some(out.clone());

    let t0 = Instant::now();
    let RunOutputs {
        params,
        macro_params: _,
        log,
    } = match config.mode {
        Mode::InverseHomogField => run_inverse_homog_field(&config)?,
        Mode::Concurrent => run_concurrent_multiscale(&config)?,
        Mode::Metamaterial => run_metamaterial(&config)?,
    };
    let seconds = t0.elapsed().as_secs_f64();

    export_convergence_csv(&log, &out.join("convergence.csv"))?;
    let evals = threshold_and_evaluate(
        &params,
        &config.grid,
        config.threshold,
        config.simp_p,
        config.e_min,
        config.nu,
    )?;
    export_cells_csv(&evals, &out.join("cells.csv"))?;
    render_image(&params, &config.grid, 1, &out.join("density.pgm"))?;
    export_metadata(&config, params.n_trainable(), seconds, &out.join("metadata.toml"))?;

    let ratios: Vec<f64> = evals.iter().filter_map(|e| e.ratio).collect();
    if !ratios.is_empty() {
        println!(
            "done in {:.1}s; mean HS ratio {:.3} over {} cells",
            seconds,
            ratios.iter().sum::<f64>() / ratios.len() as f64,
            evals.len()
        );
    } else {
        println!("done in {:.1}s", seconds);
    }
    Ok(())
}

fn cmd_evaluate(
    config_path: PathBuf,
    checkpoint: PathBuf,
    threshold: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let config = parse_config(&config_path)?;
    let params = load_micro_checkpoint(&checkpoint)?;
    let threshold = threshold.unwrap_or(config.threshold);
    let evals = threshold_and_evaluate(
        &params,
        &config.grid,
        threshold,
        config.simp_p,
        config.e_min,
        config.nu,
    )?;
    std::fs::create_dir_all(&out)?;
    export_cells_csv(&evals, &out.join("cells.csv"))?;
    for e in &evals {
        match e.ratio {
            Some(r) => println!(
                "cell ({}, {}): vf {:.3} bulk {:.4} bound {:.4} ratio {:.3}",
                e.index.0, e.index.1, e.vf_measured, e.bulk, e.hs_bound, r
            ),
            None => println!("cell ({}, {}): all void after threshold", e.index.0, e.index.1),
        }
    }
    Ok(())
}

fn cmd_render(config_path: PathBuf, checkpoint: PathBuf, factor: usize, out: PathBuf) -> Result<()> {
    let config = parse_config(&config_path)?;
    let params = load_micro_checkpoint(&checkpoint)?;
    render_image(&params, &config.grid, factor, &out)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Fe(_) | Error::NonFinite(_) | Error::Dimension(_) => 3,
        Error::Io(_) | Error::Checkpoint(_) => 4,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MSTOPO_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize { config, seed, out } => cmd_optimize(config, seed, out),
        Command::Evaluate {
            config,
            checkpoint,
            threshold,
            out,
        } => cmd_evaluate(config, checkpoint, threshold, out),
        Command::Render {
            config,
            checkpoint,
            factor,
            out,
        } => cmd_render(config, checkpoint, factor, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
