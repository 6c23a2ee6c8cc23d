use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fleming_viot::config::{parse_config, ScenarioConfig};
use fleming_viot::dynamics::DynamicsSpec;
use fleming_viot::io::{run_experiment, write_outputs, Overrides};
use fleming_viot::kernels::mean_field_identity_residual;
use fleming_viot::oracle::carre_du_champ_jump;
use fleming_viot::rng::ReplicaRng;
use fleming_viot::stats::{backward_error_trace, discrete_derivative};
use fleming_viot::types::EmpiricalMeasure;

#[derive(Parser)]
#[command(name = "fv", about = "Mean-field Fleming-Viot particle experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full N-grid of a scenario and write CSV + summary files
    Run {
        config: PathBuf,
        /// override the replica count of the scenario
        #[arg(long)]
        replicas: Option<usize>,
        /// override the base seed of the scenario
        #[arg(long)]
        seed: Option<u64>,
        /// output directory (default: alongside the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact oracle quantities for a finite-chain scenario
    Oracle { config: PathBuf },
    /// Run structural self-checks of the scenario (identities,
    /// derivative envelopes, backward trace)
    Diag {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &PathBuf) -> fleming_viot::Result<ScenarioConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn dispatch(cli: Cli) -> fleming_viot::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            replicas,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            let overrides = Overrides { replicas, seed };
            let (records, summary) = run_experiment(&cfg, &overrides)?;
            let dir = out
                .or_else(|| cfg.outputs.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| {
                    config
                        .parent()
                        .map(|p| p.to_path_buf())
                        .unwrap_or_else(|| PathBuf::from("."))
                });
            write_outputs(&dir, &cfg.name, &records, &summary)?;
            for f in &summary.failures {
                eprintln!("FAIL {f}");
            }
            for a in &summary.assertions {
                println!(
                    "{} {}: {}",
                    if a.pass { "PASS" } else { "FAIL" },
                    a.name,
                    a.detail
                );
            }
            println!(
                "wrote {}/{{{}_results.csv,{}_summary.json}}",
                dir.display(),
                cfg.name,
                cfg.name
            );
            Ok(summary.all_pass())
        }
        Command::Oracle { config } => {
            let cfg = load(&config)?;
            let oracle = cfg
                .oracle()?
                .ok_or(fleming_viot::Error::OracleUnavailable)?;
            let f = cfg.test_function_value()?;
            let eig = oracle.principal_eigen()?;
            println!("lambda = {:.12}", eig.lambda);
            println!("h      = {:?}", eig.h);
            println!("qsd    = {:?}", eig.qsd);
            let diag = oracle.assumption_diagnostics(&eig, &f, 10.0, 0.1)?;
            println!("c_minus = {:.6}", diag.c_minus);
            println!("c_plus  = {:.6}", diag.c_plus);
            println!("w1 tail log-slope = {:.6}", diag.fitted_decay_rate);
            Ok(true)
        }
        Command::Diag { config, seed } => {
            let cfg = load(&config)?;
            let base_seed = seed.unwrap_or(cfg.base_seed);
            let mut ok = true;
            let mut check = |name: &str, pass: bool, detail: String| {
                println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
                ok &= pass;
            };

            let n = *cfg.n_grid.last().unwrap();
            let engine_config = cfg.engine_config(n)?;
            let f = cfg.test_function_value()?;
            let mut rng = ReplicaRng::new(base_seed, cfg.fingerprint(), n, 0);
            let end = fleming_viot::engine::run(&engine_config, &mut rng, |_, _| {})?;
            let eta = EmpiricalMeasure::new(end.positions)?;
            let resid =
                mean_field_identity_residual(&engine_config.kernel, &engine_config.potential, &eta, &f);
            check(
                "mean_field_identity",
                resid < 1e-10,
                format!("residual {resid:.3e} on the terminal sample"),
            );

            if let Some(oracle) = cfg.oracle()? {
                let d = oracle.dim();
                if let DynamicsSpec::FiniteChain(g) = &engine_config.dynamics {
                    let mut worst: f64 = 0.0;
                    for x in 0..d {
                        let gamma = carre_du_champ_jump(g, &f, x)?;
                        worst = worst.max(if gamma >= 0.0 { 0.0 } else { gamma.abs() });
                    }
                    check(
                        "carre_du_champ_nonnegative",
                        worst == 0.0,
                        format!("worst negative part {worst:.3e}"),
                    );
                }
                let counts = eta.occupancy(d)?;
                let counts: Vec<f64> = counts.weights().iter().map(|w| w * n as f64).collect();
                if counts.iter().all(|&c| c >= 1.0) {
                    let dd = discrete_derivative(&oracle, &counts, 0, d - 1, 1.0, &f, 0.0)?;
                    check(
                        "discrete_derivative_envelope",
                        dd.second.abs() <= dd.envelope * (1.0 + 1e-9),
                        format!("|{:.4e}| vs envelope {:.4e}", dd.second, dd.envelope),
                    );
                }
                let mut rng = ReplicaRng::new(base_seed, cfg.fingerprint(), n, 1);
                let trace = backward_error_trace(&oracle, &engine_config, &f, &mut rng)?;
                let drift = trace.last().unwrap().1 - trace.first().unwrap().1;
                check(
                    "backward_error_trace",
                    drift.is_finite(),
                    format!("phi_T - phi_0 = {drift:.4e} over {} points", trace.len()),
                );
            }

            if let DynamicsSpec::Diffusion { drift, .. } = &engine_config.dynamics {
                let m = (-engine_config.potential.min_value()).max(0.0);
                let grid: Vec<f64> = (5..=50).map(|k| k as f64).collect();
                let res = fleming_viot::dynamics::lyapunov_residual(
                    drift,
                    m,
                    &engine_config.potential,
                    0.0,
                    &grid,
                )?;
                let worst = res.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                check(
                    "lyapunov_residual_outside",
                    worst <= 0.0,
                    format!("max residual {worst:.4e} on |x| in [5, 50]"),
                );
            }

            Ok(ok)
        }
    }
}
