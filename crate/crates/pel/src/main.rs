//! Command-line front end: single fits on CSV data, Monte Carlo experiments
//! from TOML configs, and a numerical self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use pel::config::{ExperimentConfig, FitConfig};
use pel::elcore::{default_theta0, fit, kkt_residual, log_star, log_star_d1, log_star_d2, Mode};
use pel::inference::{compute_inference, wald_interval};
use pel::models::{check_jet, Dataset, EstimatingModel};
use pel::penalty::{penalty_derivative, penalty_value, PenaltySpec};
use pel::simlab::{replicates_csv, run_experiment, SplitMix64};

const VERSION: &str = env!("CARGO_PKG_VERSION");

// exit codes: 2 config trouble, 3 data trouble, 4 solver trouble
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "pel", version, about = "Doubly-penalized empirical likelihood")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicate parallelism (affects wall time only).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Restrict experiment summary output to one format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Md,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one model to a CSV dataset and write fit + inference JSON.
    Fit {
        /// CSV dataset, one observation per line.
        #[arg(long)]
        data: PathBuf,
        /// Fit config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo experiment and write summary tables.
    Experiment {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the numerical self-tests (derivatives, pseudo-log, KKT).
    Check,
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

fn sha256_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_config(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))
}

fn cmd_fit(data_path: &Path, config_path: &Path, out_path: &Path) -> Result<(), Failure> {
    let config_text = read_config(config_path)?;
    let cfg = FitConfig::from_toml(&config_text)
        .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", config_path.display())))?;
    let model = cfg.model.to_model().map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let data = Dataset::<f64>::from_csv_path(data_path)
        .map_err(|e| fail(EXIT_DATA, format!("{}: {e}", data_path.display())))?;
    if data.row_len() != model.expected_row_len() {
        return Err(fail(
            EXIT_DATA,
            format!(
                "{}: rows have {} fields, model expects {}",
                data_path.display(),
                data.row_len(),
                model.expected_row_len()
            ),
        ));
    }
    let solver_cfg =
        cfg.solver.to_config(data.n()).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let p1 = cfg.penalty1.to_spec("penalty1").map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let p2 = cfg.penalty2.to_spec("penalty2").map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let theta0 =
        default_theta0(&model, &data).map_err(|e| fail(EXIT_SOLVER, e.to_string()))?;
    let result = fit(&model, &data, &p1, &p2, &solver_cfg, &theta0, cfg.mode)
        .map_err(|e| fail(EXIT_SOLVER, e.to_string()))?;

    let inference = if cfg.inference {
        match compute_inference(&model, &data, &result) {
            Ok(inf) => {
                let intervals: Vec<_> = inf
                    .s_set
                    .iter()
                    .map(|&k| {
                        let (lo, hi) = wald_interval(&inf, k, cfg.level).expect("k from s_set");
                        json!({ "index": k, "level": cfg.level, "lo": lo, "hi": hi })
                    })
                    .collect();
                json!({ "ok": inf, "intervals": intervals })
            }
            Err(e) => json!({ "error": e.to_string() }),
        }
    } else {
        serde_json::Value::Null
    };

    let doc = json!({
        "version": VERSION,
        "config_sha256": sha256_hex(&config_text),
        "command": "fit",
        "fit": result,
        "inference": inference,
    });
    std::fs::write(out_path, serde_json::to_string_pretty(&doc).expect("serialize"))
        .map_err(|e| fail(EXIT_DATA, format!("cannot write {}: {e}", out_path.display())))?;
    println!(
        "fit: support={} equations={} objective={:.6} converged={}",
        result.theta_support.len(),
        result.lambda_support.len(),
        result.objective,
        result.converged
    );
    Ok(())
}

fn cmd_experiment(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    format: Option<Format>,
) -> Result<(), Failure> {
    let config_text = read_config(config_path)?;
    let cfg = ExperimentConfig::from_toml(&config_text)
        .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", config_path.display())))?;
    let spec = cfg.to_spec(seed).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let hash = sha256_hex(&config_text);
    let out = run_experiment(&spec).map_err(|e| fail(EXIT_SOLVER, e.to_string()))?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| fail(EXIT_DATA, format!("cannot create {}: {e}", out_dir.display())))?;
    let stamp = format!("pel {VERSION} config sha256 {hash} seed {}", spec.base_seed);
    let write = |name: &str, body: String| -> Result<(), Failure> {
        let path = out_dir.join(name);
        std::fs::write(&path, body)
            .map_err(|e| fail(EXIT_DATA, format!("cannot write {}: {e}", path.display())))
    };
    let want = |f: Format| format.is_none() || format == Some(f);
    if want(Format::Csv) {
        write("summary.csv", format!("# {stamp}\n{}", out.summary.to_csv()))?;
    }
    if want(Format::Md) {
        write("summary.md", format!("<!-- {stamp} -->\n{}", out.summary.to_markdown()))?;
    }
    if want(Format::Json) {
        let doc = json!({
            "version": VERSION,
            "config_sha256": hash,
            "seed": spec.base_seed,
            "summary": out.summary,
        });
        write("summary.json", serde_json::to_string_pretty(&doc).expect("serialize"))?;
    }
    write("replicates.csv", format!("# {stamp}\n{}", replicates_csv(&out.replicates)))?;
    print!("{}", out.summary.to_markdown());
    Ok(())
}

fn check_line(name: &str, ok: bool, detail: String) -> bool {
    println!("{}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_check() -> Result<(), Failure> {
    let mut all = true;

    let eps = 0.02f64;
    let lower = |z: f64| eps.ln() - 1.5 + 2.0 * z / eps - z * z / (2.0 * eps * eps);
    let v = (log_star(eps, eps) - lower(eps)).abs();
    let d1 = (log_star_d1(eps, eps) - (2.0 / eps - 1.0 / eps)).abs();
    let d2 = (log_star_d2(eps - 1e-30, eps) + 1.0 / (eps * eps)).abs();
    all &= check_line(
        "log_star C2 at the knot",
        v < 1e-12 && d1 < 1e-12 && d2 < 1e-12,
        format!("gaps {v:.2e} {d1:.2e} {d2:.2e}"),
    );

    let mut worst: f64 = 0.0;
    for spec in [
        PenaltySpec::l1(0.5).unwrap(),
        PenaltySpec::scad(1.0).unwrap(),
        PenaltySpec::mcp(0.8).unwrap(),
    ] {
        let h = 1e-5;
        for i in 1..200 {
            let t = 10.0 * spec.tau * i as f64 / 200.0;
            if (t - spec.tau).abs() < 10.0 * h || (t - spec.shape * spec.tau).abs() < 10.0 * h {
                continue;
            }
            let fd = (penalty_value(&spec, t + h).unwrap() - penalty_value(&spec, t - h).unwrap())
                / (2.0 * h);
            worst = worst.max((fd - penalty_derivative(&spec, t).unwrap()).abs());
        }
    }
    all &= check_line("penalty derivatives vs finite differences", worst <= 1e-6, format!("max gap {worst:.2e}"));

    let mut rng = SplitMix64::new(12345);
    let mut worst: f64 = 0.0;
    let models = [
        EstimatingModel::<f64>::mean(3).unwrap(),
        EstimatingModel::<f64>::linear_regression(3).unwrap(),
        EstimatingModel::<f64>::qif(3, 0.7).unwrap(),
    ];
    for model in &models {
        for _ in 0..30 {
            let row: Vec<f64> =
                (0..model.expected_row_len()).map(|_| rng.next_normal()).collect();
            let theta: Vec<f64> = (0..model.p).map(|_| rng.next_normal()).collect();
            worst = worst.max(check_jet(model, &row, &theta, 1e-5).unwrap());
        }
    }
    all &= check_line("model Jacobians vs finite differences", worst <= 1e-6, format!("max gap {worst:.2e}"));

    let model = EstimatingModel::<f64>::mean(1).unwrap();
    let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![2.0 + rng.next_normal()]).collect();
    let data = Dataset::from_rows(rows).unwrap();
    let p0 = PenaltySpec::l1(0.0).unwrap();
    let mut cfg = pel::PelConfig64::for_sample_size(data.n());
    cfg.xi = 1e-8;
    cfg.zero_threshold = 1e-6;
    let mean = (0..data.n()).map(|i| data.row(i)[0]).sum::<f64>() / data.n() as f64;
    let res = fit(&model, &data, &p0, &p0, &cfg, &[mean + 0.3], Mode::El)
        .map_err(|e| fail(EXIT_SOLVER, e.to_string()))?;
    let kkt = kkt_residual(&model, &data, &res.theta_hat, &res.lambda_hat, cfg.epsilon)
        .map_err(|e| fail(EXIT_SOLVER, e.to_string()))?;
    all &= check_line("EL stationarity on a mean fit", kkt <= 1e-4, format!("kkt {kkt:.2e}"));

    if all {
        Ok(())
    } else {
        Err(fail(EXIT_SOLVER, "self-check failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // affects wall time only; replicate results are seed-determined
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match &cli.cmd {
        Cmd::Fit { data, config, out } => cmd_fit(data, config, out),
        Cmd::Experiment { config, out_dir } => {
            cmd_experiment(config, out_dir, cli.seed, cli.format)
        }
        Cmd::Check => cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
