use kflows_cli::config::{ExperimentConfig, Kind};
use kflows_cli::{compare, run, CliError};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
kflows: kernel-flow experiments

USAGE:
  kflows swissroll  [FLAGS]   standalone kernel learning on the two-spiral set
  kflows train-cnn  [FLAGS]   digit CNN with optional KF regularization
  kflows grad-check [FLAGS]   finite-difference check of the loss gradients
  kflows compare --config A.cfg --config B.cfg --seeds 1,2,3 [FLAGS]

FLAGS:
  --config PATH          config file (defaults apply when omitted;
                         compare accepts the flag repeatedly)
  --seed N               experiment seed
  --out DIR              output directory
  --width-factor F       channel width multiplier of the CNN
  --override sec.key=v   override any config field (repeatable)
  --seeds a,b,c          seeds for compare
  -h, --help             this text

Outputs land in --out: config.resolved, metrics.csv, trajectory.csv,
checkpoints, and (swissroll) points_<step>.csv clouds.";

struct Args {
    subcommand: String,
    configs: Vec<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    width_factor: Option<f64>,
    overrides: Vec<String>,
    seeds: Vec<u64>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let Some(subcommand) = argv.first() else {
        return Err("missing subcommand".to_string());
    };
    let mut args = Args {
        subcommand: subcommand.clone(),
        configs: Vec::new(),
        seed: None,
        out: None,
        width_factor: None,
        overrides: Vec::new(),
        seeds: Vec::new(),
    };
    let mut it = argv[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String, String> {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{name} needs a value"))
        };
        match flag.as_str() {
            "--config" => args.configs.push(PathBuf::from(value("--config")?)),
            "--seed" => {
                args.seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|e| format!("bad --seed: {e}"))?,
                )
            }
            "--out" => args.out = Some(PathBuf::from(value("--out")?)),
            "--width-factor" => {
                args.width_factor = Some(
                    value("--width-factor")?
                        .parse()
                        .map_err(|e| format!("bad --width-factor: {e}"))?,
                )
            }
            "--override" => args.overrides.push(value("--override")?),
            "--seeds" => {
                args.seeds = value("--seeds")?
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("bad --seeds: {e}"))?
            }
            "-h" | "--help" => return Err(String::new()),
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(args)
}

fn load_config(args: &Args, kind: Kind, path: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    // The subcommand owns the experiment kind; a conflicting file is an error.
    if path.is_some() && cfg.kind != kind && has_explicit_kind(path)? {
        return Err(CliError::Config(format!(
            "config file says kind = {}, subcommand says {}",
            cfg.kind.as_str(),
            kind.as_str()
        )));
    }
    cfg.kind = kind;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(w) = args.width_factor {
        cfg.width_factor = w;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn has_explicit_kind(path: Option<&PathBuf>) -> Result<bool, CliError> {
    let Some(p) = path else { return Ok(false) };
    let text =
        std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    let mut in_experiment = false;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') {
            in_experiment = line == "[experiment]";
        } else if in_experiment && line.starts_with("kind") {
            return Ok(true);
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(msg) => {
            if msg.is_empty() {
                println!("{USAGE}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {msg}\n\n{USAGE}");
            return ExitCode::FAILURE;
        }
    };

    let result = match args.subcommand.as_str() {
        "swissroll" | "train-cnn" | "grad-check" => {
            let kind = Kind::parse(&args.subcommand).expect("matched above");
            single_run(&args, kind)
        }
        "compare" => run_compare(&args),
        other => {
            eprintln!("error: unknown subcommand '{other}'\n\n{USAGE}");
            return ExitCode::FAILURE;
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn single_run(args: &Args, kind: Kind) -> Result<ExitCode, CliError> {
    if args.configs.len() > 1 {
        return Err(CliError::Config(
            "single runs take at most one --config (use compare for several)".into(),
        ));
    }
    let cfg = load_config(args, kind, args.configs.first())?;
    let record = run(&cfg)?;
    println!("outputs in {}", record.out_dir.display());
    if let Some(e) = record.final_test_error {
        println!("final test error: {e:.4}");
    }
    if let Some((initial, final_e2)) = record.held_out_e2 {
        println!("held-out e2: {initial:.5} -> {final_e2:.5}");
    }
    println!("wall time: {:.1}s", record.wall_time.as_secs_f64());
    if record.grad_check_passed == Some(false) {
        eprintln!("grad check FAILED");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_compare(args: &Args) -> Result<ExitCode, CliError> {
    if args.configs.is_empty() {
        return Err(CliError::Config("compare needs --config files".into()));
    }
    let seeds = if args.seeds.is_empty() {
        vec![args.seed.unwrap_or(0)]
    } else {
        args.seeds.clone()
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/compare"));
    let mut configs = Vec::with_capacity(args.configs.len());
    for path in &args.configs {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "config".to_string());
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_text(&text)?;
        if let Some(w) = args.width_factor {
            cfg.width_factor = w;
        }
        for o in &args.overrides {
            cfg.apply_override(o)?;
        }
        configs.push((name, cfg));
    }
    let rows = compare(&configs, &seeds, &out)?;
    println!(
        "{:<24} {:>5} {:>9} {:>12} {:>12} {:>12}",
        "config", "runs", "failures", "mean", "std", "median"
    );
    for r in &rows {
        println!(
            "{:<24} {:>5} {:>9} {:>12.4} {:>12.4} {:>12.4}",
            r.name, r.runs, r.failures, r.mean_test_error, r.std_test_error, r.median_test_error
        );
    }
    println!("summary in {}", out.join("summary.csv").display());
    Ok(ExitCode::SUCCESS)
}
