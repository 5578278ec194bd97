use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use robquant::checkpoint::Checkpoint;
use robquant::data::DataSplit;
use robquant::harness::{
    Cell, ExperimentConfig, Report, ReportRow, default_ratios, error_curves, format_sig6, gradcheck, kl_propagation,
    parallel_map, probe_single_level, ptq_pipeline, sweep_bits, sweep_step_ratio, SweepMode,
};
use robquant::trainer::{QatPlan, evaluate, qat_finetune, train};
use robquant::Error;

const COMMANDS: &[(&str, &str)] = &[
    ("train", "train one model per seed and report validation accuracy"),
    ("ptq", "post-training quantization at bits_w / bits_a"),
    ("sweep-bits", "accuracy of one checkpoint across weight bit-widths"),
    ("sweep-step", "accuracy versus scaled weight step size"),
    ("probe-level", "accuracy with only one quantization level applied"),
    ("kl", "per-layer KL divergence between FP and weight-quantized outputs"),
    ("error-curves", "closed-form quantization error of normal and clamped inputs"),
    ("gradcheck", "finite-difference check of every autodiff op"),
];

/// Largest tolerated relative error in `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

enum Failure {
    Usage(String),
    Check(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

fn cli() -> Command {
    let mut root = Command::new("robquant")
        .about("Quantization robustness experiments on small MLP/CNN models")
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").value_name("PATH").global(true).help("key = value config file"))
        .arg(Arg::new("out").long("out").value_name("PATH").global(true).help("CSV output (default stdout)"))
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .global(true)
                .help("worker threads for independent seeds"),
        )
        .arg(
            Arg::new("no-timestamp")
                .long("no-timestamp")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("omit the generated_unix header line"),
        );
    for key in ExperimentConfig::keys() {
        root = root.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .global(true)
                .help_heading("Config overrides"),
        );
    }
    for (name, about) in COMMANDS {
        root = root.subcommand(Command::new(*name).about(*about));
    }
    root
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(matches: &ArgMatches) -> Result<(), Failure> {
    let (command, sub) = matches.subcommand().expect("subcommand required");
    let mut cfg = match sub.get_one::<String>("config") {
        Some(p) => ExperimentConfig::load(Path::new(p))?,
        None => ExperimentConfig::default(),
    };
    let overrides: Vec<(String, String)> = ExperimentConfig::keys()
        .filter_map(|k| sub.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    cfg.apply_overrides(&overrides)?;
    let jobs = sub.get_one::<usize>("jobs").copied().unwrap_or(1).max(1);

    let mut check = Ok(());
    let report = match command {
        "train" => cmd_train(&cfg, jobs)?,
        "ptq" => per_seed(&cfg, jobs, |ckpt, data| {
            let r = ptq_pipeline(ckpt, data, cfg.bits_or_fp("bits_w")?, cfg.bits_or_fp("bits_a")?, cfg.fit()?)?;
            Ok(single(r.row()))
        })?,
        "sweep-bits" => {
            let bits: Vec<u32> = cfg.list("bits")?;
            let mode = match cfg.get("mode") {
                "ptq" => SweepMode::Ptq,
                "qat" => SweepMode::QatTrained,
                other => return Err(Failure::Usage(format!("unknown mode `{other}`, expected ptq or qat"))),
            };
            per_seed(&cfg, jobs, |ckpt, data| {
                if mode == SweepMode::QatTrained && ckpt.qat.is_none() {
                    let plan = QatPlan::pinned(&ckpt.spec, cfg.parse_value("qat.bits")?, cfg.bits_or_fp("qat.bits_a")?);
                    let mut tc = cfg.train_config(seed_of(ckpt))?;
                    tc.epochs = cfg.parse_value("qat.epochs")?;
                    let tuned = qat_finetune(ckpt, &plan, data, &tc)?;
                    return sweep_bits(&tuned, data, &bits, mode, cfg.fit()?);
                }
                sweep_bits(ckpt, data, &bits, mode, cfg.fit()?)
            })?
        }
        "sweep-step" => {
            let ratios = match cfg.get("ratios") {
                "" => default_ratios(),
                _ => cfg.list("ratios")?,
            };
            let bits = cfg
                .bits_or_fp("bits_w")?
                .ok_or_else(|| Failure::Usage("sweep-step needs numeric bits_w".into()))?;
            per_seed(&cfg, jobs, |ckpt, data| {
                let (mut r, _) = sweep_step_ratio(ckpt, data, bits, &ratios, cfg.fit()?)?;
                let seed = seed_of(ckpt);
                for (k, _) in &mut r.summary {
                    *k = format!("seed_{seed}.{k}");
                }
                Ok(r)
            })?
        }
        "probe-level" => {
            let bits = cfg
                .bits_or_fp("bits_w")?
                .ok_or_else(|| Failure::Usage("probe-level needs numeric bits_w".into()))?;
            per_seed(&cfg, jobs, |ckpt, data| probe_single_level(ckpt, data, bits, cfg.fit()?))?
        }
        "kl" => {
            let n: usize = cfg.parse_value("probe.n")?;
            per_seed(&cfg, jobs, |ckpt, data| {
                kl_propagation(ckpt, cfg.bits_or_fp("bits_w")?, &data.val.calibration_subset(n), cfg.fit()?)
            })?
        }
        "error-curves" => {
            let (report, dom) = error_curves(&cfg.grid("d_grid")?, &cfg.list("bits_list")?)?;
            if !dom.passed() {
                check = Err(Failure::Check(format!("dominance violated at (d, bits) {:?}", dom.violations)));
            }
            report
        }
        "gradcheck" => {
            let report = gradcheck(
                cfg.parse_value("gradcheck.points")?,
                cfg.parse_value("seed")?,
                cfg.parse_value("gradcheck.epsilon")?,
            )?;
            let bad: Vec<String> = report
                .rows
                .iter()
                .filter(|r| !(r.real("max_rel_error").unwrap_or(f64::INFINITY) <= GRADCHECK_TOLERANCE))
                .filter_map(|r| r.get("op").map(Cell::render))
                .collect();
            if !bad.is_empty() {
                check = Err(Failure::Check(format!("gradient mismatch above {GRADCHECK_TOLERANCE:e} in {bad:?}")));
            }
            report
        }
        other => return Err(Failure::Usage(format!("unknown command `{other}`"))),
    };

    let mut header = vec![("command".to_string(), command.to_string())];
    header.extend(cfg.resolved());
    let timestamp = !sub.get_flag("no-timestamp");
    match sub.get_one::<String>("out") {
        Some(p) => report.write_csv(BufWriter::new(File::create(p).map_err(Error::from)?), &header, timestamp)?,
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            report.write_csv(&mut lock, &header, timestamp)?;
            lock.flush().map_err(Error::from)?;
        }
    }
    check
}

fn single(row: ReportRow) -> Report {
    Report {
        rows: vec![row],
        summary: Vec::new(),
    }
}

fn seed_of(ckpt: &Checkpoint) -> u64 {
    ckpt.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
}

/// `model.rqck` → `model.s3.rqck` when several seeds share one path.
fn seeded_path(path: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.s{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.s{seed}"),
    };
    path.with_file_name(name)
}

/// Loads the checkpoint of `seed` when `checkpoint` is set and exists; otherwise trains it
/// (and saves it there, if a path was given).
fn checkpoint_for(cfg: &ExperimentConfig, data: &DataSplit, seed: u64, many: bool) -> Result<Checkpoint, Error> {
    let path = cfg.checkpoint_path().map(|p| seeded_path(&p, seed, many));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return Checkpoint::load(p);
    }
    let ckpt = train(&cfg.model(data)?, data, &cfg.train_config(seed)?)?;
    if let Some(p) = path {
        ckpt.save(&p)?;
    }
    Ok(ckpt)
}

fn with_seed(seed: u64, row: &ReportRow) -> ReportRow {
    let mut out = ReportRow::new().with("seed", seed as i64);
    out.cells.extend(row.cells.iter().cloned());
    out
}

fn merge(parts: Vec<(u64, Report)>) -> Result<Report, Error> {
    let mut out = Report::default();
    for (seed, r) in parts {
        for row in &r.rows {
            out.push(with_seed(seed, row))?;
        }
        out.summary.extend(r.summary);
    }
    Ok(out)
}

fn per_seed<F>(cfg: &ExperimentConfig, jobs: usize, f: F) -> Result<Report, Failure>
where
    F: Fn(&Checkpoint, &DataSplit) -> Result<Report, Error> + Sync,
{
    let data = cfg.data()?;
    let seeds = cfg.seeds()?;
    let many = seeds.len() > 1;
    let parts = parallel_map(jobs, &seeds, |&seed| {
        let ckpt = checkpoint_for(cfg, &data, seed, many)?;
        Ok((seed, f(&ckpt, &data)?))
    })?;
    Ok(merge(parts)?)
}

fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<Report, Failure> {
    let data = cfg.data()?;
    let spec = cfg.model(&data)?;
    let seeds = cfg.seeds()?;
    let many = seeds.len() > 1;
    let parts = parallel_map(jobs, &seeds, |&seed| {
        let tc = cfg.train_config(seed)?;
        let ckpt = train(&spec, &data, &tc)?;
        if let Some(p) = cfg.checkpoint_path() {
            ckpt.save(&seeded_path(&p, seed, many))?;
        }
        let acc = evaluate(&ckpt, &data.val, None)?;
        let row = ReportRow::new()
            .with("best_epoch", ckpt.meta.get("epoch").cloned().unwrap_or_default())
            .with("val_accuracy", acc)
            .with("parameters", spec.param_count())
            .with("config_hash", ckpt.meta.get("config_hash").cloned().unwrap_or_default());
        Ok((seed, single(row)))
    })?;
    let mut report = merge(parts)?;
    let accs = report.column("val_accuracy");
    report
        .summary
        .push(("mean_val_accuracy".into(), format_sig6(accs.iter().sum::<f64>() / accs.len() as f64)));
    Ok(report)
}
