use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use shotnoise::verify::{run_on, Criterion, CRITERIA};
use shotnoise::ShotNoiseModel;

use crate::artifacts::Outcome;
use crate::commands::{self, read_config};
use crate::config::{load_model, resolve, VerifyRunConfig};
use crate::{CliError, RunArgs};

pub const ALL: [&str; 8] = ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8"];

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            files.push((name, fs::read(&path)?));
        }
    }
    files.sort();
    Ok(files)
}

/// Runs `run` twice into sibling directories and compares the CSV bytes.
fn twice(
    dir: &Path,
    name: &str,
    config: &serde_json::Value,
    threads: [Option<usize>; 2],
    run: fn(&RunArgs) -> Result<Outcome, CliError>,
) -> Result<(bool, String), CliError> {
    let cfg_path = dir.join(format!("{name}.json"));
    fs::create_dir_all(dir)?;
    fs::write(
        &cfg_path,
        serde_json::to_string_pretty(config).map_err(|e| CliError::Internal(e.to_string()))?,
    )?;
    let mut outputs = Vec::new();
    for (i, t) in threads.into_iter().enumerate() {
        let args = RunArgs {
            config: cfg_path.clone(),
            seed: None,
            out: dir.join(format!("{name}_run{}", i + 1)),
            threads: t,
        };
        let start = Instant::now();
        run(&args)?.finish(name, &args, start.elapsed().as_secs_f64())?;
        outputs.push(csv_files(&args.out)?);
    }
    let same = !outputs[0].is_empty() && outputs[0] == outputs[1];
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    Ok((same, format!("{name}: {}", names.join("+"))))
}

/// A8: byte-identical CSV artifacts from repeated `simulate` and `mc` runs.
fn determinism(dir: &Path, benchmark: &Path, seed: u64, target: f64) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let bench = benchmark.canonicalize()?;
    let sim = serde_json::json!({
        "command": "simulate", "model_file": bench, "seed": seed, "epsilon": 0.01,
        "control": {"time_grid": [0.0, 0.5, 1.0], "values": [[1.5], [2.5]]}
    });
    let mc = serde_json::json!({
        "command": "mc", "model_file": bench, "seed": seed, "method": "naive",
        "event": [{"coord": 0, "value": target}], "epsilons": [0.2, 0.1], "replications": 20000
    });
    let (a, da) = twice(dir, "simulate", &sim, [None, None], commands::simulate)?;
    let (b, db) = twice(dir, "mc", &mc, [Some(1), None], commands::mc)?;
    Ok(Criterion {
        id: "A8".into(),
        name: "repeated runs give byte-identical CSVs".into(),
        passed: a && b,
        measured: f64::from(u8::from(a && b)),
        threshold: 1.0,
        detail: format!("{da} identical={a}; {db} identical={b}"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn verify(args: &RunArgs) -> Result<Outcome, CliError> {
    let (mut cfg, mut inputs, base) = read_config::<VerifyRunConfig>(args)?;
    cfg.check()?;
    if let Some(s) = args.seed {
        cfg.suite.seed = s;
    }
    cfg.suite.threads = args.threads.or(cfg.suite.threads);
    let bench_path: PathBuf = resolve(base, &cfg.benchmark);
    let benchmark: ShotNoiseModel = load_model(&None, &Some(bench_path.clone()), Path::new(""), &mut inputs)?;
    shotnoise::verify::check_benchmark(&benchmark)?;

    let selected: Vec<&str> = match &cfg.criteria {
        Some(ids) => ALL.iter().copied().filter(|a| ids.iter().any(|i| i == a)).collect(),
        None => ALL.to_vec(),
    };
    let mut out = Outcome::new(&args.out, inputs, Some(cfg.suite.seed))?;
    let mut results = Vec::new();
    for id in selected {
        let c = if CRITERIA.contains(&id) {
            run_on(id, &cfg.suite, &benchmark)?
        } else {
            determinism(
                &args.out.join("determinism"),
                &bench_path,
                cfg.suite.seed,
                cfg.suite.target,
            )?
        };
        println!("{}", c.line());
        results.push(c);
    }
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect();
    let summary = if failed.is_empty() {
        format!("all {} criteria passed", results.len())
    } else {
        format!(
            "{} of {} criteria failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )
    };
    println!("{summary}");

    let mut table: String = results.iter().map(|c| c.line() + "\n").collect();
    table.push_str(&summary);
    table.push('\n');
    out.write("verify.txt", table.as_bytes())?;
    out.write_json("verify.json", &results)?;
    if !failed.is_empty() {
        out.failure = Some(CliError::Failed(summary));
    }
    Ok(out)
}
