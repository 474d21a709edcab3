//! One PASS/FAIL line per acceptance criterion. A1-A7 run in-process against
//! the library; A8 drives the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use shotnoise::verify::{run, VerifyConfig, CRITERIA};

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> (bool, String) {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut detail = Vec::new();
    let mut ok = true;
    for (sub, cfg, threads) in [
        ("simulate", "simulate.json", ["2", "1"]),
        ("mc", "mc_is.json", ["1", "4"]),
    ] {
        let mut outs = Vec::new();
        for (i, t) in threads.iter().enumerate() {
            let out = tmp.path().join(format!("{sub}{i}"));
            let status = Command::new(env!("CARGO_BIN_EXE_shotnoise"))
                .args([sub, "--config"])
                .arg(configs.join(cfg))
                .arg("--out")
                .arg(&out)
                .args(["--threads", t])
                .status()
                .unwrap();
            ok &= status.success();
            outs.push(csv_bytes(&out));
        }
        let same = !outs[0].is_empty() && outs[0] == outs[1];
        ok &= same;
        let files: Vec<&str> = outs[0].iter().map(|f| f.0.as_str()).collect();
        detail.push(format!("{sub} [{}] identical={same}", files.join(",")));
    }
    (ok, detail.join("; "))
}

fn main() -> ExitCode {
    let cfg = VerifyConfig::default();
    let mut failed = Vec::new();
    for id in CRITERIA {
        match run(id, &cfg) {
            Ok(c) => {
                println!("{}", c.line());
                if !c.passed {
                    failed.push(id);
                }
            }
            Err(e) => {
                println!("{id} FAIL error: {e}");
                failed.push(id);
            }
        }
    }
    let start = Instant::now();
    let (ok, detail) = determinism();
    println!(
        "A8 {} {:<44} ({:.2}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        "repeated binary runs give byte-identical CSVs",
        start.elapsed().as_secs_f64()
    );
    if !ok {
        failed.push("A8");
    }
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
