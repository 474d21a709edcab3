use std::path::Path;

use shotnoise::fluid::fluid_residual;
use shotnoise::mc::{DecayRow, DecayTable, McReport};
use shotnoise::simulate::default_grid;
use shotnoise::{
    cost_lt, estimate_is, estimate_naive, evolve_scaled_path, export_tilt, ldp_decay_table, minimize_rate,
    simulate_prm, solve_controlled_ode, Control, DecayMethod, FluidOptions, McOptions, RateOptions, ShotNoiseModel,
};

use crate::artifacts::Outcome;
use crate::config::{self, load_control, load_model, Inputs, McConfig, McMethod};
use crate::{CliError, RunArgs};

/// Reads and parses the config file named on the command line.
pub fn read_config<T: serde::de::DeserializeOwned>(args: &RunArgs) -> Result<(T, Inputs, &Path), CliError> {
    let mut inputs = Inputs::default();
    let text = inputs.read(&args.config)?;
    let cfg = config::parse(&text, &args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    Ok((cfg, inputs, base))
}

pub fn simulate(args: &RunArgs) -> Result<Outcome, CliError> {
    let (cfg, mut inputs, base) = read_config::<config::SimulateConfig>(args)?;
    cfg.check()?;
    let model = load_model(&cfg.model, &cfg.model_file, base, &mut inputs)?;
    let control = load_control(&cfg.control, &cfg.control_file, "control", base, &mut inputs)?;
    if let Some(c) = &control {
        c.check_compatible(model.marks().len(), model.horizon())?;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let events = simulate_prm(
        model.marks(),
        model.horizon(),
        cfg.epsilon,
        control.as_ref(),
        seed,
        cfg.stream,
    )?;
    let grid = default_grid(&events, cfg.grid_intervals);
    let path = evolve_scaled_path(&model, &events, &grid)?;

    let mut out = Outcome::new(&args.out, inputs, Some(seed))?;
    out.write_with("events.csv", |w| events.write_csv(model.marks(), w))?;
    out.write_with("path.csv", |w| path.write_csv(w))?;
    Ok(out)
}

pub fn fluid(args: &RunArgs) -> Result<Outcome, CliError> {
    let (cfg, mut inputs, base) = read_config::<config::FluidConfig>(args)?;
    cfg.check()?;
    let model = load_model(&cfg.model, &cfg.model_file, base, &mut inputs)?;
    let control = match load_control(&cfg.control, &cfg.control_file, "control", base, &mut inputs)? {
        Some(c) => c,
        None => Control::unit(model.horizon(), model.marks().len())?,
    };
    let d = FluidOptions::default();
    let opts = FluidOptions {
        tol: cfg.tol.unwrap_or(d.tol),
        nodes_per_cell: cfg.nodes_per_cell.unwrap_or(d.nodes_per_cell),
        min_total_nodes: cfg.min_total_nodes.unwrap_or(d.min_total_nodes),
        max_iterations: cfg.max_iterations.unwrap_or(d.max_iterations),
        ..d
    };
    let sol = solve_controlled_ode(&model, &control, &opts)?;
    let summary = serde_json::json!({
        "cost": cost_lt(&control, model.marks())?,
        "terminal": sol.terminal(),
        "nodes": sol.len(),
        "picard_iterations": sol.picard_iterations,
        "achieved_tolerance": sol.achieved_tolerance,
        "residual_refined": fluid_residual(&model, &control, &sol, 2)?,
    });

    let mut out = Outcome::new(&args.out, inputs, None)?;
    out.write_with("fluid.csv", |w| sol.write_csv(w))?;
    out.write("control.json", (control.to_json()? + "\n").as_bytes())?;
    out.write_json("fluid.json", &summary)?;
    Ok(out)
}

fn rate_options(cfg: &config::RateConfig) -> RateOptions {
    let d = RateOptions::default();
    RateOptions {
        cells: cfg.cells.unwrap_or(d.cells),
        constraint_tol: cfg.constraint_tol.unwrap_or(d.constraint_tol),
        max_outer: cfg.max_outer.unwrap_or(d.max_outer),
        initial_penalty: cfg.initial_penalty.unwrap_or(d.initial_penalty),
        inner_max_iter: cfg.inner_max_iter.unwrap_or(d.inner_max_iter),
        inner_gtol: cfg.inner_gtol.unwrap_or(d.inner_gtol),
        ..d
    }
}

pub fn rate(args: &RunArgs) -> Result<Outcome, CliError> {
    let (cfg, mut inputs, base) = read_config::<config::RateConfig>(args)?;
    cfg.check()?;
    let model = load_model(&cfg.model, &cfg.model_file, base, &mut inputs)?;
    let result = minimize_rate(&model, &cfg.constraint, &rate_options(&cfg))?;
    let tilt = export_tilt(&result)?;

    let mut out = Outcome::new(&args.out, inputs, None)?;
    out.write_json("rate.json", &result.report())?;
    out.write("control.json", (tilt.to_json()? + "\n").as_bytes())?;
    out.write_with("fluid.csv", |w| result.fluid.write_csv(w))?;
    Ok(out)
}

fn mc_tilt(
    cfg: &McConfig,
    model: &ShotNoiseModel,
    base: &Path,
    inputs: &mut Inputs,
) -> Result<Option<Control>, CliError> {
    if let Some(c) = &cfg.tilt_constraint {
        let opts = RateOptions {
            cells: cfg.tilt_cells.unwrap_or(RateOptions::default().cells),
            ..RateOptions::default()
        };
        return Ok(Some(export_tilt(&minimize_rate(model, c, &opts)?)?));
    }
    load_control(&cfg.tilt, &cfg.tilt_file, "tilt", base, inputs)
}

pub fn run_mc(
    cfg: &McConfig,
    model: &ShotNoiseModel,
    tilt: Option<&Control>,
    seed: u64,
    opts: &McOptions,
) -> Result<(DecayTable, Vec<McReport>), CliError> {
    if cfg
        .epsilons
        .windows(2)
        .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less))
    {
        return Err(CliError::Config("epsilons must be strictly decreasing".into()));
    }
    if cfg.method == McMethod::Exact {
        let table = ldp_decay_table(
            model,
            &cfg.event,
            &cfg.epsilons,
            &DecayMethod::Exact,
            cfg.replications,
            seed,
            opts,
        )?;
        return Ok((table, Vec::new()));
    }
    let mut reports = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let r = match tilt {
            Some(g) => estimate_is(model, eps, &cfg.event, g, cfg.replications, seed, opts)?,
            None => estimate_naive(model, eps, &cfg.event, cfg.replications, seed, opts)?,
        };
        reports.push(r);
    }
    let rows = reports
        .iter()
        .map(|r| DecayRow::new(r.epsilon, r.estimate, r.std_error))
        .collect();
    Ok((DecayTable::from_rows(rows), reports))
}

pub fn write_mc(
    out: &mut Outcome,
    table: &DecayTable,
    reports: &[McReport],
    tilt: Option<&Control>,
) -> Result<(), CliError> {
    out.write_with("decay.csv", |w| table.write_csv(w))?;
    if !reports.is_empty() {
        let mut buf = Vec::new();
        for (i, r) in reports.iter().enumerate() {
            let mut one = Vec::new();
            r.write_csv(&mut one)?;
            let skip = if i == 0 {
                0
            } else {
                one.iter().position(|b| *b == b'\n').map_or(0, |p| p + 1)
            };
            buf.extend_from_slice(&one[skip..]);
        }
        out.write("estimates.csv", &buf)?;
    }
    if let Some(g) = tilt {
        out.write("tilt.json", (g.to_json()? + "\n").as_bytes())?;
    }
    out.write_json(
        "report.json",
        &serde_json::json!({ "table": table, "estimates": reports }),
    )
}

pub fn mc(args: &RunArgs) -> Result<Outcome, CliError> {
    let (cfg, mut inputs, base) = read_config::<McConfig>(args)?;
    cfg.check()?;
    let model = load_model(&cfg.model, &cfg.model_file, base, &mut inputs)?;
    let tilt = mc_tilt(&cfg, &model, base, &mut inputs)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let opts = McOptions { threads: args.threads };
    let (table, reports) = run_mc(&cfg, &model, tilt.as_ref(), seed, &opts)?;

    let mut out = Outcome::new(&args.out, inputs, Some(seed))?;
    write_mc(&mut out, &table, &reports, tilt.as_ref())?;
    Ok(out)
}
