//! Command implementations. Every artifact embeds the configuration hash;
//! containers, CSVs and the report are byte-reproducible functions of
//! (config, seed); the manifest is the one file carrying wall-clock time.

use merton_experts::config::{ConfigError, FileConfig};
use merton_experts::container::{
    check_hash, read_policy, read_value_grid, write_policy, write_value_grid, ContainerError,
};
use merton_experts::montecarlo::{
    compare_pde_mc, estimate_from_records, martingale_diagnostic, CompareVerdict,
    MartingaleReport, StrategyEstimate,
};
use merton_experts::policy::{Policy, Region};
use merton_experts::simulate::{
    simulate_innovations_state, write_paths_csv, write_purchases_csv, PathConfig, PathRecord,
    SimError,
};
use merton_experts::solver::{
    solve_hjbqvi, verify_solution, SolverError, ValueGrid, VerifyLevels,
};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct CmdError {
    pub exit_code: u8,
    pub message: String,
}

impl CmdError {
    fn config(message: String) -> Self {
        Self { exit_code: 2, message }
    }
    fn solver(message: String) -> Self {
        Self { exit_code: 3, message }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::config(e.to_string())
    }
}

impl From<ContainerError> for CmdError {
    fn from(e: ContainerError) -> Self {
        CmdError::config(e.to_string())
    }
}

impl From<SolverError> for CmdError {
    fn from(e: SolverError) -> Self {
        CmdError::solver(e.to_string())
    }
}

impl From<SimError> for CmdError {
    fn from(e: SimError) -> Self {
        CmdError::solver(e.to_string())
    }
}

fn io_cmd(path: &Path) -> impl FnOnce(std::io::Error) -> CmdError + '_ {
    move |e| CmdError::config(format!("io error on {}: {e}", path.display()))
}

fn out_dir(cli_out: &Path) -> PathBuf {
    match std::env::var_os("MERTON_EXPERTS_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => cli_out.to_path_buf(),
    }
}

fn thread_cap(cli_threads: Option<usize>) -> Option<usize> {
    if let Some(v) = std::env::var_os("MERTON_EXPERTS_THREADS") {
        if let Ok(n) = v.to_string_lossy().parse::<usize>() {
            return Some(n);
        }
    }
    cli_threads
}

fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CmdError> {
    match thread_cap(threads) {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CmdError::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn cmd_solve(
    config_path: &Path,
    out: &Path,
    threads: Option<usize>,
    verify_stride: usize,
) -> Result<(), CmdError> {
    let started = std::time::Instant::now();
    let cfg = FileConfig::load(config_path)?;
    let params = cfg.build_params()?;
    let cost = cfg.build_cost()?;
    let noise = cfg.build_noise()?;
    let spec = cfg.build_grid()?;
    let settings = cfg.build_solve_settings();
    let hash = cfg.params_hash();

    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(io_cmd(&dir))?;

    let (mut sol, report) = with_pool(threads, || {
        let sol = solve_hjbqvi(&params, &cost, &noise, spec, &settings)?;
        let report = verify_solution(
            &params,
            &cost,
            &noise,
            &sol.grid,
            &settings,
            VerifyLevels::Sampled(verify_stride.max(1)),
        );
        Ok::<_, SolverError>((sol, report))
    })??;
    sol.grid.params_hash = hash.clone();
    sol.policy.params_hash = hash.clone();

    write_value_grid(&dir.join("value_grid.bin"), &sol.grid)?;
    write_policy(&dir.join("policy.bin"), &sol.policy)?;
    std::fs::write(dir.join("invariants.txt"), report.summary())
        .map_err(io_cmd(&dir))?;

    let purchase_nodes =
        sol.policy.region.iter().filter(|&&r| r == Region::Purchase).count();
    let manifest = format!(
        "params_hash = \"{hash}\"\nn_t = {}\nn_w = {}\nn_p = {}\nw_max = {}\nhorizon = {}\n\
         n_q = {}\nobstacle_tol = {:e}\ncfl_safety = {}\nregion_tol = {:e}\n\
         dt = {:e}\ndt_max = {:e}\ntotal_sweeps = {}\nmax_sweeps_per_level = {}\n\
         lifted_nodes = {}\ncross_dropped = {}\npurchase_nodes = {}\n\
         invariants_pass = {}\nwall_ms = {}\n",
        spec.n_t,
        spec.n_w,
        spec.n_p,
        spec.w_max,
        spec.horizon,
        settings.n_q,
        settings.obstacle_tol,
        settings.cfl_safety,
        settings.region_tol,
        sol.stats.dt,
        sol.stats.dt_max,
        sol.stats.total_sweeps,
        sol.stats.max_sweeps_per_level,
        sol.stats.lifted_nodes,
        sol.stats.cross_dropped,
        purchase_nodes,
        report.pass(),
        started.elapsed().as_millis(),
    );
    std::fs::write(dir.join("manifest.toml"), manifest).map_err(io_cmd(&dir))?;

    if !report.pass() {
        return Err(CmdError::solver(format!(
            "hard invariants failed:\n{}",
            report.summary()
        )));
    }
    println!("solved {}x{}x{} grid into {}", spec.n_t, spec.n_w, spec.n_p, dir.display());
    Ok(())
}

/// TOML-compatible float rendering (`nan` instead of Rust's `NaN`).
fn tf(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

/// Serializes the simulate report as deterministic TOML-style text.
fn render_report(
    hash: &str,
    n_paths: usize,
    seed: u64,
    est: &StrategyEstimate,
    mart: &MartingaleReport,
    cmp: &CompareVerdict,
) -> String {
    let mut s = String::new();
    s.push_str(&format!("params_hash = \"{hash}\"\nn_paths = {n_paths}\nseed = {seed}\n\n"));
    s.push_str("[estimate]\n");
    s.push_str(&format!(
        "mean_utility = {}\nstd_error = {}\nmean_terminal_wealth = {}\n\
         total_purchases = {}\nmean_purchases_per_path = {}\nmax_purchases_on_a_path = {}\n\
         min_purchase_wealth = {}\nexposure_clamped_paths = {}\nclamp_warning = {}\n",
        tf(est.mean_utility),
        tf(est.std_error),
        tf(est.mean_terminal_wealth),
        est.total_purchases,
        tf(est.mean_purchases_per_path),
        est.max_purchases_on_a_path,
        tf(est.min_purchase_wealth),
        est.exposure_clamped_paths,
        est.clamp_warning,
    ));
    s.push_str(&format!(
        "quality_hist = {:?}\ntiming_hist = {:?}\n\n",
        est.quality_hist, est.timing_hist
    ));
    s.push_str("[martingale]\n");
    s.push_str(&format!(
        "n_segments = {}\nmean_increment = {}\nstd_error = {}\nallowance = {}\n\
         clamped_fraction = {}\npass = {}\n\n",
        mart.n_segments,
        mart.mean_increment,
        mart.std_error,
        mart.allowance,
        mart.clamped_fraction,
        mart.pass,
    ));
    s.push_str("[pde_vs_mc]\n");
    s.push_str(&format!(
        "v_grid = {}\nmc_mean = {}\ngap = {}\nbound = {}\npass = {}\n",
        cmp.v_grid, cmp.mc_mean, cmp.gap, cmp.bound, cmp.pass,
    ));
    s
}

pub fn cmd_simulate(
    config_path: &Path,
    policy_path: &Path,
    grid_path: Option<&Path>,
    out: &Path,
    paths_override: Option<usize>,
    seed_override: Option<u64>,
    threads: Option<usize>,
) -> Result<(), CmdError> {
    let cfg = FileConfig::load(config_path)?;
    let params = cfg.build_params()?;
    let cost = cfg.build_cost()?;
    let noise = cfg.build_noise()?;
    let hash = cfg.params_hash();

    let policy = read_policy(policy_path)?;
    check_hash(&hash, &policy.params_hash)?;
    let grid_file = match grid_path {
        Some(p) => p.to_path_buf(),
        None => policy_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("value_grid.bin"),
    };
    let grid = read_value_grid(&grid_file)?;
    check_hash(&hash, &grid.params_hash)?;

    let n_paths = paths_override.unwrap_or(cfg.mc.n_paths);
    let seed = seed_override.unwrap_or(cfg.mc.seed);
    let horizon = params.horizon;
    let n_steps = (horizon / cfg.mc.dt).round() as usize;
    let path_cfg =
        PathConfig { dt: cfg.mc.dt, n_steps, seed, record_stride: cfg.mc.record_stride };
    let w0 = cfg.mc.w0;

    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(io_cmd(&dir))?;

    let (records, mart) = with_pool(threads, || {
        let records: Result<Vec<PathRecord>, SimError> = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let mut one = path_cfg;
                one.record_stride = usize::MAX;
                simulate_innovations_state(&params, &cost, &noise, &policy, &one, w0, i, false)
            })
            .collect();
        let mart = martingale_diagnostic(
            &params,
            &cost,
            &noise,
            &policy,
            &grid,
            n_paths,
            &path_cfg,
            w0,
            cfg.mc.allowance_c,
        );
        (records, mart)
    })?;
    let records = records?;
    let mart = mart?;
    let est = estimate_from_records(&params, &records)?;
    let cmp = compare_pde_mc(&grid, &est, 0.0, w0, params.p0[0], path_cfg.dt, cfg.mc.allowance_c);

    std::fs::write(
        dir.join("report.toml"),
        render_report(&hash, n_paths, seed, &est, &mart, &cmp),
    )
    .map_err(io_cmd(&dir))?;

    // per-path terminal utility
    let terminal_path = dir.join("terminal.csv");
    let file = std::fs::File::create(&terminal_path).map_err(io_cmd(&terminal_path))?;
    let mut tw = std::io::BufWriter::new(file);
    writeln!(tw, "path,terminal_wealth,utility,purchases,exposure_clamped")
        .map_err(io_cmd(&terminal_path))?;
    for (i, r) in records.iter().enumerate() {
        writeln!(
            tw,
            "{},{},{},{},{}",
            i,
            r.final_wealth,
            est.per_path_utility[i],
            r.purchases.len(),
            r.exposure_clamped
        )
        .map_err(io_cmd(&terminal_path))?;
    }
    drop(tw);

    write_purchases_csv(&dir.join("purchases.csv"), &records, params.n_regimes())?;

    // step-level records for the first few paths
    let n_csv = cfg.mc.csv_paths.min(n_paths);
    let detailed: Result<Vec<PathRecord>, SimError> = (0..n_csv as u64)
        .map(|i| {
            simulate_innovations_state(&params, &cost, &noise, &policy, &path_cfg, w0, i, false)
        })
        .collect();
    write_paths_csv(&dir.join("paths.csv"), &detailed?, params.n_regimes())?;

    if est.clamp_warning {
        eprintln!(
            "warning: exposure clamped on {} of {} paths (> 0.1%)",
            est.exposure_clamped_paths, n_paths
        );
    }
    println!(
        "simulated {n_paths} paths: mean utility {} (se {}), martingale pass = {}, pde-vs-mc pass = {}",
        est.mean_utility, est.std_error, mart.pass, cmp.pass
    );
    Ok(())
}

fn open_sink(out: Option<&Path>) -> Result<Box<dyn Write>, CmdError> {
    match out {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(io_cmd(p))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

pub fn cmd_regions(
    policy_path: &Path,
    out: Option<&Path>,
    t_stride: usize,
) -> Result<(), CmdError> {
    let policy = read_policy(policy_path)?;
    let spec = policy.spec;
    let mut sink = open_sink(out)?;
    let t_axis = spec.t_axis();
    let w_axis = spec.w_axis();
    let p_axis = spec.p_axis();
    writeln!(sink, "t_index,t,p,w_lo,w_hi").map_err(|e| CmdError::config(e.to_string()))?;
    for it in (0..spec.n_t).step_by(t_stride.max(1)) {
        for ip in 0..spec.n_p {
            let mut run_start: Option<usize> = None;
            for iw in 0..=spec.n_w {
                let inside = iw < spec.n_w
                    && policy.region_at_node(it, iw, ip) == Region::Purchase;
                match (inside, run_start) {
                    (true, None) => run_start = Some(iw),
                    (false, Some(s)) => {
                        writeln!(
                            sink,
                            "{},{},{},{},{}",
                            it,
                            t_axis.value(it),
                            p_axis.value(ip),
                            w_axis.value(s),
                            w_axis.value(iw - 1)
                        )
                        .map_err(|e| CmdError::config(e.to_string()))?;
                        run_start = None;
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

enum Artifact {
    Grid(ValueGrid),
    Policy(Policy),
}

fn load_artifact(path: &Path) -> Result<Artifact, CmdError> {
    match read_value_grid(path) {
        Ok(g) => Ok(Artifact::Grid(g)),
        Err(ContainerError::BadMagic { .. }) => Ok(Artifact::Policy(read_policy(path)?)),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_slice(
    artifact_path: &Path,
    field: &str,
    t: Option<usize>,
    w: Option<usize>,
    p: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CmdError> {
    let artifact = load_artifact(artifact_path)?;
    let (spec, data): (_, Vec<f64>) = match &artifact {
        Artifact::Grid(g) => match field {
            "value" => (g.spec, g.values.clone()),
            other => {
                return Err(CmdError::config(format!(
                    "field {other:?} not in a value-grid container (have: value)"
                )))
            }
        },
        Artifact::Policy(pl) => {
            let data = match field {
                "pi_hat" => pl.pi_hat.clone(),
                "q_hat" => pl.q_hat.clone(),
                "gap" => pl.gap.clone(),
                "region" => pl
                    .region
                    .iter()
                    .map(|&r| if r == Region::Purchase { 1.0 } else { 0.0 })
                    .collect(),
                other => {
                    return Err(CmdError::config(format!(
                        "field {other:?} not in a policy container \
                         (have: pi_hat, q_hat, gap, region)"
                    )))
                }
            };
            (pl.spec, data)
        }
    };

    let fixed = [t.is_some(), w.is_some(), p.is_some()].iter().filter(|&&x| x).count();
    if fixed == 0 || fixed == 3 {
        return Err(CmdError::config(
            "fix one or two of --t/--w/--p to slice the 3-d field".into(),
        ));
    }
    for (name, idx, n) in
        [("t", t, spec.n_t), ("w", w, spec.n_w), ("p", p, spec.n_p)]
    {
        if let Some(i) = idx {
            if i >= n {
                return Err(CmdError::config(format!(
                    "--{name} index {i} out of range (axis has {n} nodes)"
                )));
            }
        }
    }

    let t_axis = spec.t_axis();
    let w_axis = spec.w_axis();
    let p_axis = spec.p_axis();
    let at = |it: usize, iw: usize, ip: usize| data[(it * spec.n_w + iw) * spec.n_p + ip];
    let mut sink = open_sink(out)?;
    let werr = |e: std::io::Error| CmdError::config(e.to_string());
    let trange = t.map(|i| i..i + 1).unwrap_or(0..spec.n_t);
    let wrange = w.map(|i| i..i + 1).unwrap_or(0..spec.n_w);
    let prange = p.map(|i| i..i + 1).unwrap_or(0..spec.n_p);
    let mut header: Vec<&str> = Vec::new();
    if t.is_none() {
        header.push("t");
    }
    if w.is_none() {
        header.push("w");
    }
    if p.is_none() {
        header.push("p");
    }
    header.push(field);
    writeln!(sink, "{}", header.join(",")).map_err(werr)?;
    for it in trange.clone() {
        for iw in wrange.clone() {
            for ip in prange.clone() {
                let mut row: Vec<String> = Vec::new();
                if t.is_none() {
                    row.push(t_axis.value(it).to_string());
                }
                if w.is_none() {
                    row.push(w_axis.value(iw).to_string());
                }
                if p.is_none() {
                    row.push(p_axis.value(ip).to_string());
                }
                row.push(at(it, iw, ip).to_string());
                writeln!(sink, "{}", row.join(",")).map_err(werr)?;
            }
        }
    }
    Ok(())
}
