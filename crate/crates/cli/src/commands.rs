use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use moire_vmc::ansatz::Ansatz;
use moire_vmc::checkpoint::Checkpoint;
use moire_vmc::ed::{ed_oracle, EdError};
use moire_vmc::hamiltonian::Hamiltonian;
use moire_vmc::lattice::{voronoi_assign, Vec2};
use moire_vmc::observables::{analyze, MolecularStats};
use moire_vmc::sampler::{export_walkers, import_walkers};
use moire_vmc::vmc::{Estimate, StepLog, Vmc, VmcError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Phase, RunConfig};
use crate::manifest::Manifest;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SAMPLES_DIR: &str = "samples";
pub const SNAPSHOTS: &str = "snapshots.csv";
pub const ANALYSIS_DIR: &str = "analysis";

/// Writes a file through a temporary sibling and a rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn vmc_error(e: VmcError) -> CliError {
    match e {
        VmcError::ParamLength { .. } | VmcError::Walkers(_) => CliError::Config(e.to_string()),
        _ => CliError::Numeric(e.to_string()),
    }
}

/// Ansatz and Hamiltonian for a resolved configuration.
struct Model {
    cfg: RunConfig,
    system: crate::config::System,
    ham: Hamiltonian,
    ansatz: Ansatz,
}

impl Model {
    fn new(cfg: RunConfig) -> Result<Model, CliError> {
        let system = cfg.system()?;
        let ham = Hamiltonian::new(&system.cell, &system.geometry, &system.hamiltonian)
            .map_err(|e| CliError::Config(format!("hamiltonian: {e}")))?;
        let ansatz = Ansatz::new(&system.cell, &cfg.ansatz, ham.cusp_coupling())
            .map_err(|e| CliError::Config(format!("ansatz: {e}")))?;
        Ok(Model { cfg, system, ham, ansatz })
    }

    fn vmc(&self) -> Result<Vmc<'_>, CliError> {
        let params = self.ansatz.init_params(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed));
        Vmc::new(
            &self.ham,
            &self.ansatz,
            &self.system.geometry,
            params,
            self.cfg.sampler.clone(),
            self.cfg.optimizer.spring(),
            self.cfg.seed.wrapping_add(1),
        )
        .map_err(vmc_error)
    }
}

/// `train --config <file> [--resume <ckpt>]`, followed by any later phases in the config.
pub fn train(config: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let resolved = cfg.to_toml();
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join(RESOLVED_CONFIG), resolved.as_bytes())?;
    let mut manifest = Manifest::open(&dir, &resolved)?;
    manifest.record(&dir, RESOLVED_CONFIG)?;

    let model = Model::new(cfg.clone())?;
    let mut vmc = model.vmc()?;
    let log_path = dir.join(TRAIN_LOG);
    let mut log_text = String::new();
    match resume {
        Some(p) => {
            let ck = Checkpoint::read(p).map_err(|e| CliError::checkpoint(p, e))?;
            ck.restore(&mut vmc).map_err(|e| CliError::checkpoint(p, e))?;
            if log_path.exists() {
                log_text = fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            }
        }
        None => vmc.warmup(cfg.sampler.warmup_sweeps),
    }
    if log_text.is_empty() {
        log_text = format!("{}\n", StepLog::CSV_HEADER);
    }

    if cfg.phases.contains(&Phase::Train) {
        let ckpt_path = dir.join(CHECKPOINT);
        let save = |vmc: &Vmc<'_>, log: &str| -> Result<(), CliError> {
            write_file(&log_path, log.as_bytes())?;
            Checkpoint::capture(vmc, &resolved).write_atomic(&ckpt_path).map_err(|e| CliError::checkpoint(&ckpt_path, e))
        };
        while vmc.spring.step < cfg.optimizer.steps {
            let row = match vmc.train_step() {
                Ok(r) => r,
                Err(e) => {
                    save(&vmc, &log_text)?;
                    return Err(vmc_error(e));
                }
            };
            log_text.push_str(&row.csv_row());
            log_text.push('\n');
            if vmc.spring.step % cfg.optimizer.checkpoint_every == 0 {
                save(&vmc, &log_text)?;
            }
        }
        save(&vmc, &log_text)?;
        manifest.record(&dir, TRAIN_LOG)?;
        manifest.record(&dir, CHECKPOINT)?;
    }
    manifest.write(&dir, "train")?;

    if cfg.phases.contains(&Phase::Measure) {
        let samples = dir.join(SAMPLES_DIR);
        run_measure(&model, &mut vmc, cfg.measure.sweeps, &samples)?;
        if cfg.phases.contains(&Phase::Analyze) {
            run_analyze(&samples, &dir.join(ANALYSIS_DIR))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MeasureSummary {
    /// Per electron, in W; walkers' time averages are treated as independent.
    energy_mean: f64,
    energy_se: f64,
    n_walkers: usize,
    sweeps: usize,
    flagged: usize,
    acceptance_hmean: f64,
    tau: f64,
}

/// `measure --ckpt <file> --steps N [--out <dir>]`.
pub fn measure(ckpt: &Path, steps: usize, out: Option<&Path>) -> Result<(), CliError> {
    let ck = Checkpoint::read(ckpt).map_err(|e| CliError::checkpoint(ckpt, e))?;
    let cfg = RunConfig::parse(&ck.config)?;
    let model = Model::new(cfg)?;
    let mut vmc = model.vmc()?;
    ck.restore(&mut vmc).map_err(|e| CliError::checkpoint(ckpt, e))?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")).join(SAMPLES_DIR),
    };
    run_measure(&model, &mut vmc, steps, &out)
}

fn run_measure(model: &Model, vmc: &mut Vmc<'_>, sweeps: usize, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let resolved = model.cfg.to_toml();
    write_file(&out.join(RESOLVED_CONFIG), resolved.as_bytes())?;
    let n_up = model.system.cell.n_up;
    let n_e = model.system.cell.n_electrons() as f64;
    let n_w = vmc.walkers.len();
    let mut sums = vec![0.0; n_w];
    let mut counts = vec![0usize; n_w];
    let mut flagged = 0;
    let mut per_walker: Vec<Vec<Vec<Vec2>>> = vec![Vec::with_capacity(sweeps); n_w];
    let stats = vmc.measure(sweeps, |v| {
        for (k, e) in v.local_energies().into_iter().enumerate() {
            match e {
                Some(p) => {
                    sums[k] += p.total().re / n_e;
                    counts[k] += 1;
                }
                None => flagged += 1,
            }
        }
        for (w, x) in v.configurations().into_iter().enumerate() {
            per_walker[w].push(x);
        }
    });
    // walker-major rows keep each chain contiguous for blocked error estimates
    let snapshots = per_walker.concat();
    let means: Vec<f64> = sums.iter().zip(&counts).filter(|(_, c)| **c > 0).map(|(s, c)| s / *c as f64).collect();
    let est = Estimate::from_samples(&means);
    if !est.mean.is_finite() {
        return Err(CliError::Numeric("no finite local energies in the measure phase".into()));
    }

    let snap_path = out.join(SNAPSHOTS);
    let file = fs::File::create(&snap_path).map_err(|e| CliError::io(&snap_path, e))?;
    let mut w = BufWriter::new(file);
    export_walkers(&mut w, &snapshots, n_up).map_err(|e| CliError::io(&snap_path, e))?;
    w.flush().map_err(|e| CliError::io(&snap_path, e))?;
    drop(w);

    let summary = MeasureSummary {
        energy_mean: est.mean,
        energy_se: est.se,
        n_walkers: n_w,
        sweeps,
        flagged,
        acceptance_hmean: stats.harmonic_mean(),
        tau: vmc.step_size.tau,
    };
    write_file(&out.join("measure.json"), serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
    let mut manifest = Manifest::open(out, &resolved)?;
    for f in [RESOLVED_CONFIG, SNAPSHOTS, "measure.json"] {
        manifest.record(out, f)?;
    }
    manifest.write(out, "measure")
}

/// `analyze --samples <dir> [--out <dir>]`.
pub fn analyze_cmd(samples: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => samples.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")).join(ANALYSIS_DIR),
    };
    run_analyze(samples, &out)
}

fn run_analyze(samples: &Path, out: &Path) -> Result<(), CliError> {
    let cfg_path = samples.join(RESOLVED_CONFIG);
    let resolved = fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    let cfg = RunConfig::parse(&resolved)?;
    let system = cfg.system()?;
    let (cell, geo) = (&system.cell, &system.geometry);

    let mut snapshots = Vec::new();
    let mut n_up = None;
    let mut files: Vec<PathBuf> = fs::read_dir(samples)
        .map_err(|e| CliError::io(samples, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    for f in &files {
        let file = fs::File::open(f).map_err(|e| CliError::io(f, e))?;
        let (configs, up) = import_walkers(BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        if *n_up.get_or_insert(up) != up {
            return Err(CliError::Config(format!("{}: spin counts differ between snapshot files", f.display())));
        }
        snapshots.extend(configs);
    }
    let n_up = n_up.ok_or_else(|| CliError::Io(format!("{}: no snapshot CSV files", samples.display())))?;
    if n_up != cell.n_up || snapshots.iter().any(|x| x.len() != cell.n_electrons()) {
        return Err(CliError::Config("snapshots do not match the configured electron counts".into()));
    }

    let partition = voronoi_assign(geo, cell, cfg.measure.grid_resolution);
    let a = analyze(cell, geo, &partition, &snapshots, n_up).map_err(|e| CliError::Numeric(e.to_string()))?;
    create_dir(out)?;
    let mut files: Vec<&str> = Vec::new();
    let mut emit = |name: &'static str, bytes: Vec<u8>| -> Result<(), CliError> {
        write_file(&out.join(name), &bytes)?;
        files.push(name);
        Ok(())
    };
    let mut buf = Vec::new();
    a.density.write_csv(&mut buf, cell).map_err(|e| CliError::io(out, e))?;
    emit("density.csv", std::mem::take(&mut buf))?;
    a.pairs.write_csv(&mut buf, cell).map_err(|e| CliError::io(out, e))?;
    emit("pair_correlation.csv", std::mem::take(&mut buf))?;
    if let Some(m) = &a.molecules {
        m.com.write_csv(&mut buf, cell).map_err(|e| CliError::io(out, e))?;
        emit("com_correlation.csv", std::mem::take(&mut buf))?;
        MolecularStats::write_histogram(&m.theta, &mut buf, "theta").map_err(|e| CliError::io(out, e))?;
        emit("theta.csv", std::mem::take(&mut buf))?;
        MolecularStats::write_histogram(&m.delta_theta, &mut buf, "delta_theta").map_err(|e| CliError::io(out, e))?;
        emit("delta_theta.csv", std::mem::take(&mut buf))?;
    }
    let report = serde_json::to_string_pretty(&a.report()).unwrap();
    emit("report.json", report.into_bytes())?;
    let mut manifest = Manifest::open(out, &resolved)?;
    for f in files {
        manifest.record(out, f)?;
    }
    manifest.write(out, "analyze")
}

#[derive(Serialize)]
struct OracleOutput {
    grid_n: usize,
    energy: f64,
    refined_grid_n: usize,
    refined_energy: f64,
    extrapolated: f64,
    /// Per electron, in W.
    extrapolated_per_electron: f64,
}

/// `oracle --config <file>`: grid ED reference for a two-electron system.
pub fn oracle(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let system = cfg.system()?;
    if system.cell.n_up != 1 || system.cell.n_down != 1 {
        return Err(CliError::Config("the oracle needs exactly one up and one down electron".into()));
    }
    if system.hamiltonian.softening.is_none() {
        return Err(CliError::Config("the oracle needs hamiltonian.softening_over_am".into()));
    }
    let r = ed_oracle(
        &system.cell,
        &system.geometry,
        &system.hamiltonian,
        cfg.oracle.grid_n,
        cfg.oracle.memory_limit_mb << 20,
    )
    .map_err(|e| match e {
        EdError::NoConvergence(_) => CliError::Numeric(format!("oracle: {e}")),
        _ => CliError::Config(format!("oracle: {e}")),
    })?;
    let out = OracleOutput {
        grid_n: r.grid_n,
        energy: r.energy,
        refined_grid_n: r.refined_grid_n,
        refined_energy: r.refined_energy,
        extrapolated: r.extrapolated,
        extrapolated_per_electron: r.extrapolated / 2.0,
    };
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let resolved = cfg.to_toml();
    write_file(&dir.join(RESOLVED_CONFIG), resolved.as_bytes())?;
    write_file(&dir.join("oracle.json"), serde_json::to_string_pretty(&out).unwrap().as_bytes())?;
    let mut manifest = Manifest::open(dir, &resolved)?;
    manifest.record(dir, RESOLVED_CONFIG)?;
    manifest.record(dir, "oracle.json")?;
    manifest.write(dir, "oracle")
}
