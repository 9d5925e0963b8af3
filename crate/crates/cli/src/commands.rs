//! Implementations of the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gridcorr::datagen::{
    add_noise, downsample, generate_ic_with, simulate_reference, sparsify, DownsampleSpec,
    SimRecipe, TrajectorySet,
};
use gridcorr::error::{Error, Result};
use gridcorr::graph::ParamStore;
use gridcorr::metrics::{
    energy_spectrum, hct_contiguous_from_pcc, hct_from_pcc, mae, mnad, pcc_curve, rmse,
    spectrum_to_csv, MetricReport, TrajectoryMetrics,
};
use gridcorr::model::CoarseModel;
use gridcorr::pde::Grid;
use gridcorr::stencil::{verify_sum_rules, SymmetricFilterParams};
use gridcorr::tensor::{Real, Tensor};
use gridcorr::train::{
    load_checkpoint, save_checkpoint, train, write_loss_log, AdamConfig, AdamState, Checkpoint,
};

use crate::config::{model_hash, Precision, RunConfig};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    seed: u64,
    path: String,
    snapshots: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    system: gridcorr::pde::SystemSpec,
    grid_size: usize,
    extent: f64,
    dt: f64,
    entries: Vec<ManifestEntry>,
}

fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("GRIDCORR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(jobs).max(1)
}

fn generate_one(cfg: &RunConfig, seed: u64) -> Result<TrajectorySet> {
    let sim_grid = Grid::new(cfg.datagen.sim_grid, cfg.grid.extent);
    let ic = generate_ic_with(
        &cfg.system,
        &sim_grid,
        seed,
        cfg.datagen.ic_modes,
        cfg.datagen.ic_amplitude,
    );
    let recipe = SimRecipe {
        dt_sim: cfg.datagen.dt_sim,
        warmup: cfg.datagen.warmup,
        n_snapshots: cfg.datagen.snapshots,
        record_every: cfg.datagen.record_every,
    };
    let traj = simulate_reference(&cfg.system, &cfg.forcing, &sim_grid, &ic, &recipe, seed)?;
    let mut out = downsample(
        &traj,
        &DownsampleSpec {
            space_stride: cfg.datagen.space_stride,
            time_stride: cfg.datagen.time_stride,
        },
    )?;
    if cfg.datagen.noise > 0.0 {
        // separate stream from the IC draw
        out = add_noise(&out, cfg.datagen.noise, seed ^ 0xa5a5_5a5a_dead_beef);
    }
    if let Some(sp) = &cfg.datagen.sparsify {
        out = sparsify(&out, sp.drop_fraction, sp.rollout_len, sp.seed ^ seed)?;
    }
    Ok(out)
}

pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path, seeds: &[u64]) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let workers = worker_count(seeds.len());
    let mut results: Vec<Option<Result<(u64, String, usize)>>> = Vec::new();
    results.resize_with(seeds.len(), || None);
    std::thread::scope(|scope| {
        let chunks: Vec<(usize, &[u64])> = seeds
            .chunks(seeds.len().div_ceil(workers))
            .enumerate()
            .collect();
        let mut handles = Vec::new();
        for (ci, chunk) in chunks {
            let offset = ci * seeds.len().div_ceil(workers);
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for (k, &seed) in chunk.iter().enumerate() {
                    let res = generate_one(cfg, seed).and_then(|traj| {
                        let name = format!("{}_seed{:04}.gct", cfg.system.kind().name(), seed);
                        traj.save(&out_dir.join(&name))?;
                        Ok((seed, name, traj.n_snapshots()))
                    });
                    out.push((offset + k, res));
                }
                out
            }));
        }
        for h in handles {
            for (idx, res) in h.join().expect("worker panicked") {
                results[idx] = Some(res);
            }
        }
    });

    let mut entries = Vec::new();
    for (res, &seed) in results.into_iter().flatten().zip(seeds) {
        match res {
            Ok((seed, path, snapshots)) => entries.push(ManifestEntry {
                seed,
                path,
                snapshots,
            }),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                return Err(e);
            }
        }
    }
    let coarse_dt =
        cfg.datagen.dt_sim * cfg.datagen.record_every as f64 * cfg.datagen.time_stride as f64;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        system: cfg.system,
        grid_size: cfg.grid.size,
        extent: cfg.grid.extent,
        dt: coarse_dt,
        entries,
    };
    let path = out_dir.join("manifest.json");
    let doc = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} trajectories + manifest to {}",
        manifest.entries.len(),
        out_dir.display()
    );
    Ok(())
}

fn load_dataset(data_dir: &Path) -> Result<(Manifest, Vec<TrajectorySet>)> {
    let mpath = data_dir.join("manifest.json");
    let doc = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&doc).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut trajs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        trajs.push(TrajectorySet::load(&data_dir.join(&e.path))?);
    }
    Ok((manifest, trajs))
}

fn check_grid_compatibility(model: &CoarseModel, manifest: &Manifest) -> Result<()> {
    let g = model.cfg.grid;
    if g.size != manifest.grid_size
        || (g.extent - manifest.extent).abs() > 1e-12
        || model.cfg.system.kind() != manifest.system.kind()
    {
        return Err(Error::Config(format!(
            "checkpoint/data mismatch: model is {} on {}^2 (extent {}), data is {} on {}^2 (extent {})",
            model.cfg.system.kind().name(),
            g.size,
            g.extent,
            manifest.system.kind().name(),
            manifest.grid_size,
            manifest.extent
        )));
    }
    Ok(())
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    data_dir: &Path,
    ckpt_path: &Path,
    resume: Option<&Path>,
    loss_log: Option<&Path>,
) -> Result<()> {
    let (manifest, dataset) = load_dataset(data_dir)?;
    let mut model_cfg = cfg.model_config()?;
    if cfg.train.dt.is_none() {
        model_cfg.scheme.dt = manifest.dt;
    }
    let train_cfg = cfg.train_config();

    let (model, mut store, mut adam) = match resume {
        Some(path) => {
            let ck: Checkpoint<T> = load_checkpoint(path)?;
            if ck.config_hash != model_hash(&model_cfg) {
                return Err(Error::Config(format!(
                    "resume checkpoint hash {} does not match this config's model hash {}",
                    ck.config_hash,
                    model_hash(&model_cfg)
                )));
            }
            (ck.model, ck.store, ck.adam)
        }
        None => {
            let mut store: ParamStore<T> = ParamStore::new();
            let model = CoarseModel::init(model_cfg.clone(), &mut store)?;
            let adam = AdamState::new(&store, AdamConfig::default());
            (model, store, adam)
        }
    };
    check_grid_compatibility(
        &model,
        &Manifest {
            config_hash: String::new(),
            system: manifest.system,
            grid_size: manifest.grid_size,
            extent: manifest.extent,
            dt: manifest.dt,
            entries: vec![],
        },
    )?;

    let log = train(&model, &mut store, &mut adam, &dataset, &train_cfg)?;
    save_checkpoint(
        ckpt_path,
        &model.cfg,
        &model_hash(&model.cfg),
        &store,
        &adam,
        Some(&train_cfg),
    )?;
    let log_path = match loss_log {
        Some(p) => p.to_path_buf(),
        None => default_loss_log_path(cfg, ckpt_path),
    };
    write_loss_log(&log_path, &log)?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final batch loss {last:.6e}; checkpoint {} loss log {}",
        log.len(),
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

fn default_loss_log_path(cfg: &RunConfig, ckpt: &Path) -> PathBuf {
    if let Some(p) = &cfg.paths.loss_log {
        return PathBuf::from(p);
    }
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "train".into());
    ckpt.with_file_name(format!("{stem}_loss.csv"))
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    ckpt: &Path,
    resume: Option<&Path>,
    loss_log: Option<&Path>,
) -> Result<()> {
    match cfg.train.precision {
        Precision::Float32 => train_typed::<f32>(cfg, data_dir, ckpt, resume, loss_log),
        Precision::Float64 => train_typed::<f64>(cfg, data_dir, ckpt, resume, loss_log),
    }
}

pub fn cmd_eval(ckpt_path: &Path, data_dir: &Path, metrics_path: &Path, contiguous: bool) -> Result<()> {
    let ck: Checkpoint<f64> = load_checkpoint(ckpt_path)?;
    let (manifest, dataset) = load_dataset(data_dir)?;
    check_grid_compatibility(&ck.model, &manifest)?;

    let mut report = MetricReport::default();
    for (traj, entry) in dataset.iter().zip(&manifest.entries) {
        let id = format!("seed{:04}", entry.seed);
        let steps = traj.n_snapshots() - 1;
        let u0 = traj.snapshot_tensor(0);
        match ck.model.rollout_values(&ck.store, &u0, steps) {
            Ok(states) => {
                let mut pred = Tensor::zeros(traj.fields.shape());
                let snap = states[0].numel();
                for (t, s) in states.iter().enumerate() {
                    pred.data_mut()[t * snap..(t + 1) * snap].copy_from_slice(s.data());
                }
                let curve = pcc_curve(&pred, &traj.fields)?;
                let hct_val = if contiguous {
                    hct_contiguous_from_pcc(&curve, traj.dt)
                } else {
                    hct_from_pcc(&curve, traj.dt)
                };
                report.push(TrajectoryMetrics {
                    id,
                    rmse: rmse(&pred, &traj.fields)?,
                    mae: mae(&pred, &traj.fields)?,
                    mnad: mnad(&pred, &traj.fields)?,
                    hct: hct_val,
                    diverged: false,
                });
            }
            Err(Error::Diverged { .. }) | Err(Error::NonFiniteStage { .. }) => {
                report.push(TrajectoryMetrics::diverged(id));
            }
            Err(other) => return Err(other),
        }
    }
    std::fs::write(metrics_path, report.to_csv()).map_err(|e| Error::io(metrics_path, e))?;
    let mean = report.mean();
    println!(
        "evaluated {} trajectories: rmse {:.6} mae {:.6} mnad {:.6} hct {:.4}",
        report.rows.len(),
        mean.rmse,
        mean.mae,
        mean.mnad,
        mean.hct
    );
    Ok(())
}

pub fn cmd_rollout(ckpt_path: &Path, ic_path: &Path, steps: usize, out: &Path) -> Result<()> {
    let ck: Checkpoint<f64> = load_checkpoint(ckpt_path)?;
    let ic_traj = TrajectorySet::load(ic_path)?;
    let n = ck.model.cfg.grid.size;
    if ic_traj.grid_size() != n || ic_traj.channels() != ck.model.cfg.system.channels() {
        return Err(Error::Config(format!(
            "IC grid {}^2 x{} does not match model grid {}^2 x{}",
            ic_traj.grid_size(),
            ic_traj.channels(),
            n,
            ck.model.cfg.system.channels()
        )));
    }
    let u0 = ic_traj.snapshot_tensor(0);
    let states = ck.model.rollout_values(&ck.store, &u0, steps)?;
    let snap = u0.numel();
    let mut fields = Tensor::zeros(&[states.len(), ck.model.cfg.system.channels(), n, n]);
    for (t, s) in states.iter().enumerate() {
        fields.data_mut()[t * snap..(t + 1) * snap].copy_from_slice(s.data());
    }
    let traj = TrajectorySet {
        fields,
        dt: ck.model.cfg.scheme.dt,
        domain: ck.model.cfg.grid.extent,
        system: ck.model.cfg.system,
        forcing: ck.model.cfg.forcing,
        seed: ic_traj.seed,
        channel_names: ck.model.cfg.system.channel_names(),
        time_indices: None,
    };
    traj.save(out)?;
    println!("rolled out {} steps to {}", steps, out.display());
    Ok(())
}

pub fn cmd_verify_filter(
    ckpt_path: Option<&Path>,
    params: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let filter: SymmetricFilterParams<f64> = match (ckpt_path, params) {
        (Some(path), None) => {
            let ck: Checkpoint<f64> = load_checkpoint(path)?;
            ck.model.filter_values(&ck.store).ok_or_else(|| {
                Error::Config("checkpoint uses a free 5x5 filter; sum rules do not apply".into())
            })?
        }
        (None, Some(list)) => {
            let vals: Vec<f64> = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad parameter {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 7 {
                return Err(Error::Config(format!(
                    "expected 7 comma-separated parameters a1..a7, got {}",
                    vals.len()
                )));
            }
            let mut a = [0.0; 7];
            a.copy_from_slice(&vals);
            SymmetricFilterParams { a }
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --ckpt or --params".into(),
            ))
        }
    };
    let report = verify_sum_rules(&filter);
    let csv = report.to_csv();
    match out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn cmd_spectra(traj_path: &Path, out: &Path, per_snapshot: bool) -> Result<()> {
    let traj = TrajectorySet::load(traj_path)?;
    let n = traj.grid_size();
    if traj.fields.shape()[3] != n {
        return Err(Error::GridShape {
            h: n,
            w: traj.fields.shape()[3],
        });
    }
    if per_snapshot {
        let mut csv = String::from("snapshot,k,E\n");
        for t in 0..traj.n_snapshots() {
            let spec = energy_spectrum(&traj.snapshot_tensor(t))?;
            for (k, e) in spec {
                csv.push_str(&format!("{t},{k},{e}\n"));
            }
        }
        std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    } else {
        // time-averaged spectrum with a Parseval consistency check against
        // the mean-free physical-space energy
        let mut acc: Vec<(usize, f64)> = Vec::new();
        let mut direct = 0.0;
        for t in 0..traj.n_snapshots() {
            let snap = traj.snapshot_tensor(t);
            let spec = energy_spectrum(&snap)?;
            if acc.is_empty() {
                acc = spec;
            } else {
                for (slot, (_, e)) in acc.iter_mut().zip(spec) {
                    slot.1 += e;
                }
            }
            // mean-free energy per channel
            let plane = n * n;
            for ch in 0..traj.channels() {
                let s = &snap.data()[ch * plane..(ch + 1) * plane];
                let mean = s.iter().sum::<f64>() / plane as f64;
                direct += 0.5 * s.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>()
                    / plane as f64;
            }
        }
        let n_t = traj.n_snapshots() as f64;
        for slot in acc.iter_mut() {
            slot.1 /= n_t;
        }
        direct /= n_t;
        let total: f64 = acc.iter().map(|(_, e)| e).sum();
        let rel = if direct > 0.0 {
            (total - direct).abs() / direct
        } else {
            0.0
        };
        std::fs::write(out, spectrum_to_csv(&acc, Some(rel))).map_err(|e| Error::io(out, e))?;
    }
    println!("wrote spectra to {}", out.display());
    Ok(())
}
