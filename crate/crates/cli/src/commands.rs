//! Command implementations. Each returns `Ok(true)` when its trend gate (if
//! any) holds, `Ok(false)` when the run succeeded but the gate failed.

use std::fs;
use std::path::{Path, PathBuf};

use gridcnn::analysis::{
    self, gradient_energy, max_jump, modulus_at, regularity_report, write_csv, write_svg_polyline,
    DipConfig,
};
use gridcnn::data::{self, circle_dataset, manifest_csv, meshgrid_input, noise_input, sample_circles};
use gridcnn::grid::{refine, GridFunction};
use gridcnn::network::{forward, instantiate_at_resolution, params_from_text, params_to_text, NetworkConfig, Params};
use gridcnn::train::{compensate_weight_decay, init_params, train_loop, TrainOutcome};
use gridcnn::{io, Error, Result, WeightNormMode};

use crate::config::*;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Write a PGM preview mapped over the image's own value range.
fn write_preview(u: &GridFunction, path: &Path) -> Result<()> {
    let (lo, hi) = (u.min_value(), u.max_value());
    let hi = if hi > lo { hi } else { lo + 1.0 };
    io::write_pgm(u, lo, hi, path)
}

pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<bool> {
    ensure_dir(out)?;
    let samples = circle_dataset(cfg.n, cfg.count, cfg.noise_std, cfg.seed);
    fs::write(out.join("manifest.csv"), manifest_csv(&samples, cfg.seed))?;
    for s in &samples {
        let clean = out.join(format!("sample_{:05}_clean.txt", s.index));
        let noisy = out.join(format!("sample_{:05}_noisy.txt", s.index));
        io::write_text(&s.clean, &clean)?;
        io::write_text(&s.noisy, &noisy)?;
        if cfg.write_pgm {
            write_preview(&s.clean, &clean.with_extension("pgm"))?;
            write_preview(&s.noisy, &noisy.with_extension("pgm"))?;
        }
    }
    Ok(true)
}

/// Noisy-input/clean-target pairs plus the held-out tail, both single channel.
fn denoising_data(
    net: &NetJson,
    data: &DataJson,
) -> (Vec<(GridFunction, GridFunction)>, Vec<(GridFunction, GridFunction)>) {
    let all = circle_dataset(net.n, data.train_count + data.test_count, data.noise_std, data.seed);
    let pairs: Vec<_> = all.into_iter().map(|s| (s.noisy, s.clean)).collect();
    let test = pairs[data.train_count..].to_vec();
    let train = pairs[..data.train_count].to_vec();
    (train, test)
}

/// Mean held-out diagnostics of the network outputs.
struct HeldOut {
    mean_grad_energy: f64,
    mean_max_jump: f64,
    mean_mse: f64,
    mean_modulus: Option<f64>,
}

fn held_out_metrics(
    cfg: &NetworkConfig,
    params: &Params,
    test: &[(GridFunction, GridFunction)],
    modulus_r: Option<usize>,
) -> Result<HeldOut> {
    let mut ge = 0.0;
    let mut mj = 0.0;
    let mut mse = 0.0;
    let mut md = 0.0;
    for (input, target) in test {
        let out = forward(cfg, params, input)?;
        ge += gradient_energy(&out);
        mj += max_jump(&out);
        let d: f64 = out
            .values
            .iter()
            .zip(&target.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / out.values.len() as f64;
        mse += d;
        if let Some(r) = modulus_r {
            md += modulus_at(&out, r)?;
        }
    }
    let n = test.len().max(1) as f64;
    Ok(HeldOut {
        mean_grad_energy: ge / n,
        mean_max_jump: mj / n,
        mean_mse: mse / n,
        mean_modulus: modulus_r.map(|_| md / n),
    })
}

fn history_rows(outcome: &TrainOutcome) -> Vec<Vec<f64>> {
    outcome
        .history
        .iter()
        .map(|r| {
            vec![
                r.epoch as f64,
                r.train_loss,
                r.objective,
                r.weight_norm_fs,
                r.weight_norm_ms,
                r.probe_max_jump.unwrap_or(f64::NAN),
            ]
        })
        .collect()
}

const HISTORY_HEADER: [&str; 6] =
    ["epoch", "train_loss", "objective", "weight_norm_fs", "weight_norm_ms", "probe_max_jump"];

fn write_history(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    write_csv(&dir.join("history.csv"), &HISTORY_HEADER, &history_rows(outcome))?;
    let pts: Vec<(f64, f64)> =
        outcome.history.iter().map(|r| (r.epoch as f64, r.train_loss)).collect();
    if !pts.is_empty() {
        write_svg_polyline(&dir.join("train_loss.svg"), &[("train_loss", &pts)])?;
    }
    Ok(())
}

/// Train once and write history, parameters, and held-out diagnostics.
fn train_one(
    net_cfg: &NetworkConfig,
    mut params: Params,
    train: &[(GridFunction, GridFunction)],
    test: &[(GridFunction, GridFunction)],
    tc: &gridcnn::train::TrainConfig,
    modulus_r: Option<usize>,
    dir: &Path,
) -> Result<(HeldOut, TrainOutcome)> {
    ensure_dir(dir)?;
    let outcome = train_loop(net_cfg, &mut params, train, tc, None);
    if let Some(e) = outcome.aborted {
        return Err(e);
    }
    write_history(&outcome, dir)?;
    fs::write(dir.join("params.txt"), params_to_text(&params))?;
    let m = held_out_metrics(net_cfg, &params, test, modulus_r)?;
    if let Some((input, _)) = test.first() {
        let out = forward(net_cfg, &params, input)?;
        write_preview(&out, &dir.join("sample_output.pgm"))?;
        io::write_text(&out, &dir.join("sample_output.txt"))?;
        let rep = regularity_report(&out, 4.min(analysis::MAX_MODULUS_RADIUS))?;
        let rows: Vec<Vec<f64>> = rep
            .modulus
            .iter()
            .map(|&(r, w)| vec![r as f64, w, rep.max_jump, rep.discrete_tv, rep.gradient_energy])
            .collect();
        write_csv(
            &dir.join("regularity.csv"),
            &["radius_cells", "modulus", "max_jump", "discrete_tv", "gradient_energy"],
            &rows,
        )?;
    }
    Ok((m, outcome))
}

pub fn train(cfg: &TrainCommandConfig, out: &Path) -> Result<bool> {
    let (net_cfg, h0) = cfg.net.build()?;
    let (train, test) = denoising_data(&cfg.net, &cfg.data);
    let params = init_params(&net_cfg, h0, cfg.init_seed)?;
    let tc = cfg.train.to_train_config(cfg.train.weight_decay);
    let (m, _) = train_one(&net_cfg, params, &train, &test, &tc, None, out)?;
    write_csv(
        &out.join("held_out.csv"),
        &["mean_mse", "mean_gradient_energy", "mean_max_jump"],
        &[vec![m.mean_mse, m.mean_grad_energy, m.mean_max_jump]],
    )?;
    Ok(true)
}

/// Run `jobs` closures on up to `threads` worker threads, preserving order.
fn run_parallel<T: Send>(
    jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>,
    threads: usize,
) -> Vec<Result<T>> {
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut results: Vec<Option<Result<T>>> = jobs.iter().map(|_| None).collect();
    let mut slots: Vec<(usize, Box<dyn FnOnce() -> Result<T> + Send + '_>)> =
        jobs.into_iter().enumerate().collect();
    while !slots.is_empty() {
        let take = threads.min(slots.len());
        let batch: Vec<_> = slots.drain(..take).collect();
        let outs = std::thread::scope(|s| {
            let handles: Vec<_> =
                batch.into_iter().map(|(i, job)| (i, s.spawn(job))).collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().expect("worker panicked")))
                .collect::<Vec<_>>()
        });
        for (i, r) in outs {
            results[i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("all jobs ran")).collect()
}

pub fn sweep_wd(cfg: &SweepWdConfig, out: &Path, threads: usize) -> Result<bool> {
    ensure_dir(out)?;
    let (net_cfg, h0) = cfg.net.build()?;
    let (train, test) = denoising_data(&cfg.net, &cfg.data);
    let params0 = init_params(&net_cfg, h0, cfg.init_seed)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<(HeldOut, TrainOutcome)> + Send + '_>> = cfg
        .wds
        .iter()
        .map(|&wd| {
            let dir = out.join(format!("wd_{wd}"));
            let tc = cfg.train.to_train_config(wd);
            let params = params0.clone();
            let (net_cfg, train, test) = (&net_cfg, &train, &test);
            Box::new(move || train_one(net_cfg, params, train, test, &tc, None, &dir)) as _
        })
        .collect();
    let results = run_parallel(jobs, threads);

    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for (wd, r) in cfg.wds.iter().zip(results) {
        let (m, outcome) = r?;
        let final_loss = outcome.history.last().map_or(f64::NAN, |r| r.train_loss);
        rows.push(vec![*wd, m.mean_mse, m.mean_grad_energy, m.mean_max_jump, final_loss]);
        metrics.push(m);
    }
    write_csv(
        &out.join("summary.csv"),
        &["wd", "mean_mse", "mean_gradient_energy", "mean_max_jump", "final_train_loss"],
        &rows,
    )?;

    // gate: gradient energy nonincreasing on >= 3 of the ordered levels and
    // max jump strictly lower at the largest decay than at the smallest
    let ge: Vec<f64> = metrics.iter().map(|m| m.mean_grad_energy).collect();
    let ok_pairs = ge.windows(2).filter(|w| w[1] <= w[0]).count();
    let needed = ge.len().saturating_sub(2).min(3);
    let jumps_drop = match (metrics.first(), metrics.last()) {
        (Some(a), Some(b)) if metrics.len() > 1 => b.mean_max_jump < a.mean_max_jump,
        _ => true,
    };
    let gate = ok_pairs >= needed && jumps_drop;
    Ok(gate || !cfg.enforce_gate)
}

pub fn sweep_res(cfg: &SweepResConfig, out: &Path, threads: usize) -> Result<bool> {
    ensure_dir(out)?;
    let (net_cfg, h0) = cfg.net.build()?;
    let (train, test) = denoising_data(&cfg.net, &cfg.data);
    let params0 = init_params(&net_cfg, h0, cfg.init_seed)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<(f64, HeldOut, TrainOutcome)> + Send + '_>> = cfg
        .gammas
        .iter()
        .map(|&gamma| {
            let dir = out.join(format!("gamma_{gamma}"));
            let wd = compensate_weight_decay(cfg.base_weight_decay, gamma);
            let tc = cfg.train.to_train_config(wd);
            let (net_cfg, params0, train, test) = (&net_cfg, &params0, &train, &test);
            let modulus_cells = cfg.modulus_cells;
            Box::new(move || {
                ensure_dir(&dir)?;
                // record the effective per-level settings for reproducibility
                fs::write(
                    dir.join("effective.json"),
                    format!("{{\"gamma\": {gamma}, \"weight_decay\": {wd}}}\n"),
                )?;
                let (cfg_g, params_g) = instantiate_at_resolution(net_cfg, params0, gamma);
                let train_g: Vec<_> =
                    train.iter().map(|(u, v)| (refine(u, gamma), refine(v, gamma))).collect();
                let test_g: Vec<_> =
                    test.iter().map(|(u, v)| (refine(u, gamma), refine(v, gamma))).collect();
                let r = modulus_cells * gamma; // fixed physical radius
                let (m, o) = train_one(&cfg_g, params_g, &train_g, &test_g, &tc, Some(r), &dir)?;
                Ok((wd, m, o))
            }) as _
        })
        .collect();
    let results = run_parallel(jobs, threads);

    let mut rows = Vec::new();
    let mut jumps = Vec::new();
    let mut moduli = Vec::new();
    for (gamma, r) in cfg.gammas.iter().zip(results) {
        let (wd, m, outcome) = r?;
        let objective = outcome.history.last().map_or(f64::NAN, |r| r.objective);
        rows.push(vec![
            *gamma as f64,
            wd,
            m.mean_mse,
            m.mean_max_jump,
            m.mean_modulus.unwrap_or(f64::NAN),
            objective,
        ]);
        jumps.push(m.mean_max_jump);
        moduli.push(m.mean_modulus.unwrap_or(f64::NAN));
    }
    write_csv(
        &out.join("summary.csv"),
        &["gamma", "weight_decay", "mean_mse", "mean_max_jump", "mean_modulus", "final_objective"],
        &rows,
    )?;

    // gate: refinement must not roughen — jumps nonincreasing vs the baseline
    // and the modulus at fixed physical radius within 10%
    let gate = jumps.windows(2).all(|w| w[1] <= w[0])
        && moduli.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    Ok(gate || !cfg.enforce_gate)
}

fn build_input(input: &InputJson, net: &NetJson) -> Result<GridFunction> {
    let spec = net.input_spec()?;
    Ok(match input {
        InputJson::Meshgrid => meshgrid_input(spec),
        InputJson::Circles { seed } => sample_circles(net.n, data::CIRCLES_PER_IMAGE, *seed, 0),
        InputJson::Noise { channels, amplitude, seed } => {
            noise_input(spec, *channels, *amplitude, *seed)
        }
    })
}

fn load_or_init_params(
    net_cfg: &NetworkConfig,
    h0: f64,
    params_file: &Option<String>,
    init_seed: Option<u64>,
) -> Result<Params> {
    match params_file {
        Some(p) => params_from_text(&fs::read_to_string(p)?),
        None => {
            let seed = init_seed
                .ok_or_else(|| Error::Config("need params_file or init_seed".into()))?;
            init_params(net_cfg, h0, seed)
        }
    }
}

pub fn convergence(cfg: &ConvergenceConfig, out: &Path) -> Result<bool> {
    ensure_dir(out)?;
    if cfg.gammas.is_empty() {
        return Err(Error::Config("gammas must be non-empty".into()));
    }
    let (net_cfg, h0) = cfg.net.build()?;
    let params = load_or_init_params(&net_cfg, h0, &cfg.params_file, cfg.init_seed)?;
    let input = build_input(&cfg.input, &cfg.net)?;
    let rows = analysis::convergence_table(&net_cfg, &params, &input, &cfg.gammas)?;
    let csv: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.gamma as f64, r.h, r.sup_diff_prev.unwrap_or(f64::NAN), r.max_jump])
        .collect();
    write_csv(&out.join("convergence.csv"), &["gamma", "h", "sup_diff_prev", "max_jump"], &csv)?;

    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.sup_diff_prev).collect();
    let gate = diffs.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    Ok(gate || !cfg.enforce_gate)
}

pub fn dip(cfg: &DipCommandConfig, out: &Path) -> Result<bool> {
    ensure_dir(out)?;
    let (net_cfg, h0) = cfg.net.build()?;
    let spec = cfg.net.input_spec()?;
    let mut params = init_params(&net_cfg, h0, cfg.init_seed)?;
    let input = noise_input(spec, cfg.input_channels, cfg.input_amplitude, cfg.input_seed);
    let clean = sample_circles(cfg.net.n, data::CIRCLES_PER_IMAGE, cfg.target_seed, 0);
    let range = clean.max_value() - clean.min_value();
    let target =
        data::add_gaussian_noise(&clean, cfg.target_noise_std * range.max(1.0), cfg.target_seed, 1, true);
    io::write_text(&target, &out.join("target.txt"))?;
    write_preview(&target, &out.join("target.pgm"))?;

    let dc = DipConfig {
        iters: cfg.iters,
        lr: cfg.lr,
        input_sigma: cfg.input_sigma,
        seed: cfg.dip_seed,
        snapshot_every: cfg.snapshot_every,
        ..Default::default()
    };
    let outcome = analysis::dip_fit(&net_cfg, &mut params, &input, &target, &dc)?;

    let rows: Vec<Vec<f64>> = outcome
        .history
        .iter()
        .map(|r| vec![r.iter as f64, r.mse, r.weight_norm_ms, r.rolled_back as u8 as f64])
        .collect();
    write_csv(&out.join("dip_history.csv"), &["iter", "mse", "weight_norm_ms", "rolled_back"], &rows)?;
    if !rows.is_empty() {
        let norm_pts: Vec<(f64, f64)> =
            outcome.history.iter().map(|r| (r.iter as f64, r.weight_norm_ms)).collect();
        write_svg_polyline(&out.join("weight_norm.svg"), &[("weight_norm_ms", &norm_pts)])?;
    }
    for (iter, snap) in &outcome.snapshots {
        write_preview(snap, &out.join(format!("snapshot_{iter:06}.pgm")))?;
    }
    io::write_text(&outcome.output, &out.join("output.txt"))?;
    write_preview(&outcome.output, &out.join("output.pgm"))?;
    fs::write(
        out.join("final.json"),
        format!(
            "{{\"rollbacks\": {}, \"final_weight_norm_ms\": {}}}\n",
            outcome.rollbacks,
            gridcnn::weight_norm(&params, WeightNormMode::MeanSquare)
        ),
    )?;
    Ok(true)
}

pub fn grad_check(cfg: &GradCheckConfig, out: &Path) -> Result<bool> {
    ensure_dir(out)?;
    let (net_cfg, h0) = cfg.net.build()?;
    let params = init_params(&net_cfg, h0, cfg.init_seed)?;
    let input = build_input(&cfg.input, &cfg.net)?;
    // scalar probe: mean square of the output, adjoint 2 y / count
    let loss = |y: &GridFunction| {
        let n = y.values.len() as f64;
        let val = y.values.iter().map(|v| v * v).sum::<f64>() / n;
        let mut d = y.clone();
        for v in &mut d.values {
            *v *= 2.0 / n;
        }
        (val, d)
    };
    let report =
        gridcnn::autodiff::grad_check(&net_cfg, &params, &input, loss, cfg.step, cfg.max_per_tensor)?;
    let pass = report.max_rel_err <= cfg.tol;
    fs::write(
        out.join("grad_check.json"),
        format!(
            "{{\"n_checked\": {}, \"max_rel_err\": {}, \"tol\": {}, \"pass\": {pass}}}\n",
            report.n_checked, report.max_rel_err, cfg.tol
        ),
    )?;
    Ok(pass)
}

/// Resolve the effective output directory: the `--out` flag wins.
pub fn out_dir(flag: &Option<PathBuf>, config_dir: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(config_dir))
}
