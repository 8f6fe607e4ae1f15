use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;
use switchdit::export;
use switchdit::matching::{assignment_cost, hungarian, permute_columns};
use switchdit::network::params::ParamStore;
use switchdit::trainer::checkpoint::{self, Checkpoint};
use switchdit::trainer::eval::evaluate;
use switchdit::trainer::metrics::MetricsWriter;
use switchdit::trainer::sample::sample as draw;
use switchdit::trainer::{prior_loss_by_t, routing_map, routing_states, stabilization_step, Trainer};
use switchdit::BUILD_VERSION;

use crate::config::RunConfig;
use crate::CliError;

fn provenance(cfg: &RunConfig) -> Vec<String> {
    vec![format!("switchdit {BUILD_VERSION}"), format!("config {}", cfg.to_json())]
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

/// Run config of a checkpoint with the sampling and eval settings of `cfg`.
fn with_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> RunConfig {
    RunConfig {
        train: ck.header.config.clone(),
        ..cfg.clone()
    }
}

fn weights(ck: &Checkpoint, online: bool) -> &ParamStore {
    if online {
        &ck.state.params
    } else {
        &ck.state.ema
    }
}

fn weights_name(online: bool) -> &'static str {
    if online {
        "online"
    } else {
        "ema"
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serialises");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, steps: Option<usize>) -> Result<(), CliError> {
    let (mut trainer, run_cfg) = match resume {
        Some(p) => {
            let ck = load(p)?;
            let run_cfg = with_checkpoint(cfg, &ck);
            let mut t = Trainer::from_checkpoint(ck)?;
            if let Some(s) = steps {
                t.config.steps = s;
            }
            (t, run_cfg)
        }
        None => {
            cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (Trainer::new(cfg.train.clone())?, cfg.clone())
        }
    };
    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let mut writer = if resume.is_some() && metrics_path.is_file() {
        MetricsWriter::append(BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?))
    } else {
        MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?), &provenance(&run_cfg))?
    };
    let mut config_text = format!("# switchdit {BUILD_VERSION}\n");
    config_text.push_str(&run_cfg.to_ini());
    fs::write(out.join("config.ini"), config_text)?;

    let total = trainer.config.steps;
    let report_every = (total / 10).max(1);
    let mut changed = Vec::new();
    let mut last = None;
    let result = trainer.run(|row| {
        writer.write(row)?;
        changed.push(row.routing_changed);
        if row.step % report_every == 0 {
            eprintln!(
                "step {}/{}  noise {:.4}  dp {:.4}  ema-hamming {}",
                row.step, total, row.loss_noise, row.loss_dp, row.ema_hamming
            );
        }
        last = Some(row.clone());
        Ok(())
    });
    writer.flush()?;
    result?;
    let ckpt_path = out.join("checkpoint.swdt");
    trainer.save_checkpoint(&ckpt_path)?;
    if let Some(r) = last {
        println!(
            "trained to step {} (loss_noise {:.5}, loss_dp {:.5}); routing settled at step {}",
            r.step,
            r.loss_noise,
            r.loss_dp,
            stabilization_step(&changed, trainer.config.stability_window)
                .map_or_else(|| "-".to_owned(), |s| s.to_string())
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

pub fn sample(cfg: &RunConfig, out: &Path, ckpt_path: &Path, online: bool) -> Result<(), CliError> {
    let ck = load(ckpt_path)?;
    let run_cfg = with_checkpoint(cfg, &ck);
    let schedule = switchdit::schedule::NoiseSchedule::cosine(ck.state.config().steps, ck.header.config.cosine_offset)?;
    let images = draw(&ck.state.network, weights(&ck, online), &schedule, &cfg.sample)?;
    let dir = out.join("samples");
    fs::create_dir_all(&dir)?;
    let size = ck.state.config().image_size;
    for (i, img) in images.iter().enumerate() {
        let mut comments = provenance(&run_cfg);
        comments.push(format!("sample {i} weights {}", weights_name(online)));
        fs::write(dir.join(format!("sample_{i:04}.pgm")), export::image_pgm(img, size, &comments)?)?;
    }
    println!("wrote {} samples to {}", images.len(), dir.display());
    Ok(())
}

pub fn inspect_routing(out: &Path, ckpt_path: &Path, online: bool) -> Result<(), CliError> {
    let ck = load(ckpt_path)?;
    let run_cfg = RunConfig {
        train: ck.header.config.clone(),
        ..RunConfig::default()
    };
    let net = &ck.state.network;
    let store = weights(&ck, online);
    let trainer = Trainer::from_checkpoint(ck.clone())?;
    let prior = trainer
        .prior
        .as_ref()
        .ok_or_else(|| CliError::Runtime("checkpoint holds a plain DiT without gating".into()))?;
    let m = net.config.experts;
    let gate = routing_map(net, store)?;
    let assignment = hungarian(&assignment_cost(&gate, prior.map())?)?;
    let aligned = permute_columns(prior.map(), &assignment.inverse())?;
    let probs: Vec<Vec<f64>> = routing_states(net, store)?.iter().map(|s| s.p_tot().to_vec()).collect();

    let dir = out.join("routing");
    fs::create_dir_all(&dir)?;
    let mut comments = provenance(&run_cfg);
    comments.push(format!("weights {}", weights_name(online)));
    let mut prior_comments = comments.clone();
    prior_comments.push(format!("prior columns permuted into gate order, gate_to_prior {:?}", assignment.perm()));
    fs::write(dir.join("gate_map.csv"), export::map_csv(&gate, m, &comments))?;
    fs::write(dir.join("gate_map.pgm"), export::map_pgm(&gate, 4, &comments)?)?;
    fs::write(dir.join("prior_map.csv"), export::map_csv(&aligned, m, &prior_comments))?;
    fs::write(dir.join("prior_map.pgm"), export::map_pgm(&aligned, 4, &prior_comments)?)?;
    fs::write(dir.join("gate_probs.csv"), export::probs_csv(&probs, m, &comments))?;
    let paths = export::path_summary(&gate, m)?;
    let text = export::path_summary_text(&paths);
    fs::write(dir.join("paths.txt"), format!("# switchdit {BUILD_VERSION}\n{text}"))?;
    write_json(
        &dir.join("routing.json"),
        &json!({
            "version": BUILD_VERSION,
            "config": run_cfg,
            "weights": weights_name(online),
            "step": ck.header.step,
            "gate_to_prior": assignment.perm(),
            "match_cost": assignment.cost,
            "prior_hamming": gate.hamming(&aligned)?,
            "paths": paths,
        }),
    )?;
    print!("{text}");
    println!("wrote routing maps to {}", dir.display());
    Ok(())
}

pub fn match_debug(out: &Path, ckpt_path: &Path, online: bool) -> Result<(), CliError> {
    let ck = load(ckpt_path)?;
    let run_cfg = RunConfig {
        train: ck.header.config.clone(),
        ..RunConfig::default()
    };
    let net = &ck.state.network;
    let store = weights(&ck, online);
    let trainer = Trainer::from_checkpoint(ck.clone())?;
    let prior = trainer
        .prior
        .as_ref()
        .ok_or_else(|| CliError::Runtime("checkpoint holds a plain DiT without gating".into()))?;
    let gate = routing_map(net, store)?;
    let cost = assignment_cost(&gate, prior.map())?;
    let assignment = hungarian(&cost)?;
    let ldp = prior_loss_by_t(net, store, prior, &assignment, run_cfg.train.prior_scaling)?;
    let mean = ldp.iter().sum::<f64>() / ldp.len() as f64;
    fs::create_dir_all(out)?;
    let path = out.join("match.json");
    write_json(
        &path,
        &json!({
            "version": BUILD_VERSION,
            "config": run_cfg,
            "weights": weights_name(online),
            "step": ck.header.step,
            "cost_matrix": cost,
            "gate_to_prior": assignment.perm(),
            "match_cost": assignment.cost,
            "stored_gate_to_prior": ck.assignment.as_ref().map(|a| a.perm().to_vec()),
            "ldp_by_t": ldp,
            "ldp_mean": mean,
        }),
    )?;
    println!("match cost {}  mean L_dp {mean:.6}", assignment.cost);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, ckpt_path: &Path, online: bool) -> Result<(), CliError> {
    let ck = load(ckpt_path)?;
    let run_cfg = with_checkpoint(cfg, &ck);
    let train = &ck.header.config;
    let schedule = switchdit::schedule::NoiseSchedule::cosine(ck.state.config().steps, train.cosine_offset)?;
    let report = evaluate(
        &ck.state.network,
        weights(&ck, online),
        &schedule,
        train.dataset,
        train.data_seed,
        &cfg.sample,
        &cfg.eval,
    )?;
    fs::create_dir_all(out)?;
    let path = out.join("eval.json");
    write_json(
        &path,
        &json!({
            "version": BUILD_VERSION,
            "config": run_cfg,
            "weights": weights_name(online),
            "step": ck.header.step,
            "report": report,
        }),
    )?;
    println!(
        "MMD² {:.6}  null {:.0}% threshold {:.6}  {}",
        report.mmd2,
        100.0 * report.quantile,
        report.threshold,
        if report.below_threshold { "below" } else { "above" }
    );
    println!("wrote {}", path.display());
    Ok(())
}
