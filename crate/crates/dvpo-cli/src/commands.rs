//! Subcommand implementations.

use std::path::{Path, PathBuf};

use dvpo_core::error::Error;
use dvpo_core::trainer::{train, Algorithm, TrainConfig};

use crate::config::{config_hash, load_config, set_param};
use crate::output::{
    create_dir, csv_preamble, unix_now, write_distributions, write_divergence, write_file,
    write_manifest, write_metrics, DivergenceSnapshot, Manifest, RunRecord, COMPARISON_SCHEMA,
    SUMMARY_SCHEMA,
};
use crate::CliError;

fn parse_algo(name: &str) -> Result<Algorithm, CliError> {
    name.parse()
        .map_err(|e: Error| CliError::Config(e.to_string()))
}

/// Seeds to run: the explicit list (deduplicated, order kept) or the
/// config's own seed.
fn effective_seeds(requested: Vec<u64>, config_seed: u64) -> Vec<u64> {
    if requested.is_empty() {
        return vec![config_seed];
    }
    let mut seeds = Vec::with_capacity(requested.len());
    for s in requested {
        if seeds.contains(&s) {
            log::warn!("seed {s} given more than once; running it once");
        } else {
            seeds.push(s);
        }
    }
    seeds
}

/// Train one child run and write its artifacts. Training failures are
/// captured in the returned record; only artifact IO errors propagate.
fn train_one(
    cfg: &TrainConfig,
    seed: u64,
    out_root: &Path,
    rel_dir: &str,
    value: Option<&str>,
    manifest_hash: &str,
) -> Result<RunRecord, CliError> {
    let dir = out_root.join(rel_dir);
    create_dir(&dir)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    let mut record = RunRecord {
        seed,
        algorithm: cfg.algorithm.name().to_string(),
        value: value.map(str::to_string),
        status: "ok".to_string(),
        final_true_return: None,
        output_dir: rel_dir.to_string(),
        error: None,
    };
    match train(&run_cfg) {
        Ok(out) => {
            record.final_true_return = out.metrics.last().map(|m| m.true_return);
            write_metrics(&dir, &out.metrics, manifest_hash)?;
            write_distributions(&dir, &out.final_distributions, manifest_hash)?;
        }
        Err(e) => {
            let (iteration, loss, status) = match &e {
                Error::Diverged { iteration, loss } => (Some(*iteration), Some(*loss), "diverged"),
                Error::NonFinite(_) => (None, None, "diverged"),
                _ => (None, None, "error"),
            };
            write_divergence(
                &dir,
                &DivergenceSnapshot {
                    manifest: manifest_hash.to_string(),
                    seed,
                    algorithm: record.algorithm.clone(),
                    iteration,
                    loss,
                    message: e.to_string(),
                },
            )?;
            record.status = status.to_string();
            record.error = Some(e.to_string());
        }
    }
    Ok(record)
}

fn failure_of(record: &RunRecord) -> Option<CliError> {
    let msg = || {
        format!(
            "seed {}: {} (details in {}/divergence.json)",
            record.seed,
            record.error.as_deref().unwrap_or("training failed"),
            record.output_dir
        )
    };
    match record.status.as_str() {
        "ok" => None,
        "diverged" => Some(CliError::Diverged(msg())),
        _ => Some(CliError::Other(msg())),
    }
}

pub fn cmd_run(
    config: Option<PathBuf>,
    out: PathBuf,
    seeds: Vec<u64>,
    algo: Option<String>,
) -> Result<(), CliError> {
    let started = unix_now();
    let mut cfg = load_config(config.as_deref())?;
    if let Some(name) = &algo {
        cfg.algorithm = parse_algo(name)?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let seeds = effective_seeds(seeds, cfg.seed);
    create_dir(&out)?;
    let hash = config_hash(&cfg)?;
    log::info!("run: {} over seeds {:?}", cfg.algorithm, seeds);

    let mut results = Vec::new();
    let mut failure = None;
    for &seed in &seeds {
        let record = train_one(&cfg, seed, &out, &format!("seed-{seed}"), None, &hash)?;
        failure = failure_of(&record);
        if record.status == "ok" {
            println!(
                "seed {seed}: final true return {}",
                record
                    .final_true_return
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "n/a".to_string())
            );
        }
        results.push(record);
        if failure.is_some() {
            break;
        }
    }
    write_manifest(
        &out,
        &Manifest {
            command: "run",
            output_dir: out.display().to_string(),
            started_unix: started,
            created_unix: unix_now(),
            config_hash: hash,
            config: &cfg,
            seeds: &seeds,
            results: &results,
        },
    )?;
    match failure {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

/// Quote a CSV field if it contains a delimiter, quote, or line break.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\r') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sanitize_dir(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn cmd_sweep(
    config: Option<PathBuf>,
    out: PathBuf,
    seeds: Vec<u64>,
    algo: Option<String>,
    param: String,
    values: Vec<String>,
) -> Result<(), CliError> {
    let started = unix_now();
    let mut cfg = load_config(config.as_deref())?;
    if let Some(name) = &algo {
        cfg.algorithm = parse_algo(name)?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".to_string()));
    }
    let seeds = effective_seeds(seeds, cfg.seed);
    create_dir(&out)?;
    let hash = config_hash(&cfg)?;
    log::info!(
        "sweep: {} over {param} in {:?}, seeds {:?}",
        cfg.algorithm,
        values,
        seeds
    );

    let mut results = Vec::new();
    let mut summary = csv_preamble(SUMMARY_SCHEMA, &hash);
    summary.push_str("param,value,runs,failures,mean_final_true_return,std_final_true_return\r\n");
    for value in &values {
        // A value that produces an invalid config fails all its runs but
        // never stops the rest of the sweep.
        let child_cfg = match set_param(&cfg, &param, value) {
            Ok(c) => Ok(c),
            Err(CliError::Config(msg)) => Err(msg),
            Err(other) => return Err(other),
        };
        let mut finals = Vec::new();
        let mut failures = 0usize;
        for &seed in &seeds {
            let rel = format!("val-{}/seed-{seed}", sanitize_dir(value));
            let record = match &child_cfg {
                Ok(c) => train_one(c, seed, &out, &rel, Some(value), &hash)?,
                Err(msg) => RunRecord {
                    seed,
                    algorithm: cfg.algorithm.name().to_string(),
                    value: Some(value.clone()),
                    status: "config_error".to_string(),
                    final_true_return: None,
                    output_dir: rel,
                    error: Some(msg.clone()),
                },
            };
            match record.status.as_str() {
                "ok" => finals.push(record.final_true_return.unwrap_or(f64::NAN)),
                _ => {
                    failures += 1;
                    log::warn!(
                        "sweep child {param}={value} seed {seed} failed: {}",
                        record.error.as_deref().unwrap_or("unknown")
                    );
                }
            }
            results.push(record);
        }
        let (mean, std) = if finals.is_empty() {
            (String::new(), String::new())
        } else {
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean.to_string(), var.sqrt().to_string())
        };
        summary.push_str(&format!(
            "{},{},{},{},{},{}\r\n",
            csv_field(&param),
            csv_field(value),
            seeds.len(),
            failures,
            mean,
            std
        ));
    }
    write_file(&out.join("summary.csv"), &summary)?;
    write_manifest(
        &out,
        &Manifest {
            command: "sweep",
            output_dir: out.display().to_string(),
            started_unix: started,
            created_unix: unix_now(),
            config_hash: hash,
            config: &cfg,
            seeds: &seeds,
            results: &results,
        },
    )?;
    println!("sweep complete: {} values, {} seeds each", values.len(), seeds.len());
    Ok(())
}

pub fn cmd_compare(
    config: Option<PathBuf>,
    out: PathBuf,
    seeds: Vec<u64>,
    algos: Vec<String>,
) -> Result<(), CliError> {
    let started = unix_now();
    if algos.len() < 2 {
        return Err(CliError::Config(
            "compare needs at least two --algo values".to_string(),
        ));
    }
    let cfg = load_config(config.as_deref())?;
    let parsed: Vec<Algorithm> = algos
        .iter()
        .map(|a| parse_algo(a))
        .collect::<Result<_, _>>()?;
    let seeds = effective_seeds(seeds, cfg.seed);
    create_dir(&out)?;
    let hash = config_hash(&cfg)?;
    log::info!("compare: {:?} over seeds {:?}", algos, seeds);

    // Runs pair across algorithms: the same seed resolves to the same
    // corruption noise stream no matter which algorithm consumes it.
    let mut results = Vec::new();
    let mut finals: Vec<Vec<f64>> = Vec::new();
    for (i, &algo) in parsed.iter().enumerate() {
        let mut algo_cfg = cfg.clone();
        algo_cfg.algorithm = algo;
        algo_cfg
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut algo_finals = Vec::new();
        for &seed in &seeds {
            let rel = format!("{i}-{}/seed-{seed}", algo.name());
            let record = train_one(&algo_cfg, seed, &out, &rel, None, &hash)?;
            let failure = failure_of(&record);
            results.push(record);
            if let Some(e) = failure {
                // A missing leg breaks the pairing, so unlike a sweep the
                // comparison aborts.
                write_manifest(
                    &out,
                    &Manifest {
                        command: "compare",
                        output_dir: out.display().to_string(),
                        started_unix: started,
                        created_unix: unix_now(),
                        config_hash: hash,
                        config: &cfg,
                        seeds: &seeds,
                        results: &results,
                    },
                )?;
                return Err(e);
            }
            algo_finals.push(results.last().unwrap().final_true_return.unwrap_or(f64::NAN));
        }
        finals.push(algo_finals);
    }

    let baseline = parsed[0].name();
    let mut table = csv_preamble(COMPARISON_SCHEMA, &hash);
    table.push_str("scope,algorithm,baseline,seed,final_true_return,baseline_return,delta\r\n");
    println!("baseline: {baseline}");
    for (i, &algo) in parsed.iter().enumerate().skip(1) {
        let mut deltas = Vec::new();
        for (s, &seed) in seeds.iter().enumerate() {
            let delta = finals[i][s] - finals[0][s];
            deltas.push(delta);
            table.push_str(&format!(
                "seed,{},{},{},{},{},{}\r\n",
                csv_field(algo.name()),
                csv_field(baseline),
                seed,
                finals[i][s],
                finals[0][s],
                delta
            ));
            println!(
                "{} seed {seed}: {} vs {} (delta {delta})",
                algo.name(),
                finals[i][s],
                finals[0][s]
            );
        }
        let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let mean_final = finals[i].iter().sum::<f64>() / finals[i].len() as f64;
        let mean_base = finals[0].iter().sum::<f64>() / finals[0].len() as f64;
        table.push_str(&format!(
            "aggregate,{},{},,{},{},{}\r\n",
            csv_field(algo.name()),
            csv_field(baseline),
            mean_final,
            mean_base,
            mean_delta
        ));
        println!("{} aggregate delta: {mean_delta}", algo.name());
    }
    write_file(&out.join("comparison.csv"), &table)?;
    write_manifest(
        &out,
        &Manifest {
            command: "compare",
            output_dir: out.display().to_string(),
            started_unix: started,
            created_unix: unix_now(),
            config_hash: hash,
            config: &cfg,
            seeds: &seeds,
            results: &results,
        },
    )?;
    Ok(())
}

pub fn cmd_validate(config: PathBuf) -> Result<(), CliError> {
    let cfg = load_config(Some(&config))?;
    println!(
        "ok: algorithm {}, {} iterations, {}",
        cfg.algorithm,
        cfg.iterations,
        config_hash(&cfg)?
    );
    Ok(())
}
