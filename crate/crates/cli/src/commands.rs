//! The four batch commands: train, sweep, compare, gradnoise.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use bnkit::data::Dataset;
use bnkit::error::{Error, Result};
use bnkit::gradnoise::{
    check_bound, estimate_c_from, GradNoiseReport, GradSource, ModelGradSource, PerSampleGrads,
    ScalarQuadratic,
};
use bnkit::model::SequentialModel;
use bnkit::noise::{summarize_trials, NoiseSweepConfig, SweepResult};
use bnkit::report::{fmt_csv, read_trials_csv, sweep_json, write_summary_csv, write_trials_csv};
use bnkit::serialize::{load_model_from_path, save_model};
use bnkit::train::{train, TrainLog};

use crate::config::ExperimentConfig;

fn sweep_dispatch(
    model: &SequentialModel,
    dataset: &Dataset,
    cfg: &NoiseSweepConfig,
) -> Result<SweepResult> {
    #[cfg(feature = "parallel")]
    {
        bnkit::noise::par_run_sweep(model, dataset, cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        bnkit::noise::run_sweep(model, dataset, cfg)
    }
}

fn gradients_dispatch<S>(source: &S) -> Result<PerSampleGrads>
where
    S: GradSource + Sync,
{
    #[cfg(feature = "parallel")]
    {
        bnkit::gradnoise::par_per_sample_gradients(source)
    }
    #[cfg(not(feature = "parallel"))]
    {
        bnkit::gradnoise::per_sample_gradients(source)
    }
}

/// Output directory: the flag wins, then the config's `out_dir`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set out_dir"))
}

pub fn default_model_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.bin")
}

fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut buf = String::from("epoch,loss,accuracy\n");
    for e in &log.epochs {
        buf.push_str(&format!(
            "{},{},{}\n",
            e.epoch,
            fmt_csv(e.loss),
            fmt_csv(e.accuracy)
        ));
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_sweep_artifacts(result: &SweepResult, dir: &Path) -> Result<()> {
    let mut trials = Vec::new();
    write_trials_csv(result, &mut trials)?;
    fs::write(dir.join("trials.csv"), trials)?;

    let mut summary = Vec::new();
    write_summary_csv(result, &mut summary)?;
    fs::write(dir.join("summary.csv"), summary)?;

    fs::write(dir.join("sweep.json"), sweep_json(result)?)?;
    Ok(())
}

fn train_from_config(cfg: &ExperimentConfig) -> Result<(SequentialModel, TrainLog)> {
    let train_set = cfg.load_train_dataset()?;
    let mut model = cfg.build_model(&train_set)?;
    let log = train(&mut model, &train_set, &cfg.resolved_sgd())?;
    Ok((model, log))
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let (model, log) = train_from_config(cfg)?;

    let mut bytes = Vec::new();
    save_model(&model, &mut bytes)?;
    fs::write(default_model_path(out_dir), bytes)?;
    write_train_log(&log, &out_dir.join("train_log.csv"))?;

    match log.epochs.last() {
        Some(last) => println!(
            "trained {} epochs; final loss {}, train accuracy {}",
            log.epochs.len(),
            fmt_csv(last.loss),
            fmt_csv(last.accuracy)
        ),
        None => println!("trained 0 epochs; wrote the initialized model"),
    }
    println!("model: {}", default_model_path(out_dir).display());
    Ok(())
}

pub struct SweepArgs {
    pub model: Option<PathBuf>,
    pub from_trials: Option<PathBuf>,
    pub baseline: Option<f64>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out_dir: &Path, args: &SweepArgs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let result = match &args.from_trials {
        Some(path) => {
            // cross-check mode: recompute the metrics from recorded trials
            let file = fs::File::open(path)?;
            let groups = read_trials_csv(&mut BufReader::new(file))?;
            let baseline = args.baseline.or_else(|| {
                groups
                    .iter()
                    .find(|(eta, _)| *eta == 0.0)
                    .map(|(_, accs)| accs.iter().sum::<f64>() / accs.len() as f64)
            });
            // accuracies in a hand-written table are often already
            // normalized; default the baseline to 1 in that case
            summarize_trials(&groups, baseline.unwrap_or(1.0))?
        }
        None => {
            let model_path = args
                .model
                .clone()
                .unwrap_or_else(|| default_model_path(out_dir));
            let model = load_model_from_path(&model_path)?;
            let test_set = cfg.load_test_dataset()?;
            sweep_dispatch(&model, &test_set, &cfg.resolved_sweep()?)?
        }
    };

    write_sweep_artifacts(&result, out_dir)?;
    println!("baseline accuracy: {}", fmt_csv(result.baseline));
    match result.average_normalized {
        Some(a_avr) => println!("A_avr = {}", fmt_csv(a_avr)),
        None => println!("A_avr = n/a (no non-baseline eta)"),
    }
    Ok(())
}

/// Per-variant column labels; duplicate norm labels get an index suffix.
fn variant_labels(configs: &[ExperimentConfig]) -> Vec<String> {
    let mut labels: Vec<String> = configs
        .iter()
        .map(|c| c.model.norm().label())
        .collect();
    for i in 0..labels.len() {
        let name = labels[i].clone();
        let mut dup = 1;
        for label in labels.iter_mut().skip(i + 1) {
            if *label == name {
                dup += 1;
                *label = format!("{name}-{dup}");
            }
        }
    }
    labels
}

pub fn cmd_compare(config_paths: &[PathBuf], out_flag: Option<&Path>, seed: Option<u64>) -> Result<()> {
    if config_paths.len() < 2 {
        return Err(Error::config("compare needs at least two --config files"));
    }
    let mut configs = Vec::with_capacity(config_paths.len());
    for path in config_paths {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        configs.push(cfg);
    }
    let key = configs[0].comparison_key()?;
    for (path, cfg) in config_paths.iter().zip(&configs).skip(1) {
        if cfg.comparison_key()? != key {
            return Err(Error::config(format!(
                "unfair comparison: {} differs from {} beyond the norm choice",
                path.display(),
                config_paths[0].display()
            )));
        }
    }

    let out_dir = resolve_out_dir(out_flag, &configs[0])?;
    fs::create_dir_all(&out_dir)?;

    let labels = variant_labels(&configs);
    let mut results: Vec<SweepResult> = Vec::with_capacity(configs.len());
    for (cfg, label) in configs.iter().zip(&labels) {
        let subdir = out_dir.join(label);
        fs::create_dir_all(&subdir)?;
        let (model, log) = train_from_config(cfg)?;
        let mut bytes = Vec::new();
        save_model(&model, &mut bytes)?;
        fs::write(default_model_path(&subdir), bytes)?;
        write_train_log(&log, &subdir.join("train_log.csv"))?;

        let test_set = cfg.load_test_dataset()?;
        let sweep = sweep_dispatch(&model, &test_set, &cfg.resolved_sweep()?)?;
        write_sweep_artifacts(&sweep, &subdir)?;
        results.push(sweep);
    }

    // side-by-side table: baseline accuracy, per-eta normalized accuracy,
    // and the average over non-baseline etas
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    rows.push((
        "baseline".to_string(),
        results.iter().map(|r| r.baseline).collect(),
    ));
    for (i, eta) in results[0].per_eta.iter().enumerate() {
        rows.push((
            format!("eta={}", fmt_csv(eta.eta)),
            results.iter().map(|r| r.per_eta[i].normalized).collect(),
        ));
    }
    rows.push((
        "a_avr".to_string(),
        results
            .iter()
            .map(|r| r.average_normalized.unwrap_or(f64::NAN))
            .collect(),
    ));

    let mut csv = String::from("metric");
    for label in &labels {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    for (name, values) in &rows {
        csv.push_str(name);
        for v in values {
            csv.push(',');
            csv.push_str(&fmt_csv(*v));
        }
        csv.push('\n');
    }
    fs::write(out_dir.join("compare.csv"), &csv)?;

    // aligned text to stdout
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(std::iter::once("metric".len()))
        .max()
        .unwrap()
        + 2;
    let col = 12usize;
    let mut header = format!("{:width$}", "metric");
    for label in &labels {
        header.push_str(&format!("{label:>col$}"));
    }
    println!("{header}");
    for (name, values) in &rows {
        let mut line = format!("{name:width$}");
        for v in values {
            line.push_str(&format!("{:>col$}", fmt_csv(*v)));
        }
        println!("{line}");
    }
    Ok(())
}

pub struct GradNoiseArgs {
    pub model: Option<PathBuf>,
    pub fixture: bool,
}

pub fn cmd_gradnoise(cfg: &ExperimentConfig, out_dir: &Path, args: &GradNoiseArgs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let alpha = cfg.sgd.learning_rate;
    let batch_size = cfg.sgd.batch_size;
    let trials = cfg.gradnoise.trials;
    let mut rng = cfg.gradnoise_rng();

    let report = if args.fixture {
        let source = ScalarQuadratic {
            data: vec![-1.0, 1.0],
            weight: 0.0,
        };
        let grads = gradients_dispatch(&source)?;
        let estimate = estimate_c_from(&grads)?;
        let check = check_bound(&grads, alpha, batch_size, estimate.c_hat, trials, &mut rng)?;
        GradNoiseReport::new(&estimate, &check)
    } else {
        let model_path = args
            .model
            .clone()
            .unwrap_or_else(|| default_model_path(out_dir));
        let model = load_model_from_path(&model_path)?;
        let full_set = cfg.load_train_dataset()?;
        let dataset = match cfg.gradnoise.samples {
            Some(cap) if cap < full_set.len() => {
                let indices: Vec<usize> = (0..cap).collect();
                let (inputs, labels) = full_set.gather(&indices);
                Dataset::new(inputs, labels, full_set.num_classes)?
            }
            _ => full_set,
        };
        let source = ModelGradSource {
            model: &model,
            dataset: &dataset,
        };
        let grads = gradients_dispatch(&source)?;
        let estimate = estimate_c_from(&grads)?;
        let check = check_bound(&grads, alpha, batch_size, estimate.c_hat, trials, &mut rng)?;
        GradNoiseReport::new(&estimate, &check)
    };

    fs::write(
        out_dir.join("gradnoise.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "C_hat = {}, error_mean_norm = {:e}",
        fmt_csv(report.c_hat),
        report.error_mean_norm
    );
    println!(
        "bound: E||alpha grad_B - alpha grad_D||^2 = {} vs alpha^2 C / B = {} -> {}",
        fmt_csv(report.empirical_lhs),
        fmt_csv(report.bound_rhs),
        if report.holds { "holds" } else { "violated" }
    );
    Ok(())
}
