//! Command-line interface for the diffusion classifier: data generation,
//! training, classification, ablations, uncertainty filtering, counterfactual
//! explanations and consolidated reporting.

use clap::{Parser, Subcommand};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffclass::classifier::{
    average_rule, majority_rule, reconstruction_errors, sample_noise_set, DecisionRule,
    SampleRecord,
};
use diffclass::config::{DatasetConfig, ExperimentConfig};
use diffclass::data::{
    generate_gaussian_dataset, generate_shapes_dataset, haar_dwt, haar_idwt, load_dataset,
    load_image_folder, load_splits, save_dataset, save_splits, split_dataset, Dataset,
};
use diffclass::denoiser::{Denoiser, GaussianClassModel};
use diffclass::explain::counterfactual;
use diffclass::metrics::MetricsReport;
use diffclass::schedule::NoiseSchedule;
use diffclass::training::{resume as train_resume, save_loss_history, train, Checkpoint, LossRecord};
use diffclass::uncertainty::{
    confidence_by_outcome, coverage_accuracy_curve, estimate_uncertainty,
};
use diffclass::{Error, Result};

#[derive(Parser)]
#[command(
    name = "diffclass",
    about = "Train and evaluate a conditional-diffusion classifier on synthetic data",
    version
)]
struct Cli {
    /// Path to the experiment TOML; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training seed and rebase the classification seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow replacing existing output files.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and an 80/10/10 split.
    GenerateData,
    /// Train the denoiser; writes checkpoint.bin and loss.csv.
    Train {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Train to this step count instead of the configured total.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Classify the test split with both decision rules.
    Classify {
        /// Use the analytic Gaussian oracle instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Accuracy vs number of classification steps, prefix-subsampled.
    AblateSteps {
        #[arg(long, value_delimiter = ',', default_value = "11,51,201,501")]
        steps: Vec<usize>,
        #[arg(long)]
        oracle: bool,
    },
    /// Coverage-accuracy curve and per-outcome entropy summaries.
    Uncertainty,
    /// Counterfactual triptychs for test images of the source class.
    Explain {
        #[arg(long, default_value_t = 0)]
        source: usize,
        #[arg(long, default_value_t = 1)]
        target: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Consolidate run artifacts into report.md.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        let n = config.classify.seeds.len().max(1);
        config.classify.seeds = (0..n as u64).map(|i| seed + i).collect();
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    match &cli.command {
        Command::GenerateData => cmd_generate_data(&config, cli.overwrite),
        Command::Train { resume, steps } => cmd_train(&config, cli.overwrite, *resume, *steps),
        Command::Classify { oracle } => cmd_classify(&config, *oracle),
        Command::AblateSteps { steps, oracle } => cmd_ablate_steps(&config, steps, *oracle),
        Command::Uncertainty => cmd_uncertainty(&config),
        Command::Explain { source, target, count } => cmd_explain(&config, *source, *target, *count),
        Command::Report => cmd_report(&config),
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Gaussian { dim, mean_magnitude, variance, n_per_class, seed, clip } => {
            let model = GaussianClassModel::symmetric_pair((1, 1, *dim), *mean_magnitude, *variance);
            generate_gaussian_dataset(&model, *n_per_class, *seed, *clip)
        }
        DatasetConfig::Shapes { resolution, n_per_class, seed } => {
            generate_shapes_dataset(*resolution, *n_per_class, *seed)
        }
        DatasetConfig::ImageFolder { path } => load_image_folder(path),
    }
}

fn cmd_generate_data(config: &ExperimentConfig, overwrite: bool) -> Result<()> {
    let data_path = config.output_dir.join("dataset.bin");
    let splits_path = config.output_dir.join("splits.json");
    refuse_existing(&data_path, overwrite)?;
    refuse_existing(&splits_path, overwrite)?;

    let dataset = build_dataset(config)?;
    let split_seed = match &config.dataset {
        DatasetConfig::Gaussian { seed, .. } | DatasetConfig::Shapes { seed, .. } => *seed,
        DatasetConfig::ImageFolder { .. } => 0,
    };
    let splits = split_dataset(&dataset, (0.8, 0.1, 0.1), split_seed)?;
    save_dataset(&dataset, &data_path)?;
    save_splits(&splits, &splits_path)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        dataset.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        config.output_dir.display()
    );
    Ok(())
}

fn load_run_dataset(config: &ExperimentConfig) -> Result<(Dataset, diffclass::data::Splits)> {
    let dataset = load_dataset(&config.output_dir.join("dataset.bin"))?;
    let splits = load_splits(&config.output_dir.join("splits.json"))?;
    Ok((dataset, splits))
}

/// Whether this run diffuses in Haar wavelet space: config flag on and the
/// images are at least 2x2 with even sides.
fn uses_wavelet(config: &ExperimentConfig, dataset: &Dataset) -> bool {
    let (_, h, w) = dataset.image_shape();
    config.model.wavelet && h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0
}

/// The dataset in the space the model diffuses in.
fn to_model_space(config: &ExperimentConfig, dataset: &Dataset) -> Result<Dataset> {
    if !uses_wavelet(config, dataset) {
        return Ok(dataset.clone());
    }
    Ok(Dataset {
        images: haar_dwt(&dataset.images)?,
        labels: dataset.labels.clone(),
        meta: dataset.meta.clone(),
    })
}

fn schedule_for(config: &ExperimentConfig, dataset: &Dataset) -> NoiseSchedule {
    let (_, h, w) = dataset.image_shape();
    // Flat vector data has no spatial resolution; it always gets the
    // unshifted schedule. Images shift by 2 ln(base/res) when a base
    // resolution is configured.
    if h <= 1 {
        return NoiseSchedule::shifted_cosine(1, 1);
    }
    let res = h.max(w) as u32;
    NoiseSchedule::shifted_cosine(config.model.base_resolution.unwrap_or(res), res)
}

fn cmd_train(
    config: &ExperimentConfig,
    overwrite: bool,
    resume: bool,
    steps: Option<usize>,
) -> Result<()> {
    let ckpt_path = config.output_dir.join("checkpoint.bin");
    let loss_path = config.output_dir.join("loss.csv");
    let (dataset, splits) = load_run_dataset(config)?;
    let train_set = to_model_space(config, &dataset.subset(&splits.train))?;
    let schedule = schedule_for(config, &train_set);
    let target_steps = steps.unwrap_or(config.train.total_steps);

    let started = Instant::now();
    let (ckpt, new_history) = if resume {
        let prev = Checkpoint::load(&ckpt_path)?;
        println!("resuming from step {}", prev.step);
        train_resume(&train_set, prev, target_steps)?
    } else {
        refuse_existing(&ckpt_path, overwrite)?;
        let mut train_config = config.train;
        train_config.total_steps = target_steps;
        train(&train_set, config.model.spec, &train_config, &schedule)?
    };

    let mut history: Vec<LossRecord> = if resume && loss_path.exists() {
        read_loss_history(&loss_path)?
    } else {
        Vec::new()
    };
    history.retain(|r| new_history.first().map_or(true, |first| r.step < first.step));
    history.extend_from_slice(&new_history);
    ckpt.save(&ckpt_path)?;
    save_loss_history(&history, &loss_path)?;

    let last = history.last().map(|r| r.loss);
    println!(
        "trained to step {} in {:.1}s (final loss {})",
        ckpt.step,
        started.elapsed().as_secs_f64(),
        last.map_or("n/a".into(), |l| format!("{l:.5}"))
    );
    Ok(())
}

fn read_loss_history(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("malformed loss history line: {line}")));
        }
        let bad = |what: &str| Error::Data(format!("bad {what} in loss history: {line}"));
        out.push(LossRecord {
            step: parts[0].parse().map_err(|_| bad("step"))?,
            loss: parts[1].parse().map_err(|_| bad("loss"))?,
            lr: parts[2].parse().map_err(|_| bad("lr"))?,
        });
    }
    Ok(out)
}

fn load_denoiser(config: &ExperimentConfig, dataset: &Dataset, oracle: bool) -> Result<Box<dyn Denoiser>> {
    if oracle {
        let model = dataset.meta.gaussian_model.clone().ok_or_else(|| {
            Error::Config("--oracle requires a Gaussian dataset with oracle metadata".into())
        })?;
        return Ok(Box::new(model));
    }
    let ckpt = Checkpoint::load(&config.output_dir.join("checkpoint.bin"))?;
    let model_shape = to_model_space(config, dataset)?.image_shape();
    if ckpt.contract.input_shape != model_shape {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape {:?} does not match dataset model-space shape {:?}",
            ckpt.contract.input_shape, model_shape
        )));
    }
    let expected = schedule_for(config, &to_model_space(config, dataset)?);
    if ckpt.schedule != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint schedule {:?} does not match configured schedule {:?}",
            ckpt.schedule, expected
        )));
    }
    Ok(Box::new(ckpt.denoiser(config.classify.use_ema)))
}

#[derive(Serialize, Deserialize)]
struct SeedRecord {
    seed: u64,
    #[serde(flatten)]
    record: SampleRecord,
}

#[derive(Serialize, Deserialize)]
struct TimingSummary {
    batch_size: usize,
    num_steps: usize,
    num_classes: usize,
    seconds_per_seed: Vec<f64>,
    mean_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct ClassifySummary {
    majority: MetricsReport,
    average: MetricsReport,
    timing: TimingSummary,
}

fn cmd_classify(config: &ExperimentConfig, oracle: bool) -> Result<()> {
    let (dataset, splits) = load_run_dataset(config)?;
    let test = to_model_space(config, &dataset.subset(&splits.test))?;
    let denoiser = load_denoiser(config, &dataset, oracle)?;
    let schedule = schedule_for(config, &test);
    let n = config.classify.num_steps;

    let mut majority_preds = Vec::new();
    let mut average_preds = Vec::new();
    let mut seconds = Vec::new();
    let mut records: Vec<SeedRecord> = Vec::new();
    for &seed in &config.classify.seeds {
        let started = Instant::now();
        let set = sample_noise_set(n, &schedule, test.image_shape(), seed)?;
        let tensor = reconstruction_errors(&test.images, &set, denoiser.as_ref(), config.classify.error_space)?;
        seconds.push(started.elapsed().as_secs_f64());
        let maj = majority_rule(&tensor);
        let avg = average_rule(&tensor);
        let chosen = match config.classify.rule {
            DecisionRule::Majority => &maj,
            DecisionRule::Average => &avg,
        };
        for record in chosen.to_records(&test.labels, n) {
            records.push(SeedRecord { seed, record });
        }
        majority_preds.push(maj.predicted.clone());
        average_preds.push(avg.predicted.clone());
    }

    let summary = ClassifySummary {
        majority: MetricsReport::from_runs(
            DecisionRule::Majority,
            n,
            &config.classify.seeds,
            &majority_preds,
            &test.labels,
            test.num_classes(),
        )?,
        average: MetricsReport::from_runs(
            DecisionRule::Average,
            n,
            &config.classify.seeds,
            &average_preds,
            &test.labels,
            test.num_classes(),
        )?,
        timing: TimingSummary {
            batch_size: test.len(),
            num_steps: n,
            num_classes: test.num_classes(),
            mean_seconds: seconds.iter().sum::<f64>() / seconds.len() as f64,
            seconds_per_seed: seconds,
        },
    };

    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(config.output_dir.join("metrics.json"), json)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(config.output_dir.join("records.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f)?;
    }
    drop(f);

    print_metrics("majority", &summary.majority);
    print_metrics("average", &summary.average);
    println!(
        "timing: {} samples, N={}, {:.2}s per seed",
        summary.timing.batch_size, n, summary.timing.mean_seconds
    );
    Ok(())
}

fn print_metrics(name: &str, m: &MetricsReport) {
    let std_str = |s: Option<f64>| s.map_or(String::new(), |v| format!(" +/- {:.3}", v));
    println!(
        "{name}: accuracy {:.3}{}  f1 {:.3}{}",
        m.accuracy.mean,
        std_str(m.accuracy.std),
        m.f1.mean,
        std_str(m.f1.std)
    );
}

fn cmd_ablate_steps(config: &ExperimentConfig, steps: &[usize], oracle: bool) -> Result<()> {
    if steps.is_empty() || steps.iter().any(|&n| n == 0) {
        return Err(Error::Config("ablation step counts must be positive".into()));
    }
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let n_max = *steps.last().unwrap();

    let (dataset, splits) = load_run_dataset(config)?;
    let test = to_model_space(config, &dataset.subset(&splits.test))?;
    let denoiser = load_denoiser(config, &dataset, oracle)?;
    let schedule = schedule_for(config, &test);

    let mut rows = Vec::new();
    for &seed in &config.classify.seeds {
        let set = sample_noise_set(n_max, &schedule, test.image_shape(), seed)?;
        let full = reconstruction_errors(&test.images, &set, denoiser.as_ref(), config.classify.error_space)?;
        for &n in &steps {
            // Smaller N reuses the first N columns of the same error tensor.
            let tensor = full.prefix(n);
            let result = match config.classify.rule {
                DecisionRule::Majority => majority_rule(&tensor),
                DecisionRule::Average => average_rule(&tensor),
            };
            let acc = diffclass::metrics::accuracy(&result.predicted, &test.labels)?;
            rows.push((n, seed, acc));
        }
    }

    let csv_path = config.output_dir.join("ablation.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "n,seed,accuracy")?;
    for (n, seed, acc) in &rows {
        writeln!(f, "{n},{seed},{acc}")?;
    }
    drop(f);

    let mut means = Vec::new();
    for &n in &steps {
        let vals: Vec<f64> = rows.iter().filter(|r| r.0 == n).map(|r| r.2).collect();
        means.push((n as f64, vals.iter().sum::<f64>() / vals.len() as f64));
    }
    line_plot(
        &config.output_dir.join("ablation.svg"),
        "accuracy vs classification steps",
        "N",
        "accuracy",
        &means,
    )?;
    for (n, acc) in &means {
        println!("N={n}: mean accuracy {acc:.3}");
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<SeedRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(out)
}

fn cmd_uncertainty(config: &ExperimentConfig) -> Result<()> {
    let records = read_records(&config.output_dir.join("records.jsonl"))?;
    let first_seed = records[0].seed;
    let subset: Vec<&SeedRecord> = records.iter().filter(|r| r.seed == first_seed).collect();

    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    let mut entropies = Vec::new();
    for r in &subset {
        let u = estimate_uncertainty(&r.record.votes, r.record.n)?;
        predictions.push(r.record.predicted);
        labels.push(r.record.true_label);
        entropies.push(u.entropy);
    }

    let curve = coverage_accuracy_curve(&predictions, &entropies, &labels, &config.uncertainty.fractions)?;
    let csv_path = config.output_dir.join("coverage.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "retained_fraction,entropy_threshold,n_kept,accuracy")?;
    for p in &curve.points {
        writeln!(f, "{},{},{},{}", p.retained_fraction, p.threshold, p.n_kept, p.accuracy)?;
    }
    drop(f);

    let pts: Vec<(f64, f64)> =
        curve.points.iter().rev().map(|p| (p.retained_fraction, p.accuracy)).collect();
    line_plot(
        &config.output_dir.join("coverage.svg"),
        "accuracy vs retained fraction",
        "retained fraction",
        "accuracy",
        &pts,
    )?;

    let num_classes = subset[0].record.votes.len();
    if num_classes == 2 {
        let groups = confidence_by_outcome(&predictions, &entropies, &labels)?;
        let path = config.output_dir.join("outcome_entropy.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "outcome,count,min,q1,median,q3,max")?;
        for (outcome, s) in &groups {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                outcome.label(),
                s.count,
                s.min,
                s.q1,
                s.median,
                s.q3,
                s.max
            )?;
        }
    }

    for p in &curve.points {
        println!("f={:.2}: accuracy {:.3} on {} samples", p.retained_fraction, p.accuracy, p.n_kept);
    }
    Ok(())
}

fn cmd_explain(config: &ExperimentConfig, source: usize, target: usize, count: usize) -> Result<()> {
    let (dataset, splits) = load_run_dataset(config)?;
    let test_raw = dataset.subset(&splits.test);
    let test = to_model_space(config, &test_raw)?;
    let denoiser = load_denoiser(config, &dataset, false)?;
    let schedule = schedule_for(config, &test);
    let wavelet = uses_wavelet(config, &dataset);

    let picks: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == source).take(count).collect();
    if picks.is_empty() {
        return Err(Error::EmptySelection(format!("no test samples of class {source}")));
    }

    let dir = config.output_dir.join("explain");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (k, &i) in picks.iter().enumerate() {
        let x = test.images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let result = counterfactual(
            &x,
            source,
            target,
            &config.guidance,
            denoiser.as_ref(),
            &schedule,
            config.train.seed + k as u64,
        )?;
        // Display in image space: invert the wavelet transform if active.
        let back = |a: &Array4<f64>| -> Result<Array4<f64>> {
            if wavelet { haar_idwt(a) } else { Ok(a.clone()) }
        };
        let input = back(&x)?;
        let cf = back(&result.counterfactual)?;
        let diff = back(&result.difference)?;
        let path = dir.join(format!("sample_{k:02}_{source}_to_{target}.png"));
        write_triptych(&path, &input, &cf, &diff)?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }

    let meta = serde_json::json!({
        "source_class": source,
        "target_class": target,
        "guidance_scale": config.guidance.scale,
        "noise_level": config.guidance.noise_level,
        "sampler_steps": config.guidance.sampler_steps,
        "files": files,
    });
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    println!("wrote {} triptychs to {}", picks.len(), dir.display());
    Ok(())
}

/// Write (input | counterfactual | difference) side by side as one grayscale
/// PNG. Inputs map [-1,1] to [0,255]; the difference map is centered at gray.
fn write_triptych(path: &Path, input: &Array4<f64>, cf: &Array4<f64>, diff: &Array4<f64>) -> Result<()> {
    let (_, c, h, w) = input.dim();
    if c != 1 {
        return Err(Error::Data(format!("triptych output expects 1 channel, got {c}")));
    }
    let gap = 2usize;
    let width = 3 * w + 2 * gap;
    let mut img = image::GrayImage::from_pixel(width as u32, h as u32, image::Luma([255]));
    let max_abs = diff.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for y in 0..h {
        for x in 0..w {
            let v0 = ((input[[0, 0, y, x]] + 1.0) / 2.0).clamp(0.0, 1.0);
            let v1 = ((cf[[0, 0, y, x]] + 1.0) / 2.0).clamp(0.0, 1.0);
            let v2 = (0.5 + diff[[0, 0, y, x]] / (2.0 * max_abs)).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(v0 * 255.0) as u8]));
            img.put_pixel((w + gap + x) as u32, y as u32, image::Luma([(v1 * 255.0) as u8]));
            img.put_pixel((2 * (w + gap) + x) as u32, y as u32, image::Luma([(v2 * 255.0) as u8]));
        }
    }
    img.save(path).map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

fn cmd_report(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.output_dir;
    let mut out = String::new();
    out.push_str("# Run report\n\n");

    let metrics_path = dir.join("metrics.json");
    if metrics_path.exists() {
        let bytes = std::fs::read(&metrics_path)?;
        let summary: ClassifySummary =
            serde_json::from_slice(&bytes).map_err(|e| Error::Data(e.to_string()))?;
        out.push_str("## Decision rules\n\n");
        out.push_str("| rule | accuracy | f1 |\n|---|---|---|\n");
        for m in [&summary.majority, &summary.average] {
            out.push_str(&format!(
                "| {} | {} | {} |\n",
                m.rule,
                fmt_mean_std(m.accuracy),
                fmt_mean_std(m.f1)
            ));
        }
        out.push_str(&format!(
            "\nSeeds: {:?}. N = {} classification steps.\n\n",
            summary.majority.seeds, summary.timing.num_steps
        ));
        out.push_str("## Timing\n\n");
        out.push_str(&format!(
            "Batch of {} samples, {} classes, N = {}: mean {:.2}s per seed (per-seed: {}).\n\n",
            summary.timing.batch_size,
            summary.timing.num_classes,
            summary.timing.num_steps,
            summary.timing.mean_seconds,
            summary
                .timing
                .seconds_per_seed
                .iter()
                .map(|s| format!("{s:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    } else {
        out.push_str("No classification metrics found (run `classify` first).\n\n");
    }

    for (file, title) in [
        ("ablation.csv", "## Steps ablation\n\n"),
        ("coverage.csv", "## Uncertainty filtering\n\n"),
    ] {
        let path = dir.join(file);
        if path.exists() {
            out.push_str(title);
            out.push_str(&csv_to_markdown(&std::fs::read_to_string(&path)?));
            out.push('\n');
        }
    }

    let loss_path = dir.join("loss.csv");
    if loss_path.exists() {
        let history = read_loss_history(&loss_path)?;
        if !history.is_empty() {
            let window = 500.min(history.len());
            let head: f64 = history[..window].iter().map(|r| r.loss).sum::<f64>() / window as f64;
            let tail: f64 =
                history[history.len() - window..].iter().map(|r| r.loss).sum::<f64>() / window as f64;
            out.push_str("## Training\n\n");
            out.push_str(&format!(
                "{} steps; mean loss first {window} steps {head:.5}, last {window} steps {tail:.5}.\n\n",
                history.len()
            ));
        }
    }

    let report_path = dir.join("report.md");
    std::fs::write(&report_path, &out)?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn fmt_mean_std(m: diffclass::metrics::MeanStd) -> String {
    match m.std {
        Some(s) => format!("{:.3} +/- {:.3}", m.mean, s),
        None => format!("{:.3}", m.mean),
    }
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        out.push_str("| ");
        out.push_str(&cells.join(" | "));
        out.push_str(" |\n");
        if i == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(cells.len())));
        }
    }
    out
}

fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<()> {
    use plotters::prelude::*;
    if points.is_empty() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_max - y_min) * 0.1).max(0.01);
    let path_str = path.to_string_lossy().into_owned();
    let root = SVGBackend::new(&path_str, (640, 480)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x_min..x_max.max(x_min + 1e-9), (y_min - pad)..(y_max + pad))?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
        chart.draw_series(points.iter().map(|&(x, y)| Circle::new((x, y), 3, BLUE.filled())))?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Data(format!("plot {path_str}: {e}")))?;
    Ok(())
}
