use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use gpat_core::datagen::{
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetConfig, SampleConfig, Split, Template, Variant,
};
use gpat_core::eval::{
    bottleneck_curve, evaluate_sample, evaluate_with, export_outcome_ply, regime_sample, write_curve_csv, EvalConfig,
    EvalError, MetricsReport, Regime,
};
use gpat_core::geometry::ply::{label_color, write_ply};
use gpat_core::geometry::Pose;
use gpat_core::model::{Ablation, Model, ModelConfig};
use gpat_core::training::{self, grad_check, RotationAugment, TrainConfig, TrainError, GRAD_TOLERANCE};

use crate::args::*;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(std::io::Error, serde_json::Error, EvalError, gpat_core::datagen::DataError, gpat_core::model::ModelError);

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure workers: {e}")))?;
    }
    log::info!("gpat {} using {} worker(s)", env!("CARGO_PKG_VERSION"), rayon::current_num_threads());
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Assemble(a) => assemble(a),
        Command::ExportPly(a) => export_ply(a),
    }
}

/// Prints the resolved configuration and seed of a run.
fn echo_config(what: &str, config: &impl Serialize, seed: u64) -> Result<()> {
    println!("{what} config: {}", serde_json::to_string(config)?);
    println!("seed: {seed}");
    Ok(())
}

fn parse_templates(s: &str) -> Result<Vec<Template>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|e: gpat_core::datagen::DataError| CliError::Usage(e.to_string())))
        .collect()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(read_dataset(&mut BufReader::new(f))?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = DatasetConfig {
        templates: parse_templates(&a.templates)?,
        unseen_templates: parse_templates(&a.unseen_templates)?,
        count: a.count,
        unseen_count: a.unseen_count,
        points: SampleConfig { n_target: a.points_target, n_part: a.points_part, ..SampleConfig::DESK },
        nonexact_fraction: a.nonexact_fraction,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    echo_config("dataset", &config, a.seed)?;
    let dataset = generate_dataset(&config)?;
    let mut f = BufWriter::new(File::create(&a.out)?);
    write_dataset(&mut f, &dataset)?;
    f.flush()?;
    let manifest_path = manifest_path(&a.out);
    write_json(&manifest_path, &dataset.manifest)?;
    println!("manifest: {}", serde_json::to_string(&dataset.manifest)?);
    println!("wrote {} samples to {}", dataset.samples.len(), a.out.display());
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn model_config(a: &ModelArgs, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match &a.model_config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => {
            let mut c = preset_model(a.model_preset);
            c.init_seed = seed;
            c
        }
    };
    if let Some(ab) = a.ablation {
        cfg = cfg.with_ablation(ablation(ab));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset_model(p: ModelPreset) -> ModelConfig {
    match p {
        ModelPreset::Tiny => ModelConfig::tiny(),
        ModelPreset::Desk => ModelConfig::desk(),
        ModelPreset::Full => ModelConfig::full(),
    }
}

fn ablation(a: AblationArg) -> Ablation {
    match a {
        AblationArg::Gpat => Ablation::Gpat,
        AblationArg::VanillaTf => Ablation::VanillaTf,
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = match a.preset {
        TrainPreset::Desk => TrainConfig::desk(),
        TrainPreset::Full => TrainConfig::full(),
    };
    c.seed = a.seed;
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.rotation {
        c.rotation = match v {
            RotationArg::Off => RotationAugment::Off,
            RotationArg::Random => RotationAugment::Random,
            RotationArg::Identity => RotationAugment::Identity,
        };
    }
    if let Some(v) = a.nonexact_fraction {
        c.nonexact_fraction = v;
    }
    if let Some(v) = a.permutation_cap {
        c.permutation_cap = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.checkpoint_every = v;
    }
    c
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let outcome = match &a.resume {
        Some(ckpt) => {
            let meta = training::read_meta(ckpt)?;
            echo_config("model", &meta.model, meta.model.init_seed)?;
            echo_config("train", &meta.train, meta.train.seed)?;
            println!("resuming after epoch {}", meta.epochs_completed);
            training::resume(&dataset, ckpt, a.epochs, Some(&a.out))?
        }
        None => {
            let model = model_config(&a.model, a.seed)?;
            let cfg = train_config(&a);
            echo_config("model", &model, model.init_seed)?;
            echo_config("train", &cfg, cfg.seed)?;
            training::train(&dataset, &model, &cfg, Some(&a.out))?
        }
    };
    if let Some(last) = outcome.log.last() {
        let val = last.val_seg_acc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("epoch {} train loss {:.6} val seg acc {val}", last.epoch, last.train_loss);
    }
    println!("checkpoint: {}", a.out.join("checkpoint.bin").display());
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let mut cfg = preset_model(a.model_preset);
    if let Some(ab) = a.ablation {
        cfg = cfg.with_ablation(ablation(ab));
    }
    cfg.init_seed = a.seed;
    echo_config("model", &cfg, a.seed)?;
    let report = grad_check(&cfg, a.seed)?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    println!("checked {} coordinates", report.checked);
    if let Some(w) = report.worst() {
        println!(
            "worst: case {} {}[{}] analytic {:e} numeric {:e}",
            w.case, w.param, w.index, w.analytic, w.numeric
        );
    }
    println!("max rel err {:e}", report.max_rel_err);
    if report.max_rel_err < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:e} is not below {GRAD_TOLERANCE:e}",
            report.max_rel_err
        )))
    }
}

/// The model to evaluate, or `None` for oracle segmentation.
fn load_source(s: &SourceArgs) -> Result<Option<Model>> {
    if s.oracle {
        return Ok(None);
    }
    match &s.ckpt {
        Some(p) => Ok(Some(training::load_model(p, None)?)),
        None => Err(CliError::Usage("give --ckpt or --oracle".into())),
    }
}

fn eval_config(s: &SourceArgs, regimes: Vec<Regime>) -> Result<EvalConfig> {
    if !(s.tau > 0.0) {
        return Err(CliError::Usage("--tau must be positive".into()));
    }
    Ok(EvalConfig { regimes, tau: s.tau, min_points: s.min_points, oracle: s.oracle, seed: s.seed })
}

fn split(a: SplitArg) -> Split {
    match a {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
        SplitArg::Unseen => Split::Unseen,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let regimes = Regime::parse_list(&a.regime).map_err(CliError::Usage)?;
    let config = eval_config(&a.source, regimes)?;
    let model = load_source(&a.source)?;
    let dataset = load_dataset(&a.source.data)?;
    echo_config("eval", &config, config.seed)?;
    if let Some(m) = &model {
        echo_config("model", &m.config, m.config.init_seed)?;
    }
    let samples = dataset.split(split(a.split));
    fs::create_dir_all(&a.out)?;
    if let Some(dir) = &a.export_ply {
        fs::create_dir_all(dir)?;
    }
    let rows = evaluate_with(&samples, model.as_ref(), &config, |o| {
        if let Some(dir) = &a.export_ply {
            let stem = format!("{}_{}_{}", o.row.sample_id, o.row.pose.name(), variant_name(o.row.variant));
            export_outcome_ply(dir, &stem, o, &o.result.labels)?;
        }
        Ok(())
    })?;
    let report = MetricsReport::from_rows(config, rows);
    let mut f = BufWriter::new(File::create(a.out.join("metrics.json"))?);
    report.write_json(&mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(a.out.join("metrics.csv"))?);
    report.write_csv(&mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(a.out.join("bottleneck.csv"))?);
    write_curve_csv(&mut f, &bottleneck_curve(&report.rows))?;
    f.flush()?;

    println!("{} rows from {} samples", report.rows.len(), samples.len());
    for (regime, agg) in &report.by_regime {
        println!(
            "{regime}: n={} seg_acc={:.4} PA={:.4} SR={:.4} CD={:.4}",
            agg.count, agg.seg_accuracy, agg.part_accuracy, agg.success_rate, agg.cd_permille
        );
    }
    println!("metrics: {}", a.out.join("metrics.json").display());
    Ok(())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Exact => "exact",
        Variant::Nonexact => "nonexact",
    }
}

#[derive(Serialize)]
struct PartPlacement {
    part: usize,
    part_type: String,
    pose: Option<Pose>,
    gt_pose: Pose,
}

#[derive(Serialize)]
struct AssembleReport<'a> {
    sample_id: &'a str,
    regime: String,
    labels: &'a [usize],
    parts: Vec<PartPlacement>,
    metrics: &'a gpat_core::eval::SampleRow,
}

fn find_sample<'a>(dataset: &'a Dataset, id: &str) -> Result<(usize, &'a gpat_core::datagen::AssemblySample)> {
    dataset
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| s.sample_id == id)
        .ok_or_else(|| CliError::Data(format!("no sample '{id}' in dataset")))
}

fn assemble(a: AssembleArgs) -> Result<()> {
    let regimes = Regime::parse_list(&a.regime).map_err(CliError::Usage)?;
    let [regime] = regimes[..] else {
        return Err(CliError::Usage(format!("--regime must name exactly one regime, got {}", regimes.len())));
    };
    let config = eval_config(&a.source, vec![regime])?;
    let model = load_source(&a.source)?;
    let dataset = load_dataset(&a.source.data)?;
    echo_config("eval", &config, config.seed)?;
    let (index, sample) = find_sample(&dataset, &a.sample)?;
    // same per-sample stream as a split evaluation of the whole dataset
    let prepared = regime_sample(sample, index, regime, config.seed)?
        .ok_or_else(|| CliError::Data(format!("sample '{}' has no {regime} version", a.sample)))?;
    let outcome = evaluate_sample(prepared, regime, model.as_ref(), &config)?;
    fs::create_dir_all(&a.out)?;
    export_outcome_ply(&a.out, &a.sample, &outcome, &outcome.result.labels)?;
    let parts = (0..outcome.sample.num_parts())
        .map(|i| PartPlacement {
            part: i,
            part_type: outcome.sample.part_types[i].clone(),
            pose: outcome.assembly.poses[i],
            gt_pose: outcome.sample.gt_poses[i],
        })
        .collect();
    let report = AssembleReport {
        sample_id: &a.sample,
        regime: regime.to_string(),
        labels: &outcome.result.labels,
        parts,
        metrics: &outcome.row,
    };
    write_json(&a.out.join("assembly.json"), &report)?;
    let r = &outcome.row;
    println!(
        "{} {regime}: seg_acc={:.4} PA={:.4} success={} CD={:.4} used {}/{}",
        r.sample_id, r.seg_accuracy, r.part_accuracy, r.success, r.cd_permille, r.used_parts, r.num_parts
    );
    Ok(())
}

fn export_ply(a: ExportPlyArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let (_, s) = find_sample(&dataset, &a.sample)?;
    fs::create_dir_all(&a.out)?;
    let write = |name: String, cloud: &gpat_core::geometry::PointCloud, colors: Vec<[u8; 3]>| -> Result<()> {
        let mut f = BufWriter::new(File::create(a.out.join(name))?);
        write_ply(&mut f, cloud, Some(&colors))?;
        f.flush()?;
        Ok(())
    };
    let id = &s.sample_id;
    write(format!("{id}_target.ply"), &s.target, s.gt_labels.iter().map(|&l| label_color(l)).collect())?;
    for (i, p) in s.parts.iter().enumerate() {
        write(format!("{id}_part{i}.ply"), p, vec![label_color(i); p.len()])?;
    }
    let colors = s.parts.iter().enumerate().flat_map(|(i, p)| vec![label_color(i); p.len()]).collect();
    write(format!("{id}_gt_assembly.ply"), &s.gt_assembly(), colors)?;
    println!("wrote {} PLY files to {}", s.num_parts() + 2, a.out.display());
    Ok(())
}
