//! `hapw` — command-line front end for the part-assembly library: synthetic
//! data generation, super-part grouping, training, assembly, evaluation,
//! export, and gradient checking.

use clap::{Parser, Subcommand, ValueEnum};
use hapw_core::autodiff::{load_checkpoint, save_checkpoint};
use hapw_core::data::{
    export_obj, export_ply, generate_synthetic, load_shape, posed_parts, preprocess, save_shape,
    split_dataset, PreprocessedShape, SynthCategory, SynthSpec,
};
use hapw_core::geom::aabb_of;
use hapw_core::hierarchy::{build_super_parts, GroupingConfig};
use hapw_core::metrics::{evaluate_shape, write_metrics_csv, MetricThresholds};
use hapw_core::model::{AssemblyPrediction, Model, ModelConfig, NoiseVector};
use hapw_core::train::{train, write_loss_csv, TrainConfig, TrainSample};
use hapw_cli::gradcheck;
use hapw_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hapw", version, about = "Generative 3D part assembly with a part-whole hierarchy")]
struct Cli {
    /// Cap the rayon thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (shape files plus a split index).
    GenData {
        /// TOML spec file; flags below override its values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        num_shapes: Option<usize>,
        #[arg(long)]
        points_per_part: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seed for the train/val/test split shuffle.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the super-part clustering of one shape.
    Group {
        shape_file: PathBuf,
        #[arg(long, default_value_t = 64)]
        points_per_part: usize,
    },
    /// Train a model; writes a checkpoint and a per-epoch loss CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initialization / shuffling seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate K assembly variants for one shape from a checkpoint.
    Assemble {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        variants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write point-cloud exports per variant.
        #[arg(long, value_enum)]
        export: Option<ExportFormat>,
    },
    /// Evaluate predictions against ground truth; writes a metrics CSV.
    Eval {
        #[arg(long)]
        predictions_dir: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one prediction file as OBJ or PLY.
    Export {
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt one gradient to verify failure reporting.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Obj,
    Ply,
}

/// Top-level configuration file: model + training hyperparameters plus the
/// preprocessing and evaluation settings shared across subcommands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    grouping: GroupingConfig,
    thresholds: MetricThresholds,
    points_per_part: Option<usize>,
    adjacency_eps: Option<f64>,
}

const CONFIG_KEYS: &str = "valid keys: points_per_part, adjacency_eps, \
[model] (feat_dim, num_heads, super_encoder_layers, part_encoder_layers, \
instance_enc_dim, noise_dim, head_hidden, ff_dim, max_parts, \
use_super_encoder, pointnet_dims), \
[train] (mon_samples, batch_size, epochs, lr, seed, weights, \
checkpoint_every, checkpoint_path), \
[train.weights] (lambda_t, lambda_r, lambda_s), \
[grouping] (aabb_tol, chamfer_tol, chamfer_sample), \
[thresholds] (tau_set, tau_q)";

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            context: "open".into(),
            reason: e.to_string(),
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            context: format!("{CONFIG_KEYS}"),
            reason: e.to_string(),
        })?;
        config.model.validate()?;
        config.train.validate()?;
        config.thresholds.validate()?;
        Ok(config)
    }

    fn points_per_part(&self) -> usize {
        self.points_per_part.unwrap_or(64)
    }

    fn adjacency_eps(&self) -> f64 {
        self.adjacency_eps
            .unwrap_or(hapw_core::metrics::DEFAULT_ADJACENCY_EPS)
    }
}

/// One assembly variant on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionFile {
    shape_id: String,
    variant: usize,
    seed: u64,
    prediction: AssemblyPrediction,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitIndex {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // a cap of 0 is meaningless; clamp to 1
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            spec,
            category,
            num_shapes,
            points_per_part,
            seed,
            split_seed,
            out,
        } => cmd_gen_data(
            spec.as_deref(),
            category,
            num_shapes,
            points_per_part,
            seed,
            split_seed,
            &out,
        ),
        Command::Group {
            shape_file,
            points_per_part,
        } => cmd_group(&shape_file, points_per_part),
        Command::Train {
            config,
            data_dir,
            out_checkpoint,
            loss_csv,
            resume,
            seed,
            epochs,
        } => cmd_train(
            config.as_deref(),
            &data_dir,
            &out_checkpoint,
            loss_csv.as_deref(),
            resume.as_deref(),
            seed,
            epochs,
        ),
        Command::Assemble {
            checkpoint,
            shape,
            config,
            variants,
            seed,
            out_dir,
            export,
        } => cmd_assemble(
            &checkpoint,
            &shape,
            config.as_deref(),
            variants,
            seed,
            &out_dir,
            export,
        ),
        Command::Eval {
            predictions_dir,
            data_dir,
            config,
            out,
        } => cmd_eval(&predictions_dir, &data_dir, config.as_deref(), out.as_deref()),
        Command::Export {
            prediction,
            shape,
            config,
            format,
            out,
        } => cmd_export(&prediction, &shape, config.as_deref(), format, &out),
        Command::Gradcheck { seed, corrupt } => gradcheck::cmd_gradcheck(seed, corrupt),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSpec {
    category: String,
    num_shapes: usize,
    points_per_part: usize,
    seed: u64,
    split_ratios: (f64, f64, f64),
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            category: "table".into(),
            num_shapes: 20,
            points_per_part: 64,
            seed: 0,
            split_ratios: (0.7, 0.1, 0.2),
        }
    }
}

fn cmd_gen_data(
    spec_path: Option<&Path>,
    category: Option<String>,
    num_shapes: Option<usize>,
    points_per_part: Option<usize>,
    seed: Option<u64>,
    split_seed: u64,
    out: &Path,
) -> Result<()> {
    let mut spec = match spec_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                context: "open".into(),
                reason: e.to_string(),
            })?;
            toml::from_str::<GenSpec>(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                context: "valid keys: category, num_shapes, points_per_part, seed, split_ratios".into(),
                reason: e.to_string(),
            })?
        }
        None => GenSpec::default(),
    };
    if let Some(c) = category {
        spec.category = c;
    }
    if let Some(n) = num_shapes {
        spec.num_shapes = n;
    }
    if let Some(p) = points_per_part {
        spec.points_per_part = p;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }

    let synth = SynthSpec {
        category: spec.category.parse::<SynthCategory>()?,
        num_shapes: spec.num_shapes,
        points_per_part: spec.points_per_part,
        seed: spec.seed,
    };
    let records = generate_synthetic(&synth)?;
    std::fs::create_dir_all(out)?;
    for record in &records {
        save_shape(&out.join(format!("{}.json", record.shape_id)), record)?;
    }
    let (train_idx, val_idx, test_idx) =
        split_dataset(records.len(), spec.split_ratios, split_seed)?;
    let id = |v: Vec<usize>| v.into_iter().map(|i| records[i].shape_id.clone()).collect();
    let index = SplitIndex {
        train: id(train_idx),
        val: id(val_idx),
        test: id(test_idx),
    };
    let index_path = out.join("index.json");
    std::fs::write(&index_path, serde_json::to_string_pretty(&index).unwrap())?;
    println!(
        "wrote {} shapes ({} train / {} val / {} test) to {}",
        records.len(),
        index.train.len(),
        index.val.len(),
        index.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_group(shape_file: &Path, points_per_part: usize) -> Result<()> {
    let record = load_shape(shape_file)?;
    let shape = preprocess(&record, points_per_part)?;
    let grouping = GroupingConfig::default();
    let assignment = build_super_parts(&shape.parts, &grouping)?;
    println!("shape {}: {} parts, M = {} super-parts", shape.shape_id, shape.parts.len(), assignment.num_supers);
    for s in 0..assignment.num_supers {
        let members = assignment.members_of(s);
        println!("super {s}: parts {members:?}");
    }
    for (i, part) in shape.parts.iter().enumerate() {
        let e = aabb_of(part)?.extents();
        println!(
            "part {i}: super {} extents [{:.4}, {:.4}, {:.4}]",
            assignment.super_of(i),
            e[0],
            e[1],
            e[2]
        );
    }
    for i in 0..shape.parts.len() {
        for j in i + 1..shape.parts.len() {
            let d = hapw_core::geom::chamfer_distance(
                &shape.parts[i].points,
                &shape.parts[j].points,
            )?;
            println!("chamfer({i},{j}) = {d:.6}");
        }
    }
    Ok(())
}

fn load_dataset(data_dir: &Path, config: &RunConfig, split: Option<&str>) -> Result<Vec<PreprocessedShape>> {
    let index_path = data_dir.join("index.json");
    let wanted: Option<Vec<String>> = if index_path.exists() {
        let index: SplitIndex =
            serde_json::from_str(&std::fs::read_to_string(&index_path)?).map_err(|e| {
                Error::Parse {
                    path: index_path.display().to_string(),
                    context: "split index".into(),
                    reason: e.to_string(),
                }
            })?;
        match split {
            Some("train") => Some(index.train),
            Some("val") => Some(index.val),
            Some("test") => Some(index.test),
            _ => None,
        }
    } else {
        None
    };
    let mut shapes = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != "index.json")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().contains(".pred"))
        })
        .collect();
    entries.sort();
    for path in entries {
        let record = load_shape(&path)?;
        if let Some(w) = &wanted {
            if !w.contains(&record.shape_id) {
                continue;
            }
        }
        shapes.push(preprocess(&record, config.points_per_part())?);
    }
    if shapes.is_empty() {
        return Err(Error::invalid(format!(
            "no shape files found in {}",
            data_dir.display()
        )));
    }
    Ok(shapes)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: Option<&Path>,
    data_dir: &Path,
    out_checkpoint: &Path,
    loss_csv: Option<&Path>,
    resume: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    let shapes = load_dataset(data_dir, &config, Some("train"))?;
    let samples: Vec<TrainSample> = shapes
        .iter()
        .map(|s| s.to_train_sample(&config.grouping, None))
        .collect::<Result<_>>()?;

    let init = match resume {
        Some(path) => load_checkpoint(path)?,
        None => Model::init_values(&config.model, config.train.seed)?,
    };
    let outcome = train(&config.model, init, &samples, &config.train)?;
    save_checkpoint(out_checkpoint, &outcome.values)?;
    if let Some(path) = loss_csv {
        let mut file = std::fs::File::create(path)?;
        write_loss_csv(&mut file, &outcome.log)?;
    }
    let first = outcome.log.first().map(|l| l.mean_loss).unwrap_or(0.0);
    let last = outcome.log.last().map(|l| l.mean_loss).unwrap_or(0.0);
    println!(
        "trained {} epochs on {} shapes: loss {first:.6} -> {last:.6}; checkpoint {}",
        outcome.log.len(),
        samples.len(),
        out_checkpoint.display()
    );
    if outcome.quat_fallbacks > 0 {
        println!("note: {} zero-norm quaternion fallbacks", outcome.quat_fallbacks);
    }
    Ok(())
}

fn assemble_variants(
    model: &Model,
    shape: &PreprocessedShape,
    grouping: &GroupingConfig,
    variants: usize,
    seed: u64,
) -> Result<Vec<AssemblyPrediction>> {
    let assignment = build_super_parts(&shape.parts, grouping)?;
    let input = hapw_core::model::ShapeInput::new(&shape.parts, &assignment, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(variants);
    for _ in 0..variants {
        let noise = NoiseVector::standard_normal(&mut rng, model.config.noise_dim);
        let fwd = model.forward(&input, &noise)?;
        out.push(fwd.to_prediction(&input));
    }
    Ok(out)
}

fn cmd_assemble(
    checkpoint: &Path,
    shape_file: &Path,
    config_path: Option<&Path>,
    variants: usize,
    seed: u64,
    out_dir: &Path,
    export: Option<ExportFormat>,
) -> Result<()> {
    if variants == 0 {
        return Err(Error::invalid("--variants must be >= 1"));
    }
    let config = RunConfig::load(config_path)?;
    let values = load_checkpoint(checkpoint)?;
    let model = Model::from_values(config.model.clone(), &values)?;
    let record = load_shape(shape_file)?;
    let shape = preprocess(&record, config.points_per_part())?;
    let predictions = assemble_variants(&model, &shape, &config.grouping, variants, seed)?;

    std::fs::create_dir_all(out_dir)?;
    for (k, prediction) in predictions.iter().enumerate() {
        let file = PredictionFile {
            shape_id: shape.shape_id.clone(),
            variant: k,
            seed,
            prediction: prediction.clone(),
        };
        let path = out_dir.join(format!("{}.pred{k}.json", shape.shape_id));
        std::fs::write(&path, serde_json::to_string_pretty(&file).unwrap())?;
        if let Some(format) = export {
            let posed = posed_parts(&shape.parts, &prediction.part_poses)?;
            let ext = match format {
                ExportFormat::Obj => "obj",
                ExportFormat::Ply => "ply",
            };
            let mut out = Vec::new();
            match format {
                ExportFormat::Obj => export_obj(&mut out, &posed)?,
                ExportFormat::Ply => export_ply(&mut out, &posed)?,
            }
            std::fs::write(out_dir.join(format!("{}.pred{k}.{ext}", shape.shape_id)), out)?;
        }
    }
    println!(
        "wrote {} variant(s) for {} to {}",
        variants,
        shape.shape_id,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    predictions_dir: &Path,
    data_dir: &Path,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let shapes = load_dataset(data_dir, &config, None)?;

    // collect prediction files per shape id
    let mut by_shape: BTreeMap<String, Vec<(usize, PredictionFile)>> = BTreeMap::new();
    let mut orphans: Vec<String> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(predictions_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().contains(".pred")))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid(format!(
            "no prediction files in {}",
            predictions_dir.display()
        )));
    }
    for path in entries {
        let file: PredictionFile = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                context: "prediction file".into(),
                reason: e.to_string(),
            })?;
        if !shapes.iter().any(|s| s.shape_id == file.shape_id) {
            orphans.push(format!("prediction without shape: {}", path.display()));
            continue;
        }
        by_shape.entry(file.shape_id.clone()).or_default().push((file.variant, file));
    }
    for shape in &shapes {
        if !by_shape.contains_key(&shape.shape_id) {
            orphans.push(format!("shape without predictions: {}", shape.shape_id));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::invalid(format!(
            "prediction/shape id mismatch:\n  {}",
            orphans.join("\n  ")
        )));
    }

    let mut rows = Vec::new();
    for shape in &shapes {
        let mut files = by_shape.remove(&shape.shape_id).unwrap();
        files.sort_by_key(|(variant, _)| *variant);
        let variants: Vec<Vec<hapw_core::geom::Pose6DoF>> = files
            .into_iter()
            .map(|(_, f)| f.prediction.part_poses)
            .collect();
        let report = evaluate_shape(
            &shape.parts,
            &shape.gt_poses,
            &variants,
            &config.thresholds,
            config.adjacency_eps(),
        )?;
        rows.push((shape.shape_id.clone(), report));
    }

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows, &config.thresholds)?;
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    let text = String::from_utf8(csv).expect("csv is utf8");
    let mean_line = text.lines().last().unwrap_or("");
    println!("{}", text.lines().next().unwrap_or(""));
    println!("{mean_line}");
    Ok(())
}

fn cmd_export(
    prediction_path: &Path,
    shape_file: &Path,
    config_path: Option<&Path>,
    format: ExportFormat,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let file: PredictionFile = serde_json::from_str(&std::fs::read_to_string(prediction_path)?)
        .map_err(|e| Error::Parse {
            path: prediction_path.display().to_string(),
            context: "prediction file".into(),
            reason: e.to_string(),
        })?;
    let record = load_shape(shape_file)?;
    let shape = preprocess(&record, config.points_per_part())?;
    if shape.shape_id != file.shape_id {
        return Err(Error::invalid(format!(
            "prediction is for {} but shape file is {}",
            file.shape_id, shape.shape_id
        )));
    }
    let posed = posed_parts(&shape.parts, &file.prediction.part_poses)?;
    let mut data = Vec::new();
    match format {
        ExportFormat::Obj => export_obj(&mut data, &posed)?,
        ExportFormat::Ply => export_ply(&mut data, &posed)?,
    }
    std::fs::write(out, data)?;
    println!("exported {} parts to {}", posed.len(), out.display());
    Ok(())
}
