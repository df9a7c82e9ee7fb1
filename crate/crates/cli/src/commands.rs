use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cellscope_core::data::cells::write_synthetic_cells;
use cellscope_core::data::{split, DatasetLayout, DatasetSplit, LabeledImage, SplitRatios};
use cellscope_core::model::format::{decode, digest_version, encode};
use cellscope_core::model::{append_transfer_head, build_vgg19, spec_sidecar, Classifier, ModelSpec, Scale};
use cellscope_core::nn::{AdamConfig, WeightStore};
use cellscope_core::pointcloud::generator::{DEFAULT_CAMERA_RADIUS, DEFAULT_FOCAL, DEFAULT_LATENT, DEFAULT_SIZE};
use cellscope_core::pointcloud::synth::{default_input_pose, read_dataset, synth_samples, write_dataset};
use cellscope_core::pointcloud::{generate, train_generator, write_obj, write_pcd, GeneratorConfig, GeneratorSpec};
use cellscope_core::training::{
    encode_sparse, evaluate, fine_tune, prune_magnitude, train, History, PruneConfig, TrainConfig,
};
use cellscope_core::data::image::preprocess_png;
use cellscope_service::{diagnose_bytes, ServiceConfig};
use serde_json::{json, Value};

use crate::args::*;
use crate::error::{CliError, Result};

/// `W.e2ew` → `W.e2ew.history.jsonl`.
pub fn history_path(weights: impl AsRef<Path>) -> PathBuf {
    let mut s = weights.as_ref().as_os_str().to_owned();
    s.push(".history.jsonl");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_history(weights: &Path, history: &History) -> Result<PathBuf> {
    let path = history_path(weights);
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    history
        .write_log(BufWriter::new(f))
        .map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn save_classifier(path: &Path, spec: &ModelSpec, weights: &WeightStore<f32>) -> Result<()> {
    write(path, &encode(weights)?)?;
    spec.save(spec_sidecar(path))?;
    Ok(())
}

/// Loads weights and their spec sidecar. The version is `version` or a
/// digest of the weight file, as in the service.
pub fn load_classifier(path: &Path, version: Option<String>) -> Result<Classifier> {
    let bytes = read(path)?;
    let weights = decode(&bytes)?;
    let spec = ModelSpec::load(spec_sidecar(path))?;
    let version = version.unwrap_or_else(|| digest_version(&bytes));
    Ok(Classifier::new(spec, weights, version)?)
}

fn load_generator(path: &Path) -> Result<(GeneratorSpec, WeightStore<f32>)> {
    let weights = decode(&read(path)?)?;
    let spec = GeneratorSpec::load(spec_sidecar(path))?;
    spec.combined().check_weights(&weights)?;
    Ok((spec, weights))
}

/// Loads the dataset at the input size of `spec` and splits it. With the
/// same directory, `per_class` and seed every subcommand sees the same
/// split.
fn load_split(
    data: &Path,
    per_class: Option<usize>,
    input: &[usize],
    seed: u64,
) -> Result<(Vec<LabeledImage>, DatasetSplit)> {
    let mut layout = DatasetLayout::scan(data)?;
    if let Some(n) = per_class {
        layout = layout.subsample(n, seed);
    }
    let (samples, report) = layout.load((input[1], input[2]))?;
    log::info!(
        "loaded {} images (per class {:?}), skipped {}",
        report.loaded,
        report.per_class,
        report.skipped.len()
    );
    let split = split(&samples, SplitRatios::default(), seed)?;
    Ok((samples, split))
}

fn pick(samples: &[LabeledImage], idx: &[usize]) -> Vec<LabeledImage> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Copies every tensor of `from` into `into`; names must exist there with
/// the same shape.
fn import_tensors(into: &mut WeightStore<f32>, from: &WeightStore<f32>) -> Result<usize> {
    for (name, t) in from.iter() {
        match into.get(name) {
            Some(cur) if cur.shape() == t.shape() => {}
            Some(cur) => {
                return Err(CliError::Usage(format!(
                    "feature tensor {name} has shape {:?}, the model expects {:?}",
                    t.shape(),
                    cur.shape()
                )))
            }
            None => return Err(CliError::Usage(format!("feature tensor {name} is not a model parameter"))),
        }
        into.replace(name, t.clone());
    }
    Ok(from.len())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable output")
}

pub fn train_cmd(a: &TrainArgs, seed: u64) -> Result<Value> {
    let scale: Scale = a.scale.into();
    let spec = append_transfer_head(
        build_vgg19(scale.default_input(), scale)?,
        &cellscope_core::model::DEFAULT_HEAD_WIDTHS,
        !a.unfreeze,
    )?;
    let mut w0 = spec.network.init_weights::<f32>(seed)?;
    if let Some(path) = &a.features {
        let n = import_tensors(&mut w0, &decode(&read(path)?)?)?;
        log::info!("imported {n} tensors from {}", path.display());
    }
    let (samples, split) = load_split(&a.data.data, a.data.per_class, spec.input_shape(), seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed,
        adam: AdamConfig::with_lr(a.lr),
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    let (w, history) = train(&spec, &w0, &samples, &split, &cfg)?;
    save_classifier(&a.out, &spec, &w)?;
    let hist = write_history(&a.out, &history)?;
    let best = &history.records[history.best_epoch - 1];
    let test = if split.test.is_empty() {
        Value::Null
    } else {
        to_value(&evaluate(&spec, &w, &pick(&samples, &split.test))?)
    };
    Ok(json!({
        "best_epoch": history.best_epoch,
        "epochs": history.records.len(),
        "history": hist,
        "spec": spec_sidecar(&a.out),
        "test": test,
        "val_accuracy": best.val_accuracy,
        "weights": a.out,
    }))
}

pub fn evaluate_cmd(a: &EvaluateArgs, seed: u64) -> Result<Value> {
    let clf = load_classifier(&a.weights, None)?;
    let (samples, split) = load_split(&a.data.data, a.data.per_class, clf.spec().input_shape(), seed)?;
    let idx: Vec<usize> = match a.split {
        SplitArg::Train => split.train,
        SplitArg::Val => split.val,
        SplitArg::Test => split.test,
        SplitArg::All => (0..samples.len()).collect(),
    };
    if idx.is_empty() {
        return Err(CliError::Usage(format!("the {:?} split is empty", a.split)));
    }
    let m = evaluate(clf.spec(), clf.weights(), &pick(&samples, &idx))?;
    Ok(to_value(&m))
}

pub fn prune_cmd(a: &PruneArgs, seed: u64) -> Result<Value> {
    if a.fine_tune > 0 && a.data.is_none() {
        return Err(CliError::Usage("--fine-tune needs --data (or pass --fine-tune 0)".into()));
    }
    let clf = load_classifier(&a.weights, None)?;
    let spec = clf.spec();
    let cfg = PruneConfig {
        sparsity: a.sparsity,
        scope: a.scope.into(),
    };
    let (pruned, mut report) = prune_magnitude(clf.weights(), &cfg)?;
    let mut out = json!({});
    let mut weights = pruned;
    if let Some(data) = &a.data {
        let (samples, split) = load_split(data, a.per_class, spec.input_shape(), seed)?;
        let val = pick(&samples, &split.val);
        let acc = |w: &WeightStore<f32>| -> Result<Option<f64>> {
            Ok(if val.is_empty() {
                None
            } else {
                Some(evaluate(spec, w, &val)?.accuracy)
            })
        };
        out["val_accuracy_unpruned"] = json!(acc(clf.weights())?);
        out["val_accuracy_pruned"] = json!(acc(&weights)?);
        let tcfg = TrainConfig {
            epochs: a.fine_tune,
            batch_size: a.batch,
            seed,
            adam: AdamConfig::with_lr(a.lr),
            augment: !a.no_augment,
            ..TrainConfig::default()
        };
        let (tuned, history) = fine_tune(spec, &weights, &samples, &split, &tcfg)?;
        weights = tuned;
        if !history.records.is_empty() {
            out["history"] = json!(write_history(&a.out, &history)?);
        }
        out["val_accuracy_fine_tuned"] = json!(acc(&weights)?);
    }
    save_classifier(&a.out, spec, &weights)?;
    let sparse = encode_sparse(&weights)?;
    report.sparse_bytes = sparse.len();
    report.dense_bytes = encode(&weights)?.len();
    report.bytes_saved = report.dense_bytes as isize - report.sparse_bytes as isize;
    if let Some(path) = &a.sparse_out {
        write(path, &sparse)?;
    }
    out["fine_tune_epochs"] = json!(a.fine_tune);
    out["report"] = to_value(&report);
    out["weights"] = json!(a.out);
    Ok(out)
}

/// The JSON body the service returns for the same image.
pub fn predict_cmd(a: &PredictArgs) -> Result<String> {
    let clf = load_classifier(&a.weights, a.model_version.clone())?;
    let d = diagnose_bytes(&clf, &read(&a.image)?)?;
    Ok(serde_json::to_string(&d).expect("diagnosis serializes"))
}

pub fn reconstruct_cmd(a: &ReconstructArgs) -> Result<Value> {
    let (spec, weights) = load_generator(&a.gen_weights)?;
    let shape = spec.input_shape();
    let image = preprocess_png(&read(&a.image)?, (shape[1], shape[2]))?;
    let cloud = generate(&spec, &weights, &image, a.threshold)?;
    let bytes = match a.format {
        FormatArg::Obj => write_obj(&cloud),
        FormatArg::Pcd => write_pcd(&cloud),
    };
    write(&a.out, &bytes)?;
    Ok(json!({
        "format": a.format,
        "out": a.out,
        "points": cloud.len(),
    }))
}

/// Generator layout for `views` and `size`; focal length scales with size.
fn geometry_spec(g: &GeometryArgs, latent: usize) -> Result<GeneratorSpec> {
    let focal = DEFAULT_FOCAL * g.size as f64 / DEFAULT_SIZE as f64;
    Ok(GeneratorSpec::new(
        g.views,
        (g.size, g.size),
        latent,
        DEFAULT_CAMERA_RADIUS,
        focal,
    )?)
}

pub fn synth_cmd(a: &SynthArgs, seed: u64) -> Result<Value> {
    match a.kind {
        SynthKind::Cells => {
            write_synthetic_cells(&a.out, a.count, seed)?;
            Ok(json!({ "kind": a.kind, "out": a.out, "per_class": a.count }))
        }
        SynthKind::Generator => {
            let spec = geometry_spec(&a.geometry, DEFAULT_LATENT)?;
            let input = default_input_pose(spec.camera_radius, spec.intrinsics);
            let samples = synth_samples(a.count, seed, &spec.poses(), &input)?;
            write_dataset(&a.out, &samples, spec.views, spec.size())?;
            Ok(json!({
                "count": a.count,
                "images": cellscope_core::pointcloud::synth::images_path(&a.out),
                "kind": a.kind,
                "out": a.out,
            }))
        }
    }
}

pub fn train_gen_cmd(a: &TrainGenArgs, seed: u64) -> Result<Value> {
    let spec = geometry_spec(&a.geometry, a.latent)?;
    let samples = read_dataset(&a.data, spec.views, spec.size(), spec.input_shape())?;
    let n_val = ((samples.len() as f64 * a.val_fraction).floor() as usize).min(samples.len().saturating_sub(1));
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    let cfg = GeneratorConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed,
        adam: AdamConfig::with_lr(a.lr),
        ..GeneratorConfig::default()
    };
    let w0 = spec.init_weights(seed)?;
    let (w, history) = train_generator(&spec, &w0, train_set, val_set, &cfg)?;
    write(&a.out, &encode(&w)?)?;
    spec.save(spec_sidecar(&a.out))?;
    let hist = history_path(&a.out);
    let mut log = String::new();
    for r in &history.records {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
    }
    write(&hist, log.as_bytes())?;
    let best = &history.records[history.best_epoch - 1];
    Ok(json!({
        "best_epoch": history.best_epoch,
        "history": hist,
        "loss": best.loss,
        "steps": history.steps,
        "train_samples": train_set.len(),
        "val_loss": best.val_loss,
        "val_samples": val_set.len(),
        "weights": a.out,
    }))
}

/// Defaults, then the config file, then `CELLSCOPE_*` variables, then flags.
pub fn resolve_service_config(a: &ServeArgs, env: impl Fn(&str) -> Option<String>) -> Result<ServiceConfig> {
    let mut cfg = match &a.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env(env)?;
    if let Some(h) = &a.host {
        cfg.host = h.clone();
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(w) = &a.weights {
        cfg.classifier_weights = w.clone();
    }
    if let Some(g) = &a.gen_weights {
        cfg.generator_weights = Some(g.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn serve_cmd(cfg: ServiceConfig) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(cellscope_service::serve(cfg))?;
    Ok(())
}
