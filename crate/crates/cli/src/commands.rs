use std::path::{Path, PathBuf};
use std::time::Duration;

use octclass_core::data::{argmax_f64, load_image, make_splits, scan_dataset_dir, DatasetManifest, Split};
use octclass_core::metrics::{render_comparison, render_report, EvaluationReport, ReportFormat};
use octclass_core::models::{build_model, load_checkpoint, save_checkpoint, ModelHandle};
use octclass_core::plot::{fonts_available, plot_confusion, plot_history};
use octclass_core::synthetic::{generate_dataset, SyntheticConfig};
use octclass_core::train::{evaluate_split, fit, TrainHistory};
use octclass_core::xai::{encode_png, explain, render_overlay, to_rgb_image, ExplainRequest, Method};
use octclass_core::{ClassLabel, Error, IMAGE_SIZE};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{
    Cli, CliError, Command, CompareArgs, DataArgs, EvaluateArgs, ExplainArgs, PlotCurvesArgs, PrepareDataArgs, RunConfig, ServeArgs,
    SynthDataArgs, TrainArgs,
};

pub(crate) fn dispatch(cli: Cli, command_line: &str) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::PrepareData(a) => prepare_data(cfg, a, command_line),
        Command::SynthData(a) => synth_data(cfg, a, command_line),
        Command::Train(a) => train(cfg, a, command_line),
        Command::Evaluate(a) => evaluate(cfg, a, command_line),
        Command::Explain(a) => explain_cmd(cfg, a, command_line),
        Command::PlotCurves(a) => plot_curves(cfg, a, command_line),
        Command::Compare(a) => compare(a),
        Command::Serve(a) => serve(cfg, a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn apply_data_args(cfg: &mut RunConfig, args: &DataArgs) {
    if let Some(root) = &args.data_root {
        cfg.data.root = Some(root.clone());
        cfg.data.manifest = None;
    }
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(m.clone());
    }
}

fn scan_and_split(root: &Path, cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let scanned = scan_dataset_dir(absolute(root)?)?;
    for w in &scanned.warnings {
        log::warn!("{w}");
    }
    let [a, b, c] = cfg.data.split_fractions;
    Ok(make_splits(&scanned, (a, b, c), cfg.data.split_seed)?)
}

fn load_dataset(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    if let Some(path) = &cfg.data.manifest {
        require_file(path, "manifest")?;
        return Ok(DatasetManifest::load(path)?);
    }
    let Some(root) = &cfg.data.root else {
        return Err(CliError::Usage(
            "no dataset given: pass --data-root or --manifest, or set data.root in the config".into(),
        ));
    };
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset root {} does not exist", root.display())));
    }
    let existing = root.join("manifest.json");
    if existing.is_file() {
        log::info!("using {}", existing.display());
        return Ok(DatasetManifest::load(existing)?);
    }
    scan_and_split(root, cfg)
}

fn print_split_counts(manifest: &DatasetManifest) {
    print!("{:<8}", "split");
    for c in &manifest.classes {
        print!("{:>8}", c.name());
    }
    println!("{:>8}", "total");
    for split in Split::ALL {
        let entries = manifest.split_entries(split);
        print!("{:<8}", split.as_str());
        for c in &manifest.classes {
            print!("{:>8}", entries.iter().filter(|e| e.class == *c).count());
        }
        println!("{:>8}", entries.len());
    }
}

fn prepare_data(mut cfg: RunConfig, args: PrepareDataArgs, command_line: &str) -> Result<(), CliError> {
    if let Some(root) = args.data_root {
        cfg.data.root = Some(root);
    }
    if let Some(f) = args.fractions {
        let f: [f64; 3] = f
            .try_into()
            .map_err(|f: Vec<f64>| CliError::Usage(format!("--fractions takes three values, got {}", f.len())))?;
        cfg.data.split_fractions = f;
    }
    if let Some(seed) = args.seed {
        cfg.data.split_seed = seed;
    }
    cfg.validate()?;
    let Some(root) = cfg.data.root.clone() else {
        return Err(CliError::Usage("prepare-data needs --data-root or data.root in the config".into()));
    };
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset root {} does not exist", root.display())));
    }
    let manifest = scan_and_split(&root, &cfg)?;
    let out = args.out.unwrap_or_else(|| root.join("manifest.json"));
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.data.manifest = Some(out.clone());
    cfg.echo_into(dir, command_line)?;
    manifest.save(&out)?;
    print_split_counts(&manifest);
    println!("wrote {}", out.display());
    Ok(())
}

fn synth_data(mut cfg: RunConfig, args: SynthDataArgs, command_line: &str) -> Result<(), CliError> {
    let synth = SyntheticConfig {
        train: args.train,
        val: args.val,
        test: args.test,
        noise_std: args.noise,
        seed: args.seed,
    };
    if synth.train == 0 || synth.val == 0 {
        return Err(CliError::Usage("--train and --val must be at least 1".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let root = absolute(&args.out)?;
    let manifest = generate_dataset(&root, &synth)?;
    let path = root.join("manifest.json");
    manifest.save(&path)?;
    cfg.data.root = Some(root.clone());
    cfg.data.manifest = Some(path.clone());
    cfg.echo_into(&root, command_line)?;
    print_split_counts(&manifest);
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn warn_on_plot_error(result: octclass_core::Result<()>, what: &str) {
    if let Err(e) = result {
        log::warn!("skipped {what}: {e}");
    }
}

fn report_for(model: &ModelHandle, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<EvaluationReport, CliError> {
    let eval = evaluate_split(model, manifest, split, batch_size)?;
    let classes = model.class_order().len();
    Ok(EvaluationReport::from_predictions(model.name(), &eval.truths, &eval.predictions, classes)?)
}

fn check_classes(model_classes: &[ClassLabel], manifest: &DatasetManifest) -> Result<(), CliError> {
    if model_classes != manifest.classes.as_slice() {
        let names = |c: &[ClassLabel]| c.iter().map(|c| c.name()).collect::<Vec<_>>().join(",");
        return Err(Error::ConfigMismatch(format!(
            "model classes [{}] differ from dataset classes [{}]",
            names(model_classes),
            names(&manifest.classes)
        ))
        .into());
    }
    Ok(())
}

fn train(mut cfg: RunConfig, args: TrainArgs, command_line: &str) -> Result<(), CliError> {
    apply_data_args(&mut cfg, &args.data);
    if let Some(a) = args.arch {
        cfg.model.architecture = a;
    }
    if let Some(w) = args.width {
        cfg.model.width_multiplier = w;
    }
    if let Some(d) = args.depth {
        cfg.model.depth_multiplier = d;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(p) = args.patience {
        cfg.train.patience = p;
    }
    if let Some(s) = args.seed {
        cfg.train.seeds.data = s;
        cfg.train.seeds.model = s;
        cfg.train.seeds.augment = s;
    }
    if args.no_augment {
        cfg.train.augment = false;
    }
    cfg.validate()?;
    let manifest = load_dataset(&cfg)?;
    let model_cfg = cfg.model.to_model_config(cfg.train.seeds.model);
    check_classes(&model_cfg.class_order(), &manifest)?;
    let out = args.out.unwrap_or_else(|| Path::new("runs").join(cfg.model.architecture.as_str()));
    cfg.echo_into(&out, command_line)?;

    let model = build_model(&model_cfg)?;
    log::info!(
        "training {} ({} parameters) on {} train / {} val images",
        model.name(),
        model.parameter_count(),
        manifest.split_len(Split::Train),
        manifest.split_len(Split::Val)
    );
    let (model, history) = fit(model, &manifest, &cfg.train)?;

    let checkpoint = out.join("checkpoint.json");
    save_checkpoint(&model, &checkpoint)?;
    history.write_csv(out.join("history.csv"))?;
    history.save_json(out.join("history.json"))?;
    let report = report_for(&model, &manifest, Split::Val, cfg.train.batch_size)?;
    write_json(&out.join("val_report.json"), &report)?;
    std::fs::write(out.join("val_report.md"), render_report(&report, ReportFormat::Markdown)?)?;
    if fonts_available() {
        warn_on_plot_error(plot_history(&history, &out).map(|_| ()), "curve plots");
        warn_on_plot_error(plot_confusion(&report, out.join("val_confusion.png")), "confusion plot");
    }

    if let Some(best) = history.best() {
        println!(
            "{} epochs{}; best epoch {}: val loss {:.4}, val accuracy {:.2}%",
            history.records.len(),
            if history.stopped_early { " (early stop)" } else { "" },
            best.epoch,
            best.val_loss,
            best.val_acc * 100.0
        );
    }
    println!("{}", render_report(&report, ReportFormat::Text)?);
    println!("wrote {}", checkpoint.display());
    Ok(())
}

fn evaluate(mut cfg: RunConfig, args: EvaluateArgs, command_line: &str) -> Result<(), CliError> {
    apply_data_args(&mut cfg, &args.data);
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    let split: Split = args.split.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let format: ReportFormat = args.format.parse()?;
    require_file(&args.checkpoint, "checkpoint")?;
    let manifest = load_dataset(&cfg)?;
    let model = load_checkpoint(&args.checkpoint)?;
    check_classes(model.class_order(), &manifest)?;
    let out = match args.out {
        Some(dir) => dir,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    cfg.echo_into(&out, command_line)?;

    let report = report_for(&model, &manifest, split, cfg.train.batch_size)?;
    let stem = format!("{}_report", split.as_str());
    write_json(&out.join(format!("{stem}.json")), &report)?;
    if format != ReportFormat::Json {
        std::fs::write(out.join(format!("{stem}.{}", format.extension())), render_report(&report, format)?)?;
    }
    if fonts_available() {
        warn_on_plot_error(plot_confusion(&report, out.join(format!("{}_confusion.png", split.as_str()))), "confusion plot");
    }
    println!("{}", render_report(&report, format)?);
    Ok(())
}

#[derive(Serialize)]
struct MapFile<'a> {
    method: &'a str,
    target_class: &'a str,
    class_probability: f64,
    height: usize,
    width: usize,
    params: &'a Value,
    values: Vec<&'a [f64]>,
}

fn parse_class(text: &str, classes: usize) -> Result<usize, CliError> {
    let index = match text.trim().parse::<usize>() {
        Ok(i) => i,
        Err(_) => ClassLabel::from_name(text.trim())
            .map(ClassLabel::index)
            .ok_or_else(|| CliError::Usage(format!("unknown class {text:?}")))?,
    };
    if index >= classes {
        return Err(Error::IndexOutOfRange { index, classes }.into());
    }
    Ok(index)
}

fn explain_params(cfg: &RunConfig, args: &ExplainArgs, method: Method) -> Result<Value, CliError> {
    let mut params = match cfg.xai.params_for(method) {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let overrides: [(&str, Option<Value>, Method); 6] = [
        ("layer", args.layer.clone().map(Value::from), Method::GradCam),
        ("patch_size", args.patch_size.map(Value::from), Method::Occlusion),
        ("stride", args.stride.map(Value::from), Method::Occlusion),
        ("baseline_value", args.baseline_value.map(Value::from), Method::Occlusion),
        ("num_superpixels", args.num_superpixels.map(Value::from), Method::Lime),
        ("num_samples", args.num_samples.map(Value::from), Method::Lime),
    ];
    let seed = ("seed", args.seed.map(Value::from), Method::Lime);
    for (key, value, owner) in overrides.into_iter().chain([seed]) {
        if let Some(v) = value {
            if owner != method {
                return Err(CliError::Usage(format!(
                    "--{} applies to {} only",
                    key.replace('_', "-"),
                    owner.as_str()
                )));
            }
            params.insert(key.into(), v);
        }
    }
    if let Some(text) = &args.params {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(extra)) => params.extend(extra),
            Ok(_) => return Err(CliError::Usage("--params must be a JSON object".into())),
            Err(e) => return Err(CliError::Usage(format!("--params is not valid JSON: {e}"))),
        }
    }
    if method == Method::GradCam && params.get("layer") == Some(&Value::Null) {
        params.remove("layer");
    }
    Ok(Value::Object(params))
}

fn explain_cmd(mut cfg: RunConfig, args: ExplainArgs, command_line: &str) -> Result<(), CliError> {
    let method = args.method.unwrap_or(cfg.xai.method);
    cfg.xai.method = method;
    if let Some(a) = args.alpha {
        cfg.xai.overlay_alpha = a;
    }
    cfg.validate()?;
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.image, "image")?;
    let params = explain_params(&cfg, &args, method)?;
    let request = ExplainRequest::from_params(method, Some(&params))?;
    match &request {
        ExplainRequest::GradCam { layer } => cfg.xai.gradcam_layer = layer.clone(),
        ExplainRequest::Lime(c) => cfg.xai.lime = *c,
        ExplainRequest::Occlusion(c) => cfg.xai.occlusion = *c,
    }

    let model = load_checkpoint(&args.checkpoint)?;
    let names = model.class_order().to_vec();
    let class = args.class.as_deref().map(|c| parse_class(c, names.len())).transpose()?;
    let image = load_image(&args.image)?;
    cfg.echo_into(&args.out, command_line)?;

    let probs = model.predict(&image)?;
    let predicted = argmax_f64(&probs);
    let mut result = explain(&model, &image, &request, class)?;
    if cfg.xai.overlay_alpha != octclass_core::xai::DEFAULT_OVERLAY_ALPHA {
        result.overlay = render_overlay(&image, &result.map, cfg.xai.overlay_alpha)?;
    }

    let tag = method.as_str();
    let figure = args.out.join(format!("{tag}_figure.png"));
    std::fs::write(&figure, encode_png(&result.figure(&image))?)?;
    let overlay = args.out.join(format!("{tag}_overlay.png"));
    std::fs::write(&overlay, encode_png(&to_rgb_image(&result.overlay, IMAGE_SIZE, IMAGE_SIZE))?)?;
    let map = &result.map;
    let target = names[map.target_class].name();
    let map_path = args.out.join(format!("{tag}_map.json"));
    write_json(
        &map_path,
        &MapFile {
            method: tag,
            target_class: target,
            class_probability: result.class_probability,
            height: map.height,
            width: map.width,
            params: &result.params,
            values: map.values.chunks(map.width).collect(),
        },
    )?;

    println!("predicted {} ({:.1}%)", names[predicted].name(), probs[predicted] * 100.0);
    println!("{tag} explanation for {target} (p = {:.4})", result.class_probability);
    for p in [&figure, &overlay, &map_path] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn plot_curves(cfg: RunConfig, args: PlotCurvesArgs, command_line: &str) -> Result<(), CliError> {
    let histories = args
        .history
        .iter()
        .map(|p| {
            require_file(p, "history")?;
            Ok((p, TrainHistory::read_csv(p)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if !fonts_available() {
        log::warn!("plots will have no axis labels; set OCTCLASS_FONT to a .ttf file");
    }
    cfg.echo_into(&args.out, command_line)?;
    let single = histories.len() == 1;
    for (path, history) in histories {
        let dir = if single {
            args.out.clone()
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("history");
            let parent = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
            args.out.join(match parent {
                Some(p) if stem == "history" => p.to_string(),
                _ => stem.to_string(),
            })
        };
        for written in plot_history(&history, &dir)? {
            println!("wrote {}", written.display());
        }
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), CliError> {
    let format: ReportFormat = args.format.parse()?;
    let mut reports = Vec::new();
    for path in &args.reports {
        require_file(path, "report")?;
        let text = std::fs::read_to_string(path)?;
        let report: EvaluationReport =
            serde_json::from_str(&text).map_err(|e| Error::ParseError(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let table = render_comparison(&reports, !args.no_prior, format)?;
    println!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table)?;
    }
    Ok(())
}

fn serve(mut cfg: RunConfig, args: ServeArgs) -> Result<(), CliError> {
    let s = &mut cfg.serve;
    if let Some(c) = args.checkpoint {
        s.checkpoint = Some(c);
    }
    if let Some(h) = args.host {
        s.host = h;
    }
    if let Some(p) = args.port {
        s.port = p;
    }
    if let Some(t) = args.explain_timeout_s {
        s.explain_timeout_s = t;
    }
    if let Some(m) = args.max_upload_mb {
        s.max_upload_mb = m;
    }
    if let Some(n) = args.max_concurrent_explains {
        s.max_concurrent_explains = n;
    }
    cfg.validate()?;
    let s = cfg.serve;
    let Some(checkpoint) = s.checkpoint else {
        return Err(CliError::Usage("serve needs --checkpoint (or serve.checkpoint in the config)".into()));
    };
    require_file(&checkpoint, "checkpoint")?;
    let service = octclass_serve::ServiceConfig {
        checkpoint,
        host: s.host,
        port: s.port,
        explain_timeout: Duration::from_secs_f64(s.explain_timeout_s),
        max_upload_bytes: (s.max_upload_mb * 1024.0 * 1024.0) as usize,
        max_concurrent_explains: s.max_concurrent_explains,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime
        .block_on(octclass_serve::run(service))
        .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
}
