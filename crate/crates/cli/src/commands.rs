use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use occlift_core::dataset::INDEX_FILE;
use occlift_core::occlusion::save_mask;
use occlift_core::quality::encode_all;
use occlift_core::trainer::format_log;
use occlift_core::{
    evaluate, fit, get_topology, load_checkpoint, load_dataset, make_dataset, masked_predictions, parameter_count,
    save_checkpoint, save_dataset, train_classifier, Augmentation, Dataset, EpochLog, LifterConfig, LifterModel,
    MaskSpec, PairedSequence, PoseSequence, Protocol, ReportTable, SplitMix64, TrainConfig,
};

use crate::manifest::RunManifest;
use crate::{
    CliError, CliResult, Command, EvalArgs, LevelArgs, ModelArgs, OutArgs, QualityArgs, SchemeArg, SplitArg,
    SweepArgs, SynthArgs, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub(crate) fn execute(command: &Command) -> CliResult<PathBuf> {
    let clock = Instant::now();
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut manifest = RunManifest::new(command)?;
    let out = match command {
        Command::Synth(a) => {
            let out = prepare_out(&a.out)?;
            synth(a, &out, &mut manifest)?;
            out
        }
        Command::Train(a) => {
            let out = prepare_out(&a.out)?;
            train(a, &out, &mut manifest)?;
            out
        }
        Command::Eval(a) => {
            let out = prepare_out(&a.out)?;
            eval(a, &out, &mut manifest)?;
            out
        }
        Command::SweepSeqlen(a) => {
            let out = prepare_out(&a.out)?;
            sweep(a, &out, &mut manifest)?;
            out
        }
        Command::Quality(a) => {
            let out = prepare_out(&a.out)?;
            quality(a, &out, &mut manifest)?;
            out
        }
        Command::Replay(_) => unreachable!("replay is resolved before execution"),
    };
    manifest.started_unix_s = started;
    manifest.wall_seconds = clock.elapsed().as_secs_f64();
    manifest.save(&out)?;
    Ok(out)
}

fn prepare_out(args: &OutArgs) -> CliResult<PathBuf> {
    let out = &args.out;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
        if entries.next().is_some() && !args.force {
            return Err(CliError::OutputExists(out.clone()));
        }
    } else {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    Ok(out.clone())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn synth(a: &SynthArgs, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let topo = get_topology(&a.topology)?;
    let ds = make_dataset(a.seed, topo, a.actions, a.per_action, a.frames)?;
    save_dataset(&ds, out)?;
    m.seeds.insert("synth".into(), a.seed);
    m.outputs.push(INDEX_FILE.into());
    for p in ds.train.iter().chain(&ds.test) {
        m.outputs.push(format!("{}.2d.poseseq", p.name));
        m.outputs.push(format!("{}.3d.poseseq", p.name));
    }
    let reloaded = load_dataset(out)?;
    if reloaded.len() != a.actions * a.per_action || reloaded != ds {
        return Err(CliError::Invariant(format!(
            "dataset reloads with {} pairs, expected {}",
            reloaded.len(),
            a.actions * a.per_action
        )));
    }
    eprintln!(
        "synth: {} pairs ({} train, {} test) in {}",
        ds.len(),
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn lifter_config(topology: &str, guided: bool, channels: usize, blocks: usize, dropout: Option<f64>) -> LifterConfig {
    let base = LifterConfig::toy(topology, guided);
    LifterConfig {
        channels,
        blocks,
        dropout_rate: dropout.unwrap_or(base.dropout_rate),
        ..base
    }
}

fn train_config(n_joints: usize, args: &ModelArgs, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(n_joints, args.epochs, seed);
    if let Some(lr) = args.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if let Some(c) = args.chunk {
        tc.chunk_outputs = c;
    }
    if args.no_augment {
        tc.augmentation = Augmentation::None;
    }
    tc
}

/// Builds and trains one model; the log is appended to `log_path` as
/// epochs complete.
fn train_model(
    ds: &Dataset,
    config: &LifterConfig,
    args: &ModelArgs,
    seed: u64,
    log_path: &Path,
    m: &mut RunManifest,
    tag: &str,
) -> CliResult<(LifterModel<f32>, Vec<EpochLog>)> {
    let model_seed = SplitMix64::derive(seed, 0);
    let train_seed = SplitMix64::derive(seed, 1);
    let mut model = LifterModel::<f32>::build(config, model_seed)?;
    let tc = train_config(model.topology().n_joints, args, train_seed);
    m.seeds.insert(format!("{tag}model_init"), model_seed);
    m.seeds.insert(format!("{tag}training"), train_seed);
    m.resolved_insert(&format!("{tag}lifter"), config)?;
    m.resolved_insert(&format!("{tag}training"), &tc)?;

    let mut log = fs::File::create(log_path).map_err(|e| CliError::io(log_path, e))?;
    let mut log_error = None;
    let val: &[PairedSequence] = if args.val { &ds.test } else { &[] };
    let logs = fit(&mut model, &ds.train, val, &tc, |e| {
        let line = format_log(std::slice::from_ref(e)).unwrap_or_default();
        if let Err(err) = log.write_all(line.as_bytes()) {
            log_error.get_or_insert(err);
        }
        match e.val_mpjpe_p1_mm {
            Some(v) => eprintln!(
                "{tag}epoch {}: loss {:.2} mm, val {:.2} mm ({:.1} s)",
                e.epoch, e.train_loss_mm, v, e.wall_seconds
            ),
            None => eprintln!("{tag}epoch {}: loss {:.2} mm ({:.1} s)", e.epoch, e.train_loss_mm, e.wall_seconds),
        }
    })?;
    if let Some(err) = log_error {
        return Err(CliError::io(log_path, err));
    }
    if logs.len() != args.epochs {
        return Err(CliError::Invariant(format!("{} epoch records for {} epochs", logs.len(), args.epochs)));
    }
    Ok((model, logs))
}

fn check_checkpoint(path: &Path, config: &LifterConfig) -> CliResult<()> {
    let loaded = load_checkpoint::<f32>(path)?;
    let expected = parameter_count(config)?;
    if loaded.enumerated_parameter_count() != expected {
        return Err(CliError::Invariant(format!(
            "checkpoint holds {} parameters, expected {expected}",
            loaded.enumerated_parameter_count()
        )));
    }
    if loaded.parameters().iter().any(|p| !p.value.all_finite()) {
        return Err(CliError::Invariant("checkpoint contains non-finite parameters".into()));
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    m.inputs.insert("data".into(), a.data.clone());
    let config = lifter_config(&ds.topology, a.variant.guided, a.model.channels, a.model.blocks, a.model.dropout);
    let (model, _) = train_model(&ds, &config, &a.model, a.seed, &out.join(TRAIN_LOG_FILE), m, "")?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    check_checkpoint(&ckpt, &config)?;
    m.outputs.extend([CHECKPOINT_FILE.to_string(), TRAIN_LOG_FILE.to_string()]);
    Ok(())
}

fn split<'a>(ds: &'a Dataset, which: SplitArg) -> CliResult<&'a [PairedSequence]> {
    let seqs = match which {
        SplitArg::Train => &ds.train,
        SplitArg::Test => &ds.test,
    };
    if seqs.is_empty() {
        return Err(occlift_core::Error::EmptySequence.into());
    }
    Ok(seqs)
}

/// One mask recipe per requested level.
pub(crate) fn level_specs(levels: &LevelArgs) -> CliResult<Vec<MaskSpec>> {
    let empty = |flag: &str| CliError::Usage(format!("--{flag} needs at least one value for this scheme"));
    let specs: Vec<MaskSpec> = match levels.scheme {
        SchemeArg::None => vec![MaskSpec::None],
        SchemeArg::Random => levels.k.iter().map(|&k| MaskSpec::RandomK { k }).collect(),
        SchemeArg::Part => levels.part.iter().map(|p| MaskSpec::BodyPart { part: p.clone() }).collect(),
        SchemeArg::Blackout => levels
            .t
            .iter()
            .map(|&t| MaskSpec::FrameBlackout { t, start: levels.start })
            .collect(),
    };
    if specs.is_empty() {
        return Err(empty(match levels.scheme {
            SchemeArg::Random => "k",
            SchemeArg::Part => "part",
            _ => "t",
        }));
    }
    Ok(specs)
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn variant_name(model: &LifterModel<f32>) -> &'static str {
    if model.config().guided() {
        "guided"
    } else {
        "baseline"
    }
}

fn check_finite(table: &ReportTable, what: &str) -> CliResult<()> {
    if table.rows.iter().flat_map(|(_, v)| v).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CliError::Invariant(format!("{what} contains a negative or non-finite value")));
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let ckpt = resolve_checkpoint(&a.ckpt);
    let model = load_checkpoint::<f32>(&ckpt)?;
    let ds = load_dataset(&a.data)?;
    let seqs = split(&ds, a.levels.split)?;
    let specs = level_specs(&a.levels)?;
    let protocol = Protocol::try_from(a.protocol)?;
    m.inputs.insert("checkpoint".into(), ckpt);
    m.inputs.insert("data".into(), a.data.clone());
    m.seeds.insert("masks".into(), a.levels.seed);

    let name = a.name.clone().unwrap_or_else(|| variant_name(&model).to_string());
    let columns: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
    let mut overall = ReportTable::new("model", columns.clone());
    let mut per_action = ReportTable::new("action", columns.clone());
    let mut reports = Vec::with_capacity(specs.len());
    for spec in &specs {
        let report = evaluate(&model, seqs, protocol, spec, a.levels.seed)?;
        eprintln!("eval {name} {spec}: {:.2} mm (protocol {})", report.overall_mm, protocol.number());
        reports.push(report);
    }
    overall.push(&name, reports.iter().map(|r| r.overall_mm).collect())?;
    for action in reports[0].per_action.keys() {
        per_action.push(action, reports.iter().map(|r| r.per_action[action].mean_mm).collect())?;
    }
    check_finite(&overall, "evaluation")?;

    let summary: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "scheme": r.scheme,
                "protocol": r.protocol.number(),
                "sequence_length": r.sequence_length,
                "frames": r.per_frame.len(),
                "overall_mm": r.overall_mm,
                "per_action": r.per_action,
            })
        })
        .collect();
    write_file(&out.join("eval.csv"), overall.to_csv()?)?;
    write_file(&out.join("eval_per_action.csv"), per_action.to_csv()?)?;
    let json = serde_json::to_string_pretty(&summary).map_err(occlift_core::Error::from)?;
    write_file(&out.join("report.json"), json + "\n")?;
    m.outputs.extend(["eval.csv", "eval_per_action.csv", "report.json"].map(String::from));

    if a.save_masks {
        for (spec, column) in specs.iter().zip(&columns) {
            let dir = out.join("masks").join(column);
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            for (i, pair) in seqs.iter().enumerate() {
                let mask = spec.generate(SplitMix64::derive(a.levels.seed, i as u64), pair.len(), pair.input2d.topology)?;
                let file = format!("{}.occmask", pair.name);
                save_mask(&mask, dir.join(&file))?;
                m.outputs.push(format!("masks/{column}/{file}"));
            }
        }
    }
    Ok(())
}

fn sweep(a: &SweepArgs, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    if a.k.is_empty() || a.blocks_list.is_empty() {
        return Err(CliError::Usage("--k and --blocks-list need at least one value".into()));
    }
    let ds = load_dataset(&a.data)?;
    m.inputs.insert("data".into(), a.data.clone());
    let mask_seed = SplitMix64::derive(a.seed, 2);
    m.seeds.insert("masks".into(), mask_seed);
    let protocol = Protocol::try_from(a.protocol)?;
    let model_args = ModelArgs {
        channels: a.channels,
        blocks: 0,
        epochs: a.epochs,
        lr: None,
        batch_size: None,
        chunk: None,
        dropout: None,
        no_augment: false,
        val: false,
    };
    let mut csv = String::from("receptive_field,k,mpjpe_mm\n");
    for &blocks in &a.blocks_list {
        let config = lifter_config(&ds.topology, !a.baseline, a.channels, blocks, None);
        let tag = format!("blocks{blocks}_");
        let log_file = format!("{tag}{TRAIN_LOG_FILE}");
        let (model, _) = train_model(&ds, &config, &model_args, a.seed, &out.join(&log_file), m, &tag)?;
        let ckpt_file = format!("{tag}{CHECKPOINT_FILE}");
        save_checkpoint(&model, out.join(&ckpt_file))?;
        m.outputs.extend([ckpt_file, log_file]);
        let rf = model.receptive_field();
        for &k in &a.k {
            let report = evaluate(&model, &ds.test, protocol, &MaskSpec::RandomK { k }, mask_seed)?;
            if !report.overall_mm.is_finite() {
                return Err(CliError::Invariant(format!("non-finite MPJPE at {blocks} blocks, k = {k}")));
            }
            eprintln!("sweep: receptive field {rf}, k {k}: {:.2} mm", report.overall_mm);
            csv.push_str(&format!("{rf},{k},{:.4}\n", report.overall_mm));
        }
    }
    write_file(&out.join("sweep.csv"), csv)?;
    m.outputs.push("sweep.csv".into());
    Ok(())
}

/// `NAME=PATH`, or a bare path named after its run directory.
fn parse_source(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let dir = if path.is_dir() { Some(path.as_path()) } else { path.parent() };
    let name = dir
        .and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    (name, path)
}

fn quality(a: &QualityArgs, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let test = split(&ds, a.levels.split)?;
    let specs = level_specs(&a.levels)?;
    m.inputs.insert("data".into(), a.data.clone());
    m.seeds.insert("masks".into(), a.levels.seed);
    m.seeds.insert("classifier".into(), a.classifier_seed);

    let mut sources = Vec::new();
    for spec in &a.ckpt {
        let (name, path) = parse_source(spec);
        let path = resolve_checkpoint(&path);
        if name == "ground_truth" || sources.iter().any(|(n, _): &(String, _)| *n == name) {
            return Err(CliError::Usage(format!("pose source name `{name}` is reserved or repeated")));
        }
        m.inputs.insert(format!("checkpoint:{name}"), path.clone());
        sources.push((name, load_checkpoint::<f32>(&path)?));
    }

    let labelled = |seqs: &[PoseSequence], pairs: &[PairedSequence]| -> CliResult<_> {
        let items: Vec<(&PoseSequence, usize)> = seqs.iter().zip(pairs).map(|(s, p)| (s, p.label)).collect();
        Ok(encode_all(&items, a.clip_frames, a.size)?)
    };
    let train_gt: Vec<PoseSequence> = ds.train.iter().map(|p| p.target3d.clone()).collect();
    let test_gt: Vec<PoseSequence> = test.iter().map(|p| p.target3d.clone()).collect();
    let train_samples = labelled(&train_gt, &ds.train)?;
    let clf = train_classifier(&train_samples, a.classifier_seed, a.epochs)?;
    let gt_accuracy = 100.0 * clf.accuracy(&labelled(&test_gt, test)?)?;
    eprintln!("quality: ground truth {gt_accuracy:.1}% ({} training clips)", train_samples.len());

    let columns = std::iter::once("ground_truth".to_string())
        .chain(sources.iter().map(|(n, _)| n.clone()))
        .collect();
    let mut table = ReportTable::new("occlusion", columns);
    for spec in &specs {
        let mut row = vec![gt_accuracy];
        for (name, model) in &sources {
            let predicted = masked_predictions(model, test, spec, a.levels.seed)?;
            let acc = 100.0 * clf.accuracy(&labelled(&predicted, test)?)?;
            eprintln!("quality: {name} {spec}: {acc:.1}%");
            row.push(acc);
        }
        table.push(spec.to_string(), row)?;
    }
    if table.rows.iter().flat_map(|(_, v)| v).any(|v| !(0.0..=100.0).contains(v)) {
        return Err(CliError::Invariant("accuracy outside [0, 100]".into()));
    }
    write_file(&out.join("accuracy.csv"), table.to_csv()?)?;
    let weights: Vec<u8> = clf.parameter_values().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&out.join("classifier.bin"), weights)?;
    m.resolved_insert(
        "classifier",
        &serde_json::json!({
            "image_size": a.size,
            "clip_frames": a.clip_frames,
            "epochs": a.epochs,
            "classes": clf.classes(),
            "parameters": clf.parameter_count(),
        }),
    )?;
    m.outputs.extend(["accuracy.csv", "classifier.bin"].map(String::from));
    Ok(())
}
