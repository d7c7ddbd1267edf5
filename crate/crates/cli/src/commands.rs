use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use log::info;
use rand::seq::SliceRandom;
use serde_json::json;

use dabn::data::ingest::ingest_csv;
use dabn::data::preprocess::{preprocess, PipelineParams, Truncate};
use dabn::data::synth::{synth_generate, SynthSpec};
use dabn::data::{dataset_hash, load_dataset, save_dataset, Dataset, SubjectId};
use dabn::eval::suite::{suite_drift_spec, suite_spec};
use dabn::eval::{lopocv, momentum_sweep, summarize, write_run, ExperimentKind, ExperimentSpec, FoldCache, RunResults};
use dabn::model::{encode_checkpoint, load_checkpoint, train, ArchConfig, TrainHyper};
use dabn::online::{init_adapter, DiagnosticsSink};
use dabn::seed::SeedStream;

use crate::config::{self, overlay, overlay_with, FileConfig, Order, Resolved, StreamParams};
use crate::{
    Command, EvalArgs, Global, ModelArgs, Preset, PreprocessArgs, SpecArgs, StreamArgs, SweepArgs, SynthArgs, TrainArgs,
    Usage,
};

const DEFAULT_OUT: &str = "dabn-out";
const DATASET_FILE: &str = "dataset.dabnds";
const CHECKPOINT_FILE: &str = "model.ckpt";
const DEFAULT_MOMENTA: [f64; 6] = [0.0009, 0.001, 0.005, 0.01, 0.05, 0.1];

struct Ctx {
    seed: u64,
    seed_given: bool,
    threads: Option<usize>,
    out: PathBuf,
    file: FileConfig,
}

impl Ctx {
    fn resolved(&self, command: &str) -> Resolved {
        Resolved::new(command, self.seed, self.threads, &self.out)
    }
}

fn context(g: &Global) -> anyhow::Result<Ctx> {
    let file = config::load(g.config.as_deref())?;
    let seed_given = g.seed.or(file.seed);
    let threads = g.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Usage("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = g.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Ctx {
        seed: seed_given.unwrap_or(0),
        seed_given: seed_given.is_some(),
        threads,
        out,
        file,
    })
}

pub fn run(g: &Global, cmd: &Command) -> anyhow::Result<()> {
    let ctx = context(g)?;
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Stream(a) => cmd_stream(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
    }
}

fn parse_truncate(s: &str) -> anyhow::Result<Truncate> {
    Ok(match s {
        "balanced" => Truncate::Balanced,
        "none" => Truncate::None,
        n => Truncate::Fixed(
            n.parse()
                .map_err(|_| Usage(format!("--truncate expects balanced, none or a count, got {n:?}")))?,
        ),
    })
}

fn cmd_preprocess(ctx: &Ctx, a: &PreprocessArgs) -> anyhow::Result<()> {
    let mut p = overlay(PipelineParams::default(), ctx.file.pipeline.as_ref(), "pipeline")?;
    if let Some(v) = a.window_len {
        p.window_len = v;
    }
    if let Some(v) = a.stride {
        p.stride = v;
    }
    if let Some(v) = a.filter_width {
        p.filter_width = v;
    }
    if let Some(v) = a.lo {
        p.lo = v;
    }
    if let Some(v) = a.hi {
        p.hi = v;
    }
    if let Some(t) = &a.truncate {
        p.truncate = parse_truncate(t)?;
    }

    let ingest = ingest_csv(&a.input)?;
    for m in ingest.malformed.iter().take(20) {
        eprintln!("warning: line {}: {}", m.line, m.reason);
    }
    if ingest.malformed.len() > 20 {
        eprintln!("warning: {} more malformed rows", ingest.malformed.len() - 20);
    }
    let (ds, report) = preprocess(&ingest.groups, &p)?;
    for ((subject, activity), reason) in &report.dropped {
        eprintln!("warning: dropped recording ({subject}, {activity}): {reason}");
    }
    let path = ctx.out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    let hash = dataset_hash(&ds);
    let manifest = json!({
        "dataset": DATASET_FILE,
        "dataset_hash": hash,
        "total_windows": ds.total_windows(),
        "window_counts": ds.window_counts(),
        "label_map": ds.label_map,
        "valid_rows": ingest.valid_rows,
        "malformed_rows": ingest.malformed.iter().map(|m| json!({"line": m.line, "reason": m.reason})).collect::<Vec<_>>(),
        "dropped": report.dropped.iter().map(|((s, a), r)| json!({"subject": s, "activity": a, "reason": r})).collect::<Vec<_>>(),
        "duplicate_timestamps": report.duplicate_timestamps,
        "truncated_len": report.truncated_len,
    });
    write_text(&ctx.out.join("preprocess.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut r = ctx.resolved("preprocess").input("raw", &a.input);
    r.pipeline = Some(p);
    r.write()?;
    println!("users {}", ds.users.len());
    println!("dataset {} sha256 {hash}", path.display());
    println!("windows {}", ds.total_windows());
    Ok(())
}

fn model_config(ctx: &Ctx, m: &ModelArgs, ds: &Dataset) -> anyhow::Result<(ArchConfig, TrainHyper)> {
    let mut table = ctx.file.arch.clone();
    let file_preset = match table.as_mut().and_then(|t| t.remove("preset")) {
        None => None,
        Some(toml::Value::String(s)) if s == "standard" => Some(Preset::Standard),
        Some(toml::Value::String(s)) if s == "tiny" => Some(Preset::Tiny),
        Some(v) => return Err(Usage(format!("[arch] preset must be \"standard\" or \"tiny\", got {v}")).into()),
    };
    let classes = ds.num_classes();
    let base = match m.arch.or(file_preset).unwrap_or(Preset::Standard) {
        Preset::Standard => ArchConfig::standard(classes),
        Preset::Tiny => ArchConfig::tiny(classes),
    };
    let mut arch = overlay(base, table.as_ref(), "arch")?;
    if let Some(v) = m.conv_layers {
        arch.conv_layers = v;
    }
    if let Some(v) = m.feature_maps {
        arch.feature_maps = v;
    }
    if let Some(v) = m.kernel {
        arch.kernel = v;
    }
    if let Some(v) = m.dense_width {
        arch.dense_width = v;
    }
    if let Some(v) = m.dropout {
        arch.dropout_rate = v;
    }
    // Shape parameters come from the data.
    arch.classes = classes;
    arch.window_len = ds.window_len;
    arch.in_channels = dabn::data::Window::CHANNELS;
    arch.validate()?;

    let mut hyper = overlay(TrainHyper::default(), ctx.file.hyper.as_ref(), "hyper")?;
    if let Some(v) = m.lr {
        hyper.learning_rate = v;
    }
    if let Some(v) = m.decay {
        hyper.decay = v;
    }
    if let Some(v) = m.epochs {
        hyper.epochs = v;
    }
    if let Some(v) = m.batch_size {
        hyper.batch_size = v;
    }
    hyper.seed = ctx.seed;
    hyper.validate()?;
    Ok((arch, hyper))
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data)?;
    let (arch, hyper) = model_config(ctx, &a.model, &ds)?;
    for &h in &a.holdout {
        if !ds.users.contains_key(&SubjectId(h)) {
            return Err(dabn::Error::Data(format!("held-out user {h} is not in the dataset")).into());
        }
    }
    let keep: Vec<SubjectId> = ds.user_ids().into_iter().filter(|u| !a.holdout.contains(&u.0)).collect();
    let training = ds.subset(&keep);
    info!("training on {} users, {} windows", training.users.len(), training.total_windows());
    let (model, report) = train(&training, &arch, &hyper)?;

    let bytes = encode_checkpoint(&model);
    let path = ctx.out.join(CHECKPOINT_FILE);
    std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "{e},{l}").unwrap();
    }
    write_text(&ctx.out.join("train-loss.csv"), log)?;
    let mut r = ctx.resolved("train").input("data", &a.data);
    r.arch = Some(arch);
    r.hyper = Some(hyper);
    r.write()?;
    if let Some(l) = report.epoch_losses.last() {
        println!("final loss {l}");
    }
    println!("checkpoint {} sha256 {}", path.display(), sha256_hex(&bytes));
    Ok(())
}

fn cmd_stream(ctx: &Ctx, a: &StreamArgs) -> anyhow::Result<()> {
    let mut p = overlay_with(StreamParams::default(), ctx.file.stream.as_ref(), "stream", &["target"])?;
    if a.target.is_some() {
        p.target = a.target;
    }
    if let Some(m) = a.momentum {
        p.momentum = m;
    }
    if let Some(o) = a.order {
        p.order = o;
    }
    if let Some(s) = a.adaptation {
        p.adaptation = s.on();
    }
    p.diagnostics |= a.diagnostics;

    let model = Arc::new(load_checkpoint(&a.checkpoint)?);
    let ds = load_dataset(&a.data)?;
    let target = match p.target {
        Some(t) => SubjectId(t),
        None if ds.users.len() == 1 => ds.user_ids()[0],
        None => return Err(Usage("--target is required when the dataset holds several users".into()).into()),
    };
    p.target = Some(target.0);
    if model.label_map != ds.label_map {
        return Err(dabn::Error::Data(format!(
            "checkpoint labels {:?} differ from dataset labels {:?}",
            model.label_map, ds.label_map
        ))
        .into());
    }
    let windows = ds.windows(target)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    if p.order == Order::Shuffled {
        order.shuffle(&mut SeedStream::new(ctx.seed).rng("stream-order"));
    }
    let mut adapter = init_adapter(model, p.momentum, p.adaptation)?;

    let stream_path = ctx.out.join("stream.csv");
    let mut csv = BufWriter::new(create(&stream_path)?);
    writeln!(csv, "tau,index,true_label,predicted")?;
    let mut diag = if p.diagnostics {
        Some(DiagnosticsSink::new(BufWriter::new(create(&ctx.out.join("diagnostics.csv"))?), ds.num_classes())?)
    } else {
        None
    };
    let mut correct = 0usize;
    for (tau, &i) in order.iter().enumerate() {
        let w = &windows[i];
        let r = adapter.adapt_and_classify(&w.data)?;
        correct += (r.predicted == w.label) as usize;
        writeln!(csv, "{tau},{},{},{}", w.index, w.label, r.predicted)?;
        if let Some(d) = diag.as_mut() {
            d.write(&r, Some(w.label))?;
        }
    }
    csv.flush()?;
    if let Some(d) = diag {
        d.finish()?.flush()?;
    }
    let mut r = ctx.resolved("stream").input("checkpoint", &a.checkpoint).input("data", &a.data);
    r.stream = Some(p);
    r.write()?;
    println!("windows {}", windows.len());
    println!("accuracy {:.6}", correct as f64 / windows.len() as f64);
    Ok(())
}

fn experiment_spec(ctx: &Ctx, kind: Option<ExperimentKind>, momentum: Option<f64>, s: &SpecArgs) -> anyhow::Result<ExperimentSpec> {
    let file_kind = match ctx.file.spec.as_ref().and_then(|t| t.get("kind")) {
        None => None,
        Some(toml::Value::String(k)) => Some(k.parse::<ExperimentKind>()?),
        Some(v) => return Err(Usage(format!("[spec] kind must be a string, got {v}")).into()),
    };
    let kind = kind
        .or(file_kind)
        .ok_or_else(|| Usage("--kind is required (or `kind` in [spec])".into()))?;
    let mut spec = overlay_with(
        ExperimentSpec::new(kind),
        ctx.file.spec.as_ref(),
        "spec",
        &["momentum", "pre_fraction"],
    )?;
    spec.kind = kind;
    if momentum.is_some() {
        spec.momentum = momentum;
    }
    if let Some(v) = s.repeats {
        spec.repeats = v;
    }
    if s.pre_fraction.is_some() {
        spec.pre_fraction = s.pre_fraction;
    }
    if let Some(v) = s.fine_tune_epochs {
        spec.fine_tune_epochs = v;
    }
    if let Some(v) = s.patience {
        spec.patience = v;
    }
    if let Some(v) = s.adaptation {
        spec.adaptation_enabled = v.on();
    }
    spec.keep_records |= s.keep_records;
    spec.seed = ctx.seed;
    spec.validate()?;
    Ok(spec)
}

fn baseline_spec(spec: &ExperimentSpec) -> ExperimentSpec {
    ExperimentSpec {
        kind: ExperimentKind::LowerBaseline,
        momentum: None,
        pre_fraction: None,
        keep_records: false,
        ..spec.clone()
    }
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<()> {
    let spec = experiment_spec(ctx, a.kind, a.momentum, &a.spec)?;
    let ds = load_dataset(&a.data)?;
    let (arch, hyper) = model_config(ctx, &a.model, &ds)?;
    let h = dataset_hash(&ds);
    let cache = FoldCache::new();
    let run = RunResults::new(&spec, &h, &arch, &hyper, lopocv(&ds, &arch, &hyper, &spec, &cache)?);
    let baseline = if spec.kind == ExperimentKind::LowerBaseline {
        run.clone()
    } else {
        let b = baseline_spec(&spec);
        RunResults::new(&b, &h, &arch, &hyper, lopocv(&ds, &arch, &hyper, &b, &cache)?)
    };
    let summary = summarize(&run, &baseline)?;
    let runs = ctx.out.join("runs");
    if baseline.run_id != run.run_id {
        write_run(&runs, &baseline, &arch, &hyper, &h, None)?;
    }
    let dir = write_run(&runs, &run, &arch, &hyper, &h, Some(&summary))?;
    let mut r = ctx.resolved("eval").input("data", &a.data);
    r.arch = Some(arch);
    r.hyper = Some(hyper);
    r.spec = Some(spec);
    r.write()?;
    println!("run {} ({} folds)", run.run_id, run.folds.len());
    println!("directory {}", dir.display());
    println!(
        "median {:.4} mean {:.4} (baseline median {:.4} mean {:.4})",
        summary.median, summary.mean, summary.baseline_median, summary.baseline_mean
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data)?;
    let (arch, hyper) = model_config(ctx, &a.model, &ds)?;
    let momenta: Vec<f64> = if !a.momenta.is_empty() {
        a.momenta.clone()
    } else if let Some(m) = ctx.file.sweep.as_ref().and_then(|s| s.momenta.clone()) {
        m
    } else {
        DEFAULT_MOMENTA.to_vec()
    };
    let kind = a.kind.or(Some(ExperimentKind::OnlineRandomized));
    let base = experiment_spec(ctx, kind, Some(momenta[0]), &a.spec)?;
    let h = dataset_hash(&ds);
    let cache = FoldCache::new();
    let entries = momentum_sweep(&ds, &arch, &hyper, &base, &momenta, &cache)?;

    let runs = ctx.out.join("runs");
    let mut table = String::from("momentum,run_id,median,mean,baseline_median,baseline_mean\n");
    for e in &entries {
        write_run(&runs, &e.run, &arch, &hyper, &h, Some(&e.summary))?;
        let s = &e.summary;
        writeln!(
            table,
            "{},{},{},{},{},{}",
            e.momentum, e.run.run_id, s.median, s.mean, s.baseline_median, s.baseline_mean
        )
        .unwrap();
    }
    write_text(&ctx.out.join("sweep.csv"), table)?;
    let mut r = ctx.resolved("sweep").input("data", &a.data);
    r.momenta = Some(momenta);
    r.arch = Some(arch);
    r.hyper = Some(hyper);
    r.spec = Some(ExperimentSpec { momentum: None, ..base });
    r.write()?;
    for e in &entries {
        println!(
            "momentum {} median {:.4} (baseline {:.4})",
            e.momentum, e.summary.median, e.summary.baseline_median
        );
    }
    let best = entries
        .iter()
        .max_by(|x, y| x.summary.median.total_cmp(&y.summary.median))
        .expect("non-empty sweep");
    println!("best momentum {} median {:.4}", best.momentum, best.summary.median);
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut s = SynthSpec::from_toml(&text)?;
            if ctx.seed_given {
                s.seed = ctx.seed;
            }
            s
        }
        None if a.drift => suite_drift_spec(ctx.seed),
        None => suite_spec(ctx.seed),
    };
    spec.validate()
        .map_err(|e| dabn::Error::Data(format!("degenerate synthetic spec: {e}")))?;
    let ds = synth_generate(&spec)?;
    let path = ctx.out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    write_text(&ctx.out.join("synth-spec.toml"), spec.to_toml())?;
    let mut r = ctx.resolved("synth");
    if let Some(p) = &a.spec {
        r = r.input("spec", p);
    }
    r.synth = Some(spec);
    r.write()?;
    println!("users {}", ds.users.len());
    println!("dataset {} sha256 {}", path.display(), dataset_hash(&ds));
    println!("windows {}", ds.total_windows());
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<std::fs::File> {
    std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: String) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
