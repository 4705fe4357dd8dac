use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use ascan_core::analysis::{count_macs, nominal_resolution, CostReport};
use ascan_core::bench::{compare, render_compare, run_bench, BenchConfig, BenchReport, BenchTarget, ClassifierTarget, UNetTarget};
use ascan_core::check::{self, CheckRow};
use ascan_core::checkpoint::{sha256_hex, Checkpoint};
use ascan_core::classifier::{train_epochs, Classifier, Dataset, TrainRecipe};
use ascan_core::config::{
    build_preset, canonical_toml, has_errors, load_spec, parse_layout, render_layout, spec_from_toml, spec_hash,
    validate, ArchKind, ArchSpec, Severity,
};
use ascan_core::diffusion::{
    curriculum_config, make_schedule, sample_ddpm, sample_heun, train_diffusion, write_png, write_raw, ClassTokens,
    Conditioning, CurriculumStage, DiffTrainConfig, GuidanceSchedule, PatternLatents, ScheduleKind, UNet,
};
use ascan_core::{DType, Error};
use serde_json::json;

use crate::manifest::{OutDir, RunManifest};
use crate::{
    BenchArgs, CheckArgs, Cli, Command, GuidanceArg, Precision, RecipeKind, SampleArgs, SamplerArg, SpecArgs,
    SummarizeArgs, TrainClsArgs, TrainDiffArgs, OUT_ENV,
};

pub const USAGE: u8 = 2;
pub const FAILURE: u8 = 1;

/// Latent side per pixel side of the (notional) autoencoder.
pub const VAE_FACTOR: usize = 8;
pub const SCHEDULE_STEPS: usize = 1000;
const TOKEN_SEED_SALT: u64 = 0x70c3;
const DATA_SEED_SALT: u64 = 0xda7a;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { code: USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } | Error::Config(_) => USAGE,
            _ => FAILURE,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: FAILURE, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { code: FAILURE, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult<u8> {
    match &cli.command {
        Command::Summarize(a) => summarize(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::TrainCls(a) => train_cls(cli, a),
        Command::TrainDiff(a) => train_diff(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Check(a) => run_check(cli, a),
    }
}

/// `--out`, else `$ASCAN_OUT_DIR/<command>`, else `runs/<command>` when the
/// command always writes files.
fn out_dir(cli: &Cli, command: &str, always: bool) -> CliResult<Option<OutDir>> {
    let dir = match (&cli.out, std::env::var_os(OUT_ENV)) {
        (Some(d), _) => Some(d.clone()),
        (None, Some(root)) => Some(PathBuf::from(root).join(command)),
        (None, None) if always => Some(PathBuf::from("runs").join(command)),
        _ => None,
    };
    Ok(match dir {
        Some(d) => Some(OutDir::create(d)?),
        None => None,
    })
}

pub fn resolve_spec(args: &SpecArgs, default_preset: Option<&str>) -> CliResult<ArchSpec> {
    let layout = args.layout.as_deref().map(parse_layout).transpose()?;
    let mut spec = match (&args.config, &args.preset, &layout) {
        (Some(path), _, _) => load_spec(path)?,
        (None, Some(name), _) => build_preset(name)?,
        (None, None, Some(l)) => {
            let mut s = build_preset("c1")?;
            s.name = render_layout(l);
            s
        }
        (None, None, None) => match default_preset {
            Some(name) => build_preset(name)?,
            None => return Err(CliError::usage("one of --preset, --config or --layout is required")),
        },
    };
    if let Some(l) = &layout {
        let name = spec.name.clone();
        spec = spec.with_layout(l)?;
        spec.name = name;
    }
    let diags = validate(&spec);
    for d in &diags {
        if d.severity == Severity::Warning {
            eprintln!("warning: {}", d.message);
        }
    }
    if has_errors(&diags) {
        let msgs: Vec<String> = diags.iter().filter(|d| d.severity == Severity::Error).map(|d| d.message.clone()).collect();
        return Err(CliError::usage(format!("invalid architecture: {}", msgs.join("; "))));
    }
    Ok(spec)
}

pub fn parse_resolution(text: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("bad resolution `{text}`; expected N or HxW"));
    let parts: Vec<&str> = text.split(['x', 'X']).collect();
    let nums: Vec<usize> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
    match nums[..] {
        [n] if n > 0 => Ok((n, n)),
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(bad()),
    }
}

fn resolution_for(spec: &ArchSpec, arg: &Option<String>) -> CliResult<(usize, usize)> {
    match arg {
        Some(r) => parse_resolution(r),
        None => {
            let n = nominal_resolution(spec);
            Ok((n, n))
        }
    }
}

fn spec_config(spec: &ArchSpec) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(spec)?)
}

fn render_per_layer(r: &CostReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<48} {:>10} {:>12} {:>16}", "layer", "kind", "params", "MACs");
    for l in &r.per_layer {
        let _ = writeln!(s, "{:<48} {:>10} {:>12} {:>16}", l.path, format!("{:?}", l.kind).to_lowercase(), l.params, l.macs);
    }
    s
}

fn summarize(cli: &Cli, a: &SummarizeArgs) -> CliResult<u8> {
    let spec = resolve_spec(&a.spec, None)?;
    let res = resolution_for(&spec, &a.resolution)?;
    let report = count_macs(&spec, res)?;
    let text = if a.json {
        serde_json::to_string_pretty(&report)? + "\n"
    } else {
        let mut t = format!("layout {}\n", render_layout(&spec.layout()));
        t.push_str(&report.render());
        if a.per_layer {
            t.push_str(&render_per_layer(&report));
        }
        t
    };
    print!("{text}");
    if let Some(mut out) = out_dir(cli, "summarize", false)? {
        out.write(if a.json { "summary.json" } else { "summary.txt" }, text.as_bytes())?;
        let mut m = RunManifest::new("summarize", json!({ "spec": spec_config(&spec)?, "resolution": res }), None);
        m.spec_hash = Some(spec_hash(&spec)?);
        out.finish(m)?;
    }
    Ok(0)
}

fn run_check(cli: &Cli, a: &CheckArgs) -> CliResult<u8> {
    let all = !(a.grad || a.counts || a.schedule || a.rope);
    let mut rows: Vec<CheckRow> = Vec::new();
    if all || a.grad {
        rows.extend(check::grad_suite()?);
    }
    if all || a.counts {
        rows.extend(check::count_suite()?);
    }
    if all || a.schedule {
        rows.extend(check::schedule_suite()?);
    }
    if all || a.rope {
        rows.extend(check::rope_suite()?);
    }
    let text = if a.json { serde_json::to_string_pretty(&rows)? + "\n" } else { check::render(&rows) };
    print!("{text}");
    if let Some(mut out) = out_dir(cli, "check", false)? {
        out.write("check.json", serde_json::to_string_pretty(&rows)?.as_bytes())?;
        let cfg = json!({ "grad": all || a.grad, "counts": all || a.counts, "schedule": all || a.schedule, "rope": all || a.rope });
        out.finish(RunManifest::new("check", cfg, None))?;
    }
    Ok(if check::all_passed(&rows) { 0 } else { FAILURE })
}

fn bench(cli: &Cli, a: &BenchArgs) -> CliResult<u8> {
    let cfg_base = BenchConfig {
        batch_sizes: a.batches.clone(),
        warmup: a.warmup,
        iters: a.iters,
        repeats: a.repeats,
        resolution: (0, 0),
        precision: a.precision.name().into(),
    };
    cfg_base.validate()?;
    let mut out = out_dir(cli, "bench", true)?.expect("bench always writes");
    let mut reports: Vec<BenchReport> = Vec::new();
    let mut costs: Vec<CostReport> = Vec::new();
    let mut text = String::new();
    let mut hashes = Vec::new();
    for name in &a.preset {
        let spec = build_preset(name)?;
        let res = resolution_for(&spec, &a.resolution)?;
        let cost = count_macs(&spec, res)?;
        let dtype = a.precision.dtype();
        let mut target: Box<dyn BenchTarget> = match spec.kind {
            ArchKind::Classifier => Box::new(ClassifierTarget::new(Classifier::new(&spec, a.seed, dtype)?, res, a.seed)),
            ArchKind::Unet => Box::new(UNetTarget::new(UNet::new(&spec, a.seed, dtype)?, res, a.seed)),
        };
        let hash = spec_hash(&spec)?;
        let cfg = BenchConfig { resolution: res, ..cfg_base.clone() };
        let report = run_bench(target.as_mut(), &cfg, Some(hash.clone()))?;
        text.push_str(&report.render_table(Some(cost.total_params), Some(cost.total_macs)));
        reports.push(report);
        costs.push(cost);
        hashes.push(hash);
    }
    if reports.len() > 1 {
        let batch = *a.batches.last().expect("validated nonempty");
        match compare(&reports, &costs, batch) {
            Ok(rows) => {
                let _ = write!(text, "\ncomparison at B={batch}\n{}", render_compare(&rows));
                out.write("compare.json", serde_json::to_string_pretty(&rows)?.as_bytes())?;
            }
            Err(e) => eprintln!("warning: no comparison: {e}"),
        }
    }
    print!("{text}");
    out.write("bench.txt", text.as_bytes())?;
    out.write("bench.json", serde_json::to_string_pretty(&reports)?.as_bytes())?;
    let mut m = RunManifest::new("bench", json!({ "presets": a.preset, "bench": cfg_base }), Some(a.seed));
    m.spec_hash = Some(hashes.join(","));
    out.finish(m)?;
    Ok(0)
}

fn checkpoint_manifest(spec: &ArchSpec, precision: Precision, extra: serde_json::Value) -> CliResult<serde_json::Value> {
    let mut m = json!({
        "kind": spec.kind,
        "spec": canonical_toml(spec)?,
        "spec_hash": spec_hash(spec)?,
        "precision": precision.name(),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    Ok(m)
}

fn train_cls(cli: &Cli, a: &TrainClsArgs) -> CliResult<u8> {
    let spec = resolve_spec(&a.spec, Some("toy-cls"))?;
    if spec.kind != ArchKind::Classifier {
        return Err(CliError::usage(format!("`{}` is not a classifier", spec.name)));
    }
    let head = spec.classifier_head()?;
    let data = match &a.dataset {
        Some(dir) => Dataset::load_dir(dir).map_err(|e| match e {
            Error::Io(io) => CliError::usage(format!("cannot read dataset {}: {io}", dir.display())),
            other => other.into(),
        })?,
        None => Dataset::two_blobs(a.samples, [spec.input_channels, head.image_size, head.image_size], 1.0, a.seed ^ DATA_SEED_SALT),
    };
    if data.sample_shape[0] != spec.input_channels {
        return Err(CliError::usage(format!(
            "dataset has {} channels, model expects {}",
            data.sample_shape[0], spec.input_channels
        )));
    }
    let mut recipe = match a.recipe {
        RecipeKind::Toy => TrainRecipe::toy(),
        RecipeKind::Full => TrainRecipe::default(),
    };
    if let Some(e) = a.epochs {
        recipe.epochs = e;
        recipe.warmup_epochs = recipe.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(b) = a.batch_size {
        recipe.batch_size = b;
    }
    let model = Classifier::with_classes(&spec, data.num_classes, a.seed, a.precision.dtype())?;
    let mut out = out_dir(cli, "train-cls", true)?.expect("train-cls always writes");
    let mut history = None;
    if recipe.epochs > 0 {
        let metrics_path = out.path("metrics.jsonl");
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        let h = train_epochs(&model, &data, &recipe, a.seed, Some(&mut w))?;
        drop(w);
        out.track(&metrics_path);
        out.write("history.json", serde_json::to_string_pretty(&h)?.as_bytes())?;
        if let Some(last) = h.epochs.last() {
            println!(
                "epoch {}: train loss {:.4}, eval loss {:.4}, acc {:.2}%, ema acc {:.2}%",
                last.epoch + 1,
                last.train_loss,
                last.eval_loss,
                100.0 * last.eval_acc,
                100.0 * last.ema_acc
            );
        }
        history = Some(h);
    }
    let extra = json!({ "num_classes": data.num_classes, "epochs_trained": history.as_ref().map_or(0, |h| h.epochs.len()) });
    let ck = Checkpoint::from_store(model.store(), checkpoint_manifest(&spec, a.precision, extra)?)?;
    let ck_path = out.path("checkpoint.ckpt");
    let ck_hash = ck.save(&ck_path)?;
    out.track(&ck_path);
    println!("checkpoint {} ({} params)", ck_path.display(), model.num_params());
    let cfg = json!({ "spec": spec_config(&spec)?, "recipe": recipe, "dataset": a.dataset, "samples": data.len(), "precision": a.precision.name() });
    let mut m = RunManifest::new("train-cls", cfg, Some(a.seed));
    m.spec_hash = Some(spec_hash(&spec)?);
    m.checkpoint_hash = Some(ck_hash);
    out.finish(m)?;
    Ok(0)
}

fn train_diff(cli: &Cli, a: &TrainDiffArgs) -> CliResult<u8> {
    let spec = resolve_spec(&a.spec, Some("toy-unet-img"))?;
    let head = spec.unet_head().map_err(|_| CliError::usage(format!("`{}` is not a UNet", spec.name)))?;
    let stage: CurriculumStage = a.stage.parse()?;
    let mut recipe = curriculum_config(stage).scaled(a.toy_scale)?;
    if let Some(i) = a.iterations {
        recipe.iterations = Some(i as u64);
    }
    if let Some(b) = a.batch_size {
        recipe.batch_size = Some(b as u64);
    }
    let cfg = DiffTrainConfig::from_stage(&recipe, a.seed)?;
    let side = (recipe.resolution / VAE_FACTOR).max(1);
    let f = spec.downsample_factor();
    if side % f != 0 {
        return Err(CliError::usage(format!("latent side {side} is not divisible by the UNet's downsampling factor {f}")));
    }
    if a.classes == 0 {
        return Err(CliError::usage("--classes must be positive"));
    }
    let dtype = a.precision.dtype();
    let kind = ScheduleKind::Linear;
    let schedule = make_schedule(SCHEDULE_STEPS, kind, kind.default_beta_start(), recipe.beta_end)?;
    let token_seed = a.seed ^ TOKEN_SEED_SALT;
    let tokens = ClassTokens::new(a.classes, head.context_dim, token_seed)?;
    let latent = [spec.input_channels, side, side];
    let data = PatternLatents::new(a.classes, latent, 0.1, a.seed ^ DATA_SEED_SALT);
    let model = UNet::new(&spec, a.seed, dtype)?;
    let mut out = out_dir(cli, "train-diff", true)?.expect("train-diff always writes");
    let metrics_path = out.path("metrics.jsonl");
    let mut w = BufWriter::new(File::create(&metrics_path)?);
    let steps = train_diffusion(&model, &schedule, &cfg, data.source(&tokens, dtype), Some(&mut w))?;
    drop(w);
    out.track(&metrics_path);
    let window = (steps.len() / 4).clamp(1, 50);
    let mean = |s: &[ascan_core::diffusion::DiffStep]| s.iter().map(|r| r.loss).sum::<f64>() / s.len().max(1) as f64;
    println!(
        "{} steps at batch {}: loss {:.4} (first {window}) -> {:.4} (last {window})",
        steps.len(),
        cfg.batch_size,
        mean(&steps[..window.min(steps.len())]),
        mean(&steps[steps.len().saturating_sub(window)..])
    );
    let extra = json!({
        "schedule": { "steps": SCHEDULE_STEPS, "kind": "linear", "beta_start": kind.default_beta_start(), "beta_end": recipe.beta_end },
        "tokens": { "num_classes": a.classes, "dim": head.context_dim, "seed": token_seed },
        "latent": latent,
        "stage": recipe,
    });
    let ck = Checkpoint::from_store(model.store(), checkpoint_manifest(&spec, a.precision, extra)?)?;
    let ck_path = out.path("checkpoint.ckpt");
    let ck_hash = ck.save(&ck_path)?;
    out.track(&ck_path);
    println!("checkpoint {}", ck_path.display());
    let run_cfg = json!({ "spec": spec_config(&spec)?, "stage": recipe, "train": cfg, "classes": a.classes, "latent": latent });
    let mut m = RunManifest::new("train-diff", run_cfg, Some(a.seed));
    m.spec_hash = Some(spec_hash(&spec)?);
    m.checkpoint_hash = Some(ck_hash);
    out.finish(m)?;
    Ok(0)
}

fn field<'a>(m: &'a serde_json::Value, path: &[&str]) -> CliResult<&'a serde_json::Value> {
    let mut v = m;
    for k in path {
        v = v.get(k).ok_or_else(|| CliError::usage(format!("checkpoint manifest lacks `{}`", path.join("."))))?;
    }
    Ok(v)
}

fn as_u64(v: &serde_json::Value, what: &str) -> CliResult<u64> {
    v.as_u64().ok_or_else(|| CliError::usage(format!("checkpoint manifest field `{what}` is not an integer")))
}

fn as_f64(v: &serde_json::Value, what: &str) -> CliResult<f64> {
    v.as_f64().ok_or_else(|| CliError::usage(format!("checkpoint manifest field `{what}` is not a number")))
}

fn sample(cli: &Cli, a: &SampleArgs) -> CliResult<u8> {
    let bytes = std::fs::read(&a.checkpoint)
        .map_err(|e| CliError::usage(format!("cannot read checkpoint {}: {e}", a.checkpoint.display())))?;
    let ck = Checkpoint::read_from(&mut bytes.as_slice())?;
    let m = &ck.manifest;
    if field(m, &["kind"])?.as_str() != Some("unet") {
        return Err(CliError::usage("checkpoint does not hold a diffusion UNet"));
    }
    let spec = spec_from_toml(field(m, &["spec"])?.as_str().unwrap_or_default())?;
    if field(m, &["spec_hash"])?.as_str() != Some(spec_hash(&spec)?.as_str()) {
        return Err(CliError { code: FAILURE, message: "checkpoint spec hash does not match its spec".into() });
    }
    let dtype = match field(m, &["precision"])?.as_str() {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    let guidance = match (a.guidance, a.scale) {
        (GuidanceArg::Sampled, Some(_)) => return Err(CliError::usage("--scale applies only to --guidance constant")),
        (GuidanceArg::Sampled, None) => GuidanceSchedule::sampled_default(),
        (GuidanceArg::Constant, s) => GuidanceSchedule::constant(s.unwrap_or(1.0)),
    };
    guidance.validate(a.steps)?;
    let classes = as_u64(field(m, &["tokens", "num_classes"])?, "tokens.num_classes")? as usize;
    let dim = as_u64(field(m, &["tokens", "dim"])?, "tokens.dim")? as usize;
    let token_seed = as_u64(field(m, &["tokens", "seed"])?, "tokens.seed")?;
    let labels: Vec<usize> = match (&a.labels, a.n) {
        (Some(l), Some(n)) if l.len() != n => {
            return Err(CliError::usage(format!("--n {n} conflicts with {} --labels", l.len())));
        }
        (Some(l), _) => l.clone(),
        (None, n) => (0..n.unwrap_or(4)).map(|i| i % classes).collect(),
    };
    if labels.is_empty() {
        return Err(CliError::usage("nothing to sample"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CliError::usage(format!("label {bad} out of range for {classes} classes")));
    }
    let latent: Vec<usize> = field(m, &["latent"])?
        .as_array()
        .map(|v| v.iter().filter_map(|x| x.as_u64().map(|x| x as usize)).collect())
        .unwrap_or_default();
    if latent.len() != 3 {
        return Err(CliError::usage("checkpoint manifest has a malformed `latent` shape"));
    }
    let sched_kind: ScheduleKind = field(m, &["schedule", "kind"])?.as_str().unwrap_or("linear").parse()?;
    let schedule = make_schedule(
        as_u64(field(m, &["schedule", "steps"])?, "schedule.steps")? as usize,
        sched_kind,
        as_f64(field(m, &["schedule", "beta_start"])?, "schedule.beta_start")?,
        as_f64(field(m, &["schedule", "beta_end"])?, "schedule.beta_end")?,
    )?;

    let model = UNet::new(&spec, 0, dtype)?;
    ck.apply(model.store())?;
    let tokens = ClassTokens::new(classes, dim, token_seed)?;
    let cond = Conditioning::Context(tokens.context(&labels, dtype)?);
    let shape = [labels.len(), latent[0], latent[1], latent[2]];
    let x = match a.sampler {
        SamplerArg::Ddpm => sample_ddpm(&model, &schedule, &guidance, a.steps, &shape, &cond, a.seed, dtype)?,
        SamplerArg::Heun => sample_heun(&model, &schedule, &guidance, a.steps, &shape, &cond, a.seed, dtype)?,
    };

    let mut out = out_dir(cli, "sample", true)?.expect("sample always writes");
    let raw = out.path("samples.raw");
    write_raw(&raw, &x)?;
    out.track(&raw);
    out.track(&out.path("samples.raw.json"));
    let per = latent.iter().product::<usize>();
    for (i, chunk) in x.data().chunks(per).enumerate() {
        let one = ascan_core::Tensor::from_vec(chunk.to_vec(), &latent, dtype)?;
        let p = out.path(&format!("sample_{i:03}.png"));
        write_png(&p, &one, -2.0, 2.0)?;
        out.track(&p);
    }
    println!("{} samples of shape {:?}, labels {:?}", labels.len(), latent, labels);
    let cfg = json!({
        "checkpoint": a.checkpoint,
        "steps": a.steps,
        "guidance": guidance,
        "sampler": format!("{:?}", a.sampler).to_lowercase(),
        "labels": labels,
    });
    let mut rm = RunManifest::new("sample", cfg, Some(a.seed));
    rm.spec_hash = Some(spec_hash(&spec)?);
    rm.checkpoint_hash = Some(sha256_hex(&bytes));
    out.finish(rm)?;
    Ok(0)
}
