use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use tfcl::augment::{make_views, Pipeline};
use tfcl::config::ExperimentConfig;
use tfcl::contrastive::{pretrain, Stream};
use tfcl::dataio::{make_splits, window, write_csv, Fold, SignalWindow, SplitAudit, SplitPlan, Windowed, WINDOW_LEN};
use tfcl::downstream::{finetune, fuse_scores_weighted, load_encoder, HarModel};
use tfcl::eval::{export_embeddings, pretrain_shared, run_scheme, transfer_protocol, Metrics, SharedEncoders};
use tfcl::nn::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use tfcl::rng::RngStream;
use tfcl::wavelet::{write_scalogram_binary, write_scalogram_png, ScalogramMaker};
use tfcl::{Error, Result};

use crate::{Command, Common};

struct Ctx {
    exp: ExperimentConfig,
    /// Directory of the config file; corpus paths resolve against it.
    base: PathBuf,
    out: PathBuf,
}

impl Ctx {
    fn open(c: &Common) -> Result<Self> {
        let exp = ExperimentConfig::load(&c.config, &c.overrides)?;
        let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = c.out.clone().unwrap_or_else(|| exp.output_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { exp, base, out })
    }

    fn data(&self) -> Result<Windowed> {
        let rs = self.exp.data.source().load(&self.base)?;
        window(&rs, WINDOW_LEN, self.exp.data.stride)
    }

    fn plan(&self, data: &Windowed) -> Result<SplitPlan> {
        make_splits(
            &data.windows,
            self.exp.scheme,
            self.exp.seed,
            self.exp.data.val_fraction,
            self.exp.data.test_fraction,
        )
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Synth(c) | Command::Ingest(c) | Command::Transfer(c) => c,
        Command::Cwt { common, .. }
        | Command::AugmentPreview { common, .. }
        | Command::Pretrain { common, .. }
        | Command::Finetune { common, .. }
        | Command::Evaluate { common, .. }
        | Command::ExportEmbeddings { common, .. } => common,
    }
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Ingest(_) => "ingest",
        Command::Cwt { .. } => "cwt",
        Command::AugmentPreview { .. } => "augment-preview",
        Command::Pretrain { .. } => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Evaluate { .. } => "evaluate",
        Command::Transfer(_) => "transfer",
        Command::ExportEmbeddings { .. } => "export-embeddings",
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_provenance(ctx: &Ctx, command: &str, jobs: usize, wall_s: f64, status: &str) -> Result<()> {
    let record = json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "config": ctx.exp.to_toml(),
        "config_hash": ctx.exp.hash(),
        "seed": ctx.exp.seed,
        "code_version": env!("CARGO_PKG_VERSION"),
        "jobs": jobs,
        "timings": { "wall_s": wall_s },
        "status": status,
    });
    write_json(&ctx.path("provenance.json"), &record)
}

pub fn run(cmd: &Command, jobs: usize) -> Result<()> {
    let ctx = Ctx::open(common(cmd))?;
    let start = Instant::now();
    let result = dispatch(cmd, &ctx);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    write_provenance(&ctx, name(cmd), jobs, start.elapsed().as_secs_f64(), &status)?;
    result
}

fn dispatch(cmd: &Command, ctx: &Ctx) -> Result<()> {
    match cmd {
        Command::Synth(_) => synth(ctx),
        Command::Ingest(_) => ingest(ctx),
        Command::Cwt { index, .. } => cwt(ctx, *index),
        Command::AugmentPreview { index, .. } => augment_preview(ctx, *index),
        Command::Pretrain {
            stream,
            fold,
            all_subjects,
            ..
        } => pretrain_cmd(ctx, &stream.streams(), *fold, *all_subjects),
        Command::Finetune {
            stream,
            fold,
            pretrained,
            ..
        } => finetune_cmd(ctx, &stream.streams(), *fold, pretrained.as_deref()),
        Command::Evaluate { pretrained, .. } => evaluate(ctx, pretrained.as_deref()),
        Command::Transfer(_) => transfer(ctx),
        Command::ExportEmbeddings { checkpoint, .. } => export(ctx, checkpoint),
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let spec = ctx
        .exp
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("synth needs a [data.synth] section".into()))?;
    let rs = spec.generate()?;
    let path = ctx.path("corpus.csv");
    write_csv(&rs, &path)?;
    println!("wrote {} recordings to {}", rs.recordings().len(), path.display());
    Ok(())
}

fn ingest(ctx: &Ctx) -> Result<()> {
    let data = ctx.data()?;
    let summary = json!({
        "windows": data.windows.len(),
        "labels": data.label_map.labels(),
        "skipped_recordings": data.skipped_recordings,
        "windows_per_subject": tfcl::dataio::windows_per_subject(&data.windows),
    });
    write_json(&ctx.path("ingest.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn pick(data: &Windowed, index: usize) -> Result<&SignalWindow> {
    data.windows
        .get(index)
        .ok_or_else(|| Error::Config(format!("window index {index} out of range ({} windows)", data.windows.len())))
}

fn cwt(ctx: &Ctx, index: usize) -> Result<()> {
    let data = ctx.data()?;
    let s = ScalogramMaker::new(&ctx.exp.scale_grid()?)?.make(pick(&data, index)?)?;
    write_scalogram_png(&s, &ctx.path(&format!("scalogram-{index}.png")))?;
    write_scalogram_binary(std::slice::from_ref(&s), &ctx.path(&format!("scalogram-{index}.bin")))?;
    Ok(())
}

fn write_window_csv(w: &SignalWindow, path: &Path) -> Result<()> {
    let mut text = String::from("x,y,z\n");
    for r in w.values.chunks(3) {
        text.push_str(&format!("{},{},{}\n", r[0], r[1], r[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn augment_preview(ctx: &Ctx, index: usize) -> Result<()> {
    let data = ctx.data()?;
    let w = pick(&data, index)?;
    let rng = RngStream::new(ctx.exp.seed, 0xA0).child(index as u64);
    let cfg = ctx.exp.pretrain_config(Stream::Signal, ctx.exp.seed)?;
    let (a, b) = make_views(w, &cfg.temporal, &rng)?;
    write_window_csv(&a, &ctx.path(&format!("view-{index}-signal-a.csv")))?;
    write_window_csv(&b, &ctx.path(&format!("view-{index}-signal-b.csv")))?;
    let s = ScalogramMaker::new(&ctx.exp.scale_grid()?)?.make(w)?;
    let tf: &Pipeline<_> = &cfg.timefreq;
    let (a, b) = make_views(&s, tf, &rng)?;
    write_scalogram_png(&a, &ctx.path(&format!("view-{index}-scalogram-a.png")))?;
    write_scalogram_png(&b, &ctx.path(&format!("view-{index}-scalogram-b.png")))?;
    Ok(())
}

fn fold_of(plan: &SplitPlan, k: usize) -> Result<&Fold> {
    plan.folds
        .get(k)
        .ok_or_else(|| Error::Config(format!("fold {k} out of range ({} folds)", plan.folds.len())))
}

fn pretrain_cmd(ctx: &Ctx, streams: &[Stream], k: usize, all_subjects: bool) -> Result<()> {
    let data = ctx.data()?;
    let (windows, allowed): (Vec<&SignalWindow>, Vec<String>) = if all_subjects {
        let subjects = data.windows.iter().map(|w| w.subject.clone()).collect();
        (data.windows.iter().collect(), subjects)
    } else {
        let plan = ctx.plan(&data)?;
        let fold = fold_of(&plan, k)?;
        (Fold::select(&fold.train, &data.windows), fold.train.clone())
    };
    let audit = SplitAudit::new("pretraining", allowed);
    for &stream in streams {
        let mut cfg = ctx.exp.pretrain_config(stream, ctx.exp.seed)?;
        cfg.metrics_log = Some(ctx.path(&format!("pretrain-{stream}-metrics.jsonl")));
        let ck = pretrain(&cfg, &windows, Some(&audit))?;
        let dir = ctx.path(&format!("pretrain-{stream}"));
        save_checkpoint(&ck, &dir)?;
        let last = ck.manifest.epochs.last().map_or(f64::NAN, |e| e.loss);
        println!("{stream}: {} epochs, final loss {last:.5}, saved to {}", ck.manifest.epochs.len(), dir.display());
    }
    Ok(())
}

fn load_pretrained(dir: &Path, stream: Stream) -> Result<ModelCheckpoint> {
    load_checkpoint(&dir.join(format!("pretrain-{stream}")))
}

fn finetune_cmd(ctx: &Ctx, streams: &[Stream], k: usize, pretrained: Option<&Path>) -> Result<()> {
    let data = ctx.data()?;
    let plan = ctx.plan(&data)?;
    let fold = fold_of(&plan, k)?;
    let train = Fold::select(&fold.train, &data.windows);
    let val = Fold::select(&fold.val, &data.windows);
    let test = Fold::select(&fold.test, &data.windows);
    let audit = SplitAudit::new("fine-tuning", fold.train.iter().chain(&fold.val).cloned());
    let labels: Vec<usize> = test
        .iter()
        .map(|w| w.label.ok_or_else(|| Error::LabelsMissing(format!("subject `{}`", w.subject))))
        .collect::<Result<_>>()?;
    let source = pretrained.unwrap_or(&ctx.out);
    let mut scores = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    for &stream in streams {
        let ck = load_pretrained(source, stream)?;
        let cfg = ctx.exp.finetune_config(stream, ctx.exp.seed);
        let (model, report) = finetune(&ck, &train, &val, &data.label_map, &cfg, Some(&audit))?;
        let mut out = model.to_checkpoint(ctx.exp.seed);
        out.manifest.epochs = report.epochs;
        out.manifest.hyperparameters = cfg.hyperparameters();
        save_checkpoint(&out, &ctx.path(&format!("har-{stream}")))?;
        let s = model.predict_batch(&test)?;
        metrics.insert(stream.to_string(), Metrics::from_scores(&s, &labels, data.label_map.len())?);
        scores.insert(stream.to_string(), s);
    }
    if let (Some(a), Some(b)) = (scores.get("signal"), scores.get("scalogram")) {
        let fused = a
            .iter()
            .zip(b)
            .map(|(p, q)| fuse_scores_weighted(p, q, ctx.exp.fusion_weight))
            .collect::<Result<Vec<_>>>()?;
        metrics.insert("fused".into(), Metrics::from_scores(&fused, &labels, data.label_map.len())?);
    }
    for (name, m) in &metrics {
        println!("{name}: weighted F1 {:.4}, accuracy {:.4}", m.weighted_f1, m.accuracy);
    }
    write_json(&ctx.path("finetune.json"), &json!({ "fold": k, "metrics": metrics }))
}

fn write_report(dir: &Path, report: &tfcl::eval::MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    let table = report.table();
    let path = dir.join("report.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

fn shared_from(dir: &Path, exp: &ExperimentConfig) -> Result<SharedEncoders> {
    let mut shared = SharedEncoders::default();
    for &stream in exp.fusion.streams() {
        let ck = load_pretrained(dir, stream)?;
        match stream {
            Stream::Signal => shared.signal = Some(ck),
            Stream::Scalogram => shared.scalogram = Some(ck),
        }
    }
    Ok(shared)
}

fn evaluate(ctx: &Ctx, pretrained: Option<&Path>) -> Result<()> {
    let data = ctx.data()?;
    let runs = ctx.exp.expand_sweep()?;
    let many = runs.len() > 1;
    for (i, (label, exp)) in runs.iter().enumerate() {
        if many {
            println!("== run {i}: {label}");
        }
        let plan = make_splits(&data.windows, exp.scheme, exp.seed, exp.data.val_fraction, exp.data.test_fraction)?;
        let shared = match pretrained {
            Some(dir) => Some(shared_from(dir, exp)?),
            None if exp.pretrain.shared => {
                let all: Vec<&SignalWindow> = data.windows.iter().collect();
                Some(pretrain_shared(exp, &all, exp.seed)?)
            }
            None => None,
        };
        let report = run_scheme(&plan, &data, exp, shared.as_ref())?;
        let dir = if many { ctx.path(&format!("run-{i:02}")) } else { ctx.out.clone() };
        if many {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_json(&dir.join("sweep.json"), &json!({ "label": label, "config": exp.to_toml() }))?;
        }
        write_report(&dir, &report)?;
    }
    Ok(())
}

fn transfer(ctx: &Ctx) -> Result<()> {
    let t = ctx
        .exp
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("transfer needs a [transfer.pretrain] section".into()))?;
    let source = window(&t.pretrain.load(&ctx.base)?, WINDOW_LEN, ctx.exp.data.stride)?;
    let target = ctx.data()?;
    let plan = ctx.plan(&target)?;
    let report = transfer_protocol(&source.windows, &target, &plan, &ctx.exp)?;
    write_report(&ctx.out, &report)
}

fn export(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = ctx.data()?;
    let windows: Vec<&SignalWindow> = data.windows.iter().collect();
    let (encoder, featurizer) = if ck.manifest.architecture.starts_with("har:") {
        let m = HarModel::from_checkpoint(&ck)?;
        (m.net.encoder.clone(), m.featurizer().clone())
    } else {
        let encoder = load_encoder(&ck)?;
        let grid = match &ck.manifest.scale_grid {
            Some(g) => g.clone(),
            None => ctx.exp.scale_grid()?,
        };
        let featurizer = tfcl::contrastive::Featurizer::new(encoder.stream(), &grid)?;
        (encoder, featurizer)
    };
    let path = ctx.path(&format!("embeddings-{}.csv", encoder.stream()));
    export_embeddings(&encoder, &featurizer, &windows, &data.label_map, &path)?;
    println!("wrote {} rows to {}", windows.len(), path.display());
    Ok(())
}
