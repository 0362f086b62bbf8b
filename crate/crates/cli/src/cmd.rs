use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use countlab::corpus::{self, counting_scenes, pair_corpus, training_corpus, Item, Mixture, SplitSpec};
use countlab::interp::{self, HeadScore, HeadSet, OverwriteCurve, SeqPair, TokenGroup};
use countlab::intervene::{self, FocusConfig, HeadGamma, QuerySet};
use countlab::metrics::{aggregate_seeds, eval_model, range_extrapolation};
use countlab::model::{
    forward, load_checkpoint, save_checkpoint, train, Capture, CheckpointMeta, ModelConfig, OptimizerConfig,
    OverrideSet, Params,
};
use countlab::report::{curves_csv, matrix_csv, read_report, Heatmap, Report};
use countlab::synth::{
    build_records, gen_colorshape_balanced, read_dataset, write_dataset, CanvasSpec, CounterfactualPair,
    RenderedScene, SceneKind, Task, TaskMix,
};
use countlab::vocab::{Lexicons, Vocab};

use crate::config::{config_err, output_root, parse_range, required, RunConfig};
use crate::{Cli, Command, InterpCmd};

struct Ctx {
    run: RunConfig,
    out: PathBuf,
    seed: u64,
    threads: Option<usize>,
}

impl Ctx {
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, section: &str, args: &T) -> anyhow::Result<(T, Value)> {
        self.run.resolve(section, args)
    }

    /// Write `resolved_config.json` for this run and return the output dir.
    fn begin(&self, command: &str, args: &Value) -> anyhow::Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        self.echo(command, args, Value::Null)?;
        Ok(&self.out)
    }

    fn echo(&self, command: &str, args: &Value, resolved: Value) -> anyhow::Result<()> {
        let mut v = json!({
            "command": command,
            "seed": self.seed,
            "threads": self.threads.unwrap_or_else(rayon::current_num_threads),
            "out": self.out,
            "args": args,
            "version": env!("CARGO_PKG_VERSION"),
        });
        if !resolved.is_null() {
            v["resolved"] = resolved;
        }
        write_json(&self.out.join("resolved_config.json"), &v)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let run = RunConfig::load(cli.config.as_deref())?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => run.global::<usize>("threads")?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring the thread pool")?;
    }
    let seed = match cli.seed {
        Some(s) => s,
        None => run.global::<u64>("seed")?.unwrap_or(0),
    };
    let out = output_root(cli.out, &run)?;
    let ctx = Ctx { run, out, seed, threads };
    match cli.cmd {
        Command::Gen(a) => gen(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Interp(c) => match c {
            InterpCmd::Lens(a) => lens(&ctx, a),
            InterpCmd::Headlens(a) => headlens(&ctx, a),
            InterpCmd::VapLayer(a) => vap_layer(&ctx, a),
            InterpCmd::VapHead(a) => vap_head(&ctx, a),
            InterpCmd::Ablate(a) => ablate(&ctx, a),
            InterpCmd::Jaccard(a) => jaccard_cmd(&ctx, a),
            InterpCmd::Probe(a) => probe(&ctx, a),
            InterpCmd::Yesband(a) => yesband(&ctx, a),
        },
        Command::Intervene(a) => intervene_cmd(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_report<T: Serialize>(dir: &Path, kind: &str, args: &Value, records: T) -> anyhow::Result<()> {
    Report::new(kind, args, records)?.write(&dir.join(format!("{kind}.json")))?;
    log::info!("wrote {}", dir.join(format!("{kind}.json")).display());
    Ok(())
}

fn write_text(path: &Path, s: &str) -> anyhow::Result<()> {
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| countlab::Error::Data(format!("{}: {e}", path.display())).into())
}

fn parse_kind(s: &str) -> anyhow::Result<SceneKind> {
    match s {
        "syndot" => Ok(SceneKind::SynDot),
        "synpoly" => Ok(SceneKind::SynPoly),
        "colorshape" => Ok(SceneKind::ColorShape),
        _ => Err(config_err(format!("unknown scene kind {s:?}; use syndot, synpoly or colorshape"))),
    }
}

fn parse_task(s: &str) -> anyhow::Result<fn(&Task) -> bool> {
    Ok(match s {
        "count" => |t| matches!(t, Task::Count),
        "verify" => |t| matches!(t, Task::Verify(_)),
        "color" => |t| matches!(t, Task::Color),
        "shape" => |t| matches!(t, Task::Shape),
        _ => return Err(config_err(format!("unknown task {s:?}; use count, verify, color or shape"))),
    })
}

fn load_model(path: &Path) -> anyhow::Result<Params> {
    let (p, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(p)
}

/// Items of one task from a dataset directory, optionally truncated.
fn load_items(dir: &Path, cfg: &ModelConfig, task: &str, limit: Option<usize>) -> anyhow::Result<Vec<Item>> {
    let keep = parse_task(task)?;
    let ds = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    check_canvas(&ds.scenes, cfg)?;
    let records: Vec<_> = ds.records.into_iter().filter(|r| keep(&r.task)).collect();
    let mut items = corpus::items(&ds.scenes, &records, cfg)?;
    if let Some(n) = limit {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(countlab::Error::Data(format!("{} has no {task} questions", dir.display())).into());
    }
    Ok(items)
}

fn check_canvas(scenes: &[RenderedScene], cfg: &ModelConfig) -> anyhow::Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.canvas.canvas_px != cfg.canvas_px || s.canvas.patch_px != cfg.patch_px) {
        return Err(config_err(format!(
            "scene {} is {}px/{}px but the model expects {}px/{}px",
            s.id, s.canvas.canvas_px, s.canvas.patch_px, cfg.canvas_px, cfg.patch_px
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRef {
    clean: String,
    corrupted: String,
    shared_seed: u64,
}

fn gen(ctx: &Ctx, a: crate::GenArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("gen", &a)?;
    let kind = parse_kind(a.kind.as_deref().unwrap_or("syndot"))?;
    let canvas = CanvasSpec::new(a.canvas.unwrap_or(64), a.patch.unwrap_or(8))?;
    let (lo, hi) = parse_range(a.counts.as_deref().unwrap_or("1-9"))?;
    let per_count = a.per_count.unwrap_or(400);
    let radius = a.radius.unwrap_or(if kind == SceneKind::SynPoly { 3 } else { 2 });
    let dir = ctx.begin("gen", &args)?;

    if let Some(n) = a.pairs {
        if kind == SceneKind::ColorShape {
            return Err(config_err("counterfactual pairs need a counting scene kind"));
        }
        let pairs = pair_corpus(canvas, kind, radius, lo, hi, n, ctx.seed)?;
        let mut scenes: BTreeMap<String, RenderedScene> = BTreeMap::new();
        let mut refs = Vec::with_capacity(pairs.len());
        for p in &pairs {
            refs.push(PairRef { clean: p.clean.id.clone(), corrupted: p.corrupted.id.clone(), shared_seed: p.shared_seed });
            for s in [&p.clean, &p.corrupted] {
                scenes.entry(s.id.clone()).or_insert_with(|| s.clone());
            }
        }
        let scenes: Vec<_> = scenes.into_values().collect();
        let records = build_records(&scenes, TaskMix { count: 1.0, verify: 0.0, verify_max: 0 }, ctx.seed)?;
        write_dataset(dir, &scenes, &records)?;
        write_json(&dir.join("pairs.json"), &refs)?;
        log::info!("{} pairs over {} scenes", refs.len(), scenes.len());
        return Ok(());
    }

    let (scenes, records) = if kind == SceneKind::ColorShape {
        let v = gen_colorshape_balanced(canvas, per_count, ctx.seed)?;
        v.into_iter().unzip()
    } else {
        let split = SplitSpec { kind, min_count: lo, max_count: hi, per_count, radius_px: radius, seed: ctx.seed };
        match a.mix.as_deref().unwrap_or("count-only") {
            "multitask" => training_corpus(canvas, &split, &Mixture::default())?,
            "count-only" => {
                let scenes = counting_scenes(canvas, &split)?;
                let recs = build_records(&scenes, TaskMix { count: 1.0, verify: 0.0, verify_max: 0 }, ctx.seed)?;
                (scenes, recs)
            }
            m => return Err(config_err(format!("unknown mix {m:?}; use count-only or multitask"))),
        }
    };
    let manifest = write_dataset(dir, &scenes, &records)?;
    log::info!("{} records over {} scenes -> {}", records.len(), scenes.len(), manifest.display());
    Ok(())
}

fn preset(name: &str) -> anyhow::Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "micro" => Ok(ModelConfig::micro()),
        _ => Err(config_err(format!("unknown preset {name:?}; use toy or micro"))),
    }
}

fn train_cmd(ctx: &Ctx, a: crate::TrainArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("train", &a)?;
    let data = required(&a.data, "data")?;
    let mut params = match &a.init {
        Some(p) => load_model(p)?,
        None => Params::init(preset(a.preset.as_deref().unwrap_or("toy"))?, ctx.seed)?,
    };
    let d = OptimizerConfig::default();
    let opt = OptimizerConfig {
        lr: a.lr.unwrap_or(d.lr),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        warmup_frac: a.warmup_frac.unwrap_or(d.warmup_frac),
        seed: ctx.seed,
        ..d
    };
    let fd = FocusConfig::default();
    let focus = match &a.focus_layers {
        Some(layers) if !layers.is_empty() => Some(FocusConfig {
            target_layers: layers.clone(),
            sigma: a.sigma.unwrap_or(fd.sigma),
            lambda: a.lambda.unwrap_or(fd.lambda),
            query_set: match a.query_set.as_deref().unwrap_or("after-image") {
                "after-image" => QuerySet::AfterImage,
                "image-tokens" => QuerySet::ImageTokens,
                q => return Err(config_err(format!("unknown query set {q:?}"))),
            },
            ..fd
        }),
        _ => None,
    };
    let ds = read_dataset(&data).with_context(|| format!("reading dataset {}", data.display()))?;
    check_canvas(&ds.scenes, &params.cfg)?;
    let examples = corpus::examples(&ds.scenes, &ds.records, &params.cfg, focus.as_ref().map(|f| f.sigma))?;
    let dir = ctx.begin("train", &args)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let report = match &focus {
        Some(f) => intervene::joint_train(&mut params, &examples, f, &opt, Some(&ckpt_dir))?,
        None => train(&mut params, &examples, &opt, None, Some(&ckpt_dir))?,
    };
    let meta = CheckpointMeta {
        step: report.steps,
        epoch: opt.epochs,
        optimizer: Some(opt.clone()),
        last_loss: report.losses.last().copied(),
        ..CheckpointMeta::bare(params.cfg, ctx.seed)
    };
    save_checkpoint(&dir.join("model.ckpt"), &params, &meta)?;
    write_report(dir, "train", &json!({"optimizer": opt, "focus": focus, "args": args}), &report)?;
    Ok(())
}

fn eval(ctx: &Ctx, a: crate::EvalArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("eval", &a)?;
    let ckpts = a.checkpoint.clone().filter(|c| !c.is_empty()).ok_or_else(|| config_err("--checkpoint is required"))?;
    let dir = ctx.begin("eval", &args)?;
    let mut per = Vec::new();
    let mut reports = Vec::new();
    for (i, path) in ckpts.iter().enumerate() {
        let params = load_model(path)?;
        if let Some(data) = &a.data {
            let items = load_items(data, &params.cfg, "count", None)?;
            let (rep, logs) = eval_model(&params, &items, &OverrideSet::new())?;
            let mut lines = String::new();
            for l in &logs {
                lines.push_str(&serde_json::to_string(l)?);
                lines.push('\n');
            }
            write_text(&dir.join(format!("scene_log_{i}.jsonl")), &lines)?;
            println!("{}: acc {:.4} mae {:.4} rmse {:.4} obo {:.4} (n = {})", path.display(), rep.acc, rep.mae, rep.rmse, rep.obo, rep.n);
            per.push(json!({"checkpoint": path, "metrics": rep}));
            reports.push(rep);
        }
        if let Some(ranges) = a.test_ranges.as_ref().filter(|r| !r.is_empty()) {
            let train_range = parse_range(&required(&a.train_range, "train-range")?)?;
            let tests = ranges.iter().map(|r| parse_range(r)).collect::<anyhow::Result<Vec<_>>>()?;
            let template = SplitSpec {
                kind: SceneKind::SynDot,
                min_count: 0,
                max_count: 0,
                per_count: a.per_count.unwrap_or(50),
                radius_px: 2,
                seed: ctx.seed,
            };
            let canvas = params.cfg.canvas()?;
            let rr = range_extrapolation(&params, canvas, train_range, &tests, &template, &OverrideSet::new())?;
            for r in &rr {
                println!("{}: counts {}-{} (in train: {}) acc {:.4} mae {:.4}", path.display(), r.min_count, r.max_count, r.in_train, r.report.acc, r.report.mae);
            }
            write_report(dir, &format!("range_{i}"), &args, &rr)?;
        }
    }
    if a.data.is_none() && a.test_ranges.as_ref().is_none_or(|r| r.is_empty()) {
        return Err(config_err("eval needs --data or --test-ranges"));
    }
    if !reports.is_empty() {
        let summary = aggregate_seeds(&reports)?;
        write_report(dir, "eval", &args, json!({"per_checkpoint": per, "summary": summary}))?;
    }
    Ok(())
}

fn lens(ctx: &Ctx, a: crate::LensArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("lens", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let items = load_items(&required(&a.data, "data")?, &params.cfg, "count", Some(a.limit.unwrap_or(100)))?;
    let k = a.top_k.unwrap_or(5);
    let dir = ctx.begin("lens", &args)?;
    let capture = Capture { residuals: true, ..Capture::NONE };
    let mut per_item = Vec::with_capacity(items.len());
    let nl = params.cfg.n_layers;
    let (mut rank_sum, mut top1) = (vec![0.0; nl], vec![0usize; nl]);
    for it in &items {
        let out = forward(&params, &it.seq, &OverrideSet::new(), capture)?;
        let trace = &out.trace;
        let layers = interp::logit_lens(trace, &params, it.seq.answer_pos, k, it.seq.answer())?;
        for l in &layers {
            let r = l.target_rank.unwrap_or(usize::MAX);
            rank_sum[l.layer - 1] += r as f64;
            top1[l.layer - 1] += (r == 1) as usize;
        }
        per_item.push(json!({"record": it.record.id, "count": it.scene.count, "layers": layers}));
    }
    let n = items.len() as f64;
    let mut csv = String::from("layer,mean_rank,top1_rate\n");
    for l in 0..nl {
        csv.push_str(&format!("{},{:.6},{:.6}\n", l + 1, rank_sum[l] / n, top1[l] as f64 / n));
    }
    write_text(&dir.join("lens.csv"), &csv)?;
    write_report(dir, "lens", &args, per_item)?;
    Ok(())
}

fn importance_scores(path: &Option<PathBuf>) -> anyhow::Result<Vec<HeadScore>> {
    match path {
        Some(p) => {
            let r = read_report(p)?;
            serde_json::from_value(r.records).map_err(|e| countlab::Error::Data(format!("{}: expected head scores: {e}", p.display())).into())
        }
        None => Ok(Vec::new()),
    }
}

fn headlens(ctx: &Ctx, a: crate::HeadlensArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("headlens", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let items = load_items(&required(&a.data, "data")?, &params.cfg, "count", Some(a.limit.unwrap_or(200)))?;
    let importance = importance_scores(&a.importance)?;
    let lexicons: Lexicons = match &a.lexicons {
        Some(p) => read_json(p)?,
        None => Lexicons::default(),
    };
    let lex = lexicons.resolve(&Vocab)?;
    let decode = match a.decode_position.as_deref().unwrap_or("last-prompt-token") {
        "last-prompt-token" => interp::DecodePosition::LastPromptToken,
        "last-image-token" => interp::DecodePosition::LastImageToken,
        p => return Err(config_err(format!("unknown decode position {p:?}"))),
    };
    let td = interp::TranslatorConfig::default();
    let tcfg = interp::TranslatorConfig { steps: a.translator_steps.unwrap_or(td.steps), lr: a.translator_lr.unwrap_or(td.lr), ..td };
    let dir = ctx.begin("headlens", &args)?;
    let corpus = interp::collect_lens_corpus(&params, &items, tcfg.after_image_only)?;
    let translators = interp::train_translators(&params, &corpus, &tcfg)?;
    write_json(&dir.join("translators.json"), &translators)?;
    let thresholds = interp::CategoryThresholds::default();
    let reports = interp::score_heads(&params, &translators, &items, &importance, &lex, decode, &thresholds)?;
    write_report(dir, "headlens", &json!({"args": args, "thresholds": thresholds, "translator": tcfg}), &reports)?;
    Ok(())
}

fn load_pairs(dir: &Path, cfg: &ModelConfig) -> anyhow::Result<Vec<SeqPair>> {
    let refs: Vec<PairRef> = read_json(&dir.join("pairs.json")).context("pair corpora are written by `gen --pairs`")?;
    let ds = read_dataset(dir)?;
    check_canvas(&ds.scenes, cfg)?;
    let scene = |id: &str| {
        ds.scene(id).cloned().ok_or_else(|| countlab::Error::Data(format!("pairs.json names unknown scene {id}")))
    };
    refs.iter()
        .map(|r| {
            let pair = CounterfactualPair { clean: scene(&r.clean)?, corrupted: scene(&r.corrupted)?, shared_seed: r.shared_seed };
            Ok(SeqPair::counting(&pair, cfg)?)
        })
        .collect()
}

fn vap_layer(ctx: &Ctx, a: crate::VapLayerArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("vap-layer", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let pairs = load_pairs(&required(&a.pairs, "pairs")?, &params.cfg)?;
    let groups: Vec<TokenGroup> = match &a.group {
        Some(g) if !g.is_empty() => g
            .iter()
            .map(|s| serde_json::from_value(Value::String(s.clone())).map_err(|_| config_err(format!("unknown token group {s:?}"))))
            .collect::<anyhow::Result<_>>()?,
        _ => TokenGroup::SIX.to_vec(),
    };
    let dir = ctx.begin("vap-layer", &args)?;
    let curves = interp::vap_layerwise(&params, &pairs, &groups)?;
    write_text(&dir.join("vap_layer.csv"), &curves_csv(&curves))?;
    write_report(dir, "vap_layer", &args, &curves)?;
    Ok(())
}

fn vap_head(ctx: &Ctx, a: crate::VapHeadArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("vap-head", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let pairs = load_pairs(&required(&a.pairs, "pairs")?, &params.cfg)?;
    let dir = ctx.begin("vap-head", &args)?;
    let scores = interp::vap_headwise(&params, &pairs)?;
    let t = a.threshold.unwrap_or(0.05);
    let above: Vec<_> = interp::rank_heads(&scores).into_iter().filter(|s| s.score > t).map(|s| s.id().to_string()).collect();
    log::info!("{} heads above gamma {t}: {}", above.len(), above.join(" "));
    write_report(dir, "vap_head", &args, &scores)?;
    Ok(())
}

fn task_head_set(params: &Params, data: &Path, task: &str, k: usize, corpus_size: usize, cache: &Path) -> anyhow::Result<(Vec<HeadScore>, HeadSet)> {
    let items = load_items(data, &params.cfg, task, Some(corpus_size))?;
    let means = interp::head_means_cached(params, &items, cache)?;
    Ok(interp::mean_ablation_importance(params, &items, &means, task, k)?)
}

fn ablate(ctx: &Ctx, a: crate::AblateArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("ablate", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let data = required(&a.data, "data")?;
    let task = a.task.clone().unwrap_or_else(|| "count".into());
    let dir = ctx.begin("ablate", &args)?;
    let (scores, set) = task_head_set(&params, &data, &task, a.k.unwrap_or(20), a.corpus_size.unwrap_or(200), &dir.join("cache"))?;
    write_json(&dir.join(format!("headset_{task}.json")), &set)?;
    write_report(dir, &format!("ablate_{task}"), &args, &scores)?;
    Ok(())
}

fn jaccard_cmd(ctx: &Ctx, a: crate::JaccardArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("jaccard", &a)?;
    let dir = ctx.begin("jaccard", &args)?;
    let sets: Vec<HeadSet> = match &a.sets {
        Some(files) if !files.is_empty() => files.iter().map(|f| read_json(f)).collect::<anyhow::Result<_>>()?,
        _ => {
            let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
            let data = required(&a.data, "data")?;
            let tasks = a.tasks.clone().filter(|t| !t.is_empty()).unwrap_or_else(|| vec!["count".into(), "color".into(), "shape".into()]);
            let (k, n) = (a.k.unwrap_or(20), a.corpus_size.unwrap_or(200));
            tasks
                .iter()
                .map(|t| task_head_set(&params, &data, t, k, n, &dir.join("cache")).map(|r| r.1))
                .collect::<anyhow::Result<_>>()?
        }
    };
    if sets.len() < 2 {
        return Err(config_err("jaccard needs at least two head sets"));
    }
    let labels: Vec<String> = sets.iter().map(|s| s.task.clone()).collect();
    let m: Vec<Vec<f64>> = sets.iter().map(|x| sets.iter().map(|y| interp::jaccard(x, y)).collect()).collect();
    write_text(&dir.join("jaccard.csv"), &matrix_csv(&labels, &m))?;
    write_report(dir, "jaccard", &args, json!({"labels": labels, "matrix": m, "sets": sets}))?;
    Ok(())
}

fn probe(ctx: &Ctx, a: crate::ProbeArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("probe", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let items = load_items(&required(&a.data, "data")?, &params.cfg, "count", None)?;
    let nl = params.cfg.n_layers;
    let layers = a.layers.clone().filter(|l| !l.is_empty());
    let dir = ctx.begin("probe", &args)?;
    match a.kind.as_deref().unwrap_or("binding") {
        "binding" => {
            let d = interp::BindingConfig::default();
            let cfg = interp::BindingConfig { rank: a.rank.unwrap_or(d.rank), steps: a.steps.unwrap_or(d.steps), seed: ctx.seed, ..d };
            let layers = layers.unwrap_or_else(|| (0..=nl).collect());
            let res = interp::binding_probe(&params, &items, &layers, &cfg)?;
            for r in &res {
                println!("layer {}: auc {:.4} shuffled {:.4}", r.layer, r.auc, r.shuffled_auc);
            }
            write_report(dir, "probe_binding", &json!({"args": args, "probe": cfg}), &res)?;
        }
        "numerosity" => {
            let d = interp::NumerosityConfig::default();
            let cfg = interp::NumerosityConfig { steps: a.steps.unwrap_or(d.steps), seed: ctx.seed, ..d };
            let layers = layers.unwrap_or_else(|| (0..=nl).collect());
            let res = interp::numerosity_probe(&params, &items, &layers, &cfg)?;
            for r in &res {
                println!("layer {}: train {:.4} test {:.4}", r.layer, r.train_acc, r.test_acc);
            }
            write_report(dir, "probe_numerosity", &json!({"args": args, "probe": cfg}), &res)?;
        }
        "attentionlens" => {
            let d = interp::AttentionLensConfig::default();
            let cfg = interp::AttentionLensConfig { steps: a.steps.unwrap_or(d.steps), ..d };
            let layers = layers.unwrap_or_else(|| (0..nl).collect());
            let heads = a.heads.clone().filter(|h| !h.is_empty()).unwrap_or_else(|| (0..params.cfg.n_heads).collect());
            let lex = Lexicons::default().resolve(&Vocab)?;
            let res = layers
                .iter()
                .map(|&l| interp::attentionlens_probes(&params, &items, l, &heads, &lex, &cfg))
                .collect::<countlab::Result<Vec<_>>>()?;
            write_report(dir, "probe_attentionlens", &json!({"args": args, "probe": cfg}), &res)?;
        }
        k => return Err(config_err(format!("unknown probe kind {k:?}; use binding, numerosity or attentionlens"))),
    }
    Ok(())
}

fn yesband(ctx: &Ctx, a: crate::YesbandArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("yesband", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let items = load_items(&required(&a.data, "data")?, &params.cfg, "count", Some(a.limit.unwrap_or(100)))?;
    let (lo, hi) = (a.k_min.unwrap_or(0), a.k_max.unwrap_or(9));
    if lo > hi {
        return Err(config_err("--k-min exceeds --k-max"));
    }
    let dir = ctx.begin("yesband", &args)?;
    let bands = items.iter().map(|it| interp::yes_band(&params, &it.scene, lo..=hi)).collect::<countlab::Result<Vec<_>>>()?;
    let n = bands.len() as f64;
    let summary = json!({
        "mean_width": bands.iter().map(|b| b.width as f64).sum::<f64>() / n,
        "mean_oscillations": bands.iter().map(|b| b.oscillations as f64).sum::<f64>() / n,
        "band_contains_truth": bands.iter().filter(|b| b.band.is_some()).count() as f64 / n,
    });
    println!("{summary}");
    write_report(dir, "yesband", &args, json!({"summary": summary, "scenes": bands}))?;
    Ok(())
}

fn intervene_cmd(ctx: &Ctx, a: crate::InterveneArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("intervene", &a)?;
    let params = load_model(&required(&a.checkpoint, "checkpoint")?)?;
    let items = load_items(&required(&a.data, "data")?, &params.cfg, "count", None)?;
    let scores = importance_scores(&Some(required(&a.importance, "importance")?))?;
    let t = a.threshold.unwrap_or(0.05);
    let heads: Vec<HeadGamma> = interp::rank_heads(&scores)
        .into_iter()
        .filter(|s| s.score > t)
        .map(|s| HeadGamma { layer: s.layer, head: s.head, gamma: s.score })
        .collect();
    if heads.is_empty() {
        log::warn!("no head scores above {t}; every run equals the baseline");
    }
    let normalize = !a.raw_gamma.unwrap_or(false);
    let alphas = a.alpha.clone().filter(|v| !v.is_empty()).unwrap_or_else(|| vec![1.0, 1.1, 1.2, 1.3]);
    fs::create_dir_all(&ctx.out)?;
    let dir = ctx.out.as_path();

    let (base, _) = eval_model(&params, &items, &OverrideSet::new())?;
    let mut rows = vec![json!({"alpha": null, "metrics": base})];
    let mut resolved = Vec::new();
    for &alpha in &alphas {
        let tc = intervene::TemperatureConfig { alpha, head_gammas: heads.clone(), normalize_gamma: normalize };
        let (mut ov, betas) = intervene::apply_temperature(&tc)?;
        let mut scales = None;
        if let Some(eta) = a.eta {
            let rc = intervene::ReweightConfig { heads: heads.clone(), eta, normalize_gamma: normalize };
            let (rov, s) = intervene::apply_reweight(&rc)?;
            ov = ov.merge(rov)?;
            scales = Some(s);
        }
        let (rep, _) = eval_model(&params, &items, &ov)?;
        println!("alpha {alpha}: acc {:.4} mae {:.4} (baseline acc {:.4})", rep.acc, rep.mae, base.acc);
        resolved.push(json!({"alpha": alpha, "beta": betas, "head_scale": scales}));
        rows.push(json!({"alpha": alpha, "beta": betas, "head_scale": scales, "metrics": rep}));
    }
    ctx.echo("intervene", &args, Value::Array(resolved))?;
    write_report(dir, "intervene", &args, rows)?;
    Ok(())
}

fn heads_metric(records: &Value, metric: &str) -> anyhow::Result<Vec<HeadScore>> {
    if metric == "importance" {
        if let Ok(s) = serde_json::from_value::<Vec<HeadScore>>(records.clone()) {
            return Ok(s);
        }
    }
    let reports: Vec<interp::HeadReport> = serde_json::from_value(records.clone())
        .map_err(|e| countlab::Error::Data(format!("report holds neither head scores nor head reports: {e}")))?;
    let f: fn(&interp::HeadReport) -> f64 = match metric {
        "importance" => |r| r.importance,
        "img-attn" => |r| r.img_attn_ratio,
        "obj-in-img" => |r| r.obj_in_img_ratio,
        "cter" => |r| r.cter,
        "vgs" => |r| r.vgs,
        "top1" => |r| r.top1_acc,
        "gt-at-10" => |r| r.gt_at_10,
        m => return Err(config_err(format!("unknown heatmap metric {m:?}"))),
    };
    Ok(reports.iter().map(|r| HeadScore { layer: r.layer, head: r.head, score: f(r) }).collect())
}

fn report(ctx: &Ctx, a: crate::ReportArgs) -> anyhow::Result<()> {
    let (a, args) = ctx.resolve("report", &a)?;
    let input = required(&a.input, "input")?;
    let rep = read_report(&input)?;
    if a.heatmap.is_none() && !a.curve.unwrap_or(false) {
        return Err(config_err("report needs --heatmap METRIC or --curve"));
    }
    let dir = ctx.begin("report", &args)?;
    if let Some(metric) = &a.heatmap {
        let scores = heads_metric(&rep.records, metric)?;
        if scores.is_empty() {
            return Err(countlab::Error::Data("no heads in the report".into()).into());
        }
        let nl = scores.iter().map(|s| s.layer).max().unwrap_or(0) + 1;
        let nh = scores.iter().map(|s| s.head).max().unwrap_or(0) + 1;
        let (pgm, scale) = Heatmap::from_heads(&scores, nl, nh).write(dir, &format!("heatmap_{metric}"), a.cell_px.unwrap_or(16))?;
        log::info!("wrote {} and {}", pgm.display(), scale.display());
    }
    if a.curve.unwrap_or(false) {
        let curves: Vec<OverwriteCurve> = serde_json::from_value(rep.records.clone())
            .map_err(|e| countlab::Error::Data(format!("{}: expected overwrite curves: {e}", input.display())))?;
        write_text(&dir.join("curve.csv"), &curves_csv(&curves))?;
    }
    Ok(())
}
