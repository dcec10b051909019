use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use usk::checkpoint::load_checkpoint;
use usk::lod::{validate_thresholds, LevelSchedule, LodModel};
use usk::partition::{
    divide, divide_expanded_bbox, high_visibility_counts, read_plan, rebalance, visibility_histogram, write_plan,
    Origin, PartitionPlan, RebalanceConfig,
};
use usk::sfm::{load_colmap_model, write_colmap_binary, write_colmap_text, ModelFormat, SfmModel};
use usk::splat::{save_png, Camera, ProjectOptions, RenderOptions};
use usk::trainer::{
    evaluate, load_dataset, make_synthetic, occluder_city, render_model, train_lod, write_synthetic, DatasetInfo,
    DatasetOptions, EvalOptions, LogRecord, Metrics, Protocol, SynthConfig, TrainConfig, View, DATASET_INFO,
};

use crate::{Command, EvalArgs, Failure, InspectArgs, PartitionArgs, ProtocolArg, RenderArgs, Split, SynthArgs, TrainArgs, ViewArgs};

type Result<T> = std::result::Result<T, Failure>;

pub const RUN_MANIFEST: &str = "run.json";
pub const PLAN_FILE: &str = "plan.jsonl";
pub const BASELINE_FILE: &str = "baseline.jsonl";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const TRAIN_CONFIG: &str = "config.toml";

pub fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Partition(_) => "partition",
        Command::Train(_) => "train",
        Command::Render(_) => "render",
        Command::Eval(_) => "eval",
        Command::Inspect(_) => "inspect",
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Partition(a) => partition(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Settings and tool version of one run. Paths are left out so identical
/// runs into different directories produce identical files.
#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: C,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: C) -> Result<()> {
    let m = RunManifest {
        tool: "usk",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
    };
    std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::User(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::User(format!("{}: {}", path.display(), e.message())))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::User(format!("cannot create {}: {e}", dir.display())))
}

fn sparse_dir(data: &Path) -> PathBuf {
    data.join("sparse/0")
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.city {
        if a.dump_config {
            println!("# the city fixture has no settings");
            return Ok(());
        }
        let model = occluder_city();
        for sub in ["sparse/0", "sparse/text"] {
            create_dir(&a.out.join(sub))?;
        }
        write_colmap_binary(&model, &sparse_dir(&a.out))?;
        write_colmap_text(&model, &a.out.join("sparse/text"))?;
        write_manifest(&a.out, "synth", serde_json::json!({ "fixture": "city" }))?;
        println!(
            "wrote city fixture: {} cameras, {} points",
            model.images.len(),
            model.points.len()
        );
        return Ok(());
    }
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.gaussians {
        cfg.gaussians = v;
    }
    if let Some(v) = a.cameras {
        cfg.cameras = v;
    }
    if let Some(v) = a.variants {
        cfg.variants = v;
    }
    if a.dump_config {
        print!("{}", to_toml(&cfg)?);
        return Ok(());
    }
    let scene = make_synthetic(&cfg)?;
    create_dir(&a.out)?;
    write_synthetic(&scene, &a.out)?;
    write_manifest(&a.out, "synth", cfg)?;
    println!(
        "wrote {} images ({} held out), {} ground-truth Gaussians, {} points",
        scene.views.len(),
        scene.test_ids.len(),
        scene.gt.len(),
        scene.model.points.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct PartitionSettings {
    target_size: f64,
    threshold: f64,
    rebalance: bool,
    baseline_expansion: f64,
}

fn partition(a: PartitionArgs) -> Result<()> {
    let model = load_colmap_model(&sparse_dir(&a.data), ModelFormat::Auto)?;
    let mut plan = divide(&model, a.target_size, a.threshold)?;
    if a.rebalance {
        plan = rebalance(&model, &plan, RebalanceConfig::from_median(&plan))?;
        if !plan.balanced {
            log::warn!("rebalancing stopped before every partition was within bounds");
        }
    }
    let baseline = divide_expanded_bbox(&model, a.target_size, a.baseline_expansion)?;
    create_dir(&a.out)?;
    write_plan(&plan, &model, &a.out.join(PLAN_FILE))?;
    write_plan(&baseline, &model, &a.out.join(BASELINE_FILE))?;
    write_manifest(
        &a.out,
        "partition",
        PartitionSettings {
            target_size: a.target_size,
            threshold: a.threshold,
            rebalance: a.rebalance,
            baseline_expansion: a.baseline_expansion,
        },
    )?;
    print!("{}", plan_report(&plan, &baseline, a.baseline_expansion, 10));
    Ok(())
}

fn plan_report(plan: &PartitionPlan, baseline: &PartitionPlan, expansion: f64, bins: usize) -> String {
    let mut s = String::new();
    let high = high_visibility_counts(plan);
    let _ = writeln!(s, "partitions: {}{}", plan.partitions.len(), if plan.balanced { "" } else { " (unbalanced)" });
    let _ = writeln!(s, "{:>4}  {:>26}  {:>8}  {:>10}  {:>15}", "id", "bbox", "location", "visibility", "high-visibility");
    for (p, (_, h)) in plan.partitions.iter().zip(&high) {
        let by = |o: Origin| p.assignments.iter().filter(|x| x.origin == o).count();
        let bbox = format!(
            "[{:.2},{:.2}]x[{:.2},{:.2}]",
            p.bbox.min[0], p.bbox.max[0], p.bbox.min[1], p.bbox.max[1]
        );
        let _ = writeln!(
            s,
            "{:>4}  {:>26}  {:>8}  {:>10}  {:>15}",
            p.id,
            bbox,
            by(Origin::Location),
            by(Origin::Visibility),
            h
        );
    }
    let pairs = plan.pair_count();
    let base = baseline.pair_count();
    let _ = writeln!(s, "camera-partition pairs: {pairs}");
    let _ = writeln!(s, "baseline pairs ({:.0}% expanded bbox): {base}", 100.0 * expansion);
    if pairs > 0 {
        let _ = writeln!(s, "pair reduction vs baseline: {:.3}x", base as f64 / pairs as f64);
    }
    let empty: Vec<String> = high.iter().filter(|(_, n)| *n == 0).map(|(id, _)| id.to_string()).collect();
    if empty.is_empty() {
        let _ = writeln!(s, "every partition has a high-visibility camera");
    } else {
        let _ = writeln!(s, "partitions without high-visibility cameras: {}", empty.join(","));
    }
    let hist = visibility_histogram(plan, bins);
    let _ = writeln!(s, "visibility histogram:");
    for (b, n) in hist.iter().enumerate() {
        let lo = b as f64 / bins as f64;
        let _ = writeln!(s, "  [{:.2}, {:.2}{} {n}", lo, lo + 1.0 / bins as f64, if b + 1 == bins { "]" } else { ")" });
    }
    s
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(n) = a.levels {
        if n == 0 {
            return Err(Failure::User("--levels must be at least 1".into()));
        }
        let top = a
            .budget
            .unwrap_or_else(|| cfg.schedule.levels.last().map_or(164, |l| l.budget));
        let per_scale = cfg.schedule.images_per_scale;
        cfg.schedule = LevelSchedule::geometric(n, top);
        cfg.schedule.images_per_scale = per_scale;
    }
    if a.no_appearance {
        cfg.appearance = false;
    }
    if a.no_depth {
        cfg.depth = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    if a.dump_config {
        print!("{}", to_toml(&cfg)?);
        return Ok(());
    }
    let depth_dir = match &a.depth_dir {
        Some(d) => Some(d.clone()),
        None => Some(a.data.join("depths")).filter(|d| cfg.depth && d.is_dir()),
    };
    let ds = load_dataset(
        &a.data,
        &DatasetOptions {
            depth_dir,
            mask_dir: a.mask_dir.clone(),
        },
    )?;
    let plan = a.plan.as_deref().map(read_plan).transpose()?;
    let started = Instant::now();
    let (model, outputs) = train_lod(&ds, plan.as_ref(), &cfg, None)?;
    log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());
    create_dir(&a.out)?;
    model.save(&a.out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(a.out.join(TRAIN_LOG))?);
    for rec in outputs.iter().flat_map(|o| &o.log) {
        serde_json::to_writer(&mut log, rec)?;
        writeln!(log)?;
    }
    log.flush()?;
    std::fs::write(a.out.join(TRAIN_CONFIG), to_toml(&cfg)?)?;
    write_manifest(&a.out, "train", &cfg)?;
    print!("{}", model_report(&model, &outputs.iter().flat_map(|o| o.log.clone()).collect::<Vec<_>>()));
    Ok(())
}

/// Per-level counts against budgets, with the peak count during training
/// when the log is available.
fn model_report(model: &LodModel, log: &[LogRecord]) -> String {
    let mut s = String::new();
    let schedule = &model.manifest.schedule;
    let _ = writeln!(s, "{:>9}  {:>5}  {:>6}  {:>6}  {:>6}  ok", "partition", "level", "count", "peak", "budget");
    let mut ok = true;
    for p in &model.manifest.partitions {
        for (l, count) in p.counts.iter().enumerate() {
            let budget = schedule.levels[l].budget;
            let peak = log.iter().find_map(|r| match r {
                LogRecord::Level {
                    partition,
                    level,
                    max_count,
                    ..
                } if *partition == p.id && *level == l + 1 => Some(*max_count),
                _ => None,
            });
            let within = *count <= budget && peak.is_none_or(|m| m <= budget);
            ok &= within;
            let _ = writeln!(
                s,
                "{:>9}  {:>5}  {:>6}  {:>6}  {:>6}  {}",
                p.id,
                l + 1,
                count,
                peak.map_or("-".to_string(), |m| m.to_string()),
                budget,
                if within { "yes" } else { "NO" }
            );
        }
    }
    let _ = writeln!(s, "budget compliance: {}", if ok { "ok" } else { "VIOLATED" });
    s
}

/// Named cameras of the requested split, from the reconstruction alone.
fn split_cameras(data: &Path, split: Split) -> Result<(SfmModel, Vec<(u32, String, Camera)>)> {
    let model = load_colmap_model(&sparse_dir(data), ModelFormat::Auto)?;
    let test = test_names(data)?;
    let mut out = Vec::new();
    for img in model.images.values() {
        let held = test.contains(&img.name);
        let keep = match split {
            Split::All => true,
            Split::Test => held,
            Split::Train => !held,
        };
        if keep {
            let intr = model.camera_for(img)?.clone();
            out.push((img.id, img.name.clone(), Camera::new(intr, img.pose())));
        }
    }
    if out.is_empty() {
        return Err(Failure::User(format!("the {split:?} split of {} is empty", data.display()).to_lowercase()));
    }
    Ok((model, out))
}

fn test_names(data: &Path) -> Result<BTreeSet<String>> {
    match std::fs::read_to_string(data.join(DATASET_INFO)) {
        Ok(text) => {
            let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| Failure::User(format!("{DATASET_INFO}: {e}")))?;
            Ok(info.test_images.into_iter().collect())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeSet::new()),
        Err(e) => Err(e.into()),
    }
}

fn load_model(v: &ViewArgs) -> Result<LodModel> {
    let mut model = LodModel::load(&v.model)?;
    if let Some(t) = &v.thresholds {
        validate_thresholds(t)?;
        if t.len() + 1 != model.level_count() {
            return Err(Failure::User(format!(
                "{} levels need {} thresholds, got {}",
                model.level_count(),
                model.level_count() - 1,
                t.len()
            )));
        }
        model.manifest.thresholds = t.clone();
    }
    Ok(model)
}

fn options(model: &LodModel, v: &ViewArgs) -> (ProjectOptions, RenderOptions) {
    (
        ProjectOptions {
            antialias: model.manifest.antialias,
        },
        RenderOptions {
            culling: !v.no_culling,
            ..Default::default()
        },
    )
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    image: u32,
    name: &'a str,
    gaussians: usize,
    pairs_binned: usize,
    pairs_culled: usize,
}

#[derive(Serialize)]
struct ViewSettings<'a> {
    split: String,
    lod: bool,
    thresholds: &'a [f64],
    culling: bool,
    appearance_from: Option<u32>,
    protocol: Option<Protocol>,
}

fn render(a: RenderArgs) -> Result<()> {
    let model = load_model(&a.view)?;
    let (project, ropts) = options(&model, &a.view);
    let (_, cams) = split_cameras(&a.view.data, a.view.split)?;
    create_dir(&a.out)?;
    let mut frames = std::io::BufWriter::new(std::fs::File::create(a.out.join("render.jsonl"))?);
    for (id, name, cam) in &cams {
        let image = a.appearance_from.unwrap_or(*id);
        let (rgb, stats, n) = render_model(&model, cam, Some(image), !a.view.no_lod, project, &ropts)?;
        let file = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s).replace('/', "_") + ".png";
        save_png(&rgb, &a.out.join(&file))?;
        serde_json::to_writer(
            &mut frames,
            &FrameRecord {
                image: *id,
                name,
                gaussians: n,
                pairs_binned: stats.pairs_binned,
                pairs_culled: stats.pairs_culled,
            },
        )?;
        writeln!(frames)?;
    }
    frames.flush()?;
    write_manifest(
        &a.out,
        "render",
        ViewSettings {
            split: format!("{:?}", a.view.split).to_lowercase(),
            lod: !a.view.no_lod,
            thresholds: &model.manifest.thresholds,
            culling: !a.view.no_culling,
            appearance_from: a.appearance_from,
            protocol: None,
        },
    )?;
    println!("rendered {} frames to {}", cams.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MetricsRecord<'a> {
    View(&'a usk::trainer::ViewMetrics),
    Summary {
        protocol: Protocol,
        lod: bool,
        views: usize,
        psnr: f64,
        ssim: f64,
        l1: f64,
        mean_gaussians: f64,
    },
}

fn metrics_table(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8}  {:>8}  {:>7}  {:>8}  {:>9}", "image", "psnr", "ssim", "l1", "gaussians");
    for v in &m.views {
        let _ = writeln!(
            s,
            "{:>8}  {:>8.3}  {:>7.4}  {:>8.5}  {:>9}",
            v.image_id, v.psnr, v.ssim, v.l1, v.gaussians
        );
    }
    let _ = writeln!(
        s,
        "{:>8}  {:>8.3}  {:>7.4}  {:>8.5}  {:>9.1}",
        "mean", m.psnr, m.ssim, m.l1, m.mean_gaussians
    );
    s
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.view)?;
    let (project, render) = options(&model, &a.view);
    let (_, cams) = split_cameras(&a.view.data, a.view.split)?;
    let ds = load_dataset(
        &a.view.data,
        &DatasetOptions {
            depth_dir: None,
            mask_dir: a.mask_dir.clone(),
        },
    )?;
    let views: Vec<View> = cams.iter().map(|(id, _, _)| ds.views[id].clone()).collect();
    let protocol = match a.protocol {
        ProtocolArg::Direct => Protocol::Direct,
        ProtocolArg::HalfEmbedding => Protocol::HalfEmbedding,
    };
    let opts = EvalOptions {
        protocol,
        lod: !a.view.no_lod,
        project,
        render,
        ..Default::default()
    };
    let started = Instant::now();
    let m = evaluate(&model, &views, &opts)?;
    let seconds = started.elapsed().as_secs_f64();
    let table = metrics_table(&m);
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
        for v in &m.views {
            serde_json::to_writer(&mut w, &MetricsRecord::View(v))?;
            writeln!(w)?;
        }
        serde_json::to_writer(
            &mut w,
            &MetricsRecord::Summary {
                protocol: m.protocol,
                lod: m.lod,
                views: m.views.len(),
                psnr: m.psnr,
                ssim: m.ssim,
                l1: m.l1,
                mean_gaussians: m.mean_gaussians,
            },
        )?;
        writeln!(w)?;
        w.flush()?;
        std::fs::write(out.join("metrics.txt"), &table)?;
        std::fs::write(
            out.join("timing.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "seconds": seconds,
                "ms_per_view": 1000.0 * seconds / m.views.len() as f64,
            }))? + "\n",
        )?;
        write_manifest(
            out,
            "eval",
            ViewSettings {
                split: format!("{:?}", a.view.split).to_lowercase(),
                lod: !a.view.no_lod,
                thresholds: &model.manifest.thresholds,
                culling: !a.view.no_culling,
                appearance_from: None,
                protocol: Some(protocol),
            },
        )?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    if let Some(plan_path) = &a.target.plan {
        let data = a.data.as_ref().expect("clap enforces --data with --plan");
        let plan = read_plan(plan_path)?;
        let model = load_colmap_model(&sparse_dir(data), ModelFormat::Auto)?;
        let baseline = divide_expanded_bbox(&model, plan.target_size, a.baseline_expansion)?;
        print!("{}", plan_report(&plan, &baseline, a.baseline_expansion, a.bins.max(1)));
    } else if let Some(dir) = &a.target.model {
        let model = LodModel::load(dir)?;
        let log = read_train_log(&dir.join(TRAIN_LOG))?;
        println!(
            "levels: {}  partitions: {}  thresholds: {:?}",
            model.level_count(),
            model.manifest.partitions.len(),
            model.manifest.thresholds
        );
        print!("{}", model_report(&model, &log));
    } else if let Some(path) = &a.target.checkpoint {
        let ck = load_checkpoint(path)?;
        let set = &ck.set;
        println!("gaussians: {}", set.len());
        println!("embedding dim: {}", set.embed_dim);
        if !set.is_empty() {
            let o = set.opacities();
            let (lo, hi) = o.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            println!("opacity: min {lo:.4} mean {:.4} max {hi:.4}", o.iter().sum::<f64>() / o.len() as f64);
            let s: Vec<f64> = set.log_scale.iter().flatten().map(|v| v.exp()).collect();
            let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            println!("scale: min {lo:.5} max {hi:.5}");
        }
        match &ck.appearance {
            Some(app) => println!(
                "appearance: {} image embeddings of dim {}, {} MLP parameters",
                app.image_embeddings.len(),
                app.image_dim,
                app.mlp.params.len()
            ),
            None => println!("appearance: none"),
        }
    }
    Ok(())
}

fn read_train_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Failure::User(format!("{}: {e}", path.display()))))
        .collect()
}
