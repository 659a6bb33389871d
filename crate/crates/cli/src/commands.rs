use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use detnum::bbr_loss::{LossKind, WiouConfig};
use detnum::bench::{run_suite, SuiteConfig, RESULT_HEADER, SUMMARY_HEADER};
use detnum::bra::{bra_forward, BraConfig, BraParams, FeatureMap};
use detnum::dataset::{
    category_weights, count_lines, echo_detections, generate_minidata, ground_truths, load_dataset,
    noisy_detections, split_train_val, summarize, weight_to_f64, write_dataset,
};
use detnum::gradcheck::{run_gradcheck, GradcheckConfig};
use detnum::metrics::{evaluate, format_detection, map_over_thresholds, parse_detections, Detection};

use crate::report::{write_file, Report};
use crate::{BenchArgs, BraArgs, EvalArgs, GradcheckArgs, MinidataArgs, SplitArgs, StatsArgs, WiouArgs};

pub enum Outcome {
    Ok,
    CheckFailed,
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!("directory not found: {}", p.display());
    }
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("file not found: {}", p.display());
    }
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<Detection<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_detections(&text).map_err(|e| anyhow::anyhow!(e.in_file(path)))
}

fn detections_text(dets: &[Detection<f64>]) -> String {
    dets.iter().map(|d| format!("{}\n", format_detection(d))).collect()
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    require_dir(&a.labels)?;
    require_file(&a.detections)?;
    if !(a.iou_threshold > 0.0 && a.iou_threshold <= 1.0) {
        bail!("--iou-threshold must lie in (0, 1], got {}", a.iou_threshold);
    }
    let images = load_dataset(&a.labels)?;
    let gts = ground_truths(&images);
    let dets = read_detections(&a.detections)?;
    let at = evaluate(&dets, &gts, a.iou_threshold)?;
    let summary = map_over_thresholds(&dets, &gts)?;

    let mut r = Report::new("eval");
    r.kv("labels", a.labels.display())
        .kv("detections", a.detections.display())
        .kv("iou_threshold", a.iou_threshold)
        .kv("matching", "greedy_confidence_order")
        .kv("images", images.len())
        .kv("ground_truths", gts.len())
        .kv("detection_count", dets.len())
        .kv("map", at.map)
        .kv("map50", summary.map50)
        .kv("map5095", summary.map5095);
    r.table(
        "per_category",
        "category_id,gt,tp,fp,fn,precision,recall,ap",
        at.per_category.iter().map(|c| {
            format!(
                "{},{},{},{},{},{},{},{}",
                c.category_id,
                c.counts.num_gt(),
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                c.precision,
                c.recall,
                c.ap
            )
        }),
    );
    r.table(
        "per_threshold",
        "iou_threshold,map",
        summary.per_threshold.iter().map(|(t, m)| format!("{t},{m}")),
    );
    r.emit(a.report.as_deref())?;
    Ok(Outcome::Ok)
}

pub fn dataset_stats(a: &StatsArgs) -> Result<Outcome> {
    require_dir(&a.labels)?;
    let images = load_dataset(&a.labels)?;
    let s = summarize(&images);
    let raw = category_weights(&s, false)?;
    let norm = category_weights(&s, true)?;

    let mut r = Report::new("dataset-stats");
    r.kv("labels", a.labels.display())
        .raw(&count_lines(s.image_count, s.total_instances, &s.counts))
        .kv("mean_per_image", s.mean_per_image)
        .kv("categories", s.counts.len());
    r.table(
        "weights",
        "category_id,count,raw_weight,normalized_weight,raw_weight_exact,normalized_weight_exact",
        s.counts.iter().map(|(c, n)| {
            format!(
                "{c},{n},{},{},{},{}",
                weight_to_f64(&raw[c]),
                weight_to_f64(&norm[c]),
                raw[c],
                norm[c]
            )
        }),
    );
    r.emit(a.report.as_deref())?;
    Ok(Outcome::Ok)
}

pub fn split(a: &SplitArgs) -> Result<Outcome> {
    require_dir(&a.labels)?;
    let images = load_dataset(&a.labels)?;
    let (train, val) = split_train_val(&images, a.ratio_train, a.ratio_val, a.seed)?;
    let ids = |set: &[detnum::dataset::LabeledImage]| -> String {
        set.iter().map(|i| format!("{}\n", i.image_id)).collect()
    };
    let (train_path, val_path) = (a.out.join("train.txt"), a.out.join("val.txt"));
    write_file(&train_path, &ids(&train))?;
    write_file(&val_path, &ids(&val))?;

    let mut r = Report::new("split");
    r.kv("labels", a.labels.display())
        .kv("seed", a.seed)
        .kv("ratio_train", a.ratio_train)
        .kv("ratio_val", a.ratio_val)
        .kv("images", images.len())
        .kv("train", train.len())
        .kv("val", val.len())
        .kv("train_list", train_path.display())
        .kv("val_list", val_path.display());
    r.emit(None)?;
    Ok(Outcome::Ok)
}

fn wiou_config(w: &WiouArgs) -> Result<WiouConfig<f64>> {
    let cfg = WiouConfig {
        alpha: w.alpha,
        delta: w.delta,
        gamma: w.gamma,
        momentum: w.momentum,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn loss_bench(a: &BenchArgs, threads: Option<usize>) -> Result<Outcome> {
    let losses = LossKind::parse_list(&a.losses)?;
    let cfg = SuiteConfig {
        n_problems: a.problems,
        seed: a.seed,
        losses,
        lr: a.lr,
        max_iters: a.max_iters,
        wiou: wiou_config(&a.wiou)?,
    };
    if !a.trace_ids.is_empty() && a.out.is_none() {
        bail!("--trace-ids needs --out");
    }
    if let Some(&bad) = a.trace_ids.iter().find(|&&i| i >= a.problems) {
        bail!("trace id {bad} out of range for {} problems", a.problems);
    }
    log::info!("running {} problems on {:?} threads", a.problems, threads);
    let report = run_suite(&cfg)?;

    if let Some(dir) = &a.out {
        write_file(&dir.join("results.csv"), &report.results_csv())?;
        write_file(&dir.join("summary.csv"), &report.summary_csv())?;
        for &id in &a.trace_ids {
            let p = &report.problems[id];
            for &loss in &cfg.losses {
                let outcome = detnum::bench::run_fit(&detnum::bench::FitProblem {
                    anchor: p.anchor,
                    target: p.target,
                    loss,
                    lr: cfg.lr,
                    max_iters: cfg.max_iters,
                    wiou: cfg.wiou,
                })?;
                let path = dir.join(format!("trace_{id}_{loss}.csv"));
                write_file(&path, &format!("{}{}", cfg.header_lines(), outcome.trace_csv()))?;
            }
        }
    }

    let mut r = Report::new("loss-bench");
    r.raw(&cfg.header_lines().replace("# ", ""));
    if let Some(dir) = &a.out {
        r.kv("results", dir.join("results.csv").display());
    }
    r.table("summary", SUMMARY_HEADER, report.summary.iter().map(|s| s.to_csv_row()));
    log::debug!("result columns: {RESULT_HEADER}");
    r.emit(None)?;
    Ok(Outcome::Ok)
}

pub fn bra_demo(a: &BraArgs) -> Result<Outcome> {
    require_file(&a.input)?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let fm = FeatureMap::<f64>::parse_text(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let c = fm.channels();
    let mut cfg = BraConfig::new(a.regions, a.topk, c, a.heads)?;
    if let Some(s) = a.scale {
        if !(s.is_finite() && s > 0.0) {
            bail!("--scale must be positive, got {s}");
        }
        cfg = cfg.with_scale(s);
    }
    let params = if a.identity {
        BraParams::identity(c)?
    } else {
        BraParams::random(c, &mut ChaCha8Rng::seed_from_u64(a.seed))?
    };
    let (out, routing) = bra_forward(&fm, &params, &cfg)?;
    write_file(&a.out, &out.to_text())?;
    write_file(&a.routing, &routing.to_text())?;

    let mut r = Report::new("bra-demo");
    r.kv("input", a.input.display())
        .kv("height", fm.height())
        .kv("width", fm.width())
        .kv("channels", c)
        .kv("regions", cfg.regions_per_side)
        .kv("topk", cfg.top_k)
        .kv("heads", cfg.heads)
        .kv("scale", cfg.scale)
        .kv("params", if a.identity { "identity".to_string() } else { format!("random(seed={})", a.seed) })
        .kv("output", a.out.display())
        .kv("routing", a.routing.display());
    r.table(
        "routing",
        "region,routed",
        routing.rows().iter().enumerate().map(|(i, row)| {
            let ids: Vec<String> = row.iter().map(usize::to_string).collect();
            format!("{i},{}", ids.join(" "))
        }),
    );
    r.emit(None)?;
    Ok(Outcome::Ok)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    if a.cases == 0 {
        bail!("--cases must be at least 1");
    }
    let cfg = GradcheckConfig {
        cases: a.cases,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let mut r = Report::new("gradcheck");
    r.kv("cases", cfg.cases)
        .kv("seed", cfg.seed)
        .kv("eps", cfg.eps)
        .kv("rel_tol", cfg.rel_tol)
        .kv("abs_tol", cfg.abs_tol)
        .kv("status", if report.passed() { "pass" } else { "fail" });
    let csv = report.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    r.table("ops", header, lines);
    r.emit(a.report.as_deref())?;
    Ok(if report.passed() {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

pub fn gen_minidata(a: &MinidataArgs) -> Result<Outcome> {
    if a.images == 0 {
        bail!("--images must be at least 1");
    }
    let (images, manifest) = generate_minidata(a.seed, a.images);
    let labels = a.out.join("labels");
    write_dataset(&labels, &images)?;
    let manifest_path = a.out.join("manifest.txt");
    write_file(&manifest_path, &manifest.to_text())?;
    let dets_path = a.out.join("detections.txt");
    write_file(&dets_path, &detections_text(&noisy_detections(&images, a.seed)))?;
    let echo_path = a.out.join("detections_echo.txt");
    write_file(&echo_path, &detections_text(&echo_detections(&images, 1.0)))?;

    let mut r = Report::new("gen-minidata");
    r.raw(&manifest.to_text())
        .kv("labels", labels.display())
        .kv("manifest", manifest_path.display())
        .kv("detections", dets_path.display())
        .kv("detections_echo", echo_path.display());
    r.emit(None)?;
    Ok(Outcome::Ok)
}
