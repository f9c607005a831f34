use std::fs;
use std::io::Write;
use std::path::Path;

use rescbam::attention::AttentionVariant;
use rescbam::data::{
    default_class_names, generate_synthetic_dataset, load_dataset, load_image, save_dataset, save_ppm, split_dataset,
    Sample, SplitManifest, SynthConfig, DEFAULT_SPLIT,
};
use rescbam::gradcheck::{run_suite, Scope};
use rescbam::metrics::ApMethod;
use rescbam::model::{decode_boxes, load_weights, save_weights, DecodeConfig, Model};
use rescbam::tensor::Tensor;
use rescbam::train::{ablation_csv, evaluate_model, run_ablation, train_from, TrainConfig};
use rescbam::DetBox;

use crate::exit::{Context, Failure};
use crate::{AblateArgs, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

const SPLIT_FILE: &str = "split.txt";

fn build_config(config: Option<&Path>, preset: &str, overrides: &[String]) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::preset(preset)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        cfg = TrainConfig::parse_onto(cfg, &text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::usage(format!("expected --key value override, got {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Failure::usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_names(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn check_class_names(names: &Option<Vec<String>>, num_classes: usize, dir: &Path) -> Result<(), Failure> {
    match names {
        Some(n) if n.len() != num_classes => Err(Failure::data(format!(
            "{} lists {} classes but the model has {num_classes}",
            dir.join("classes.txt").display(),
            n.len()
        ))),
        _ => Ok(()),
    }
}

fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<Sample>, Failure> {
    let by_id: std::collections::HashMap<&str, &'a Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Failure::data(format!("split lists unknown sample {id:?}")))
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).context(format!("writing {}", path.display()))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = build_config(a.config.as_deref(), &a.preset, &a.overrides)?;
    let (samples, manifest) = match (&a.data, a.synthetic) {
        (Some(dir), _) => {
            let loaded = load_dataset(dir, cfg.num_classes).context(format!("loading {}", dir.display()))?;
            check_class_names(&loaded.class_names, cfg.num_classes, dir)?;
            let manifest = match fs::read_to_string(dir.join(SPLIT_FILE)) {
                Ok(text) => SplitManifest::from_text(&text).context(dir.join(SPLIT_FILE).display())?,
                Err(_) => {
                    let ids: Vec<String> = loaded.samples.iter().map(|s| s.id.clone()).collect();
                    if ids.is_empty() {
                        return Err(Failure::data(format!("no samples in {}", dir.display())));
                    }
                    split_dataset(&ids, cfg.seed, DEFAULT_SPLIT)?
                }
            };
            (loaded.samples, manifest)
        }
        (None, Some(n)) => {
            let synth = SynthConfig {
                image_size: cfg.input_size,
                max_side: cfg.input_size / 2,
                ..SynthConfig::new(n, cfg.num_classes, cfg.seed)
            };
            let samples = generate_synthetic_dataset(&synth)?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let manifest = split_dataset(&ids, cfg.seed, DEFAULT_SPLIT)?;
            (samples, manifest)
        }
        (None, None) => return Err(Failure::usage("train needs --data DIR or --synthetic N")),
    };
    let train_set = select(&samples, &manifest.train)?;
    let val_set = if a.val_on_train {
        train_set.clone()
    } else {
        select(&samples, &manifest.val)?
    };
    if train_set.is_empty() {
        return Err(Failure::data("no samples in the training split"));
    }
    let init = match &a.init {
        Some(p) => Some(load_weights::<f32>(p).context(format!("loading {}", p.display()))?),
        None => None,
    };

    fs::create_dir_all(&a.out).context(format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.txt"), &cfg.render())?;
    write_file(&a.out.join(SPLIT_FILE), &manifest.to_text())?;
    let log_path = a.out.join("train_log.txt");
    let mut log_file = fs::File::create(&log_path).context(format!("creating {}", log_path.display()))?;
    log::info!(
        "training {} images ({} val), {} epochs, attention {}",
        train_set.len(),
        val_set.len(),
        cfg.epochs,
        cfg.attention
    );
    let mut write_err = None;
    let outcome = train_from(&cfg, init, &train_set, &val_set, |e| {
        let line = e.line();
        println!("{line}");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(Failure::from(err));
    }
    save_weights(&outcome.last, &a.out.join("last.rcbm"))?;
    save_weights(&outcome.best, &a.out.join("best.rcbm"))?;
    match outcome.best_map50 {
        Some(m) => log::info!("best val mAP50 {m:.4} at epoch {}", outcome.best_epoch),
        None => log::info!("no validation images; best.rcbm holds the last epoch"),
    }
    println!("weights written to {}", a.out.display());
    Ok(())
}

fn eval_split(data: &Path, split: &str, num_classes: usize) -> Result<(Vec<Sample>, Option<Vec<String>>), Failure> {
    let loaded = load_dataset(data, num_classes).context(format!("loading {}", data.display()))?;
    check_class_names(&loaded.class_names, num_classes, data)?;
    let samples = if split == "all" {
        loaded.samples
    } else {
        let path = data.join(SPLIT_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|_| Failure::data(format!("{} not found; use --split all", path.display())))?;
        let manifest = SplitManifest::from_text(&text).context(path.display())?;
        let ids = manifest
            .part(split)
            .ok_or_else(|| Failure::usage(format!("unknown split {split:?} (train | val | test | all)")))?;
        select(&loaded.samples, ids)?
    };
    if samples.is_empty() {
        return Err(Failure::data(format!("no samples in the {split} split of {}", data.display())));
    }
    Ok((samples, loaded.class_names))
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let method: ApMethod = a.ap_method.parse()?;
    let model = load_weights::<f32>(&a.weights).context(format!("loading {}", a.weights.display()))?;
    let nc = model.spec().num_classes;
    let (samples, names) = eval_split(&a.data, &a.split, nc)?;
    let names = names.unwrap_or_else(|| default_class_names(nc));
    let run = evaluate_model(&model, &samples, method)?;
    let r = &run.report;
    let params = model.num_params();
    let flops = model.flops()?;

    fs::create_dir_all(&a.out).context(format!("creating {}", a.out.display()))?;
    let mut kv = r.to_key_value();
    kv.push_str(&format!(
        "params = {params}\nflops = {flops}\ninference_ms = {:.3}\nimages = {}\n",
        run.inference_ms,
        samples.len()
    ));
    write_file(&a.out.join("report.kv"), &kv)?;
    write_file(&a.out.join("report.txt"), &r.summary(&names))?;
    write_file(&a.out.join("pr_curves.csv"), &r.pr_curve_csv(&names))?;

    print!("{}", r.summary(&names));
    println!("map50 {:.4}", r.map50);
    println!("map5095 {:.4}", r.map5095);
    println!("f1 {:.4}", r.f1);
    println!("params {params}");
    println!("flops {flops}");
    println!("inference_ms {:.3}", run.inference_ms);
    Ok(())
}

fn draw_box(img: &mut Tensor<f32>, b: &DetBox, color: [f32; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let [x1, y1, x2, y2] = b.corners();
    let px = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x1, x2, y1, y2) = (px(x1, w), px(x2, w), px(y1, h), px(y2, h));
    let d = img.data_mut();
    let mut put = |x: usize, y: usize| {
        for (c, v) in color.iter().enumerate() {
            d[c * plane + y * w + x] = *v;
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

/// Detections for `image` mapped back to its own pixel grid, highest confidence first.
pub fn detect(model: &Model<f32>, image: &Tensor<f32>, cfg: &DecodeConfig) -> rescbam::Result<Vec<DetBox>> {
    let size = model.spec().input_size;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let resized = rescbam::data::resize_bilinear(image, size, size)?;
    let batch = resized.reshape(vec![1, 3, size, size])?;
    let raw = model.predict_raw(&batch)?;
    let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
    let mut dets: Vec<DetBox> = decode_boxes(&raw, model.spec(), cfg)?
        .remove(0)
        .into_iter()
        .map(|d| {
            let [x1, y1, x2, y2] = d.corners();
            DetBox::from_corners(x1 * sx, y1 * sy, x2 * sx, y2 * sy, d.class_id, d.confidence).clipped(w as f64, h as f64)
        })
        .collect();
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(dets)
}

pub fn predict(a: PredictArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.conf) || !(0.0..=1.0).contains(&a.iou) {
        return Err(Failure::usage("--conf and --iou must lie in [0, 1]"));
    }
    let model = load_weights::<f32>(&a.weights).context(format!("loading {}", a.weights.display()))?;
    let nc = model.spec().num_classes;
    let names = match &a.names {
        Some(p) => read_names(p)?,
        None => default_class_names(nc),
    };
    let image = load_image(&a.image)?;
    let cfg = DecodeConfig {
        conf_threshold: a.conf,
        iou_threshold: a.iou,
        ..DecodeConfig::default()
    };
    let dets = detect(&model, &image, &cfg)?;
    for d in &dets {
        let [x1, y1, x2, y2] = d.corners();
        let name = names.get(d.class_id).cloned().unwrap_or_else(|| d.class_id.to_string());
        println!("{name} {:.4} {x1:.1} {y1:.1} {x2:.1} {y2:.1}", d.confidence);
    }
    log::info!("{} detections", dets.len());
    if let Some(out) = &a.draw {
        let mut img = image.clone();
        for d in &dets {
            draw_box(&mut img, d, [1.0, 0.1, 0.1]);
        }
        save_ppm(&img, out)?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let scope: Scope = a.scope.parse()?;
    let results = run_suite(scope, a.seed)?;
    println!("{:<28} {:>7} {:>7} {:>12} {:>10}  result", "check", "draws", "coords", "max_rel_err", "tolerance");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        println!(
            "{:<28} {:>7} {:>7} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.draws,
            r.coords,
            r.max_rel_err,
            r.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SynthConfig {
        image_size: a.size,
        max_side: (a.size / 2).max(10),
        class_weights: a.class_weights.clone(),
        ..SynthConfig::new(a.n, a.classes, a.seed)
    };
    let samples = generate_synthetic_dataset(&cfg)?;
    save_dataset(&a.out, &samples, &default_class_names(a.classes))?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = split_dataset(&ids, a.seed, DEFAULT_SPLIT)?;
    write_file(&a.out.join(SPLIT_FILE), &manifest.to_text())?;
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        samples.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let base = build_config(a.config.as_deref(), "desk", &a.overrides)?;
    let samples = match &a.data {
        Some(dir) => load_dataset(dir, base.num_classes).context(format!("loading {}", dir.display()))?.samples,
        None => generate_synthetic_dataset(&SynthConfig::new(a.synthetic, base.num_classes, base.seed))?,
    };
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    if ids.is_empty() {
        return Err(Failure::data("no samples"));
    }
    let m = split_dataset(&ids, base.seed, DEFAULT_SPLIT)?;
    let (train_set, test_set) = (select(&samples, &m.train)?, select(&samples, &m.test)?);
    if test_set.is_empty() {
        return Err(Failure::data("no samples in the test split"));
    }
    for &s in &a.sizes {
        if s == 0 || s % 32 != 0 {
            return Err(Failure::usage(format!("input size {s} is not a positive multiple of 32")));
        }
    }
    let variants = [AttentionVariant::None, AttentionVariant::ResCbam];
    let rows = run_ablation(&base, &a.sizes, &variants, &train_set, &test_set)?;
    let csv = ablation_csv(&rows);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
    }
    write_file(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

