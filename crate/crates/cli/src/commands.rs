use std::fs;
use std::path::{Path, PathBuf};

use seqenc::cells::{Arrangement, CellConfig, CellKind};
use seqenc::encoder::{argmax_map, pixel_losses, EncoderConfig, SequenceSample, IGNORE};
use seqenc::metrics::{ConfusionMatrix, MetricsReport};
use seqenc::seeds::{rng, stream, stream_seed};
use seqenc::synthdata::{apply_clouds, generate_dataset, read_dataset, write_dataset, CloudEvent, Dataset, SceneSpec, Split};
use seqenc::tensor::{Activation, Mode, Tensor, LEAKY_RELU_ALPHA};
use seqenc::training::gradcheck::{run_gradcheck, GradCheckConfig};
use seqenc::training::{
    confusion, load_checkpoint, save_checkpoint, write_history_csv, Checkpoint, FitResult, OptimizerKind, TrainConfig,
};
use seqenc::{Error, Result};

use crate::args::{ActivationsArgs, EvalArgs, GenerateArgs, GradcheckArgs, InferArgs, TrainArgs};
use crate::images::{heatmap, symmetric_to_byte, unit_to_byte, Image, IGNORE_COLOR, PALETTE};
use crate::manifest::{OutputLock, RunManifest};

const MANIFEST: &str = "manifest.json";

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable arguments")
}

/// Create `dir` and lock it for the duration of the run.
fn prepare_dir(dir: &Path) -> Result<OutputLock> {
    fs::create_dir_all(dir)?;
    OutputLock::acquire(dir.join(".lock"))
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::Format(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn sample_at(data: &Dataset, index: usize) -> Result<&SequenceSample> {
    data.samples
        .get(index)
        .map(|s| &s.sample)
        .ok_or_else(|| Error::Config(format!("sample index {index} out of range (dataset has {})", data.len())))
}

fn model_for(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    let cfg = &ck.encoder.config;
    if cfg.n_classes != data.n_classes || cfg.cell.d != data.depth {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes and depth {}, dataset has {} and {}",
            cfg.n_classes, cfg.cell.d, data.n_classes, data.depth
        )));
    }
    Ok(())
}

/// One-hot probabilities of the reference labels (ignored pixels uniform).
fn perfect_prediction(sample: &SequenceSample, n: usize) -> Tensor {
    let l = &sample.labels;
    let mut y = Tensor::zeros(&[l.height, l.width, n]);
    for (row, &label) in y.data_mut().chunks_exact_mut(n).zip(&l.labels) {
        if label == IGNORE {
            row.fill(1.0 / n as f64);
        } else {
            row[label as usize] = 1.0;
        }
    }
    y
}

pub fn parse_ratio(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("ratio must look like 4:1:1, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let spec = SceneSpec {
        tile: args.tile,
        n_bands: args.bands,
        n_classes: args.classes,
        t: args.t,
        seasons: args.seasons,
        cloud_prob: args.cloud_prob,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        min_field: args.min_field,
        min_obs: args.min_obs,
        zipf: args.zipf,
    };
    let ratio = parse_ratio(&args.ratio)?;
    spec.validate()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let _lock = OutputLock::acquire(suffixed(&args.out, ".lock"))?;
    let mut manifest = RunManifest::start("generate", to_json(args));
    manifest.seeds = serde_json::json!({ "global": args.seed, "derivation": "scene i uses derive_seed(seed, 4, i)" });
    let data = generate_dataset(&spec, args.samples, ratio)?;
    write_dataset(&data, &args.out)?;
    manifest.output(&args.out)?;
    let count = |s: Split| data.samples.iter().filter(|x| x.split == s).count();
    manifest.detail("spec", to_json(&spec));
    manifest.detail(
        "split_sizes",
        serde_json::json!({ "train": count(Split::Train), "validation": count(Split::Validation), "test": count(Split::Test) }),
    );
    println!("wrote {} samples to {}", data.len(), args.out.display());
    manifest.finish(&suffixed(&args.out, ".manifest.json"))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn encoder_config(args: &TrainArgs, depth: usize, n_classes: usize) -> Result<EncoderConfig> {
    let kind: CellKind = args.cell.parse()?;
    let arrangement = match args.arrangement.as_str() {
        "conv" => Arrangement::Conv,
        "dense" => Arrangement::Dense,
        other => return Err(Error::Config(format!("unknown arrangement {other:?} (conv, dense)"))),
    };
    let activation = match args.activation.as_str() {
        "relu" => Activation::Relu,
        "leaky_relu" | "leaky-relu" => Activation::LeakyRelu(LEAKY_RELU_ALPHA),
        other => return Err(Error::Config(format!("unknown head activation {other:?} (relu, leaky_relu)"))),
    };
    let cell = CellConfig {
        kind,
        arrangement,
        r: args.r,
        d: depth,
        k_rnn: if arrangement == Arrangement::Dense { 1 } else { args.k_rnn },
        forget_bias: args.forget_bias,
    };
    let cfg = EncoderConfig { cell, n_classes, k_class: args.k_class, activation };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let optimizer: OptimizerKind = args.optimizer.parse()?;
    let data = load_data(&args.data)?;
    let model = encoder_config(args, data.depth, data.n_classes)?;
    let config = TrainConfig {
        optimizer,
        lr: args.lr,
        batch: args.batch,
        epochs: args.epochs,
        n_keep: (args.n_keep > 0).then_some(args.n_keep),
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        clip: args.clip,
        max_steps: args.max_steps,
        ..TrainConfig::default()
    };
    config.validate()?;
    let _lock = prepare_dir(&args.out)?;
    let mut manifest = RunManifest::start("train", to_json(args));
    manifest.input(&args.data)?;
    manifest.seeds = serde_json::json!({
        "global": args.seed,
        "init": "cell derive_seed(seed, 1, 0), head derive_seed(seed, 1, 1)",
        "shuffle": "stream_seed(seed, 2, epoch, 0)",
        "subsample": "stream_seed(seed, 3, epoch, sample index)",
    });
    let train = data.split(Split::Train);
    let validation = data.split(Split::Validation);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }

    let ck_dir = args.out.join("checkpoints");
    let mut written = Vec::new();
    let mut on_checkpoint = |ck: &Checkpoint| -> Result<()> {
        fs::create_dir_all(&ck_dir)?;
        let p = ck_dir.join(format!("step-{:06}.mtck", ck.step));
        save_checkpoint(ck, &p)?;
        written.push(p);
        Ok(())
    };
    let FitResult { trainer, validation: report } =
        seqenc::training::fit(&train, &validation, model.clone(), config, &mut on_checkpoint)?;
    for p in &written {
        manifest.output(p)?;
    }

    let history = args.out.join("history.csv");
    write_history_csv(&trainer.history, fs::File::create(&history)?)?;
    manifest.output(&history)?;

    let mut metrics = serde_json::json!({ "final_loss": trainer.history.last().map(|h| h.loss) });
    if let Some(r) = &report {
        let p = args.out.join("validation_metrics.csv");
        r.write_csv(fs::File::create(&p)?)?;
        manifest.output(&p)?;
        metrics["validation_overall_accuracy"] = r.overall_accuracy.into();
        metrics["validation_kappa"] = r.kappa.into();
        println!("validation: OA {:.4} kappa {:.4}", r.overall_accuracy, r.kappa);
    }
    let final_path = args.out.join("checkpoint.mtck");
    save_checkpoint(&trainer.checkpoint(metrics.clone()), &final_path)?;
    manifest.output(&final_path)?;

    manifest.detail("model", to_json(&model));
    manifest.detail("param_count", trainer.encoder.param_count().into());
    manifest.detail("cell_param_count", seqenc::cells::param_count(&model.cell).into());
    manifest.detail("steps", trainer.step.into());
    manifest.detail("epochs", trainer.epoch.into());
    manifest.detail("metrics", metrics);
    println!("trained {} steps, final checkpoint {}", trainer.step, final_path.display());
    manifest.finish(&args.out.join(MANIFEST))
}

fn trainer_config_of(ck: &Checkpoint) -> TrainConfig {
    ck.train.clone().unwrap_or_default()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    if args.cell_px == 0 {
        return Err(Error::Config("cell_px must be >= 1".into()));
    }
    let ck = load_checkpoint(&args.checkpoint, None)?;
    let data = load_data(&args.data)?;
    model_for(&ck, &data)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let _lock = prepare_dir(&args.out)?;
    let mut manifest = RunManifest::start("eval", to_json(args));
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.data)?;
    let n = ck.encoder.config.n_classes;
    let cm = if args.debug_perfect {
        let mut cm = ConfusionMatrix::new(n);
        for s in &samples {
            cm.update_map(&argmax_map(&perfect_prediction(s, n))?, &s.labels)?;
        }
        cm
    } else {
        confusion(&ck.encoder, &samples)?
    };
    let report = MetricsReport::new(&cm, args.precision_kappa);

    let metrics = args.out.join("metrics.csv");
    report.write_csv(fs::File::create(&metrics)?)?;
    let matrix = args.out.join("confusion.csv");
    report.write_confusion_csv(fs::File::create(&matrix)?)?;
    let heat = args.out.join("confusion.ppm");
    let gray = heatmap(&report.normalized.rows, args.cell_px);
    let rgb: Vec<[u8; 3]> = gray.data.iter().map(|&v| [v, v, v]).collect();
    Image::rgb(gray.width, gray.height, &rgb).save(&heat)?;
    for p in [&metrics, &matrix, &heat] {
        manifest.output(p)?;
    }
    manifest.detail("overall_accuracy", report.overall_accuracy.into());
    manifest.detail("kappa", report.kappa.into());
    manifest.detail("pixels", report.pixels.into());
    manifest.detail(
        "layout",
        "confusion rows are reference classes, columns predictions; heatmap value = round(255 * row-normalized share)".into(),
    );
    manifest.detail("zero_rows", to_json(&report.normalized.zero_rows));
    manifest.detail("trained_with", to_json(&trainer_config_of(&ck)));
    println!("{split}: OA {:.4} kappa {:.4} over {} pixels", report.overall_accuracy, report.kappa, report.pixels);
    manifest.finish(&args.out.join(MANIFEST))
}

/// Per-band linear stretch of `mean ± 2σ` to `0..=255`.
fn rgb_preview(frame: &Tensor, bands: [usize; 3]) -> Result<Image> {
    let (h, w, d) = frame.dims3("rgb_preview")?;
    let mut px = vec![[0u8; 3]; h * w];
    for (c, &b) in bands.iter().enumerate() {
        let b = b.min(d - 1);
        let vals: Vec<f64> = frame.data().chunks_exact(d).map(|row| row[b]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt().max(1e-12);
        for (p, v) in px.iter_mut().zip(&vals) {
            p[c] = unit_to_byte((v - (mean - 2.0 * sd)) / (4.0 * sd));
        }
    }
    Ok(Image::rgb(w, h, &px))
}

fn label_image(labels: &[i16], h: usize, w: usize) -> Image {
    let px: Vec<[u8; 3]> =
        labels.iter().map(|&l| if l == IGNORE { IGNORE_COLOR } else { PALETTE[l as usize % PALETTE.len()] }).collect();
    Image::rgb(w, h, &px)
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint, None)?;
    let data = load_data(&args.data)?;
    model_for(&ck, &data)?;
    let sample = sample_at(&data, args.sample)?;
    let _lock = prepare_dir(&args.out)?;
    let mut manifest = RunManifest::start("infer", to_json(args));
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.data)?;
    let n = ck.encoder.config.n_classes;
    let y = if args.debug_perfect { perfect_prediction(sample, n) } else { ck.encoder.predict(sample, Mode::Infer)? };
    let (h, w, _) = y.dims3("infer")?;
    let pred = argmax_map(&y)?;
    let mut outputs = Vec::new();

    let p = args.out.join("prediction.ppm");
    label_image(&pred.iter().map(|&c| c as i16).collect::<Vec<_>>(), h, w).save(&p)?;
    outputs.push(p);
    let p = args.out.join("labels.ppm");
    label_image(&sample.labels.labels, h, w).save(&p)?;
    outputs.push(p);
    for k in 0..n {
        let p = args.out.join(format!("activation_class{k:02}.pgm"));
        Image::gray(w, h, y.data().chunks_exact(n).map(|row| unit_to_byte(row[k])).collect()).save(&p)?;
        outputs.push(p);
    }
    let loss_range = 2.0 * (n as f64).ln();
    let losses = pixel_losses(&y, &sample.labels)?;
    let p = args.out.join("loss.pgm");
    Image::gray(w, h, losses.iter().map(|l| l.map_or(0, |v| unit_to_byte(v / loss_range))).collect()).save(&p)?;
    outputs.push(p);
    let observed = sample.observed();
    let mid = observed[observed.len() / 2];
    let p = args.out.join("rgb.ppm");
    rgb_preview(&sample.frame(mid), [3, 2, 1])?.save(&p)?;
    outputs.push(p);
    for p in &outputs {
        manifest.output(p)?;
    }
    let counted: Vec<f64> = losses.iter().flatten().copied().collect();
    manifest.detail("mean_loss", (counted.iter().sum::<f64>() / counted.len().max(1) as f64).into());
    manifest.detail(
        "scaling",
        serde_json::json!({
            "activations": "probability 0..1 -> 0..255",
            "loss": format!("cross-entropy 0..{loss_range} -> 0..255, clipped; ignored pixels 0"),
            "rgb": format!("bands 3,2,1 of frame {mid}, per-band mean ± 2 sd -> 0..255"),
            "palette": "fixed per class; ignored pixels black",
        }),
    );
    println!("wrote {} maps for sample {} to {}", outputs.len(), args.sample, args.out.display());
    manifest.finish(&args.out.join(MANIFEST))
}

/// Maps in (0, 1) are scaled linearly; the others are symmetric in (−1, 1).
fn is_gate(name: &str) -> bool {
    matches!(name, "i" | "f" | "o" | "z" | "s")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn activations(args: &ActivationsArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint, None)?;
    let data = load_data(&args.data)?;
    model_for(&ck, &data)?;
    let r = ck.encoder.config.cell.r;
    let cells = args.cells.clone().unwrap_or_else(|| (0..r).collect());
    if let Some(&bad) = cells.iter().find(|&&c| c >= r) {
        return Err(Error::Config(format!("cell index {bad} out of range for r = {r}")));
    }
    let mut sample = sample_at(&data, args.sample)?.clone();
    let observed = sample.observed();
    let mut cloud_frame = None;
    if let Some(step) = args.inject_cloud {
        let &frame = observed
            .get(step)
            .ok_or_else(|| Error::Config(format!("cloud step {step} out of range ({} observed steps)", observed.len())))?;
        let (t, h, w, d) = sample.dims();
        let mut f = sample.frame(frame);
        let bands = d.saturating_sub(2).max(1);
        apply_clouds(&mut f, bands, &[CloudEvent::WholeFrame], &mut rng(stream_seed(args.seed, stream::SCENE, 0, step as u64)))?;
        f.round_to_f32();
        let frames: Vec<Tensor> = (0..t).map(|i| if i == frame { f.clone() } else { sample.frame(i) }).collect();
        sample = SequenceSample::new(Tensor::stack(&frames)?, sample.mask.clone(), sample.labels.clone())?;
        debug_assert_eq!((h, w), (sample.labels.height, sample.labels.width));
        cloud_frame = Some(step);
    }
    let trace = ck.encoder.activations_trace(&sample, &cells)?;
    let _lock = prepare_dir(&args.out)?;
    let mut manifest = RunManifest::start("activations", to_json(args));
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.data)?;
    let maps_dir = args.out.join("maps");
    fs::create_dir_all(&maps_dir)?;

    let (h, w) = (sample.labels.height, sample.labels.width);
    let names: Vec<&'static str> = trace.steps[0].cells[0].maps.iter().map(|(n, _)| *n).collect();
    let mut csv = String::from("step,frame,cell,map,mean,min,max\n");
    let mut outputs = Vec::new();
    let to_bytes = |name: &str, t: &Tensor| -> Vec<u8> {
        t.data().iter().map(|&v| if is_gate(name) { unit_to_byte(v) } else { symmetric_to_byte(v) }).collect()
    };
    for (s, step) in trace.steps.iter().enumerate() {
        for cm in &step.cells {
            for (name, t) in &cm.maps {
                let p = maps_dir.join(format!("step{s:03}_cell{:03}_{name}.pgm", cm.cell));
                Image::gray(w, h, to_bytes(name, t)).save(&p)?;
                outputs.push(p);
                let d = t.data();
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                csv.push_str(&format!("{s},{},{},{name},{mean},{lo},{hi}\n", step.frame, cm.cell));
            }
        }
    }
    // grid per map: rows = traced cells, columns = steps
    for (mi, name) in names.iter().enumerate() {
        let (gw, gh) = (trace.steps.len() * w, cells.len() * h);
        let mut grid = vec![0u8; gw * gh];
        for (s, step) in trace.steps.iter().enumerate() {
            for (ci, cm) in step.cells.iter().enumerate() {
                let bytes = to_bytes(name, &cm.maps[mi].1);
                for y in 0..h {
                    let row = (ci * h + y) * gw + s * w;
                    grid[row..row + w].copy_from_slice(&bytes[y * w..(y + 1) * w]);
                }
            }
        }
        let p = args.out.join(format!("grid_{name}.pgm"));
        Image::gray(gw, gh, grid).save(&p)?;
        outputs.push(p);
    }
    let csv_path = args.out.join("activations.csv");
    fs::write(&csv_path, csv)?;
    outputs.push(csv_path);
    for p in &outputs {
        manifest.output(p)?;
    }

    let gate = names[0];
    manifest.detail("steps", trace.steps.len().into());
    manifest.detail("maps", to_json(&names));
    manifest.detail("scaling", "i, f, o, z, s: (0, 1) -> 0..255; j, c, h: (-1, 1) -> 0..255, clipped".into());
    if let Some(cs) = cloud_frame {
        let per_cell: Vec<serde_json::Value> = cells
            .iter()
            .enumerate()
            .map(|(ci, &cell)| {
                let means: Vec<f64> = trace.steps.iter().map(|st| st.cells[ci].maps[0].1.data().iter().sum::<f64>() / (h * w) as f64).collect();
                let s = cloud_sensitivity(&means, cs);
                serde_json::json!({ "cell": cell, "delta": s.delta, "max_clean_delta": s.max_clean, "identifiable": s.identifiable() })
            })
            .collect();
        let best = per_cell.iter().map(|v| v["delta"].as_f64().unwrap_or(0.0)).fold(0.0, f64::max);
        let identifiable = per_cell.iter().filter(|v| v["identifiable"] == true).count();
        manifest.detail(
            "cloud_sensitivity",
            serde_json::json!({
                "gate": gate,
                "cloud_step": cs,
                "statistic": "per cell: |mean gate at the cloud step - median over clean steps|; identifiable when it exceeds every clean step's deviation",
                "max_delta": best,
                "cells_identifying_cloud": identifiable,
                "per_cell": per_cell,
            }),
        );
        println!("cloud step {cs}: max |delta {gate}| = {best:.4}, identifiable in {identifiable} of {} cells", cells.len());
    }
    println!("wrote {} steps x {} cells to {}", trace.steps.len(), cells.len(), args.out.display());
    manifest.finish(&args.out.join(MANIFEST))
}

struct Sensitivity {
    delta: f64,
    max_clean: f64,
}

impl Sensitivity {
    fn identifiable(&self) -> bool {
        self.delta > self.max_clean
    }
}

/// Deviation of step `cloud` from the median of the other steps, next to
/// the largest deviation among those other steps.
fn cloud_sensitivity(means: &[f64], cloud: usize) -> Sensitivity {
    let clean: Vec<f64> = means.iter().enumerate().filter(|(i, _)| *i != cloud).map(|(_, &v)| v).collect();
    if clean.is_empty() {
        return Sensitivity { delta: 0.0, max_clean: 0.0 };
    }
    let med = median(clean.clone());
    let max_clean = clean.iter().map(|v| (v - med).abs()).fold(0.0, f64::max);
    Sensitivity { delta: (means[cloud] - med).abs(), max_clean }
}

/// Returns `false` when any check fails.
pub fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cells = args.cells.iter().map(|c| c.parse()).collect::<Result<Vec<CellKind>>>()?;
    let cfg = GradCheckConfig {
        height: args.height,
        width: args.width,
        t: args.t,
        d: args.d,
        r: args.r,
        n_classes: args.classes,
        k_rnn: args.k_rnn,
        k_class: args.k_class,
        cells,
        seed: args.seed,
        eps: args.eps,
        probes: args.probes,
        tolerance: args.tolerance,
        inject: args.inject_wrong_gradient.clone(),
    };
    let lock = match &args.out {
        Some(dir) => Some(prepare_dir(dir)?),
        None => None,
    };
    let mut manifest = RunManifest::start("gradcheck", to_json(args));
    let entries = run_gradcheck(&cfg)?;
    for e in &entries {
        println!(
            "{:<5} {:<15} max_rel_err {:.3e} over {:>4} coords  {}",
            e.cell.to_string(),
            e.op,
            e.max_relative_error,
            e.probed,
            if e.pass { "PASS" } else { "FAIL" }
        );
    }
    let ok = entries.iter().all(|e| e.pass);
    let failed: Vec<String> = entries.iter().filter(|e| !e.pass).map(|e| format!("{}:{}", e.cell, e.op)).collect();
    if ok {
        println!("gradcheck passed (tolerance {:e})", cfg.tolerance);
    } else {
        eprintln!("gradcheck failed for {}", failed.join(", "));
    }
    if let Some(dir) = &args.out {
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_string_pretty(&entries)? + "\n")?;
        manifest.output(&p)?;
        manifest.detail("passed", ok.into());
        manifest.detail("failed", to_json(&failed));
        manifest.finish(&dir.join(MANIFEST))?;
    }
    drop(lock);
    Ok(ok)
}
