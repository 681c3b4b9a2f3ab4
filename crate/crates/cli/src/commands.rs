use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;
use nestnet_core::data::{mean_pixel, stack, Sample};
use nestnet_core::explain::{
    explanation_target, grad_cam, gradient_attribution, lime_explain, occlusion_sensitivity, save_heatmap,
    superpixel_segment, OcclusionConfig, SaliencyMap, TargetMode,
};
use nestnet_core::image::{load_pgm, GrayImage};
use nestnet_core::metrics::{
    compute_eer, comparison_score, det_curve, format_sig9, mean_templates, score_matrix, verify, Decision,
    LabeledEmbedding, ScoreMatrix,
};
use nestnet_core::model::{NestNet, NestNetConfig};
use nestnet_core::synth::{generate_dataset, load_dataset, save_dataset, SynthConfig};
use nestnet_core::train::{split_sessions, train, AdamConfig, TrainError, TrainOptions};

use crate::checkpoint::{self, Checkpoint, TrainingRecord};
use crate::{exit, CliError, EvalArgs, ExplainArgs, ExplainMethod, SynthArgs, TrainArgs, VerifyArgs};

const EMBED_BATCH: usize = 16;

pub fn cmd_synth(args: &SynthArgs) -> Result<u8, CliError> {
    if args.identities < 2 {
        return Err(CliError::usage(format!(
            "--identities {}: verification needs at least 2 identities",
            args.identities
        )));
    }
    let config = SynthConfig { identities: args.identities, per_session: args.per_session, size: args.size, seed: args.seed };
    let samples = generate_dataset(&config).map_err(CliError::usage)?;
    save_dataset(&samples, &args.out).map_err(CliError::usage)?;
    println!(
        "wrote {} images ({} identities, 2 sessions, {} per session, {}×{}) seed {} to {}",
        samples.len(),
        args.identities,
        args.per_session,
        args.size,
        args.size,
        args.seed,
        args.out.display()
    );
    Ok(exit::OK)
}

fn load_data(dir: &Path) -> Result<Vec<Sample>, CliError> {
    load_dataset(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))
}

/// Identities must be exactly `0..n`.
fn class_count(samples: &[Sample]) -> Result<usize, CliError> {
    let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity).collect();
    let n = ids.len();
    if ids.iter().copied().ne(0..n) {
        return Err(CliError::usage(format!("identities must be dense 0..{n}, found {ids:?}")));
    }
    Ok(n)
}

pub fn cmd_train(args: &TrainArgs) -> Result<u8, CliError> {
    let samples = load_data(&args.data)?;
    let classes = class_count(&samples)?;
    let split = split_sessions(&samples).map_err(CliError::usage)?;
    let size = split.train.first().map_or(0, |s| s.size);
    let config = NestNetConfig { input_size: size, num_classes: classes, ..NestNetConfig::default() };
    let model = NestNet::build(config, args.seed).map_err(CliError::usage)?;
    if args.epochs == 0 {
        warn!("--epochs 0: writing the initial weights untrained");
    }
    let options = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch,
        adam: AdamConfig { lr: args.lr, ..AdamConfig::default() },
        seed: args.seed,
    };
    let run = train(model, &split.train, options).map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::numerical(e),
        other => CliError::usage(other),
    })?;
    let training = TrainingRecord {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        final_loss: run.epoch_losses.last().copied(),
        final_accuracy: run.epoch_accuracy.last().copied(),
    };
    let ckpt = Checkpoint { model: run.model, mean_pixel: mean_pixel(&split.train), training: Some(training) };
    checkpoint::save(&ckpt, &args.out).map_err(CliError::usage)?;
    write_loss_log(&args.out.join("loss.csv"), &run.epoch_losses, &run.epoch_accuracy)?;
    match (run.epoch_losses.last(), run.epoch_accuracy.last()) {
        (Some(loss), Some(acc)) => println!(
            "trained {} epochs on {} session-1 images: final loss {loss:.6}, train accuracy {acc:.4}; checkpoint {}",
            args.epochs,
            split.train.len(),
            args.out.display()
        ),
        _ => println!("wrote untrained checkpoint {}", args.out.display()),
    }
    Ok(exit::OK)
}

fn write_loss_log(path: &Path, losses: &[f64], accuracy: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut rows = vec![["epoch".to_string(), "loss".into(), "accuracy".into()]];
    for (i, (l, a)) in losses.iter().zip(accuracy).enumerate() {
        rows.push([(i + 1).to_string(), format_sig9(*l), format_sig9(*a)]);
    }
    for r in rows {
        w.write_record(&r).map_err(CliError::usage)?;
    }
    w.flush().map_err(CliError::usage)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    checkpoint::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Unit embeddings for `samples`, in order.
pub fn embed_samples(model: &NestNet<f32>, samples: &[&Sample]) -> Result<Vec<Vec<f32>>, CliError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        out.extend(model.embed(&stack(chunk.iter().copied())).map_err(CliError::numerical)?);
    }
    Ok(out)
}

fn check_size(model: &NestNet<f32>, size: usize, what: &str) -> Result<(), CliError> {
    let expected = model.config().input_size;
    if size != expected {
        return Err(CliError::usage(format!("{what} is {size}×{size}; the model expects {expected}×{expected}")));
    }
    Ok(())
}

/// Scores of every enrolled template or image against every session-2 probe.
pub fn evaluate(model: &NestNet<f32>, samples: &[Sample], per_image: bool) -> Result<ScoreMatrix, CliError> {
    let classes = class_count(samples)?;
    if classes != model.config().num_classes {
        return Err(CliError::usage(format!(
            "checkpoint has {} classes but the data has {classes} identities",
            model.config().num_classes
        )));
    }
    if let Some(s) = samples.first() {
        check_size(model, s.size, "data")?;
    }
    let split = split_sessions(samples).map_err(CliError::usage)?;
    let labeled = |set: &[Sample]| -> Result<Vec<LabeledEmbedding>, CliError> {
        let refs: Vec<&Sample> = set.iter().collect();
        Ok(embed_samples(model, &refs)?
            .into_iter()
            .zip(set)
            .map(|(embedding, s)| LabeledEmbedding { label: s.identity, embedding })
            .collect())
    };
    let mut enrolled = labeled(&split.train)?;
    let probes = labeled(&split.test)?;
    if !per_image {
        enrolled = mean_templates(&enrolled).map_err(CliError::numerical)?;
    }
    score_matrix(&enrolled, &probes).map_err(CliError::usage)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<u8, CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let samples = load_data(&args.data)?;
    let matrix = evaluate(&ckpt.model, &samples, args.per_image)?;
    let scores = matrix.scores();
    let eer = compute_eer(&scores).map_err(CliError::usage)?;
    let det = det_curve(&scores, args.det_points).map_err(CliError::usage)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::usage(format!("{}: {e}", args.out.display())))?;
    matrix.write_csv(create(&args.out.join("scores.csv"))?).map_err(CliError::usage)?;
    det.write_csv(create(&args.out.join("det.csv"))?).map_err(CliError::usage)?;
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let enrollment = if args.per_image { "per-image" } else { "per-finger" };
    let rows = [
        ("enrollment", enrollment.to_string()),
        ("genuine_count", scores.genuine.len().to_string()),
        ("impostor_count", scores.impostor.len().to_string()),
        ("genuine_mean", format_sig9(mean(&scores.genuine))),
        ("impostor_mean", format_sig9(mean(&scores.impostor))),
        ("eer", eer.eer.to_string()),
        ("eer_threshold", eer.threshold.to_string()),
        ("fmr_at_eer", eer.fmr.to_string()),
        ("fnmr_at_eer", eer.fnmr.to_string()),
    ];
    let mut w = csv::Writer::from_writer(create(&args.out.join("report.csv"))?);
    w.write_record(["metric", "value"]).map_err(CliError::usage)?;
    for (k, v) in &rows {
        w.write_record([*k, v.as_str()]).map_err(CliError::usage)?;
    }
    w.flush().map_err(CliError::usage)?;
    println!(
        "EER {:.4} at threshold {:.6} ({enrollment}, {} genuine / {} impostor); FMR {:.4} FNMR {:.4}",
        eer.eer,
        eer.threshold,
        scores.genuine.len(),
        scores.impostor.len(),
        eer.fmr,
        eer.fnmr
    );
    Ok(exit::OK)
}

fn load_image(path: &Path) -> Result<GrayImage, CliError> {
    let img = load_pgm(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if img.width != img.height {
        return Err(CliError::usage(format!("{}: image is {}×{}, expected square", path.display(), img.width, img.height)));
    }
    Ok(img)
}

fn image_sample(img: GrayImage) -> Sample {
    Sample { identity: 0, session: None, index: 0, size: img.width, pixels: img.pixels, core_box: None }
}

fn embed_image(model: &NestNet<f32>, path: &Path) -> Result<Vec<f32>, CliError> {
    let img = load_image(path)?;
    check_size(model, img.width, &path.display().to_string())?;
    Ok(embed_samples(model, &[&image_sample(img)])?.remove(0))
}

/// Cosine score of two image files under `model`.
pub fn pair_score(model: &NestNet<f32>, a: &Path, b: &Path) -> Result<f32, CliError> {
    let ea = embed_image(model, a)?;
    let eb = embed_image(model, b)?;
    comparison_score(&ea, &eb).map_err(CliError::numerical)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<u8, CliError> {
    if !args.threshold.is_finite() {
        return Err(CliError::usage(format!("--threshold {} is not finite", args.threshold)));
    }
    if args.threshold > 1.0 {
        warn!("threshold {} exceeds the cosine range; every pair is a non-match", args.threshold);
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let score = pair_score(&ckpt.model, &args.a, &args.b)?;
    match verify(score, args.threshold) {
        Decision::Match => {
            println!("{score:.6} MATCH");
            Ok(exit::OK)
        }
        Decision::NonMatch => {
            println!("{score:.6} NON-MATCH");
            Ok(exit::NON_MATCH)
        }
    }
}

enum TargetSpec {
    PredictedClass,
    Class(usize),
    Match(PathBuf),
}

fn parse_target(s: &str) -> Result<TargetSpec, CliError> {
    if s == "class" {
        return Ok(TargetSpec::PredictedClass);
    }
    if let Some(k) = s.strip_prefix("class:") {
        return k.parse().map(TargetSpec::Class).map_err(|_| CliError::usage(format!("--target {s}: bad class index")));
    }
    if let Some(path) = s.strip_prefix("match:") {
        if path.is_empty() {
            return Err(CliError::usage("--target match: needs a reference image path"));
        }
        return Ok(TargetSpec::Match(PathBuf::from(path)));
    }
    Err(CliError::usage(format!("--target {s}: expected class, class:K or match:REF_IMAGE")))
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<u8, CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = &ckpt.model;
    let img = load_image(&args.image)?;
    let size = img.width;
    check_size(model, size, &args.image.display().to_string())?;
    let sample = image_sample(img);
    let (mode, reference) = match parse_target(&args.target)? {
        TargetSpec::PredictedClass => {
            let (logits, _) = model.infer(&sample.to_tensor()).map_err(CliError::numerical)?;
            (TargetMode::ClassProb(nestnet_core::train::argmax(logits.values())), None)
        }
        TargetSpec::Class(k) => (TargetMode::ClassProb(k), None),
        TargetSpec::Match(path) => (TargetMode::MatchScore, Some(embed_image(model, &path)?)),
    };
    let target = explanation_target(model, mode, reference.as_deref()).map_err(CliError::usage)?;
    let pixels = &sample.pixels;
    let map: SaliencyMap = match args.method {
        ExplainMethod::Gradcam => grad_cam(&target, pixels, size, &args.layer).map_err(CliError::usage)?,
        ExplainMethod::Gradient => gradient_attribution(&target, pixels, size).map_err(CliError::usage)?,
        ExplainMethod::Occlusion | ExplainMethod::OcclusionHr => {
            let config =
                if args.method == ExplainMethod::Occlusion { OcclusionConfig::COARSE } else { OcclusionConfig::HIGH_RES };
            let baseline = args.baseline.unwrap_or(ckpt.mean_pixel);
            occlusion_sensitivity(&target, pixels, size, config, baseline).map_err(CliError::usage)?
        }
        ExplainMethod::Lime => {
            let seg = superpixel_segment(size, size, args.lime_grid, args.lime_grid).map_err(CliError::usage)?;
            let lime = lime_explain(&target, pixels, &seg, args.lime_samples, args.seed).map_err(CliError::usage)?;
            lime.to_map(&seg)
        }
    };
    if !map.is_finite() {
        return Err(CliError::numerical(format!("{} map contains non-finite values", map.method)));
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::usage(format!("{}: {e}", parent.display())))?;
    }
    let csv_path = with_extension(&args.out, "csv");
    map.write_csv(create(&csv_path)?).map_err(CliError::usage)?;
    let ppm_path = with_extension(&args.out, "ppm");
    save_heatmap(&map, pixels, size, &ppm_path).map_err(CliError::usage)?;
    let (r, c) = map.argmax();
    let (x, y) = map.cell_center(r, c);
    println!(
        "{}, {}: {}×{} map, peak at cell ({r}, {c}) centred on pixel ({x:.1}, {y:.1}); wrote {} and {}",
        map.description,
        target.describe(),
        map.rows,
        map.cols,
        csv_path.display(),
        ppm_path.display()
    );
    Ok(exit::OK)
}
