use std::fs;
use std::path::Path;

use simic::augment::{materialize, AugmentationSpec};
use simic::classical::{baseline_csv, run_baseline, Threshold};
use simic::dataio::{assign_splits, generate_synthetic, load_manifest, write_dataset, GrayImage, Split, SynthSpec};
use simic::model::{load_checkpoint, save_checkpoint, AttentionKind, AttentionMaps, ModelConfig, SimicModel};
use simic::objective::{evaluate, predict_split};
use simic::trainer::{train as run_training, TrainConfig};
use simic::SimicError;

use crate::args::{AttmapArgs, AugmentArgs, BaselineArgs, EvalArgs, SplitArgs, SynthArgs, TrainArgs};
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", a.out.display())))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Failure::Runtime(format!(
                "{} exists and is not empty (pass --force to replace it)",
                a.out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("cannot clear {}: {e}", a.out.display())))?;
        }
    }
    let mut spec = SynthSpec {
        image_width: a.size as usize,
        image_height: a.size as usize,
        scale_nm_per_px: a.scale_nm,
        radius_coupling: a.radius_coupling,
        seed: a.seed,
        ..SynthSpec::default()
    };
    if a.noiseless {
        spec = spec.noiseless();
    }
    let samples = generate_synthetic(&spec, a.n as usize)?;
    let manifest = write_dataset(&a.out, &spec, &samples)?;
    eprintln!("wrote {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> CmdResult {
    let mut manifest = load_manifest(&a.manifest)?;
    assign_splits(&mut manifest, a.seed)?;
    manifest.save(&a.manifest)?;
    eprintln!(
        "train {} / val {} / eval {}",
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Eval)
    );
    Ok(())
}

pub fn augment(a: AugmentArgs) -> CmdResult {
    let manifest = load_manifest(&a.manifest)?;
    if manifest.count(Split::Train) == 0 {
        return Err(Failure::Runtime("manifest has no train rows; run `split` first".into()));
    }
    let out = manifest.base_dir.join(&a.out_name);
    let expanded = materialize(&manifest, &AugmentationSpec::default(), &out)?;
    eprintln!(
        "train rows {} -> {}; wrote {}",
        manifest.count(Split::Train),
        expanded.count(Split::Train),
        out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let widths = a
        .widths
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::Usage(format!("--widths: expected comma-separated integers, got {:?}", a.widths)))?;
    let manifest = load_manifest(&a.manifest)?;
    let first = manifest
        .split_records(Split::Train)
        .next()
        .ok_or_else(|| Failure::Runtime("manifest has no train rows".into()))?;
    let probe = manifest.load_image(first)?;
    let config = ModelConfig {
        backbone: a.backbone,
        attention: a.attention,
        mode: a.mode,
        embed_dim: a.embed_dim,
        heads: a.heads,
        coord_channels: !a.no_coord,
        widths,
        blocks_per_stage: a.blocks_per_stage,
        input_height: probe.height(),
        input_width: probe.width(),
        seed: a.seed,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        weight_decay: a.weight_decay,
        patience: a.patience,
        min_delta: a.min_delta,
        delta: a.delta,
        mean_loss: a.mean_loss,
        seed: a.seed,
        timing: a.timing,
    };
    let usage = |e: SimicError| match e {
        SimicError::Config { .. } => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    };
    cfg.validate().map_err(usage)?;
    let mut model = SimicModel::build(&config).map_err(usage)?;
    let quiet = a.quiet;
    let log = run_training(&mut model, &manifest, &cfg, |r| {
        if !quiet {
            let val = r.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            eprintln!("epoch {:>4}  train {:.6}  val {}", r.epoch, r.train_loss, val);
        }
    })?;
    save_checkpoint(&model, &a.checkpoint)?;
    write_file(&a.log, &log.to_csv())?;
    eprintln!(
        "best epoch {} of {}; checkpoint {}",
        log.best_epoch,
        log.epochs.len(),
        a.checkpoint.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint, None)?;
    let manifest = load_manifest(&a.manifest)?;
    let report = evaluate(&model, &manifest, a.split)?;
    print!("{}\n{}", report.to_table(), report.to_csv());
    if let Some(path) = &a.csv {
        write_file(path, &report.to_csv())?;
    }
    if let Some(path) = &a.predictions {
        let (ids, _, predicted) = predict_split(&model, &manifest, a.split)?;
        let names: Vec<&str> = match model.config().mode.outputs() {
            3 => vec!["width_um", "height_um", "radius_um"],
            _ => vec!["radius_um"],
        };
        let mut csv = format!("id,{}\n", names.join(","));
        for (id, row) in ids.iter().zip(predicted.chunks(names.len())) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            csv.push_str(&format!("{id},{}\n", vals.join(",")));
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

pub fn attmap(a: AttmapArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint, None)?;
    if model.config().attention == AttentionKind::None {
        return Err(Failure::Runtime(format!(
            "checkpoint {} has no attention module",
            a.checkpoint.display()
        )));
    }
    let structure = match (model.config().needs_structure(), a.width, a.height) {
        (true, Some(w), Some(h)) => Some([[w, h]]),
        (true, _, _) => return Err(Failure::Usage("half-mode checkpoint needs --width and --height".into())),
        (false, None, None) => None,
        (false, _, _) => {
            return Err(Failure::Usage(
                "full-mode checkpoint takes no --width/--height structure input".into(),
            ))
        }
    };
    let image = GrayImage::read(&a.image)?;
    let prediction = model.predict(&[&image], structure.as_ref().map(|s| s.as_slice()))?;
    let weights = prediction.attention.expect("attention model returns weights");
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "attention".to_string(), |s| s.to_string_lossy().into_owned());
    let maps = AttentionMaps::from_batch(&weights, model.feature_grid(), std::slice::from_ref(&stem))?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", a.out.display())))?;
    let files = simic::model::export_attention_map(&maps[0], (image.height(), image.width()), &a.out, &stem)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> CmdResult {
    let threshold = match a.threshold.as_str() {
        "auto" => Threshold::Auto,
        t => Threshold::Fixed(
            t.parse()
                .map_err(|_| Failure::Usage(format!("--threshold: expected auto or 0-255, got {t:?}")))?,
        ),
    };
    let manifest = load_manifest(&a.manifest)?;
    let rows = run_baseline(&manifest, threshold)?;
    let csv = baseline_csv(&rows);
    match &a.out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    let failed = rows.iter().filter(|r| r.measurement.is_err()).count();
    eprintln!("measured {} of {} images", rows.len() - failed, rows.len());
    Ok(())
}
