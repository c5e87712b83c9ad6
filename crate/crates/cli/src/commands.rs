use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use scribseg::backbone::{Backbone, ProviderRegistry};
use scribseg::checkpoint::{write_atomic, Checkpoint};
use scribseg::config::WorkbenchConfig;
use scribseg::decoder::{argmax_mask, DecoderConfig};
use scribseg::export::{save_mask, save_probability_tiff, sidecar_path};
use scribseg::featviz::{montage, pca_rgb_image};
use scribseg::image::ImagePlane;
use scribseg::mask::{ClassTable, LabelMask, IGNORE};
use scribseg::metrics::evaluate;
use scribseg::model::SegmentationModel;
use scribseg::synthetic::{generate, SceneConfig};
use scribseg::tiler::{segment, TileLayout};
use scribseg::trainer::{dense_examples, scribble_examples, train as fit, ScribbleMask, TrainState};
use scribseg::Error;

use crate::args::{EvalArgs, InferArgs, Overrides, ServeArgs, SynthArgs, TrainArgs, VizArgs};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn require(path: &Path, what: &str) -> scribseg::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} {} does not exist", path.display())))
    }
}

fn build_backbone(config: &WorkbenchConfig) -> scribseg::Result<Backbone> {
    ProviderRegistry::default().build(&config.backbone.spec, config.backbone.weights.as_deref())
}

fn load_image(path: &Path, config: &WorkbenchConfig) -> scribseg::Result<ImagePlane> {
    require(path, "image")?;
    Ok(ImagePlane::load(path)?.with_spacing(config.spacing_um))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `out` with `suffix` appended to the file name, keeping any extension.
fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

/// Image/label pairs of a data directory, sorted by stem.
fn pairs(data: &Path) -> scribseg::Result<Vec<(PathBuf, PathBuf)>> {
    let images = data.join("images");
    require(&images, "image directory")?;
    let mut out = Vec::new();
    for entry in fs::read_dir(&images)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let label = data.join("labels").join(format!("{stem}.png"));
        if !label.exists() {
            return Err(Error::Input(format!(
                "no label for {}: expected {}",
                path.display(),
                label.display()
            )));
        }
        out.push((path, label));
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no images in {}", images.display())));
    }
    out.sort();
    Ok(out)
}

/// Class table of a data directory: `classes.json` if present, otherwise one
/// default class per label value up to the largest one seen.
fn data_classes(data: &Path, labels: &[LabelMask]) -> scribseg::Result<ClassTable> {
    let path = data.join("classes.json");
    if path.exists() {
        return ClassTable::load_json(&path);
    }
    Ok(ClassTable::default_for(class_count(labels)))
}

fn class_count(labels: &[LabelMask]) -> usize {
    let max = labels
        .iter()
        .flat_map(|l| l.classes_present())
        .max()
        .map_or(0, |m| m as usize);
    (max + 1).max(2)
}

pub fn train(config: &WorkbenchConfig, a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let backbone = build_backbone(config)?;
    let pairs = pairs(&a.data)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (image_path, label_path) in &pairs {
        let image = load_image(image_path, config)?;
        let label = LabelMask::load_png(label_path)?;
        if (label.width(), label.height()) != (image.width(), image.height()) {
            return Err(Error::Input(format!(
                "{} is {}x{} but {} is {}x{}",
                label_path.display(),
                label.width(),
                label.height(),
                image_path.display(),
                image.width(),
                image.height()
            ))
            .into());
        }
        images.push(image);
        labels.push(label);
    }
    let classes = data_classes(&a.data, &labels)?;
    let union = labels.iter().flat_map(|l| l.classes_present()).filter(|&c| c != IGNORE);
    let labeled: std::collections::BTreeSet<u8> = union.collect();
    if let Some(&bad) = labeled.iter().find(|&&c| c as usize >= classes.len()) {
        return Err(Error::Input(format!("label value {bad} has no class; {} classes defined", classes.len())).into());
    }
    if labeled.len() < 2 {
        return Err(Error::Supervision("labels must cover at least two classes".into()).into());
    }

    let roi = config.train.roi_size;
    let mut examples = Vec::new();
    for (image, label) in images.iter().zip(&labels) {
        let batch = if a.scribbles {
            ScribbleMask::new(label.clone(), config.spacing_um).validate(image, classes.len())?;
            scribble_examples(&backbone, image, label, roi)?
        } else {
            dense_examples(&backbone, image, label, roi)?
        };
        examples.extend(batch);
    }
    tracing::info!(images = pairs.len(), windows = examples.len(), "encoded training windows");

    let mut model = SegmentationModel::new(
        backbone.spec(),
        config.fusion.clone(),
        DecoderConfig { num_classes: classes.len(), ..config.decoder.clone() },
    )?;
    model.check_lightweight()?;
    let mut state = TrainState::new(config.train.seed);
    let epochs = config.train.epochs_full;
    let trace = if epochs == 0 {
        Vec::new()
    } else {
        fit(&mut model, &examples, &config.train, &config.loss, epochs, &mut state, |e| {
            tracing::info!(epoch = e.epoch, loss = e.loss, "epoch");
        })?
    };

    ensure_parent(&a.out)?;
    let ckpt = Checkpoint {
        backbone: backbone.spec().clone(),
        model,
        loss: config.loss.clone(),
        train: config.train.clone(),
        state,
        classes: Some(classes),
    };
    ckpt.save(&a.out)?;
    let mut csv = String::from("epoch,loss\n");
    for e in &trace {
        csv.push_str(&format!("{},{}\n", e.epoch, e.loss));
    }
    write_atomic(&with_suffix(&a.out, ".loss.csv"), csv.as_bytes())?;
    println!(
        "trained {epochs} epochs on {} windows in {:.1}s; final loss {}",
        examples.len(),
        started.elapsed().as_secs_f64(),
        trace.last().map_or("n/a".to_string(), |e| format!("{:.6}", e.loss))
    );
    Ok(())
}

pub fn infer(config: &WorkbenchConfig, overrides: &Overrides, a: &InferArgs) -> Result<()> {
    require(&a.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&a.checkpoint, None)?;
    if let Some(p) = &overrides.provider {
        if *p != ckpt.backbone.provider_id {
            return Err(Error::BackboneMismatch {
                found: ckpt.backbone.provider_id.clone(),
                expected: p.clone(),
            }
            .into());
        }
    }
    let weights = (ckpt.backbone.provider_id == config.backbone.spec.provider_id)
        .then_some(config.backbone.weights.as_deref())
        .flatten();
    let backbone = ProviderRegistry::default().build(&ckpt.backbone, weights)?;
    // verifies the parameter digest against the live backbone
    let ckpt = Checkpoint::load(&a.checkpoint, Some(backbone.spec()))?;
    let image = load_image(&a.image, config)?;
    let layout = TileLayout::new(image.width(), image.height(), config.tile.tile_size, config.tile.overlap)?;
    println!("tiles {}", layout.len());

    let started = Instant::now();
    let prob = segment(&image, &backbone, &ckpt.model, &config.tile)?;
    let classes = ckpt
        .classes
        .clone()
        .unwrap_or_else(|| ClassTable::default_for(ckpt.model.num_classes()));
    let mask = argmax_mask(&prob);
    let mask_path = with_suffix(&a.out, ".png");
    let tiff_path = with_suffix(&a.out, ".tiff");
    ensure_parent(&mask_path)?;
    save_mask(&mask, &classes, &mask_path)?;
    save_probability_tiff(&prob, &tiff_path)?;
    println!(
        "wrote {}, {} and {} in {:.1}s",
        mask_path.display(),
        sidecar_path(&mask_path).display(),
        tiff_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn eval(config: &WorkbenchConfig, a: &EvalArgs) -> Result<()> {
    require(&a.pred, "prediction")?;
    require(&a.gt, "reference")?;
    let pred = LabelMask::load_png(&a.pred)?;
    let gt = LabelMask::load_png(&a.gt)?;
    let sidecar = sidecar_path(&a.pred);
    let classes = match &a.classes {
        Some(p) => {
            require(p, "class table")?;
            ClassTable::load_json(p)?
        }
        None if sidecar.exists() => ClassTable::load_json(&sidecar)?,
        None => ClassTable::default_for(class_count(&[pred.clone(), gt.clone()])),
    };
    let report = evaluate(&pred, &gt, &classes, config.spacing_um)?;
    ensure_parent(&a.out)?;
    report.save(&a.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn viz(config: &WorkbenchConfig, a: &VizArgs) -> Result<()> {
    let backbone = build_backbone(config)?;
    let taps = &backbone.spec().tap_layers;
    let layers = if a.layers.is_empty() { taps.clone() } else { a.layers.clone() };
    if let Some(bad) = layers.iter().find(|l| !taps.contains(l)) {
        return Err(Error::Input(format!("layer {bad} is not a tap layer; available: {taps:?}")).into());
    }
    let image = load_image(&a.image, config)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for layer in layers {
        let (rgb, degenerate) = pca_rgb_image(&backbone, &image, layer, !a.no_upsample)?;
        if degenerate {
            tracing::warn!(layer, "features have fewer than three varying directions");
        }
        let path = a.out_dir.join(format!("layer_{layer}.png"));
        rgb.save_png(&path)?;
        if a.montage {
            montage(&image, &rgb)?.save_png(&a.out_dir.join(format!("layer_{layer}_montage.png")))?;
        }
        println!("{}", path.display());
    }
    Ok(())
}

pub fn serve(config: WorkbenchConfig, a: &ServeArgs) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        scribseg_service::serve(listener, &a.data_dir, config, shutdown)
            .await
            .context("service stopped")
    })
}

pub fn synth(config: &WorkbenchConfig, a: &SynthArgs) -> Result<()> {
    let base = if a.classes == 4 { SceneConfig::four_class() } else { SceneConfig::default() };
    // strokes and their boundary margin shrink with the canvas
    let scale = |v: usize| (v * a.size / base.size).max(4);
    let scene = generate(&SceneConfig {
        size: a.size,
        num_classes: a.classes,
        seed: config.train.seed,
        stroke_length: scale(base.stroke_length),
        margin: scale(base.margin),
        ..base
    })?;
    if scene.scribbles.labeled_count() == 0 {
        tracing::warn!("no stroke fitted inside a region; scribbles are empty");
    }
    for sub in ["images", "labels", "scribbles"] {
        fs::create_dir_all(a.out_dir.join(sub))?;
    }
    // scene intensities are in [0, 1]
    let scaled = scene.image.data().iter().map(|v| v * 255.0).collect();
    ImagePlane::from_gray(scene.image.width(), scene.image.height(), scaled)?
        .save_png8(&a.out_dir.join("images/scene.png"))?;
    scene.truth.save_gray_png(&a.out_dir.join("labels/scene.png"))?;
    scene.scribbles.save_gray_png(&a.out_dir.join("scribbles/scene.png"))?;
    scene.classes.save_json(&a.out_dir.join("classes.json"))?;
    println!(
        "wrote {} ({}x{}, {} classes, {:.2}% scribbled)",
        a.out_dir.display(),
        a.size,
        a.size,
        a.classes,
        100.0 * scene.scribble_fraction()
    );
    Ok(())
}
