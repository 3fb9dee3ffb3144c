use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use slr_core::fusion::{
    fuse_fixed, gem_train, parse_grid, sensitivity_sweep, FusionWeights, Gem, LogitMatrix,
};
use slr_core::graph::REDUCED_NODE_COUNT;
use slr_core::io::{
    import_jsonl, read_keypoints, write_atomic, write_keypoints, Checkpoint, FeatureFile,
    InputMode, LogitFile, Manifest, ManifestRow, ModelKind, ModelMeta, RunConfig, StreamFile,
};
use slr_core::keypoints::WHOLE_BODY_LANDMARKS;
use slr_core::numeric::{NdArray, ParamStore};
use slr_core::slgcn::Slgcn;
use slr_core::sstcn::{render_features, Sstcn, FEATURE_JOINT_COUNT};
use slr_core::streams::{prepare_streams, StreamKind};
use slr_core::train::{
    evaluate, generate_synthetic, predict_logits, train_until, Classifier, Dataset,
    SyntheticGestureSpec, TrainState,
};
use slr_core::{Result, SlrError};

use crate::{FusionMode, Global, Mode, Model};

const INFER_BATCH: usize = 16;
/// Gaussian width, in feature cells, of rendered keypoint heatmaps.
const HEATMAP_SIGMA: f64 = 1.0;

fn kind_of(m: Model) -> ModelKind {
    match m {
        Model::Slgcn => ModelKind::Slgcn,
        Model::Sstcn => ModelKind::Sstcn,
        Model::Gem => ModelKind::Gem,
    }
}

/// Configuration file (or defaults) with the `--mode` override applied.
fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = g.mode {
        cfg.graph.mode = match m {
            Mode::TwoD => InputMode::TwoD,
            Mode::ThreeD => InputMode::ThreeD,
        };
        cfg.sl_gcn.in_channels = cfg.graph.mode.channels();
    }
    if cfg.sl_gcn.in_channels != cfg.graph.mode.channels() {
        return Err(SlrError::Config(format!(
            "[sl_gcn] in_channels = {} contradicts [graph] mode, which needs {}",
            cfg.sl_gcn.in_channels,
            cfg.graph.mode.channels()
        )));
    }
    Ok(cfg)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned())
}

/// Files as given; directories expand to their `.slrk` files in name order.
fn keypoint_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "slrk"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(SlrError::Input("no keypoint files found".into()));
    }
    Ok(out)
}

fn one<'a>(paths: &'a [PathBuf], what: &str) -> Result<&'a Path> {
    match paths {
        [p] => Ok(p),
        _ => Err(SlrError::Input(format!(
            "expected exactly one {what} file, got {}",
            paths.len()
        ))),
    }
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn append_report(out: &Path, lines: &[String]) -> Result<()> {
    let mut p = out.as_os_str().to_owned();
    p.push(".metrics.jsonl");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(PathBuf::from(p))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(SlrError::Config(format!(
            "label {bad} but the model has {classes} classes"
        )));
    }
    Ok(())
}

pub fn synth(
    g: &Global,
    out: &Path,
    classes: usize,
    samples: usize,
    frames: usize,
    noise: f64,
) -> Result<()> {
    let cfg = load_config(g)?;
    let spec = SyntheticGestureSpec {
        classes,
        samples_per_class: samples,
        frames,
        noise,
        depth: cfg.graph.mode.is_3d(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let data = generate_synthetic(&spec, &mut rng)?;
    fs::create_dir_all(out)?;
    for s in &data {
        let row = ManifestRow::new(s.id.clone(), Some(s.label), Some(s.signer.to_string()));
        write_keypoints(&out.join(format!("{}.slrk", s.id)), &s.sequence, Some(&row))?;
    }
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

pub fn import(
    input: &Path,
    out: &Path,
    frame_size: (f64, f64),
    id: Option<String>,
    label: Option<usize>,
    signer: Option<String>,
) -> Result<()> {
    let seq = import_jsonl(
        &fs::read_to_string(input)?,
        WHOLE_BODY_LANDMARKS,
        frame_size,
    )?;
    let row = ManifestRow::new(id.unwrap_or_else(|| stem(out)), label, signer);
    write_keypoints(out, &seq, Some(&row))?;
    eprintln!("imported {} frames", seq.frames());
    Ok(())
}

pub fn prepare(
    g: &Global,
    inputs: &[PathBuf],
    out: &Path,
    model: Model,
    augment: bool,
) -> Result<()> {
    let cfg = load_config(g)?;
    let files = keypoint_inputs(inputs)?;
    let three_d = cfg.graph.mode.is_3d();
    let mut rows = Vec::with_capacity(files.len());
    let mut streams: Vec<Vec<f64>> = vec![Vec::new(); StreamKind::ALL.len()];
    let mut sample_shape = Vec::new();
    let mut features = Vec::new();
    if model == Model::Sstcn && cfg.sstcn.joints != FEATURE_JOINT_COUNT {
        return Err(SlrError::Config(format!(
            "[sstcn] joints = {} but rendered features have {FEATURE_JOINT_COUNT}",
            cfg.sstcn.joints
        )));
    }
    for (i, path) in files.iter().enumerate() {
        let (seq, row) = read_keypoints(path)?;
        rows.push(row.unwrap_or_else(|| ManifestRow::new(stem(path), None, None)));
        match model {
            Model::Slgcn => {
                let mut rng =
                    augment.then(|| ChaCha8Rng::seed_from_u64(g.seed.wrapping_add(i as u64)));
                let set = prepare_streams(&seq, &cfg.streams, three_d, rng.as_mut())?;
                for (buf, s) in streams.iter_mut().zip(set.iter()) {
                    buf.extend_from_slice(s.data.data());
                }
                sample_shape = set.joint.data.shape().to_vec();
            }
            Model::Sstcn => {
                let f = render_features(&seq, cfg.sstcn.frames, cfg.sstcn.size, HEATMAP_SIGMA)?;
                features.extend_from_slice(f.data());
                sample_shape = f.shape().to_vec();
            }
            Model::Gem => {
                return Err(SlrError::Config(
                    "GEM consumes logit files, not keypoints".into(),
                ))
            }
        }
    }
    let manifest = Manifest::new(rows)?;
    let mut shape = vec![files.len()];
    shape.extend_from_slice(&sample_shape);
    fs::create_dir_all(out)?;
    if model == Model::Sstcn {
        let f = FeatureFile {
            data: NdArray::new(&shape, features)?,
            manifest,
        };
        f.write(&out.join("features.slrf"))?;
    } else {
        for (kind, data) in StreamKind::ALL.into_iter().zip(streams) {
            let f = StreamFile {
                kind,
                data: NdArray::new(&shape, data)?,
                manifest: manifest.clone(),
            };
            f.write(&out.join(format!("{}.slrt", kind.name())))?;
        }
    }
    eprintln!("prepared {} samples", files.len());
    Ok(())
}

fn check_stream_shape(data: &NdArray, cfg: &RunConfig) -> Result<()> {
    let s = data.shape();
    if s[1] != cfg.sl_gcn.in_channels || s[3] != REDUCED_NODE_COUNT {
        return Err(SlrError::Config(format!(
            "stream data {s:?} does not fit the model ({} channels, {REDUCED_NODE_COUNT} nodes)",
            cfg.sl_gcn.in_channels
        )));
    }
    Ok(())
}

fn check_feature_shape(data: &NdArray, cfg: &RunConfig) -> Result<()> {
    let c = &cfg.sstcn;
    if data.shape()[1..] != [c.frames, c.joints, c.size, c.size] {
        return Err(SlrError::Config(format!(
            "feature data {:?} does not fit [sstcn] ({} frames, {} joints, {}x{})",
            data.shape(),
            c.frames,
            c.joints,
            c.size,
            c.size
        )));
    }
    Ok(())
}

fn read_logit_files(paths: &[PathBuf]) -> Result<(Vec<LogitMatrix>, Option<Vec<usize>>)> {
    let files = paths
        .iter()
        .map(|p| LogitFile::read(p))
        .collect::<Result<Vec<_>>>()?;
    let labels = files[0].labels.clone();
    if let Some(l) = &labels {
        if files
            .iter()
            .any(|f| f.labels.as_ref().is_some_and(|o| o != l))
        {
            return Err(SlrError::Fusion("logit files disagree on labels".into()));
        }
    }
    Ok((files.into_iter().map(|f| f.logits).collect(), labels))
}

fn resume_state(
    resume: Option<&Path>,
    kind: ModelKind,
    same_model: impl Fn(&RunConfig) -> bool,
    store: &mut ParamStore,
    state: &mut TrainState,
) -> Result<()> {
    let Some(path) = resume else { return Ok(()) };
    let ck = Checkpoint::read(path)?;
    if ck.meta.kind != kind {
        return Err(SlrError::Config(format!(
            "checkpoint holds a {} model, not {}",
            ck.meta.kind.name(),
            kind.name()
        )));
    }
    if !same_model(&ck.config) {
        return Err(SlrError::Config(
            "checkpoint was trained with a different model configuration".into(),
        ));
    }
    store.load_from(&ck.params)?;
    state.step = ck.step;
    state.optimizer.set_velocities(ck.velocities);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit<M: Classifier>(
    model: &M,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &RunConfig,
    state: &mut TrainState,
    seed: u64,
    until: Option<usize>,
    lines: &mut Vec<String>,
) -> Result<()> {
    let stop = until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let report = train_until(model, store, data, &cfg.train, state, seed, stop, |log| {
        lines.push(json(log))
    })?;
    #[derive(Serialize)]
    struct Final<'a> {
        step: usize,
        train: &'a slr_core::train::Metrics,
    }
    lines.push(json(&Final {
        step: state.step,
        train: &report.train_metrics,
    }));
    eprintln!(
        "step {} train top-1 {:.4} top-5 {:.4}",
        state.step, report.train_metrics.top1, report.train_metrics.top5
    );
    Ok(())
}

pub fn train(
    g: &Global,
    model: Model,
    data: &[PathBuf],
    out: &Path,
    resume: Option<&Path>,
    until: Option<usize>,
) -> Result<()> {
    let cfg = load_config(g)?;
    let kind = kind_of(model);
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut store = ParamStore::new();
    let mut state = TrainState::new(&cfg.train);
    let mut lines = Vec::new();
    let needs_labels = || SlrError::Input("training data needs labels in its manifest".into());
    let meta = match model {
        Model::Slgcn => {
            let f = StreamFile::read(one(data, "stream")?)?;
            check_stream_shape(&f.data, &cfg)?;
            let labels = f.manifest.labels().ok_or_else(needs_labels)?;
            check_labels(&labels, cfg.sl_gcn.classes)?;
            let net = Slgcn::for_reduced_graph(&cfg.sl_gcn, &mut store, &mut rng)?;
            resume_state(
                resume,
                kind,
                |c| c.sl_gcn == cfg.sl_gcn,
                &mut store,
                &mut state,
            )?;
            fit(
                &net,
                &mut store,
                &Dataset::new(f.data, labels)?,
                &cfg,
                &mut state,
                g.seed,
                until,
                &mut lines,
            )?;
            ModelMeta {
                kind,
                classes: cfg.sl_gcn.classes,
                stream: Some(f.kind),
                modalities: Vec::new(),
            }
        }
        Model::Sstcn => {
            let f = FeatureFile::read(one(data, "feature")?)?;
            check_feature_shape(&f.data, &cfg)?;
            let labels = f.manifest.labels().ok_or_else(needs_labels)?;
            check_labels(&labels, cfg.sstcn.classes)?;
            let net = Sstcn::new(&cfg.sstcn, &mut store, &mut rng)?;
            resume_state(
                resume,
                kind,
                |c| c.sstcn == cfg.sstcn,
                &mut store,
                &mut state,
            )?;
            fit(
                &net,
                &mut store,
                &Dataset::new(f.data, labels)?,
                &cfg,
                &mut state,
                g.seed,
                until,
                &mut lines,
            )?;
            ModelMeta {
                kind,
                classes: cfg.sstcn.classes,
                stream: None,
                modalities: Vec::new(),
            }
        }
        Model::Gem => {
            let (mods, labels) = read_logit_files(data)?;
            let labels = labels.ok_or_else(needs_labels)?;
            let classes = mods[0].classes();
            let gem = Gem::new(&cfg.fusion.gem, classes, mods.len(), &mut store, &mut rng)?;
            resume_state(
                resume,
                kind,
                |c| c.fusion.gem == cfg.fusion.gem,
                &mut store,
                &mut state,
            )?;
            let report = gem_train(
                &gem,
                &mut store,
                &mods,
                &labels,
                &cfg.fusion.gem_train,
                g.seed,
                |e| lines.push(json(e)),
            )?;
            state.step += cfg.fusion.gem_train.epochs;
            state.optimizer.set_velocities(Vec::new());
            eprintln!(
                "best epoch {} held-out top-1 {:.4}",
                report.best_epoch, report.best_holdout_top1
            );
            ModelMeta {
                kind,
                classes,
                stream: None,
                modalities: mods.iter().map(|m| m.modality.clone()).collect(),
            }
        }
    };
    let ck = Checkpoint {
        meta,
        config: cfg,
        step: state.step,
        params: store,
        velocities: state.optimizer.velocities().to_vec(),
    };
    ck.write(out)?;
    append_report(out, &lines)
}

/// Rebuild a checkpointed GEM.
fn load_gem(ck: &Checkpoint, mods: &[LogitMatrix]) -> Result<(Gem, ParamStore)> {
    if ck.meta.kind != ModelKind::Gem {
        return Err(SlrError::Config(format!(
            "checkpoint holds a {} model, not gem",
            ck.meta.kind.name()
        )));
    }
    if mods.len() != ck.meta.modalities.len() || mods.iter().any(|m| m.classes() != ck.meta.classes)
    {
        return Err(SlrError::Config(format!(
            "GEM trained on {} modalities x {} classes",
            ck.meta.modalities.len(),
            ck.meta.classes
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gem = Gem::new(
        &ck.config.fusion.gem,
        ck.meta.classes,
        mods.len(),
        &mut store,
        &mut rng,
    )?;
    store.load_from(&ck.params)?;
    Ok((gem, store))
}

fn report_metrics(fused: &LogitMatrix, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        print_json(&evaluate(&fused.scores, l)?);
    }
    Ok(())
}

pub fn infer(model: &Path, data: &[PathBuf], out: &Path) -> Result<()> {
    let ck = Checkpoint::read(model)?;
    let cfg = &ck.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let (logits, labels) = match ck.meta.kind {
        ModelKind::Slgcn => {
            let f = StreamFile::read(one(data, "stream")?)?;
            check_stream_shape(&f.data, cfg)?;
            if let Some(trained) = ck.meta.stream {
                if trained != f.kind {
                    return Err(SlrError::Config(format!(
                        "checkpoint was trained on the {} stream, data is {}",
                        trained.name(),
                        f.kind.name()
                    )));
                }
            }
            let labels = f.manifest.labels();
            if let Some(l) = &labels {
                check_labels(l, ck.meta.classes)?;
            }
            let net = Slgcn::for_reduced_graph(&cfg.sl_gcn, &mut store, &mut rng)?;
            store.load_from(&ck.params)?;
            let scores = predict_logits(&net, &store, &f.data, INFER_BATCH)?;
            (
                LogitMatrix::new(f.kind.name(), f.manifest.ids(), scores)?,
                labels,
            )
        }
        ModelKind::Sstcn => {
            let f = FeatureFile::read(one(data, "feature")?)?;
            check_feature_shape(&f.data, cfg)?;
            let labels = f.manifest.labels();
            if let Some(l) = &labels {
                check_labels(l, ck.meta.classes)?;
            }
            let net = Sstcn::new(&cfg.sstcn, &mut store, &mut rng)?;
            store.load_from(&ck.params)?;
            let scores = predict_logits(&net, &store, &f.data, INFER_BATCH)?;
            (LogitMatrix::new("sstcn", f.manifest.ids(), scores)?, labels)
        }
        ModelKind::Gem => {
            let (mods, labels) = read_logit_files(data)?;
            let (gem, store) = load_gem(&ck, &mods)?;
            (gem.apply(&store, &mods)?.1, labels)
        }
    };
    report_metrics(&logits, labels.as_deref())?;
    LogitFile { logits, labels }.write(out)
}

pub fn fuse(
    g: &Global,
    data: &[PathBuf],
    out: &Path,
    mode: FusionMode,
    weights: Option<Vec<f64>>,
    model: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(g)?;
    let (mods, labels) = read_logit_files(data)?;
    let fused = match mode {
        FusionMode::Fixed => {
            let alpha = weights.unwrap_or_else(|| cfg.fusion.weights.clone());
            if alpha.len() != mods.len() {
                return Err(SlrError::Config(format!(
                    "{} fusion weights for {} logit files",
                    alpha.len(),
                    mods.len()
                )));
            }
            fuse_fixed(&mods, &FusionWeights::new(alpha)?)?
        }
        FusionMode::Gem => {
            let (gem, store) = match model {
                Some(p) => load_gem(&Checkpoint::read(p)?, &mods)?,
                None => {
                    let mut store = ParamStore::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
                    let gem = Gem::new(
                        &cfg.fusion.gem,
                        mods[0].classes(),
                        mods.len(),
                        &mut store,
                        &mut rng,
                    )?;
                    (gem, store)
                }
            };
            gem.apply(&store, &mods)?.1
        }
    };
    report_metrics(&fused, labels.as_deref())?;
    LogitFile {
        logits: fused,
        labels,
    }
    .write(out)
}

pub fn sweep(
    g: &Global,
    data: &[PathBuf],
    out: Option<&Path>,
    weights: Option<Vec<f64>>,
    grid: Option<String>,
) -> Result<()> {
    let cfg = load_config(g)?;
    let (mods, labels) = read_logit_files(data)?;
    let labels =
        labels.ok_or_else(|| SlrError::Input("the sweep needs labels in the manifests".into()))?;
    let base = FusionWeights::new(weights.unwrap_or_else(|| cfg.fusion.weights.clone()))?;
    let grid = parse_grid(grid.as_deref().unwrap_or(&cfg.fusion.grid))?;
    let table = sensitivity_sweep(&mods, &labels, &base, &grid)?;
    let names: Vec<String> = mods.iter().map(|m| m.modality.clone()).collect();
    let tsv = table.to_tsv(&names);
    match out {
        Some(p) => write_atomic(p, tsv.as_bytes()),
        None => {
            print!("{tsv}");
            Ok(())
        }
    }
}
