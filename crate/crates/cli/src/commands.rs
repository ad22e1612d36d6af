use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wsod_core::bbm::{self, BbmTrace, SizeWeightMode};
use wsod_core::data_io::{
    generate_dataset, load_bags, load_detections, load_gt, load_json, load_scores, save_bags, save_detections,
    save_gt, save_json, save_scores, Detection, ImageScores, ProposalBag, SyntheticSceneConfig,
};
use wsod_core::eval::{evaluate, ApMode};
use wsod_core::geometry::{nms as nms_boxes, Box, ScoredBox};
use wsod_core::mil_head::{assign_pseudo_labels, ProposalLabel};
use wsod_core::mtr::{fuse_supervision, MtrConfig, ScoreMatrix};
use wsod_core::refine::{self, train_continue, PipelineConfig, TrainState};

use crate::{
    ApModeArg, AssignArgs, CliError, EvalArgs, FuseArgs, InferArgs, MineArgs, NmsArgs, PipelineFlags, SimulateArgs,
    SizeWeight, TrainArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    load_json(path).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn pipeline_config(flags: &PipelineFlags) -> CliResult<PipelineConfig> {
    let mut cfg: PipelineConfig = match &flags.config {
        Some(p) => read_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = flags.gamma1 {
        cfg.bbm.gamma1 = v;
    }
    if let Some(v) = flags.gamma2 {
        cfg.gamma2 = v;
    }
    if let Some(v) = flags.q {
        cfg.bbm.q = v;
    }
    if let Some(v) = flags.delta {
        cfg.mtr_delta = v;
    }
    if let Some(v) = flags.k_stages {
        cfg.k_stages = v;
    }
    if let Some(v) = flags.nms_threshold {
        cfg.nms_threshold = v;
    }
    if let Some(v) = flags.size_weight {
        cfg.bbm.size_weight_mode = match v {
            SizeWeight::Uniform => SizeWeightMode::Uniform,
            SizeWeight::Area => SizeWeightMode::AreaProportional,
        };
    }
    if let Some(v) = flags.iou_ign {
        cfg.iou_ign = v.0;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn sorted_by_id(mut bags: Vec<ProposalBag>) -> Vec<ProposalBag> {
    bags.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    bags
}

fn scores_by_id(scores: Vec<ImageScores>, what: &Path) -> CliResult<BTreeMap<String, ScoreMatrix>> {
    let mut map = BTreeMap::new();
    for s in scores {
        if map.insert(s.id.clone(), s.scores).is_some() {
            return Err(CliError::Runtime(format!("{}: duplicate image id {:?}", what.display(), s.id)));
        }
    }
    Ok(map)
}

#[derive(Serialize)]
struct MinedBox {
    class: usize,
    #[serde(rename = "box")]
    bbox: Box,
    top_index: usize,
    top_box: Box,
    fell_back: bool,
}

#[derive(Serialize)]
struct MinedImage {
    id: String,
    mined: Vec<MinedBox>,
}

#[derive(Serialize)]
struct ClassTrace {
    class: usize,
    trace: BbmTrace,
}

#[derive(Serialize)]
struct TraceImage {
    id: String,
    classes: Vec<ClassTrace>,
}

#[derive(Serialize)]
struct Images<T> {
    images: Vec<T>,
}

pub fn mine(a: MineArgs) -> CliResult {
    let cfg = pipeline_config(&a.pipeline)?;
    cfg.bbm.validate().map_err(usage)?;
    let bags = sorted_by_id(load_bags(&a.bags)?);
    let scores = scores_by_id(load_scores(&a.scores)?, &a.scores)?;
    let mut mined = Vec::with_capacity(bags.len());
    let mut traces = Vec::with_capacity(bags.len());
    for bag in &bags {
        let s = scores
            .get(&bag.image_id)
            .ok_or_else(|| CliError::Runtime(format!("no scores for image {:?}", bag.image_id)))?;
        if s.num_proposals() != bag.len() || s.num_classes() < bag.labels.num_classes() {
            return Err(CliError::Runtime(format!(
                "image {:?}: score matrix is {} x {}, bag has {} classes and {} proposals",
                bag.image_id,
                s.num_classes(),
                s.num_proposals(),
                bag.labels.num_classes(),
                bag.len()
            )));
        }
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for c in bag.labels.positive_classes() {
            let t = bbm::mine(&s.row(c), &bag.boxes, &cfg.bbm)?;
            boxes.push(MinedBox {
                class: c,
                bbox: t.final_box,
                top_index: t.top_index,
                top_box: t.top_box,
                fell_back: t.fell_back,
            });
            classes.push(ClassTrace { class: c, trace: t });
        }
        mined.push(MinedImage {
            id: bag.image_id.clone(),
            mined: boxes,
        });
        traces.push(TraceImage {
            id: bag.image_id.clone(),
            classes,
        });
    }
    save_json(&a.out, &Images { images: mined })?;
    if let Some(p) = &a.trace {
        save_json(p, &Images { images: traces })?;
    }
    Ok(())
}

pub fn fuse(a: FuseArgs) -> CliResult {
    let mtr = MtrConfig {
        delta: a.delta,
        k_max: a.inputs.len() + 1,
    };
    mtr.validate().map_err(usage)?;
    let files = a
        .inputs
        .iter()
        .map(|p| scores_by_id(load_scores(p)?, p))
        .collect::<CliResult<Vec<_>>>()?;
    let ids: Vec<&String> = files[0].keys().collect();
    for (f, p) in files.iter().zip(&a.inputs).skip(1) {
        if f.keys().collect::<Vec<_>>() != ids {
            return Err(CliError::Runtime(format!(
                "{} does not cover the same images as {}",
                p.display(),
                a.inputs[0].display()
            )));
        }
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let history: Vec<ScoreMatrix> = files.iter().map(|f| f[id].clone()).collect();
        let fused = fuse_supervision(&history, &mtr).map_err(|e| CliError::Runtime(format!("image {id:?}: {e}")))?;
        out.push(ImageScores {
            id: id.clone(),
            scores: fused,
        });
    }
    save_scores(&a.out, &out)?;
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> CliResult {
    let mut cfg: SyntheticSceneConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SyntheticSceneConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.num_classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.max_objects {
        cfg.max_objects_per_class = v;
    }
    if let Some(v) = a.salient_fraction {
        cfg.salient_fraction = v;
    }
    if let Some(v) = a.salience_boost {
        cfg.salience_boost = v;
    }
    if let Some(v) = a.num_proposals {
        cfg.num_proposals = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    cfg.validate().map_err(usage)?;
    let (bags, gt) = generate_dataset(&cfg, a.count)?;
    save_bags(&a.out_bags, &bags)?;
    save_gt(&a.out_gt, &gt)?;
    Ok(())
}

pub fn train_toy(a: TrainArgs) -> CliResult {
    let mut cfg = pipeline_config(&a.pipeline)?;
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.no_bbm {
        cfg.use_bbm = false;
    }
    if a.no_mtr {
        cfg.use_mtr = false;
    }
    let bags = sorted_by_id(load_bags(&a.bags)?);
    let first = bags
        .first()
        .ok_or_else(|| CliError::Runtime(format!("{}: no images to train on", a.bags.display())))?;
    cfg.num_classes = first.labels.num_classes();
    cfg.encoder.dim = first.features()?.ncols();
    cfg.encoder.max_tokens = cfg.encoder.max_tokens.max(bags.iter().map(ProposalBag::len).max().unwrap_or(0));
    for b in &bags {
        if b.labels.num_classes() != cfg.num_classes || b.features()?.ncols() != cfg.encoder.dim {
            return Err(CliError::Runtime(format!(
                "image {:?}: class count or feature width differs from image {:?}",
                b.image_id, first.image_id
            )));
        }
    }
    cfg.validate().map_err(usage)?;

    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(wsod_core::Error::from)?)),
        None => None,
    };
    let mut log_err = None;
    let mut state = TrainState::new(&cfg)?;
    train_continue(&mut state, &bags, |r| {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(r).expect("loss record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(mut w) = log {
        if let Some(e) = log_err.take() {
            return Err(CliError::Runtime(format!("writing loss log: {e}")));
        }
        w.flush().map_err(wsod_core::Error::from)?;
    }
    state.save(&a.out)?;
    if let (Some(first), Some(last)) = (state.history.first(), state.history.last()) {
        eprintln!(
            "trained {} iterations: L_Total {:.4} -> {:.4}",
            state.iteration, first.l_total, last.l_total
        );
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> CliResult {
    let state = TrainState::load(&a.state)?;
    let mut cfg = state.config.clone();
    if let Some(t) = a.nms_threshold {
        cfg.nms_threshold = t;
    }
    let bags = sorted_by_id(load_bags(&a.bags)?);
    let mut dets = Vec::new();
    for bag in &bags {
        for d in refine::infer(bag, &state.params, &cfg)? {
            dets.push(Detection {
                image: bag.image_id.clone(),
                class: d.class_id,
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    save_detections(&a.out, &dets)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let dets = load_detections(&a.detections)?;
    let gt = load_gt(&a.gt)?;
    let num_classes = a.num_classes.unwrap_or_else(|| {
        dets.iter()
            .map(|d| d.class + 1)
            .max()
            .unwrap_or(0)
            .max(gt.num_classes())
    });
    let mode = match a.mode {
        ApModeArg::Voc07 => ApMode::Voc07ElevenPoint,
        ApModeArg::Area => ApMode::Area,
    };
    let report = evaluate(&dets, &gt, num_classes, a.iou, mode)?;
    print!("{}", report.to_table(a.class_names.as_deref()));
    if let Some(p) = &a.out {
        save_json(p, &report)?;
    }
    Ok(())
}

pub fn nms(a: NmsArgs) -> CliResult {
    let dets = load_detections(&a.detections)?;
    let mut by_image: BTreeMap<&str, Vec<ScoredBox>> = BTreeMap::new();
    for d in &dets {
        let s = ScoredBox::new(d.bbox, d.score, d.class)
            .map_err(|e| CliError::Runtime(format!("image {:?}: {e}", d.image)))?;
        by_image.entry(d.image.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(dets.len());
    for (image, boxes) in by_image {
        for s in nms_boxes(&boxes, a.nms_threshold)? {
            out.push(Detection {
                image: image.to_string(),
                class: s.class_id,
                bbox: s.bbox,
                score: s.score,
            });
        }
    }
    save_detections(&a.out, &out)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupEntry {
    class: usize,
    #[serde(rename = "box")]
    bbox: Box,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupImage {
    id: String,
    boxes: Vec<SupEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupFile {
    images: Vec<SupImage>,
}

#[derive(Serialize)]
struct LabeledImage {
    id: String,
    labels: Vec<ProposalLabel>,
}

pub fn assign(a: AssignArgs) -> CliResult {
    let cfg = pipeline_config(&a.pipeline)?;
    if !(0.0..=1.0).contains(&cfg.gamma2) || cfg.iou_ign.is_some_and(|t| !(0.0..=cfg.gamma2).contains(&t)) {
        return Err(usage(format!(
            "need 0 <= iou_ign <= gamma2 <= 1, got iou_ign {:?}, gamma2 {}",
            cfg.iou_ign, cfg.gamma2
        )));
    }
    let bags = sorted_by_id(load_bags(&a.bags)?);
    let sup: SupFile = load_json(&a.supervision)?;
    let mut by_id: BTreeMap<String, Vec<(usize, Box)>> = BTreeMap::new();
    for im in sup.images {
        by_id
            .entry(im.id)
            .or_default()
            .extend(im.boxes.into_iter().map(|e| (e.class, e.bbox)));
    }
    let mut out = Vec::with_capacity(bags.len());
    for bag in &bags {
        let entries = by_id.get(&bag.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let labels = assign_pseudo_labels(&bag.boxes, entries, bag.labels.num_classes(), cfg.gamma2, cfg.iou_ign)
            .map_err(|e| CliError::Runtime(format!("image {:?}: {e}", bag.image_id)))?;
        out.push(LabeledImage {
            id: bag.image_id.clone(),
            labels: labels.labels,
        });
    }
    save_json(&a.out, &Images { images: out })?;
    Ok(())
}
