//! Train-and-measure runs shared by the command line and the acceptance suite.

use std::time::Instant;

use boxprompt_core::config::{ModelConfig, TrainConfig};
use boxprompt_core::geometry::BBox;
use boxprompt_core::pipeline::loss::LossBundle;
use boxprompt_core::pipeline::train::{fit, loss_and_gradients, train_step, Sgd};
use boxprompt_core::pipeline::Model;
use boxprompt_core::synthlab::{evaluate_masks, generate_scene, ApReport, GeneratorProfile, Scene};
use boxprompt_core::{Error, Result};
use serde::Serialize;

/// Seeds of one corpus: training scenes count up from `seed * 100_000`, validation
/// scenes from 50_000 above that, so corpora of different seeds never share a scene.
pub fn corpus(profile: &GeneratorProfile, size: usize, train: usize, val: usize, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let base = seed * 100_000;
    let t = (0..train as u64).map(|i| generate_scene(profile, size, base + i)).collect::<Result<_>>()?;
    let v = (0..val as u64).map(|i| generate_scene(profile, size, base + 50_000 + i)).collect::<Result<_>>()?;
    Ok((t, v))
}

/// Fresh model trained on `scenes`.
pub fn train_fresh(model: &ModelConfig, train: &TrainConfig, scenes: &[Scene], seed: u64) -> Result<(Model, Vec<LossBundle>)> {
    let mut m = Model::init(model.clone(), seed)?;
    let history = fit(&mut m, scenes, train, seed, |_, _| {})?;
    Ok((m, history))
}

/// AP of the automatic path: the model's own proposals as prompts.
pub fn evaluate_automatic(model: &Model, scenes: &[Scene]) -> Result<ApReport> {
    let preds = scenes.iter().map(|s| model.segment(&s.image)).collect::<Result<Vec<_>>>()?;
    evaluate_masks(&preds, scenes)
}

/// AP with every ground-truth box given as a manual prompt.
pub fn evaluate_prompted(model: &Model, scenes: &[Scene]) -> Result<ApReport> {
    let preds = scenes
        .iter()
        .map(|s| {
            let feats = model.encode(&s.image)?;
            let boxes: Vec<BBox> = s.instances.iter().map(|i| i.bbox).collect();
            model.promptable_segment(&feats, &boxes)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(&preds, scenes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSettings {
    pub profile: String,
    pub size: usize,
    pub train: usize,
    pub val: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            profile: "ssdd-like".into(),
            size: 64,
            train: 200,
            val: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub variant: String,
    pub mask_ap: f64,
    pub mask_ap50: f64,
    pub mask_ap75: f64,
    pub bbox_ap: f64,
    pub train_seconds: f64,
}

fn run_row(seed: u64, variant: &str, report: &ApReport, seconds: f64) -> RunRow {
    RunRow {
        seed,
        variant: variant.to_string(),
        mask_ap: report.mask.ap,
        mask_ap50: report.mask.ap50,
        mask_ap75: report.mask.ap75,
        bbox_ap: report.bbox.ap,
        train_seconds: seconds,
    }
}

/// Trains `variants` on the corpus of every seed and evaluates each on its validation
/// split. `on_row` sees rows as they finish.
pub fn compare_variants(
    variants: &[(&str, ModelConfig)],
    train: &TrainConfig,
    data: &CorpusSettings,
    seeds: &[u64],
    mut on_row: impl FnMut(&RunRow),
) -> Result<Vec<RunRow>> {
    let profile = GeneratorProfile::by_name(&data.profile)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let (tr, va) = corpus(&profile, data.size, data.train, data.val, seed)?;
        for (name, cfg) in variants {
            let t = Instant::now();
            let (model, _) = train_fresh(cfg, train, &tr, seed)?;
            let seconds = t.elapsed().as_secs_f64();
            let row = run_row(seed, name, &evaluate_automatic(&model, &va)?, seconds);
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Full model against the same model with prompt encoders and area loss removed.
pub fn ablation(
    full: &ModelConfig,
    train: &TrainConfig,
    data: &CorpusSettings,
    seeds: &[u64],
    on_row: impl FnMut(&RunRow),
) -> Result<Vec<RunRow>> {
    compare_variants(&[("baseline", full.baseline()), ("full", full.clone())], train, data, seeds, on_row)
}

/// Mean of `full` minus `baseline` mask AP over the seeds present in `rows`.
pub fn mean_gain(rows: &[RunRow]) -> Option<f64> {
    let ap = |variant: &str, seed: u64| rows.iter().find(|r| r.variant == variant && r.seed == seed).map(|r| r.mask_ap);
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let gains: Vec<f64> = seeds
        .iter()
        .filter_map(|&s| Some(ap("full", s)? - ap("baseline", s)?))
        .collect();
    (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
}

/// Crop side values of the sweep.
pub const SPS_VALUES: [usize; 5] = [7, 14, 21, 28, 35];

/// `base` with crop side `s_ps`. Patch size and stride scale with the crop (2/7 and
/// 1/7 of it), keeping the 6x6 token grid the default 28-pixel crop has.
pub fn with_crop_side(base: &ModelConfig, s_ps: usize) -> Result<ModelConfig> {
    if s_ps == 0 || s_ps % 7 != 0 {
        return Err(Error::InvalidConfig(format!("crop side {s_ps} is not a positive multiple of 7")));
    }
    let mut cfg = base.clone();
    cfg.lpm.roi_size = s_ps;
    cfg.lpm.patch_size = 2 * s_ps / 7;
    cfg.lpm.stride = s_ps / 7;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub s_ps: usize,
    pub seed: u64,
    pub mask_ap: f64,
    pub mask_ap50: f64,
    pub mask_ap75: f64,
    pub bbox_ap: f64,
    pub train_seconds: f64,
}

/// Mask AP of the full model at each crop side.
pub fn crop_side_sweep(
    base: &ModelConfig,
    train: &TrainConfig,
    data: &CorpusSettings,
    values: &[usize],
    seed: u64,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    let configs = values.iter().map(|&s| Ok((s, with_crop_side(base, s)?))).collect::<Result<Vec<_>>>()?;
    let profile = GeneratorProfile::by_name(&data.profile)?;
    let (tr, va) = corpus(&profile, data.size, data.train, data.val, seed)?;
    let mut out = Vec::new();
    for (s, cfg) in configs {
        let t = Instant::now();
        let (model, _) = train_fresh(&cfg, train, &tr, seed)?;
        let seconds = t.elapsed().as_secs_f64();
        let r = evaluate_automatic(&model, &va)?;
        let p = SweepPoint {
            s_ps: s,
            seed,
            mask_ap: r.mask.ap,
            mask_ap50: r.mask.ap50,
            mask_ap75: r.mask.ap75,
            bbox_ap: r.bbox.ap,
            train_seconds: seconds,
        };
        on_point(&p);
        out.push(p);
    }
    Ok(out)
}

/// Rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitReport {
    pub steps: usize,
    /// Loss of the first step, before any update.
    pub first_loss: f64,
    /// Loss of the trained model on the first step's prompt draw.
    pub final_loss: f64,
    /// Loss the last step reported, on its own prompt draw.
    pub last_step_loss: f64,
    /// Smallest mask IoU over instances with the ground-truth box as prompt.
    pub gt_prompt_iou: f64,
    /// Smallest IoU between the gt-prompted mask and the best-overlapping automatic
    /// detection's mask; `None` when some instance has no automatic detection.
    pub automatic_agreement: Option<f64>,
    pub seconds: f64,
}

impl OverfitReport {
    pub fn reduction(&self) -> f64 {
        self.first_loss / self.final_loss
    }
}

/// Trains a fresh model on `scene` alone, one step per prompt draw seed `seed + i`.
pub fn overfit(scene: &Scene, model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<OverfitReport> {
    let t = Instant::now();
    let mut m = Model::init(model.clone(), seed)?;
    let mut opt = Sgd::new(train);
    let mut history = Vec::with_capacity(train.steps);
    for i in 0..train.steps as u64 {
        history.push(train_step(&mut m, scene, &mut opt, train, seed + i)?);
    }
    let first = history.first().ok_or_else(|| Error::InvalidConfig("overfit needs at least one step".into()))?;
    let (again, _) = loss_and_gradients(&m, scene, train, seed)?;
    let seconds = t.elapsed().as_secs_f64();

    let (w, h) = (scene.width(), scene.height());
    let feats = m.encode(&scene.image)?;
    let boxes: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();
    let prompted = m.promptable_segment(&feats, &boxes)?;
    let automatic = m.segment_features(&feats)?;
    let mut gt_iou = f64::INFINITY;
    let mut agreement = Some(f64::INFINITY);
    for (inst, r) in scene.instances.iter().zip(&prompted) {
        let mask = r.full_mask(w, h);
        gt_iou = gt_iou.min(mask.iou(&inst.mask));
        let best = automatic
            .iter()
            .map(|a| a.full_mask(w, h))
            .max_by(|a, b| a.iou(&inst.mask).total_cmp(&b.iou(&inst.mask)));
        agreement = match (agreement, best) {
            (Some(acc), Some(a)) => Some(acc.min(a.iou(&mask))),
            _ => None,
        };
    }
    Ok(OverfitReport {
        steps: train.steps,
        first_loss: first.l_total,
        final_loss: again.l_total,
        last_step_loss: history.last().expect("non-empty").l_total,
        gt_prompt_iou: gt_iou,
        automatic_agreement: agreement,
        seconds,
    })
}
