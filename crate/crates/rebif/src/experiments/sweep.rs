//! Multi-run studies: the scale-count sweep and the module A/B ablation.
//!
//! Both studies train fresh models under shared seeds and data, evaluate on
//! a held-out split, and reduce per-cell results to medians (detection
//! training at this scale is noisy; medians keep directional comparisons
//! meaningful). At a fixed run seed, layers with the same name receive the
//! same initial weights in every variant — the store seeds each layer by
//! name — so variants differ only by the modules under test.

use crate::detector::metrics::AP_IOU;
use crate::detector::model::{Model, ModelSpec};
use crate::detector::predict::{NMS_IOU, SCORE_THRESH};
use crate::pyramid::cost::{total_macs, total_params};
use crate::pyramid::Variant;

use super::data::Sample;
use super::evaluate::evaluate;
use super::train::{train, TrainConfig};
use super::ExperimentError;

/// Scale counts the sweep visits.
pub const SWEEP_SCALES: [usize; 4] = [2, 3, 4, 5];
/// Canvas size the studies assume.
const IMAGE_PX: usize = super::data::IMAGE_PX;
const NUM_CLASSES: usize = super::data::NUM_CLASSES;

/// Shared knobs for every run of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// One training run per seed; the same seeds recur in every cell.
    pub seeds: Vec<u64>,
}

impl StudySettings {
    /// The standard recipe with the given seeds (see
    /// [`TrainConfig::standard`] for how the step size was chosen).
    pub fn standard(iterations: usize, seeds: Vec<u64>) -> StudySettings {
        StudySettings {
            iterations,
            batch_size: 8,
            lr: 3e-4,
            momentum: 0.9,
            seeds,
        }
    }

    fn config(&self, variant: Variant, num_scales: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed,
            variant,
            num_scales,
        }
    }
}

/// One trained-and-evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub num_scales: usize,
    pub seed: u64,
    pub map: f64,
    pub size_aps: [Option<f64>; 3],
    pub params: u64,
    pub macs: u64,
}

/// Trains one model from scratch and evaluates it. The seed fixes both the
/// initial weights and the batch order.
pub fn run_one(
    train_ds: &[Sample],
    test_ds: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunResult, ExperimentError> {
    let spec = ModelSpec::standard(cfg.num_scales, cfg.variant, IMAGE_PX, NUM_CLASSES)?;
    let plan = spec.full_plan()?;
    let (params, macs) = (total_params(&plan), total_macs(&plan));
    let mut model = Model::init(spec, cfg.seed)?;
    train(train_ds, cfg, &mut model)?;
    let out = evaluate(&model, test_ds, SCORE_THRESH, NMS_IOU, AP_IOU)?;
    Ok(RunResult {
        variant: cfg.variant,
        num_scales: cfg.num_scales,
        seed: cfg.seed,
        map: out.summary.map,
        size_aps: out.size_aps,
        params,
        macs,
    })
}

/// Median of the values; `None` when empty. For even counts this is the
/// mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

fn median_opt(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    median(&present)
}

/// Aggregated cell of a study: one (variant, scale count) pair across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub variant: Variant,
    pub num_scales: usize,
    pub median_map: f64,
    pub median_size_aps: [Option<f64>; 3],
    pub params: u64,
    pub macs: u64,
}

fn summarize(runs: &[RunResult], variant: Variant, num_scales: usize) -> CellSummary {
    let cell: Vec<&RunResult> = runs
        .iter()
        .filter(|r| r.variant == variant && r.num_scales == num_scales)
        .collect();
    let maps: Vec<f64> = cell.iter().map(|r| r.map).collect();
    let bucket = |i: usize| median_opt(&cell.iter().map(|r| r.size_aps[i]).collect::<Vec<_>>());
    CellSummary {
        variant,
        num_scales,
        median_map: median(&maps).expect("cell has runs"),
        median_size_aps: [bucket(0), bucket(1), bucket(2)],
        params: cell[0].params,
        macs: cell[0].macs,
    }
}

/// Scale-count study over the plain pyramid and the full residual
/// bi-fusion variant.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// All runs, ordered by (variant, scale count, seed).
    pub runs: Vec<RunResult>,
    /// One row per (variant, scale count), in run order.
    pub cells: Vec<CellSummary>,
    /// Whether the residual variant's median mAP at S=4 stayed within 0.01
    /// of its S=2 median (the depth-robustness direction under test).
    pub residual_trend_ok: bool,
    /// Whether MACs strictly increase with the scale count per variant.
    pub macs_increase: bool,
}

/// Trains both variants at every scale count in `scales`, once per seed.
pub fn scale_sweep(
    train_ds: &[Sample],
    test_ds: &[Sample],
    scales: &[usize],
    settings: &StudySettings,
) -> Result<SweepReport, ExperimentError> {
    let variants = [Variant::PlainFpn, Variant::ReCoreBfm];
    let mut runs = Vec::with_capacity(variants.len() * scales.len() * settings.seeds.len());
    let mut cells = Vec::new();
    for &variant in &variants {
        for &s in scales {
            for &seed in &settings.seeds {
                runs.push(run_one(train_ds, test_ds, &settings.config(variant, s, seed))?);
            }
            cells.push(summarize(&runs, variant, s));
        }
    }

    let cell = |v: Variant, s: usize| cells.iter().find(|c| c.variant == v && c.num_scales == s);
    let residual_trend_ok = match (cell(Variant::ReCoreBfm, 4), cell(Variant::ReCoreBfm, 2)) {
        (Some(s4), Some(s2)) => s4.median_map >= s2.median_map - 0.01,
        _ => true,
    };
    let macs_increase = variants.iter().all(|&v| {
        let macs: Vec<u64> = cells
            .iter()
            .filter(|c| c.variant == v)
            .map(|c| c.macs)
            .collect();
        macs.windows(2).all(|w| w[0] < w[1])
    });
    Ok(SweepReport {
        runs,
        cells,
        residual_trend_ok,
        macs_increase,
    })
}

/// Module A/B study at a fixed scale count: every variant trained under the
/// same seeds and data order.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// All runs, ordered by (variant, seed) with variants in canonical
    /// report order.
    pub runs: Vec<RunResult>,
    /// One row per variant, in canonical order.
    pub rows: Vec<CellSummary>,
    /// Median mAP of the full variant minus the plain baseline.
    pub both_minus_plain: f64,
}

pub fn ablation(
    train_ds: &[Sample],
    test_ds: &[Sample],
    num_scales: usize,
    settings: &StudySettings,
) -> Result<AblationReport, ExperimentError> {
    let mut runs = Vec::with_capacity(Variant::ALL.len() * settings.seeds.len());
    let mut rows = Vec::new();
    for &variant in &Variant::ALL {
        for &seed in &settings.seeds {
            runs.push(run_one(
                train_ds,
                test_ds,
                &settings.config(variant, num_scales, seed),
            )?);
        }
        rows.push(summarize(&runs, variant, num_scales));
    }
    let row_map = |v: Variant| {
        rows.iter()
            .find(|r| r.variant == v)
            .map(|r| r.median_map)
            .expect("every variant has a row")
    };
    let both_minus_plain = row_map(Variant::ReCoreBfm) - row_map(Variant::PlainFpn);
    Ok(AblationReport {
        runs,
        rows,
        both_minus_plain,
    })
}

// ---------------------------------------------------------------------------
// TSV serialization. Reports contain no timestamps, so identical studies
// serialize to identical bytes.
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

pub fn runs_tsv(runs: &[RunResult]) -> String {
    let mut out = String::from("variant\tscales\tseed\tmap\tap_small\tap_medium\tap_large\tparams\tmacs\n");
    for r in runs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.num_scales,
            r.seed,
            r.map,
            fmt_opt(r.size_aps[0]),
            fmt_opt(r.size_aps[1]),
            fmt_opt(r.size_aps[2]),
            r.params,
            r.macs
        ));
    }
    out
}

pub fn cells_tsv(cells: &[CellSummary]) -> String {
    let mut out = String::from(
        "variant\tscales\tmedian_map\tap_small\tap_medium\tap_large\tparams\tmacs\n",
    );
    for c in cells {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
            c.variant,
            c.num_scales,
            c.median_map,
            fmt_opt(c.median_size_aps[0]),
            fmt_opt(c.median_size_aps[1]),
            fmt_opt(c.median_size_aps[2]),
            c.params,
            c.macs
        ));
    }
    out
}
