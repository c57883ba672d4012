//! Command dispatch: each subcommand runs one experiment and writes its
//! reports to the output directory.
//!
//! Every command emits a `<command>.manifest.txt` recording the resolved
//! configuration; the manifest is the only output that carries a timestamp,
//! so report files are byte-identical across reruns with the same
//! configuration. A command succeeds only if all of its outputs were
//! written and its embedded assertions held; failures surface as a single
//! one-line error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::detector::model::{Model, ModelSpec};
use crate::detector::predict::{NMS_IOU, SCORE_THRESH};
use crate::detector::metrics::AP_IOU;
use crate::experiments::data::{gen_dataset, load_dataset, write_dataset, IMAGE_PX, NUM_CLASSES};
use crate::experiments::evaluate::evaluate;
use crate::experiments::shift::{shift_experiment, ShiftFixture};
use crate::experiments::sweep::{ablation, cells_tsv, runs_tsv, scale_sweep, SWEEP_SCALES};
use crate::experiments::train::train;
use crate::experiments::ExperimentError;
use crate::pyramid::cost::{module_totals, total_macs, total_params};
use crate::pyramid::store::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::tensor::gradcheck::{grad_check_many, DEFAULT_EPS};
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::rng::Rng;
use crate::tensor::{Shape4, Tensor4, TensorError};

/// The subcommands the binary exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    ShiftReport,
    Train,
    Eval,
    Sweep,
    Ablation,
    Flops,
    GradCheck,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::ShiftReport => "shift-report",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Ablation => "ablation",
            Command::Flops => "flops",
            Command::GradCheck => "grad-check",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        source: CheckpointError,
    },
    #[error("cannot write {path}: {source}")]
    WriteFailed {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    ReadFailed {
        path: String,
        source: std::io::Error,
    },
    /// An embedded assertion failed: outputs are on disk, but the run does
    /// not count as a success.
    #[error("{0}")]
    Failed(String),
}

/// What a successful command produced: a human-readable summary for stdout
/// and the files it wrote.
#[derive(Debug)]
pub struct CommandOutput {
    pub stdout: String,
    pub files: Vec<PathBuf>,
}

/// Runs `command` under the resolved configuration. Reports land in the
/// configured output directory, which is created if needed.
pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let out_dir = PathBuf::from(cfg.text("out.dir"));
    std::fs::create_dir_all(&out_dir).map_err(|source| CliError::WriteFailed {
        path: out_dir.display().to_string(),
        source,
    })?;

    let mut files = Vec::new();
    let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string();
    write_file(
        &out_dir,
        &format!("{}.manifest.txt", command.name()),
        &cfg.manifest(command.name(), &stamp),
        &mut files,
    )?;

    let stdout = match command {
        Command::GenData => cmd_gen_data(cfg, &out_dir, &mut files)?,
        Command::ShiftReport => cmd_shift_report(cfg, &out_dir, &mut files)?,
        Command::Train => cmd_train(cfg, &out_dir, &mut files)?,
        Command::Eval => cmd_eval(cfg, &out_dir, &mut files)?,
        Command::Sweep => cmd_sweep(cfg, &out_dir, &mut files)?,
        Command::Ablation => cmd_ablation(cfg, &out_dir, &mut files)?,
        Command::Flops => cmd_flops(cfg, &out_dir, &mut files)?,
        Command::GradCheck => cmd_grad_check(&out_dir, &mut files)?,
        Command::Selftest => cmd_selftest(&out_dir, &mut files)?,
    };
    Ok(CommandOutput { stdout, files })
}

fn write_file(
    dir: &Path,
    name: &str,
    body: &str,
    files: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|source| CliError::WriteFailed {
        path: path.display().to_string(),
        source,
    })?;
    files.push(path);
    Ok(())
}

/// Formats with 9 significant digits in plain decimal notation.
fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

fn model_for(cfg: &RunConfig) -> Result<ModelSpec, CliError> {
    ModelSpec::standard(
        cfg.count("pyramid.num_scales"),
        cfg.variant("pyramid.variant"),
        IMAGE_PX,
        NUM_CLASSES,
    )
    .map_err(|e| CliError::Experiment(e.into()))
}

fn cmd_gen_data(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let n = cfg.count("data.count");
    let seed = cfg.seed("data.seed");
    let tag = cfg.text("data.tag");
    let samples = gen_dataset(n, seed, tag);
    let dir = out_dir.join("dataset");
    write_dataset(&dir, &samples)?;
    files.push(dir.clone());
    Ok(format!(
        "wrote {n} images (seed {seed}, tag {tag}) to {}\n",
        dir.display()
    ))
}

fn cmd_shift_report(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let report = shift_experiment(cfg.seed("shift.seed"), cfg.count("shift.trials"))?;

    let mut tsv = String::from("metric\tvalue\n");
    let fixture_rows = [
        ("pooled", &report.fixture.pooled),
        ("pooled_shifted", &report.fixture.pooled_shifted),
        ("fused_average", &report.fixture.fused_average),
    ];
    for (name, values) in fixture_rows {
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(tsv, "{name}.{i}\t{v}");
        }
    }
    for op in &report.operators {
        let _ = writeln!(tsv, "{}.mean_l2\t{}", op.operator, op.mean_l2);
        let _ = writeln!(tsv, "{}.max_l2\t{}", op.operator, op.max_l2);
    }
    let _ = writeln!(tsv, "trials\t{}", report.n_trials);
    let _ = writeln!(tsv, "seed\t{}", report.seed);
    write_file(out_dir, "shift_report.tsv", &tsv, files)?;

    if report.fixture != known_fixture() {
        return Err(CliError::Failed(format!(
            "shift worked example drifted from its exact values: {:?}",
            report.fixture
        )));
    }
    let pool = &report.operators[0];
    let avg = &report.operators[1];
    if avg.mean_l2 >= pool.mean_l2 {
        return Err(CliError::Failed(format!(
            "shift study direction failed: average-weight fusion mean L2 {} \
             is not below max-pool mean L2 {}",
            avg.mean_l2, pool.mean_l2
        )));
    }
    Ok(format!(
        "max-pool flips under a one-column shift (mean L2 {:.4} over {} grids); \
         average-weight fusion drifts less ({:.4})\n",
        pool.mean_l2, report.n_trials, avg.mean_l2
    ))
}

/// The worked example's exact expected values.
fn known_fixture() -> ShiftFixture {
    ShiftFixture {
        pooled: [0.0, 1.0, 0.0, 1.0],
        pooled_shifted: [1.0, 1.0, 1.0, 1.0],
        fused_average: [1.0 / 3.0, 1.0, 1.0 / 3.0, 1.0],
    }
}

fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let dataset = gen_dataset(
        cfg.count("train.images"),
        cfg.seed("data.seed"),
        cfg.text("data.tag"),
    );
    let tc = cfg.train_config();
    let spec = model_for(cfg)?;
    let mut model = Model::init(spec, tc.seed).map_err(ExperimentError::from)?;
    let log = train(&dataset, &tc, &mut model)?;

    let mut tsv = String::from("iteration\tloss\n");
    for (i, loss) in log.losses.iter().enumerate() {
        let _ = writeln!(tsv, "{i}\t{loss}");
    }
    write_file(out_dir, "train_loss.tsv", &tsv, files)?;
    write_file(out_dir, "checkpoint.txt", &write_checkpoint(&model.store), files)?;

    let first = log.losses.first().copied().unwrap_or(f64::NAN);
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} with {} scales for {} iterations on {} images: batch loss {:.3} -> {:.3}\n",
        tc.variant,
        tc.num_scales,
        tc.iterations,
        dataset.len(),
        first,
        last
    ))
}

fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let ckpt_path = cfg.require_text(
        "eval.checkpoint",
        "eval loads the model weights from it; train writes one as checkpoint.txt",
    )?;
    let text = std::fs::read_to_string(ckpt_path).map_err(|source| CliError::ReadFailed {
        path: ckpt_path.to_string(),
        source,
    })?;
    let store = read_checkpoint(&text).map_err(|source| CliError::Checkpoint {
        path: ckpt_path.to_string(),
        source,
    })?;
    let spec = model_for(cfg)?;
    let model = Model::from_store(spec, store).map_err(ExperimentError::from)?;

    let dataset_dir = cfg.text("eval.dataset");
    let samples = if dataset_dir.is_empty() {
        gen_dataset(cfg.count("eval.images"), cfg.seed("data.seed"), "test")
    } else {
        load_dataset(Path::new(dataset_dir))?
    };

    let out = evaluate(&model, &samples, SCORE_THRESH, NMS_IOU, AP_IOU)?;

    let mut det_tsv = String::from("image_id\tclass_id\tscore\tcx\tcy\tw\th\n");
    let mut n_dets = 0usize;
    for (image_id, dets) in out.detections.iter().enumerate() {
        for d in dets {
            n_dets += 1;
            let _ = writeln!(
                det_tsv,
                "{image_id}\t{}\t{}\t{}\t{}\t{}\t{}",
                d.class_id,
                sig9(d.score),
                sig9(d.bbox.cx),
                sig9(d.bbox.cy),
                sig9(d.bbox.w),
                sig9(d.bbox.h)
            );
        }
    }
    write_file(out_dir, "detections.tsv", &det_tsv, files)?;

    let mut met_tsv = String::from("metric\tvalue\n");
    for class in &out.summary.per_class {
        let _ = writeln!(met_tsv, "ap.class_{}\t{}", class.class_id, class.ap);
        let _ = writeln!(met_tsv, "gts.class_{}\t{}", class.class_id, class.num_gts);
    }
    let _ = writeln!(met_tsv, "map\t{}", out.summary.map);
    for (name, ap) in ["ap.small", "ap.medium", "ap.large"]
        .iter()
        .zip(out.size_aps)
    {
        match ap {
            Some(v) => {
                let _ = writeln!(met_tsv, "{name}\t{v}");
            }
            None => {
                let _ = writeln!(met_tsv, "{name}\t-");
            }
        }
    }
    write_file(out_dir, "metrics.tsv", &met_tsv, files)?;

    Ok(format!(
        "evaluated {} images: mAP {:.4}, {} detections kept\n",
        samples.len(),
        out.summary.map,
        n_dets
    ))
}

fn study_datasets(cfg: &RunConfig) -> (Vec<crate::experiments::data::Sample>, Vec<crate::experiments::data::Sample>) {
    let seed = cfg.seed("data.seed");
    (
        gen_dataset(cfg.count("study.train_images"), seed, "train"),
        gen_dataset(cfg.count("study.test_images"), seed, "test"),
    )
}

fn cmd_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let (train_ds, test_ds) = study_datasets(cfg);
    let settings = cfg.study_settings();
    let report = scale_sweep(&train_ds, &test_ds, &SWEEP_SCALES, &settings)?;

    write_file(out_dir, "sweep_runs.tsv", &runs_tsv(&report.runs), files)?;
    write_file(out_dir, "sweep_cells.tsv", &cells_tsv(&report.cells), files)?;
    let flags = format!(
        "flag\tvalue\nresidual_trend_ok\t{}\nmacs_increase\t{}\n",
        report.residual_trend_ok, report.macs_increase
    );
    write_file(out_dir, "sweep_flags.tsv", &flags, files)?;

    if !report.residual_trend_ok || !report.macs_increase {
        return Err(CliError::Failed(format!(
            "sweep direction check failed: residual_trend_ok={}, macs_increase={} \
             (details in sweep_cells.tsv)",
            report.residual_trend_ok, report.macs_increase
        )));
    }
    Ok(format!(
        "swept {} runs over scales {:?}: residual trend holds, compute grows with depth\n",
        report.runs.len(),
        SWEEP_SCALES
    ))
}

fn cmd_ablation(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let (train_ds, test_ds) = study_datasets(cfg);
    let settings = cfg.study_settings();
    let num_scales = cfg.count("pyramid.num_scales");
    let report = ablation(&train_ds, &test_ds, num_scales, &settings)?;

    write_file(out_dir, "ablation_runs.tsv", &runs_tsv(&report.runs), files)?;
    write_file(out_dir, "ablation_cells.tsv", &cells_tsv(&report.rows), files)?;
    let flags = format!(
        "flag\tvalue\nboth_minus_plain\t{}\n",
        report.both_minus_plain
    );
    write_file(out_dir, "ablation_flags.tsv", &flags, files)?;

    Ok(format!(
        "ablation over {} runs at {} scales: full variant minus plain baseline = {:+.4} median mAP\n",
        report.runs.len(),
        num_scales,
        report.both_minus_plain
    ))
}

fn cmd_flops(
    cfg: &RunConfig,
    out_dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let variant = cfg.variant("pyramid.variant");
    let mut rows = Vec::new();
    let mut modules_tsv = String::from("num_scales\tmodule\tparams\tmacs\n");
    for s in 2..=5 {
        let spec = ModelSpec::standard(s, variant, IMAGE_PX, NUM_CLASSES)
            .map_err(ExperimentError::from)?;
        let plan = spec.full_plan().map_err(ExperimentError::from)?;
        rows.push((s, total_params(&plan), total_macs(&plan)));
        for m in module_totals(&plan) {
            let _ = writeln!(modules_tsv, "{s}\t{}\t{}\t{}", m.module, m.params, m.macs);
        }
    }

    let mut tsv = String::from("num_scales\tparams\tmacs\n");
    for (s, params, macs) in &rows {
        let _ = writeln!(tsv, "{s}\t{params}\t{macs}");
    }
    write_file(out_dir, "flops.tsv", &tsv, files)?;
    write_file(out_dir, "flops_modules.tsv", &modules_tsv, files)?;

    if !rows.windows(2).all(|w| w[0].2 < w[1].2) {
        return Err(CliError::Failed(format!(
            "compute must grow strictly with the scale count, got MACs {:?}",
            rows.iter().map(|r| r.2).collect::<Vec<_>>()
        )));
    }
    Ok(format!(
        "{variant}: MACs grow strictly over scale counts 2..=5 ({} to {})\n",
        rows.first().map(|r| r.2).unwrap_or(0),
        rows.last().map(|r| r.2).unwrap_or(0)
    ))
}

/// Deterministic test tensor with entries in `(-1, -0.05] ∪ [0.05, 1)`:
/// away from the kinks of max-pooling argmax ties and the leaky-ReLU hinge,
/// so central differences stay on one linear piece.
fn seeded_off_kink(shape: Shape4, seed: u64) -> Tensor4 {
    let mut rng = Rng::seeded(seed);
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        let mag = rng.uniform(0.05, 1.0);
        *v = if rng.below(2) == 0 { mag } else { -mag };
    }
    t
}

struct GradRow {
    op: &'static str,
    worst: f64,
    threshold: f64,
}

fn grad_rows() -> Result<Vec<GradRow>, TensorError> {
    type Build = Box<dyn Fn(&mut Graph, &[VarId]) -> Result<VarId, TensorError>>;
    let x = |seed| seeded_off_kink(Shape4::new(1, 2, 4, 4), seed);
    const LINEAR: f64 = 1e-10;
    const CONV: f64 = 1e-6;
    const BLOCK: f64 = 1e-5;

    let conv_inputs = |k: usize, seed: u64| {
        vec![
            seeded_off_kink(Shape4::new(1, 2, 4, 4), seed),
            seeded_off_kink(Shape4::new(3, 2, k, k), seed + 1),
            seeded_off_kink(Shape4::new(1, 1, 1, 3), seed + 2),
        ]
    };
    let cases: Vec<(&'static str, Vec<Tensor4>, f64, Build)> = vec![
        (
            "add",
            vec![x(1), x(2)],
            LINEAR,
            Box::new(|g, ids| g.add(ids[0], ids[1])),
        ),
        (
            "concat-channels",
            vec![x(3), seeded_off_kink(Shape4::new(1, 3, 4, 4), 4)],
            LINEAR,
            Box::new(|g, ids| g.concat_channels(ids)),
        ),
        (
            "upsample-nearest2",
            vec![seeded_off_kink(Shape4::new(1, 2, 3, 3), 5)],
            LINEAR,
            Box::new(|g, ids| Ok(g.upsample_nearest2(ids[0]))),
        ),
        (
            "space-to-depth2",
            vec![x(6)],
            LINEAR,
            Box::new(|g, ids| g.space_to_depth2(ids[0])),
        ),
        (
            "depth-to-space2",
            vec![seeded_off_kink(Shape4::new(1, 8, 2, 2), 7)],
            LINEAR,
            Box::new(|g, ids| g.depth_to_space2(ids[0])),
        ),
        (
            "space-to-depth-width2",
            vec![seeded_off_kink(Shape4::new(1, 2, 3, 4), 8)],
            LINEAR,
            Box::new(|g, ids| g.space_to_depth_w2(ids[0])),
        ),
        (
            "maxpool2",
            vec![x(9)],
            CONV,
            Box::new(|g, ids| g.maxpool2(ids[0])),
        ),
        (
            "leaky-relu",
            vec![x(10)],
            CONV,
            Box::new(|g, ids| g.leaky_relu(ids[0], 0.1)),
        ),
        (
            "conv2d-1x1",
            conv_inputs(1, 11),
            CONV,
            Box::new(|g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 0)),
        ),
        (
            "conv2d-3x3",
            conv_inputs(3, 14),
            CONV,
            Box::new(|g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 1)),
        ),
        (
            "fusion-block",
            vec![
                seeded_off_kink(Shape4::new(1, 2, 4, 4), 17),
                seeded_off_kink(Shape4::new(2, 2, 3, 3), 18),
                seeded_off_kink(Shape4::new(1, 1, 1, 2), 19),
            ],
            BLOCK,
            Box::new(|g, ids| {
                let conv = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                let act = g.leaky_relu(conv, 0.1)?;
                let pooled = g.maxpool2(act)?;
                let up = g.upsample_nearest2(pooled);
                g.add(up, ids[0])
            }),
        ),
    ];

    let mut rows = Vec::with_capacity(cases.len());
    for (op, inputs, threshold, build) in cases {
        let mut worst = 0.0f64;
        for check in 0..inputs.len() {
            worst = worst.max(grad_check_many(&inputs, check, DEFAULT_EPS, &build)?);
        }
        rows.push(GradRow {
            op,
            worst,
            threshold,
        });
    }
    Ok(rows)
}

fn cmd_grad_check(out_dir: &Path, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let rows = grad_rows().map_err(ExperimentError::from)?;

    let mut tsv = String::from("op\tmax_rel_error\tthreshold\tstatus\n");
    let mut failures = Vec::new();
    let mut worst_overall = 0.0f64;
    for row in &rows {
        let pass = row.worst < row.threshold;
        if !pass {
            failures.push(row.op);
        }
        worst_overall = worst_overall.max(row.worst);
        let _ = writeln!(
            tsv,
            "{}\t{:e}\t{:e}\t{}",
            row.op,
            row.worst,
            row.threshold,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    write_file(out_dir, "grad_check.tsv", &tsv, files)?;

    if !failures.is_empty() {
        return Err(CliError::Failed(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )));
    }
    Ok(format!(
        "{} gradient checks PASS against central differences (worst relative error {:.2e})\n",
        rows.len(),
        worst_overall
    ))
}

fn cmd_selftest(out_dir: &Path, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let mut lines = Vec::new();
    let mut failures = 0usize;
    let mut record = |name: &str, ok: bool, detail: String| {
        if !ok {
            failures += 1;
        }
        lines.push(format!(
            "{} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        ));
    };

    let fixture = crate::experiments::shift::classic_fixture()?;
    let expected = known_fixture();
    record(
        "pool-shift-flip",
        fixture.pooled == expected.pooled && fixture.pooled_shifted == expected.pooled_shifted,
        format!(
            "max-pool of the alternating block gives {:?}; one-column shift gives {:?}",
            fixture.pooled, fixture.pooled_shifted
        ),
    );

    let fusion_ok = fixture
        .fused_average
        .iter()
        .zip(expected.fused_average)
        .all(|(got, want)| (got - want).abs() <= 1e-12);
    record(
        "average-fusion-weights",
        fusion_ok,
        format!(
            "average-weight fusion of the split sub-patches gives {:?} (want [1/3, 1, 1/3, 1])",
            fixture.fused_average
        ),
    );

    record("residual-skip-identity", residual_identity_holds()?, {
        "a zero-weight residual branch leaves the skip input bit-identical".to_string()
    });

    record("space-depth-roundtrip", space_depth_roundtrip_holds()?, {
        "depth-to-space inverts space-to-depth bit-exactly".to_string()
    });

    let mut body = lines.join("\n");
    body.push('\n');
    write_file(out_dir, "selftest.txt", &body, files)?;

    if failures > 0 {
        return Err(CliError::Failed(format!(
            "selftest: {failures} of {} fixtures failed",
            lines.len()
        )));
    }
    Ok(body)
}

/// With an all-zero convolution in the residual branch, the fused output
/// must equal the skip input exactly (the activation maps 0 to 0 and the
/// sum adds 0).
fn residual_identity_holds() -> Result<bool, ExperimentError> {
    let x = seeded_off_kink(Shape4::new(2, 3, 8, 8), 23);
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let w = g.leaf(Tensor4::zeros(Shape4::new(3, 3, 3, 3)));
    let b = g.leaf(Tensor4::zeros(Shape4::new(1, 1, 1, 3)));
    let conv = g.conv2d(xid, w, b, 1, 1)?;
    let act = g.leaky_relu(conv, 0.1)?;
    let out = g.add(act, xid)?;
    Ok(g.value(out).data() == x.data())
}

fn space_depth_roundtrip_holds() -> Result<bool, ExperimentError> {
    let x = seeded_off_kink(Shape4::new(2, 3, 6, 10), 29);
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let packed = g.space_to_depth2(xid)?;
    let restored = g.depth_to_space2(packed)?;
    let out = g.value(restored);
    Ok(out.shape() == x.shape() && out.data() == x.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::load_dataset;

    fn cfg_with(dir: &Path, sets: &[&str]) -> RunConfig {
        let mut cfg = RunConfig::defaults();
        cfg.apply_override(&format!("out.dir={}", dir.display()), 1)
            .unwrap();
        for (i, s) in sets.iter().enumerate() {
            cfg.apply_override(s, i + 2).unwrap();
        }
        cfg
    }

    #[test]
    fn selftest_passes_and_reports_every_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let out = dispatch(Command::Selftest, &cfg_with(dir.path(), &[])).unwrap();
        assert_eq!(out.stdout.matches("PASS").count(), 4);
        assert!(!out.stdout.contains("FAIL"));
        let report = std::fs::read_to_string(dir.path().join("selftest.txt")).unwrap();
        assert_eq!(report, out.stdout);
        assert!(dir.path().join("selftest.manifest.txt").exists());
    }

    #[test]
    fn gen_data_writes_a_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), &["data.count=3", "data.seed=7"]);
        let out = dispatch(Command::GenData, &cfg).unwrap();
        assert!(out.stdout.contains("wrote 3 images"));
        let loaded = load_dataset(&dir.path().join("dataset")).unwrap();
        assert_eq!(loaded.len(), 3);
    }

    #[test]
    fn shift_report_contains_the_exact_worked_example_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), &["shift.trials=40"]);
        dispatch(Command::ShiftReport, &cfg).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("shift_report.tsv")).unwrap();
        for row in [
            "pooled.0\t0",
            "pooled.1\t1",
            "pooled.2\t0",
            "pooled.3\t1",
            "pooled_shifted.0\t1",
            "pooled_shifted.3\t1",
            "fused_average.0\t0.3333333333333333",
            "fused_average.1\t1",
        ] {
            assert!(tsv.contains(row), "missing row {row:?} in:\n{tsv}");
        }
        assert!(tsv.contains("maxpool2.mean_l2\t"));
        assert!(tsv.contains("bfm-average.max_l2\t"));
    }

    #[test]
    fn flops_rows_grow_strictly_and_list_modules() {
        let dir = tempfile::tempdir().unwrap();
        dispatch(Command::Flops, &cfg_with(dir.path(), &[])).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("flops.tsv")).unwrap();
        let rows: Vec<(u64, u64)> = tsv
            .lines()
            .skip(1)
            .map(|l| {
                let mut it = l.split('\t').skip(1);
                let parse = |s: Option<&str>| s.unwrap().parse::<u64>().unwrap();
                (parse(it.next()), parse(it.next()))
            })
            .collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.windows(2).all(|w| w[0].0 < w[1].0), "params grow");
        assert!(rows.windows(2).all(|w| w[0].1 < w[1].1), "macs grow");
        let modules = std::fs::read_to_string(dir.path().join("flops_modules.tsv")).unwrap();
        assert!(modules.lines().count() > 4);
    }

    #[test]
    fn grad_check_passes_every_op() {
        let dir = tempfile::tempdir().unwrap();
        let out = dispatch(Command::GradCheck, &cfg_with(dir.path(), &[])).unwrap();
        assert!(out.stdout.contains("PASS"));
        let tsv = std::fs::read_to_string(dir.path().join("grad_check.tsv")).unwrap();
        assert!(!tsv.contains("FAIL"), "{tsv}");
        for op in ["conv2d-3x3", "maxpool2", "fusion-block", "add"] {
            assert!(tsv.contains(op), "missing {op} in:\n{tsv}");
        }
    }

    #[test]
    fn train_then_eval_roundtrips_through_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let train_sets = [
            "train.images=4",
            "train.iterations=2",
            "train.batch=2",
            "pyramid.num_scales=2",
            "pyramid.variant=plain-fpn",
        ];
        let out = dispatch(Command::Train, &cfg_with(dir.path(), &train_sets)).unwrap();
        assert!(out.stdout.contains("trained plain-fpn"));
        let loss_tsv = std::fs::read_to_string(dir.path().join("train_loss.tsv")).unwrap();
        assert_eq!(loss_tsv.lines().count(), 3, "header + 2 iterations");

        // Byte-identical reports on rerun; only the manifest may differ.
        let rerun = tempfile::tempdir().unwrap();
        dispatch(Command::Train, &cfg_with(rerun.path(), &train_sets)).unwrap();
        let loss_rerun = std::fs::read_to_string(rerun.path().join("train_loss.tsv")).unwrap();
        assert_eq!(loss_tsv, loss_rerun);
        let ckpt = std::fs::read_to_string(dir.path().join("checkpoint.txt")).unwrap();
        let ckpt_rerun = std::fs::read_to_string(rerun.path().join("checkpoint.txt")).unwrap();
        assert_eq!(ckpt, ckpt_rerun);

        let eval_sets = [
            format!("eval.checkpoint={}", dir.path().join("checkpoint.txt").display()),
            "eval.images=2".to_string(),
            "pyramid.num_scales=2".to_string(),
            "pyramid.variant=plain-fpn".to_string(),
        ];
        let eval_refs: Vec<&str> = eval_sets.iter().map(String::as_str).collect();
        let out = dispatch(Command::Eval, &cfg_with(dir.path(), &eval_refs)).unwrap();
        assert!(out.stdout.contains("evaluated 2 images"));
        let dets = std::fs::read_to_string(dir.path().join("detections.tsv")).unwrap();
        assert!(dets.starts_with("image_id\tclass_id\tscore\tcx\tcy\tw\th\n"));
        let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
        assert!(metrics.contains("\nmap\t"), "{metrics}");
    }

    #[test]
    fn eval_without_a_checkpoint_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let err = dispatch(Command::Eval, &cfg_with(dir.path(), &[])).unwrap_err();
        assert!(err.to_string().contains("eval.checkpoint"), "{err}");
    }

    #[test]
    fn wrong_architecture_for_a_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let train_sets = [
            "train.images=2",
            "train.iterations=1",
            "train.batch=2",
            "pyramid.num_scales=2",
            "pyramid.variant=plain-fpn",
        ];
        dispatch(Command::Train, &cfg_with(dir.path(), &train_sets)).unwrap();
        let eval_sets = [
            format!("eval.checkpoint={}", dir.path().join("checkpoint.txt").display()),
            "eval.images=1".to_string(),
            "pyramid.num_scales=3".to_string(),
        ];
        let eval_refs: Vec<&str> = eval_sets.iter().map(String::as_str).collect();
        assert!(dispatch(Command::Eval, &cfg_with(dir.path(), &eval_refs)).is_err());
    }

    #[test]
    fn tiny_ablation_writes_reports_and_the_margin_flag() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(
            dir.path(),
            &[
                "study.train_images=2",
                "study.test_images=2",
                "study.iterations=1",
                "study.seeds=1",
                "train.batch=2",
                "pyramid.num_scales=2",
            ],
        );
        let out = dispatch(Command::Ablation, &cfg).unwrap();
        assert!(out.stdout.contains("ablation over 4 runs"));
        let cells = std::fs::read_to_string(dir.path().join("ablation_cells.tsv")).unwrap();
        assert_eq!(cells.lines().count(), 5, "header + one row per variant");
        let flags = std::fs::read_to_string(dir.path().join("ablation_flags.tsv")).unwrap();
        assert!(flags.contains("both_minus_plain\t"), "{flags}");
    }

    #[test]
    fn tiny_sweep_exit_matches_its_flags_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(
            dir.path(),
            &[
                "study.train_images=2",
                "study.test_images=2",
                "study.iterations=1",
                "study.seeds=1",
                "train.batch=2",
            ],
        );
        let result = dispatch(Command::Sweep, &cfg);
        let flags = std::fs::read_to_string(dir.path().join("sweep_flags.tsv")).unwrap();
        assert!(flags.contains("macs_increase\ttrue"), "{flags}");
        let all_ok = flags.contains("residual_trend_ok\ttrue");
        assert_eq!(result.is_ok(), all_ok, "exit status must mirror the flags");
        let runs = std::fs::read_to_string(dir.path().join("sweep_runs.tsv")).unwrap();
        assert_eq!(runs.lines().count(), 9, "header + 2 variants x 4 scales");
    }

    #[test]
    fn nine_significant_digits_formatting() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(0.5), "0.500000000");
        assert_eq!(sig9(32.0), "32.0000000");
        assert_eq!(sig9(0.05123456789), "0.0512345679");
        assert_eq!(sig9(-3.25), "-3.25000000");
    }
}
