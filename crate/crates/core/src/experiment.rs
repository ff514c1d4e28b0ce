//! Runs driven by an [`ExperimentConfig`]: dataset generation, training,
//! evaluation, analysis, ablations and the complexity probe. Every output
//! file carries the config hash.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, ComplexityReport, DeviationReport};
use crate::checkpoint;
use crate::config::{AblationAxis, ExperimentConfig, Mode};
use crate::data::{generate_dataset, SyntheticDataset};
use crate::dscd::LossReport;
use crate::error::{MantisError, Result};
use crate::model::{ForwardOptions, Model, Tuning};
use crate::params::ParamStore;
use crate::saa::{self, ControllerKind, FusionKind, OperatorMask};
use crate::serialization::CurveKind;
use crate::ssm::{self, DiscreteOps};
use crate::train::{evaluate, prepare_all, EvalReport, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub config_hash: String,
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub train_accuracy: f64,
    pub control_sparsity: f64,
    pub degenerate_features: usize,
    pub test: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub tuning: Tuning,
    pub adapters: bool,
    pub epochs_completed: usize,
    pub trainable_params: usize,
    /// Adapter parameters summed over blocks.
    pub adapter_params: usize,
    pub final_eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub history: Vec<EpochRecord>,
    pub trainer: Trainer,
}

fn with_context(cfg: &ExperimentConfig, e: MantisError) -> MantisError {
    let ctx = format!("[config {} mode {:?}] ", &cfg.hash()[..12], cfg.mode);
    match e {
        MantisError::Validation(m) => MantisError::Validation(ctx + &m),
        MantisError::Argument(m) => MantisError::Argument(ctx + &m),
        MantisError::Config(m) => MantisError::Config(ctx + &m),
        MantisError::Numeric { location, detail } => MantisError::Numeric { location: ctx + &location, detail },
        MantisError::Internal(m) => MantisError::Internal(ctx + &m),
        MantisError::Format(m) => MantisError::Format(ctx + &m),
        other => other,
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<(Model, ParamStore)> {
    Model::new(cfg.model_config(), cfg.saa_settings(), cfg.train.tuning, cfg.train.seed)
}

fn adapter_total(model: &Model) -> usize {
    model.adapters.iter().map(|a| saa::count_parameters(&a.cfg)).sum()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MantisError::Internal(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn json_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("record serializes")
}

const CURVES_HEADER: &str =
    "epoch,lr,train_total,train_task,train_feat,train_pred,train_accuracy,control_sparsity,test_accuracy,test_feat_disc,test_pred_disc";

fn curves_row(r: &EpochRecord) -> String {
    let (acc, fd, pd) = r.test.map_or((String::new(), String::new(), String::new()), |t| {
        (t.accuracy.to_string(), t.feat_disc.to_string(), t.pred_disc.to_string())
    });
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch, r.lr, r.train.total, r.train.task, r.train.feat, r.train.pred, r.train_accuracy, r.control_sparsity, acc, fd, pd
    )
}

/// Train per the config. With `out`, writes `metrics.jsonl`, `curves.csv`,
/// `summary.json` and (if enabled) `checkpoint.bin`.
pub fn train(cfg: &ExperimentConfig, data: &SyntheticDataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let hash = cfg.hash();
    let (model, store) = build_model(cfg)?;
    let mut trainer = Trainer::new(model, store, cfg.train_config());
    let resumed = match &cfg.output.resume {
        Some(p) => {
            checkpoint::restore_trainer(&mut trainer, &checkpoint::load(p)?)?;
            true
        }
        None => false,
    };
    let test = prepare_all(&trainer.model, &trainer.store, &data.test)?;
    let mut sinks = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let open = |name: &str| -> Result<File> {
                let path = dir.join(name);
                Ok(if resumed && path.exists() {
                    OpenOptions::new().append(true).open(path)?
                } else {
                    File::create(path)?
                })
            };
            let metrics = BufWriter::new(open("metrics.jsonl")?);
            let fresh_curves = !(resumed && dir.join("curves.csv").exists());
            let mut curves = BufWriter::new(open("curves.csv")?);
            if fresh_curves {
                writeln!(curves, "# config_hash={hash}")?;
                writeln!(curves, "{CURVES_HEADER}")?;
            }
            Some((metrics, curves))
        }
        None => None,
    };
    let w = cfg.loss_weights();
    let total = cfg.train.epochs;
    let stop = cfg.train.stop_after.map_or(total, |s| s.min(total));
    let mut history = Vec::new();
    let mut last_eval = None;
    while trainer.epoch < stop {
        let st = trainer.run_epoch(&data.train, None)?;
        let due = (st.epoch + 1) % cfg.train.eval_every == 0 || st.epoch + 1 == stop;
        let test_eval = if due { Some(evaluate(&trainer.model, &trainer.store, &test, &w)?) } else { None };
        if test_eval.is_some() {
            last_eval = test_eval;
        }
        let rec = EpochRecord {
            config_hash: hash.clone(),
            epoch: st.epoch,
            lr: st.lr,
            train: st.loss,
            train_accuracy: st.accuracy,
            control_sparsity: st.control_sparsity,
            degenerate_features: st.degenerate_features,
            test: test_eval,
        };
        if let Some((m, c)) = sinks.as_mut() {
            writeln!(m, "{}", json_line(&rec))?;
            writeln!(c, "{}", curves_row(&rec))?;
        }
        history.push(rec);
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&trainer.model, &trainer.store, &test, &w)?,
    };
    let summary = RunSummary {
        config_hash: hash.clone(),
        mode: cfg.mode,
        tuning: cfg.train.tuning,
        adapters: !trainer.model.adapters.is_empty(),
        epochs_completed: trainer.epoch,
        trainable_params: trainer.store.trainable_count(),
        adapter_params: adapter_total(&trainer.model),
        final_eval,
    };
    if let (Some(dir), Some((mut m, mut c))) = (out, sinks) {
        m.flush()?;
        c.flush()?;
        write_json(&dir.join("summary.json"), &summary)?;
        if cfg.output.checkpoint {
            checkpoint::save_trainer(&dir.join("checkpoint.bin"), &trainer, serde_json::json!({ "config_hash": hash }))?;
        }
    }
    Ok(TrainOutcome { summary, history, trainer })
}

/// Evaluate the model from `output.resume` (or the untrained model) on the
/// test split.
pub fn eval(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<RunSummary> {
    let (model, mut store) = build_model(cfg)?;
    if let Some(p) = &cfg.output.resume {
        store.load_values(&checkpoint::load(p)?.store)?;
    }
    let test = prepare_all(&model, &store, &data.test)?;
    let final_eval = evaluate(&model, &store, &test, &cfg.loss_weights())?;
    Ok(RunSummary {
        config_hash: cfg.hash(),
        mode: cfg.mode,
        tuning: cfg.train.tuning,
        adapters: !model.adapters.is_empty(),
        epochs_completed: 0,
        trainable_params: store.trainable_count(),
        adapter_params: adapter_total(&model),
        final_eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAnalysis {
    pub block: usize,
    /// `‖scan(x) − W x‖∞` for the operators the block actually used.
    pub kernel_scan_error: f64,
    pub kernel_delta_max: f64,
    pub max_rank: usize,
    pub max_support: usize,
    pub rank_bound_holds: bool,
    pub deviation: DeviationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub adapter_params_per_block: usize,
    pub adapter_params_formula: usize,
    pub blocks: usize,
    pub samples: Vec<Vec<BlockAnalysis>>,
    pub all_pass: bool,
}

pub const KERNEL_TOL: f64 = 1e-9;

/// Transfer-matrix, rank and deviation checks on the first branch of a few
/// test clouds.
pub fn analyze(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<AnalysisReport> {
    let mut c = cfg.clone();
    c.train.tuning = Tuning::Mantis;
    c.saa.enabled = true;
    let (model, mut store) = build_model(&c)?;
    if let Some(p) = &cfg.output.resume {
        store.load_values(&checkpoint::load(p)?.store)?;
    }
    let mut samples = Vec::new();
    let mut all_pass = true;
    for cloud in data.test.iter().take(cfg.analyze.samples) {
        let s = model.prepare(&store, cloud)?;
        let fwd = model.forward(&store, &s, ForwardOptions::default())?;
        let mut per_block = Vec::new();
        for (l, cache) in fwd.blocks[0].iter().enumerate() {
            let bp = &model.blocks[l];
            let ap = &model.adapters[l];
            let bundles = cache.bundles(&store, bp);
            let controlled: Vec<DiscreteOps> = bundles.iter().map(|b| b.discrete.clone()).collect();
            let frozen: Vec<DiscreteOps> = bundles.iter().map(|b| b.frozen_discrete.clone()).collect();
            let tm = analysis::build_transfer_matrix(&controlled)?;
            let tm0 = analysis::build_transfer_matrix(&frozen)?;
            let (y_scan, h_adapted) = ssm::selective_scan(&cache.x, &controlled)?;
            let y_tm = tm.apply(&cache.x)?;
            let err = y_scan.data.iter().zip(&y_tm.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let mut u_masked = store.value(ap.u).to_vec();
            let r = ap.cfg.r;
            for (j, keep) in ap.cfg.modulate.entries(ap.cfg.n_state()).into_iter().enumerate() {
                if !keep {
                    u_masked[j * r..(j + 1) * r].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let controls: Vec<Vec<f64>> = bundles.iter().map(|b| b.control.clone()).collect();
            let kp = analysis::kernel_perturbation(&tm0, &tm, &controls, &u_masked, store.value(ap.v), ap.cfg.m)?;
            let (_, h_frozen) = ssm::selective_scan(&cache.x, &frozen)?;
            let dev = analysis::deviation_bound_check(&h_frozen, &h_adapted, &frozen, &controlled, &cache.x)?;
            let ok = err <= KERNEL_TOL && kp.rank_bound_holds() && dev.pass;
            all_pass &= ok;
            per_block.push(BlockAnalysis {
                block: l,
                kernel_scan_error: err,
                kernel_delta_max: kp.max_abs_delta,
                max_rank: kp.rank.iter().copied().max().unwrap_or(0),
                max_support: kp.support.iter().copied().max().unwrap_or(0),
                rank_bound_holds: kp.rank_bound_holds(),
                deviation: dev,
            });
        }
        samples.push(per_block);
    }
    let saa_cfg = model.adapters[0].cfg;
    let (alloc, formula) = analysis::parameter_report(c.model.d, c.model.state, &c.saa_settings().expect("adapters on"));
    debug_assert_eq!(alloc, saa::count_parameters(&saa_cfg));
    Ok(AnalysisReport {
        config_hash: cfg.hash(),
        adapter_params_per_block: alloc,
        adapter_params_formula: formula,
        blocks: model.blocks.len(),
        samples,
        all_pass: all_pass && alloc == formula,
    })
}

/// Forward-time scaling with random nonzero `U`, so the full modulation path
/// runs.
pub fn complexity(cfg: &ExperimentConfig) -> Result<ComplexityReport> {
    let mut c = cfg.clone();
    c.train.tuning = Tuning::Mantis;
    c.saa.enabled = true;
    let (model, mut store) = build_model(&c)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xC0_11E7);
    for a in &model.adapters {
        store.value_mut(a.u).iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    analysis::complexity_probe(&model, &store, &cfg.complexity.lengths, cfg.complexity.repeats, cfg.train.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    pub trainable_params: usize,
    /// `count_parameters` summed over blocks (0 without adapters).
    pub adapter_params: usize,
    pub test_accuracy: f64,
    pub feat_disc: f64,
    pub pred_disc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,trainable_params,adapter_params,test_accuracy,feat_disc,pred_disc,config_hash\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                r.label, r.trainable_params, r.adapter_params, r.test_accuracy, r.feat_disc, r.pred_disc, r.config_hash
            );
        }
        s
    }
}

/// The variants of one ablation axis, each a full config.
pub fn ablation_variants(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let mut base = base.clone();
    base.mode = Mode::Train;
    base.output.resume = None;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Curves => [
            (CurveKind::ZOrder, CurveKind::TransZOrder),
            (CurveKind::Hilbert, CurveKind::TransHilbert),
            (CurveKind::ZOrder, CurveKind::Hilbert),
            (CurveKind::Hilbert, CurveKind::TransZOrder),
            (CurveKind::Random(1), CurveKind::Random(2)),
        ]
        .into_iter()
        .map(|(a, b)| (format!("{a}+{b}"), with(&|c| c.model.curves = [a, b])))
        .collect(),
        AblationAxis::R => {
            [8, 16, 32, 64].into_iter().map(|r| (format!("r={r}"), with(&|c| c.saa.r = r))).collect()
        }
        AblationAxis::Controller => ControllerKind::ALL
            .into_iter()
            .map(|k| (k.label().to_string(), with(&|c| c.saa.controller = k)))
            .collect(),
        AblationAxis::Fusion => {
            FusionKind::ALL.into_iter().map(|k| (k.label().to_string(), with(&|c| c.saa.fusion = k))).collect()
        }
        AblationAxis::Modulate => ["A", "B", "C", "Delta", "B,C", "A,B,C", "A,B,C,Delta"]
            .into_iter()
            .map(|m| {
                let mask: OperatorMask = m.parse().expect("valid mask literal");
                (m.to_string(), with(&|c| c.saa.modulate = mask))
            })
            .collect(),
        AblationAxis::Components => {
            let mut rows = vec![("linear_probe".to_string(), with(&|c| c.train.tuning = Tuning::LinearProbe))];
            let grid = [
                (false, true, false),
                (false, false, true),
                (false, true, true),
                (true, false, false),
                (true, true, false),
                (true, false, true),
                (true, true, true),
            ];
            let onoff = |b: bool| if b { "on" } else { "off" };
            for (saa_on, feat, pred) in grid {
                let label = format!("saa={} feat={} pred={}", onoff(saa_on), onoff(feat), onoff(pred));
                let c = with(&|c| {
                    c.train.tuning = Tuning::Mantis;
                    c.saa.enabled = saa_on;
                    if !feat {
                        c.train.alpha = 0.0;
                    }
                    if !pred {
                        c.train.beta = 0.0;
                    }
                });
                rows.push((label, c));
            }
            rows
        }
    }
}

/// One training run per axis value, each in its own subdirectory of `out`.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis, out: Option<&Path>) -> Result<AblationTable> {
    let data = generate_dataset(&base.data_spec())?;
    let mut rows = Vec::new();
    for (i, (label, cfg)) in ablation_variants(base, axis).into_iter().enumerate() {
        cfg.validate()?;
        let dir = out.map(|d| d.join(format!("{i:02}")));
        let o = train(&cfg, &data, dir.as_deref()).map_err(|e| with_context(&cfg, e))?;
        rows.push(AblationRow {
            label,
            config_hash: o.summary.config_hash.clone(),
            trainable_params: o.summary.trainable_params,
            adapter_params: o.summary.adapter_params,
            test_accuracy: o.summary.final_eval.accuracy,
            feat_disc: o.summary.final_eval.feat_disc,
            pred_disc: o.summary.final_eval.pred_disc,
        });
    }
    Ok(AblationTable { axis, rows })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Report {
    Generate { config_hash: String, train: usize, test: usize, path: PathBuf },
    Train(RunSummary),
    Eval(RunSummary),
    Analyze(AnalysisReport),
    Ablate { config_hash: String, table: AblationTable },
    Complexity { config_hash: String, report: ComplexityReport },
}

#[derive(Serialize)]
struct DatasetLine<'a> {
    split: &'a str,
    label: Option<usize>,
    class: &'a str,
    points: &'a [[f64; 3]],
}

fn write_dataset(path: &Path, data: &SyntheticDataset) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for (split, set) in [("train", &data.train), ("test", &data.test)] {
        for c in set {
            let class = c.label.map_or("", |l| data.classes[l].name());
            writeln!(f, "{}", json_line(&DatasetLine { split, label: c.label, class, points: &c.points }))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Dispatch on `cfg.mode`, writing results under `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    run_inner(cfg).map_err(|e| with_context(cfg, e))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml()))?;
    let hash = cfg.hash();
    let report = match cfg.mode {
        Mode::Generate => {
            let data = generate_dataset(&cfg.data_spec())?;
            let path = dir.join("dataset.jsonl");
            write_dataset(&path, &data)?;
            Report::Generate { config_hash: hash, train: data.train.len(), test: data.test.len(), path }
        }
        Mode::Train => {
            let data = generate_dataset(&cfg.data_spec())?;
            Report::Train(train(cfg, &data, Some(&dir))?.summary)
        }
        Mode::Eval => {
            let data = generate_dataset(&cfg.data_spec())?;
            let s = eval(cfg, &data)?;
            write_json(&dir.join("eval.json"), &s)?;
            Report::Eval(s)
        }
        Mode::Analyze => {
            let data = generate_dataset(&cfg.data_spec())?;
            let a = analyze(cfg, &data)?;
            write_json(&dir.join("analysis.json"), &a)?;
            Report::Analyze(a)
        }
        Mode::Ablate => {
            let table = run_ablation(cfg, cfg.ablate.axis, Some(&dir))?;
            write_json(&dir.join("ablation.json"), &table)?;
            fs::write(dir.join("ablation.csv"), format!("# config_hash={hash}\n{}", table.to_csv()))?;
            Report::Ablate { config_hash: hash, table }
        }
        Mode::Complexity => {
            let report = complexity(cfg)?;
            write_json(&dir.join("complexity.json"), &report)?;
            Report::Complexity { config_hash: hash, report }
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_axis_layout() {
        let v = ablation_variants(&ExperimentConfig::default(), AblationAxis::Components);
        let labels: Vec<&str> = v.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(
            labels,
            [
                "linear_probe",
                "saa=off feat=on pred=off",
                "saa=off feat=off pred=on",
                "saa=off feat=on pred=on",
                "saa=on feat=off pred=off",
                "saa=on feat=on pred=off",
                "saa=on feat=off pred=on",
                "saa=on feat=on pred=on",
            ]
        );
        assert!(v[0].1.saa_settings().is_none());
        assert!(v[4].1.saa_settings().is_some() && v[4].1.train.alpha == 0.0 && v[4].1.train.beta == 0.0);
    }

    #[test]
    fn axes_enumerate_expected_values() {
        let base = ExperimentConfig::default();
        assert_eq!(ablation_variants(&base, AblationAxis::Curves).len(), 5);
        let r: Vec<usize> = ablation_variants(&base, AblationAxis::R).iter().map(|(_, c)| c.saa.r).collect();
        assert_eq!(r, [8, 16, 32, 64]);
        assert_eq!(ablation_variants(&base, AblationAxis::Controller).len(), ControllerKind::ALL.len());
        assert_eq!(ablation_variants(&base, AblationAxis::Fusion).len(), FusionKind::ALL.len());
        for (_, c) in ablation_variants(&base, AblationAxis::Modulate) {
            c.validate().unwrap();
        }
    }
}
