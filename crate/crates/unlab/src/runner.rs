//! Subcommand pipelines: deterministic worlds (dataset, splits, downstream
//! sets) derived from config + seed, checkpoint production for every
//! method, evaluation reports, and the parallel bench grid.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use unlab_core::data::{
    gen_blobs, select_forget_classes, split_by_classes, Dataset, SelectStrategy, SplitSpec, Splits,
};
use unlab_core::eval::{assemble_report, EvalReport};
use unlab_core::nn::{attach_ec_modules, fingerprint_filtered, ModelBundle, ModelDims};
use unlab_core::unlearn::{
    cu_baseline, ec_unlearn, finetune_baseline, gradient_ascent_baseline, objective_unlearn,
    plugin_augment, random_label_baseline, supcon_pretrain, train_original, FinalCuObjective,
    GradientAscentObjective, StepObjective, TrainLog, UnlearnLog, Variant,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{is_known_method, ExperimentConfig};
use crate::dataio::{load_dataset, save_dataset};
use crate::report::{
    write_report_csv, write_report_json, write_train_losses_csv, write_unlearn_losses_csv,
    ContextRow, ReportFile,
};
use crate::{RunError, RunResult};

/// Everything one seeded experiment instance sees.
pub struct World {
    pub train: Dataset,
    pub test: Dataset,
    pub downstream: Vec<(Dataset, Dataset)>,
    pub split: SplitSpec,
    pub splits: Splits,
    pub dims: ModelDims,
}

pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, out_override: Option<&Path>) -> Self {
        let root = cfg.run_root(out_override);
        Workspace { cfg, root }
    }

    pub fn method_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.root.join(label).join(seed.to_string())
    }

    fn checkpoint_path(&self, label: &str, seed: u64) -> PathBuf {
        self.method_dir(label, seed).join("checkpoint.ulck")
    }

    pub fn build_world(&self, seed: u64) -> RunResult<World> {
        let ds = &self.cfg.dataset;
        let (train, test) = match ds.kind.as_str() {
            "blobs" => gen_blobs(&ds.blob_spec(), seed)?,
            "file" => {
                let train = load_dataset(Path::new(ds.train_path.as_ref().unwrap()))?;
                let test = load_dataset(Path::new(ds.test_path.as_ref().unwrap()))?;
                (train, test)
            }
            other => return Err(RunError::Config(format!("unknown dataset kind {other:?}"))),
        };
        if !train.covers_all_classes() {
            return Err(RunError::Runtime(
                "training data does not cover every class".into(),
            ));
        }
        let down = &self.cfg.downstream;
        let mut downstream = Vec::with_capacity(down.count);
        for i in 0..down.count {
            let spec = unlab_core::data::BlobSpec {
                classes: down.classes,
                dim: train.dim(),
                n_per_class: down.n_per_class,
                sigma: down.sigma,
                mean_scale: down.mean_scale,
            };
            downstream.push(gen_blobs(&spec, seed.wrapping_add(down.seed_offset + i as u64))?);
        }
        let k = self.cfg.split.forget_count(train.classes);
        let split = match self.cfg.split.strategy.as_str() {
            "random" => select_forget_classes(&train, SelectStrategy::Random { k, seed })?,
            "top-similarity" => {
                let idx = self.cfg.split.similarity_downstream;
                let target = &downstream
                    .get(idx)
                    .ok_or_else(|| RunError::Config("downstream index out of range".into()))?
                    .0;
                select_forget_classes(&train, SelectStrategy::TopSimilarity { k, downstream: target })?
            }
            other => return Err(RunError::Config(format!("unknown split strategy {other:?}"))),
        };
        let splits = split_by_classes(&train, &test, &split)?;
        let dims = self.cfg.model.dims(train.dim(), train.classes);
        dims.validate()?;
        Ok(World { train, test, downstream, split, splits, dims })
    }

    fn stamp(&self, bundle: &mut ModelBundle, seed: u64) {
        bundle.meta.seed = seed;
        bundle.meta.config_hash = self.cfg.hash.clone();
    }

    /// Train f_o and persist it. With `reuse`, an existing checkpoint wins.
    pub fn run_train_original(&self, seed: u64, reuse: bool) -> RunResult<PathBuf> {
        let path = self.checkpoint_path("original", seed);
        if reuse && path.exists() {
            return Ok(path);
        }
        let world = self.build_world(seed)?;
        let sched = self.cfg.pretrain.schedule()?;
        let (mut bundle, log) = train_original(&world.dims, &world.train, &sched, seed)?;
        self.stamp(&mut bundle, seed);
        save_checkpoint(&bundle, &path)?;
        write_train_losses_csv(&log, &self.method_dir("original", seed).join("losses.csv"))?;
        Ok(path)
    }

    /// Train f_r on the retain split only.
    pub fn run_retrain(&self, seed: u64, reuse: bool) -> RunResult<PathBuf> {
        let path = self.checkpoint_path("retrained", seed);
        if reuse && path.exists() {
            return Ok(path);
        }
        let world = self.build_world(seed)?;
        let sched = self.cfg.pretrain.schedule()?;
        let (mut bundle, log) =
            unlab_core::unlearn::retrain_oracle(&world.dims, &world.splits.retain_train, &sched, seed)?;
        self.stamp(&mut bundle, seed);
        save_checkpoint(&bundle, &path)?;
        write_train_losses_csv(&log, &self.method_dir("retrained", seed).join("losses.csv"))?;
        Ok(path)
    }

    /// Attach EC modules to f_o and SupCon-pretrain their blocks. The
    /// backbone, final classifier, and aux heads must come out bit-frozen;
    /// a violated hash aborts with a check failure.
    pub fn run_pretrain_ec(&self, seed: u64, reuse: bool) -> RunResult<PathBuf> {
        let path = self.checkpoint_path("ec-pretrain", seed);
        if reuse && path.exists() {
            return Ok(path);
        }
        let original = load_checkpoint(&self.checkpoint_path("original", seed)).map_err(|e| {
            RunError::Runtime(format!("missing prerequisite original checkpoint: {e}"))
        })?;
        let world = self.build_world(seed)?;
        let mut bundle = attach_ec_modules(original, self.cfg.model.d_proj, seed)?;
        let frozen = |b: &ModelBundle| fingerprint_filtered(b, |n| !n.contains(".block"));
        let before = frozen(&bundle);
        let sc = &self.cfg.supcon;
        let log = supcon_pretrain(
            &mut bundle,
            &world.train,
            sc.epochs,
            sc.lr,
            sc.batch,
            sc.temperature,
            seed,
        )?;
        let after = frozen(&bundle);
        if before != after {
            return Err(RunError::Check(format!(
                "frozen-parameter hash changed during SupCon pretraining \
                 ({before:016x} -> {after:016x})"
            )));
        }
        self.stamp(&mut bundle, seed);
        save_checkpoint(&bundle, &path)?;
        let dir = self.method_dir("ec-pretrain", seed);
        write_train_losses_csv(&log, &dir.join("losses.csv"))?;
        fs::write(
            dir.join("frozen_check.txt"),
            format!("frozen fingerprint {before:016x} unchanged: ok\n"),
        )?;
        Ok(path)
    }

    /// Directory label for a method + variant.
    pub fn method_label(method: &str, variant: Variant) -> String {
        let base = method.replace(':', "-");
        if method == "ec" && variant != Variant::Full {
            format!("{base}-{}", variant.as_str())
        } else {
            base
        }
    }

    pub fn run_unlearn(&self, seed: u64, method: &str, variant: Variant) -> RunResult<PathBuf> {
        if !is_known_method(method) {
            return Err(RunError::Config(format!(
                "unknown method {method:?}; valid methods: {}",
                crate::config::KNOWN_METHODS.join(", ")
            )));
        }
        if method != "ec" && variant != Variant::Full {
            return Err(RunError::Config(format!(
                "variant {:?} only applies to the ec method",
                variant.as_str()
            )));
        }
        let label = Self::method_label(method, variant);
        let dir = self.method_dir(&label, seed);
        let path = self.checkpoint_path(&label, seed);
        let world = self.build_world(seed)?;
        let section = self.cfg.unlearn_for(method);
        let ucfg = section.unlearn_config(variant)?;
        let sched = section.schedule()?;

        let load_prereq = |label: &str| -> RunResult<ModelBundle> {
            load_checkpoint(&self.checkpoint_path(label, seed)).map_err(|e| {
                RunError::Runtime(format!("missing prerequisite {label} checkpoint: {e}"))
            })
        };

        enum LogKind {
            Layered(UnlearnLog),
            Plain(TrainLog),
        }

        let (mut bundle, log) = match method {
            "ec" => {
                let mut bundle = if variant == Variant::NoEcModules {
                    load_prereq("original")?
                } else {
                    let b = load_prereq("ec-pretrain")?;
                    if !b.meta.ec_pretrained {
                        return Err(RunError::Runtime(
                            "ec-pretrain checkpoint is not SupCon-pretrained".into(),
                        ));
                    }
                    b
                };
                let log = ec_unlearn(
                    &mut bundle,
                    &world.splits.forget_train,
                    &world.splits.retain_train,
                    &ucfg,
                    seed,
                    |_, _| {},
                )?;
                (bundle, LogKind::Layered(log))
            }
            "cu" => {
                let mut bundle = load_prereq("original")?;
                let log = cu_baseline(
                    &mut bundle,
                    &world.splits.forget_train,
                    &world.splits.retain_train,
                    &ucfg,
                    seed,
                    |_, _| {},
                )?;
                (bundle, LogKind::Layered(log))
            }
            "rl" => {
                let mut bundle = load_prereq("original")?;
                let log = random_label_baseline(
                    &mut bundle,
                    &world.splits.forget_train,
                    &world.splits.retain_train,
                    &world.split,
                    &sched,
                    seed,
                )?;
                (bundle, LogKind::Plain(log))
            }
            "ga" => {
                let mut bundle = load_prereq("original")?;
                let log = gradient_ascent_baseline(
                    &mut bundle,
                    &world.splits.forget_train,
                    &world.splits.retain_train,
                    &ucfg,
                    seed,
                )?;
                (bundle, LogKind::Plain(log))
            }
            "finetune" => {
                let mut bundle = load_prereq("original")?;
                let log =
                    finetune_baseline(&mut bundle, &world.splits.retain_train, &sched, seed)?;
                (bundle, LogKind::Plain(log))
            }
            "plugin:ga" | "plugin:cu" => {
                let mut bundle = load_prereq("ec-pretrain")?;
                let ga = GradientAscentObjective;
                let cu = FinalCuObjective {
                    lambda_cu: ucfg.lambda_cu,
                    lambda_ce: ucfg.lambda_ce,
                    temperature: ucfg.temperature,
                };
                let base: &dyn StepObjective =
                    if method == "plugin:ga" { &ga } else { &cu };
                let plugin = plugin_augment(base, &ucfg);
                let log = objective_unlearn(
                    &mut bundle,
                    &world.splits.forget_train,
                    &world.splits.retain_train,
                    &plugin,
                    &ucfg,
                    seed,
                    |_, _| {},
                )?;
                bundle.meta.provenance =
                    unlab_core::nn::Provenance::Unlearned(label.clone());
                (bundle, LogKind::Plain(log))
            }
            other => {
                return Err(RunError::Config(format!("method {other:?} is not runnable")));
            }
        };
        self.stamp(&mut bundle, seed);
        save_checkpoint(&bundle, &path)?;
        match log {
            LogKind::Layered(log) => write_unlearn_losses_csv(&log, &dir.join("losses.csv"))?,
            LogKind::Plain(log) => write_train_losses_csv(&log, &dir.join("losses.csv"))?,
        }
        Ok(path)
    }

    pub fn run_eval(&self, seed: u64, method: &str, variant: Variant) -> RunResult<EvalReport> {
        let label = Self::method_label(method, variant);
        let world = self.build_world(seed)?;
        let original = load_checkpoint(&self.checkpoint_path("original", seed))?;
        let retrained = load_checkpoint(&self.checkpoint_path("retrained", seed))?;
        let unlearned = load_checkpoint(&self.checkpoint_path(&label, seed))?;
        let opts = self.cfg.eval.options();
        let report = assemble_report(
            &label,
            &original,
            &unlearned,
            &retrained,
            &world.splits,
            &world.train,
            &world.downstream,
            &opts,
        )?;
        let context = |bundle: &ModelBundle, name: &str| -> RunResult<ContextRow> {
            Ok(ContextRow {
                method: name.into(),
                fa: unlab_core::eval::accuracy(bundle, &world.splits.forget_train)?,
                ra: unlab_core::eval::accuracy(bundle, &world.splits.retain_train)?,
                tfa: unlab_core::eval::accuracy(bundle, &world.splits.forget_test)?,
                tra: unlab_core::eval::accuracy(bundle, &world.splits.retain_test)?,
                knn: world
                    .downstream
                    .iter()
                    .map(|(tr, te)| {
                        unlab_core::eval::knn_transfer(bundle, tr, te, opts.knn_k)
                            .map_err(RunError::from)
                    })
                    .collect::<RunResult<Vec<f64>>>()?,
            })
        };
        let file = ReportFile {
            config_hash: self.cfg.hash.clone(),
            seed,
            original: context(&original, "original")?,
            retrained: context(&retrained, "retrained")?,
            report: report.clone(),
        };
        let dir = self.method_dir(&label, seed);
        write_report_json(&file, &dir.join("report.json"))?;
        write_report_csv(&file, &dir.join("report.csv"))?;
        if self.cfg.eval.export_features {
            self.export_features_for(&unlearned, &world, &dir)?;
        }
        Ok(report)
    }

    /// Export raw tap features of the forget test set in ULAB format.
    pub fn export_features_for(
        &self,
        bundle: &ModelBundle,
        world: &World,
        dir: &Path,
    ) -> RunResult<()> {
        let (taps, _) = unlab_core::nn::forward_taps(bundle, &world.splits.forget_test.features)?;
        for (i, tap) in taps.iter().enumerate() {
            let ds = Dataset::new(
                tap.clone(),
                world.splits.forget_test.labels.clone(),
                world.splits.forget_test.classes,
                unlab_core::data::SplitTag::Test,
            )?;
            save_dataset(&ds, &dir.join(format!("features_tap{i}.ulab")))?;
        }
        Ok(())
    }

    pub fn run_export_features(&self, seed: u64, method: &str, variant: Variant) -> RunResult<()> {
        let label = Self::method_label(method, variant);
        let bundle = load_checkpoint(&self.checkpoint_path(&label, seed))?;
        let world = self.build_world(seed)?;
        let dir = self.method_dir(&label, seed);
        self.export_features_for(&bundle, &world, &dir)
    }
}

// ---------------------------------------------------------------------------
// Bench grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BenchCell {
    pub method: String,
    pub seed: u64,
    /// Layer-weight schedule applied to ec cells during sweeps.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub cell: BenchCell,
    pub result: Result<EvalReport, String>,
}

fn weights_label(w: &[f64]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

/// Build the grid: methods x seeds, with ec cells additionally swept over
/// any configured weight schedules.
pub fn bench_cells(cfg: &ExperimentConfig) -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for method in &cfg.bench.methods {
        for &seed in &cfg.bench.seeds {
            if method == "ec" && !cfg.bench.weight_schedules.is_empty() {
                for w in &cfg.bench.weight_schedules {
                    cells.push(BenchCell { method: method.clone(), seed, weights: Some(w.clone()) });
                }
            } else {
                cells.push(BenchCell { method: method.clone(), seed, weights: None });
            }
        }
    }
    cells
}

fn run_bench_cell(ws: &Workspace, cell: &BenchCell) -> RunResult<EvalReport> {
    // weight sweeps run under a config with the schedule substituted;
    // output lands in a schedule-suffixed method dir
    if let Some(w) = &cell.weights {
        let mut cfg = ws.cfg.clone();
        cfg.unlearn.weights = w.clone();
        let sub = Workspace { cfg, root: ws.root.join(format!("w-{}", weights_label(w))) };
        sub.run_train_original(cell.seed, true)?;
        sub.run_retrain(cell.seed, true)?;
        sub.run_pretrain_ec(cell.seed, true)?;
        sub.run_unlearn(cell.seed, &cell.method, Variant::Full)?;
        return sub.run_eval(cell.seed, &cell.method, Variant::Full);
    }
    ws.run_unlearn(cell.seed, &cell.method, Variant::Full)?;
    ws.run_eval(cell.seed, &cell.method, Variant::Full)
}

/// Run the whole grid, `parallel` cells at a time, then write an aggregate
/// CSV (mean and sample stdev per method over seeds). Failed cells are
/// marked and skipped by the aggregation; the run continues.
pub fn run_bench(ws: &Workspace, parallel: usize) -> RunResult<PathBuf> {
    for method in &ws.cfg.bench.methods {
        if !is_known_method(method) {
            return Err(RunError::Config(format!(
                "bench.methods: unknown method {method:?}"
            )));
        }
        if method.starts_with("plugin:") || method == "ec" {
            continue;
        }
    }
    // phase 1: per-seed prerequisites, shared by every cell of that seed
    let needs_modules = ws
        .cfg
        .bench
        .methods
        .iter()
        .any(|m| m == "ec" || m.starts_with("plugin:"));
    for &seed in &ws.cfg.bench.seeds {
        ws.run_train_original(seed, true)?;
        ws.run_retrain(seed, true)?;
        if needs_modules {
            ws.run_pretrain_ec(seed, true)?;
        }
    }
    // phase 2: grid cells
    let cells = bench_cells(&ws.cfg);
    let queue: Mutex<VecDeque<BenchCell>> = Mutex::new(cells.iter().cloned().collect());
    let outcomes: Mutex<Vec<BenchOutcome>> = Mutex::new(Vec::new());
    let workers = parallel.max(1).min(cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(cell) = queue.lock().unwrap().pop_front() else { break };
                let result = run_bench_cell(ws, &cell).map_err(|e| e.to_string());
                outcomes.lock().unwrap().push(BenchOutcome { cell, result });
            });
        }
    });
    let mut outcomes = outcomes.into_inner().unwrap();
    // aggregation is independent of completion order
    outcomes.sort_by(|a, b| {
        let ka = (&a.cell.method, a.cell.weights.as_ref().map(|w| weights_label(w)), a.cell.seed);
        let kb = (&b.cell.method, b.cell.weights.as_ref().map(|w| weights_label(w)), b.cell.seed);
        ka.cmp(&kb)
    });
    let path = ws.root.join("bench.csv");
    write_bench_csv(&outcomes, &path)?;
    Ok(path)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_bench_csv(outcomes: &[BenchOutcome], path: &Path) -> RunResult<()> {
    use std::fmt::Write as _;
    // group by (method, weights)
    let mut groups: Vec<(String, Vec<&BenchOutcome>)> = Vec::new();
    for o in outcomes {
        let key = match &o.cell.weights {
            Some(w) => format!("{} [w={}]", o.cell.method, weights_label(w)),
            None => o.cell.method.clone(),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(o),
            None => groups.push((key, vec![o])),
        }
    }
    let mut out = String::from(
        "method,seeds,failed,fa_mean,fa_std,ra_mean,ra_std,tfa_mean,tfa_std,tra_mean,tra_std,\
         cka_mean,cka_std,idi_abs_mean,idi_abs_std,hmean_mean,hmean_std,probe_tfa_mean,probe_tfa_std\n",
    );
    for (key, members) in groups {
        let ok: Vec<&EvalReport> =
            members.iter().filter_map(|o| o.result.as_ref().ok()).collect();
        let failed = members.len() - ok.len();
        let col = |f: &dyn Fn(&EvalReport) -> f64| -> (f64, f64) {
            mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        if ok.is_empty() {
            writeln!(out, "{key},0,{failed},FAILED").unwrap();
            continue;
        }
        let pairs = [
            col(&|r| r.fa),
            col(&|r| r.ra),
            col(&|r| r.tfa),
            col(&|r| r.tra),
            col(&|r| r.cka),
            col(&|r| r.idi.abs()),
            col(&|r| r.h_mean.unwrap_or(f64::NAN)),
            col(&|r| r.probe_recovered_tfa),
        ];
        write!(out, "{key},{},{failed}", ok.len()).unwrap();
        for (mean, std) in pairs {
            write!(out, ",{mean},{std}").unwrap();
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
