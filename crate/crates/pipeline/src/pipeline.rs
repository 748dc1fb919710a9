//! The commands. Artifacts live under `{out}/{env}/seed{seed}/`:
//!
//! ```text
//! tasks.jsonl                       sample-tasks
//! data/{dataset}.jsonl              collect (medium also writes data/calibration.json)
//! {dataset}/wm/wm.ckpt              train-wm, with wm.json and wm_curve.csv
//! {dataset}/{variant}/mdt.ckpt      train-mdt, with mdt.json and mdt_curve.csv
//! {dataset}/{variant}/eval_*.csv    eval, with eval.json
//! {dataset}/ablation_summary.csv    ablate
//! sweep/{axis}/...                  sweep
//! ```
//!
//! Every command also writes a `*.manifest.json` next to its outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use metadt_core::datagen::{self, BehaviorPolicy, Calibration};
use metadt_core::eval::{
    self, aggregate, evaluate_few_shot, evaluate_zero_shot, target_return, write_summary_csv, EvalReport, EvalSettings,
    RunLabel, SummaryRow,
};
use metadt_core::io::{load_dataset, read_tasks, save_dataset, write_tasks};
use metadt_core::policy::{train_meta_dt, MetaDt, MetaDtConfig};
use metadt_core::rng::task_rng;
use metadt_core::worldmodel::{train_world_model, WorldModel, WorldModelConfig};
use metadt_core::{
    Ablation, DatasetType, EnvName, EnvSpec, NormalizationStats, OfflineDataset, Source, Split, TaskSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Axis, PipelineConfig};
use crate::error::{CliError, Result};
use crate::manifest::{guard, ManifestBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmSidecar {
    pub config: WorldModelConfig,
    pub stats: NormalizationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdtSidecar {
    pub config: MetaDtConfig,
    pub stats: NormalizationStats,
    pub ablation: Ablation,
}

/// Headline numbers of one `eval` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub g_star: f64,
    pub few_shot_mean: f64,
    pub few_shot_stderr: f64,
    pub zero_shot_mean: f64,
    pub zero_shot_stderr: f64,
    /// Scripted expert's mean return on the same test tasks.
    pub expert_mean: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub few_shot: EvalReport,
    pub zero_shot: EvalReport,
    pub summary: EvalSummary,
}

/// One environment and seed under one output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub env: EnvSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    /// Appended to the variant label in reports, e.g. `h=6` inside a sweep.
    pub tag: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn require(path: &Path, what: &str, producer: String) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what: what.to_string(),
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn e17(x: f64) -> String {
    format!("{x:.17e}")
}

impl Pipeline {
    pub fn new(mut config: PipelineConfig, env: EnvName, seed: u64, out: PathBuf, force: bool) -> Result<Self> {
        config.run.seed = seed;
        let mut spec = EnvSpec::new(env);
        if let Some(r) = config.data.ood_range {
            spec = spec.with_ood_range(r)?;
        }
        config.run.validate(spec.horizon)?;
        if config.data.n_train_tasks == 0 || config.data.n_test_tasks == 0 || config.data.trajectories_per_task == 0 {
            return Err(CliError::InvalidArgument(
                "n_train_tasks, n_test_tasks and trajectories_per_task must be positive".into(),
            ));
        }
        Ok(Self {
            config,
            env: spec,
            seed,
            out,
            force,
            tag: None,
        })
    }

    pub fn root(&self) -> PathBuf {
        self.out.join(self.env.name.as_str()).join(format!("seed{}", self.seed))
    }

    pub fn tasks_path(&self) -> PathBuf {
        self.root().join("tasks.jsonl")
    }

    pub fn dataset_path(&self, dt: DatasetType) -> PathBuf {
        self.root().join("data").join(format!("{dt}.jsonl"))
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.root().join("data").join("calibration.json")
    }

    pub fn wm_dir(&self, dt: DatasetType) -> PathBuf {
        self.root().join(dt.as_str()).join("wm")
    }

    pub fn variant_dir(&self, dt: DatasetType, ablation: Ablation) -> PathBuf {
        self.root().join(dt.as_str()).join(ablation.label())
    }

    fn args(&self, command: &str, extra: &[(&str, String)]) -> Vec<String> {
        let mut a = vec![
            command.to_string(),
            "--env".into(),
            self.env.name.as_str().into(),
            "--seed".into(),
            self.seed.to_string(),
        ];
        for (k, v) in extra {
            a.push(format!("--{k}"));
            a.push(v.clone());
        }
        a
    }

    fn variant_label(&self, ablation: Ablation) -> String {
        match &self.tag {
            Some(t) => format!("{} {t}", ablation.label()),
            None => ablation.label().to_string(),
        }
    }

    fn task_config(&self) -> serde_json::Value {
        let d = &self.config.data;
        json!({
            "env": self.env,
            "seed": self.seed,
            "n_train_tasks": d.n_train_tasks,
            "n_test_tasks": d.n_test_tasks,
            "ood": d.ood,
        })
    }

    fn wm_config(&self, dt: DatasetType) -> serde_json::Value {
        let r = &self.config.run;
        json!({
            "tasks": self.task_config(),
            "dataset": dt,
            "trajectories_per_task": self.config.data.trajectories_per_task,
            "h": r.h,
            "wm_hidden": r.wm_hidden,
            "z_dim": r.z_dim,
            "wm_lr": r.wm_lr,
            "wm_batch_size": r.wm_batch_size,
            "wm_steps": r.wm_steps,
            "wm_warmup_steps": r.wm_warmup_steps,
            "weight_decay": r.weight_decay,
            "grad_clip": r.grad_clip,
            "log_every": r.log_every,
        })
    }

    fn run_config(&self, dt: DatasetType, ablation: Ablation) -> serde_json::Value {
        let mut run = self.config.run.clone();
        run.ablation = ablation;
        json!({
            "tasks": self.task_config(),
            "dataset": dt,
            "trajectories_per_task": self.config.data.trajectories_per_task,
            "run": run,
            "g_star_multiplier": self.config.multiplier(self.env.name),
        })
    }

    /// Train and test tasks, sampled with the run seed.
    pub fn sample_tasks(&self) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
        let d = &self.config.data;
        let (train, test) = self
            .env
            .sample_tasks(d.n_train_tasks, d.n_test_tasks, self.seed, d.ood)?;
        let root = self.root();
        std::fs::create_dir_all(&root)?;
        let manifest_path = root.join("sample-tasks.manifest.json");
        let mut m = ManifestBuilder::new(
            &root,
            "sample-tasks",
            self.args("sample-tasks", &[]),
            self.seed,
            self.task_config(),
        )?;
        guard(&manifest_path, m.config_hash(), self.force)?;
        let path = self.tasks_path();
        let mut w = BufWriter::new(File::create(&path)?);
        write_tasks(&train, &mut w)?;
        write_tasks(&test, &mut w)?;
        w.flush()?;
        m.output(&path)?;
        m.write(&manifest_path)?;
        info!(
            "sampled {} train and {} test tasks -> {}",
            train.len(),
            test.len(),
            path.display()
        );
        Ok((train, test))
    }

    pub fn load_tasks(&self) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
        let path = self.tasks_path();
        require(&path, "task list", self.producer("sample-tasks", &[]))?;
        let tasks = read_tasks(File::open(&path)?)?;
        for t in &tasks {
            self.env.check_task(t)?;
        }
        let (train, test): (Vec<_>, Vec<_>) = tasks.into_iter().partition(|t| t.split == Split::Train);
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Invariant(format!(
                "{} needs train and test tasks",
                path.display()
            )));
        }
        Ok((train, test))
    }

    fn producer(&self, command: &str, extra: &[(&str, String)]) -> String {
        self.args(command, extra).join(" ")
    }

    pub fn load_dataset(&self, dt: DatasetType) -> Result<OfflineDataset> {
        let path = self.dataset_path(dt);
        require(
            &path,
            &format!("{dt} dataset"),
            self.producer("collect", &[("dataset", dt.to_string())]),
        )?;
        Ok(load_dataset(&path, &self.env)?)
    }

    /// Builds the dataset of type `dt` over the training tasks. Mixed data
    /// needs the medium and expert datasets to exist already.
    pub fn collect(&self, dt: DatasetType) -> Result<OfflineDataset> {
        let (train, _) = self.load_tasks()?;
        let root = self.root();
        std::fs::create_dir_all(root.join("data"))?;
        let config = json!({
            "tasks": self.task_config(),
            "dataset": dt,
            "trajectories_per_task": self.config.data.trajectories_per_task,
        });
        let manifest_path = root.join("data").join(format!("{dt}.manifest.json"));
        let mut m = ManifestBuilder::new(
            &root,
            "collect",
            self.args("collect", &[("dataset", dt.to_string())]),
            self.seed,
            config,
        )?;
        guard(&manifest_path, m.config_hash(), self.force)?;
        m.input(&self.tasks_path())?;
        let n = self.config.data.trajectories_per_task;
        let ds = match dt {
            DatasetType::Expert => datagen::collect(&self.env, &train, &BehaviorPolicy::Expert, n, self.seed)?,
            DatasetType::Medium => {
                let cal = datagen::calibrate_medium(&self.env, &train, self.seed)?;
                info!(
                    "medium noise {:.6} (expert/medium return ratio {:.4})",
                    cal.noise_std, cal.ratio
                );
                write_json(&self.calibration_path(), &cal)?;
                m.output(&self.calibration_path())?;
                datagen::collect(&self.env, &train, &BehaviorPolicy::medium(cal.noise_std)?, n, self.seed)?
            }
            DatasetType::Mixed => {
                let medium = self.load_dataset(DatasetType::Medium)?;
                let expert = self.load_dataset(DatasetType::Expert)?;
                m.input(&self.dataset_path(DatasetType::Medium))?;
                m.input(&self.dataset_path(DatasetType::Expert))?;
                let ds = datagen::mix(&medium, &expert, &self.env, self.seed)?;
                check_mixed(&ds)?;
                ds
            }
        };
        if ds.tasks != train {
            return Err(CliError::Invariant(
                "dataset tasks differ from the sampled training tasks".into(),
            ));
        }
        ds.validate(&self.env)?;
        let path = self.dataset_path(dt);
        save_dataset(&ds, &path)?;
        m.output(&path)?;
        m.write(&manifest_path)?;
        info!(
            "{dt}: {} trajectories, {} transitions -> {}",
            ds.num_trajectories(),
            ds.num_transitions(),
            path.display()
        );
        Ok(ds)
    }

    pub fn load_calibration(&self) -> Result<Calibration> {
        let path = self.calibration_path();
        require(
            &path,
            "medium calibration",
            self.producer("collect", &[("dataset", "medium".into())]),
        )?;
        read_json(&path)
    }

    pub fn train_wm(&self, dt: DatasetType) -> Result<WorldModel> {
        let ds = self.load_dataset(dt)?;
        let dir = self.wm_dir(dt);
        std::fs::create_dir_all(&dir)?;
        let root = self.root();
        let manifest_path = dir.join("train-wm.manifest.json");
        let mut m = ManifestBuilder::new(
            &root,
            "train-wm",
            self.args("train-wm", &[("dataset", dt.to_string())]),
            self.seed,
            self.wm_config(dt),
        )?;
        guard(&manifest_path, m.config_hash(), self.force)?;
        m.input(&self.dataset_path(dt))?;
        info!(
            "training world model on {dt} data for {} steps",
            self.config.run.wm_steps
        );
        let out = train_world_model(&[&ds], &self.config.run)?;
        if let Some(reason) = out.aborted {
            return Err(CliError::Invariant(format!(
                "world-model training diverged at {reason}"
            )));
        }
        let ckpt = dir.join("wm.ckpt");
        metadt_nn::checkpoint::save(&out.model.params, &ckpt)?;
        let sidecar = dir.join("wm.json");
        write_json(
            &sidecar,
            &WmSidecar {
                config: out.model.config(),
                stats: out.model.stats,
            },
        )?;
        let curve = dir.join("wm_curve.csv");
        let mut w = csv::Writer::from_path(&curve)?;
        w.write_record(["step", "loss_reward", "loss_state"])?;
        for p in &out.curve {
            w.write_record([p.step.to_string(), e17(p.loss_reward), e17(p.loss_state)])?;
        }
        w.flush()?;
        for p in [&ckpt, &sidecar, &curve] {
            m.output(p)?;
        }
        m.write(&manifest_path)?;
        if let Some(last) = out.curve.last() {
            info!("world model final loss {:.6e} -> {}", last.loss, ckpt.display());
        }
        Ok(out.model)
    }

    pub fn load_wm(&self, dt: DatasetType) -> Result<WorldModel> {
        let dir = self.wm_dir(dt);
        let ckpt = dir.join("wm.ckpt");
        require(
            &ckpt,
            "world-model checkpoint",
            self.producer("train-wm", &[("dataset", dt.to_string())]),
        )?;
        let side: WmSidecar = read_json(&dir.join("wm.json"))?;
        Ok(WorldModel::from_params(
            side.config,
            side.stats,
            metadt_nn::checkpoint::load(&ckpt)?,
        )?)
    }

    fn wm_if_needed(&self, dt: DatasetType, ablation: Ablation) -> Result<Option<WorldModel>> {
        if ablation.needs_world_model() {
            Ok(Some(self.load_wm(dt)?))
        } else {
            Ok(None)
        }
    }

    pub fn train_mdt(&self, dt: DatasetType, ablation: Ablation) -> Result<MetaDt> {
        let ds = self.load_dataset(dt)?;
        let wm = self.wm_if_needed(dt, ablation)?;
        let dir = self.variant_dir(dt, ablation);
        std::fs::create_dir_all(&dir)?;
        let root = self.root();
        let manifest_path = dir.join("train-mdt.manifest.json");
        let mut m = ManifestBuilder::new(
            &root,
            "train-mdt",
            self.args(
                "train-mdt",
                &[("dataset", dt.to_string()), ("ablation", ablation.label().to_string())],
            ),
            self.seed,
            self.run_config(dt, ablation),
        )?;
        guard(&manifest_path, m.config_hash(), self.force)?;
        m.input(&self.dataset_path(dt))?;
        if wm.is_some() {
            m.input(&self.wm_dir(dt).join("wm.ckpt"))?;
        }
        let mut run = self.config.run.clone();
        run.ablation = ablation;
        info!(
            "training {} on {dt} data for {} steps",
            ablation.label(),
            run.training_steps
        );
        let out = train_meta_dt(&ds, wm.as_ref(), &run, self.env.horizon, self.env.action_bound)?;
        if let Some(reason) = out.aborted {
            return Err(CliError::Invariant(format!("policy training diverged at {reason}")));
        }
        let ckpt = dir.join("mdt.ckpt");
        metadt_nn::checkpoint::save(&out.model.params, &ckpt)?;
        let sidecar = dir.join("mdt.json");
        write_json(
            &sidecar,
            &MdtSidecar {
                config: out.model.config(),
                stats: out.model.stats,
                ablation,
            },
        )?;
        let curve = dir.join("mdt_curve.csv");
        let mut w = csv::Writer::from_path(&curve)?;
        w.write_record(["step", "action_loss"])?;
        for p in &out.curve {
            w.write_record([p.step.to_string(), e17(p.action_loss)])?;
        }
        w.flush()?;
        for p in [&ckpt, &sidecar, &curve] {
            m.output(p)?;
        }
        m.write(&manifest_path)?;
        if let Some(last) = out.curve.last() {
            info!("policy final loss {:.6e} -> {}", last.action_loss, ckpt.display());
        }
        Ok(out.model)
    }

    pub fn load_mdt(&self, dt: DatasetType, ablation: Ablation) -> Result<MetaDt> {
        let dir = self.variant_dir(dt, ablation);
        let ckpt = dir.join("mdt.ckpt");
        require(
            &ckpt,
            "policy checkpoint",
            self.producer(
                "train-mdt",
                &[("dataset", dt.to_string()), ("ablation", ablation.label().to_string())],
            ),
        )?;
        let side: MdtSidecar = read_json(&dir.join("mdt.json"))?;
        if side.ablation != ablation {
            return Err(CliError::Invariant(format!(
                "{} holds a {} policy",
                ckpt.display(),
                side.ablation.label()
            )));
        }
        Ok(MetaDt::from_params(
            side.config,
            side.stats,
            side.ablation,
            metadt_nn::checkpoint::load(&ckpt)?,
        )?)
    }

    /// Few-shot and zero-shot evaluation on the test tasks.
    pub fn eval(&self, dt: DatasetType, ablation: Ablation) -> Result<EvalOutcome> {
        let (_, test) = self.load_tasks()?;
        let ds = self.load_dataset(dt)?;
        let model = self.load_mdt(dt, ablation)?;
        let wm = self.wm_if_needed(dt, ablation)?;
        let dir = self.variant_dir(dt, ablation);
        let root = self.root();
        let manifest_path = dir.join("eval.manifest.json");
        let mut m = ManifestBuilder::new(
            &root,
            "eval",
            self.args(
                "eval",
                &[("dataset", dt.to_string()), ("ablation", ablation.label().to_string())],
            ),
            self.seed,
            self.run_config(dt, ablation),
        )?;
        guard(&manifest_path, m.config_hash(), self.force)?;
        m.input(&self.tasks_path())?;
        m.input(&self.dataset_path(dt))?;
        m.input(&dir.join("mdt.ckpt"))?;
        if wm.is_some() {
            m.input(&self.wm_dir(dt).join("wm.ckpt"))?;
        }

        let g_star = target_return(&[&ds], self.config.multiplier(self.env.name))?;
        let mut run = self.config.run.clone();
        run.ablation = ablation;
        let settings = EvalSettings::from_run(&run);
        let label = RunLabel {
            env: self.env.name.as_str().to_string(),
            dataset_type: dt.to_string(),
            ablation: self.variant_label(ablation),
            seed: self.seed,
        };
        let few = evaluate_few_shot(
            &self.env,
            &test,
            &model,
            wm.as_ref(),
            g_star,
            &settings,
            label.clone(),
            self.seed,
        )?;
        let zero = evaluate_zero_shot(
            &self.env,
            &test,
            &model,
            wm.as_ref(),
            g_star,
            &settings,
            label,
            self.seed,
        )?;
        if zero.counters.prompt_draws != 0 || zero.counters.demo_appends != 0 {
            return Err(CliError::Invariant(format!(
                "zero-shot evaluation touched prompts: {:?}",
                zero.counters
            )));
        }
        if few.counters.demo_appends != settings.episodes * test.len() {
            return Err(CliError::Invariant(format!("few-shot demo appends {:?}", few.counters)));
        }
        let expert = test
            .iter()
            .map(|t| {
                let mut rng = task_rng(self.seed, t.task_id);
                Ok(datagen::run_behavior(&self.env, t, &BehaviorPolicy::Expert, &mut rng)?.total_return())
            })
            .collect::<Result<Vec<f64>>>()?;
        let summary = EvalSummary {
            g_star,
            few_shot_mean: few.mean,
            few_shot_stderr: few.stderr,
            zero_shot_mean: zero.mean,
            zero_shot_stderr: zero.stderr,
            expert_mean: eval::mean_stderr(&expert).0,
        };

        let few_path = dir.join("eval_few_shot.csv");
        few.write_csv(BufWriter::new(File::create(&few_path)?))?;
        let zero_path = dir.join("eval_zero_shot.csv");
        zero.write_csv(BufWriter::new(File::create(&zero_path)?))?;
        let summary_path = dir.join("eval.json");
        write_json(&summary_path, &summary)?;
        for p in [&few_path, &zero_path, &summary_path] {
            m.output(p)?;
        }
        m.write(&manifest_path)?;
        info!(
            "{} on {dt}: few-shot {:.3} ± {:.3}, zero-shot {:.3} ± {:.3} (G* {:.3}, expert {:.3})",
            ablation.label(),
            summary.few_shot_mean,
            summary.few_shot_stderr,
            summary.zero_shot_mean,
            summary.zero_shot_stderr,
            g_star,
            summary.expert_mean
        );
        Ok(EvalOutcome {
            few_shot: few,
            zero_shot: zero,
            summary,
        })
    }

    /// Makes sure the dataset of type `dt` (and its ingredients) exists.
    pub fn ensure_dataset(&self, dt: DatasetType) -> Result<()> {
        if !self.tasks_path().exists() {
            self.sample_tasks()?;
        }
        let needs = match dt {
            DatasetType::Mixed => vec![DatasetType::Medium, DatasetType::Expert, DatasetType::Mixed],
            other => vec![other],
        };
        for d in needs {
            if !self.dataset_path(d).exists() {
                self.collect(d)?;
            }
        }
        Ok(())
    }

    /// Trains and evaluates full Meta-DT and each listed variant on one
    /// dataset; writes one few-shot summary row per variant.
    pub fn ablate(&self, dt: DatasetType, variants: &[Ablation]) -> Result<Vec<SummaryRow>> {
        let mut all = vec![Ablation::FULL];
        for v in variants {
            if !all.contains(v) {
                all.push(*v);
            }
        }
        if all.iter().any(Ablation::needs_world_model) && !self.wm_dir(dt).join("wm.ckpt").exists() {
            self.train_wm(dt)?;
        }
        let mut reports = Vec::new();
        for &ab in &all {
            self.train_mdt(dt, ab)?;
            reports.push(self.eval(dt, ab)?.few_shot);
        }
        let rows = aggregate(&reports);
        let root = self.root();
        let path = root.join(dt.as_str()).join("ablation_summary.csv");
        write_summary_csv(&rows, BufWriter::new(File::create(&path)?))?;
        let labels: Vec<&str> = all.iter().map(Ablation::label).collect();
        let mut m = ManifestBuilder::new(
            &root,
            "ablate",
            self.args(
                "ablate",
                &[("dataset", dt.to_string()), ("variants", labels[1..].join(","))],
            ),
            self.seed,
            json!({"run": self.run_config(dt, Ablation::FULL), "variants": labels}),
        )?;
        for &ab in &all {
            m.input(&self.variant_dir(dt, ab).join("eval_few_shot.csv"))?;
            m.input(&self.variant_dir(dt, ab).join("eval_zero_shot.csv"))?;
        }
        m.output(&path)?;
        m.write(&self.root().join(dt.as_str()).join("ablate.manifest.json"))?;
        Ok(rows)
    }

    /// Reruns the whole chain for each value of `axis`, each in its own
    /// directory, and writes one few-shot summary row per value.
    pub fn sweep(&self, dt: DatasetType, ablation: Ablation, axis: &Axis) -> Result<Vec<SummaryRow>> {
        if axis.values.is_empty() {
            return Err(CliError::InvalidArgument(format!(
                "sweep axis {} has no values",
                axis.name
            )));
        }
        let base = self.root().join("sweep").join(&axis.name);
        let mut reports = Vec::new();
        let mut m_inputs = Vec::new();
        for &v in &axis.values {
            let mut config = self.config.clone();
            match axis.name.as_str() {
                "h" => config.run.h = v,
                "k" => config.run.prompt_len = v,
                "n_train_tasks" => config.data.n_train_tasks = v,
                other => return Err(CliError::InvalidArgument(format!("unknown sweep axis `{other}`"))),
            }
            let name = format!("{}={v}", axis.name);
            let mut sub = Pipeline::new(config, self.env.name, self.seed, base.join(&name), self.force)?;
            sub.tag = Some(name);
            sub.ensure_dataset(dt)?;
            if ablation.needs_world_model() {
                sub.train_wm(dt)?;
            }
            sub.train_mdt(dt, ablation)?;
            let out = sub.eval(dt, ablation)?;
            m_inputs.push(sub.variant_dir(dt, ablation).join("eval_few_shot.csv"));
            reports.push(out.few_shot);
        }
        let rows = aggregate(&reports);
        let root = self.root();
        let path = root.join("sweep").join(format!("{}_summary.csv", axis.name));
        write_summary_csv(&rows, BufWriter::new(File::create(&path)?))?;
        let values: Vec<String> = axis.values.iter().map(usize::to_string).collect();
        let mut m = ManifestBuilder::new(
            &root,
            "sweep",
            self.args(
                "sweep",
                &[
                    ("dataset", dt.to_string()),
                    ("ablation", ablation.label().to_string()),
                    ("axis", format!("{}={}", axis.name, values.join(","))),
                ],
            ),
            self.seed,
            json!({"run": self.run_config(dt, ablation), "axis": axis.name, "values": axis.values}),
        )?;
        for p in &m_inputs {
            m.input(p)?;
        }
        m.output(&path)?;
        m.write(&self.root().join("sweep").join(format!("{}.manifest.json", axis.name)))?;
        Ok(rows)
    }
}

/// Exactly `⌊0.7 n⌋` medium-sourced trajectories per task, the rest expert.
pub fn check_mixed(ds: &OfflineDataset) -> Result<()> {
    for (task, trajs) in ds.tasks.iter().zip(&ds.trajectories) {
        let n = trajs.len();
        let medium = trajs.iter().filter(|t| t.source == Some(Source::Medium)).count();
        let expert = trajs.iter().filter(|t| t.source == Some(Source::Expert)).count();
        if medium != metadt_core::data::mixed_medium_count(n) || medium + expert != n {
            return Err(CliError::Invariant(format!(
                "task {}: {medium} medium and {expert} expert of {n} trajectories",
                task.task_id
            )));
        }
    }
    Ok(())
}
