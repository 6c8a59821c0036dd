//! Experiment configuration: a small TOML schema with top-level run keys
//! and the sections `[train]`, `[model]`, `[schedule]`, `[tasks]` and
//! `[eval]`. Unknown keys are rejected and every error names its key.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, Metric, SAMPLE_SWEEP_TRAIN};
use crate::nn::{Activation, LrSchedule};
use crate::tasks::{AmplitudeRange, ClassConfig, KPolicy, TaskFamily};
use crate::trainer::{Method, MethodSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    SineContextSweep,
    SineSampleSweep,
    SineSingle,
    ClassShotGen,
    Gradcheck,
}

impl Experiment {
    const ALL: [Experiment; 5] = [
        Experiment::SineContextSweep,
        Experiment::SineSampleSweep,
        Experiment::SineSingle,
        Experiment::ClassShotGen,
        Experiment::Gradcheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::SineContextSweep => "sine_context_sweep",
            Experiment::SineSampleSweep => "sine_sample_sweep",
            Experiment::SineSingle => "sine_single",
            Experiment::ClassShotGen => "class_shot_gen",
            Experiment::Gradcheck => "gradcheck",
        }
    }

    pub fn is_classification(self) -> bool {
        self == Experiment::ClassShotGen
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// Run length preset: `desk` trains 20,000 iterations, `paper` 50,000.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn iters(self) -> u64 {
        match self {
            Profile::Desk => 20_000,
            Profile::Paper => 50_000,
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile {s:?} (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub profile: Option<Profile>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub profile: Profile,
    pub output: PathBuf,

    pub iters: u64,
    pub val_every: u64,
    pub meta_batch: usize,
    pub val_tasks: usize,
    pub k_train: KPolicy,
    pub k_test: usize,
    pub workers: usize,

    pub phi_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub loss_hidden: Vec<usize>,
    pub activation: Activation,
    pub inner_lr: f64,
    pub maml_inner_lr: f64,
    pub inner_steps: usize,

    pub schedule: LrSchedule,
    pub family: TaskFamily,
    pub eval: EvalProtocol,
    /// Fixed evaluation-task seed shared by every cell; by default each
    /// run evaluates on tasks derived from its own seed.
    pub eval_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn method_spec(&self, method: Method, phi_dim: usize) -> MethodSpec {
        MethodSpec {
            method,
            inner_steps: self.inner_steps,
            inner_lr: if method == Method::Maml {
                self.maml_inner_lr
            } else {
                self.inner_lr
            },
            schedule: self.schedule,
            phi_dim,
            x_dim: self.family.x_dim(),
            y_dim: self.family.y_dim(),
            hidden: self.hidden.clone(),
            loss_hidden: if method.uses_loss_net() {
                self.loss_hidden.clone()
            } else {
                Vec::new()
            },
            activation: self.activation,
            task_loss: self.family.task_loss(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            family: self.family,
            iters: self.iters,
            val_every: self.val_every,
            meta_batch: self.meta_batch,
            k_train: self.k_train,
            k_test: self.k_test,
            val_tasks: self.val_tasks,
            val_points: self.eval.points,
            val_grid: self.eval.grid,
            seed,
            workers: self.workers,
        }
    }

    /// Seed of the evaluation tasks of a run trained with `seed`.
    pub fn eval_seed_for(&self, seed: u64) -> u64 {
        self.eval_seed.unwrap_or(seed)
    }

    /// Fully resolved TOML; parsing it yields this configuration.
    pub fn to_toml(&self) -> String {
        let mut top = Table::new();
        top.insert("experiment".into(), self.experiment.as_str().into());
        top.insert(
            "methods".into(),
            Value::Array(self.methods.iter().map(|m| m.as_str().into()).collect()),
        );
        top.insert("seeds".into(), ints(self.seeds.iter().map(|&s| s as i64)));
        top.insert("profile".into(), self.profile.as_str().into());
        top.insert("output".into(), self.output.to_string_lossy().into_owned().into());
        if let Some(s) = self.eval_seed {
            top.insert("eval_seed".into(), Value::Integer(s as i64));
        }

        let mut train = Table::new();
        train.insert("iters".into(), Value::Integer(self.iters as i64));
        train.insert("val_every".into(), Value::Integer(self.val_every as i64));
        train.insert("meta_batch".into(), Value::Integer(self.meta_batch as i64));
        train.insert("val_tasks".into(), Value::Integer(self.val_tasks as i64));
        train.insert(
            "k_train".into(),
            match self.k_train {
                KPolicy::Fixed(k) => Value::Integer(k as i64),
                KPolicy::Uniform { lo, hi } => ints([lo as i64, hi as i64]),
            },
        );
        train.insert("k_test".into(), Value::Integer(self.k_test as i64));
        train.insert("workers".into(), Value::Integer(self.workers as i64));
        top.insert("train".into(), Value::Table(train));

        let mut model = Table::new();
        model.insert("phi_dim".into(), ints(self.phi_dims.iter().map(|&d| d as i64)));
        model.insert("hidden".into(), ints(self.hidden.iter().map(|&d| d as i64)));
        model.insert("loss_hidden".into(), ints(self.loss_hidden.iter().map(|&d| d as i64)));
        model.insert("activation".into(), self.activation.as_str().into());
        model.insert("inner_lr".into(), Value::Float(self.inner_lr));
        model.insert("maml_inner_lr".into(), Value::Float(self.maml_inner_lr));
        model.insert("inner_steps".into(), Value::Integer(self.inner_steps as i64));
        top.insert("model".into(), Value::Table(model));

        let mut schedule = Table::new();
        schedule.insert("lr".into(), Value::Float(self.schedule.base));
        schedule.insert("decay".into(), Value::Float(self.schedule.factor));
        schedule.insert("period".into(), Value::Integer(self.schedule.period as i64));
        top.insert("schedule".into(), Value::Table(schedule));

        let mut tasks = Table::new();
        match self.family {
            TaskFamily::Sine { amplitude } => {
                tasks.insert("amplitude".into(), amplitude.as_str().into());
            }
            TaskFamily::Classification(c) => {
                tasks.insert("ways".into(), Value::Integer(c.ways as i64));
                tasks.insert("dim".into(), Value::Integer(c.dim as i64));
                tasks.insert("sigma".into(), Value::Float(c.sigma));
            }
        }
        top.insert("tasks".into(), Value::Table(tasks));

        let mut eval = Table::new();
        eval.insert("n_tasks".into(), Value::Integer(self.eval.n_tasks as i64));
        eval.insert("points".into(), Value::Integer(self.eval.points as i64));
        eval.insert("grid".into(), Value::Integer(self.eval.grid as i64));
        top.insert("eval".into(), Value::Table(eval));

        top.to_string()
    }
}

fn ints(values: impl IntoIterator<Item = i64>) -> Value {
    Value::Array(values.into_iter().map(Value::Integer).collect())
}

/// Key lookups on one table that remember what was read, so leftovers can
/// be reported as unknown.
struct Section<'a> {
    prefix: &'static str,
    table: Option<&'a Table>,
    seen: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(prefix: &'static str, table: Option<&'a Table>) -> Self {
        Self {
            prefix,
            table,
            seen: BTreeSet::new(),
        }
    }

    fn name(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::config(self.name(key), message)
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn int(&mut self, key: &'static str, min: i64) -> Result<Option<i64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if *v >= min => Ok(Some(*v)),
            Some(Value::Integer(v)) => Err(self.err(key, format!("must be at least {min}, got {v}"))),
            Some(v) => Err(self.err(key, format!("expected an integer, got {}", v.type_str()))),
        }
    }

    fn count(&mut self, key: &'static str, min: usize) -> Result<Option<usize>> {
        Ok(self.int(key, min as i64)?.map(|v| v as usize))
    }

    fn float(&mut self, key: &'static str, ok: impl Fn(f64) -> bool, rule: &str) -> Result<Option<f64>> {
        let v = match self.raw(key) {
            None => return Ok(None),
            Some(Value::Float(v)) => *v,
            Some(Value::Integer(v)) => *v as f64,
            Some(v) => return Err(self.err(key, format!("expected a number, got {}", v.type_str()))),
        };
        if v.is_finite() && ok(v) {
            Ok(Some(v))
        } else {
            Err(self.err(key, format!("{rule}, got {v}")))
        }
    }

    fn string(&mut self, key: &'static str) -> Result<Option<&'a str>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(self.err(key, format!("expected a string, got {}", v.type_str()))),
        }
    }

    fn parsed<T: FromStr<Err = String>>(&mut self, key: &'static str) -> Result<Option<T>> {
        match self.string(key)? {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e| self.err(key, e)),
        }
    }

    /// An integer or an array of integers, each at least `min`.
    fn int_list(&mut self, key: &'static str, min: i64, allow_empty: bool) -> Result<Option<Vec<i64>>> {
        let items = match self.raw(key) {
            None => return Ok(None),
            Some(Value::Integer(v)) => vec![Value::Integer(*v)],
            Some(Value::Array(a)) => a.clone(),
            Some(v) => return Err(self.err(key, format!("expected an integer or an array, got {}", v.type_str()))),
        };
        if items.is_empty() && !allow_empty {
            return Err(self.err(key, "must not be empty"));
        }
        items
            .iter()
            .map(|v| match v {
                Value::Integer(i) if *i >= min => Ok(*i),
                Value::Integer(i) => Err(self.err(key, format!("entries must be at least {min}, got {i}"))),
                other => Err(self.err(key, format!("expected integers, got {}", other.type_str()))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn finish(self) -> Result<()> {
        let Some(table) = self.table else { return Ok(()) };
        for key in table.keys() {
            if !self.seen.contains(key.as_str()) {
                return Err(self.err(key, "unknown key"));
            }
        }
        Ok(())
    }
}

fn subtable<'a>(top: &'a Table, key: &'static str) -> Result<Option<&'a Table>> {
    match top.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(v) => Err(Error::config(key, format!("expected a section, got {}", v.type_str()))),
    }
}

const SECTIONS: [&str; 5] = ["train", "model", "schedule", "tasks", "eval"];

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &Overrides::default())
}

pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let top: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<syntax>", e.message().to_string()))?;
    let mut root = Section::new("", Some(&top));
    for s in SECTIONS {
        root.seen.insert(s);
    }

    let experiment = root.parsed::<Experiment>("experiment")?.unwrap_or(Experiment::SineSingle);
    let classification = experiment.is_classification();
    let methods = match root.raw("methods") {
        None => Method::ALL.to_vec(),
        Some(Value::Array(items)) if !items.is_empty() => {
            let mut out = Vec::new();
            for item in items {
                let Value::String(s) = item else {
                    return Err(root.err("methods", format!("expected strings, got {}", item.type_str())));
                };
                let m: Method = s.parse().map_err(|e: String| root.err("methods", e))?;
                if out.contains(&m) {
                    return Err(root.err("methods", format!("{m} listed twice")));
                }
                out.push(m);
            }
            out
        }
        Some(Value::Array(_)) => return Err(root.err("methods", "must not be empty")),
        Some(v) => return Err(root.err("methods", format!("expected an array, got {}", v.type_str()))),
    };
    let seeds = match overrides.seed {
        Some(s) => {
            root.raw("seeds");
            vec![s]
        }
        None => root
            .int_list("seeds", 0, false)?
            .map_or(vec![0], |v| v.into_iter().map(|s| s as u64).collect()),
    };
    let file_profile = root.parsed::<Profile>("profile")?;
    let profile = overrides.profile.or(file_profile).unwrap_or_default();
    let file_output = root.string("output")?.map(PathBuf::from);
    let output = overrides
        .output
        .clone()
        .or(file_output)
        .unwrap_or_else(|| PathBuf::from("runs").join(experiment.as_str()));
    let eval_seed = root.int("eval_seed", 0)?.map(|s| s as u64);
    root.finish()?;

    let mut tasks = Section::new("tasks", subtable(&top, "tasks")?);
    let family = if classification {
        let defaults = ClassConfig::default();
        let ways = tasks.count("ways", 2)?.unwrap_or(defaults.ways);
        let dim = tasks.count("dim", 1)?.unwrap_or(defaults.dim);
        let sigma = tasks
            .float("sigma", |v| v >= 0.0, "must be non-negative")?
            .unwrap_or(defaults.sigma);
        TaskFamily::Classification(ClassConfig {
            ways,
            dim,
            sigma,
            ..defaults
        })
    } else {
        let amplitude = match tasks.string("amplitude")? {
            None | Some("standard") => AmplitudeRange::Standard,
            Some("narrow") => AmplitudeRange::Narrow,
            Some(other) => {
                return Err(tasks.err(
                    "amplitude",
                    format!("unknown range {other:?} (expected standard or narrow)"),
                ))
            }
        };
        TaskFamily::Sine { amplitude }
    };
    tasks.finish()?;

    let mut train = Section::new("train", subtable(&top, "train")?);
    let iters = train.int("iters", 0)?.map_or(profile.iters(), |v| v as u64);
    let val_every = train.int("val_every", 1)?.map_or(500, |v| v as u64);
    let meta_batch = train.count("meta_batch", 1)?.unwrap_or(25);
    let val_tasks = train.count("val_tasks", 1)?.unwrap_or(100);
    let default_k = match experiment {
        Experiment::SineSampleSweep => SAMPLE_SWEEP_TRAIN,
        Experiment::ClassShotGen => KPolicy::Fixed(5),
        _ => KPolicy::Fixed(10),
    };
    let k_train = match train.int_list("k_train", 0, false)?.as_deref() {
        None => default_k,
        Some([k]) => KPolicy::Fixed(*k as usize),
        Some([lo, hi]) if lo <= hi => KPolicy::Uniform {
            lo: *lo as usize,
            hi: *hi as usize,
        },
        Some(_) => {
            return Err(train.err(
                "k_train",
                "expected a count or a [low, high] range with low <= high",
            ))
        }
    };
    if classification && matches!(k_train, KPolicy::Fixed(0) | KPolicy::Uniform { lo: 0, .. }) {
        return Err(train.err("k_train", "classification needs at least one shot"));
    }
    let k_test = train.count("k_test", 1)?.unwrap_or(if classification { 5 } else { 10 });
    let workers = overrides
        .workers
        .map(Ok)
        .unwrap_or_else(|| train.count("workers", 1).map(|w| w.unwrap_or(1)))?;
    if overrides.workers.is_some() {
        train.raw("workers");
    }
    if workers == 0 {
        return Err(Error::config("train.workers", "must be at least 1"));
    }
    train.finish()?;

    let mut model = Section::new("model", subtable(&top, "model")?);
    let default_phi = match experiment {
        Experiment::SineContextSweep => vec![1, 2, 3, 4, 5],
        Experiment::ClassShotGen => vec![100],
        _ => vec![5],
    };
    let phi_dims: Vec<usize> = model
        .int_list("phi_dim", 0, false)?
        .map_or(default_phi, |v| v.into_iter().map(|d| d as usize).collect());
    let widths = |model: &mut Section, key: &'static str, default: Vec<usize>| -> Result<Vec<usize>> {
        Ok(model
            .int_list(key, 1, true)?
            .map_or(default, |v| v.into_iter().map(|d| d as usize).collect()))
    };
    let (default_hidden, default_loss) = if classification {
        (vec![256], vec![64, 64])
    } else {
        (vec![40, 40], vec![32, 32, 32])
    };
    let hidden = widths(&mut model, "hidden", default_hidden)?;
    let loss_hidden = widths(&mut model, "loss_hidden", default_loss)?;
    if loss_hidden.is_empty() && methods.iter().any(|m| m.uses_loss_net()) {
        return Err(model.err("loss_hidden", "learned-loss methods need at least one hidden layer"));
    }
    let activation = match model.string("activation")? {
        None | Some("relu") => Activation::Relu,
        Some("tanh") => Activation::Tanh,
        Some(other) => {
            return Err(model.err(
                "activation",
                format!("unknown activation {other:?} (expected relu or tanh)"),
            ))
        }
    };
    let inner_lr = model
        .float("inner_lr", |v| v > 0.0, "must be positive")?
        .unwrap_or(1.0);
    let maml_inner_lr = model
        .float("maml_inner_lr", |v| v > 0.0, "must be positive")?
        .unwrap_or(if classification { 0.1 } else { 0.01 });
    let inner_steps = model
        .count("inner_steps", 1)?
        .unwrap_or(if classification { 2 } else { 1 });
    model.finish()?;
    if phi_dims.contains(&0) && methods.iter().any(|&m| m != Method::Maml) {
        return Err(Error::config("model.phi_dim", "context methods need phi_dim >= 1"));
    }

    let mut sched = Section::new("schedule", subtable(&top, "schedule")?);
    let lr = sched.float("lr", |v| v > 0.0, "must be positive")?.unwrap_or(0.001);
    let decay = sched
        .float("decay", |v| v > 0.0 && v <= 1.0, "must be in (0, 1]")?
        .unwrap_or(0.9);
    let period = sched.int("period", 1)?.map_or(5000, |v| v as u64);
    sched.finish()?;
    let schedule = LrSchedule::new(lr, decay, period)?;

    let mut ev = Section::new("eval", subtable(&top, "eval")?);
    let n_tasks = ev.count("n_tasks", 1)?.unwrap_or(1000);
    let points = ev
        .count("points", if classification { 1 } else { 0 })?
        .unwrap_or(if classification { 5 } else { 10 });
    let grid = ev
        .count("grid", if classification { 1 } else { 2 })?
        .unwrap_or(if classification { 5 } else { 100 });
    ev.finish()?;

    Ok(ExperimentConfig {
        experiment,
        methods,
        seeds,
        profile,
        output,
        iters,
        val_every,
        meta_batch,
        val_tasks,
        k_train,
        k_test,
        workers,
        phi_dims,
        hidden,
        loss_hidden,
        activation,
        inner_lr,
        maml_inner_lr,
        inner_steps,
        schedule,
        family,
        eval: EvalProtocol {
            n_tasks,
            points,
            grid,
            metric: Metric::for_family(&family),
        },
        eval_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_config_has_the_reference_defaults() {
        let c = parse_config_with(
            "",
            &Overrides {
                profile: Some(Profile::Paper),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(c.iters, 50_000);
        assert_eq!(c.meta_batch, 25);
        assert_eq!(c.schedule, LrSchedule::default());
        assert_eq!(c.inner_lr, 1.0);
        assert_eq!(c.phi_dims, vec![5]);
        assert_eq!(c.val_every, 500);
        assert_eq!(c.inner_steps, 1);
        assert_eq!(parse_config("").unwrap().iters, 20_000);
        assert_eq!(parse_config("profile = \"paper\"").unwrap().iters, 50_000);
    }

    #[test]
    fn negative_iterations_name_the_key() {
        let e = parse_config("[train]\niters = -1").unwrap_err();
        assert_eq!(key_of(e), "train.iters");
    }

    #[test]
    fn errors_name_the_offending_key() {
        let cases = [
            ("bogus = 1", "bogus"),
            ("[train]\nmeta_batch = \"many\"", "train.meta_batch"),
            ("[model]\nwidth = 3", "model.width"),
            ("[schedule]\ndecay = 1.5", "schedule.decay"),
            ("methods = [\"cavia\", \"reptile\"]", "methods"),
            ("experiment = \"imagenet\"", "experiment"),
            ("[tasks]\namplitude = \"wide\"", "tasks.amplitude"),
            ("[train]\nk_train = [5, 2]", "train.k_train"),
            ("[model]\nphi_dim = 0", "model.phi_dim"),
            ("[eval]\ngrid = 1", "eval.grid"),
            ("train = 3", "train"),
            ("profile = \"huge\"", "profile"),
            ("[model]\ninner_lr = 0", "model.inner_lr"),
        ];
        for (text, key) in cases {
            assert_eq!(key_of(parse_config(text).unwrap_err()), key, "{text}");
        }
    }

    #[test]
    fn syntax_errors_are_config_errors() {
        assert!(matches!(parse_config("[train"), Err(Error::Config { .. })));
    }

    #[test]
    fn experiment_defaults_follow_the_family() {
        let c = parse_config("experiment = \"class_shot_gen\"").unwrap();
        assert_eq!(c.inner_steps, 2);
        assert!(matches!(c.family, TaskFamily::Classification(_)));
        assert_eq!(c.eval.metric, Metric::Accuracy);
        assert_eq!((c.phi_dims.clone(), c.hidden.clone(), c.loss_hidden.clone()), (vec![100], vec![256], vec![64, 64]));
        let c = parse_config("experiment = \"sine_sample_sweep\"").unwrap();
        assert_eq!(c.k_train, KPolicy::Uniform { lo: 0, hi: 20 });
        let c = parse_config("experiment = \"sine_context_sweep\"").unwrap();
        assert_eq!(c.phi_dims, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn overrides_take_precedence() {
        let c = parse_config_with(
            "seeds = [1, 2]\noutput = \"a\"\n[train]\nworkers = 2",
            &Overrides {
                seed: Some(9),
                output: Some("b".into()),
                profile: None,
                workers: Some(4),
            },
        )
        .unwrap();
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.output, PathBuf::from("b"));
        assert_eq!(c.workers, 4);
    }

    #[test]
    fn echo_round_trips() {
        for text in [
            "",
            "experiment = \"class_shot_gen\"\n[tasks]\nsigma = 0.2",
            "experiment = \"sine_sample_sweep\"\neval_seed = 4\nseeds = [3, 4]\n[tasks]\namplitude = \"narrow\"",
            "[model]\nloss_hidden = [8]\nactivation = \"tanh\"\n[schedule]\nlr = 0.0005",
        ] {
            let c = parse_config(text).unwrap();
            let echo = c.to_toml();
            assert_eq!(parse_config(&echo).unwrap(), c, "{echo}");
            assert_eq!(parse_config(&echo).unwrap().to_toml(), echo);
        }
    }

    #[test]
    fn method_specs_carry_the_method_specific_rate() {
        let c = parse_config("").unwrap();
        assert_eq!(c.method_spec(Method::Maml, 5).inner_lr, 0.01);
        assert_eq!(c.method_spec(Method::Cavia, 5).inner_lr, 1.0);
        assert!(c.method_spec(Method::Cavia, 5).loss_hidden.is_empty());
        assert_eq!(c.method_spec(Method::RelViable, 5).loss_hidden, vec![32, 32, 32]);
    }
}
