use std::fs;
use std::path::Path;

use viable_core::checkpoint::Checkpoint;
use viable_core::config::parse_config;
use viable_core::eval::{evaluate, evaluate_tasks, EvalProtocol, Summary};
use viable_core::tasks::{AmplitudeRange, TaskFamily};
use viable_core::trainer::{stream_rng, train, Learner, Method, MethodSpec, Stream, TrainConfig};

fn short_run(method: Method, iters: u64) -> (Learner, viable_core::trainer::TrainState) {
    let learner = Learner::new(MethodSpec::sine(method, 2)).unwrap();
    let config = TrainConfig {
        iters,
        val_every: 50,
        val_tasks: 20,
        ..TrainConfig::sine(11)
    };
    let state = train(&learner, &config).unwrap();
    (learner, state)
}

#[test]
fn shipped_configs_parse_and_echo_exactly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let config = parse_config(&fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_config(&config.to_toml()).unwrap(), config);
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn trained_checkpoint_round_trips_through_disk() {
    let (learner, state) = short_run(Method::RelViable, 60);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rel.viab");
    let ckpt = Checkpoint {
        spec: learner.spec.clone(),
        state,
    };
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), fs::read(&path).unwrap());
}

#[test]
fn interval_shrinks_with_the_square_root_of_the_task_count() {
    let learner = Learner::new(MethodSpec::sine(Method::Cavia, 2)).unwrap();
    let params = learner.init_params(&mut stream_rng(0, Stream::Init, 0));
    let family = TaskFamily::Sine {
        amplitude: AmplitudeRange::Standard,
    };
    let ci = |n: usize| {
        let protocol = EvalProtocol {
            n_tasks: n,
            ..EvalProtocol::sine()
        };
        evaluate(&learner, &params, &family, &protocol, 9, 1).unwrap().ci95
    };
    let (a, b, c) = (ci(100), ci(400), ci(1600));
    for ratio in [a / b, b / c] {
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{a} {b} {c}");
    }
}

#[test]
fn more_adaptation_points_do_not_hurt_a_trained_model() {
    let (learner, state) = short_run(Method::Cavia, 300);
    let family = TaskFamily::Sine {
        amplitude: AmplitudeRange::Standard,
    };
    let base = EvalProtocol {
        n_tasks: 1000,
        ..EvalProtocol::sine()
    };
    let summaries: Vec<Summary> = [1, 2, 5, 10, 20]
        .iter()
        .map(|&k| evaluate(&learner, state.best_params(), &family, &base.with_points(k), 5, 1).unwrap())
        .collect();
    for w in summaries.windows(2) {
        assert!(w[1].mean <= w[0].mean + 2.0 * w[0].ci95.max(w[1].ci95), "{summaries:?}");
    }
}

#[test]
fn evaluation_leaves_the_model_untouched_and_repeats_exactly() {
    let (learner, state) = short_run(Method::SimViable, 40);
    let before = state.clone();
    let family = TaskFamily::Sine {
        amplitude: AmplitudeRange::Standard,
    };
    let protocol = EvalProtocol {
        n_tasks: 50,
        ..EvalProtocol::sine()
    };
    let a = evaluate_tasks(&learner, state.best_params(), &family, &protocol, 2, 1).unwrap();
    let b = evaluate_tasks(&learner, state.best_params(), &family, &protocol, 2, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(state, before);
}
