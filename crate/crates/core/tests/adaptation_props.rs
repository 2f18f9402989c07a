mod common;

use tokprune::adaptation::{Evaluator, IntentTask, LabeledText, SearchSpace};
use tokprune::bench::with_threads;
use tokprune::{Error, PruneConfig};

use common::{synthetic_tasks, synthetic_vocab, tiny_model};

fn small_space() -> SearchSpace {
    SearchSpace {
        s_values: vec![4, 8],
        q_values: vec![0.5, 1.0],
        l_values: vec![1, 2],
    }
}

#[test]
fn keeping_everything_scores_like_unpruned() {
    let model = tiny_model(2, 2, 16, 1);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    for task in synthetic_tasks(2, 3, 5) {
        let plain = ev.evaluate_config(None, &task).unwrap();
        let full = ev
            .evaluate_config(Some(&PruneConfig::new(2, 1.0, 1).unwrap()), &task)
            .unwrap();
        assert_eq!(plain, full);
    }
}

#[test]
fn dev_equal_to_train_is_memorized() {
    let model = tiny_model(2, 2, 32, 3);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    let mut task = synthetic_tasks(1, 3, 7).remove(0);
    task.dev = task.train.clone();
    assert_eq!(ev.evaluate_config(None, &task).unwrap(), 1.0);
}

#[test]
fn search_is_deterministic_and_covers_the_grid() {
    let model = tiny_model(2, 2, 16, 4);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    let tasks = synthetic_tasks(2, 3, 11);
    let space = small_space();
    let a = ev.search(&space, &tasks).unwrap();
    let b = ev.search(&space, &tasks).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.table.len(), space.len());
    let configs: Vec<PruneConfig> = a.table.iter().map(|e| e.config).collect();
    assert_eq!(configs, space.configs());
    assert_eq!(a.tasks, vec!["task0", "task1"]);
    let parallel = with_threads(4, || ev.search(&space, &tasks).unwrap()).unwrap();
    assert_eq!(parallel, a);
}

#[test]
fn singleton_space_returns_its_only_config() {
    let model = tiny_model(2, 2, 16, 4);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    let space = SearchSpace {
        s_values: vec![6],
        q_values: vec![0.7],
        l_values: vec![2],
    };
    let r = ev.search(&space, &synthetic_tasks(1, 2, 1)).unwrap();
    assert_eq!(r.best, PruneConfig::new(6, 0.7, 2).unwrap());
    assert_eq!(r.table.len(), 1);
}

#[test]
fn a_bad_task_aborts_the_search_and_is_named() {
    let model = tiny_model(2, 2, 16, 4);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    let mut tasks = synthetic_tasks(2, 2, 3);
    tasks.push(IntentTask {
        name: "broken".into(),
        train: vec![
            LabeledText::new("w1 w2", "only"),
            LabeledText::new("w3", "only"),
        ],
        dev: vec![LabeledText::new("w4", "only")],
    });
    match ev.search(&small_space(), &tasks) {
        Err(Error::Task { task, source }) => {
            assert_eq!(task, "broken");
            assert!(matches!(*source, Error::DegenerateTask(_)));
        }
        other => panic!("expected a task error, got {other:?}"),
    }
    assert!(matches!(
        ev.search(&small_space(), &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn pruning_layer_beyond_depth_is_a_config_error() {
    let model = tiny_model(2, 2, 16, 4);
    let vocab = synthetic_vocab();
    let ev = Evaluator::new(&model, &vocab);
    let space = SearchSpace {
        s_values: vec![4],
        q_values: vec![0.5],
        l_values: vec![3],
    };
    let err = ev.search(&space, &synthetic_tasks(1, 2, 1)).unwrap_err();
    assert!(matches!(err.root(), Error::Config(_)));
}
