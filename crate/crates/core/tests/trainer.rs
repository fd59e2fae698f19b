mod common;

use std::sync::Arc;

use indexmap::IndexMap;

use common::runs::tiny;
use vpl_core::trainer::{evaluate_store, Checkpoint, MetricsRow, Role, RunConfig, Trainer};
use vpl_core::Tensor;

fn trainable(t: &Trainer, role: Role) -> IndexMap<String, Tensor> {
    let b = t.branch(role).unwrap();
    b.store.trainable().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn run(config: RunConfig) -> (Trainer, Vec<MetricsRow>) {
    let mut t = Trainer::new(config).unwrap();
    let rows = t.run().unwrap();
    (t, rows)
}

fn csv(rows: &[MetricsRow]) -> Vec<String> {
    rows.iter().map(MetricsRow::csv_line).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let config = tiny(&["optim.cnn.lr=0", "optim.trans.lr=0", "epochs=2"]);
    let before = Trainer::new(config.clone()).unwrap();
    let (after, rows) = run(config);
    for role in Role::BOTH {
        assert_eq!(trainable(&before, role), trainable(&after, role));
    }
    assert_eq!(rows[1].optimizer_steps, 8);
}

#[test]
fn losses_follow_the_stages() {
    let (_, rows) = run(tiny(&[]));
    let trace: Vec<(u8, bool, bool)> = rows.iter().map(|r| (r.stage, r.losses.cl.is_some(), r.losses.kl.is_some())).collect();
    assert_eq!(
        trace,
        [(1, true, false), (2, true, true), (2, true, true), (2, true, true), (3, false, true)]
    );
    for r in &rows {
        assert!(r.losses.ce_cnn.is_some() && r.losses.ce_trans.is_some());
    }
}

#[test]
fn first_stage_cnn_matches_independent_training() {
    let mut vpl = Trainer::new(tiny(&[])).unwrap();
    let mut ind = Trainer::new(tiny(&["mode=independent", "stage.x_percent=", "stage.y_percent="])).unwrap();
    assert_eq!(trainable(&vpl, Role::Cnn), trainable(&ind, Role::Cnn));
    let (rv, ri) = (vpl.run_epoch().unwrap(), ind.run_epoch().unwrap());
    assert_eq!(vpl.branch(Role::Cnn).unwrap().store, ind.branch(Role::Cnn).unwrap().store);
    assert_eq!(rv.eval_cnn, ri.eval_cnn);
    assert_eq!(rv.losses.ce_cnn, ri.losses.ce_cnn);
    assert_ne!(trainable(&vpl, Role::Trans), trainable(&ind, Role::Trans));
    vpl.run_epoch().unwrap();
    ind.run_epoch().unwrap();
    assert_ne!(trainable(&vpl, Role::Cnn), trainable(&ind, Role::Cnn));
}

#[test]
fn disabling_one_branch_does_not_change_the_other() {
    let ind = ["mode=independent", "stage.x_percent=", "stage.y_percent=", "epochs=2"];
    let (both, rb) = run(tiny(&ind));
    let (solo, rs) = run(tiny(&[&ind[..], &["trans.enabled=false"]].concat()));
    assert!(solo.branch(Role::Trans).is_none());
    assert_eq!(both.branch(Role::Cnn).unwrap().store, solo.branch(Role::Cnn).unwrap().store);
    assert_eq!(rb[1].eval_cnn, rs[1].eval_cnn);
    assert_eq!(rs[1].eval_trans, None);
    assert!(rs[1].csv_line().contains(",,"));
}

#[test]
fn ema_weights_are_what_gets_evaluated() {
    let (t, rows) = run(tiny(&["ema=on", "ema.decay_max=0.9", "epochs=2"]));
    assert_eq!(rows[1].eval_weights, "ema");
    for role in Role::BOTH {
        let b = t.branch(role).unwrap();
        let shadow = b.ema.as_ref().unwrap().apply_to(&b.store).unwrap();
        assert_ne!(shadow, b.store);
        let acc = evaluate_store(&b.branch, &shadow, t.eval_data(), 256).unwrap();
        let reported = if role == Role::Cnn { rows[1].eval_cnn } else { rows[1].eval_trans };
        assert_eq!(Some(acc), reported);
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (_, a) = run(tiny(&[]));
    let (_, b) = run(tiny(&["loader.prefetch=2"]));
    let (_, c) = run(tiny(&["seed=1"]));
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(csv(&a), csv(&c));
}

#[test]
fn resumed_run_continues_exactly() {
    let (full, rows) = run(tiny(&["ema=on"]));
    let mut first = Trainer::new(tiny(&["ema=on"])).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
    let (train, eval) = (first.train_data().clone(), first.eval_data().clone());
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&ckpt, train, eval).unwrap();
    assert_eq!(resumed.next_epoch(), 2);
    let rest = resumed.run().unwrap();
    assert_eq!(csv(&rest), csv(&rows[2..]));
    assert_eq!(resumed.checkpoint(), full.checkpoint());
}

#[test]
fn dml_takes_two_steps_per_batch() {
    let (t, rows) = run(tiny(&["mode=dml", "stage.x_percent=", "stage.y_percent=", "epochs=2"]));
    assert_eq!(t.batches_per_epoch(), 4);
    assert_eq!(rows[0].optimizer_steps, 8);
    assert_eq!(rows[1].optimizer_steps, 16);
    for role in Role::BOTH {
        assert_eq!(t.branch(role).unwrap().optim.step, 8);
    }
    assert!(rows[0].losses.kl.unwrap() > 0.0);
    let (v, rv) = run(tiny(&["epochs=2"]));
    assert_eq!(rv[1].optimizer_steps, 8);
    assert_eq!(v.branch(Role::Cnn).unwrap().optim.step, 8);
}

fn teacher() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let (t, _) = run(tiny(&["epochs=2"]));
    let path = dir.path().join("teacher.bin");
    t.checkpoint().save(&path).unwrap();
    let p = path.to_str().unwrap().to_string();
    (dir, p)
}

fn distill(path: &str, extra: &[&str]) -> RunConfig {
    let t = format!("distill.teacher={path}");
    let base = ["mode=distill", "stage.x_percent=", "stage.y_percent=", "epochs=2", &t];
    tiny(&[&base[..], extra].concat())
}

#[test]
fn distillation_freezes_the_teacher() {
    let (_dir, path) = teacher();
    let saved = Checkpoint::load(path.as_ref()).unwrap();
    let want = saved.branch(Role::Trans).unwrap().eval_store().unwrap();
    let (t, rows) = run(distill(&path, &["distill.teacher_role=trans"]));
    let tb = t.branch(Role::Trans).unwrap();
    assert!(tb.frozen);
    assert_eq!(tb.store, want);
    assert_eq!(tb.optim.step, 0);
    assert!(rows[0].losses.kl.is_some() && rows[0].losses.cl.is_none());
    assert_eq!(rows[0].lr_trans, None);
}

#[test]
fn zero_weight_distillation_is_plain_training() {
    let (_dir, path) = teacher();
    let (off, _) = run(distill(&path, &["distill.teacher_role=trans", "distill.weight=0"]));
    let (on, _) = run(distill(&path, &["distill.teacher_role=trans", "distill.weight=1"]));
    let (ind, _) = run(tiny(&["mode=independent", "stage.x_percent=", "stage.y_percent=", "epochs=2"]));
    assert_eq!(off.branch(Role::Cnn).unwrap().store, ind.branch(Role::Cnn).unwrap().store);
    assert_ne!(on.branch(Role::Cnn).unwrap().store, ind.branch(Role::Cnn).unwrap().store);

    let (off, _) = run(distill(&path, &["distill.teacher_role=cnn", "distill.weight=0"]));
    let (on, rows) = run(distill(&path, &["distill.teacher_role=cnn", "distill.weight=1"]));
    assert_eq!(off.branch(Role::Trans).unwrap().store, ind.branch(Role::Trans).unwrap().store);
    assert_ne!(on.branch(Role::Trans).unwrap().store, ind.branch(Role::Trans).unwrap().store);
    assert!(rows[0].losses.cl.is_some());
}

#[test]
fn memorizes_a_small_training_set() {
    let config = tiny(&[
        "mode=independent",
        "stage.x_percent=",
        "stage.y_percent=",
        "trans.enabled=false",
        "epochs=30",
        "optim.cnn.lr=0.01",
        "data.classes=10",
        "data.synthetic.noise=0",
        "data.synthetic.train_samples=64",
    ]);
    let train = Arc::new(config.data.load(vpl_core::data::Split::Train).unwrap());
    let mut t = Trainer::with_data(config, train.clone(), train).unwrap();
    let rows = t.run().unwrap();
    let first = rows.iter().position(|r| r.eval_cnn.unwrap().top1 == 1.0);
    assert!(first.is_some(), "final train top-1 {:?}", rows.last().unwrap().eval_cnn);
    assert_eq!(rows.last().unwrap().eval_cnn.unwrap().top1, 1.0);
}

#[test]
fn mismatched_data_is_rejected() {
    let config = tiny(&[]);
    let other = tiny(&["data.classes=3"]);
    let train = Arc::new(other.data.load(vpl_core::data::Split::Train).unwrap());
    assert!(Trainer::with_data(config, train.clone(), train).is_err());
}
