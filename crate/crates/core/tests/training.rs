mod common;

use eln_autograd::{ParamStore, Tensor};
use eln_core::experiment::prepare_data;
use eln_core::networks::{is_student_param, SegNetwork};
use eln_core::training::{
    ema_update, sample_labeled_batch, sample_unlabeled_batch, EmaState, Stage, TrainState, Trainer,
};

fn setup() -> (Trainer, eln_core::experiment::PreparedData) {
    let cfg = common::tiny_experiment(std::path::Path::new("unused"));
    let net = SegNetwork::new(cfg.model.clone()).unwrap();
    let trainer = Trainer::new(net, cfg.train.clone(), 3).unwrap();
    (trainer, prepare_data(&cfg, 3).unwrap())
}

fn changed(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Vec<String> {
    a.iter().filter(|(k, v)| b.get(k).unwrap().data() != v.data()).map(|(k, _)| k.clone()).collect()
}

fn stage_state(trainer: &Trainer, data: &eln_core::experiment::PreparedData, stage: Stage) -> TrainState {
    let mut st = trainer.init_state();
    trainer.run_stage(&mut st, &data.split, 2, &mut |_, _| Ok(())).unwrap();
    for s in [Stage::Stage1, Stage::Stage2] {
        if s > stage {
            break;
        }
        st.enter_stage(s, &trainer.config).unwrap();
        trainer.run_stage(&mut st, &data.split, 2, &mut |_, _| Ok(())).unwrap();
    }
    st
}

#[test]
fn pretraining_updates_only_the_student() {
    let (trainer, data) = setup();
    let mut st = trainer.init_state();
    let before = st.params.clone();
    let batch = sample_labeled_batch(&data.split, &trainer.config, 3, Stage::Pretrain, 0).unwrap();
    trainer.pretrain_step(&mut st, &batch).unwrap();
    let moved = changed(&before, &st.params);
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|k| is_student_param(k)), "{moved:?}");
}

#[test]
fn steps_refuse_the_wrong_stage() {
    let (trainer, data) = setup();
    let mut st = trainer.init_state();
    let batch = sample_labeled_batch(&data.split, &trainer.config, 3, Stage::Stage1, 0).unwrap();
    assert!(trainer.stage1_step(&mut st, &batch).is_err());
    st.enter_stage(Stage::Stage1, &trainer.config).unwrap();
    assert!(st.enter_stage(Stage::Pretrain, &trainer.config).is_err());
}

#[test]
fn zero_validity_stage2_equals_a_labeled_step() {
    let (trainer, data) = setup();
    let mut st = stage_state(&trainer, &data, Stage::Stage2);
    let mut as_stage1 = st.clone();
    as_stage1.stage = Stage::Stage1;
    let it = st.iteration;
    let labeled = sample_labeled_batch(&data.split, &trainer.config, 3, Stage::Stage2, it).unwrap();
    let unlabeled = sample_unlabeled_batch(&data.split, &trainer.config, 3, it).unwrap();
    let (n, _, h, w) = unlabeled.teacher_view.dims4().unwrap();
    let zeros = Tensor::full(&[n, 1, h, w], 0.0f32);
    let rec = trainer.stage2_step(&mut st, &labeled, &unlabeled, Some(&zeros)).unwrap();
    assert_eq!(rec.losses["pseudo"], 0.0);
    assert_eq!(rec.losses["contra"], 0.0);
    trainer.stage1_step(&mut as_stage1, &labeled).unwrap();
    assert!(changed(&st.params, &as_stage1.params).is_empty());
}

#[test]
fn teacher_follows_the_ema_of_the_student_only() {
    let (trainer, data) = setup();
    let st0 = stage_state(&trainer, &data, Stage::Stage2);
    let mut st = st0.clone();
    let it = st.iteration;
    let labeled = sample_labeled_batch(&data.split, &trainer.config, 3, Stage::Stage2, it).unwrap();
    let unlabeled = sample_unlabeled_batch(&data.split, &trainer.config, 3, it).unwrap();
    trainer.stage2_step(&mut st, &labeled, &unlabeled, None).unwrap();
    let before = st0.teacher.as_ref().unwrap();
    let after = st.teacher.as_ref().unwrap();
    assert_eq!(after.step, before.step + 1);
    for (name, t) in after.teacher.iter() {
        let old = before.teacher.get(name).unwrap().data();
        let s = st.params.get(name).unwrap().data();
        for i in 0..t.len() {
            let want = (0.995 * f64::from(old[i]) + 0.005 * f64::from(s[i])) as f32;
            assert_eq!(t.data()[i], want, "{name}[{i}]");
        }
    }
    assert!(after.teacher.iter().all(|(k, _)| is_student_param(k)));
}

#[test]
fn frozen_error_modules_do_not_move() {
    let (mut trainer, data) = setup();
    trainer.config.stage2.freeze_eln = true;
    let mut st = stage_state(&trainer, &data, Stage::Stage2);
    let before = st.params.clone();
    let it = st.iteration;
    let labeled = sample_labeled_batch(&data.split, &trainer.config, 3, Stage::Stage2, it).unwrap();
    let unlabeled = sample_unlabeled_batch(&data.split, &trainer.config, 3, it).unwrap();
    trainer.stage2_step(&mut st, &labeled, &unlabeled, None).unwrap();
    let moved = changed(&before, &st.params);
    assert!(moved.iter().all(|k| !k.starts_with("eln.") && !k.starts_with("secn.")), "{moved:?}");
    assert!(moved.iter().any(|k| k.starts_with("enc.")));
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let (trainer, data) = setup();
    let st = stage_state(&trainer, &data, Stage::Stage2);
    let ck = st.to_checkpoint(serde_json::json!({}), "h", serde_json::json!({"k": 1}));
    let mut resumed = TrainState::from_checkpoint(
        &eln_core::checkpoint::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(),
        &trainer.config.optim,
    )
    .unwrap();
    let mut straight = st.clone();
    trainer.run_stage(&mut straight, &data.split, 4, &mut |_, _| Ok(())).unwrap();
    trainer.run_stage(&mut resumed, &data.split, 4, &mut |_, _| Ok(())).unwrap();
    assert!(changed(&straight.params, &resumed.params).is_empty());
    assert_eq!(straight.teacher, resumed.teacher);
}

#[test]
fn ema_with_a_constant_student_decays_geometrically() {
    let mut student = ParamStore::new();
    student.insert("enc.w", Tensor::from_vec(&[3], vec![0.5f32, -1.0, 2.0]).unwrap());
    let mut start = ParamStore::new();
    start.insert("enc.w", Tensor::from_vec(&[3], vec![1.5f32, 0.0, -0.25]).unwrap());
    let mut ema = EmaState::from_student(&start, 0.995).unwrap();
    for t in 1..=100 {
        ema_update(&mut ema, &student).unwrap();
        let k = 0.995f64.powi(t);
        for i in 0..3 {
            let d0 = f64::from(start.get("enc.w").unwrap().data()[i] - student.get("enc.w").unwrap().data()[i]);
            let dt = f64::from(ema.teacher.get("enc.w").unwrap().data()[i]) - f64::from(student.get("enc.w").unwrap().data()[i]);
            assert!((dt - k * d0).abs() < 1e-6, "t={t} i={i}: {dt} vs {}", k * d0);
        }
    }
}
