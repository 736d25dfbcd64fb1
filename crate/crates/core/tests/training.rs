use avidonet::evaluation::{evaluate_run, EvalConfig};
use avidonet::model::{Architecture, DeepONet, ModelKind};
use avidonet::problems::{build_dataset, DatasetSpec, ProblemId};
use avidonet::training::{train, TrainConfig};

fn data() -> (avidonet::problems::OperatorDataset, avidonet::problems::OperatorDataset) {
    let train_set = build_dataset(&DatasetSpec { n_examples: 50, ..DatasetSpec::training(ProblemId::Antiderivative, 0) }).unwrap();
    let test_set = build_dataset(&DatasetSpec::test(ProblemId::Antiderivative, 20, 1)).unwrap();
    (train_set, test_set)
}

#[test]
fn variational_loss_decreases() {
    let (train_set, test_set) = data();
    let arch = Architecture::for_problem(ProblemId::Antiderivative, 100);
    let mut model = DeepONet::init(arch, ModelKind::Variational, 0).unwrap();
    let cfg = TrainConfig { epochs: 300, n_mc: 5, alpha: 1.25, ..Default::default() };
    let run = train(&mut model, &train_set, &cfg).unwrap();
    assert!(run.fault.is_none());
    assert_eq!(run.epochs_completed, 300);
    assert_eq!(run.loss_history.len(), 30);
    let (first, last) = (run.loss_history[0].1, run.loss_history.last().unwrap().1);
    assert!(last < 0.9 * first, "{first} -> {last}");
    let m = evaluate_run(&model, &test_set, &EvalConfig { draws: 10, ..Default::default() }).unwrap();
    assert!(m.nmse.is_finite() && m.nll.is_some());
}

#[test]
fn deterministic_training_fits() {
    let (train_set, test_set) = data();
    let arch = Architecture::for_problem(ProblemId::Antiderivative, 100);
    let mut model = DeepONet::init(arch, ModelKind::Deterministic, 0).unwrap();
    let before = evaluate_run(&model, &test_set, &EvalConfig::default()).unwrap().nmse;
    let run = train(&mut model, &train_set, &TrainConfig { epochs: 500, ..Default::default() }).unwrap();
    let after = evaluate_run(&model, &test_set, &EvalConfig::default()).unwrap();
    assert!(run.converged);
    assert!(after.nll.is_none());
    assert!(after.nmse < 0.5 * before, "{before} -> {}", after.nmse);
}

#[test]
fn checkpoints_round_trip() {
    let arch = Architecture::for_problem(ProblemId::Pendulum, 100);
    let model = DeepONet::init(arch, ModelKind::Variational, 8).unwrap();
    let mut buf = Vec::new();
    model.write_to(&mut buf).unwrap();
    assert_eq!(DeepONet::read_from(&buf[..]).unwrap(), model);
}
