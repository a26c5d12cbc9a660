use clasp_bench::{records, trainer};

#[test]
fn fixtures_are_deterministic_and_trainable() {
    let a = records(20);
    assert_eq!(a, records(20));
    let mut t = trainer(4);
    let first = t.train_step(&a).unwrap();
    assert!(first.total.is_finite());
    assert_eq!(t.step, 1);
}
