use gprop_core::testkit::{self, QueueOp};
use proptest::prelude::*;

#[test]
fn linearized_model_over_12000_operations() {
    let ops = testkit::queue_model_check(11, 60, 200).unwrap();
    assert_eq!(ops, 12_000);
}

#[test]
fn concurrent_claims_never_double_issue() {
    for round in 0..5 {
        assert_eq!(testkit::concurrent_claim_stress(2_000, 8), Ok(2_000), "round {round}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn queue_matches_model(ops in prop::collection::vec(testkit::queue_op(12), 1..120), lease in 1u64..50) {
        testkit::run_queue_model(&ops, lease).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn expiry_then_late_submission() {
    let ops = vec![
        QueueOp::Enqueue(vec![1, 2]),
        QueueOp::Claim(0),
        QueueOp::Tick(10),
        QueueOp::Claim(1),
        QueueOp::Submit(1),
        QueueOp::Submit(1),
        QueueOp::Collect(0),
        QueueOp::Terminate,
        QueueOp::Claim(0),
        QueueOp::Collect(1),
    ];
    testkit::run_queue_model(&ops, 5).unwrap();
}
