use lmrcbt::gradsuite::{run, Scope};
use lmrcbt::tensor::gradcheck::GradCheckConfig;
use lmrcbt::tensor::OpKind;

#[test]
fn every_scope_passes() {
    let cfg = GradCheckConfig::default();
    for scope in Scope::ALL {
        for r in run(scope, &cfg).unwrap() {
            assert!(r.passed, "{scope}/{}: {:.3e}", r.unit, r.max_rel_error);
        }
    }
}

#[test]
fn ops_scope_covers_every_backward_rule() {
    let reports = run(Scope::Ops, &GradCheckConfig::default()).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.unit.as_str()).collect();
    for k in OpKind::DIFFERENTIABLE {
        assert!(names.contains(&k.name()), "{}", k.name());
    }
}

#[test]
fn sign_flip_in_one_rule_is_named() {
    let cfg = GradCheckConfig {
        fault: Some(OpKind::Softmax),
        ..Default::default()
    };
    let reports = run(Scope::Ops, &cfg).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.unit.as_str()).collect();
    assert!(failed.contains(&"softmax"), "{failed:?}");
    let layers = run(Scope::Layers, &cfg).unwrap();
    assert!(layers.iter().any(|r| r.unit == "multi_head_self_attention" && !r.passed));
}
