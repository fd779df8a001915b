mod common;

use common::{gradient_suite, FD_TOL};

fn check(kind: &str) {
    let worst = gradient_suite(kind, 20);
    assert!(worst < FD_TOL, "{kind}: worst relative error {worst:e}");
}

#[test]
fn linear_gradients() {
    check("linear");
}

#[test]
fn batchnorm_gradients() {
    check("batchnorm2d");
}

#[test]
fn repu_gradients() {
    check("repu1");
    check("repu2");
    check("repu3");
}

#[test]
fn maxpool_gradients() {
    check("maxpool2d");
}

#[test]
fn flatten_gradients() {
    check("flatten");
}

#[test]
fn composed_head_gradients() {
    check("head");
}
