//! Reverse-mode gradients against central finite differences in f64.

mod common;

use common::{check_primitive, FD_INSTANCES, FD_TOLERANCE};

fn assert_primitive(name: &str) {
    let err = check_primitive(name, FD_INSTANCES);
    assert!(err < FD_TOLERANCE, "{name}: worst relative error {err:e}");
}

#[test]
fn conv2d_gradients() {
    assert_primitive("conv2d");
}

#[test]
fn factorized_pair_gradients() {
    assert_primitive("factorized");
}

#[test]
fn dense_gradients() {
    assert_primitive("dense");
}

#[test]
fn relu_gradients() {
    assert_primitive("relu");
}

#[test]
fn maxpool_gradients() {
    assert_primitive("maxpool");
}

#[test]
fn batchnorm_gradients() {
    assert_primitive("batchnorm");
}

#[test]
fn softmax_gradients() {
    assert_primitive("softmax");
}

#[test]
fn cross_entropy_gradients() {
    assert_primitive("cross_entropy");
}

#[test]
fn triplet_gradients() {
    assert_primitive("triplet");
}

#[test]
fn combined_loss_gradients() {
    assert_primitive("combined");
}
