//! Tape gradients against central finite differences, one op at a time.

use lucent_core::autodiff::{ElementwiseKind, Graph, ReduceKind, Tape, Var};
use lucent_core::enhance::{enhance_on, EnhanceSpec};
use lucent_core::gradcheck::grad_check;
use lucent_core::losses::{
    color_constancy_loss, exposure_loss, spatial_consistency_loss, tv_loss, BrightnessProbeQuality, ExposureTarget,
    QualityModel,
};
use lucent_core::nn::{self, Activation, DscLayer, SpatialAttentionParams};
use lucent_core::{Result, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: Scalar = 1e-3;
const TOL: Scalar = 1e-4;

fn uniform(shape: &[usize], lo: Scalar, hi: Scalar, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let r = t.constant(uniform(t.shape(v), -1.0, 1.0, seed));
    let m = t.mul(v, r)?;
    t.sum(m)
}

fn assert_grad(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, h: Scalar) {
    let report = grad_check(f, x, h, TOL).unwrap();
    assert!(
        report.passed(),
        "rel err {:.3e} at {}: analytic {} numeric {}",
        report.max_rel_error,
        report.worst_index,
        report.analytic[report.worst_index],
        report.numeric[report.worst_index]
    );
}

#[test]
fn unary_elementwise() {
    let x = uniform(&[2, 3, 4], -2.0, 2.0, 1);
    for kind in [
        ElementwiseKind::Square,
        ElementwiseKind::Tanh,
        ElementwiseKind::Sigmoid,
        ElementwiseKind::Relu,
    ] {
        assert_grad(|t, v| {
            let y = t.elementwise(kind, v, None)?;
            weighted_sum(t, y, 2)
        }, &x, H);
    }
    let positive = uniform(&[2, 3, 4], 0.5, 2.0, 3);
    assert_grad(|t, v| {
        let y = t.sqrt(v)?;
        weighted_sum(t, y, 4)
    }, &positive, H);
}

#[test]
fn binary_elementwise_both_sides() {
    let a = uniform(&[3, 4], -2.0, 2.0, 5);
    let b = uniform(&[3, 4], -2.0, 2.0, 6);
    for kind in [ElementwiseKind::Add, ElementwiseKind::Sub, ElementwiseKind::Mul] {
        assert_grad(|t, v| {
            let other = t.constant(b.clone());
            let y = t.elementwise(kind, v, Some(other))?;
            weighted_sum(t, y, 7)
        }, &a, H);
        assert_grad(|t, v| {
            let other = t.constant(a.clone());
            let y = t.elementwise(kind, other, Some(v))?;
            weighted_sum(t, y, 8)
        }, &b, H);
    }
}

#[test]
fn reductions_reshape_and_slice() {
    let x = uniform(&[3, 4, 5], -2.0, 2.0, 9);
    for axes in [None, Some(&[0usize][..]), Some(&[1, 2][..])] {
        for kind in [ReduceKind::Sum, ReduceKind::Mean] {
            assert_grad(|t, v| {
                let y = t.reduce(kind, v, axes)?;
                weighted_sum(t, y, 10)
            }, &x, H);
        }
    }
    assert_grad(|t, v| {
        let y = t.reshape(v, &[12, 5])?;
        let s = t.slice(y, 0, 3, 4)?;
        weighted_sum(t, s, 11)
    }, &x, H);
}

#[test]
fn depthwise_padding_and_stride() {
    let x = uniform(&[3, 7, 6], -2.0, 2.0, 12);
    let k = uniform(&[3, 1, 3, 3], -2.0, 2.0, 13);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        assert_grad(|t, v| {
            let kv = t.constant(k.clone());
            let y = t.depthwise_conv2d(&v, &kv, None, stride, pad)?;
            weighted_sum(t, y, 14)
        }, &x, H);
        assert_grad(|t, v| {
            let xv = t.constant(x.clone());
            let y = t.depthwise_conv2d(&xv, &v, None, stride, pad)?;
            weighted_sum(t, y, 15)
        }, &k, H);
    }
}

#[test]
fn pointwise_all_inputs() {
    let y = uniform(&[3, 4, 3], -2.0, 2.0, 16);
    let k = uniform(&[2, 3, 1, 1], -2.0, 2.0, 17);
    let b = uniform(&[2], -2.0, 2.0, 18);
    assert_grad(|t, v| {
        let (kv, bv) = (t.constant(k.clone()), t.constant(b.clone()));
        let o = t.pointwise_conv2d(&v, &kv, Some(&bv))?;
        weighted_sum(t, o, 19)
    }, &y, H);
    assert_grad(|t, v| {
        let (yv, bv) = (t.constant(y.clone()), t.constant(b.clone()));
        let o = t.pointwise_conv2d(&yv, &v, Some(&bv))?;
        weighted_sum(t, o, 19)
    }, &k, H);
    assert_grad(|t, v| {
        let (yv, kv) = (t.constant(y.clone()), t.constant(k.clone()));
        let o = t.pointwise_conv2d(&yv, &kv, Some(&v))?;
        weighted_sum(t, o, 19)
    }, &b, H);
}

#[test]
fn dsc_layer_each_activation() {
    for (i, act) in [Activation::Relu, Activation::Tanh, Activation::None].into_iter().enumerate() {
        let layer = DscLayer::new(2, 3, act, &mut ChaCha8Rng::seed_from_u64(20 + i as u64));
        let x = uniform(&[2, 5, 5], -2.0, 2.0, 30 + i as u64);
        assert_grad(|t, v| {
            let p = layer.map(&mut |p: &Tensor| t.constant(p.clone()));
            let o = nn::dsc_layer(t, &v, &p)?;
            weighted_sum(t, o, 21)
        }, &x, H);
    }
}

#[test]
fn spatial_attention_input() {
    let p = SpatialAttentionParams::new(3, 4, &mut ChaCha8Rng::seed_from_u64(40));
    let x = uniform(&[3, 4, 4], -2.0, 2.0, 41);
    assert_grad(|t, v| {
        let pv = p.map(&mut |p: &Tensor| t.constant(p.clone()));
        let o = nn::spatial_attention_forward(t, &v, &pv)?;
        weighted_sum(t, o, 42)
    }, &x, H);
}

#[test]
fn resize_pool_concat_stencil() {
    let x = uniform(&[2, 6, 5], -2.0, 2.0, 50);
    for target in [(12, 10), (3, 2), (7, 11), (1, 1)] {
        assert_grad(|t, v| {
            let o = t.resize_bilinear(&v, target)?;
            weighted_sum(t, o, 51)
        }, &x, H);
    }
    assert_grad(|t, v| {
        let o = t.avg_pool(&v, 2)?;
        weighted_sum(t, o, 52)
    }, &x, H);
    assert_grad(|t, v| {
        let o = t.concat_channels(&[v, v])?;
        weighted_sum(t, o, 53)
    }, &x, H);
    assert_grad(|t, v| {
        let g = t.slice(v, 0, 0, 1)?;
        let o = t.stencil(g, &[0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0], 3)?;
        weighted_sum(t, o, 54)
    }, &x, H);
}

#[test]
fn analytic_losses() {
    let map = uniform(&[3, 8, 8], -1.0, 1.0, 60);
    assert_grad(tv_loss, &map, H);
    let e = uniform(&[3, 16, 12], 0.0, 1.0, 61);
    let i = uniform(&[3, 16, 12], 0.0, 1.0, 62);
    assert_grad(|t, v| {
        let iv = t.constant(i.clone());
        spatial_consistency_loss(t, v, iv)
    }, &e, H);
    assert_grad(|t, v| {
        let ev = t.constant(e.clone());
        spatial_consistency_loss(t, ev, v)
    }, &i, H);
    assert_grad(color_constancy_loss, &e, H);
    assert_grad(|t, v| exposure_loss(t, v, &ExposureTarget { level: 0.6, patch: 4 }), &e, H);
    assert_grad(|t, v| BrightnessProbeQuality::default().score(t, v), &e, H);
}

#[test]
fn unrolled_enhancer() {
    // Longer chains sharpen the curve enough that h=1e-3 truncation error
    // exceeds the tolerance on small gradient entries, so they use a finer step.
    let img = uniform(&[3, 4, 4], 0.05, 0.95, 70);
    let map = uniform(&[3, 4, 4], -1.0, 1.0, 71);
    for (n, h) in [(1, H), (2, H), (4, 1e-5), (8, 1e-5)] {
        assert_grad(|t, v| {
            let m = t.constant(map.clone());
            let o = enhance_on(t, v, m, &EnhanceSpec::new(n))?;
            weighted_sum(t, o, 72)
        }, &img, h);
        assert_grad(|t, v| {
            let x = t.constant(img.clone());
            let o = enhance_on(t, x, v, &EnhanceSpec::new(n))?;
            weighted_sum(t, o, 73)
        }, &map, h);
    }
}

#[test]
fn relu_gate_and_sqrt_at_zero() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap(), true);
    let r = tape.relu(w).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 1.0]);

    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[1]), true);
    let q = tape.sqrt(z).unwrap();
    let s = tape.sum(q).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap().data(), &[0.0]);
}
