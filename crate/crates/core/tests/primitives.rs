//! Central-difference checks of every differentiable tape operation.

use m3dnca::autodiff::{LossParams, NodeId, Tape};
use m3dnca::ops::{BatchNormParams, BnMode};
use m3dnca::rng;
use m3dnca::tensor::Tensor;
use rand::Rng;

fn random(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Build `Σ w ⊙ f(inputs)` with a fixed random `w`, differentiate, and
/// compare against central differences in every input element.
fn check(inputs: Vec<Tensor>, tol: f64, f: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let scalar = |tape: &mut Tape, ids: &[NodeId]| {
        let out = f(tape, ids);
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(random(&shape, -1.0, 1.0, 99));
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let s = scalar(&mut tape, &ids);
        tape.value(s).data()[0] as f64
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let s = scalar(&mut tape, &ids);
    let grads = tape.backward(s).unwrap();
    let h = 1e-2f32;
    for (k, t) in inputs.iter().enumerate() {
        let g = grads.wrt(ids[k]);
        for i in 0..t.len() {
            let mut ins = inputs.clone();
            ins[k].data_mut()[i] += h;
            let up = eval(&ins);
            ins[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&ins);
            let num = (up - down) / (2.0 * h as f64);
            let ana = g.data()[i] as f64;
            assert!(
                (ana - num).abs() <= tol * num.abs().max(1.0),
                "input {k} element {i}: analytic {ana} vs numeric {num}"
            );
        }
    }
}

#[test]
fn conv() {
    for k in [1, 3, 5] {
        check(
            vec![random(&[1, 2, 4, 3, 5], -1.0, 1.0, 1), random(&[2, k, k, k], -1.0, 1.0, 2)],
            1e-2,
            |t, ids| t.conv(ids[0], ids[1]).unwrap(),
        );
    }
}

#[test]
fn concat_and_dense() {
    check(
        vec![
            random(&[2, 2, 2, 3, 2], -1.0, 1.0, 3),
            random(&[2, 1, 2, 3, 2], -1.0, 1.0, 4),
            random(&[4, 3], -1.0, 1.0, 5),
            random(&[4], -1.0, 1.0, 6),
        ],
        1e-2,
        |t, ids| {
            let x = t.concat(ids[0], ids[1]).unwrap();
            t.dense(x, ids[2], ids[3]).unwrap()
        },
    );
}

#[test]
fn batchnorm_train_mode() {
    check(
        vec![
            random(&[2, 3, 2, 2, 3], -1.0, 1.0, 7),
            random(&[3], 0.5, 1.5, 8),
            random(&[3], -0.5, 0.5, 9),
        ],
        2e-2,
        |t, ids| {
            let mut stats = BatchNormParams::new(3);
            t.batchnorm(ids[0], ids[1], ids[2], &mut stats, BnMode::Train).unwrap()
        },
    );
}

#[test]
fn batchnorm_eval_mode() {
    check(
        vec![random(&[1, 3, 2, 2, 2], -1.0, 1.0, 10), random(&[3], 0.5, 1.5, 11), random(&[3], -0.5, 0.5, 12)],
        1e-2,
        |t, ids| {
            let mut stats = BatchNormParams::new(3);
            stats.running_mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            stats.running_var = Tensor::new(vec![3], vec![0.5, 2.0, 1.0]).unwrap();
            t.batchnorm(ids[0], ids[1], ids[2], &mut stats, BnMode::Eval).unwrap()
        },
    );
}

#[test]
fn relu_away_from_the_kink() {
    let mut x = random(&[1, 1, 2, 2, 4], 0.1, 1.0, 13);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check(vec![x], 1e-2, |t, ids| t.relu(ids[0]));
}

#[test]
fn masked_add_and_replace_channel() {
    let mask: Vec<f32> = (0..2 * 12).map(|i| (i % 3 == 0) as u8 as f32).collect();
    check(
        vec![random(&[2, 3, 1, 3, 4], -1.0, 1.0, 14), random(&[2, 3, 1, 3, 4], -1.0, 1.0, 15)],
        1e-2,
        move |t, ids| {
            let s = t.masked_add(ids[0], ids[1], mask.clone()).unwrap();
            t.replace_channel(s, 0, &[0.5; 24]).unwrap()
        },
    );
}

#[test]
fn sigmoid_and_loss() {
    let target = Tensor::from_fn(vec![2, 1, 2, 2, 3], |i| (i % 3 == 1) as u8 as f32);
    check(vec![random(&[2, 2, 2, 2, 3], -2.0, 2.0, 16)], 1e-2, move |t, ids| {
        let p = t.sigmoid_channel(ids[0], 1).unwrap();
        let l = t.dice_focal(p, &target, LossParams::default()).unwrap();
        // keep the output non-scalar-shaped for the weighting in `check`
        t.mul(l, l).unwrap()
    });
}

#[test]
fn parameters_used_twice_accumulate() {
    check(vec![random(&[1, 1, 2, 2, 2], -1.0, 1.0, 17)], 1e-2, |t, ids| {
        let a = t.relu(ids[0]);
        t.mul(a, ids[0]).unwrap()
    });
}
