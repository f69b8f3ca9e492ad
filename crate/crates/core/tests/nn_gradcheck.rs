//! Finite-difference verification of every backward pass, in f64.

use rand::Rng;
use sedlab::nn::*;
use sedlab::objectives::{bce, LossConfig, LossKind};
use sedlab::seed;

fn randn(n: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s, &[]);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn binary(n: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s, &[]);
    (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect()
}

/// Treats an input tensor as a parameter so its gradient is checked too.
struct WithInput<M> {
    input: Param<f64>,
    inner: M,
}

impl<M: Trainable<f64>> Trainable<f64> for WithInput<M> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.input);
        self.inner.visit_params(f);
    }
}

fn input(shape: &[usize], s: u64) -> Param<f64> {
    let n = shape.iter().product();
    Param::new("input", Tensor::from_vec(shape, randn(n, s)).unwrap())
}

/// Linear functional `sum(r * y)`: its gradient with respect to `y` is `r`.
fn probe_loss(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

#[test]
fn linear_probe_bce_is_exact() {
    let mut rng = seed::rng(1, &[]);
    let mut m = LinearProbe::<f64>::new(5, 3, &mut rng);
    let x = randn(7 * 5, 2);
    let y = binary(7 * 3, 3);
    let rep = grad_check(
        &mut m,
        |m, g| {
            let p = m.forward(&x)?;
            let l = bce(&p, &y, 1e-7)?;
            if g {
                m.backward(&l.grad)?;
            }
            Ok(l.value)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

fn conv_check(batch_norm: bool, train: bool) -> GradCheckReport {
    let spec = ConvSpec {
        out_channels: 3,
        pool_t: 2,
        pool_f: 2,
    };
    let block = ConvBlock::<f64>::new("c", 1, spec, batch_norm, &mut seed::rng(4, &[]));
    let mut m = WithInput {
        input: input(&[2, 1, 6, 6], 5),
        inner: block,
    };
    if let Some(bn) = &mut m.inner.bn {
        bn.gamma.value.data = vec![1.3, 0.7, -0.9];
        bn.beta.value.data = vec![0.1, -0.2, 0.3];
        bn.running_mean = vec![0.1, -0.1, 0.05];
        bn.running_var = vec![0.8, 1.2, 0.5];
    }
    let r = randn(2 * 3 * 3 * 3, 6);
    grad_check(
        &mut m,
        |m, g| {
            let (y, _) = m.inner.forward(&m.input.value.data, [2, 1, 6, 6], train)?;
            if g {
                let dx = m.inner.backward(&r, true)?.unwrap();
                m.input.grad.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            Ok(probe_loss(&y, &r))
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
}

#[test]
fn conv_block_with_batch_norm() {
    let rep = conv_check(true, true);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn conv_block_eval_mode() {
    let rep = conv_check(true, false);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn conv_block_without_batch_norm() {
    let rep = conv_check(false, true);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

struct NoParams;

impl Trainable<f64> for NoParams {
    fn visit_params(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
}

#[test]
fn freq_pool_gradient() {
    let s = [2, 3, 4, 7];
    let mut m = WithInput {
        input: input(&s, 7),
        inner: NoParams,
    };
    let r = randn(2 * 4 * 3 * 3, 8);
    let rep = grad_check(
        &mut m,
        |m, g| {
            let y = freq_pool(&m.input.value.data, s, 3)?;
            if g {
                let dx = freq_pool_backward(&r, s, 3);
                m.input.grad.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            Ok(probe_loss(&y, &r))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn bigru_gradient() {
    let gru = BiGru::<f64>::new("g", 8, 4, &mut seed::rng(9, &[]));
    let mut m = WithInput {
        input: input(&[2, 5, 8], 10),
        inner: gru,
    };
    // Non-zero biases so every gate path carries gradient.
    m.inner.visit_params(&mut |p| {
        if p.name.contains(".b_") {
            p.value.data = randn(p.len(), p.name.len() as u64);
        }
    });
    let r = randn(2 * 5 * 8, 11);
    let rep = grad_check(
        &mut m,
        |m, g| {
            let y = m.inner.forward(&m.input.value.data, 2, 5)?;
            if g {
                let dx = m.inner.backward(&r)?;
                m.input.grad.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            Ok(probe_loss(&y, &r))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    assert!(rep.checked > 200);
}

#[test]
fn head_gradient_through_bce() {
    let head = Head::<f64>::new("h", 6, 3, 2, &mut seed::rng(12, &[]));
    let mut m = WithInput {
        input: input(&[2, 4, 6], 13),
        inner: head,
    };
    let y = binary(2 * 2 * 3, 14);
    let rep = grad_check(
        &mut m,
        |m, g| {
            let p = m.inner.forward(&m.input.value.data, 2, 4)?;
            let l = bce(&p, &y, 1e-7)?;
            if g {
                let dx = m.inner.backward(&l.grad)?;
                m.input.grad.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            Ok(l.value)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

pub fn micro_config() -> CrnnConfig {
    CrnnConfig {
        input_channels: 4,
        conv_blocks: parse_conv_blocks("3:2x2,4:1x2").unwrap(),
        freq_bands: 2,
        gru_units: 3,
        n_classes: 3,
        label_pool: 2,
        batch_norm: true,
    }
}

fn crnn_check(loss: LossKind, scale: f64) -> GradCheckReport {
    let mut m = Crnn::<f64>::new(&micro_config(), 15).unwrap();
    let shape = [2, 4, 8, 16];
    let x = randn(shape.iter().product(), 16);
    let y = binary(2 * 2 * 3, 17);
    let cfg = LossConfig::default();
    grad_check(
        &mut m,
        |m, g| {
            if g {
                Ok(m.loss_and_grad(&x, shape, &y, loss, &cfg)?.0)
            } else {
                let p = m.forward(&x, shape, true)?;
                Ok(loss.evaluate(&p, &y, 2, &cfg)?.value)
            }
        },
        &GradCheckOptions {
            grad_scale: scale,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn full_crnn_bce_dice() {
    let rep = crnn_check(LossKind::BceDice, 1.0);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn full_crnn_bce() {
    let rep = crnn_check(LossKind::Bce, 1.0);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let rep = crnn_check(LossKind::BceDice, 1.01);
    assert!(rep.max_rel_error > 1e-3, "{rep:?}");
}
