//! Double-precision gradient checks over every differentiable building block
//! used in training.

use rand::Rng;

use crate::contrastive::info_nce_batch;
use crate::nn::{batch_norm, bin, instance_norm, Head, HeadConfig, Mode, NormSettings, NormState};
use crate::rng::rng_for;
use crate::tensor::{grad_check, Graph, LeafKind, Tensor, TensorError, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0x6C4E]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("non-empty shape")
}

/// `sum(y ⊙ w)` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(random(g.shape(y), seed, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(out: &mut Vec<GradCheck>, name: String, op: F, at: &Tensor<f64>) -> Result<(), TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let max_rel_error = grad_check(op, at, 1e-5)?;
    out.push(GradCheck { name, max_rel_error });
    Ok(())
}

fn norm_state(channels: usize, gamma: f64) -> NormState<f64> {
    NormState::new(channels, &NormSettings { gamma, ..NormSettings::default() })
}

/// Runs conv2d, batch_norm, instance_norm, bin at γ ∈ {0, 0.3, 0.5, 1}, the
/// projection head and InfoNCE at queue sizes 1, 8 and 64.
pub fn gradient_suite() -> Result<Vec<GradCheck>, TensorError> {
    let mut out = Vec::new();

    let x = random(&[2, 3, 7, 7], 1, 1.0);
    let k = random(&[4, 3, 3, 3], 2, 0.5);
    check(&mut out, "conv2d.input".into(), |g, v| {
        let kc = g.constant(k.clone());
        let y = g.conv2d(v, kc, 1, 1)?;
        project(g, y, 3)
    }, &x)?;
    check(&mut out, "conv2d.kernel".into(), |g, v| {
        let xc = g.constant(x.clone());
        let y = g.conv2d(xc, v, 2, 1)?;
        project(g, y, 4)
    }, &k)?;

    let nx = random(&[3, 2, 3, 3], 5, 1.5);
    let st = norm_state(2, 1.0);
    check(&mut out, "batch_norm".into(), |g, v| {
        let (y, _) = batch_norm(g, v, &st, Mode::Train)?;
        project(g, y, 6)
    }, &nx)?;
    check(&mut out, "instance_norm".into(), |g, v| {
        let y = instance_norm(g, v, 1e-5)?;
        project(g, y, 7)
    }, &nx)?;

    let scale = random(&[2], 8, 1.0);
    let shift = random(&[2], 9, 1.0);
    for gamma in [0.0, 0.3, 0.5, 1.0] {
        let st = norm_state(2, gamma);
        for (which, label, at) in [(0, "input", &nx), (1, "scale", &scale), (2, "shift", &shift)] {
            check(&mut out, format!("bin(gamma={gamma}).{label}"), |g, v| {
                let x = if which == 0 { v } else { g.constant(nx.clone()) };
                let s = if which == 1 { v } else { g.constant(scale.clone()) };
                let t = if which == 2 { v } else { g.constant(shift.clone()) };
                let (y, _) = bin(g, x, s, t, &st, Mode::Train)?;
                project(g, y, 10)
            }, at)?;
        }
    }

    let mut head = Head::<f64>::init(HeadConfig { hidden_dim: 6, out_dim: 4 }, 5, 11).map_err(TensorError::InvalidArgument)?;
    // Nonzero biases keep rows off single-active-unit plateaus.
    for (i, t) in head.params_mut().tensors_mut().skip(1).step_by(2).enumerate() {
        let n = t.numel();
        *t = random(&[n], 12 + i as u64, 0.5);
    }
    check(&mut out, "projection_head".into(), |g, v| {
        let p = head.bind(g, LeafKind::Constant);
        let e = head.forward(g, &p, v)?;
        project(g, e, 14)
    }, &random(&[3, 5], 15, 1.0))?;

    let mut rng = rng_for(16, &[]);
    let d = 6;
    let mut unit = |n: usize| -> Vec<f64> {
        (0..n).flat_map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(move |a| a / n)
        }).collect()
    };
    for queue in [1usize, 8, 64] {
        let keys = Tensor::new([queue + 1, d], unit(queue + 1))?;
        let q = Tensor::new([2, d], unit(2))?;
        check(&mut out, format!("info_nce(queue={queue})"), |g, v| {
            let u = g.l2_normalize(v)?;
            info_nce_batch(g, u, &keys, &[queue, 0], 0.2, false)
        }, &q)?;
    }
    Ok(out)
}
