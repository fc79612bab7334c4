use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamSet;
use crate::error::{GowebError, Result};

/// Fully connected layer `y = x W + b` with parameters `{name}.w` and `{name}.b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        ps.insert_uniform(self.w(), self.in_dim, self.out_dim, rng);
        ps.insert_uniform(self.b(), 1, self.out_dim, rng);
    }

    pub fn forward(&self, ps: &ParamSet, x: &Matrix) -> Matrix {
        let mut y = x.matmul(ps.value(&self.w()));
        let b = ps.value(&self.b()).row(0);
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &mut ParamSet, x: &Matrix, dy: &Matrix) -> Matrix {
        let dw = x.t_matmul(dy);
        ps.grad_mut(&self.w()).add_assign(&dw);
        let gb = ps.grad_mut(&self.b());
        for i in 0..dy.rows() {
            gb.row_mut(0).iter_mut().zip(dy.row(i)).for_each(|(g, d)| *g += d);
        }
        dy.matmul_t(ps.value(&self.w()))
    }
}

/// Checked forward pass of a [`Linear`] layer.
pub fn linear(x: &Matrix, ps: &ParamSet, layer: &Linear) -> Result<Matrix> {
    if x.cols() != layer.in_dim {
        return Err(GowebError::shape("linear", format!("input has {} columns, layer expects {}", x.cols(), layer.in_dim)));
    }
    let (wr, wc) = ps.value(&layer.w()).shape();
    if (wr, wc) != (layer.in_dim, layer.out_dim) || ps.value(&layer.b()).shape() != (1, layer.out_dim) {
        return Err(GowebError::shape("linear", format!("weight is {wr}x{wc}, layer declares {}x{}", layer.in_dim, layer.out_dim)));
    }
    Ok(layer.forward(ps, x))
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = softmax(x.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// Vector-Jacobian product of softmax: `dx = p * (dp - <dp, p>)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        out.row_mut(i).copy_from_slice(&softmax_backward(p.row(i), dp.row(i)));
    }
    out
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(GowebError::OutOfRange { index: label, len: probs.len() })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Cross-entropy of `softmax(logits)` against `label`, with its logit gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(GowebError::OutOfRange { index: label, len: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, with `dL/dlogit = sigmoid(z) - y`.
pub fn binary_cross_entropy_logit(z: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    // log(1 + e^z) - y z, written to avoid overflow
    let loss = z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

pub fn tanh_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
    y
}

/// Given `y = tanh(x)`, maps `dy` to `dx`.
pub fn tanh_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    dx.as_mut_slice().iter_mut().zip(y.as_slice()).for_each(|(d, yv)| *d *= 1.0 - yv * yv);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_examples() {
        let mut ps = ParamSet::new();
        let l = Linear::new("f", 3, 3);
        ps.insert(l.w(), Matrix::identity(3));
        ps.insert(l.b(), Matrix::zeros(1, 3));
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(linear(&x, &ps, &l).unwrap(), x);

        let one = Linear::new("g", 1, 1);
        ps.insert(one.w(), Matrix::row_vector(vec![3.0]));
        ps.insert(one.b(), Matrix::row_vector(vec![1.0]));
        assert_eq!(linear(&Matrix::row_vector(vec![2.0]), &ps, &one).unwrap().as_slice(), &[7.0]);
        assert!(linear(&Matrix::zeros(1, 2), &ps, &one).is_err());
    }

    #[test]
    fn linear_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let l = Linear::new("f", 4, 3);
        l.init(&mut ps, &mut rng);
        let x = Matrix::new(2, 4, (0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let target = Matrix::new(2, 3, (0..6).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let loss = |ps: &ParamSet, x: &Matrix| {
            let y = l.forward(ps, x);
            y.as_slice().iter().zip(target.as_slice()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>()
        };
        let y = l.forward(&ps, &x);
        let mut dy = y.clone();
        dy.as_mut_slice().iter_mut().zip(target.as_slice()).for_each(|(a, b)| *a -= b);
        let dx = l.backward(&mut ps, &x, &dy);
        let report = crate::nn::gradcheck::check_params(&ps, &|p: &ParamSet| loss(p, &x), &[l.w(), l.b()], 1e-5, 1e-5);
        assert!(report.passed, "{report:?}");
        let fx = crate::nn::gradcheck::check_values(x.as_slice(), dx.as_slice(), |v| loss(&ps, &Matrix::new(2, 4, v.to_vec()).unwrap()), 1e-5, 1e-5);
        assert!(fx.passed, "{fx:?}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let a = softmax(&[1.0, 2.0, -3.0]);
        let b = softmax(&[101.0, 102.0, 97.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let big = softmax(&[1e300, -1e300, 0.0]);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let x = [0.3, -1.2, 2.0, 0.0];
        let w = [1.0, -2.0, 0.5, 3.0];
        let f = |v: &[f64]| softmax(v).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let dx = softmax_backward(&softmax(&x), &w);
        let r = crate::nn::gradcheck::check_values(&x, &dx, f, 1e-5, 1e-5);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(GowebError::OutOfRange { .. })));
    }

    #[test]
    fn softmax_ce_gradient() {
        let logits = [0.2, 1.5, -0.7, 0.1];
        let (loss, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        let p = softmax(&logits);
        assert!((loss - cross_entropy(&p, 1).unwrap()).abs() < 1e-12);
        for (i, g) in grad.iter().enumerate() {
            let expected = p[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-15);
        }
        let r = crate::nn::gradcheck::check_values(&logits, &grad, |v| softmax_cross_entropy(v, 1).unwrap().0, 1e-5, 1e-5);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn bce_and_sigmoid() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        for &z in &[-3.0, -0.1, 0.0, 2.5] {
            for &y in &[true, false] {
                let (l, g) = binary_cross_entropy_logit(z, y);
                let p = sigmoid(z);
                let direct = if y { -p.ln() } else { -(1.0 - p).ln() };
                assert!((l - direct).abs() < 1e-12);
                let h = 1e-6;
                let fd = (binary_cross_entropy_logit(z + h, y).0 - binary_cross_entropy_logit(z - h, y).0) / (2.0 * h);
                assert!((fd - g).abs() < 1e-8);
            }
        }
    }
}
