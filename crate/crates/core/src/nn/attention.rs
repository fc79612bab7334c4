//! Scaled dot-product attention blocks: multi-head self-attention over the
//! visits of a session and context-vector pooling into a single vector.
//!
//! Neither block has positional encodings, residual connections or
//! normalization, so both are equivariant (respectively invariant) under
//! permutations of the unmasked rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::ops::{softmax, softmax_backward};
use super::params::ParamSet;
use crate::error::{GowebError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    h: Matrix,
    /// Per head, an `n x n` matrix of attention weights (zero rows for masked queries).
    pub attn: Vec<Matrix>,
    mask: Vec<bool>,
}

fn check_mask(op: &'static str, x: &Matrix, d_model: usize, mask: &[bool]) -> Result<()> {
    if x.cols() != d_model {
        return Err(GowebError::shape(op, format!("input has {} columns, expected {d_model}", x.cols())));
    }
    if mask.len() != x.rows() {
        return Err(GowebError::shape(op, format!("mask has {} entries for {} rows", mask.len(), x.rows())));
    }
    Ok(())
}

impl MultiHeadAttention {
    /// Heads split `d_model` evenly: `d_k = d_v = d_model / heads`.
    pub fn new(name: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(GowebError::Config(format!("d_model {d_model} is not divisible into {heads} heads")));
        }
        let d = d_model / heads;
        Ok(MultiHeadAttention { name: name.into(), d_model, heads, d_k: d, d_v: d })
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["wq", "wk", "wv", "wo"].iter().map(|s| self.p(s)).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        ps.insert_uniform(self.p("wq"), self.d_model, self.heads * self.d_k, rng);
        ps.insert_uniform(self.p("wk"), self.d_model, self.heads * self.d_k, rng);
        ps.insert_uniform(self.p("wv"), self.d_model, self.heads * self.d_v, rng);
        ps.insert_uniform(self.p("wo"), self.heads * self.d_v, self.d_model, rng);
    }

    pub fn forward(&self, ps: &ParamSet, x: &Matrix, mask: &[bool]) -> Result<(Matrix, MhaCache)> {
        check_mask("multi_head_attention", x, self.d_model, mask)?;
        let n = x.rows();
        let q = x.matmul(ps.value(&self.p("wq")));
        let k = x.matmul(ps.value(&self.p("wk")));
        let v = x.matmul(ps.value(&self.p("wv")));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let valid: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
        let mut h = Matrix::zeros(n, self.heads * self.d_v);
        let mut attn = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qo, vo) = (head * self.d_k, head * self.d_v);
            let mut a = Matrix::zeros(n, n);
            for &i in &valid {
                let qi = &q.row(i)[qo..qo + self.d_k];
                let scores: Vec<f64> = valid.iter().map(|&j| scale * dot(qi, &k.row(j)[qo..qo + self.d_k])).collect();
                let w = softmax(&scores);
                let hrow = &mut h.row_mut(i)[vo..vo + self.d_v];
                for (&j, &wj) in valid.iter().zip(&w) {
                    a.set(i, j, wj);
                    hrow.iter_mut().zip(&v.row(j)[vo..vo + self.d_v]).for_each(|(o, vv)| *o += wj * vv);
                }
            }
            attn.push(a);
        }
        let y = h.matmul(ps.value(&self.p("wo")));
        Ok((y, MhaCache { x: x.clone(), q, k, v, h, attn, mask: mask.to_vec() }))
    }

    pub fn backward(&self, ps: &mut ParamSet, cache: &MhaCache, dy: &Matrix) -> Matrix {
        let n = cache.x.rows();
        let mut dy = dy.clone();
        for i in 0..n {
            if !cache.mask[i] {
                dy.row_mut(i).fill(0.0);
            }
        }
        ps.grad_mut(&self.p("wo")).add_assign(&cache.h.t_matmul(&dy));
        let dh = dy.matmul_t(ps.value(&self.p("wo")));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let valid: Vec<usize> = (0..n).filter(|&j| cache.mask[j]).collect();
        let mut dq = Matrix::zeros(n, self.heads * self.d_k);
        let mut dk = Matrix::zeros(n, self.heads * self.d_k);
        let mut dv = Matrix::zeros(n, self.heads * self.d_v);
        for head in 0..self.heads {
            let (qo, vo) = (head * self.d_k, head * self.d_v);
            let a = &cache.attn[head];
            for &i in &valid {
                let dhi = &dh.row(i)[vo..vo + self.d_v];
                let w: Vec<f64> = valid.iter().map(|&j| a.get(i, j)).collect();
                let dw: Vec<f64> = valid.iter().map(|&j| dot(dhi, &cache.v.row(j)[vo..vo + self.d_v])).collect();
                let ds = softmax_backward(&w, &dw);
                for (idx, &j) in valid.iter().enumerate() {
                    let dvj = &mut dv.row_mut(j)[vo..vo + self.d_v];
                    dvj.iter_mut().zip(dhi).for_each(|(o, g)| *o += w[idx] * g);
                    let s = ds[idx] * scale;
                    if s != 0.0 {
                        let kj = &cache.k.row(j)[qo..qo + self.d_k];
                        dq.row_mut(i)[qo..qo + self.d_k].iter_mut().zip(kj).for_each(|(o, kk)| *o += s * kk);
                        let qi: Vec<f64> = cache.q.row(i)[qo..qo + self.d_k].to_vec();
                        dk.row_mut(j)[qo..qo + self.d_k].iter_mut().zip(&qi).for_each(|(o, qq)| *o += s * qq);
                    }
                }
            }
        }
        ps.grad_mut(&self.p("wq")).add_assign(&cache.x.t_matmul(&dq));
        ps.grad_mut(&self.p("wk")).add_assign(&cache.x.t_matmul(&dk));
        ps.grad_mut(&self.p("wv")).add_assign(&cache.x.t_matmul(&dv));
        let mut dx = dq.matmul_t(ps.value(&self.p("wq")));
        dx.add_assign(&dk.matmul_t(ps.value(&self.p("wk"))));
        dx.add_assign(&dv.matmul_t(ps.value(&self.p("wv"))));
        dx
    }
}

/// Multi-head self-attention `Concat(head_1..head_k) W^O` with
/// `head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i` over unmasked rows.
pub fn multi_head_attention(x: &Matrix, ps: &ParamSet, block: &MultiHeadAttention, mask: &[bool]) -> Result<Matrix> {
    block.forward(ps, x, mask).map(|(y, _)| y)
}

/// Pools the unmasked rows of `X` with one learned query vector per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPool {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    x: Matrix,
    k: Matrix,
    v: Matrix,
    h: Vec<f64>,
    /// Per head, the weights over the valid rows (in row order).
    pub weights: Vec<Vec<f64>>,
    valid: Vec<usize>,
}

impl ContextPool {
    pub fn new(name: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(GowebError::Config(format!("d_model {d_model} is not divisible into {heads} heads")));
        }
        let d = d_model / heads;
        Ok(ContextPool { name: name.into(), d_model, heads, d_k: d, d_v: d })
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["c", "wk", "wv", "wo"].iter().map(|s| self.p(s)).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        ps.insert_uniform(self.p("c"), self.heads, self.d_k, rng);
        ps.insert_uniform(self.p("wk"), self.d_model, self.heads * self.d_k, rng);
        ps.insert_uniform(self.p("wv"), self.d_model, self.heads * self.d_v, rng);
        ps.insert_uniform(self.p("wo"), self.heads * self.d_v, self.d_model, rng);
    }

    pub fn forward(&self, ps: &ParamSet, x: &Matrix, mask: &[bool]) -> Result<(Vec<f64>, PoolCache)> {
        check_mask("context_attention_pool", x, self.d_model, mask)?;
        let valid: Vec<usize> = (0..x.rows()).filter(|&j| mask[j]).collect();
        if valid.is_empty() {
            return Err(GowebError::AllMasked);
        }
        let k = x.matmul(ps.value(&self.p("wk")));
        let v = x.matmul(ps.value(&self.p("wv")));
        let c = ps.value(&self.p("c"));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut h = vec![0.0; self.heads * self.d_v];
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (ko, vo) = (head * self.d_k, head * self.d_v);
            let scores: Vec<f64> = valid.iter().map(|&j| scale * dot(c.row(head), &k.row(j)[ko..ko + self.d_k])).collect();
            let w = softmax(&scores);
            for (&j, &wj) in valid.iter().zip(&w) {
                h[vo..vo + self.d_v].iter_mut().zip(&v.row(j)[vo..vo + self.d_v]).for_each(|(o, vv)| *o += wj * vv);
            }
            weights.push(w);
        }
        let out = Matrix::row_vector(h.clone()).matmul(ps.value(&self.p("wo"))).into_vec();
        Ok((out, PoolCache { x: x.clone(), k, v, h, weights, valid }))
    }

    pub fn backward(&self, ps: &mut ParamSet, cache: &PoolCache, dout: &[f64]) -> Matrix {
        let dout_m = Matrix::row_vector(dout.to_vec());
        let h_m = Matrix::row_vector(cache.h.clone());
        ps.grad_mut(&self.p("wo")).add_assign(&h_m.t_matmul(&dout_m));
        let dh = dout_m.matmul_t(ps.value(&self.p("wo"))).into_vec();
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let n = cache.x.rows();
        let c = ps.value(&self.p("c")).clone();
        let mut dc = Matrix::zeros(self.heads, self.d_k);
        let mut dk = Matrix::zeros(n, self.heads * self.d_k);
        let mut dv = Matrix::zeros(n, self.heads * self.d_v);
        for head in 0..self.heads {
            let (ko, vo) = (head * self.d_k, head * self.d_v);
            let w = &cache.weights[head];
            let dhh = &dh[vo..vo + self.d_v];
            let dw: Vec<f64> = cache.valid.iter().map(|&j| dot(dhh, &cache.v.row(j)[vo..vo + self.d_v])).collect();
            let ds = softmax_backward(w, &dw);
            for (idx, &j) in cache.valid.iter().enumerate() {
                dv.row_mut(j)[vo..vo + self.d_v].iter_mut().zip(dhh).for_each(|(o, g)| *o += w[idx] * g);
                let s = ds[idx] * scale;
                dk.row_mut(j)[ko..ko + self.d_k].iter_mut().zip(c.row(head)).for_each(|(o, cc)| *o += s * cc);
                dc.row_mut(head).iter_mut().zip(&cache.k.row(j)[ko..ko + self.d_k]).for_each(|(o, kk)| *o += s * kk);
            }
        }
        ps.grad_mut(&self.p("c")).add_assign(&dc);
        ps.grad_mut(&self.p("wk")).add_assign(&cache.x.t_matmul(&dk));
        ps.grad_mut(&self.p("wv")).add_assign(&cache.x.t_matmul(&dv));
        let mut dx = dk.matmul_t(ps.value(&self.p("wk")));
        dx.add_assign(&dv.matmul_t(ps.value(&self.p("wv"))));
        dx
    }
}

/// `Concat(head^s_1..head^s_k) W^Os` with `head^s_i = Attention(c_i, X W^Ks_i, X W^Vs_i)`.
pub fn context_attention_pool(x: &Matrix, ps: &ParamSet, block: &ContextPool, mask: &[bool]) -> Result<Vec<f64>> {
    block.forward(ps, x, mask).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, check_values, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// A fixed nonlinear readout so gradient checks exercise every output entry.
    fn readout(y: &[f64]) -> (f64, Vec<f64>) {
        let loss = y.iter().enumerate().map(|(i, v)| ((i % 5) as f64 - 2.0) * v + 0.5 * v * v).sum();
        let grad = y.iter().enumerate().map(|(i, v)| ((i % 5) as f64 - 2.0) + v).collect();
        (loss, grad)
    }

    fn setup_mha(seed: u64) -> (MultiHeadAttention, ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mha = MultiHeadAttention::new("mha", 8, 2).unwrap();
        let mut ps = ParamSet::new();
        mha.init(&mut ps, &mut rng);
        // larger weights give non-trivial attention patterns
        for n in mha.param_names() {
            ps.value_mut(&n).scale(10.0);
        }
        (mha, ps, rng)
    }

    #[test]
    fn single_row_is_value_path() {
        let (mha, ps, mut rng) = setup_mha(1);
        let x = random_matrix(&mut rng, 1, 8);
        let (y, cache) = mha.forward(&ps, &x, &[true]).unwrap();
        for a in &cache.attn {
            assert_eq!(a.get(0, 0), 1.0);
        }
        let expected = x.matmul(ps.value("mha.wv")).matmul(ps.value("mha.wo"));
        for (a, b) in y.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let (mha, ps, mut rng) = setup_mha(2);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 5, 8);
            let perm = [3usize, 0, 4, 1, 2];
            let xp = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let y = multi_head_attention(&x, &ps, &mha, &[true; 5]).unwrap();
            let yp = multi_head_attention(&xp, &ps, &mha, &[true; 5]).unwrap();
            for (r, &src) in perm.iter().enumerate() {
                for (a, b) in yp.row(r).iter().zip(y.row(src)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_rows_are_inert() {
        let (mha, ps, mut rng) = setup_mha(3);
        let mut x = random_matrix(&mut rng, 4, 8);
        let mask = [true, true, false, true];
        let (y, cache) = mha.forward(&ps, &x, &mask).unwrap();
        assert!(y.row(2).iter().all(|v| *v == 0.0));
        for a in &cache.attn {
            for i in [0, 1, 3] {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(a.get(i, 2), 0.0);
            }
        }
        // changing a masked row leaves the unmasked outputs untouched
        x.row_mut(2).fill(7.0);
        let y2 = multi_head_attention(&x, &ps, &mha, &mask).unwrap();
        assert_eq!(y, y2);
        assert!(mha.forward(&ps, &x, &[true; 3]).is_err());
    }

    #[test]
    fn mha_gradients_match_fd() {
        let (mha, mut ps, mut rng) = setup_mha(4);
        for n in mha.param_names() {
            ps.value_mut(&n).scale(0.3);
        }
        let x = random_matrix(&mut rng, 4, 8);
        let mask = [true, false, true, true];
        let loss = |ps: &ParamSet, x: &Matrix| readout(mha.forward(ps, x, &mask).unwrap().0.as_slice()).0;
        let (y, cache) = mha.forward(&ps, &x, &mask).unwrap();
        let dy = Matrix::new(4, 8, readout(y.as_slice()).1).unwrap();
        let dx = mha.backward(&mut ps, &cache, &dy);
        let r = check_params(&ps, &|p: &ParamSet| loss(p, &x), &mha.param_names(), FD_STEP, 1e-5);
        assert!(r.passed, "{r:?}");
        let rx = check_values(x.as_slice(), dx.as_slice(), |v| loss(&ps, &Matrix::new(4, 8, v.to_vec()).unwrap()), FD_STEP, 1e-5);
        assert!(rx.passed, "{rx:?}");
    }

    fn setup_pool(seed: u64) -> (ContextPool, ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = ContextPool::new("pool", 8, 4).unwrap();
        let mut ps = ParamSet::new();
        pool.init(&mut ps, &mut rng);
        for n in pool.param_names() {
            ps.value_mut(&n).scale(8.0);
        }
        (pool, ps, rng)
    }

    #[test]
    fn pool_single_and_duplicate_rows() {
        let (pool, ps, mut rng) = setup_pool(5);
        let x = random_matrix(&mut rng, 1, 8);
        let single = context_attention_pool(&x, &ps, &pool, &[true]).unwrap();
        let expected = x.matmul(ps.value("pool.wv")).matmul(ps.value("pool.wo"));
        for (a, b) in single.iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dup = Matrix::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
        let (pooled, cache) = pool.forward(&ps, &dup, &[true; 3]).unwrap();
        for (a, b) in pooled.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in &cache.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(pool.forward(&ps, &dup, &[false; 3]), Err(GowebError::AllMasked)));
    }

    #[test]
    fn pool_gradients_match_fd() {
        let (pool, mut ps, mut rng) = setup_pool(6);
        for n in pool.param_names() {
            ps.value_mut(&n).scale(0.25);
        }
        let x = random_matrix(&mut rng, 5, 8);
        let mask = [true, true, false, true, true];
        let loss = |ps: &ParamSet, x: &Matrix| readout(&pool.forward(ps, x, &mask).unwrap().0).0;
        let (y, cache) = pool.forward(&ps, &x, &mask).unwrap();
        let dx = pool.backward(&mut ps, &cache, &readout(&y).1);
        let r = check_params(&ps, &|p: &ParamSet| loss(p, &x), &pool.param_names(), FD_STEP, 1e-5);
        assert!(r.passed, "{r:?}");
        let rx = check_values(x.as_slice(), dx.as_slice(), |v| loss(&ps, &Matrix::new(5, 8, v.to_vec()).unwrap()), FD_STEP, 1e-5);
        assert!(rx.passed, "{rx:?}");
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let (pool, ps, mut rng) = setup_pool(7);
        let x = random_matrix(&mut rng, 4, 8);
        let xp = Matrix::from_rows(&[x.row(2).to_vec(), x.row(0).to_vec(), x.row(3).to_vec(), x.row(1).to_vec()]).unwrap();
        let a = context_attention_pool(&x, &ps, &pool, &[true; 4]).unwrap();
        let b = context_attention_pool(&xp, &ps, &pool, &[true; 4]).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
