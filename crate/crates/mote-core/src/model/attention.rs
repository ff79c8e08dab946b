//! Causal multi-head self-attention with rotary position embeddings.
//!
//! Operates on one sequence at a time; the block loops (or fans out) over
//! the examples of a ragged batch. Rotation uses adjacent pairs within each
//! head: pair i of a head turns by pos * base^(-2i / d_head).

use super::Param;
use crate::tensor::{self, Matrix, Scalar};

#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub n_heads: usize,
    pub rope_base: f64,
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    x: Matrix<T>,
    /// Post-rotation queries and keys.
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per-head S x S attention probabilities, rows causal.
    probs: Vec<Matrix<T>>,
    /// Concatenated head outputs before the output projection.
    ctx: Matrix<T>,
}

/// Gradients of one sequence's attention, accumulated outside.
pub struct AttnGrads<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub dx: Matrix<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(d_model: usize, n_heads: usize, rope_base: f64) -> Self {
        let z = || Param::new(Matrix::zeros(d_model, d_model));
        Attention {
            wq: z(),
            wk: z(),
            wv: z(),
            wo: z(),
            n_heads,
            rope_base,
        }
    }

    pub fn d_head(&self) -> usize {
        self.wq.w.rows() / self.n_heads
    }

    fn rotate(&self, m: &mut Matrix<T>, dir: f64) {
        let d_head = self.d_head();
        let half = d_head / 2;
        for t in 0..m.rows() {
            let row = m.row_mut(t);
            for h in 0..self.n_heads {
                let base = h * d_head;
                for i in 0..half {
                    let theta = dir
                        * t as f64
                        * self.rope_base.powf(-2.0 * i as f64 / d_head as f64);
                    let (sin, cos) = (T::c(theta.sin()), T::c(theta.cos()));
                    let a = row[base + 2 * i];
                    let b = row[base + 2 * i + 1];
                    row[base + 2 * i] = a * cos - b * sin;
                    row[base + 2 * i + 1] = a * sin + b * cos;
                }
            }
        }
    }

    /// Forward over one sequence x: S x d_model.
    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, AttnCache<T>) {
        let s = x.rows();
        let d_head = self.d_head();
        let scale = T::c(1.0 / (d_head as f64).sqrt());
        let mut q = tensor::matmul_nt(x, &self.wq.w);
        let mut k = tensor::matmul_nt(x, &self.wk.w);
        let v = tensor::matmul_nt(x, &self.wv.w);
        self.rotate(&mut q, 1.0);
        self.rotate(&mut k, 1.0);

        let mut ctx = Matrix::zeros(s, q.cols());
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let hs = h * d_head;
            let he = hs + d_head;
            let mut p = Matrix::zeros(s, s);
            for i in 0..s {
                let qr = &q.row(i)[hs..he];
                let pr = p.row_mut(i);
                for j in 0..=i {
                    pr[j] = tensor::dot(qr, &k.row(j)[hs..he]) * scale;
                }
                tensor::softmax_in_place(&mut pr[..=i]);
            }
            for i in 0..s {
                for j in 0..=i {
                    let w = p.get(i, j);
                    let vr = &v.row(j)[hs..he];
                    let cr = &mut ctx.row_mut(i)[hs..he];
                    tensor::axpy(w, vr, cr);
                }
            }
            probs.push(p);
        }
        let out = tensor::matmul_nt(&ctx, &self.wo.w);
        (
            out,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Backward for one sequence. Returns per-weight gradient contributions
    /// and dx; the block sums contributions across sequences in a fixed
    /// order so the batch backward stays deterministic under fan-out.
    pub fn backward(&self, cache: &AttnCache<T>, dy: &Matrix<T>) -> AttnGrads<T> {
        let s = cache.x.rows();
        let d = cache.x.cols();
        let d_head = self.d_head();
        let scale = T::c(1.0 / (d_head as f64).sqrt());

        let mut g_wo = Matrix::zeros(d, d);
        tensor::matmul_tn_acc(dy, &cache.ctx, &mut g_wo);
        let dctx = tensor::matmul_nn(dy, &self.wo.w);

        let mut dq = Matrix::zeros(s, d);
        let mut dk = Matrix::zeros(s, d);
        let mut dv = Matrix::zeros(s, d);
        for h in 0..self.n_heads {
            let hs = h * d_head;
            let he = hs + d_head;
            let p = &cache.probs[h];
            let mut dp = Matrix::zeros(s, s);
            for i in 0..s {
                let dctx_r = &dctx.row(i)[hs..he];
                for j in 0..=i {
                    dp.set(i, j, tensor::dot(dctx_r, &cache.v.row(j)[hs..he]));
                    let w = p.get(i, j);
                    tensor::axpy(w, dctx_r, &mut dv.row_mut(j)[hs..he]);
                }
            }
            // Softmax backward row by row, then scores -> q, k.
            for i in 0..s {
                let pr = &p.row(i)[..=i];
                let dpr = &dp.row(i)[..=i];
                let mut inner = T::zero();
                for j in 0..=i {
                    inner = inner + pr[j] * dpr[j];
                }
                for j in 0..=i {
                    let ds = pr[j] * (dpr[j] - inner) * scale;
                    tensor::axpy(ds, &cache.k.row(j)[hs..he], &mut dq.row_mut(i)[hs..he]);
                    tensor::axpy(ds, &cache.q.row(i)[hs..he], &mut dk.row_mut(j)[hs..he]);
                }
            }
        }
        self.rotate(&mut dq, -1.0);
        self.rotate(&mut dk, -1.0);

        let mut g_wq = Matrix::zeros(d, d);
        let mut g_wk = Matrix::zeros(d, d);
        let mut g_wv = Matrix::zeros(d, d);
        tensor::matmul_tn_acc(&dq, &cache.x, &mut g_wq);
        tensor::matmul_tn_acc(&dk, &cache.x, &mut g_wk);
        tensor::matmul_tn_acc(&dv, &cache.x, &mut g_wv);

        let mut dx = tensor::matmul_nn(&dq, &self.wq.w);
        let dxk = tensor::matmul_nn(&dk, &self.wk.w);
        let dxv = tensor::matmul_nn(&dv, &self.wv.w);
        tensor::add_assign(&mut dx, &dxk);
        tensor::add_assign(&mut dx, &dxv);

        AttnGrads {
            wq: g_wq,
            wk: g_wk,
            wv: g_wv,
            wo: g_wo,
            dx,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Attention<U> {
        Attention {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            n_heads: self.n_heads,
            rope_base: self.rope_base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_attn(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Attention<f64> {
        let mut a = Attention::new(d, heads, 10000.0);
        for w in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
            for v in w.w.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        a
    }

    fn random_x(rng: &mut ChaCha8Rng, s: usize, d: usize) -> Matrix<f64> {
        Matrix::from_vec(s, d, (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn rotation_preserves_norm_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = random_attn(&mut rng, 8, 2);
        let x = random_x(&mut rng, 5, 8);
        let mut r = x.clone();
        attn.rotate(&mut r, 1.0);
        for t in 0..5 {
            let n0: f64 = x.row(t).iter().map(|v| v * v).sum();
            let n1: f64 = r.row(t).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-9);
        }
        attn.rotate(&mut r, -1.0);
        for (a, b) in x.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_prefix_is_stable_under_suffix_edits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = random_attn(&mut rng, 8, 2);
        let x = random_x(&mut rng, 6, 8);
        let (y, _) = attn.forward(&x);
        let mut x2 = x.clone();
        for v in x2.row_mut(4) {
            *v += 1.0;
        }
        for v in x2.row_mut(5) {
            *v -= 0.5;
        }
        let (y2, _) = attn.forward(&x2);
        for t in 0..4 {
            assert_eq!(y.row(t), y2.row(t), "row {t} changed");
        }
        assert_ne!(y.row(4), y2.row(4));
    }

    #[test]
    fn probs_rows_sum_to_one_and_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = random_attn(&mut rng, 12, 3);
        let x = random_x(&mut rng, 7, 12);
        let (_, cache) = attn.forward(&x);
        for p in &cache.probs {
            for i in 0..7 {
                let sum: f64 = p.row(i)[..=i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for j in i + 1..7 {
                    assert_eq!(p.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut attn = random_attn(&mut rng, 8, 2);
        let x = random_x(&mut rng, 4, 8);
        let wgt: Vec<f64> = (0..32).map(|i| ((i * 7 % 5) as f64) * 0.2 - 0.4).collect();
        let loss = |attn: &Attention<f64>, x: &Matrix<f64>| -> f64 {
            let (y, _) = attn.forward(x);
            y.data().iter().zip(&wgt).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attn.forward(&x);
        let dy = Matrix::from_vec(4, 8, wgt.clone());
        let grads = attn.backward(&cache, &dy);

        let h = 1e-6;
        for (t, j) in [(0usize, 1usize), (1, 5), (3, 0), (2, 7)] {
            let mut xp = x.clone();
            xp.set(t, j, x.get(t, j) + h);
            let mut xm = x.clone();
            xm.set(t, j, x.get(t, j) - h);
            let fd = (loss(&attn, &xp) - loss(&attn, &xm)) / (2.0 * h);
            assert!(
                (fd - grads.dx.get(t, j)).abs() < 1e-6,
                "dx ({t},{j}): fd {fd} vs {}",
                grads.dx.get(t, j)
            );
        }
        fn poke(a: &mut Attention<f64>, wi: usize, r: usize, c: usize, v: f64) -> f64 {
            let w = match wi {
                0 => &mut a.wq,
                1 => &mut a.wk,
                2 => &mut a.wv,
                _ => &mut a.wo,
            };
            let old = w.w.get(r, c);
            w.w.set(r, c, v);
            old
        }
        for (r, c) in [(0usize, 0usize), (3, 2), (7, 7), (5, 1)] {
            for wi in 0..4 {
                let g_val = match wi {
                    0 => grads.wq.get(r, c),
                    1 => grads.wk.get(r, c),
                    2 => grads.wv.get(r, c),
                    _ => grads.wo.get(r, c),
                };
                let orig = poke(&mut attn, wi, r, c, 0.0);
                poke(&mut attn, wi, r, c, orig + h);
                let lp = loss(&attn, &x);
                poke(&mut attn, wi, r, c, orig - h);
                let lm = loss(&attn, &x);
                poke(&mut attn, wi, r, c, orig);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g_val).abs() < 1e-6,
                    "w{wi} ({r},{c}): fd {fd} vs {g_val}"
                );
            }
        }
    }
}
