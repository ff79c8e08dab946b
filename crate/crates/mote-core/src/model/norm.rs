//! Pre-norm layers: RMS norm (default) and classic layer norm.

use super::{NormKind, Param};
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub kind: NormKind,
    pub eps: f64,
    /// 1 x d gain.
    pub scale: Param<T>,
    /// 1 x d shift, layer norm only.
    pub bias: Option<Param<T>>,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    x: Matrix<T>,
    inv: Vec<T>,
    mean: Option<Vec<T>>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(kind: NormKind, d: usize, eps: f64) -> Self {
        Norm {
            kind,
            eps,
            scale: Param::new(Matrix::full(1, d, T::one())),
            bias: match kind {
                NormKind::RmsNorm => None,
                NormKind::LayerNorm => Some(Param::new(Matrix::zeros(1, d))),
            },
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, NormCache<T>) {
        let (n, d) = x.shape();
        let eps = T::c(self.eps);
        let g = self.scale.w.row(0);
        let mut y = Matrix::zeros(n, d);
        let mut inv = vec![T::zero(); n];
        let mut mean = match self.kind {
            NormKind::RmsNorm => None,
            NormKind::LayerNorm => Some(vec![T::zero(); n]),
        };
        let dd = T::c(d as f64);
        for t in 0..n {
            let xr = x.row(t);
            let yr = y.row_mut(t);
            match self.kind {
                NormKind::RmsNorm => {
                    let mut ss = T::zero();
                    for &v in xr {
                        ss = ss + v * v;
                    }
                    let r = T::one() / (ss / dd + eps).sqrt();
                    inv[t] = r;
                    for j in 0..d {
                        yr[j] = g[j] * xr[j] * r;
                    }
                }
                NormKind::LayerNorm => {
                    let mut mu = T::zero();
                    for &v in xr {
                        mu = mu + v;
                    }
                    mu = mu / dd;
                    let mut var = T::zero();
                    for &v in xr {
                        let c = v - mu;
                        var = var + c * c;
                    }
                    var = var / dd;
                    let r = T::one() / (var + eps).sqrt();
                    inv[t] = r;
                    mean.as_mut().unwrap()[t] = mu;
                    let b = self.bias.as_ref().unwrap().w.row(0);
                    for j in 0..d {
                        yr[j] = (xr[j] - mu) * r * g[j] + b[j];
                    }
                }
            }
        }
        (
            y,
            NormCache {
                x: x.clone(),
                inv,
                mean,
            },
        )
    }

    /// Accumulates gain/shift gradients (unless frozen) and returns dx.
    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let (n, d) = cache.x.shape();
        assert_eq!(dy.shape(), (n, d), "norm backward shape");
        let g = self.scale.w.row(0);
        let dd = T::c(d as f64);
        let mut dx = Matrix::zeros(n, d);
        let mut dg = vec![T::zero(); d];
        let mut db = vec![T::zero(); d];
        for t in 0..n {
            let xr = cache.x.row(t);
            let dyr = dy.row(t);
            let dxr = dx.row_mut(t);
            let r = cache.inv[t];
            match self.kind {
                NormKind::RmsNorm => {
                    let mut c = T::zero();
                    for j in 0..d {
                        c = c + dyr[j] * g[j] * xr[j];
                    }
                    let k = r * r * r * c / dd;
                    for j in 0..d {
                        dxr[j] = r * dyr[j] * g[j] - xr[j] * k;
                        dg[j] = dg[j] + dyr[j] * xr[j] * r;
                    }
                }
                NormKind::LayerNorm => {
                    let mu = cache.mean.as_ref().unwrap()[t];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let xh = (xr[j] - mu) * r;
                        let dxh = dyr[j] * g[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                        dg[j] = dg[j] + dyr[j] * xh;
                        db[j] = db[j] + dyr[j];
                    }
                    m1 = m1 / dd;
                    m2 = m2 / dd;
                    for j in 0..d {
                        let xh = (xr[j] - mu) * r;
                        let dxh = dyr[j] * g[j];
                        dxr[j] = r * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
        if !self.scale.frozen {
            for (gi, &v) in self.scale.g.row_mut(0).iter_mut().zip(&dg) {
                *gi = *gi + v;
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            if !bias.frozen {
                for (bi, &v) in bias.g.row_mut(0).iter_mut().zip(&db) {
                    *bi = *bi + v;
                }
            }
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Norm<U> {
        Norm {
            kind: self.kind,
            eps: self.eps,
            scale: self.scale.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;

    #[test]
    fn rms_norm_unit_rows() {
        let norm = Norm::<f64>::new(NormKind::RmsNorm, 4, 1e-12);
        let x = Matrix::from_vec(1, 4, vec![2.0, -2.0, 2.0, -2.0]);
        let (y, _) = norm.forward(&x);
        for &v in y.row(0) {
            assert!((v.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let norm = Norm::<f64>::new(NormKind::LayerNorm, 5, 1e-12);
        let x = Matrix::from_vec(1, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0]);
        let (y, _) = norm.forward(&x);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 5.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    fn fd_check(kind: NormKind) {
        let mut norm = Norm::<f64>::new(kind, 3, 1e-5);
        norm.scale.w = Matrix::from_vec(1, 3, vec![1.1, 0.9, -0.4]);
        if let Some(b) = norm.bias.as_mut() {
            b.w = Matrix::from_vec(1, 3, vec![0.2, -0.1, 0.05]);
        }
        let x = Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.5]);
        // Loss: weighted sum of outputs so dy is a fixed pattern.
        let wgt: Vec<f64> = (0..6).map(|i| 0.3 + 0.17 * i as f64).collect();
        let loss = |norm: &Norm<f64>, x: &Matrix<f64>| -> f64 {
            let (y, _) = norm.forward(x);
            y.data().iter().zip(&wgt).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = norm.forward(&x);
        let dy = Matrix::from_vec(2, 3, wgt.clone());
        let dx = norm.backward(&cache, &dy);

        let h = 1e-6;
        for t in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp.set(t, j, x.get(t, j) + h);
                let mut xm = x.clone();
                xm.set(t, j, x.get(t, j) - h);
                let fd = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * h);
                assert!(
                    (fd - dx.get(t, j)).abs() < 1e-6,
                    "{kind:?} dx ({t},{j}): fd {fd} vs {}",
                    dx.get(t, j)
                );
            }
        }
        for j in 0..3 {
            let orig = norm.scale.w.get(0, j);
            norm.scale.w.set(0, j, orig + h);
            let lp = loss(&norm, &x);
            norm.scale.w.set(0, j, orig - h);
            let lm = loss(&norm, &x);
            norm.scale.w.set(0, j, orig);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - norm.scale.g.get(0, j)).abs() < 1e-6,
                "{kind:?} dg {j}"
            );
        }
    }

    #[test]
    fn rms_backward_matches_finite_difference() {
        fd_check(NormKind::RmsNorm);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        fd_check(NormKind::LayerNorm);
    }

    #[test]
    fn frozen_norm_accumulates_no_gradient() {
        let mut norm = Norm::<f64>::new(NormKind::RmsNorm, 3, 1e-5);
        norm.scale.frozen = true;
        let x = Matrix::from_vec(1, 3, vec![0.5, -0.25, 1.0]);
        let (_, cache) = norm.forward(&x);
        let dy = Matrix::full(1, 3, 1.0);
        norm.backward(&cache, &dy);
        assert!(norm.scale.g.data().iter().all(|&v| v == 0.0));
    }
}
