//! Dense building blocks with hand-written backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm cache.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    g: &Array1<T>,
    b: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let d = T::from_usize_lossy(x.ncols());
    let eps = T::c(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates `dg`, `db`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = T::from_usize_lossy(dy.ncols());
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(&cache.rstd)
    {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / d;
        row.zip_mut_with(&xh, |v, &h| *v = r * (*v - m1 - h * m2));
    }
    dx
}

const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + T::c(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Multi-head self-attention cache.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub input: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Attention weights per head, `[n × n]` each.
    pub probs: Vec<Array2<T>>,
    pub concat: Array2<T>,
}

pub struct AttnParams<'a, T> {
    pub wq: &'a Array2<T>,
    pub bq: &'a Array1<T>,
    pub wk: &'a Array2<T>,
    pub bk: &'a Array1<T>,
    pub wv: &'a Array2<T>,
    pub bv: &'a Array1<T>,
    pub wo: &'a Array2<T>,
    pub bo: &'a Array1<T>,
}

pub struct AttnGrads<'a, T> {
    pub wq: &'a mut Array2<T>,
    pub bq: &'a mut Array1<T>,
    pub wk: &'a mut Array2<T>,
    pub bk: &'a mut Array1<T>,
    pub wv: &'a mut Array2<T>,
    pub bv: &'a mut Array1<T>,
    pub wo: &'a mut Array2<T>,
    pub bo: &'a mut Array1<T>,
}

/// Scaled dot-product attention; keys flagged in `pad` are excluded.
pub fn attention<T: Scalar>(
    a: &Array2<T>,
    p: &AttnParams<'_, T>,
    n_heads: usize,
    pad: &[bool],
) -> (Array2<T>, AttnCache<T>) {
    let n = a.nrows();
    let d = a.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let q = a.dot(p.wq) + p.bq;
    let k = a.dot(p.wk) + p.bk;
    let v = a.dot(p.wv) + p.bv;
    let mut concat = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (j, &is_pad) in pad.iter().enumerate() {
            if is_pad {
                sc.column_mut(j).fill(T::neg_infinity());
            }
        }
        softmax_rows(&mut sc);
        concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let out = concat.dot(p.wo) + p.bo;
    (
        out,
        AttnCache {
            input: a.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

fn add_outer<T: Scalar>(acc: &mut Array2<T>, x: ArrayView2<'_, T>, dy: &Array2<T>) {
    *acc += &x.t().dot(dy);
}

/// Returns the gradient with respect to the attention input.
pub fn attention_backward<T: Scalar>(
    dout: &Array2<T>,
    c: &AttnCache<T>,
    p: &AttnParams<'_, T>,
    g: AttnGrads<'_, T>,
    n_heads: usize,
) -> Array2<T> {
    let n = dout.nrows();
    let d = dout.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    add_outer(g.wo, c.concat.view(), dout);
    *g.bo += &dout.sum_axis(Axis(0));
    let dconcat = dout.dot(&p.wo.t());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pr = &c.probs[h];
        let do_h = dconcat.slice(cols);
        let dp = do_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&do_h));
        let mut ds = pr * &dp;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
            let sum = row.sum();
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * sum);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    add_outer(g.wq, c.input.view(), &dq);
    add_outer(g.wk, c.input.view(), &dk);
    add_outer(g.wv, c.input.view(), &dv);
    *g.bq += &dq.sum_axis(Axis(0));
    *g.bk += &dk.sum_axis(Axis(0));
    *g.bv += &dv.sum_axis(Axis(0));
    dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand2(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand1(n: usize, rng: &mut impl Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = rand2(3, 6, &mut rng);
        let g = rand1(6, &mut rng);
        let b = rand1(6, &mut rng);
        let w = rand2(3, 6, &mut rng);
        let f = |x: &Array2<f64>| (layer_norm(x, &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = Array1::zeros(6);
        let mut db = Array1::zeros(6);
        let dx = layer_norm_backward(&w, &cache, &g, &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = rand2(1, 4, &mut rng);
        let ws: Vec<Array2<f64>> = (0..4).map(|_| rand2(4, 4, &mut rng)).collect();
        let bs: Vec<Array1<f64>> = (0..4).map(|_| rand1(4, &mut rng)).collect();
        let p = AttnParams {
            wq: &ws[0],
            bq: &bs[0],
            wk: &ws[1],
            bk: &bs[1],
            wv: &ws[2],
            bv: &bs[2],
            wo: &ws[3],
            bo: &bs[3],
        };
        let (out, _) = attention(&a, &p, 2, &[false]);
        // one token attends only to itself: out = (a Wv + bv) Wo + bo
        let expected = (a.dot(&ws[2]) + &bs[2]).dot(&ws[3]) + &bs[3];
        for (x, y) in out.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let d = 6;
        let a = rand2(n, d, &mut rng);
        let ws: Vec<Array2<f64>> = (0..4).map(|_| rand2(d, d, &mut rng)).collect();
        let bs: Vec<Array1<f64>> = (0..4).map(|_| rand1(d, &mut rng)).collect();
        let w = rand2(n, d, &mut rng);
        let pad = [false, false, true, false];
        let params = |ws: &[Array2<f64>]| -> f64 {
            let p = AttnParams {
                wq: &ws[0],
                bq: &bs[0],
                wk: &ws[1],
                bk: &bs[1],
                wv: &ws[2],
                bv: &bs[2],
                wo: &ws[3],
                bo: &bs[3],
            };
            (attention(&a, &p, 2, &pad).0 * &w).sum()
        };
        let p = AttnParams {
            wq: &ws[0],
            bq: &bs[0],
            wk: &ws[1],
            bk: &bs[1],
            wv: &ws[2],
            bv: &bs[2],
            wo: &ws[3],
            bo: &bs[3],
        };
        let (_, cache) = attention(&a, &p, 2, &pad);
        let mut gw: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((d, d))).collect();
        let mut gb: Vec<Array1<f64>> = (0..4).map(|_| Array1::zeros(d)).collect();
        let (gw01, gw23) = gw.split_at_mut(2);
        let (gw0, gw1) = gw01.split_at_mut(1);
        let (gw2, gw3) = gw23.split_at_mut(1);
        let (gb01, gb23) = gb.split_at_mut(2);
        let (gb0, gb1) = gb01.split_at_mut(1);
        let (gb2, gb3) = gb23.split_at_mut(1);
        let grads = AttnGrads {
            wq: &mut gw0[0],
            bq: &mut gb0[0],
            wk: &mut gw1[0],
            bk: &mut gb1[0],
            wv: &mut gw2[0],
            bv: &mut gb2[0],
            wo: &mut gw3[0],
            bo: &mut gb3[0],
        };
        let _da = attention_backward(&w, &cache, &p, grads, 2);
        let h = 1e-6;
        for m in 0..4 {
            for (i, j) in [(0, 0), (1, 3), (5, 2), (4, 5)] {
                let mut wp = ws.clone();
                wp[m][[i, j]] += h;
                let mut wm = ws.clone();
                wm[m][[i, j]] -= h;
                let fd = (params(&wp) - params(&wm)) / (2.0 * h);
                assert!(
                    (fd - gw[m][[i, j]]).abs() < 1e-7,
                    "W{m}[{i},{j}] {fd} vs {}",
                    gw[m][[i, j]]
                );
            }
        }
    }
}
