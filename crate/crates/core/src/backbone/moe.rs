use ndarray::{Array2, Axis};

use super::nn::{gelu, gelu_grad, softmax};
use super::params::{ExpertParams, LayerParams};
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// Router outputs of one layer for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    /// `[n_tokens × E]`, after any additive prior shift.
    pub logits: Array2<T>,
    pub probs: Array2<T>,
    pub topk: Vec<Vec<usize>>,
    /// Selected probabilities renormalized to sum to one.
    pub weights: Vec<Vec<T>>,
}

impl<T: Scalar> RoutingRecord<T> {
    pub fn n_tokens(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.ncols()
    }

    pub fn top1(&self, t: usize) -> usize {
        self.topk[t][0]
    }
}

/// Indices of the `k` largest logits, largest first; ties go to the lower
/// index.
pub fn top_k_indices<T: Scalar>(logits: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Softmax distribution, top-k selection and renormalized weights for one
/// token.
pub fn route<T: Scalar>(logits: &[T], k: usize) -> (Vec<T>, Vec<usize>, Vec<T>) {
    let p = softmax(logits);
    let sel = top_k_indices(logits, k);
    let w = renormalize(&p, &sel);
    (p, sel, w)
}

fn renormalize<T: Scalar>(p: &[T], sel: &[usize]) -> Vec<T> {
    let z: T = sel.iter().map(|&e| p[e]).sum();
    sel.iter().map(|&e| p[e] / z).collect()
}

/// Forward intermediates of one expert over the tokens routed to it.
#[derive(Debug, Clone)]
pub struct ExpertCache<T> {
    pub tokens: Vec<usize>,
    pub pre: Array2<T>,
    pub act: Array2<T>,
    pub out: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct MoeCache<T> {
    pub input: Array2<T>,
    pub experts: Vec<ExpertCache<T>>,
    /// Per token and selection slot: `(expert, row in that expert's cache)`.
    pub slots: Vec<Vec<(usize, usize)>>,
}

impl<T: Scalar> MoeCache<T> {
    /// Output of the expert in slot `j` of token `t`.
    pub fn expert_output(&self, t: usize, j: usize) -> ndarray::ArrayView1<'_, T> {
        let (e, r) = self.slots[t][j];
        self.experts[e].out.row(r)
    }
}

pub fn expert_forward<T: Scalar>(
    x: &Array2<T>,
    p: &ExpertParams<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let pre = x.dot(&p.w1) + &p.b1;
    let act = pre.mapv(gelu);
    let out = act.dot(&p.w2) + &p.b2;
    (pre, act, out)
}

/// Sparse expert feed-forward. `shift` adds per-token logit offsets before
/// softmax and selection; `forced` replaces the top-k choice.
pub fn moe_layer_forward<T: Scalar>(
    x: &Array2<T>,
    layer: &LayerParams<T>,
    k: usize,
    shift: Option<&Array2<T>>,
    forced: Option<&[Vec<usize>]>,
) -> Result<(Array2<T>, RoutingRecord<T>, MoeCache<T>)> {
    let n = x.nrows();
    let n_exp = layer.experts.len();
    if x.ncols() != layer.router.nrows() {
        return Err(AmeError::Shape(format!(
            "token width {} vs router {}",
            x.ncols(),
            layer.router.nrows()
        )));
    }
    let mut logits = x.dot(&layer.router);
    if let Some(sh) = shift {
        if sh.dim() != logits.dim() {
            return Err(AmeError::Shape(
                "prior shift does not match router logits".into(),
            ));
        }
        logits += sh;
    }
    let mut probs = Array2::zeros((n, n_exp));
    let mut topk = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for t in 0..n {
        let row = logits.row(t).to_vec();
        let (p, mut sel, mut w) = route(&row, k);
        if let Some(f) = forced {
            sel = f[t].clone();
            w = renormalize(&p, &sel);
        }
        probs.row_mut(t).assign(&ndarray::ArrayView1::from(&p));
        topk.push(sel);
        weights.push(w);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
    let mut slots = vec![Vec::with_capacity(k); n];
    for (t, sel) in topk.iter().enumerate() {
        for &e in sel {
            slots[t].push((e, assigned[e].len()));
            assigned[e].push(t);
        }
    }
    let d = x.ncols();
    let mut y = Array2::zeros((n, d));
    let mut experts = Vec::with_capacity(n_exp);
    for (e, tokens) in assigned.into_iter().enumerate() {
        let xe = x.select(Axis(0), &tokens);
        let (pre, act, out) = expert_forward(&xe, &layer.experts[e]);
        experts.push(ExpertCache {
            tokens,
            pre,
            act,
            out,
        });
    }
    for t in 0..n {
        let mut row = y.row_mut(t);
        for (j, &(e, r)) in slots[t].iter().enumerate() {
            row.scaled_add(weights[t][j], &experts[e].out.row(r));
        }
    }
    let record = RoutingRecord {
        logits,
        probs,
        topk,
        weights,
    };
    Ok((
        y,
        record,
        MoeCache {
            input: x.clone(),
            experts,
            slots,
        },
    ))
}

/// Backward through the expert layer. `extra_dlogits` and
/// `extra_dexpert[t][j]` carry auxiliary-loss gradients for router logits
/// and the expert output in slot `j` of token `t`. Returns `dx`.
pub fn moe_layer_backward<T: Scalar>(
    dy: &Array2<T>,
    rec: &RoutingRecord<T>,
    cache: &MoeCache<T>,
    layer: &LayerParams<T>,
    grads: &mut LayerParams<T>,
    extra_dlogits: Option<&Array2<T>>,
    extra_dexpert: Option<&[Vec<Vec<T>>]>,
) -> Array2<T> {
    let n = dy.nrows();
    let d = dy.ncols();
    let mut d_out: Vec<Array2<T>> = cache
        .experts
        .iter()
        .map(|c| Array2::zeros(c.out.dim()))
        .collect();
    let mut dlogits = Array2::zeros(rec.logits.dim());
    for t in 0..n {
        let dyt = dy.row(t);
        let sel = &rec.topk[t];
        let w = &rec.weights[t];
        let mut dw = Vec::with_capacity(sel.len());
        for (j, &(e, r)) in cache.slots[t].iter().enumerate() {
            dw.push(dyt.dot(&cache.experts[e].out.row(r)));
            let mut row = d_out[e].row_mut(r);
            row.scaled_add(w[j], &dyt);
            if let Some(extra) = extra_dexpert {
                row.zip_mut_with(&ndarray::ArrayView1::from(&extra[t][j]), |a, &b| *a += b);
            }
        }
        // w_j = p_j / Z over the selected set
        let p = rec.probs.row(t);
        let z: T = sel.iter().map(|&e| p[e]).sum();
        let wdw: T = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
        let mut dp = vec![T::zero(); p.len()];
        for (j, &e) in sel.iter().enumerate() {
            dp[e] = (dw[j] - wdw) / z;
        }
        let pdp: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
        let mut dl = dlogits.row_mut(t);
        for e in 0..p.len() {
            dl[e] = p[e] * (dp[e] - pdp);
        }
    }
    if let Some(extra) = extra_dlogits {
        dlogits += extra;
    }
    grads.router += &cache.input.t().dot(&dlogits);
    let mut dx = dlogits.dot(&layer.router.t());
    for (e, ec) in cache.experts.iter().enumerate() {
        if ec.tokens.is_empty() {
            continue;
        }
        let p = &layer.experts[e];
        let g = &mut grads.experts[e];
        let dout = &d_out[e];
        g.w2 += &ec.act.t().dot(dout);
        g.b2 += &dout.sum_axis(Axis(0));
        let mut dpre = dout.dot(&p.w2.t());
        dpre.zip_mut_with(&ec.pre, |a, &x| *a *= gelu_grad(x));
        let xe = cache.input.select(Axis(0), &ec.tokens);
        g.w1 += &xe.t().dot(&dpre);
        g.b1 += &dpre.sum_axis(Axis(0));
        let dxe = dpre.dot(&p.w1.t());
        for (r, &t) in ec.tokens.iter().enumerate() {
            let mut row = dx.row_mut(t);
            row += &dxe.row(r);
        }
    }
    debug_assert_eq!(dx.ncols(), d);
    dx
}
