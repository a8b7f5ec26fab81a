//! Adam and deterministic batch gradient accumulation.

use std::collections::HashMap;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::parallel;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

/// Loss values and summed parameter gradients of one batch.
#[derive(Debug)]
pub struct BatchGrads<A> {
    pub aux: Vec<A>,
    pub losses: Vec<f64>,
    pub grads: HashMap<ParamId, Mat>,
}

impl<A> BatchGrads<A> {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    pub fn grad_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        ids.iter().map(|id| self.grads[id].sum_squares()).sum::<f64>().sqrt()
    }
}

/// Builds one graph per item, back-propagates each, and averages the
/// parameter gradients over the batch. Per-item work runs on the parallel
/// pool; the reduction is sequential in item order so results do not depend
/// on scheduling.
///
/// `f` returns the scalar loss plus any auxiliary per-item values.
pub fn batch_gradients<T, A, F>(params: &ParamSet, items: &[T], f: F) -> Result<BatchGrads<A>>
where
    T: Sync,
    A: Send,
    F: Fn(&Graph, &T) -> Result<(Var, A)> + Sync + Send,
{
    let per_item = parallel::try_map(items, |item| {
        let g = Graph::new(params);
        let (loss, aux) = f(&g, item)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss).into_params();
        Ok::<_, crate::Error>((value, aux, grads))
    })?;
    let n = items.len().max(1) as f64;
    let mut grads: HashMap<ParamId, Mat> = HashMap::new();
    let mut losses = Vec::with_capacity(per_item.len());
    let mut aux = Vec::with_capacity(per_item.len());
    for (value, a, item_grads) in per_item {
        losses.push(value);
        aux.push(a);
        let mut ids: Vec<_> = item_grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let gr = &item_grads[&id];
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(gr),
                None => {
                    grads.insert(id, gr.clone());
                }
            }
        }
    }
    for g in grads.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok(BatchGrads { aux, losses, grads })
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero disables it.
    pub weight_decay: f64,
    step: u64,
    m: HashMap<ParamId, Mat>,
    v: HashMap<ParamId, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &HashMap<ParamId, Mat>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut ids: Vec<_> = grads.keys().copied().filter(|id| params.is_trainable(*id)).collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let (r, c) = g.shape();
            let m = self.m.entry(id).or_insert_with(|| Mat::zeros(r, c));
            let v = self.v.entry(id).or_insert_with(|| Mat::zeros(r, c));
            let w = params.value_mut(id);
            for i in 0..g.len() {
                let gi = g.as_slice()[i];
                let mi = self.beta1 * m.as_slice()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.as_slice()[i] + (1.0 - self.beta2) * gi * gi;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let wi = &mut w.as_mut_slice()[i];
                *wi -= self.lr * (update + self.weight_decay * *wi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::new();
        let x = p.add("x", Mat::row_vector(&[3.0, -2.0]), true);
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let bg = batch_gradients(&p, &[()], |g, _| {
                let v = g.param(x);
                Ok((g.sum(g.mul(v, v)), ()))
            })
            .unwrap();
            opt.step(&mut p, &bg.grads);
        }
        assert!(p.value(x).max_abs() < 1e-2);
        assert_eq!(opt.steps_taken(), 300);
    }

    #[test]
    fn batch_gradients_average_items_and_skip_frozen() {
        let mut p = ParamSet::new();
        let w = p.add("w", Mat::scalar(2.0), true);
        let f = p.add("f", Mat::scalar(1.0), false);
        let items = [1.0, 3.0];
        let bg = batch_gradients(&p, &items, |g, k| {
            let y = g.scale(g.mul(g.param(w), g.param(f)), *k);
            Ok((g.sum(y), *k))
        })
        .unwrap();
        assert_eq!(bg.losses, vec![2.0, 6.0]);
        assert_eq!(bg.grads[&w].to_scalar(), 2.0);
        assert!(!bg.grads.contains_key(&f));
        assert_eq!(bg.aux, vec![1.0, 3.0]);
    }
}
