//! Central finite-difference checks for the tape in double precision.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    /// `true` when at least `min_fraction` of coordinates have relative error below `tol`.
    pub fn ok(&self, min_fraction: f64) -> bool {
        self.checked > 0 && self.pass_fraction() >= min_fraction
    }

    fn record(&mut self, analytic: f64, numeric: f64, tol: f64) {
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        // both effectively zero: compare absolutely
        let rel = if scale < 1e-8 { err } else { err / scale };
        self.checked += 1;
        if rel < tol {
            self.passed += 1;
        }
        self.max_rel_err = self.max_rel_err.max(rel);
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn pick<R: Rng>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks d(loss)/d(inputs) where `f` builds a scalar loss from leaf vars.
pub fn check_inputs<R: Rng>(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    max_coords_per_input: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> GradCheckReport {
    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::detached();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };

    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for idx in pick(input.len(), max_coords_per_input, rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            report.record(analytic.data()[idx], numeric, tol);
        }
    }
    report
}

/// Checks d(loss)/d(params) for the listed parameters of `store`.
pub fn check_params<R: Rng>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: impl Fn(&mut Graph<f64>) -> Var,
    max_coords_per_param: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> GradCheckReport {
    let mut trainable = vec![false; store.len()];
    for id in ids {
        trainable[id.0] = true;
    }
    let mut g = Graph::new(store, &trainable);
    let loss = f(&mut g);
    let grads = g.backward(loss).into_params();

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for &id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for idx in pick(store.get(id).len(), max_coords_per_param, rng) {
            let orig = work.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + step;
            let lp = {
                let mut g = Graph::inference(&work);
                let l = f(&mut g);
                g.value(l).data()[0]
            };
            work.get_mut(id).data_mut()[idx] = orig - step;
            let lm = {
                let mut g = Graph::inference(&work);
                let l = f(&mut g);
                g.value(l).data()[0]
            };
            work.get_mut(id).data_mut()[idx] = orig;
            report.record(analytic.data()[idx], (lp - lm) / (2.0 * step), tol);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn elementary_ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 5], &mut rng);
        let c = rand_t(&[3, 5], &mut rng);
        let r = check_inputs(
            &[a, b, c],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let s = g.gelu(m);
                let t = g.mul(s, v[2]);
                let u = g.softmax_rows(t);
                let w = g.sigmoid(u);
                let ls = g.log_softmax_rows(w);
                g.mean_all(ls)
            },
            100,
            1e-5,
            1e-4,
            &mut rng,
        );
        assert!(r.ok(0.95), "{r:?}");
    }

    #[test]
    fn structural_ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[2, 36], &mut rng);
        let gam = rand_t(&[1, 6], &mut rng);
        let bet = rand_t(&[1, 6], &mut rng);
        let r = check_inputs(
            &[x, gam, bet],
            |g, v| {
                let geom = crate::autograd::ConvGeom {
                    channels: 2,
                    height: 6,
                    width: 6,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                };
                let cols = g.im2col(v[0], geom);
                let up = g.upsample_bilinear(cols, 6, 6, 9, 8);
                let t = g.transpose(up);
                let s = g.slice_cols(t, 2, 8);
                let ln = g.layer_norm(s, v[1], v[2], 1e-5);
                let n = g.normalize_rows(ln, 1e-12);
                let rows = g.slice_rows(n, 1, 5);
                let cc = g.concat_rows(&[rows, n]);
                let m = g.mean_rows(cc);
                let b = g.broadcast_rows(m, 3);
                let sc = g.sum_cols(b);
                let sq = g.mul(sc, sc);
                g.sum_all(sq)
            },
            60,
            1e-5,
            1e-4,
            &mut rng,
        );
        assert!(r.ok(0.99), "{r:?}");
    }

    #[test]
    fn im2col_1d_and_bce_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&[2, 20], &mut rng);
        let w = rand_t(&[3, 8], &mut rng);
        let target = Tensor::from_fn(&[3, 5], |i| (i % 2) as f64);
        let r = check_inputs(
            &[x, w],
            |g, v| {
                let cols = g.im2col_1d(v[0], 4, 4);
                let y = g.matmul(v[1], cols);
                let d = g.div(y, y);
                let y2 = g.add(y, d);
                g.bce_with_logits(y2, target.clone())
            },
            40,
            1e-5,
            1e-4,
            &mut rng,
        );
        assert!(r.ok(0.95), "{r:?}");
    }
}
