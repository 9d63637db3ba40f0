//! Dual-level InfoNCE alignment and the staged unfreezing schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::visual_block_prefix;
use crate::error::{Error, Result};
use crate::optim::ParamHyper;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveLossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub symmetric: bool,
}

impl Default for ContrastiveLossConfig {
    fn default() -> Self {
        Self { temperature: 0.07, lambda: 0.5, symmetric: true }
    }
}

impl ContrastiveLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Row-stacked `[B, D_proj]` unit embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch {
    pub z_image: Var,
    pub z_audio: Var,
    pub z_patch_mean: Var,
}

fn check_unit_rows<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    for r in 0..t.rows() {
        let n: f64 = t.row(r).iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}")));
        }
    }
    Ok(())
}

/// `−mean_i log softmax_j(s_ij / τ)[i]` with `s = anchors · positivesᵀ`,
/// averaged with the reverse direction when `symmetric`.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: Var,
    temperature: f64,
    symmetric: bool,
) -> Result<Var> {
    let (sa, sp) = (g.shape(anchors).to_vec(), g.shape(positives).to_vec());
    if sa != sp {
        return Err(Error::Shape(format!("anchors {sa:?} vs positives {sp:?}")));
    }
    if sa[0] == 0 {
        return Err(Error::Domain("info_nce needs at least one pair".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Domain(format!("temperature {temperature}")));
    }
    check_unit_rows(g, anchors, "anchor")?;
    check_unit_rows(g, positives, "positive")?;
    let s = g.matmul_nt(anchors, positives);
    let s = g.scale(s, lit(1.0 / temperature));
    let direction = |g: &mut Graph<T>, s: Var| {
        let ls = g.log_softmax_rows(s);
        let d = g.diag(ls);
        let m = g.mean_all(d);
        g.scale(m, -T::one())
    };
    let forward = direction(g, s);
    if !symmetric {
        return Ok(forward);
    }
    let st = g.transpose(s);
    let backward = direction(g, st);
    let sum = g.add(forward, backward);
    Ok(g.scale(sum, lit(0.5)))
}

pub struct DualLoss {
    pub g2g: Var,
    pub l2g: Var,
    pub total: Var,
}

/// `info_nce(z_image, z_audio) + λ · info_nce(z_patch_mean, z_audio)`.
pub fn dual_level_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &ContrastiveBatch,
    cfg: &ContrastiveLossConfig,
) -> Result<DualLoss> {
    cfg.validate()?;
    let g2g = info_nce(g, batch.z_image, batch.z_audio, cfg.temperature, cfg.symmetric)?;
    let l2g = info_nce(g, batch.z_patch_mean, batch.z_audio, cfg.temperature, cfg.symmetric)?;
    let weighted = g.scale(l2g, lit(cfg.lambda));
    let total = g.add(g2g, weighted);
    Ok(DualLoss { g2g, l2g, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2ScheduleConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
}

impl Default for Stage2ScheduleConfig {
    fn default() -> Self {
        Self { epochs: 50, base_lr: 1e-4, finetune_lr: 1e-5, weight_decay: 0.01 }
    }
}

impl Stage2ScheduleConfig {
    /// First epoch with the top visual layer unfrozen (21 of 50).
    pub fn top_layer_epoch(&self) -> usize {
        (self.epochs as f64 * 0.4).floor() as usize + 1
    }

    /// First epoch with the top third of visual layers unfrozen (31 of 50).
    pub fn top_third_epoch(&self) -> usize {
        (self.epochs as f64 * 0.6).floor() as usize + 1
    }
}

/// Trainable parameter groups at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleStep {
    pub epoch: usize,
    /// Learning rate of fusion and projection heads.
    pub head_lr: f64,
    /// 1-based visual layers trained at `encoder_lr`.
    pub visual_layers: Vec<usize>,
    pub encoder_lr: f64,
    pub audio_trainable: bool,
}

impl ScheduleStep {
    pub fn encoder_frozen(&self) -> bool {
        self.visual_layers.is_empty() && !self.audio_trainable
    }

    /// Trainability mask and per-parameter hyper-parameters over a store.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        weight_decay: f64,
        depth: usize,
    ) -> (Vec<bool>, BTreeMap<ParamId, ParamHyper>) {
        let mut mask = vec![false; store.len()];
        let mut hyper = BTreeMap::new();
        let prefixes: Vec<String> = self.visual_layers.iter().map(|&l| visual_block_prefix(l)).collect();
        let top_open = self.visual_layers.contains(&depth);
        for (id, name, _) in store.iter() {
            let lr = if name.starts_with("fusion.") || name.starts_with("proj.") {
                Some(self.head_lr)
            } else if prefixes.iter().any(|p| name.starts_with(p.as_str()))
                || (top_open && name.starts_with("visual.norm."))
                || (self.audio_trainable && name.starts_with("audio."))
            {
                Some(self.encoder_lr)
            } else {
                None
            };
            if let Some(lr) = lr {
                mask[id.0] = true;
                hyper.insert(id, ParamHyper { lr, weight_decay });
            }
        }
        (mask, hyper)
    }
}

/// Encoders frozen for the first 40% of epochs, then the top visual layer,
/// then the top third of visual layers at the reduced rate. Audio stays frozen.
pub fn stage2_schedule(epoch: usize, depth: usize, cfg: &Stage2ScheduleConfig) -> Result<ScheduleStep> {
    if epoch == 0 {
        return Err(Error::Domain("epochs are 1-based".into()));
    }
    let visual_layers: Vec<usize> = if epoch >= cfg.top_third_epoch() {
        let k = depth.div_ceil(3);
        (depth + 1 - k..=depth).collect()
    } else if epoch >= cfg.top_layer_epoch() {
        vec![depth]
    } else {
        Vec::new()
    };
    Ok(ScheduleStep {
        epoch,
        head_lr: cfg.base_lr,
        visual_layers,
        encoder_lr: cfg.finetune_lr,
        audio_trainable: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(a: &Tensor<f64>, p: &Tensor<f64>, tau: f64, sym: bool) -> f64 {
        let mut g = Graph::detached();
        let (a, p) = (g.constant(a.clone()), g.constant(p.clone()));
        let l = info_nce(&mut g, a, p, tau, sym).unwrap();
        g.value(l).data()[0]
    }

    fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::randn(&[b, d], 1.0, rng);
        for r in 0..b {
            let n: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..d {
                let v = t.at(r, c) / n;
                t.set(r, c, v);
            }
        }
        t
    }

    #[test]
    fn single_pair_is_zero() {
        let a = Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap();
        assert!(eval(&a, &a, 0.07, true).abs() < 1e-15);
    }

    #[test]
    fn closed_forms() {
        let e = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let aligned = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((aligned - 6.2e-7).abs() < 0.05e-7);
        assert!((eval(&e, &e, 0.07, false) - aligned).abs() < 1e-13);
        assert!((eval(&e, &e, 0.07, true) - aligned).abs() < 1e-13);
        let swapped = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let confused = (1.0 + (1.0f64 / 0.07).exp()).ln();
        assert!((eval(&e, &swapped, 0.07, true) - confused).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_is_domain_error() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(info_nce(&mut g, a, a, 0.07, true), Err(Error::Domain(_))));
    }

    #[test]
    fn dual_level_composition() {
        let e = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other = unit_rows(2, 2, &mut rng);
        for lambda in [0.0, 0.5] {
            let cfg = ContrastiveLossConfig { lambda, ..Default::default() };
            let mut g = Graph::detached();
            let zi = g.constant(e.clone());
            let za = g.constant(e.clone());
            let zp = g.constant(other.clone());
            let d = dual_level_loss(&mut g, &ContrastiveBatch { z_image: zi, z_audio: za, z_patch_mean: zp }, &cfg)
                .unwrap();
            let expect = eval(&e, &e, 0.07, true) + lambda * eval(&other, &e, 0.07, true);
            assert!((g.value(d.total).data()[0] - expect).abs() < 1e-12);
        }
        let mut g = Graph::detached();
        let z = g.constant(e.clone());
        let d = dual_level_loss(
            &mut g,
            &ContrastiveBatch { z_image: z, z_audio: z, z_patch_mean: z },
            &ContrastiveLossConfig::default(),
        )
        .unwrap();
        let aligned = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((g.value(d.total).data()[0] - 1.5 * aligned).abs() < 1e-13);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| unit_rows(4, 3, &mut rng)).collect();
        let r = check_inputs(
            &inputs,
            |g, v| {
                let b = ContrastiveBatch { z_image: v[0], z_audio: v[1], z_patch_mean: v[2] };
                let cfg = ContrastiveLossConfig { temperature: 0.5, ..Default::default() };
                dual_level_loss(g, &b, &cfg).unwrap().total
            },
            100,
            1e-6,
            1e-4,
            &mut rng,
        );
        assert!(r.ok(0.95), "{r:?}");
    }

    #[test]
    fn schedule_phases() {
        let cfg = Stage2ScheduleConfig::default();
        assert_eq!((cfg.top_layer_epoch(), cfg.top_third_epoch()), (21, 31));
        let s = stage2_schedule(5, 6, &cfg).unwrap();
        assert!(s.encoder_frozen());
        assert_eq!(s.head_lr, 1e-4);
        let s = stage2_schedule(25, 6, &cfg).unwrap();
        assert_eq!(s.visual_layers, vec![6]);
        assert_eq!(s.encoder_lr, 1e-5);
        let s = stage2_schedule(40, 6, &cfg).unwrap();
        assert_eq!(s.visual_layers, vec![5, 6]);
        assert_eq!(stage2_schedule(40, 12, &cfg).unwrap().visual_layers, vec![9, 10, 11, 12]);
        assert!(!stage2_schedule(50, 6, &cfg).unwrap().audio_trainable);
        assert!(stage2_schedule(0, 6, &cfg).is_err());
    }

    #[test]
    fn schedule_masks_by_name() {
        let mut store = ParamStore::<f32>::new();
        for n in [
            "visual.blocks.5.ln1.gamma",
            "visual.blocks.6.ln1.gamma",
            "visual.norm.gamma",
            "visual.pos",
            "audio.blocks.1.ln1.gamma",
            "fusion.0.weight",
            "proj.audio.fc1.weight",
        ] {
            store.add(n, Tensor::zeros(&[1, 1])).unwrap();
        }
        let cfg = Stage2ScheduleConfig::default();
        let (m, h) = stage2_schedule(1, 6, &cfg).unwrap().apply(&store, 0.01, 6);
        assert_eq!(m, vec![false, false, false, false, false, true, true]);
        assert_eq!(h.len(), 2);
        let (m, h) = stage2_schedule(25, 6, &cfg).unwrap().apply(&store, 0.01, 6);
        assert_eq!(m, vec![false, true, true, false, false, true, true]);
        assert_eq!(h[&ParamId(1)].lr, 1e-5);
        let (m, _) = stage2_schedule(35, 6, &cfg).unwrap().apply(&store, 0.01, 6);
        assert_eq!(m, vec![true, true, true, false, false, true, true]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
            let c = t.cols();
            Tensor::from_fn(&[t.rows(), c], |i| t.at(perm[i / c], i % c))
        }

        proptest! {
            #[test]
            fn permutation_equivariant(seed in 0u64..10_000, b in 2usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = unit_rows(b, 4, &mut rng);
                let p = unit_rows(b, 4, &mut rng);
                let mut perm: Vec<usize> = (0..b).collect();
                use rand::seq::SliceRandom;
                perm.shuffle(&mut rng);
                let l0 = eval(&a, &p, 0.1, true);
                let l1 = eval(&permute_rows(&a, &perm), &permute_rows(&p, &perm), 0.1, true);
                prop_assert!((l0 - l1).abs() < 1e-10);
            }

            #[test]
            fn aligned_beats_shuffled(seed in 0u64..10_000, b in 4usize..9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = unit_rows(b, 8, &mut rng);
                let shifted: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
                let aligned = eval(&a, &a, 0.07, true);
                let shuffled = eval(&a, &permute_rows(&a, &shifted), 0.07, true);
                prop_assert!(aligned < shuffled);
            }

            #[test]
            fn rotation_invariant(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = unit_rows(5, 4, &mut rng);
                let p = unit_rows(5, 4, &mut rng);
                // random orthogonal matrix by Gram-Schmidt
                let m = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
                let mut q: Vec<Vec<f64>> = Vec::new();
                for r in 0..4 {
                    let mut v = m.row(r).to_vec();
                    for u in &q {
                        let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                        for (x, y) in v.iter_mut().zip(u) { *x -= d * y; }
                    }
                    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    q.push(v.iter().map(|x| x / n).collect());
                }
                let qt = Tensor::from_fn(&[4, 4], |i| q[i / 4][i % 4]);
                let l0 = eval(&a, &p, 0.07, true);
                let l1 = eval(&a.matmul(&qt), &p.matmul(&qt), 0.07, true);
                prop_assert!((l0 - l1).abs() < 1e-9);
            }
        }
    }
}
