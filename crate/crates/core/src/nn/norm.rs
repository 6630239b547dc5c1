use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over contiguous channel groups of a single sample.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Normalized activations and the per-group `1/σ`, kept for backward.
#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub xhat: FeatureMap,
    pub inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{groups} groups do not divide {channels} channels ({name})"
            )));
        }
        let gamma = params.ones(format!("{name}.weight"), vec![channels]);
        let beta = params.zeros(format!("{name}.bias"), vec![channels]);
        Ok(Self {
            gamma,
            beta,
            channels,
            groups,
            eps: GROUP_NORM_EPS,
        })
    }

    fn group_span(&self, x: &FeatureMap, g: usize) -> std::ops::Range<usize> {
        let per = self.channels / self.groups * x.plane_len();
        g * per..(g + 1) * per
    }

    pub fn forward(&self, params: &ParamSet, x: &FeatureMap) -> (FeatureMap, GroupNormCache) {
        assert_eq!(x.channels, self.channels, "group norm channel mismatch");
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = &mut xhat.data[self.group_span(x, g)];
            let n = span.len() as f64;
            let mean = span.iter().sum::<f64>() / n;
            let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for v in span.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let (s, b) = (gamma[c], beta[c]);
            for v in y.plane_mut(c) {
                *v = *v * s + b;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &GroupNormCache,
        dy: &FeatureMap,
        grads: &mut Grads,
    ) -> FeatureMap {
        let xhat = &cache.xhat;
        {
            let dgamma = grads.get_mut(self.gamma);
            for (c, g) in dgamma.iter_mut().enumerate() {
                *g += dy.plane(c).iter().zip(xhat.plane(c)).map(|(d, x)| d * x).sum::<f64>();
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for (c, g) in dbeta.iter_mut().enumerate() {
                *g += dy.plane(c).iter().sum::<f64>();
            }
        }
        let gamma = params.get(self.gamma);
        let mut dx = dy.clone();
        for (c, &s) in gamma.iter().enumerate().take(self.channels) {
            for v in dx.plane_mut(c) {
                *v *= s;
            }
        }
        // dx = inv/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), per group
        for g in 0..self.groups {
            let span = self.group_span(xhat, g);
            let xs = &xhat.data[span.clone()];
            let ds = &mut dx.data[span];
            let n = ds.len() as f64;
            let sum_d: f64 = ds.iter().sum();
            let sum_dx: f64 = ds.iter().zip(xs).map(|(d, x)| d * x).sum();
            let inv = cache.inv_std[g];
            for (d, x) in ds.iter_mut().zip(xs) {
                *d = inv / n * (n * *d - sum_d - x * sum_dx);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize, scale: f64, shift: f64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0) * scale + shift).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn groups_are_standardized_at_identity_affine() {
        let mut params = ParamSet::new();
        let gn = GroupNorm::new(&mut params, "gn", 16, 4).unwrap();
        for seed in 0..5 {
            let x = random_map(seed, 16, 5, 7, 3.0 + seed as f64, -2.0 * seed as f64);
            let (y, _) = gn.forward(&params, &x);
            for g in 0..4 {
                let span = &y.data[gn.group_span(&y, g)];
                let n = span.len() as f64;
                let mean = span.iter().sum::<f64>() / n;
                let var = span.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-4, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let mut params = ParamSet::new();
        assert!(GroupNorm::new(&mut params, "gn", 12, 8).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut params = ParamSet::new();
        let gn = GroupNorm::new(&mut params, "gn", 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in params.get_mut(gn.gamma) {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in params.get_mut(gn.beta) {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = random_map(1, 4, 3, 3, 1.0, 0.3);
        let r = random_map(2, 4, 3, 3, 1.0, 0.0);
        let loss = |p: &ParamSet, x: &FeatureMap| {
            let (y, _) = gn.forward(p, x);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = gn.forward(&params, &x);
        let mut grads = Grads::zeros_like(&params);
        let dx = gn.backward(&params, &cache, &r, &mut grads);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((num - dx.data[i]).abs() < 1e-6, "{num} vs {}", dx.data[i]);
        }
        for id in [gn.gamma, gn.beta] {
            for i in 0..4 {
                let orig = params.get(id)[i];
                params.get_mut(id)[i] = orig + h;
                let lp = loss(&params, &x);
                params.get_mut(id)[i] = orig - h;
                let lm = loss(&params, &x);
                params.get_mut(id)[i] = orig;
                assert!(((lp - lm) / (2.0 * h) - grads.get(id)[i]).abs() < 1e-6);
            }
        }
    }
}
