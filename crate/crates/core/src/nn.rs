//! Layer building blocks shared by every network in the crate.
//!
//! Layers hold only [`ParamId`]s; the weights live in a [`ParamStore`] and
//! are bound to a graph per step, so one forward definition serves both
//! `f32` training and `f64` gradient checks.

use autodiff::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Registers named parameters under a dotted prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn param(&mut self, name: &str, t: Tensor<f32>) -> Result<ParamId> {
        Ok(self.store.add(join(&self.prefix, name), t)?)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.param(name, t)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel `k` with "same" padding `k / 2`.
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut i = init.sub(name);
        let fan_in = cin * k * k;
        let weight = i.fan_in_uniform("weight", &[cout, cin, k, k], fan_in)?;
        let bias = i.fan_in_uniform("bias", &[cout], fan_in)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    /// All-zero weights and bias, so the layer initially outputs zero.
    pub fn zeroed(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let mut i = init.sub(name);
        let weight = i.param("weight", Tensor::zeros(&[cout, cin, k, k]))?;
        let bias = i.param("bias", Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        Ok(x.conv2d(
            &p.var(self.weight),
            Some(&p.var(self.bias)),
            self.stride,
            self.pad,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const NORM_GROUPS: usize = 4;

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut i = init.sub(name);
        Ok(Self {
            gamma: i.param("gamma", Tensor::ones(&[channels]))?,
            beta: i.param("beta", Tensor::zeros(&[channels]))?,
            groups: NORM_GROUPS,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        Ok(x.group_norm(&p.var(self.gamma), &p.var(self.beta), self.groups, 1e-5)?)
    }
}

/// `x @ W + b` for `x: [N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut i = init.sub(name);
        Ok(Self {
            weight: i.fan_in_uniform("weight", &[din, dout], din)?,
            bias: i.fan_in_uniform("bias", &[dout], din)?,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        Ok(x.matmul(&p.var(self.weight))?.add_bias(&p.var(self.bias))?)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<S: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((t as f64 * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((t as f64 * freq).sin()));
        }
        data.extend(std::iter::repeat_n(S::zero(), dim - 2 * half));
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("embedding shape")
}

/// Mean squared error between equal-shaped vars.
pub fn mse<'g, S: Scalar>(a: &Var<'g, S>, b: &Var<'g, S>) -> Result<Var<'g, S>> {
    Ok(a.sub(b)?.square().mean())
}

/// Mean absolute error between equal-shaped vars.
pub fn l1<'g, S: Scalar>(a: &Var<'g, S>, b: &Var<'g, S>) -> Result<Var<'g, S>> {
    Ok(a.sub(b)?.abs().mean())
}

/// Fresh deterministic RNG for a named purpose under a run seed.
pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Uniform index in `0..n`.
pub fn rand_index(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Graph;

    #[test]
    fn zeroed_conv_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0, "t");
        let conv = Conv2d::zeroed(&mut Init::new(&mut store, &mut rng, "c"), "z", 3, 5, 3).unwrap();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(&Tensor::ones(&[1, 3, 4, 4]));
        let y = conv.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 4, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding::<f64>(&[1, 500], 16);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&e.data()[..16], &e.data()[16..]);
    }

    #[test]
    fn rng_streams_differ_by_name() {
        let a: u64 = seeded_rng(1, "a").random();
        let b: u64 = seeded_rng(1, "b").random();
        let a2: u64 = seeded_rng(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
