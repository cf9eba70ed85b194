use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{ensure, Result};
use crate::network::NetworkConfig;
use crate::numerics::Tensor;
use crate::rng::{derive_seed, seeded};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal(f64),
    /// Uniform on `[-1/√fan_in, 1/√fan_in]`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// One trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

impl Param {
    pub fn new(name: String, value: Tensor<f32>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self { name, grad: z.clone(), m: z.clone(), v: z, value }
    }
}

/// Named network parameters plus the optimizer step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub config: NetworkConfig,
    pub step: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

fn sample_init<R: Rng>(init: Init, shape: &[usize], rng: &mut R) -> Tensor<f32> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| u.sample(rng) as f32)
        }
        Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        }),
    }
}

impl ParamStore {
    /// Initializes every spec from its own sub-seed `(seed, index)`.
    pub fn initialize(config: NetworkConfig, specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = seeded(derive_seed(seed, i as u64));
                Param::new(s.name.clone(), sample_init(s.init, &s.shape, &mut rng))
            })
            .collect();
        Self::from_params(config, params, 0)
    }

    pub fn from_params(config: NetworkConfig, params: Vec<Param>, step: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            ensure!(index.insert(p.name.clone(), i).is_none(), "duplicate parameter name {}", p.name);
        }
        Ok(Self { config, step, params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn values(&self) -> Vec<&Tensor<f32>> {
        self.params.iter().map(|p| &p.value).collect()
    }
}
