use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::{DetectorConfig, DetectorError, FEATURE_CHANNELS, ROI_FEATURES};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Bound {
        let vars = self
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.leaf(t.clone().with_requires_grad(true)) } else { tape.constant(t.clone()) };
                (n.to_string(), v)
            })
            .collect::<Vec<_>>();
        Bound { order: vars.iter().map(|(_, v)| *v).collect(), by_name: vars.into_iter().collect() }
    }
}

/// Tape variables for a [`ParamStore`], addressable by name.
pub struct Bound {
    order: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, DetectorError> {
        self.by_name.get(name).copied().ok_or_else(|| DetectorError::MissingParam(name.into()))
    }

    /// Gradients in store order; zeros where nothing flowed.
    pub fn grads(&self, tape: &Tape<f32>) -> Vec<Vec<f32>> {
        self.order
            .iter()
            .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect()
    }
}

/// Shapes of every parameter: detector (`det.*`) and domain heads (`da.*`).
pub fn param_shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let a = cfg.anchors.per_location();
    let k1 = cfg.num_classes + 1;
    let pooled = FEATURE_CHANNELS * cfg.pool_size * cfg.pool_size;
    let mut out = Vec::new();
    let mut conv = |name: &str, f: usize, c: usize, k: usize| {
        out.push((format!("{name}.w"), vec![f, c, k, k]));
        out.push((format!("{name}.b"), vec![f]));
    };
    conv("det.conv1", 8, 3, 3);
    conv("det.conv2", 16, 8, 3);
    conv("det.conv3", 32, 16, 3);
    conv("det.conv4", FEATURE_CHANNELS, 32, 3);
    conv("det.rpn.conv", 32, FEATURE_CHANNELS, 3);
    conv("det.rpn.cls", a, 32, 1);
    conv("det.rpn.bbox", 4 * a, 32, 1);
    conv("da.img.conv1", 32, FEATURE_CHANNELS, 1);
    conv("da.img.conv2", 1, 32, 1);
    let mut fc = |name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o]));
        out.push((format!("{name}.b"), vec![o]));
    };
    fc("det.fc6", pooled, ROI_FEATURES);
    fc("det.fc7", ROI_FEATURES, ROI_FEATURES);
    fc("det.cls", ROI_FEATURES, k1);
    fc("det.bbox", ROI_FEATURES, 4 * k1);
    fc("da.ins.fc1", ROI_FEATURES, 32);
    fc("da.ins.fc2", 32, 1);
    out
}

/// He-uniform weights (`±sqrt(6/fan_in)`), zero biases.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let lim = (6.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-lim..lim)).collect()
        };
        store.insert(name, Tensor::new(shape, data).expect("positive shape"));
    }
    store
}
