//! Embedding functions `f` (queries) and `g` (support items).
//!
//! Both are multilayer perceptrons over precomputed feature vectors, with the
//! activation applied after every layer. By default they share one parameter
//! set.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature length of the inputs; 0 means "take it from the data".
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub share_f_g: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden_dims: vec![32],
            embed_dim: 32,
            activation: Activation::Tanh,
            share_f_g: true,
        }
    }
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            activation,
            share_f_g: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: input {}, hidden {:?}, embed {}",
                self.input_dim, self.hidden_dims, self.embed_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.embed_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        let one: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        if self.share_f_g {
            one
        } else {
            2 * one
        }
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        let branches: &[&str] = if self.share_f_g { &["f"] } else { &["f", "g"] };
        let mut entries = Vec::new();
        let mut offset = 0;
        for branch in branches {
            for (layer, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
                entries.push(ParamEntry {
                    name: format!("{branch}.{layer}.weight"),
                    shape: vec![fan_in, fan_out],
                    offset,
                });
                offset += fan_in * fan_out;
                entries.push(ParamEntry {
                    name: format!("{branch}.{layer}.bias"),
                    shape: vec![fan_out],
                    offset,
                });
                offset += fan_out;
            }
        }
        entries
    }

    /// Slices the flat parameter node into per-layer weight and bias nodes.
    pub fn bind(&self, tape: &mut Tape, theta: NodeId) -> Result<EncoderGraph> {
        self.validate()?;
        let expected = self.param_count();
        if tape.shape(theta) != [expected] {
            return Err(Error::Dimension(format!(
                "encoder expects {expected} parameters, got shape {:?}",
                tape.shape(theta)
            )));
        }
        let manifest = self.manifest();
        let mut layers = Vec::with_capacity(manifest.len() / 2);
        for pair in manifest.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            let w_flat = tape.slice(theta, w.offset, w.shape[0] * w.shape[1])?;
            let weight = tape.reshape(w_flat, &w.shape)?;
            let bias = tape.slice(theta, b.offset, b.shape[0])?;
            layers.push(Layer { weight, bias });
        }
        let per_branch = self.layer_dims().len();
        let g = if self.share_f_g {
            None
        } else {
            Some(layers.split_off(per_branch))
        };
        Ok(EncoderGraph {
            f: layers,
            g,
            activation: self.activation,
            input_dim: self.input_dim,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: NodeId,
    bias: NodeId,
}

/// Encoder layers bound to a parameter node on one tape.
#[derive(Clone, Debug)]
pub struct EncoderGraph {
    f: Vec<Layer>,
    g: Option<Vec<Layer>>,
    activation: Activation,
    input_dim: usize,
}

impl EncoderGraph {
    /// Query-side embedding of a `[n, input_dim]` matrix.
    pub fn embed_f(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.run(tape, &self.f, x)
    }

    /// Support-side embedding; identical to `f` when parameters are shared.
    pub fn embed_g(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.run(tape, self.g.as_ref().unwrap_or(&self.f), x)
    }

    fn run(&self, tape: &mut Tape, layers: &[Layer], x: NodeId) -> Result<NodeId> {
        match tape.shape(x) {
            [_, c] if *c == self.input_dim => {}
            s => {
                return Err(Error::Dimension(format!(
                    "encoder input must be [n, {}], got {s:?}",
                    self.input_dim
                )))
            }
        }
        let mut h = x;
        for layer in layers {
            let z = tape.matmul(h, layer.weight)?;
            let z = tape.add(z, layer.bias)?;
            h = match self.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::Tanh => tape.tanh(z)?,
            };
        }
        Ok(h)
    }
}

/// Embeds one feature vector with `f`, returning an `embed_dim` vector node.
pub fn embed(tape: &mut Tape, config: &EncoderConfig, theta: NodeId, x: &[f64]) -> Result<NodeId> {
    if x.len() != config.input_dim {
        return Err(Error::Dimension(format!(
            "feature vector has length {}, encoder expects {}",
            x.len(),
            config.input_dim
        )));
    }
    let graph = config.bind(tape, theta)?;
    let row = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let out = graph.embed_f(tape, row)?;
    tape.reshape(out, &[config.embed_dim])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat learner parameter vector with the manifest that gives it structure.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams {
    flat: Vec<f64>,
    manifest: Vec<ParamEntry>,
}

impl LearnerParams {
    pub fn new(flat: Vec<f64>, manifest: Vec<ParamEntry>) -> Result<Self> {
        let mut offset = 0;
        for entry in &manifest {
            if entry.offset != offset {
                return Err(Error::Dimension(format!(
                    "manifest entry {} starts at {}, expected {offset}",
                    entry.name, entry.offset
                )));
            }
            offset += entry.len();
        }
        if offset != flat.len() {
            return Err(Error::Dimension(format!(
                "manifest covers {offset} values, flat vector has {}",
                flat.len()
            )));
        }
        Ok(Self { flat, manifest })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            flat: vec![0.0; config.param_count()],
            manifest: config.manifest(),
        }
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn manifest(&self) -> &[ParamEntry] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.manifest
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.flat[e.offset..e.offset + e.len()])
    }

    /// Same manifest, different values.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        Self::new(flat, self.manifest.clone())
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.manifest
            .iter()
            .map(|e| {
                let data = self.flat[e.offset..e.offset + e.len()].to_vec();
                (e.name.clone(), Tensor::new(e.shape.clone(), data).expect("manifest shape"))
            })
            .collect()
    }

    pub fn flatten(named: Vec<(String, Tensor)>) -> Self {
        let mut flat = Vec::new();
        let mut manifest = Vec::with_capacity(named.len());
        for (name, tensor) in named {
            manifest.push(ParamEntry {
                name,
                shape: tensor.shape().to_vec(),
                offset: flat.len(),
            });
            flat.extend_from_slice(tensor.data());
        }
        Self { flat, manifest }
    }
}

/// Glorot-uniform weights and zero biases, deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<LearnerParams> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let manifest = config.manifest();
    let mut flat = Vec::with_capacity(config.param_count());
    for entry in &manifest {
        if entry.shape.len() == 2 {
            let limit = (6.0 / (entry.shape[0] + entry.shape[1]) as f64).sqrt();
            flat.extend((0..entry.len()).map(|_| rng.random_range(-limit..=limit)));
        } else {
            flat.extend(std::iter::repeat_n(0.0, entry.len()));
        }
    }
    LearnerParams::new(flat, manifest)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn param_count_matches_manifest_arithmetic() {
        let cfg = EncoderConfig::new(4, vec![8], 3, Activation::Relu);
        assert_eq!(cfg.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(init_params(&cfg, 1).unwrap().len(), 67);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = EncoderConfig::new(4, vec![8], 3, Activation::Relu);
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 43).unwrap());
        for entry in a.manifest().iter().filter(|e| e.name.ends_with("bias")) {
            assert!(a.get(&entry.name).unwrap().iter().all(|&v| v == 0.0));
        }
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.get("f.0.weight").unwrap().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_params_relu_embed_zero() {
        let cfg = EncoderConfig::new(3, vec![5, 4], 2, Activation::Relu);
        let params = LearnerParams::zeros(&cfg);
        let mut tape = Tape::new();
        let theta = tape.input(params.flat().to_vec());
        let e = embed(&mut tape, &cfg, theta, &[1.0, -4.0, 2.5]).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_weight_tanh_embed() {
        let cfg = EncoderConfig::new(3, vec![], 3, Activation::Tanh);
        let mut params = LearnerParams::zeros(&cfg);
        for i in 0..3 {
            params.flat_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let theta = tape.input(params.flat().to_vec());
        let x = [0.3, -1.2, 2.0];
        let e = embed(&mut tape, &cfg, theta, &x).unwrap();
        for (got, want) in tape.value(e).data().iter().zip(x) {
            assert!((got - want.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_rejects_wrong_length() {
        let cfg = EncoderConfig::new(3, vec![], 3, Activation::Tanh);
        let mut tape = Tape::new();
        let theta = tape.input(vec![0.0; cfg.param_count()]);
        assert!(matches!(embed(&mut tape, &cfg, theta, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn unshared_branches_have_separate_parameters() {
        let mut cfg = EncoderConfig::new(2, vec![3], 2, Activation::Tanh);
        cfg.share_f_g = false;
        assert_eq!(cfg.param_count(), 2 * (2 * 3 + 3 + 3 * 2 + 2));
        let params = init_params(&cfg, 5).unwrap();
        assert!(params.get("g.0.weight").is_some());
        let mut tape = Tape::new();
        let theta = tape.input(params.flat().to_vec());
        let graph = cfg.bind(&mut tape, theta).unwrap();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let f = graph.embed_f(&mut tape, x).unwrap();
        let g = graph.embed_g(&mut tape, x).unwrap();
        assert_ne!(tape.value(f), tape.value(g));
    }

    #[test]
    fn shared_branches_move_together() {
        let cfg = EncoderConfig::new(2, vec![3], 2, Activation::Tanh);
        let mut params = init_params(&cfg, 9).unwrap();
        params.flat_mut()[1] += 0.25;
        let mut tape = Tape::new();
        let theta = tape.input(params.flat().to_vec());
        let graph = cfg.bind(&mut tape, theta).unwrap();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let f = graph.embed_f(&mut tape, x).unwrap();
        let g = graph.embed_g(&mut tape, x).unwrap();
        assert_eq!(tape.value(f), tape.value(g));
    }

    proptest! {
        #[test]
        fn param_count_formula_holds(
            input in 1usize..12,
            hidden in proptest::collection::vec(1usize..10, 0..4),
            embed_dim in 1usize..10,
            share in any::<bool>(),
        ) {
            let mut cfg = EncoderConfig::new(input, hidden.clone(), embed_dim, Activation::Relu);
            cfg.share_f_g = share;
            let mut dims = vec![input];
            dims.extend(&hidden);
            dims.push(embed_dim);
            let one: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            let expected = if share { one } else { 2 * one };
            prop_assert_eq!(cfg.param_count(), expected);
            let manifest_total: usize = cfg.manifest().iter().map(ParamEntry::len).sum();
            prop_assert_eq!(manifest_total, expected);
        }

        #[test]
        fn flatten_unflatten_round_trip(seed in any::<u64>(), share in any::<bool>()) {
            let mut cfg = EncoderConfig::new(3, vec![4], 2, Activation::Tanh);
            cfg.share_f_g = share;
            let params = init_params(&cfg, seed).unwrap();
            prop_assert_eq!(LearnerParams::flatten(params.unflatten()), params);
        }

        #[test]
        fn embed_length_is_embed_dim(x in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let cfg = EncoderConfig::new(3, vec![4, 2], 5, Activation::Relu);
            let params = init_params(&cfg, 1).unwrap();
            let mut tape = Tape::new();
            let theta = tape.input(params.flat().to_vec());
            let e = embed(&mut tape, &cfg, theta, &x).unwrap();
            prop_assert_eq!(tape.value(e).len(), 5);
        }
    }
}
