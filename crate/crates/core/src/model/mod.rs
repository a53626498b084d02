//! The CRAT-Pred network: shared LSTM encoder, crystal graph convolution
//! over a fully connected vehicle graph, multi-head self-attention and `k`
//! parallel linear-residual decoders.
//!
//! Linear maps are stored as `in x out` and applied as `x W + b`. The LSTM
//! therefore keeps `W_ih` as `3 x 4H` and `W_hh` as `H x 4H`, gate blocks in
//! the order input, forget, cell, output.

mod baseline;
mod forward;

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scene::{Point, RigidTransform, INPUT_DIM};
use crate::tensor::{Array2, ParamMap};

pub use baseline::ConstantVelocity;
pub use forward::{
    build_graph, cgconv_layer, decode, encode_actors, forward, self_attention, BoundParams, Edges,
    ForwardOutput, NormMode,
};

/// Where batch normalization + ReLU sit in the graph network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GnnNorm {
    /// After every CGConv layer, including the last.
    AfterEachLayer,
    /// Only between consecutive layers.
    BetweenLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub history_steps: usize,
    pub future_steps: usize,
    pub hidden: usize,
    pub gnn_layers: usize,
    pub heads: usize,
    /// Number of parallel decoders `k`.
    pub modes: usize,
    pub use_attention: bool,
    pub gnn_norm: GnnNorm,
    pub decoder_groups: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    /// Fold the unbiased batch variance into the running variance.
    /// Off by default so evaluation reproduces training on a fixed full batch.
    pub bn_unbiased_running_var: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_steps: 20,
            future_steps: 30,
            hidden: 128,
            gnn_layers: 2,
            heads: 4,
            modes: 6,
            use_attention: true,
            gnn_norm: GnnNorm::AfterEachLayer,
            decoder_groups: 32,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
            bn_unbiased_running_var: false,
        }
    }
}

impl ModelConfig {
    /// Default layout at a smaller width; decoder groups keep four channels each.
    pub fn with_hidden(hidden: usize) -> Self {
        Self {
            hidden,
            decoder_groups: (hidden / 4).max(1),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn output_dim(&self) -> usize {
        2 * self.future_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.history_steps < 2 || self.future_steps == 0 {
            return fail(format!(
                "history_steps must be >= 2 and future_steps >= 1 (got {} / {})",
                self.history_steps, self.future_steps
            ));
        }
        if self.hidden == 0 || self.gnn_layers == 0 || self.modes == 0 {
            return fail("hidden, gnn_layers and modes must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} is not divisible into {} heads",
                self.hidden, self.heads
            ));
        }
        if self.decoder_groups == 0 || !self.hidden.is_multiple_of(self.decoder_groups) {
            return fail(format!(
                "hidden {} is not divisible into {} groups",
                self.hidden, self.decoder_groups
            ));
        }
        if self.norm_eps.is_nan()
            || self.norm_eps <= 0.0
            || !(0.0..=1.0).contains(&self.bn_momentum)
        {
            return fail("norm_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Whether GNN layer `layer` is followed by batch normalization and ReLU.
    pub fn gnn_layer_normalized(&self, layer: usize) -> bool {
        match self.gnn_norm {
            GnnNorm::AfterEachLayer => true,
            GnnNorm::BetweenLayers => layer + 1 < self.gnn_layers,
        }
    }

    /// Every learnable array in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.hidden;
        let mut specs = Vec::new();
        let linear =
            |specs: &mut Vec<ParamSpec>, w: String, b: String, fan_in: usize, out: usize| {
                specs.push(ParamSpec::new(
                    w,
                    fan_in,
                    out,
                    Init::Uniform(1.0 / (fan_in as f64).sqrt()),
                ));
                specs.push(ParamSpec::new(b, 1, out, Init::Zeros));
            };
        specs.push(ParamSpec::new(
            "encoder/w_ih",
            INPUT_DIM,
            4 * h,
            Init::Uniform(1.0 / (INPUT_DIM as f64).sqrt()),
        ));
        specs.push(ParamSpec::new(
            "encoder/w_hh",
            h,
            4 * h,
            Init::Uniform(1.0 / (h as f64).sqrt()),
        ));
        specs.push(ParamSpec::new("encoder/b_ih", 1, 4 * h, Init::Zeros));
        specs.push(ParamSpec::new("encoder/b_hh", 1, 4 * h, Init::Zeros));
        for l in 0..self.gnn_layers {
            let z = 2 * h + 2;
            linear(
                &mut specs,
                format!("gnn{l}/w_f"),
                format!("gnn{l}/b_f"),
                z,
                h,
            );
            linear(
                &mut specs,
                format!("gnn{l}/w_s"),
                format!("gnn{l}/b_s"),
                z,
                h,
            );
            if self.gnn_layer_normalized(l) {
                specs.push(ParamSpec::new(format!("gnn{l}/bn_gamma"), 1, h, Init::Ones));
                specs.push(ParamSpec::new(format!("gnn{l}/bn_beta"), 1, h, Init::Zeros));
            }
        }
        if self.use_attention {
            for p in ["q", "k", "v", "o"] {
                linear(
                    &mut specs,
                    format!("attention/w_{p}"),
                    format!("attention/b_{p}"),
                    h,
                    h,
                );
            }
        }
        for m in 0..self.modes {
            specs.extend(self.decoder_specs(m));
        }
        specs
    }

    pub fn decoder_specs(&self, mode: usize) -> Vec<ParamSpec> {
        let h = self.hidden;
        let u = Init::Uniform(1.0 / (h as f64).sqrt());
        let p = |s: &str| format!("{}{s}", decoder_prefix(mode));
        vec![
            ParamSpec::new(p("w_r2"), h, h, u),
            ParamSpec::new(p("b_r2"), 1, h, Init::Zeros),
            ParamSpec::new(p("gn2_gamma"), 1, h, Init::Ones),
            ParamSpec::new(p("gn2_beta"), 1, h, Init::Zeros),
            ParamSpec::new(p("w_r1"), h, h, u),
            ParamSpec::new(p("b_r1"), 1, h, Init::Zeros),
            ParamSpec::new(p("gn1_gamma"), 1, h, Init::Ones),
            ParamSpec::new(p("gn1_beta"), 1, h, Init::Zeros),
            ParamSpec::new(p("w_dec"), h, self.output_dim(), u),
            ParamSpec::new(p("b_dec"), 1, self.output_dim(), Init::Zeros),
        ]
    }

    /// Running statistics of the GNN batch normalizations.
    pub fn buffer_specs(&self) -> Vec<ParamSpec> {
        (0..self.gnn_layers)
            .filter(|&l| self.gnn_layer_normalized(l))
            .flat_map(|l| {
                [
                    ParamSpec::new(
                        format!("gnn{l}/bn_running_mean"),
                        1,
                        self.hidden,
                        Init::Zeros,
                    ),
                    ParamSpec::new(format!("gnn{l}/bn_running_var"), 1, self.hidden, Init::Ones),
                ]
            })
            .collect()
    }

    /// Learnable scalars of this architecture.
    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::len).sum()
    }
}

pub fn decoder_prefix(mode: usize) -> String {
    format!("decoder{mode}/")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("decoder")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn materialize(&self, rng: &mut ChaCha8Rng) -> Array2 {
        match self.init {
            Init::Zeros => Array2::zeros(self.rows, self.cols),
            Init::Ones => Array2::filled(self.rows, self.cols, 1.0),
            Init::Uniform(b) => {
                let data = (0..self.len()).map(|_| rng.gen_range(-b..=b)).collect();
                Array2::from_vec(self.rows, self.cols, data).expect("sized")
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    format: String,
    config: ModelConfig,
    #[serde(default)]
    trained_epochs: usize,
}

const DESCRIPTOR_FORMAT: &str = "crat-pred-model";

/// Learnable arrays plus normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub buffers: ParamMap,
    /// Optimizer epochs completed across both stages; zero for a fresh init.
    pub trained_epochs: usize,
}

impl ModelParams {
    /// Seeded initialization: uniform fan-in weights, zero biases, unit norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .iter()
            .map(|s| (s.name.clone(), s.materialize(&mut rng)))
            .collect();
        let buffers = config
            .buffer_specs()
            .iter()
            .map(|s| (s.name.clone(), s.materialize(&mut rng)))
            .collect();
        Ok(Self {
            config,
            params,
            buffers,
            trained_epochs: 0,
        })
    }

    pub fn param(&self, name: &str) -> &Array2 {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"))
    }

    /// Learnable scalars, optionally leaving out the attention block.
    pub fn count_parameters(&self, include_attention: bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| include_attention || !n.starts_with("attention/"))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// The same network restricted to decoders `0..k`.
    pub fn with_modes(&self, k: usize) -> Self {
        let k = k.clamp(1, self.config.modes);
        let config = ModelConfig {
            modes: k,
            ..self.config.clone()
        };
        let params = self
            .params
            .iter()
            .filter(|(n, _)| {
                !is_decoder_param(n) || (0..k).any(|m| n.starts_with(&decoder_prefix(m)))
            })
            .map(|(n, a)| (n.clone(), a.clone()))
            .collect();
        Self {
            config,
            params,
            buffers: self.buffers.clone(),
            trained_epochs: self.trained_epochs,
        }
    }

    pub fn decoder_names(&self, mode: usize) -> Vec<String> {
        self.config
            .decoder_specs(mode)
            .into_iter()
            .map(|s| s.name)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let metadata = serde_json::to_string(&Descriptor {
            format: DESCRIPTOR_FORMAT.into(),
            config: self.config.clone(),
            trained_epochs: self.trained_epochs,
        })
        .expect("config serializes");
        let arrays = self
            .params
            .iter()
            .map(|(n, a)| (format!("param/{n}"), a.clone()))
            .chain(
                self.buffers
                    .iter()
                    .map(|(n, a)| (format!("buffer/{n}"), a.clone())),
            )
            .collect();
        Checkpoint { metadata, arrays }
    }

    /// Rebuilds a model, checking every array against the embedded descriptor.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let desc: Descriptor = serde_json::from_str(&ck.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad model descriptor: {e}")))?;
        if desc.format != DESCRIPTOR_FORMAT {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds `{}`, not a model",
                desc.format
            )));
        }
        desc.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
        let mut params = ParamMap::new();
        let mut buffers = ParamMap::new();
        for (name, arr) in &ck.arrays {
            let (map, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("buffer/") {
                (&mut buffers, k)
            } else {
                return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
            };
            map.insert(key.to_string(), arr.clone());
        }
        check_against(&params, &desc.config.param_specs(), "parameter")?;
        check_against(&buffers, &desc.config.buffer_specs(), "buffer")?;
        Ok(Self {
            config: desc.config,
            params,
            buffers,
            trained_epochs: desc.trained_epochs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads and insists on a specific architecture.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if &m.config != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                m.config, expected
            )));
        }
        Ok(m)
    }
}

fn check_against(map: &ParamMap, specs: &[ParamSpec], what: &str) -> Result<()> {
    for s in specs {
        match map.get(&s.name) {
            None => return Err(Error::Checkpoint(format!("missing {what} `{}`", s.name))),
            Some(a) if a.shape() != (s.rows, s.cols) => {
                return Err(Error::Checkpoint(format!(
                    "{what} `{}` is {:?}, architecture needs {:?}",
                    s.name,
                    a.shape(),
                    (s.rows, s.cols)
                )))
            }
            Some(_) => {}
        }
    }
    if map.len() != specs.len() {
        let extra = map
            .keys()
            .find(|k| !specs.iter().any(|s| &s.name == *k))
            .expect("count differs");
        return Err(Error::Checkpoint(format!("unexpected {what} `{extra}`")));
    }
    Ok(())
}

/// Per-head attention weights of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// One row-stochastic `N x N` matrix per head.
    pub heads: Vec<Array2>,
    /// Arithmetic mean over heads.
    pub mean: Array2,
}

impl AttentionRecord {
    pub fn from_heads(heads: Vec<Array2>) -> Self {
        let (r, c) = heads.first().map_or((0, 0), Array2::shape);
        let mut mean = Array2::zeros(r, c);
        for h in &heads {
            mean.add_assign(h);
        }
        mean.scale_in_place(1.0 / heads.len().max(1) as f64);
        Self { heads, mean }
    }
}

/// `k` predicted target trajectories; index 0 is the most probable mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// Each `T_f x 2`, in the frame of `transform`'s local side.
    pub modes: Vec<Array2>,
    /// Target-local to raw mapping of the source scene.
    pub transform: RigidTransform,
}

impl PredictionSet {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// First `k` modes only.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            modes: self.modes.iter().take(k).cloned().collect(),
            transform: self.transform,
        }
    }

    /// The same trajectories in raw coordinates.
    pub fn to_raw(&self) -> Vec<Vec<Point>> {
        self.modes
            .iter()
            .map(|m| {
                (0..m.rows())
                    .map(|r| self.transform.to_raw(Point::new(m.get(r, 0), m.get(r, 1))))
                    .collect()
            })
            .collect()
    }
}

/// Anything that maps prepared scenes to target predictions.
pub trait Predictor {
    fn num_modes(&self) -> usize;
    fn predict(&self, scenes: &[crate::scene::PreparedScene]) -> Result<Vec<PredictionSet>>;
}
