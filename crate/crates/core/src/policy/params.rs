use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::routegraph::{NODE_FEATURES, ZONE_LABEL_BUCKETS};

/// Width of the learned zone-label embedding.
pub const ZONE_EMBED_DIM: usize = 16;
pub const GAT_LAYERS: usize = 3;
pub const INPUT_DIM: usize = NODE_FEATURES + ZONE_EMBED_DIM;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::domain("hidden_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::domain(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

// Slot indices into `ModelParams::tensors`, in serialisation order.
pub const ZONE_EMBED: usize = 0;
const GAT_BASE: usize = 1;
const GAT_STRIDE: usize = 6;
pub const GAT_W_SRC: usize = 0;
pub const GAT_W_DST: usize = 1;
pub const GAT_W_EDGE: usize = 2;
pub const GAT_ATT: usize = 3;
pub const GAT_LN_GAIN: usize = 4;
pub const GAT_LN_BIAS: usize = 5;
const GRU_BASE: usize = GAT_BASE + GAT_LAYERS * GAT_STRIDE;
pub const W_Z: usize = GRU_BASE;
pub const U_Z: usize = GRU_BASE + 1;
pub const B_Z: usize = GRU_BASE + 2;
pub const W_R: usize = GRU_BASE + 3;
pub const U_R: usize = GRU_BASE + 4;
pub const B_R: usize = GRU_BASE + 5;
pub const W_H: usize = GRU_BASE + 6;
pub const U_H: usize = GRU_BASE + 7;
pub const B_H: usize = GRU_BASE + 8;
const PTR_BASE: usize = GRU_BASE + 9;
pub const FC1_Q_W: usize = PTR_BASE;
pub const FC1_Q_B: usize = PTR_BASE + 1;
pub const FC2_Q_W: usize = PTR_BASE + 2;
pub const FC2_Q_B: usize = PTR_BASE + 3;
pub const FC1_K_W: usize = PTR_BASE + 4;
pub const FC1_K_B: usize = PTR_BASE + 5;
pub const FC2_K_W: usize = PTR_BASE + 6;
pub const FC2_K_B: usize = PTR_BASE + 7;
pub const LN_Q_GAIN: usize = PTR_BASE + 8;
pub const LN_Q_BIAS: usize = PTR_BASE + 9;
pub const LN_K_GAIN: usize = PTR_BASE + 10;
pub const LN_K_BIAS: usize = PTR_BASE + 11;
pub const SCORE_V: usize = PTR_BASE + 12;
pub const W_INIT: usize = PTR_BASE + 13;
pub const PARAM_COUNT: usize = W_INIT + 1;

pub fn gat_slot(layer: usize, which: usize) -> usize {
    GAT_BASE + layer * GAT_STRIDE + which
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier,
    /// Uniform in ±1.
    Unit,
    Zeros,
    Ones,
}

/// Name, shape and initialiser of every parameter, in serialisation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.hidden_dim;
    let mut v = vec![("zone_embed".to_string(), ZONE_LABEL_BUCKETS, ZONE_EMBED_DIM, Init::Unit)];
    for l in 0..GAT_LAYERS {
        let d_in = if l == 0 { INPUT_DIM } else { d };
        let p = format!("gat{}", l + 1);
        v.push((format!("{p}.w_src"), d_in, d, Init::Xavier));
        v.push((format!("{p}.w_dst"), d_in, d, Init::Xavier));
        v.push((format!("{p}.w_edge"), 1, d, Init::Xavier));
        v.push((format!("{p}.att"), d, 1, Init::Xavier));
        v.push((format!("{p}.ln_gain"), 1, d, Init::Ones));
        v.push((format!("{p}.ln_bias"), 1, d, Init::Zeros));
    }
    for gate in ["z", "r", "h"] {
        v.push((format!("gru.w_{gate}"), d, d, Init::Xavier));
        v.push((format!("gru.u_{gate}"), d, d, Init::Xavier));
        v.push((format!("gru.b_{gate}"), 1, d, Init::Zeros));
    }
    for branch in ["q", "k"] {
        v.push((format!("ptr.fc1_{branch}.w"), d, d, Init::Xavier));
        v.push((format!("ptr.fc1_{branch}.b"), 1, d, Init::Zeros));
        v.push((format!("ptr.fc2_{branch}.w"), d, d, Init::Xavier));
        v.push((format!("ptr.fc2_{branch}.b"), 1, d, Init::Zeros));
    }
    for branch in ["q", "k"] {
        v.push((format!("ptr.ln_{branch}.gain"), 1, d, Init::Ones));
        v.push((format!("ptr.ln_{branch}.bias"), 1, d, Init::Zeros));
    }
    v.push(("ptr.v".to_string(), d, 1, Init::Xavier));
    v.push(("w_init".to_string(), d, d, Init::Xavier));
    debug_assert_eq!(v.len(), PARAM_COUNT);
    v
}

/// Every learnable tensor of the encoder–decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(_, r, c, init)| {
                let data = match init {
                    Init::Xavier => {
                        let a = (6.0 / (r + c) as f64).sqrt();
                        (0..r * c).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Unit => (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    Init::Zeros => vec![0.0; r * c],
                    Init::Ones => vec![1.0; r * c],
                };
                Tensor::from_vec(r, c, data)
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        layout(&self.config).into_iter().map(|(n, ..)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound {
            vars,
            config: self.config,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = layout(&self.config)
            .into_iter()
            .zip(&self.tensors)
            .map(|((name, ..), t)| NamedTensor {
                name,
                shape: [t.rows(), t.cols()],
                values: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::domain(format!("unsupported checkpoint format {}", ck.format)));
        }
        ck.config.validate()?;
        let expected = layout(&ck.config);
        if expected.len() != ck.params.len() {
            return Err(Error::domain(format!(
                "checkpoint has {} tensors, expected {}",
                ck.params.len(),
                expected.len()
            )));
        }
        let tensors = expected
            .iter()
            .zip(&ck.params)
            .map(|((name, r, c, _), p)| {
                if &p.name != name || p.shape != [*r, *c] {
                    return Err(Error::domain(format!(
                        "checkpoint tensor {} {:?} does not match {name} [{r}, {c}]",
                        p.name, p.shape
                    )));
                }
                let t = Tensor::from_vec(*r, *c, p.values.clone())?;
                if !t.is_finite() {
                    return Err(Error::numeric(format!("checkpoint tensor {name} is not finite")));
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            config: ck.config,
            tensors,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::json("<checkpoint>", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json("<checkpoint>", e))?;
        Self::from_checkpoint(&ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_checkpoint(&ck)
    }
}

/// Parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub config: ModelConfig,
}

impl Bound {
    pub fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn gat(&self, layer: usize, which: usize) -> Var {
        self.vars[gat_slot(layer, which)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}
