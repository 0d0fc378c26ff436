//! Learnable tensors, their layout, initialization and accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PositionMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter indices for one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerIds {
    /// Per head: (wq, wk, wv).
    pub heads: Vec<(usize, usize, usize)>,
    pub wo: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln1_gain: usize,
    pub ln1_shift: usize,
    pub ln2_gain: usize,
    pub ln2_shift: usize,
}

/// Indices of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    /// Input embedding: v1, b1, w2, b2.
    pub iem: [usize; 4],
    /// Relative-position embedding: w1, b1, w2, b2.
    pub srpe: [usize; 4],
    pub layers: Vec<LayerIds>,
    /// Prediction head: w1, b1, w2, b2.
    pub pm: [usize; 4],
    /// Absolute-position embedding (present only in `sape` mode): w1, b1, w2, b2.
    pub ape: Option<[usize; 4]>,
}

/// All learnable tensors of the model, flat-indexed for the optimizer and
/// checkpointing, with a layout for structured access.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Seeded initialization: uniform Glorot for weight matrices, zeros for
    /// biases, ones/zeros for layer-norm gain/shift.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new();
        let d = config.d_embed;
        let dk = config.d_head;
        let df = config.d_ffn;

        let iem = [
            b.weight(&mut rng, "iem.v1", 1, d),
            b.bias("iem.b1", d),
            b.weight(&mut rng, "iem.w2", d, d),
            b.bias("iem.b2", d),
        ];
        let srpe = [
            b.weight(&mut rng, "srpe.w1", 2, d),
            b.bias("srpe.b1", d),
            b.weight(&mut rng, "srpe.w2", d, d),
            b.bias("srpe.b2", d),
        ];
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                heads.push((
                    b.weight(&mut rng, &format!("layer{l}.head{h}.wq"), d, dk),
                    b.weight(&mut rng, &format!("layer{l}.head{h}.wk"), d, dk),
                    b.weight(&mut rng, &format!("layer{l}.head{h}.wv"), d, dk),
                ));
            }
            layers.push(LayerIds {
                heads,
                wo: b.weight(&mut rng, &format!("layer{l}.wo"), config.heads * dk, d),
                ffn_w1: b.weight(&mut rng, &format!("layer{l}.ffn.w1"), d, df),
                ffn_b1: b.bias(&format!("layer{l}.ffn.b1"), df),
                ffn_w2: b.weight(&mut rng, &format!("layer{l}.ffn.w2"), df, d),
                ffn_b2: b.bias(&format!("layer{l}.ffn.b2"), d),
                ln1_gain: b.gain(&format!("layer{l}.ln1.gain"), d),
                ln1_shift: b.bias(&format!("layer{l}.ln1.shift"), d),
                ln2_gain: b.gain(&format!("layer{l}.ln2.gain"), d),
                ln2_shift: b.bias(&format!("layer{l}.ln2.shift"), d),
            });
        }
        let pm = [
            b.weight(&mut rng, "pm.w1", d, d),
            b.bias("pm.b1", d),
            b.weight(&mut rng, "pm.w2", d, 1),
            b.bias("pm.b2", 1),
        ];
        let ape = match config.position {
            PositionMode::Sape => Some([
                b.weight(&mut rng, "ape.w1", 2, d),
                b.bias("ape.b1", d),
                b.weight(&mut rng, "ape.w2", d, d),
                b.bias("ape.b2", d),
            ]),
            PositionMode::Srpe => None,
        };

        Ok(ModelParams {
            config: *config,
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                iem,
                srpe,
                layers,
                pm,
                ape,
            },
        })
    }

    /// Rebuild from named tensors (checkpoint load). Shapes are validated
    /// against the layout the config implies.
    pub fn from_named_tensors(
        config: &ModelConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<ModelParams> {
        let reference = ModelParams::init(config, 0)?;
        if named.len() != reference.tensors.len() {
            return Err(Error::shape(
                "load_params",
                format!(
                    "checkpoint has {} tensors, config wants {}",
                    named.len(),
                    reference.tensors.len()
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, tensor), (ref_name, ref_tensor)) in
            named.into_iter().zip(reference.names.iter().zip(&reference.tensors))
        {
            if &name != ref_name {
                return Err(Error::shape(
                    "load_params",
                    format!("expected tensor `{ref_name}`, found `{name}`"),
                ));
            }
            if tensor.shape() != ref_tensor.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!(
                        "tensor `{name}`: shape {:?} vs expected {:?}",
                        tensor.shape(),
                        ref_tensor.shape()
                    ),
                ));
            }
            tensors.push(tensor);
        }
        Ok(ModelParams {
            config: *config,
            names: reference.names,
            tensors,
            layout: reference.layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Parameter count per architectural group, for the model card.
    pub fn count_itemized(&self) -> Vec<(String, usize)> {
        let numel = |ids: &[usize]| -> usize { ids.iter().map(|&i| self.tensors[i].numel()).sum() };
        let mut items = vec![
            ("input embedding (2-layer FCN)".to_string(), numel(&self.layout.iem)),
            (
                "relative-position embedding (2-layer FCN)".to_string(),
                numel(&self.layout.srpe),
            ),
        ];
        for (l, ids) in self.layout.layers.iter().enumerate() {
            let mut qkv = 0;
            for &(q, k, v) in &ids.heads {
                qkv += numel(&[q, k, v]);
            }
            items.push((format!("layer {l}: Q/K/V projections"), qkv));
            items.push((format!("layer {l}: output projection"), numel(&[ids.wo])));
            items.push((
                format!("layer {l}: feed-forward"),
                numel(&[ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2]),
            ));
            items.push((
                format!("layer {l}: layer norms"),
                numel(&[ids.ln1_gain, ids.ln1_shift, ids.ln2_gain, ids.ln2_shift]),
            ));
        }
        items.push(("prediction head (2-layer FCN)".to_string(), numel(&self.layout.pm)));
        if let Some(ape) = &self.layout.ape {
            items.push(("absolute-position embedding".to_string(), numel(ape)));
        }
        items
    }
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn weight(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.push(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    fn bias(&mut self, name: &str, n: usize) -> usize {
        self.push(name, Tensor::vector(vec![0.0; n]))
    }

    fn gain(&mut self, name: &str, n: usize) -> usize {
        self.push(name, Tensor::vector(vec![1.0; n]))
    }
}
