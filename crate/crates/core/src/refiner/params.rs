//! Flat parameter storage with a named block index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionWeights;
use super::config::{RefinerConfig, RADAR_FEATURES};
use super::tensor::Matrix;
use super::RefinerError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shape manifest written next to the raw parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub config: RefinerConfig,
    pub count: usize,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    pub blocks: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

fn mlp_shapes(prefix: &str, input: usize, widths: &[usize], out: &mut Vec<(String, usize, usize)>) {
    let mut fan_in = input;
    for (l, w) in widths.iter().enumerate() {
        out.push((format!("{prefix}.{l}.weight"), fan_in, *w));
        out.push((format!("{prefix}.{l}.bias"), 1, *w));
        fan_in = *w;
    }
}

/// Parameter blocks in storage order. `Weights::from_flat` and
/// `Weights::to_flat` walk the same order.
pub fn layout(config: &RefinerConfig) -> Vec<ParamBlock> {
    let (d, dk, h) = (config.feature_dim, config.attention_dim, config.head_hidden);
    let mut shapes = Vec::new();
    mlp_shapes("radar", RADAR_FEATURES, &config.radar_mlp_widths, &mut shapes);
    mlp_shapes("patch", config.token_dim(), &config.patch_encoder_widths, &mut shapes);
    shapes.push(("patch.position".into(), config.image_tokens(), d));
    for l in 0..config.num_attention_layers {
        for kind in ["self", "cross"] {
            for (m, r, c) in [("query", d, dk), ("key", d, dk), ("value", d, dk), ("output", dk, d)] {
                shapes.push((format!("attn.{l}.{kind}.{m}"), r, c));
            }
        }
    }
    for (head, outputs) in [("conf", 1), ("disp", 2)] {
        shapes.push((format!("head.{head}.hidden.weight"), d, h));
        shapes.push((format!("head.{head}.hidden.bias"), 1, h));
        shapes.push((format!("head.{head}.out.weight"), h, outputs));
        shapes.push((format!("head.{head}.out.bias"), 1, outputs));
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, r, c)| {
            let b = ParamBlock { name, shape: [r, c], offset };
            offset += r * c;
            b
        })
        .collect()
}

impl RefinerParams {
    /// Glorot-uniform weights, zero biases, small random position embeddings.
    pub fn init(config: &RefinerConfig) -> Result<Self, RefinerError> {
        config.validate()?;
        let blocks = layout(config);
        let total = blocks.last().map_or(0, |b| b.offset + b.len());
        let mut values = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for b in &blocks {
            let slot = &mut values[b.offset..b.offset + b.len()];
            if b.name.ends_with(".bias") {
                continue;
            }
            let limit = if b.name == "patch.position" {
                0.02
            } else {
                (6.0 / (b.shape[0] + b.shape[1]) as f64).sqrt()
            };
            for v in slot.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(Self { config: config.clone(), blocks, values })
    }

    pub fn zeros(config: &RefinerConfig) -> Result<Self, RefinerError> {
        config.validate()?;
        let blocks = layout(config);
        let total = blocks.last().map_or(0, |b| b.offset + b.len());
        Ok(Self { config: config.clone(), blocks, values: vec![0.0; total] })
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.block(name).map(|b| &self.values[b.offset..b.offset + b.len()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let b = self.block(name)?.clone();
        Some(&mut self.values[b.offset..b.offset + b.len()])
    }

    pub fn manifest(&self) -> ParamManifest {
        ParamManifest { config: self.config.clone(), count: self.values.len(), blocks: self.blocks.clone() }
    }

    /// Little-endian `f64` vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(manifest: &ParamManifest, bytes: &[u8]) -> Result<Self, RefinerError> {
        manifest.config.validate()?;
        let blocks = layout(&manifest.config);
        if blocks != manifest.blocks {
            return Err(RefinerError::Manifest("block layout does not match the configuration".into()));
        }
        if bytes.len() != manifest.count * 8 {
            return Err(RefinerError::Manifest(format!(
                "expected {} bytes of parameters, found {}",
                manifest.count * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RefinerError::NonFinite("stored parameters".into()));
        }
        Ok(Self { config: manifest.config.clone(), blocks, values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.weight);
        z.add_row_bias(&self.bias);
        z
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Matrix::zeros(self.weight.rows, self.weight.cols), bias: vec![0.0; self.bias.len()] }
    }
}

/// Structured view of the parameters (or of a gradient with the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub radar: Vec<Dense>,
    pub patch: Vec<Dense>,
    pub position: Matrix,
    /// `(self, cross)` per stacked layer.
    pub attention: Vec<(AttentionWeights, AttentionWeights)>,
    pub conf_hidden: Dense,
    pub conf_out: Dense,
    pub disp_hidden: Dense,
    pub disp_out: Dense,
}

struct Cursor<'a> {
    blocks: std::slice::Iter<'a, ParamBlock>,
    values: &'a [f64],
}

impl Cursor<'_> {
    fn matrix(&mut self) -> Matrix {
        let b = self.blocks.next().expect("layout exhausted");
        Matrix::from_vec(b.shape[0], b.shape[1], self.values[b.offset..b.offset + b.len()].to_vec())
    }

    fn dense(&mut self) -> Dense {
        let weight = self.matrix();
        let bias = self.matrix().data;
        Dense { weight, bias }
    }

    fn attention(&mut self) -> AttentionWeights {
        AttentionWeights { query: self.matrix(), key: self.matrix(), value: self.matrix(), output: self.matrix() }
    }
}

impl Weights {
    pub fn from_params(params: &RefinerParams) -> Self {
        let cfg = &params.config;
        let mut cur = Cursor { blocks: params.blocks.iter(), values: &params.values };
        let radar = (0..cfg.radar_mlp_widths.len()).map(|_| cur.dense()).collect();
        let patch = (0..cfg.patch_encoder_widths.len()).map(|_| cur.dense()).collect();
        let position = cur.matrix();
        let attention = (0..cfg.num_attention_layers).map(|_| (cur.attention(), cur.attention())).collect();
        Self {
            radar,
            patch,
            position,
            attention,
            conf_hidden: cur.dense(),
            conf_out: cur.dense(),
            disp_hidden: cur.dense(),
            disp_out: cur.dense(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let att = |a: &AttentionWeights| AttentionWeights {
            query: Matrix::zeros(a.query.rows, a.query.cols),
            key: Matrix::zeros(a.key.rows, a.key.cols),
            value: Matrix::zeros(a.value.rows, a.value.cols),
            output: Matrix::zeros(a.output.rows, a.output.cols),
        };
        Self {
            radar: self.radar.iter().map(Dense::zeros_like).collect(),
            patch: self.patch.iter().map(Dense::zeros_like).collect(),
            position: Matrix::zeros(self.position.rows, self.position.cols),
            attention: self.attention.iter().map(|(s, c)| (att(s), att(c))).collect(),
            conf_hidden: self.conf_hidden.zeros_like(),
            conf_out: self.conf_out.zeros_like(),
            disp_hidden: self.disp_hidden.zeros_like(),
            disp_out: self.disp_out.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let dense = |d: &Dense, out: &mut Vec<f64>| {
            out.extend_from_slice(&d.weight.data);
            out.extend_from_slice(&d.bias);
        };
        for d in self.radar.iter().chain(&self.patch) {
            dense(d, &mut out);
        }
        out.extend_from_slice(&self.position.data);
        for (s, c) in &self.attention {
            for a in [s, c] {
                for m in [&a.query, &a.key, &a.value, &a.output] {
                    out.extend_from_slice(&m.data);
                }
            }
        }
        for d in [&self.conf_hidden, &self.conf_out, &self.disp_hidden, &self.disp_out] {
            dense(d, &mut out);
        }
        out
    }
}
