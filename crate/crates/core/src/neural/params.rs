//! Named parameter tensors and the encoder architecture they describe.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        let index = names
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        ParamStore {
            names,
            tensors,
            index,
        }
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Encoder sizes. Categorical vocabularies are fixed by the input encoding
/// except flow and address indices, which are clamped to `index_clamp`
/// with everything larger sharing the last bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output embedding dimension.
    pub d: usize,
    /// Output channels of each convolution block on the traffic side.
    pub conv_widths: Vec<usize>,
    pub conv_kernel: usize,
    pub version_embed: usize,
    pub flow_embed: usize,
    pub index_clamp: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub http_embed: usize,
    pub mime_embed: usize,
    pub ip_embed: usize,
    /// Hidden width of both projection heads; `0` means `2 * d`.
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            conv_widths: vec![32, 64],
            conv_kernel: 5,
            version_embed: 4,
            flow_embed: 8,
            index_clamp: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
            http_embed: 4,
            mime_embed: 4,
            ip_embed: 8,
            head_hidden: 0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small model for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            conv_widths: vec![2],
            conv_kernel: 3,
            version_embed: 2,
            flow_embed: 2,
            index_clamp: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 8,
            http_embed: 2,
            mime_embed: 2,
            ip_embed: 2,
            head_hidden: 0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d < 8 {
            return bad("embedding dimension d must be at least 8");
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad("conv_widths must be non-empty and positive");
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.index_clamp == 0 || self.ffn_hidden == 0 || self.d_model == 0 {
            return bad("index_clamp, ffn_hidden and d_model must be positive");
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        if self.head_hidden == 0 {
            2 * self.d
        } else {
            self.head_hidden
        }
    }

    /// Width of one traffic row after embedding.
    pub fn traffic_in(&self) -> usize {
        1 + self.version_embed + self.flow_embed
    }

    /// Continuous logic columns: three sizes, header length, alt-svc flag.
    pub const LOGIC_CONT: usize = 5;

    pub fn logic_in(&self) -> usize {
        Self::LOGIC_CONT + self.http_embed + self.mime_embed + self.ip_embed
    }

    /// Names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let mut out: Vec<(String, [usize; 2])> = Vec::new();
        let mut add = |n: String, r: usize, c: usize| out.push((n, [r, c]));
        add("traffic.embed_version".into(), 4, self.version_embed);
        add(
            "traffic.embed_flow".into(),
            self.index_clamp + 1,
            self.flow_embed,
        );
        let mut c_in = self.traffic_in();
        for (i, &w) in self.conv_widths.iter().enumerate() {
            add(format!("traffic.conv{i}.w"), self.conv_kernel * c_in, w);
            add(format!("traffic.conv{i}.b"), 1, w);
            c_in = w;
        }
        let h = self.hidden();
        add("traffic.head0.w".into(), c_in, h);
        add("traffic.head0.b".into(), 1, h);
        add("traffic.head1.w".into(), h, self.d);
        add("traffic.head1.b".into(), 1, self.d);

        add("logic.embed_http".into(), 4, self.http_embed);
        add("logic.embed_mime".into(), 8, self.mime_embed);
        add("logic.embed_ip".into(), self.index_clamp + 1, self.ip_embed);
        add("logic.in.w".into(), self.logic_in(), self.d_model);
        add("logic.in.b".into(), 1, self.d_model);
        let dm = self.d_model;
        for l in 0..self.n_layers {
            add(format!("logic.layer{l}.ln1.g"), 1, dm);
            add(format!("logic.layer{l}.ln1.b"), 1, dm);
            add(format!("logic.layer{l}.qkv.w"), dm, 3 * dm);
            add(format!("logic.layer{l}.qkv.b"), 1, 3 * dm);
            add(format!("logic.layer{l}.out.w"), dm, dm);
            add(format!("logic.layer{l}.out.b"), 1, dm);
            add(format!("logic.layer{l}.ln2.g"), 1, dm);
            add(format!("logic.layer{l}.ln2.b"), 1, dm);
            add(format!("logic.layer{l}.ffn0.w"), dm, self.ffn_hidden);
            add(format!("logic.layer{l}.ffn0.b"), 1, self.ffn_hidden);
            add(format!("logic.layer{l}.ffn1.w"), self.ffn_hidden, dm);
            add(format!("logic.layer{l}.ffn1.b"), 1, dm);
        }
        add("logic.ln_f.g".into(), 1, dm);
        add("logic.ln_f.b".into(), 1, dm);
        add("logic.head0.w".into(), dm, h);
        add("logic.head0.b".into(), 1, h);
        add("logic.head1.w".into(), h, self.d);
        add("logic.head1.b".into(), 1, self.d);
        out
    }
}

/// Parameters of both encoders together with the configuration that shapes
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Seeded initialization: weight matrices ~ N(0, 1/fan_in), embeddings
    /// ~ N(0, 1), biases 0, layer-norm gains 1.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, [r, c]) in config.layout() {
            let mut t = Tensor::zeros(r, c);
            if name.ends_with(".g") {
                t.data.iter_mut().for_each(|x| *x = 1.0);
            } else if name.contains(".embed_") {
                t.data
                    .iter_mut()
                    .for_each(|x| *x = std_normal.sample(&mut rng));
            } else if name.ends_with(".w") {
                let s = 1.0 / (r as f64).sqrt();
                t.data
                    .iter_mut()
                    .for_each(|x| *x = s * std_normal.sample(&mut rng));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            store: ParamStore::new(names, tensors),
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in self.store.names.iter().zip(&self.store.tensors) {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {n} is not finite")));
            }
        }
        Ok(())
    }
}
