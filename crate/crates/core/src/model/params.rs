use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::diffmath::Tensor2D;
use crate::error::{LabError, Result};
use crate::seeds;

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    arrays: Vec<Tensor2D>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    arrays: serde_json::Map<String, serde_json::Value>,
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor2D {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor2D::randn(fan_in, fan_out, std, rng)
}

impl ModelParams {
    /// Random initialization keyed by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng_at(seed, &[seeds::stream::INIT]);
        let d = config.d_model;
        let ff = config.ffn_dim();
        let mut p = Self {
            config: config.clone(),
            names: Vec::new(),
            arrays: Vec::new(),
            index: BTreeMap::new(),
        };

        p.push("text.tok_emb", Tensor2D::randn(config.vocab_size, d, 0.5, &mut rng));
        p.push("text.pos", Tensor2D::randn(config.max_query_len, d, 0.5, &mut rng));
        for i in 0..config.text_layers {
            p.push_layer(&format!("text.layer{i}"), d, ff, &mut rng);
        }
        let patch_dim = config.patch * config.patch * 3;
        p.push("vis.stem_w", xavier(&mut rng, patch_dim, ff));
        p.push("vis.stem_b", Tensor2D::zeros(1, ff));
        p.push("vis.patch_w", xavier(&mut rng, ff, d));
        p.push("vis.patch_b", Tensor2D::zeros(1, d));
        p.push("vis.gate_w", xavier(&mut rng, ff, d));
        p.push("vis.gate_b", Tensor2D::zeros(1, d));
        for i in 0..config.enc_layers {
            p.push_layer(&format!("vis.layer{i}"), d, ff, &mut rng);
        }
        for i in 0..config.dec_layers {
            p.push_layer(&format!("dec.layer{i}"), d, ff, &mut rng);
        }
        p.push("head.ln_g", Tensor2D::filled(1, d, 1.0));
        p.push("head.ln_b", Tensor2D::zeros(1, d));
        p.push("head.w1", xavier(&mut rng, d, d));
        p.push("head.b1", Tensor2D::zeros(1, d));
        p.push("head.w2", xavier(&mut rng, d, d));
        p.push("head.b2", Tensor2D::zeros(1, d));
        p.push("head.w3", xavier(&mut rng, d, 4));
        p.push("head.b3", Tensor2D::zeros(1, 4));
        p.push("p_r", Tensor2D::randn(1, d, 0.5, &mut rng));
        Ok(p)
    }

    fn push(&mut self, name: &str, t: Tensor2D) {
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(t);
    }

    fn push_layer<R: Rng>(&mut self, prefix: &str, d: usize, ff: usize, rng: &mut R) {
        self.push(&format!("{prefix}.ln1_g"), Tensor2D::filled(1, d, 1.0));
        self.push(&format!("{prefix}.ln1_b"), Tensor2D::zeros(1, d));
        self.push(&format!("{prefix}.wqkv"), xavier(rng, d, 3 * d));
        // no key bias: softmax is invariant to it, so it would never receive a gradient
        self.push(&format!("{prefix}.bq"), Tensor2D::zeros(1, d));
        self.push(&format!("{prefix}.bv"), Tensor2D::zeros(1, d));
        self.push(&format!("{prefix}.wo"), xavier(rng, d, d));
        self.push(&format!("{prefix}.bo"), Tensor2D::zeros(1, d));
        self.push(&format!("{prefix}.ln2_g"), Tensor2D::filled(1, d, 1.0));
        self.push(&format!("{prefix}.ln2_b"), Tensor2D::zeros(1, d));
        self.push(&format!("{prefix}.w1"), xavier(rng, d, ff));
        self.push(&format!("{prefix}.b1"), Tensor2D::zeros(1, ff));
        self.push(&format!("{prefix}.w2"), xavier(rng, ff, d));
        self.push(&format!("{prefix}.b2"), Tensor2D::zeros(1, d));
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Tensor2D] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Tensor2D] {
        &mut self.arrays
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.index_of(name).map(move |i| &mut self.arrays[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Text and visual encoder arrays (the reduced-learning-rate group).
    pub fn is_encoder(name: &str) -> bool {
        name.starts_with("text.") || name.starts_with("vis.")
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.numel());
        for a in &self.arrays {
            v.extend_from_slice(a.data());
        }
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 8);
        for a in &self.arrays {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the raw little-endian blob.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }

    fn manifest(&self) -> Manifest {
        let mut arrays = serde_json::Map::new();
        for (n, a) in self.names.iter().zip(&self.arrays) {
            arrays.insert(n.clone(), serde_json::json!([a.rows(), a.cols()]));
        }
        Manifest {
            config: self.config.clone(),
            arrays,
        }
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (float64 LE blob).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(format!("{stem}.json")), manifest)?;
        fs::write(dir.join(format!("{stem}.bin")), self.blob())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let blob = fs::read(dir.join(format!("{stem}.bin")))?;
        let mut p = Self {
            config: manifest.config,
            names: Vec::new(),
            arrays: Vec::new(),
            index: BTreeMap::new(),
        };
        let mut off = 0;
        for (name, shape) in manifest.arrays {
            let shape: [usize; 2] = serde_json::from_value(shape)?;
            let n = shape[0] * shape[1];
            if blob.len() < (off + n) * 8 {
                return Err(LabError::Config(format!("checkpoint blob too short at {name}")));
            }
            let data = blob[off * 8..(off + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            p.push(&name, Tensor2D::from_vec(shape[0], shape[1], data)?);
            off += n;
        }
        if blob.len() != off * 8 {
            return Err(LabError::Config("checkpoint blob has trailing bytes".into()));
        }
        let fresh = Self::init(&p.config, 0)?;
        if fresh.names != p.names
            || fresh
                .arrays
                .iter()
                .zip(&p.arrays)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(LabError::Config(
                "checkpoint arrays do not match the model config".into(),
            ));
        }
        Ok(p)
    }
}
