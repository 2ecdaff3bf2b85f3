//! JSON checkpoints: named layers, per-parameter Adam moments, random
//! stream positions and the iteration counter.
//!
//! Floats are written in shortest round-trip form, so every value reads back
//! bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Parameters, Variant};
use crate::tensor::{AdamConfig, AdamState, NamedRng, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Gan,
    Pgan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParamRecord {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub network: String,
    pub config: AdamConfig,
    pub t: u64,
    pub params: Vec<AdamParamRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub variant: Option<Variant>,
    pub iteration: u64,
    pub critic_steps: u64,
    pub config: serde_json::Value,
    pub layers: Vec<LayerRecord>,
    pub adam_state: Vec<AdamRecord>,
    /// Word positions of each named stream, as decimal strings.
    pub rng_stream_positions: BTreeMap<String, String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

pub fn layer_records<P: Parameters + ?Sized>(net: &P) -> Vec<LayerRecord> {
    net.named_params()
        .into_iter()
        .map(|(name, t)| LayerRecord {
            name,
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect()
}

pub fn adam_record<P: Parameters + ?Sized>(network: &str, net: &P, state: &AdamState) -> AdamRecord {
    AdamRecord {
        network: network.to_string(),
        config: state.config,
        t: state.t,
        params: net
            .named_params()
            .into_iter()
            .zip(state.m.iter().zip(&state.v))
            .map(|((name, _), (m, v))| AdamParamRecord {
                name,
                m: m.data().to_vec(),
                v: v.data().to_vec(),
            })
            .collect(),
    }
}

pub fn rng_positions<'a>(rngs: impl IntoIterator<Item = &'a NamedRng>) -> BTreeMap<String, String> {
    rngs.into_iter()
        .map(|r| (r.name().to_string(), r.position().to_string()))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    fn layer(&self, name: &str) -> Result<&LayerRecord> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing layer {name:?}")))
    }

    /// Overwrites every parameter of `net` with the layer of the same name.
    pub fn load_params<P: Parameters + ?Sized>(&self, net: &mut P) -> Result<()> {
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, param) in names.iter().zip(net.params_mut()) {
            let rec = self.layer(name)?;
            if rec.shape != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {name:?} has shape {:?}, network expects {:?}",
                    rec.shape,
                    param.shape()
                )));
            }
            *param = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the Adam state recorded for `network`, in `net`'s order.
    pub fn load_adam<P: Parameters + ?Sized>(&self, network: &str, net: &P) -> Result<AdamState> {
        let rec = self
            .adam_state
            .iter()
            .find(|a| a.network == network)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {network:?}")))?;
        let mut state = AdamState::new(rec.config, net.named_params().into_iter().map(|(_, t)| t));
        state.t = rec.t;
        for (i, (name, t)) in net.named_params().into_iter().enumerate() {
            let p = rec
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moments for {name:?}")))?;
            if p.m.len() != t.numel() || p.v.len() != t.numel() {
                return Err(Error::Checkpoint(format!("optimizer moments for {name:?} have the wrong length")));
            }
            state.m[i] = Tensor::new(t.shape().to_vec(), p.m.clone())?;
            state.v[i] = Tensor::new(t.shape().to_vec(), p.v.clone())?;
        }
        Ok(state)
    }

    pub fn restore_rng(&self, rng: &mut NamedRng) -> Result<()> {
        let pos = self
            .rng_stream_positions
            .get(rng.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing stream position for {:?}", rng.name())))?;
        let pos: u128 = pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad stream position {pos:?}")))?;
        rng.seek(pos);
        Ok(())
    }
}
