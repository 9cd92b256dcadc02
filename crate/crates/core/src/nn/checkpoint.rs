//! Binary checkpoint: a 16-byte header, a text manifest describing the
//! layers and parameter shapes, then every parameter as little-endian `f32`
//! in manifest order.
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `SEMICKPT` |
//! | 8 | 4 | version (u32 LE, 1) |
//! | 12 | 4 | manifest length `m` (u32 LE) |
//! | 16 | m | UTF-8 lines: `input_side=`, `layer=`, `param=`, `meta.<key>=` |
//! | 16+m | 4 × params | parameter values, f32 LE |
//! | after | 16 × params | optional Adam moments `m` then `v`, f64 LE, when the manifest has `optimizer=adam <step>` |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::NnError;

use super::model::{Layer, Model, ModelSpec};
use super::optim::AdamState;

const MAGIC: &[u8; 8] = b"SEMICKPT";
const VERSION: u32 = 1;

/// Model parameters plus free-form `key=value` metadata (training progress,
/// run fingerprint) and, mid-stage, the optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            metadata: BTreeMap::new(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("input_side={}\n", self.model.input_side());
        for layer in self.model.spec().layer_manifest() {
            manifest.push_str(&format!("layer={layer}\n"));
        }
        for p in self.model.params() {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("param={} {} {}\n", p.name, p.component, dims.join(",")));
        }
        for (k, v) in &self.metadata {
            manifest.push_str(&format!("meta.{k}={v}\n"));
        }
        if let Some(state) = &self.optimizer {
            manifest.push_str(&format!("optimizer=adam {}\n", state.step));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for p in self.model.params() {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(state) = &self.optimizer {
            for v in state.m.iter().chain(&state.v).flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |offset: usize, reason: String| NnError::Checkpoint { offset, reason };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(bad(0, "bad magic bytes".into()));
        }
        if bytes.len() < 16 {
            return Err(bad(bytes.len(), "header is incomplete".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(8, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(12, "manifest length exceeds file size".into()))?;
        let manifest =
            std::str::from_utf8(&bytes[16..end]).map_err(|_| bad(16, "manifest is not UTF-8".into()))?;

        let mut input_side = None;
        let mut layers = Vec::new();
        let mut params: Vec<(String, String, Vec<usize>)> = Vec::new();
        let mut metadata = BTreeMap::new();
        let mut adam_step = None;
        let mut offset = 16;
        for line in manifest.split_inclusive('\n') {
            let here = offset;
            offset += line.len();
            let line = line.trim_end_matches('\n');
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(here, format!("manifest line `{line}` has no `=`")))?;
            match key {
                "input_side" => {
                    input_side = Some(value.parse::<usize>().map_err(|_| bad(here, "bad input side".into()))?)
                }
                "layer" => layers.push(Layer::parse(value).ok_or_else(|| bad(here, format!("unknown layer `{value}`")))?),
                "param" => {
                    let parts: Vec<&str> = value.split(' ').collect();
                    let [name, comp, dims] = parts[..] else {
                        return Err(bad(here, format!("bad parameter entry `{value}`")));
                    };
                    let dims = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(here, format!("bad shape `{dims}`")))?;
                    params.push((name.to_string(), comp.to_string(), dims));
                }
                "optimizer" => {
                    let step = value
                        .strip_prefix("adam ")
                        .and_then(|s| s.parse::<u64>().ok())
                        .ok_or_else(|| bad(here, format!("bad optimizer entry `{value}`")))?;
                    adam_step = Some(step);
                }
                k if k.starts_with("meta.") => {
                    metadata.insert(k["meta.".len()..].to_string(), value.to_string());
                }
                other => return Err(bad(here, format!("unknown manifest key `{other}`"))),
            }
        }
        let spec = ModelSpec {
            input_side: input_side.ok_or_else(|| bad(16, "manifest lacks input_side".into()))?,
            trunk: layers,
        };
        let mut model = Model::zeros(spec).map_err(|e| bad(16, e.to_string()))?;
        if model.params().len() != params.len() {
            return Err(bad(16, "parameter list does not match the layers".into()));
        }
        for (p, (name, comp, dims)) in model.params().iter().zip(&params) {
            if &p.name != name || p.component.name() != comp || &p.shape != dims {
                return Err(bad(16, format!("parameter `{name}` does not match the layers")));
            }
        }
        let total: usize = model.params().iter().map(|p| p.values.len()).sum();
        let expected = total * 4 + if adam_step.is_some() { total * 16 } else { 0 };
        if bytes.len() - end != expected {
            return Err(bad(
                end,
                format!("payload holds {} bytes, expected {expected}", bytes.len() - end),
            ));
        }
        let mut at = end;
        for p in model.params_mut() {
            for v in &mut p.values {
                *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                at += 4;
            }
        }
        let optimizer = adam_step.map(|step| {
            let mut state = AdamState::new(&model);
            state.step = step;
            for v in state.m.iter_mut().chain(state.v.iter_mut()).flatten() {
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                at += 8;
            }
            state
        });
        Ok(Self {
            model,
            metadata,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| NnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
