//! On-disk checkpoints: raw float32 tensors plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TinyViTConfig;
use super::params::BaseParameters;
use super::tokens::LRTokenBank;
use crate::error::{Error, Result};

pub const BASE_FILE: &str = "base.f32";
pub const TOKENS_FILE: &str = "tokens.f32";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TinyViTConfig,
    pub seed: u64,
    pub start_block: usize,
    pub base_file: String,
    pub base_tensors: Vec<TensorShape>,
    #[serde(default)]
    pub tokens_file: Option<String>,
    #[serde(default)]
    pub token_banks: Vec<TensorShape>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: BaseParameters,
    pub tokens: Option<LRTokenBank>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &BaseParameters,
    tokens: Option<&LRTokenBank>,
    seed: u64,
    start_block: usize,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &params.config;
    let manifest = Manifest {
        config: cfg.clone(),
        seed,
        start_block,
        base_file: BASE_FILE.into(),
        base_tensors: params
            .tensors()
            .into_iter()
            .map(|(name, shape, _)| TensorShape { name, shape })
            .collect(),
        tokens_file: tokens.map(|_| TOKENS_FILE.into()),
        token_banks: tokens
            .map(|t| {
                (0..t.len())
                    .map(|b| TensorShape {
                        name: format!("bank.{b}"),
                        shape: vec![cfg.num_patches(), cfg.dim],
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(BASE_FILE, &params.to_f32_bytes())?;
    if let Some(t) = tokens {
        write(TOKENS_FILE, &t.to_f32_bytes())?;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(MANIFEST_FILE, &json)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| Error::format(&manifest_path, e))?;
    manifest.config.validate()?;
    let params = BaseParameters::from_f32_bytes(&manifest.config, &read(&manifest.base_file)?)?;
    let tokens = match &manifest.tokens_file {
        Some(f) => Some(LRTokenBank::from_f32_bytes(&manifest.config, &read(f)?)?),
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        params,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = TinyViTConfig {
            dim: 8,
            heads: 2,
            depth: 2,
            ..Default::default()
        };
        let params = BaseParameters::init(&cfg, 2).unwrap();
        let mut tokens = LRTokenBank::zeros(&cfg);
        tokens.bank_mut(1)[[3, 4]] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, Some(&tokens), 2, 1).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.tokens.unwrap(), tokens);
        assert_eq!(ck.manifest.start_block, 1);
        assert_eq!(ck.manifest.token_banks.len(), 3);
    }

    #[test]
    fn missing_dir_is_io_error() {
        assert!(load_checkpoint("/nonexistent/ckpt").unwrap_err().is_io());
    }
}
