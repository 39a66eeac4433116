//! Frozen base weights of the tiny transformer.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::TinyViTConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Patch projection, positional embeddings, class token, blocks and the
/// output head. Linear layers compute `x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParameters {
    pub config: TinyViTConfig,
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub cls: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm_g: Array1<f64>,
    pub norm_b: Array1<f64>,
    pub proj: Array2<f64>,
    pub proj_b: Array1<f64>,
}

const CALIBRATION_IMAGES: usize = 64;

/// Query/key init gain. At gain 1 attention is close to uniform and the
/// class token reduces to a near-linear patch average that hardly reacts to
/// resolution; a larger gain makes attention content-selective.
pub const QK_INIT_GAIN: f64 = 3.0;

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    // drawn in f32 so that float32 checkpoints are lossless
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let normal = Normal::new(0.0f32, std as f32).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || f64::from(normal.sample(&mut self.rng)))
    }

    fn vector(&mut self, len: usize, std: f64) -> Array1<f64> {
        let normal = Normal::new(0.0f32, std as f32).expect("finite std");
        Array1::from_shape_simple_fn(len, || f64::from(normal.sample(&mut self.rng)))
    }
}

impl BaseParameters {
    /// Seeded random initialization followed by output centering: the
    /// projection bias is set to minus the mean raw output over procedural
    /// images, so that embeddings of unrelated images are not all nearly
    /// parallel.
    pub fn init(config: &TinyViTConfig, seed: u64) -> Result<Self> {
        let mut params = Self::init_uncentered(config, seed)?;
        let images = super::synth::synthetic_dataset(CALIBRATION_IMAGES, config.input_res, seed ^ 0x5eed);
        let mut mean = Array1::zeros(config.embed_dim_out);
        for img in &images {
            mean += &super::forward::forward(&params, None, img, 0)?.raw_output();
        }
        mean /= images.len() as f64;
        params.proj_b = mean.mapv(|v: f64| -(v as f32) as f64);
        Ok(params)
    }

    /// Seeded random initialization with a zero projection bias.
    pub fn init_uncentered(config: &TinyViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.dim;
        let hid = config.mlp_hidden();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_w = init.matrix(config.patch_dim(), d, inv(config.patch_dim()));
        let patch_b = Array1::zeros(d);
        let cls = init.vector(d, 0.02);
        let pos = init.matrix(config.num_patches() + 1, d, 0.02);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: init.matrix(d, d, QK_INIT_GAIN * inv(d)),
                bq: Array1::zeros(d),
                wk: init.matrix(d, d, QK_INIT_GAIN * inv(d)),
                bk: Array1::zeros(d),
                wv: init.matrix(d, d, inv(d)),
                bv: Array1::zeros(d),
                wo: init.matrix(d, d, inv(d)),
                bo: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: init.matrix(d, hid, inv(d)),
                b1: Array1::zeros(hid),
                w2: init.matrix(hid, d, inv(hid)),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(BaseParameters {
            config: config.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g: Array1::ones(d),
            norm_b: Array1::zeros(d),
            proj: init.matrix(d, config.embed_dim_out, inv(d)),
            proj_b: Array1::zeros(config.embed_dim_out),
        })
    }

    /// Named tensors in serialization order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("patch_w".into(), self.patch_w.shape().to_vec(), contiguous(self.patch_w.as_slice())),
            ("patch_b".into(), self.patch_b.shape().to_vec(), contiguous(self.patch_b.as_slice())),
            ("cls".into(), self.cls.shape().to_vec(), contiguous(self.cls.as_slice())),
            ("pos".into(), self.pos.shape().to_vec(), contiguous(self.pos.as_slice())),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let named = [
                ("ln1_g", b.ln1_g.shape(), b.ln1_g.as_slice()),
                ("ln1_b", b.ln1_b.shape(), b.ln1_b.as_slice()),
                ("wq", b.wq.shape(), b.wq.as_slice()),
                ("bq", b.bq.shape(), b.bq.as_slice()),
                ("wk", b.wk.shape(), b.wk.as_slice()),
                ("bk", b.bk.shape(), b.bk.as_slice()),
                ("wv", b.wv.shape(), b.wv.as_slice()),
                ("bv", b.bv.shape(), b.bv.as_slice()),
                ("wo", b.wo.shape(), b.wo.as_slice()),
                ("bo", b.bo.shape(), b.bo.as_slice()),
                ("ln2_g", b.ln2_g.shape(), b.ln2_g.as_slice()),
                ("ln2_b", b.ln2_b.shape(), b.ln2_b.as_slice()),
                ("w1", b.w1.shape(), b.w1.as_slice()),
                ("b1", b.b1.shape(), b.b1.as_slice()),
                ("w2", b.w2.shape(), b.w2.as_slice()),
                ("b2", b.b2.shape(), b.b2.as_slice()),
            ];
            for (name, shape, data) in named {
                out.push((format!("blocks.{i}.{name}"), shape.to_vec(), contiguous(data)));
            }
        }
        out.push(("norm_g".into(), self.norm_g.shape().to_vec(), contiguous(self.norm_g.as_slice())));
        out.push(("norm_b".into(), self.norm_b.shape().to_vec(), contiguous(self.norm_b.as_slice())));
        out.push(("proj".into(), self.proj.shape().to_vec(), contiguous(self.proj.as_slice())));
        out.push(("proj_b".into(), self.proj_b.shape().to_vec(), contiguous(self.proj_b.as_slice())));
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// All tensors as little-endian float32, in [`Self::tensors`] order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect()
    }

    pub fn from_f32_bytes(config: &TinyViTConfig, bytes: &[u8]) -> Result<Self> {
        let mut params = Self::init_uncentered(config, 0)?;
        let values = crate::zeroshot::decode_f32(bytes)
            .ok_or_else(|| Error::validation("parameter file length is not a multiple of 4"))?;
        if values.len() != params.num_values() {
            return Err(Error::validation(format!(
                "parameter file has {} values, config needs {}",
                values.len(),
                params.num_values()
            )));
        }
        let mut it = values.into_iter().map(f64::from);
        params.for_each_mut(|slot| slot.iter_mut().for_each(|v| *v = it.next().expect("length checked")));
        Ok(params)
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        let mut visit = |a: Option<&mut [f64]>| f(a.expect("standard layout"));
        visit(self.patch_w.as_slice_mut());
        visit(self.patch_b.as_slice_mut());
        visit(self.cls.as_slice_mut());
        visit(self.pos.as_slice_mut());
        for b in &mut self.blocks {
            visit(b.ln1_g.as_slice_mut());
            visit(b.ln1_b.as_slice_mut());
            visit(b.wq.as_slice_mut());
            visit(b.bq.as_slice_mut());
            visit(b.wk.as_slice_mut());
            visit(b.bk.as_slice_mut());
            visit(b.wv.as_slice_mut());
            visit(b.bv.as_slice_mut());
            visit(b.wo.as_slice_mut());
            visit(b.bo.as_slice_mut());
            visit(b.ln2_g.as_slice_mut());
            visit(b.ln2_b.as_slice_mut());
            visit(b.w1.as_slice_mut());
            visit(b.b1.as_slice_mut());
            visit(b.w2.as_slice_mut());
            visit(b.b2.as_slice_mut());
        }
        visit(self.norm_g.as_slice_mut());
        visit(self.norm_b.as_slice_mut());
        visit(self.proj.as_slice_mut());
        visit(self.proj_b.as_slice_mut());
    }
}

fn contiguous(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameters are stored in standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = TinyViTConfig::default();
        assert_eq!(BaseParameters::init(&cfg, 3).unwrap(), BaseParameters::init(&cfg, 3).unwrap());
        assert_ne!(BaseParameters::init(&cfg, 3).unwrap(), BaseParameters::init(&cfg, 4).unwrap());
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let cfg = TinyViTConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            ..Default::default()
        };
        let p = BaseParameters::init(&cfg, 11).unwrap();
        let back = BaseParameters::from_f32_bytes(&cfg, &p.to_f32_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(BaseParameters::from_f32_bytes(&cfg, &[0u8; 8]).is_err());
    }
}
