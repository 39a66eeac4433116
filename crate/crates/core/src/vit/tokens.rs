//! Additive low-resolution token banks.

use ndarray::Array2;

use super::config::TinyViTConfig;
use crate::error::{Error, Result};

/// `depth + 1` banks of `num_patches × dim`. Bank 0 is added right after
/// patchification, bank `b` right before block `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LRTokenBank {
    banks: Vec<Array2<f64>>,
}

impl LRTokenBank {
    pub fn zeros(config: &TinyViTConfig) -> Self {
        LRTokenBank {
            banks: (0..config.num_banks())
                .map(|_| Array2::zeros((config.num_patches(), config.dim)))
                .collect(),
        }
    }

    pub fn from_banks(config: &TinyViTConfig, banks: Vec<Array2<f64>>) -> Result<Self> {
        if banks.len() != config.num_banks() {
            return Err(Error::validation(format!(
                "expected {} token banks, got {}",
                config.num_banks(),
                banks.len()
            )));
        }
        let shape = [config.num_patches(), config.dim];
        if let Some(b) = banks.iter().find(|b| b.shape() != shape) {
            return Err(Error::validation(format!(
                "token bank shape {:?}, expected {:?}",
                b.shape(),
                shape
            )));
        }
        Ok(LRTokenBank {
            banks: banks.into_iter().map(|b| b.as_standard_layout().into_owned()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn bank(&self, index: usize) -> &Array2<f64> {
        &self.banks[index]
    }

    pub fn bank_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.banks[index]
    }

    pub fn banks(&self) -> &[Array2<f64>] {
        &self.banks
    }

    /// Whether bank `index` takes part in a forward pass starting at `start_block`.
    pub fn is_active(index: usize, start_block: usize) -> bool {
        if index == 0 {
            start_block == 0
        } else {
            index >= start_block.max(1)
        }
    }

    pub fn active_banks(depth: usize, start_block: usize) -> Vec<usize> {
        (0..=depth).filter(|&b| Self::is_active(b, start_block)).collect()
    }

    /// Number of trainable scalars for a given start block.
    pub fn trainable_count(config: &TinyViTConfig, start_block: usize) -> usize {
        Self::active_banks(config.depth, start_block).len() * config.num_patches() * config.dim
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.banks
            .iter()
            .flat_map(|b| b.iter().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect()
    }

    pub fn from_f32_bytes(config: &TinyViTConfig, bytes: &[u8]) -> Result<Self> {
        let values = crate::zeroshot::decode_f32(bytes)
            .ok_or_else(|| Error::validation("token file length is not a multiple of 4"))?;
        let per = config.num_patches() * config.dim;
        if values.len() != per * config.num_banks() {
            return Err(Error::validation(format!(
                "token file has {} values, config needs {}",
                values.len(),
                per * config.num_banks()
            )));
        }
        let banks = values
            .chunks(per)
            .map(|c| {
                Array2::from_shape_vec(
                    (config.num_patches(), config.dim),
                    c.iter().map(|&v| f64::from(v)).collect(),
                )
                .expect("chunk length matches shape")
            })
            .collect();
        Ok(LRTokenBank { banks })
    }

    /// `self -= lr * grads` on the active banks.
    pub(crate) fn descend(&mut self, grads: &[Option<Array2<f64>>], lr: f64) {
        for (bank, g) in self.banks.iter_mut().zip(grads) {
            if let Some(g) = g {
                bank.scaled_add(-lr, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_count_and_activity() {
        let cfg = TinyViTConfig::default();
        let t = LRTokenBank::zeros(&cfg);
        assert_eq!(t.len(), cfg.depth + 1);
        assert_eq!(t.bank(0).shape(), &[64, 32]);
        assert_eq!(LRTokenBank::active_banks(4, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(LRTokenBank::active_banks(4, 1), vec![1, 2, 3, 4]);
        assert_eq!(LRTokenBank::active_banks(4, 3), vec![3, 4]);
        assert_eq!(LRTokenBank::active_banks(4, 4), vec![4]);
    }

    #[test]
    fn earlier_start_contains_later_start() {
        for depth in 1..8 {
            for later in 0..=depth {
                for earlier in 0..=later {
                    let a = LRTokenBank::active_banks(depth, earlier);
                    let b = LRTokenBank::active_banks(depth, later);
                    assert!(b.iter().all(|x| a.contains(x)));
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_bank_count() {
        let cfg = TinyViTConfig::default();
        let banks = vec![Array2::zeros((64, 32)); 3];
        assert!(LRTokenBank::from_banks(&cfg, banks).is_err());
    }
}
