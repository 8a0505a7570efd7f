use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimization phase may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoders, fusion projections, attention, decoders.
    Main,
    /// Trainable RNP predictor networks.
    Predictor,
    /// Fixed random RNP target networks; never updated.
    Frozen,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Main => 0,
            ParamGroup::Predictor => 1,
            ParamGroup::Frozen => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Main),
            1 => Some(ParamGroup::Predictor),
            2 => Some(ParamGroup::Frozen),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Main => "main",
            ParamGroup::Predictor => "predictor",
            ParamGroup::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Arena owning every weight of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let requires_grad = group != ParamGroup::Frozen;
        self.params.push(Param {
            name: name.into(),
            group,
            value: value.with_requires_grad(requires_grad),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Replaces a parameter's values. Shapes must agree.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("assign", p.value.shape(), value.shape()));
        }
        let rg = p.value.requires_grad();
        p.value = value.with_requires_grad(rg);
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of `ids`.
    pub fn digest(&self, ids: &[ParamId]) -> Digest {
        let mut h = Sha256::new();
        for &id in ids {
            let p = self.get(id);
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        Digest(h.finalize().into())
    }

    /// Fast 64-bit fingerprint of a whole group, used for per-step checks.
    pub fn fingerprint(&self, group: ParamGroup) -> Fingerprint {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29);
            }
            h ^= p.value.numel() as u64;
        }
        Fingerprint(h)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &hex::encode(self.0)[..16])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub u64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Main, Tensor::vector(vec![1.0, 2.0]));
        let d0 = store.digest(&[a]);
        let f0 = store.fingerprint(ParamGroup::Main);
        store.get_mut(a).value.data_mut()[1] = 2.5;
        assert_ne!(d0, store.digest(&[a]));
        assert_ne!(f0, store.fingerprint(ParamGroup::Main));
        store.get_mut(a).value.data_mut()[1] = 2.0;
        assert_eq!(d0, store.digest(&[a]));
        assert_eq!(f0, store.fingerprint(ParamGroup::Main));
    }

    #[test]
    fn frozen_params_do_not_require_grad() {
        let mut store = ParamStore::new();
        let a = store.add("psi", ParamGroup::Frozen, Tensor::zeros(&[2]));
        let b = store.add("phi", ParamGroup::Predictor, Tensor::zeros(&[2]));
        assert!(!store.value(a).requires_grad());
        assert!(store.value(b).requires_grad());
        assert_eq!(store.ids_in(ParamGroup::Predictor), vec![b]);
    }
}
