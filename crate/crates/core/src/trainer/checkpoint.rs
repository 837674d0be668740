//! Binary checkpoint container.
//!
//! Layout (little-endian; strings and tensors length-prefixed with u32):
//!
//! ```text
//! magic "JADFCK01"
//! phase u8 (0 pretrained, 1 adapted)
//! config digest (string), seed u64, obs_dim u32, num_classes u32
//! detector tensors: count u32, then (name, ndim, dims.., f64 data..)
//! adaptation flag u8; when 1:
//!     variant (string), tensors as above,
//!     ema K×f64, weights K×f64, warmup_remaining u32
//! optimizer: lr f64, momentum f64, weight_decay f64, iteration u64,
//!     velocity tensors as above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapt::{AdaptationParams, TransferabilityState};
use crate::autodiff::Tensor;
use crate::codec::{put_f64, put_str, put_u32, put_u64, Reader};
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::seed::sha256_hex;

use super::{OptState, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JADFCK01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrained,
    Adapted,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrained => "pretrained",
            Phase::Adapted => "adapted",
        }
    }
}

/// Domain classifiers and transferability state of an adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationState {
    pub variant: Variant,
    pub params: AdaptationParams,
    pub transferability: TransferabilityState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config_digest: String,
    pub seed: u64,
    pub detector: DetectorParams,
    pub adaptation: Option<AdaptationState>,
    pub opt: OptState,
}

impl Checkpoint {
    pub fn require_phase(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::Phase {
                expected: expected.name(),
                found: self.phase.name(),
            });
        }
        Ok(())
    }

    /// Same checkpoint without domain classifiers.
    pub fn strip_adaptation(&self) -> Checkpoint {
        Checkpoint {
            adaptation: None,
            ..self.clone()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.push(match self.phase {
            Phase::Pretrained => 0,
            Phase::Adapted => 1,
        });
        put_str(&mut out, &self.config_digest);
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.detector.obs_dim());
        put_u32(&mut out, self.detector.num_classes());
        put_tensors(&mut out, self.detector.named_tensors(""));
        match &self.adaptation {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                put_str(&mut out, a.variant.name());
                put_tensors(&mut out, a.params.named_tensors(""));
                let t = &a.transferability;
                t.ema
                    .iter()
                    .chain(&t.weights)
                    .for_each(|&v| put_f64(&mut out, v));
                put_u32(&mut out, t.warmup_remaining);
            }
        }
        put_f64(&mut out, self.opt.lr);
        put_f64(&mut out, self.opt.momentum);
        put_f64(&mut out, self.opt.weight_decay);
        put_u64(&mut out, self.opt.iteration as u64);
        put_tensors(
            &mut out,
            self.opt
                .velocity
                .iter()
                .map(|(k, v)| (k.clone(), v))
                .collect(),
        );
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let phase = match r.u8()? {
            0 => Phase::Pretrained,
            1 => Phase::Adapted,
            p => return Err(Error::Format(format!("unknown checkpoint phase {p}"))),
        };
        let config_digest = r.string()?;
        let seed = r.u64()?;
        let obs_dim = r.u32()?;
        let k = r.u32()?;
        if obs_dim == 0 || k == 0 {
            return Err(Error::Format("checkpoint has empty dimensions".into()));
        }
        let mut detector = DetectorParams::zeros(obs_dim, k);
        fill(&mut detector, read_tensors(&mut r)?)?;
        let adaptation = match r.u8()? {
            0 => None,
            1 => {
                let variant: Variant = r.string()?.parse()?;
                let mut params = AdaptationParams::zeros(k);
                fill(&mut params, read_tensors(&mut r)?)?;
                let ema = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let weights = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let warmup_remaining = r.u32()?;
                Some(AdaptationState {
                    variant,
                    params,
                    transferability: TransferabilityState {
                        ema,
                        weights,
                        warmup_remaining,
                    },
                })
            }
            f => return Err(Error::Format(format!("bad adaptation flag {f}"))),
        };
        let lr = r.f64()?;
        let momentum = r.f64()?;
        let weight_decay = r.f64()?;
        let iteration = r.u64()? as usize;
        let velocity: BTreeMap<String, Tensor> = read_tensors(&mut r)?.into_iter().collect();
        r.finish()?;
        Ok(Checkpoint {
            phase,
            config_digest,
            seed,
            detector,
            adaptation,
            opt: OptState {
                velocity,
                lr,
                momentum,
                weight_decay,
                iteration,
            },
        })
    }

    /// SHA-256 of the encoded checkpoint, lowercase hex.
    pub fn digest(&self) -> String {
        sha256_hex(&self.encode())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsio::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_tensors(out: &mut Vec<u8>, tensors: Vec<(String, &Tensor)>) {
    put_u32(out, tensors.len());
    for (name, t) in tensors {
        put_str(out, &name);
        put_u32(out, t.shape().len());
        t.shape().iter().for_each(|&d| put_u32(out, d));
        t.data().iter().for_each(|&v| put_f64(out, v));
    }
}

fn read_tensors(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        // guard against absurd lengths before allocating
        if len.saturating_mul(8) > r.remaining() {
            return Err(Error::Format(format!("tensor `{name}` truncated")));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Copies decoded tensors into `params`, requiring an exact name and
/// shape match.
fn fill(params: &mut impl NamedParams, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    for (name, slot) in params.named_tensors_mut("") {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "unexpected tensor `{extra}` in checkpoint"
        )));
    }
    Ok(())
}
