//! Single-file parameter archive.
//!
//! ```text
//! magic "GLPDCKPT" | u32 version | u64 meta_len | meta (TOML, UTF-8)
//! u32 n_tensors | n × (u32 name_len | name | u32 ndim | ndim × u64 | f64 data)
//! 32-byte SHA-256 of everything before it
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, Network};
use crate::params::ParamStore;
use crate::policy::{PatchScorer, Selector};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GLPDCKPT";
const VERSION: u32 = 1;
const MAX_DIMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2,
    EndToEnd,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::EndToEnd => "end_to_end",
        }
    }
}

/// Generator position, stored as decimal strings (TOML integers are 64-bit signed).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Load("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad())?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: StageTag,
    pub ablation: Ablation,
    pub selector: Selector,
    pub scorer_trained: bool,
    pub rng: RngState,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, stage: StageTag, rng: &ChaCha8Rng) -> Self {
        let mut tensors: Vec<(String, Tensor)> = net.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        if let Some(s) = &net.scorer {
            tensors.extend(s.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
        }
        Self {
            meta: CheckpointMeta {
                stage,
                ablation: net.ablation,
                selector: net.selector,
                scorer_trained: net.scorer.as_ref().is_some_and(|s| s.trained),
                rng: RngState::capture(rng),
                model: net.config.clone(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Load(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Load("archive is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Load("archive checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("not a checkpoint archive".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!("unsupported archive version {version}")));
        }
        let meta_len = r.len_u64()?;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Load("metadata is not UTF-8".into()))?;
        let meta: CheckpointMeta = toml::from_str(meta).map_err(|e| Error::Load(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > MAX_DIMS {
                return Err(Error::Load(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut count: usize = 1;
            for _ in 0..ndim {
                let d = r.len_u64()?;
                count = count
                    .checked_mul(d)
                    .filter(|&c| c.saturating_mul(8) <= r.remaining())
                    .ok_or_else(|| Error::Load(format!("tensor `{name}` is larger than the archive")))?;
                shape.push(d);
            }
            let raw = r.take(count * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Load("trailing bytes after the last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network. Every stored tensor must match a parameter of the
    /// configured model in name and shape, and every parameter must be stored.
    pub fn to_network(&self) -> Result<Network> {
        let m = &self.meta;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(m.model.clone(), m.ablation, m.selector, &mut rng)?;
        let (scorer_tensors, net_tensors): (Vec<_>, Vec<_>) =
            self.tensors.iter().partition(|(n, _)| n.starts_with("scorer."));
        fill_store(&mut net.store, &net_tensors)?;
        if m.stage == StageTag::Stage2 {
            net.store.freeze_prefix("backbone.");
        }
        if !scorer_tensors.is_empty() {
            let width = scorer_tensors
                .iter()
                .find(|(n, _)| n == "scorer.conv.weight")
                .map(|(_, t)| t.shape()[0])
                .ok_or_else(|| Error::Load("scorer tensors without `scorer.conv.weight`".into()))?;
            let mut scorer = PatchScorer::new(m.model.feature_channels(), m.model.patch_size, width, &mut rng);
            fill_store(&mut scorer.store, &scorer_tensors)?;
            scorer.trained = m.scorer_trained;
            net.scorer = Some(scorer);
        }
        Ok(net)
    }

    /// Like [`Checkpoint::to_network`], additionally requiring the stored
    /// model configuration to equal `expected`.
    pub fn to_network_checked(&self, expected: &ModelConfig) -> Result<Network> {
        if &self.meta.model != expected {
            let mut diff = Vec::new();
            let a = toml::Value::try_from(&self.meta.model).map_err(|e| Error::Load(e.to_string()))?;
            let b = toml::Value::try_from(expected).map_err(|e| Error::Load(e.to_string()))?;
            if let (Some(a), Some(b)) = (a.as_table(), b.as_table()) {
                for (k, v) in a {
                    if b.get(k) != Some(v) {
                        diff.push(k.clone());
                    }
                }
            }
            return Err(Error::Load(format!(
                "checkpoint model config differs from the requested one in: {}",
                diff.join(", ")
            )));
        }
        self.to_network()
    }
}

fn fill_store(store: &mut ParamStore, tensors: &[&(String, Tensor)]) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            problems.push(format!("{name} (duplicate)"));
            continue;
        }
        match store.find(name) {
            None => problems.push(format!("{name} (unexpected)")),
            Some(id) if store.get(id).shape() != t.shape() => problems.push(format!(
                "{name} (stored {:?}, model {:?})",
                t.shape(),
                store.get(id).shape()
            )),
            Some(_) => store.set(name, t.clone())?,
        }
    }
    for (_, name, _) in store.iter() {
        if !seen.contains(name) {
            problems.push(format!("{name} (missing)"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Load(format!("mismatched tensors: {}", problems.join(", "))))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Load("archive is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Load("length overflows".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RgbImage;
    use crate::policy::SampleMode;
    use rand::Rng;

    fn net(seed: u64) -> Network {
        Network::new(ModelConfig::reduced(), Ablation::Full, Selector::Drl, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let n = net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: u64 = rng.random();
        let ck = Checkpoint::from_network(&n, StageTag::Stage2, &rng);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.meta.rng.restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.clone().random::<u64>());

        let m = back.to_network().unwrap();
        let img = RgbImage::filled(16, 16, 0.4);
        let a = n.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = m.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scorer_survives_the_round_trip() {
        let mut n = net(1);
        let mut s = PatchScorer::new(4, 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        s.trained = true;
        n.scorer = Some(s);
        let ck = Checkpoint::from_network(&n, StageTag::Stage2, &ChaCha8Rng::seed_from_u64(0));
        let m = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().to_network().unwrap();
        let (a, b) = (n.scorer.unwrap(), m.scorer.unwrap());
        assert!(b.trained);
        assert_eq!(a.store.digest_prefix(""), b.store.digest_prefix(""));
    }

    #[test]
    fn corruption_is_a_load_error() {
        let ck = Checkpoint::from_network(&net(0), StageTag::Stage1, &ChaCha8Rng::seed_from_u64(0));
        let bytes = ck.to_bytes().unwrap();
        for cut in [0, 7, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Load(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Load(_))));
    }

    #[test]
    fn mismatched_tensors_are_listed() {
        let mut ck = Checkpoint::from_network(&net(0), StageTag::Stage1, &ChaCha8Rng::seed_from_u64(0));
        ck.tensors[0].1 = Tensor::zeros(&[1]);
        ck.tensors.pop();
        let err = ck.to_network().unwrap_err().to_string();
        assert!(err.contains("stored [1]") && err.contains("missing"), "{err}");

        let ck = Checkpoint::from_network(&net(0), StageTag::Stage1, &ChaCha8Rng::seed_from_u64(0));
        let mut other = ModelConfig::reduced();
        other.steps = 3;
        let err = ck.to_network_checked(&other).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
    }
}
