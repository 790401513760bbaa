//! Binary checkpoints: config snapshot, vocabulary, every parameter with its
//! optimizer moments, the step counter, and the exact generator state. A
//! trailing FNV-1a checksum catches truncation and corruption; round trips
//! are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{Param, ParamStore};
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

/// Mutable training position stored alongside the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub rng: Rng,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("{}: truncated", self.path)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: invalid utf-8 string", self.path)))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.string(&model.config.to_key_values());
    w.u32(model.vocab.len() as u32);
    for t in model.vocab.tokens() {
        w.string(t);
    }
    w.u64(state.step);
    w.u64(state.rng.state());
    w.u64(model.params.adam_t);
    w.u32(model.params.len() as u32);
    for (name, p) in model.params.iter() {
        w.string(name);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        w.f64s(&p.data);
        w.f64s(&p.m);
        w.f64s(&p.v);
    }
    let checksum = fnv1a(&w.buf);
    w.u64(checksum);

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&w.buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 4 + 8 {
        return Err(Error::Checkpoint(format!("{}: too short", path.display())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }

    let mut r = Reader { buf: body, pos: 0, path: path.display().to_string() };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let config = ModelConfig::parse_key_values(&r.string()?)?;
    let vocab_len = r.u32()? as usize;
    let tokens: Vec<String> = (0..vocab_len).map(|_| r.string()).collect::<Result<_>>()?;
    let vocab = Vocab::from_tokens(tokens)?;
    let step = r.u64()?;
    let rng = Rng::from_state(r.u64()?);
    let adam_t = r.u64()?;
    let n_params = r.u32()? as usize;

    let mut store = ParamStore::new();
    store.adam_t = adam_t;
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        let m = r.f64s(numel)?;
        let v = r.f64s(numel)?;
        store.insert(&name, shape, data)?;
        let p: &mut Param = store.get_mut(&name).unwrap();
        p.m = m;
        p.v = v;
    }
    let model = Model::from_parts(config, vocab, store)?;
    Ok((model, TrainState { step, rng }))
}

/// Summary for `inspect-checkpoint`.
pub struct CheckpointInfo {
    pub version: u32,
    pub step: u64,
    pub adam_t: u64,
    pub rng_state: u64,
    pub vocab_size: usize,
    pub config_text: String,
    pub params: Vec<(String, Vec<usize>)>,
    pub total_values: usize,
}

pub fn inspect(path: &Path) -> Result<CheckpointInfo> {
    let (model, state) = load_checkpoint(path)?;
    Ok(CheckpointInfo {
        version: VERSION,
        step: state.step,
        adam_t: model.params.adam_t,
        rng_state: state.rng.state(),
        vocab_size: model.vocab.len(),
        config_text: model.config.to_key_values(),
        params: model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.shape.clone()))
            .collect(),
        total_values: model.params.total_values(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            layers_text: 1,
            layers_image: 2,
            plug_layer: 1,
            cross_attn_depth: 1,
            centers: 3,
            patch_size: 8,
            image_size: 16,
            max_text_len: 8,
            decoder_layers: 1,
            ..Default::default()
        };
        let vocab = Vocab::build(["a red circle."]);
        Model::new(cfg, vocab).unwrap()
    }

    fn tmp(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("ckpt_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d.join("model.ckpt")
    }

    #[test]
    fn round_trip_reproduces_forward_bit_exactly() {
        let mut model = tiny_model();
        // Dirty the optimizer state so the round trip covers it.
        model.params.adam_t = 17;
        model.params.get_mut("group.centers").unwrap().m[0] = 0.125;
        let state = TrainState { step: 41, rng: Rng::from_state(0xDEAD_BEEF) };
        let path = tmp("rt");
        save_checkpoint(&path, &model, &state).unwrap();
        let (loaded, lstate) = load_checkpoint(&path).unwrap();
        assert_eq!(lstate, state);
        assert_eq!(loaded.params, model.params);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab, model.vocab);

        let img: Vec<f64> = (0..3 * 16 * 16).map(|p| (p % 13) as f64 / 13.0).collect();
        let forward = |m: &Model| {
            let mut g = Graph::new();
            let enc = m.encode_image_eval(&mut g, &img).unwrap();
            g.data(enc.pooled).to_vec()
        };
        assert_eq!(forward(&model), forward(&loaded));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let model = tiny_model();
        let state = TrainState { step: 1, rng: Rng::new(5) };
        let path = tmp("corrupt");
        save_checkpoint(&path, &model, &state).unwrap();

        let original = std::fs::read(&path).unwrap();
        let mut flipped = original.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        std::fs::write(&path, &original[..original.len() / 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_gate() {
        let model = tiny_model();
        let state = TrainState { step: 0, rng: Rng::new(1) };
        let path = tmp("version");
        save_checkpoint(&path, &model, &state).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // bump version field
        let body_len = bytes.len() - 8;
        let checksum = fnv1a(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
        std::fs::remove_file(&path).ok();
    }
}
