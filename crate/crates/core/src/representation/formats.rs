//! Binary artifact formats (little-endian, versioned):
//!
//! * `NHFT` features: version, n_layers, per layer (layer_id, T, D), then
//!   each layer's `T x D` f32 matrix.
//! * `NHTE` embedding: version, D, then D f32.
//! * `NHCB` codebook: version, n_layers, per layer (layer_id, K, D), then
//!   centroids; an optional `META` trailer holds seed, iterations, inertia.
//! * `NHRC` representation cache: version, n_layers, T, sample_rate, hop,
//!   win, per layer (layer_id, K), tokens `u32`, then f0 f32 (0 = unvoiced).

use std::path::Path;

use crate::dsp::stft::FrameSpec;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::Cursor;
use crate::pitch::F0Contour;
use crate::representation::features::ContentFeatures;
use crate::representation::kmeans::{Codebook, CodebookLayer};
use crate::representation::timbre::TimbreEmbedding;
use crate::representation::{ContentTokens, FrameRepresentation};

pub const FEATURES_MAGIC: &[u8; 4] = b"NHFT";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"NHTE";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"NHCB";
pub const CACHE_MAGIC: &[u8; 4] = b"NHRC";
pub const VERSION: u32 = 1;
const META_MAGIC: &[u8; 4] = b"META";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    put_u32(&mut out, VERSION);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn finish(c: &Cursor, what: &str) -> Result<()> {
    if c.remaining() != 0 {
        return Err(Error::Format(format!("{what}: {} trailing bytes", c.remaining())));
    }
    Ok(())
}

pub fn encode_features(f: &ContentFeatures) -> Vec<u8> {
    let mut out = header(FEATURES_MAGIC);
    put_u32(&mut out, f.layer_ids.len() as u32);
    for (id, d) in f.layer_ids.iter().zip(&f.dims) {
        put_u32(&mut out, *id);
        put_u32(&mut out, f.n_frames as u32);
        put_u32(&mut out, *d as u32);
    }
    for l in &f.layers {
        put_f32s(&mut out, l);
    }
    out
}

pub fn decode_features(bytes: &[u8], frame_spec: FrameSpec) -> Result<ContentFeatures> {
    let mut c = Cursor::new(bytes, "feature file");
    c.expect_magic(FEATURES_MAGIC, VERSION)?;
    let n = c.u32()? as usize;
    let mut heads = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        heads.push((c.u32()?, c.u32()? as usize, c.u32()? as usize));
    }
    let t = heads.first().map_or(0, |h| h.1);
    if let Some(h) = heads.iter().find(|h| h.1 != t) {
        return Err(Error::Format(format!("feature layer {} has {} frames, layer 0 has {t}", h.0, h.1)));
    }
    let mut layers = Vec::with_capacity(n);
    for &(_, t, d) in &heads {
        layers.push(c.f32s(t * d)?);
    }
    finish(&c, "feature file")?;
    ContentFeatures::new(
        heads.iter().map(|h| h.0).collect(),
        heads.iter().map(|h| h.2).collect(),
        layers,
        t,
        frame_spec,
    )
}

pub fn write_features(f: &ContentFeatures, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_features(f))
}

pub fn read_features(path: impl AsRef<Path>, frame_spec: FrameSpec) -> Result<ContentFeatures> {
    decode_features(&read_file(path.as_ref())?, frame_spec)
}

pub fn encode_embedding(e: &TimbreEmbedding) -> Vec<u8> {
    let mut out = header(EMBEDDING_MAGIC);
    put_u32(&mut out, e.vector.len() as u32);
    put_f32s(&mut out, &e.vector);
    out
}

/// Decodes an embedding and checks it has `expected_dim` entries.
pub fn decode_embedding(bytes: &[u8], expected_dim: usize, source_id: &str) -> Result<TimbreEmbedding> {
    let mut c = Cursor::new(bytes, "embedding file");
    c.expect_magic(EMBEDDING_MAGIC, VERSION)?;
    let d = c.u32()? as usize;
    if d != expected_dim {
        return Err(Error::Format(format!("embedding has {d} dims, expected {expected_dim}")));
    }
    let v = c.f32s(d)?;
    finish(&c, "embedding file")?;
    TimbreEmbedding::new(v, source_id)
}

pub fn write_embedding(e: &TimbreEmbedding, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_embedding(e))
}

pub fn read_embedding(path: impl AsRef<Path>, expected_dim: usize) -> Result<TimbreEmbedding> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_embedding(&read_file(path)?, expected_dim, &id)
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = header(CODEBOOK_MAGIC);
    put_u32(&mut out, cb.layers.len() as u32);
    for l in &cb.layers {
        put_u32(&mut out, l.layer_id);
        put_u32(&mut out, l.k as u32);
        put_u32(&mut out, l.dim as u32);
    }
    for l in &cb.layers {
        put_f32s(&mut out, &l.centroids);
    }
    out.extend_from_slice(META_MAGIC);
    out.extend_from_slice(&cb.seed.to_le_bytes());
    for l in &cb.layers {
        put_u32(&mut out, l.iterations);
        out.extend_from_slice(&l.inertia.to_le_bytes());
    }
    out
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut c = Cursor::new(bytes, "codebook");
    c.expect_magic(CODEBOOK_MAGIC, VERSION)?;
    let n = c.u32()? as usize;
    let mut heads = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        heads.push((c.u32()?, c.u32()? as usize, c.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(n);
    for &(layer_id, k, dim) in &heads {
        layers.push(CodebookLayer {
            layer_id,
            k,
            dim,
            centroids: c.f32s(k * dim)?,
            iterations: 0,
            inertia: 0.0,
        });
    }
    let mut seed = 0;
    if c.remaining() > 0 {
        if c.take(4)? != META_MAGIC {
            return Err(Error::Format("codebook: unknown trailer".into()));
        }
        seed = c.u64()?;
        for l in &mut layers {
            l.iterations = c.u32()?;
            l.inertia = c.f64()?;
        }
    }
    finish(&c, "codebook")?;
    let cb = Codebook { layers, seed };
    cb.validate()?;
    Ok(cb)
}

pub fn write_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_codebook(cb))
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    decode_codebook(&read_file(path.as_ref())?)
}

pub fn encode_representation(z: &FrameRepresentation) -> Vec<u8> {
    let mut out = header(CACHE_MAGIC);
    let fs = z.f0.frame_spec;
    put_u32(&mut out, z.tokens.layer_ids.len() as u32);
    put_u32(&mut out, z.n_frames() as u32);
    put_u32(&mut out, fs.sample_rate);
    put_u32(&mut out, fs.hop_samples as u32);
    put_u32(&mut out, fs.win_samples as u32);
    for (id, k) in z.tokens.layer_ids.iter().zip(&z.tokens.vocab) {
        put_u32(&mut out, *id);
        put_u32(&mut out, *k as u32);
    }
    for layer in &z.tokens.tokens {
        for &tok in layer {
            put_u32(&mut out, tok);
        }
    }
    put_f32s(&mut out, &z.f0.f0_hz);
    out
}

pub fn decode_representation(bytes: &[u8]) -> Result<FrameRepresentation> {
    let mut c = Cursor::new(bytes, "representation cache");
    c.expect_magic(CACHE_MAGIC, VERSION)?;
    let n = c.u32()? as usize;
    let t = c.u32()? as usize;
    let (sr, hop, win) = (c.u32()?, c.u32()? as usize, c.u32()? as usize);
    let spec = FrameSpec::new(hop, win, sr).map_err(|e| Error::Format(e.to_string()))?;
    let mut ids = Vec::with_capacity(n.min(1024));
    let mut vocab = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        ids.push(c.u32()?);
        vocab.push(c.u32()? as usize);
    }
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = c.take(t.checked_mul(4).ok_or_else(|| Error::Format("cache size overflow".into()))?)?;
        tokens.push(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    let f0 = c.f32s(t)?;
    finish(&c, "representation cache")?;
    let tokens = ContentTokens::new(ids, vocab, tokens).map_err(|e| Error::Format(e.to_string()))?;
    let f0 = F0Contour::from_hz(f0, spec).map_err(|e| Error::Format(e.to_string()))?;
    FrameRepresentation::new(tokens, f0).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_representation(z: &FrameRepresentation, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_representation(z))
}

pub fn read_representation(path: impl AsRef<Path>) -> Result<FrameRepresentation> {
    let path = path.as_ref();
    decode_representation(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FrameSpec {
        FrameSpec::new(320, 1024, 16000).unwrap()
    }

    #[test]
    fn features_round_trip_and_reject_mismatched_frames() {
        let f = ContentFeatures::new(vec![5, 8], vec![2, 3], vec![vec![0.5; 8], vec![-1.0; 12]], 4, spec()).unwrap();
        assert_eq!(decode_features(&encode_features(&f), spec()).unwrap(), f);
        let mut bytes = encode_features(&f);
        // second layer header T field
        bytes[12 + 12 + 4..12 + 12 + 8].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_features(&bytes, spec()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_feature_file_is_io_error() {
        assert!(matches!(read_features("/nonexistent/x.nhft", spec()), Err(Error::Io { .. })));
    }

    #[test]
    fn embedding_checks() {
        let e = TimbreEmbedding::new(vec![0.25; 192], "a").unwrap();
        let bytes = encode_embedding(&e);
        assert_eq!(decode_embedding(&bytes, 192, "a").unwrap(), e);
        assert!(matches!(decode_embedding(&bytes, 64, "a"), Err(Error::Format(_))));
        let mut zeros = header(EMBEDDING_MAGIC);
        put_u32(&mut zeros, 192);
        put_f32s(&mut zeros, &[0.0; 192]);
        assert!(matches!(decode_embedding(&zeros, 192, "z"), Err(Error::InvalidEmbedding(_))));
    }

    #[test]
    fn codebook_round_trip_is_bit_exact() {
        let cb = Codebook {
            layers: vec![
                CodebookLayer { layer_id: 5, k: 2, dim: 3, centroids: vec![0.1, f32::MIN_POSITIVE, -3.0, 1e-30, 7.0, 2.5], iterations: 4, inertia: 1.25 },
                CodebookLayer { layer_id: 9, k: 1, dim: 1, centroids: vec![-0.0], iterations: 1, inertia: 0.0 },
            ],
            seed: 42,
        };
        let bytes = encode_codebook(&cb);
        let back = decode_codebook(&bytes).unwrap();
        assert_eq!(encode_codebook(&back), bytes);
        assert_eq!(back.layers[0].centroids[1].to_bits(), f32::MIN_POSITIVE.to_bits());
        assert!(matches!(decode_codebook(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn representation_round_trip() {
        let tokens = ContentTokens::new(vec![5, 8], vec![4, 4], vec![vec![0, 1, 3], vec![2, 2, 0]]).unwrap();
        let f0 = F0Contour::from_hz(vec![0.0, 220.0, 221.5], spec()).unwrap();
        let z = FrameRepresentation::new(tokens, f0).unwrap();
        assert_eq!(decode_representation(&encode_representation(&z)).unwrap(), z);
        let mut bad = encode_representation(&z);
        bad[4] = 2;
        assert!(matches!(decode_representation(&bad), Err(Error::Format(_))));
    }
}
