//! Binary checkpoint and dataset files.
//!
//! Both formats are `magic (4 bytes) | version u32 LE | header length u64 LE
//! | JSON header | payload`, with a little-endian `f64` payload. Complex
//! values are stored as interleaved `(re, im)` pairs. Every tensor of a
//! checkpoint carries its own SHA-256; a dataset carries one for the whole
//! payload. Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moe::{ExpertParams, FreqMoe, FreqMoeLayer, GateParams};
use crate::nn::{
    Fno, FnoConfig, FourierLayer, Linear, Network, ParamMut, ParamRef, Parameters, SpectralWeights,
};
use crate::pde::{PdeDataset, PdeDatasetMeta};
use crate::spectral::{BandId, BandLayout};
use crate::tensor::Tensor;
use crate::upcycle::UpcycleSpec;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FQMO";
pub const DATASET_MAGIC: &[u8; 4] = b"FQDS";
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn encode(magic: &[u8; 4], header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a file into its JSON header and payload after checking magic and
/// version.
fn decode<'a, H: for<'de> Deserialize<'de>>(
    magic: &[u8; 4],
    bytes: &'a [u8],
    what: &str,
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::Integrity(format!(
            "not a {what} file (expected magic {:?})",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "{what} format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Integrity(format!("{what} header length {len} exceeds the file size"))
        })?;
    let header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Integrity(format!("{what} header is not valid: {e}")))?;
    Ok((header, &bytes[end..]))
}

fn f64s_to_bytes(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_f64s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Dense,
    Freqmoe,
}

impl std::fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchitectureKind::Dense => "dense",
            ArchitectureKind::Freqmoe => "freqmoe",
        })
    }
}

/// Mixture-of-experts structure shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeMeta {
    pub layout: BandLayout,
    pub bands: Vec<BandId>,
    pub rank: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `f64` or `c128` (interleaved pairs of `f64`).
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ArchitectureKind,
    pub config: FnoConfig,
    pub moe: Option<MoeMeta>,
    pub upcycle: Option<UpcycleSpec>,
    pub seed: u64,
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dense(Fno),
    FreqMoe(FreqMoe),
}

impl Model {
    pub fn kind(&self) -> ArchitectureKind {
        match self {
            Model::Dense(_) => ArchitectureKind::Dense,
            Model::FreqMoe(_) => ArchitectureKind::Freqmoe,
        }
    }

    pub fn config(&self) -> &FnoConfig {
        match self {
            Model::Dense(m) => &m.config,
            Model::FreqMoe(m) => &m.config,
        }
    }

    fn params(&self) -> &dyn Parameters {
        match self {
            Model::Dense(m) => m,
            Model::FreqMoe(m) => m,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Parameters {
        match self {
            Model::Dense(m) => m,
            Model::FreqMoe(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub seed: u64,
    pub upcycle: Option<UpcycleSpec>,
    /// Free-form record of how the model was produced.
    pub provenance: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        ModelCheckpoint {
            model,
            seed,
            upcycle: None,
            provenance: serde_json::Value::Null,
        }
    }

    fn wrong_kind(&self, want: ArchitectureKind) -> Error {
        Error::Architecture(format!(
            "checkpoint architecture kind is '{}' but this command needs a '{want}' model",
            self.model.kind()
        ))
    }

    pub fn into_dense(self) -> Result<Fno> {
        match self.model {
            Model::Dense(m) => Ok(m),
            _ => Err(self.wrong_kind(ArchitectureKind::Dense)),
        }
    }

    pub fn into_moe(self) -> Result<FreqMoe> {
        match self.model {
            Model::FreqMoe(m) => Ok(m),
            _ => Err(self.wrong_kind(ArchitectureKind::Freqmoe)),
        }
    }
}

fn moe_meta(m: &FreqMoe) -> Result<MoeMeta> {
    let first = &m.layers[0].spectral;
    let e0 = first.experts.first();
    let meta = MoeMeta {
        layout: first.layout,
        bands: first.expert_bands(),
        rank: e0.map(|e| e.rank).unwrap_or(1),
        alpha: e0.map(|e| e.alpha).unwrap_or(1.0),
        temperature: first.gates.temperature,
        top_k: first.top_k,
    };
    for l in &m.layers {
        let k = &l.spectral;
        let uniform = k.layout == meta.layout
            && k.expert_bands() == meta.bands
            && k.gates.temperature == meta.temperature
            && k.top_k == meta.top_k
            && k.experts
                .iter()
                .all(|e| e.rank == meta.rank && e.alpha == meta.alpha);
        if !uniform {
            return Err(Error::Architecture(
                "checkpoints require every layer to share the expert structure".into(),
            ));
        }
    }
    Ok(meta)
}

/// A model of the given structure with all parameters zero.
fn skeleton(kind: ArchitectureKind, config: &FnoConfig, moe: Option<&MoeMeta>) -> Result<Model> {
    config.validate()?;
    let h = config.width;
    let pointwise = || Linear::zeros(h, h);
    let lift = Linear::zeros(config.in_channels, h);
    let project = Linear::zeros(h, config.out_channels);
    match (kind, moe) {
        (ArchitectureKind::Dense, _) => Ok(Model::Dense(Network {
            config: *config,
            lift,
            layers: (0..config.layers)
                .map(|_| FourierLayer {
                    spectral: SpectralWeights::zeros(h, h, config.modes),
                    pointwise: pointwise(),
                })
                .collect(),
            project,
        })),
        (ArchitectureKind::Freqmoe, Some(meta)) => {
            let mut layers = Vec::with_capacity(config.layers);
            for _ in 0..config.layers {
                let experts = meta
                    .bands
                    .iter()
                    .map(|&b| {
                        ExpertParams::zeros(b, h, meta.rank, meta.layout.chunk_modes, meta.alpha)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gates = GateParams::new(meta.bands.len(), h, meta.temperature)?;
                let base = SpectralWeights::zeros(h, h, meta.layout.chunk_modes);
                layers.push(FourierLayer {
                    spectral: FreqMoeLayer::new(base, experts, gates, meta.layout, meta.top_k)?,
                    pointwise: pointwise(),
                });
            }
            Ok(Model::FreqMoe(Network {
                config: *config,
                lift,
                layers,
                project,
            }))
        }
        (ArchitectureKind::Freqmoe, None) => Err(Error::Integrity(
            "freqmoe checkpoint without expert metadata".into(),
        )),
    }
}

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let moe = match &ckpt.model {
        Model::FreqMoe(m) => Some(moe_meta(m)?),
        Model::Dense(_) => None,
    };
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    ckpt.model.params().visit("", &mut |name, shape, p| {
        let offset = payload.len();
        let dtype = match p {
            ParamRef::Real(v) => {
                f64s_to_bytes(v.iter().copied(), &mut payload);
                "f64"
            }
            ParamRef::Complex(v) => {
                f64s_to_bytes(v.iter().flat_map(|c| [c.re, c.im]), &mut payload);
                "c128"
            }
        };
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: dtype.to_string(),
            offset,
            nbytes: payload.len() - offset,
            sha256: sha256_hex(&payload[offset..]),
        });
    });
    let header = CheckpointHeader {
        kind: ckpt.model.kind(),
        config: *ckpt.model.config(),
        moe,
        upcycle: ckpt.upcycle.clone(),
        seed: ckpt.seed,
        provenance: ckpt.provenance.clone(),
        tensors,
    };
    encode(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    Ok(decode::<CheckpointHeader>(CHECKPOINT_MAGIC, bytes, "checkpoint")?.0)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (header, payload): (CheckpointHeader, _) = decode(CHECKPOINT_MAGIC, bytes, "checkpoint")?;
    let mut model = skeleton(header.kind, &header.config, header.moe.as_ref()).map_err(|e| {
        Error::Integrity(format!("checkpoint header describes an invalid model: {e}"))
    })?;

    // The manifest must list exactly the model's tensors, in order, and tile
    // the payload.
    let mut expected = Vec::new();
    model.params().visit("", &mut |name, shape, p| {
        let (dtype, n) = match p {
            ParamRef::Real(v) => ("f64", v.len() * 8),
            ParamRef::Complex(v) => ("c128", v.len() * 16),
        };
        expected.push((name.to_string(), shape.to_vec(), dtype, n));
    });
    if expected.len() != header.tensors.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} tensors, the architecture has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (entry, (name, shape, dtype, n)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name
            || &entry.shape != shape
            || entry.dtype != *dtype
            || entry.nbytes != *n
            || entry.offset != offset
        {
            return Err(Error::Integrity(format!(
                "manifest entry '{}' disagrees with the architecture (expected '{name}' {shape:?} {dtype})",
                entry.name
            )));
        }
        offset += n;
    }
    if offset != payload.len() {
        return Err(Error::Integrity(format!(
            "payload is {} bytes, manifest covers {offset}",
            payload.len()
        )));
    }
    for entry in &header.tensors {
        let chunk = &payload[entry.offset..entry.offset + entry.nbytes];
        if sha256_hex(chunk) != entry.sha256 {
            return Err(Error::Integrity(format!(
                "checksum mismatch in tensor '{}'",
                entry.name
            )));
        }
    }

    let mut entries = header.tensors.iter();
    model.params_mut().visit_mut("", &mut |_, p| {
        let e = entries.next().expect("manifest length checked");
        let mut vals = bytes_to_f64s(&payload[e.offset..e.offset + e.nbytes]);
        match p {
            ParamMut::Real(v) => v
                .iter_mut()
                .for_each(|x| *x = vals.next().expect("size checked")),
            ParamMut::Complex(v) => v.iter_mut().for_each(|x| {
                let re = vals.next().expect("size checked");
                let im = vals.next().expect("size checked");
                *x = Complex64::new(re, im);
            }),
        }
    });
    Ok(ModelCheckpoint {
        model,
        seed: header.seed,
        upcycle: header.upcycle,
        provenance: header.provenance,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    meta: PdeDatasetMeta,
    samples: usize,
    sample_shape: Vec<usize>,
    sha256: String,
}

pub fn dataset_to_bytes(d: &PdeDataset) -> Result<Vec<u8>> {
    let shape = d
        .inputs
        .first()
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| Error::Data("cannot save an empty dataset".into()))?;
    let mut payload = Vec::new();
    for t in d.inputs.iter().chain(&d.targets) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "sample shape {:?} differs from {shape:?}",
                t.shape()
            )));
        }
        f64s_to_bytes(t.data().iter().copied(), &mut payload);
    }
    let header = DatasetHeader {
        meta: d.meta.clone(),
        samples: d.len(),
        sample_shape: shape,
        sha256: sha256_hex(&payload),
    };
    encode(DATASET_MAGIC, &header, &payload)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<PdeDataset> {
    let (header, payload): (DatasetHeader, _) = decode(DATASET_MAGIC, bytes, "dataset")?;
    let per: usize = header.sample_shape.iter().product();
    if payload.len() != 2 * header.samples * per * 8 {
        return Err(Error::Integrity(format!(
            "dataset payload is {} bytes, expected {} for {} samples of shape {:?}",
            payload.len(),
            2 * header.samples * per * 8,
            header.samples,
            header.sample_shape
        )));
    }
    if sha256_hex(payload) != header.sha256 {
        return Err(Error::Integrity("dataset checksum mismatch".into()));
    }
    let mut tensors = payload
        .chunks_exact(per * 8)
        .map(|c| Tensor::from_vec(&header.sample_shape, bytes_to_f64s(c).collect()))
        .collect::<Result<Vec<_>>>()?;
    let targets = tensors.split_off(header.samples);
    Ok(PdeDataset {
        meta: header.meta,
        inputs: tensors,
        targets,
    })
}

pub fn save_dataset(path: &Path, d: &PdeDataset) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(d)?)
}

pub fn load_dataset(path: &Path) -> Result<PdeDataset> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upcycle::upcycle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense() -> Fno {
        Fno::new(
            FnoConfig {
                width: 4,
                layers: 2,
                modes: (2, 2),
                grid_size: 16,
                ..FnoConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn moe() -> FreqMoe {
        let spec = UpcycleSpec {
            rank: 2,
            ..UpcycleSpec::full(BandLayout::new((2, 2), (2, 3)).unwrap(), 4)
        };
        let mut m = upcycle(&dense(), &spec).unwrap();
        // Non-trivial values everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.visit_mut("", &mut |_, p| match p {
            ParamMut::Real(v) => v.iter_mut().for_each(|x| *x = rng.gen()),
            ParamMut::Complex(v) => v
                .iter_mut()
                .for_each(|x| *x = Complex64::new(rng.gen(), rng.gen())),
        });
        m
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        for model in [Model::Dense(dense()), Model::FreqMoe(moe())] {
            let mut ckpt = ModelCheckpoint::new(model, 11);
            ckpt.provenance = serde_json::json!({"stage": "test"});
            let bytes = checkpoint_to_bytes(&ckpt).unwrap();
            let back = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let ckpt = ModelCheckpoint::new(Model::FreqMoe(moe()), 0);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(
            matches!(checkpoint_from_bytes(&flipped), Err(Error::Integrity(m)) if m.contains("checksum"))
        );
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Integrity(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&magic),
            Err(Error::Integrity(_))
        ));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(
            matches!(checkpoint_from_bytes(&version), Err(Error::Integrity(m)) if m.contains("version"))
        );
        let mut header = bytes;
        header[20] ^= 0xff;
        assert!(matches!(
            checkpoint_from_bytes(&header),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn kind_mismatch_is_explicit() {
        let ckpt = ModelCheckpoint::new(Model::Dense(dense()), 0);
        match ckpt.into_moe() {
            Err(Error::Architecture(m)) => assert!(m.contains("architecture kind")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t =
            || Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng.gen()).collect()).unwrap();
        let d = PdeDataset {
            meta: PdeDatasetMeta::heat(16, 3, 0),
            inputs: vec![t(), t(), t()],
            targets: vec![t(), t(), t()],
        };
        let bytes = dataset_to_bytes(&d).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        let n = bad.len() - 100;
        bad[n] ^= 1;
        assert!(matches!(dataset_from_bytes(&bad), Err(Error::Integrity(_))));
        assert!(matches!(
            dataset_from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fqmo");
        let a = ModelCheckpoint::new(Model::Dense(dense()), 1);
        save_checkpoint(&p, &a).unwrap();
        let b = ModelCheckpoint::new(Model::FreqMoe(moe()), 2);
        save_checkpoint(&p, &b).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), b);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
