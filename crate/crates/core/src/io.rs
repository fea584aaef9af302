//! On-disk formats.
//!
//! Epoch file (little endian):
//!
//! ```text
//! "NEUR0EPO"  u16 version  u32 n_epochs  u16 n_channels  u32 n_samples  f32 fs
//! per epoch:  u8 label  u8 condition  u32 trial_id  f32[n_channels * n_samples]
//! ```
//!
//! Samples are channel-major. Model file:
//!
//! ```text
//! "NEUR0MDL"  u16 version  u8 kind  u32 meta_len  meta (UTF-8)  payload
//! ```
//!
//! The payload is a sequence of `u32` counts and `f64` values whose layout
//! depends on `kind`; see [`encode_ovr`] and [`encode_cnn`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::cnn::{BnRunning, CnnArch, CnnModel, CnnParams};
use crate::csp::CspModel;
use crate::domain::{ChannelLayout, Condition, Dataset, Epoch, ProtocolSpec, Provenance, TextureClass};
use crate::error::{Error, Result};
use crate::lda::LdaModel;
use crate::ovr::{OvrClassifier, OvrPair};

pub const EPOCH_MAGIC: &[u8; 8] = b"NEUR0EPO";
pub const MODEL_MAGIC: &[u8; 8] = b"NEUR0MDL";
pub const FORMAT_VERSION: u16 = 1;
const EPOCH_HEADER_LEN: usize = 8 + 2 + 4 + 2 + 4 + 4;

pub const MODEL_KIND_OVR: u8 = 1;
pub const MODEL_KIND_CNN: u8 = 2;

/// Serialise epochs that share one shape and sampling rate.
pub fn encode_epochs(epochs: &[Epoch]) -> Result<Vec<u8>> {
    let (c, t, fs) = match epochs.first() {
        Some(e) => (e.n_channels(), e.n_samples(), e.fs),
        None => (0, 0, 0.0),
    };
    if c > u16::MAX as usize || t > u32::MAX as usize || epochs.len() > u32::MAX as usize {
        return Err(Error::Format("dataset too large for the epoch format".into()));
    }
    let mut out = Vec::with_capacity(EPOCH_HEADER_LEN + epochs.len() * (6 + 4 * c * t));
    out.extend_from_slice(EPOCH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(epochs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(fs as f32).to_le_bytes());
    for e in epochs {
        if e.data.dim() != (c, t) || e.fs != fs {
            return Err(Error::shape(
                format!("{c}x{t} at {fs} Hz"),
                format!("{}x{} at {} Hz (trial {})", e.n_channels(), e.n_samples(), e.fs, e.trial_id),
            ));
        }
        out.push(e.label.code());
        out.push(e.condition.code());
        out.extend_from_slice(&e.trial_id.to_le_bytes());
        for v in e.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_epochs(bytes: &[u8]) -> Result<Vec<Epoch>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(EPOCH_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u16()? as usize;
    let t = r.u32()? as usize;
    let fs = r.f32()? as f64;
    let per_epoch = 6usize
        .checked_add(c.checked_mul(t).and_then(|v| v.checked_mul(4)).unwrap_or(usize::MAX))
        .unwrap_or(usize::MAX);
    if n.checked_mul(per_epoch).map_or(true, |need| need != bytes.len() - EPOCH_HEADER_LEN) {
        return Err(Error::Format(format!(
            "header declares {n} epochs of {c}x{t}, but the body has {} bytes",
            bytes.len() - EPOCH_HEADER_LEN
        )));
    }
    let mut epochs = Vec::with_capacity(n);
    for _ in 0..n {
        let label = TextureClass::from_code(r.u8()?)?;
        let condition = Condition::from_code(r.u8()?)?;
        let trial_id = r.u32()?;
        let mut values = Vec::with_capacity(c * t);
        for _ in 0..c * t {
            values.push(r.f32()? as f64);
        }
        let data = Array2::from_shape_vec((c, t), values).expect("length checked");
        epochs.push(Epoch {
            data,
            fs,
            label,
            condition,
            trial_id,
        });
    }
    r.finish()?;
    Ok(epochs)
}

pub fn write_epochs(path: impl AsRef<Path>, epochs: &[Epoch]) -> Result<()> {
    let bytes = encode_epochs(epochs)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<Vec<Epoch>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_epochs(&bytes)
}

/// Load an epoch file as a dataset. The file carries no montage, so a
/// standard layout of the right size is assumed.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let epochs = read_epochs(path.as_ref())?;
    let c = epochs.first().map_or(0, |e| e.n_channels());
    let fs = epochs.first().map_or(ProtocolSpec::default().sampling_rate_hz, |e| e.fs);
    Ok(Dataset {
        epochs,
        layout: ChannelLayout::standard(c.min(64))
            .ok()
            .filter(|l| l.n_channels() == c)
            .unwrap_or_else(|| ChannelLayout {
                channel_names: (0..c).map(|i| format!("Ch{}", i + 1)).collect(),
                ..ChannelLayout::default()
            }),
        protocol: ProtocolSpec {
            sampling_rate_hz: fs,
            ..ProtocolSpec::default()
        },
        provenance: Provenance {
            description: format!("read from {}", path.as_ref().display()),
            seed: None,
        },
    })
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn count(&mut self, n: usize) {
        self.0.extend_from_slice(&(n as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn values<'a>(&mut self, vs: impl ExactSizeIterator<Item = &'a f64>) {
        self.count(vs.len());
        for v in vs {
            self.f64(*v);
        }
    }
}

impl Reader<'_> {
    fn values(&mut self, expect: Option<usize>) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if let Some(e) = expect {
            if n != e {
                return Err(Error::Format(format!("expected {e} values, found {n}")));
            }
        }
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Format(format!("count {n} exceeds remaining payload")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn model_bytes(kind: u8, meta: &str, payload: Writer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&payload.0);
    out
}

fn open_model<'a>(bytes: &'a [u8], kind: u8) -> Result<(Reader<'a>, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    let got = r.u8()?;
    if got != kind {
        return Err(Error::Format(format!("model kind {got}, expected {kind}")));
    }
    let len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
        .to_string();
    Ok((r, meta))
}

/// Payload: `n_channels`, `n_select`, then per class: `reg_lambda`,
/// projection (row-major), eigenvalues, `gamma`, LDA weights, bias.
pub fn encode_ovr(clf: &OvrClassifier, meta: &str) -> Vec<u8> {
    let mut w = Writer::default();
    let n = clf.n_channels();
    w.count(n);
    w.count(clf.pairs[0].csp.n_select);
    for pair in &clf.pairs {
        w.f64(pair.csp.reg_lambda);
        w.values(pair.csp.projection.iter());
        w.values(pair.csp.eigenvalues.iter());
        w.f64(pair.lda.shrinkage_gamma);
        w.values(pair.lda.weights.iter());
        w.f64(pair.lda.bias);
    }
    model_bytes(MODEL_KIND_OVR, meta, w)
}

pub fn decode_ovr(bytes: &[u8]) -> Result<(OvrClassifier, String)> {
    let (mut r, meta) = open_model(bytes, MODEL_KIND_OVR)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    if k == 0 || 2 * k > n {
        return Err(Error::Format(format!("n_select {k} invalid for {n} channels")));
    }
    let mut pairs = Vec::with_capacity(4);
    for _ in TextureClass::ALL {
        let reg_lambda = r.f64()?;
        let projection = Array2::from_shape_vec((n, n), r.values(Some(n * n))?).expect("sized");
        let eigenvalues = Array1::from(r.values(Some(n))?);
        let shrinkage_gamma = r.f64()?;
        let weights = Array1::from(r.values(Some(2 * k))?);
        let bias = r.f64()?;
        pairs.push(OvrPair {
            csp: CspModel {
                projection,
                eigenvalues,
                n_select: k,
                reg_lambda,
            },
            lda: LdaModel {
                weights,
                bias,
                shrinkage_gamma,
            },
        });
    }
    r.finish()?;
    Ok((OvrClassifier { pairs }, meta))
}

fn arch_fields(a: &CnnArch) -> [usize; 11] {
    [
        a.n_channels,
        a.n_samples,
        a.f1,
        a.depth_mult,
        a.f2,
        a.temporal_kernel,
        a.separable_kernel,
        a.pool1,
        a.pool2,
        a.n_classes,
        0,
    ]
}

/// Payload: 10 architecture counts, dropout, then every parameter group
/// in [`crate::cnn::PARAM_GROUPS`] order, then running mean/var of the
/// three batch norms.
pub fn encode_cnn(model: &CnnModel, meta: &str) -> Vec<u8> {
    let mut w = Writer::default();
    for v in &arch_fields(&model.arch)[..10] {
        w.count(*v);
    }
    w.f64(model.arch.dropout_p);
    for g in model.params.groups() {
        w.values(g.iter());
    }
    for bn in [&model.bn1, &model.bn2, &model.bn3] {
        w.values(bn.mean.iter());
        w.values(bn.var.iter());
    }
    model_bytes(MODEL_KIND_CNN, meta, w)
}

pub fn decode_cnn(bytes: &[u8]) -> Result<(CnnModel, String)> {
    let (mut r, meta) = open_model(bytes, MODEL_KIND_CNN)?;
    let mut f = [0usize; 10];
    for v in f.iter_mut() {
        *v = r.u32()? as usize;
    }
    let arch = CnnArch {
        n_channels: f[0],
        n_samples: f[1],
        f1: f[2],
        depth_mult: f[3],
        f2: f[4],
        temporal_kernel: f[5],
        separable_kernel: f[6],
        pool1: f[7],
        pool2: f[8],
        n_classes: f[9],
        dropout_p: r.f64()?,
    };
    arch.validate().map_err(|e| Error::Format(format!("stored architecture: {e}")))?;
    let mut params = CnnParams::zeros(&arch);
    for g in params.groups_mut() {
        let n = g.len();
        *g = r.values(Some(n))?;
    }
    let mut running = Vec::new();
    for n in [arch.f1, arch.n_depth(), arch.f2] {
        running.push(BnRunning {
            mean: r.values(Some(n))?,
            var: r.values(Some(n))?,
        });
    }
    r.finish()?;
    let bn3 = running.pop().expect("three");
    let bn2 = running.pop().expect("three");
    let bn1 = running.pop().expect("three");
    Ok((
        CnnModel {
            arch,
            params,
            bn1,
            bn2,
            bn3,
        },
        meta,
    ))
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn epoch(label: TextureClass, id: u32) -> Epoch {
        Epoch {
            data: Array2::from_shape_fn((2, 3), |(c, t)| (c * 3 + t) as f64 * 0.5 - 1.0),
            fs: 125.0,
            label,
            condition: Condition::TouchImagery,
            trial_id: id,
        }
    }

    #[test]
    fn golden_epoch_bytes() {
        let bytes = encode_epochs(&[epoch(TextureClass::Paper, 7)]).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"NEUR0EPO");
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&[1, 0, 0, 0]);
        want.extend_from_slice(&[2, 0]);
        want.extend_from_slice(&[3, 0, 0, 0]);
        want.extend_from_slice(&125.0f32.to_le_bytes());
        want.extend_from_slice(&[2, 1, 7, 0, 0, 0]);
        for v in [-1.0f32, -0.5, 0.0, 0.5, 1.0, 1.5] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, want);
        let back = decode_epochs(&bytes).unwrap();
        assert_eq!(back, vec![epoch(TextureClass::Paper, 7)]);
    }

    #[test]
    fn malformed_epoch_files() {
        let bytes = encode_epochs(&[epoch(TextureClass::Fur, 1), epoch(TextureClass::Glass, 2)]).unwrap();
        assert!(matches!(decode_epochs(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_epochs(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[EPOCH_HEADER_LEN] = 9;
        assert!(matches!(decode_epochs(&bad), Err(Error::ClassCode(9))));
        assert!(decode_epochs(&encode_epochs(&[]).unwrap()).unwrap().is_empty());
        let mut other = epoch(TextureClass::Fur, 3);
        other.fs = 1000.0;
        assert!(encode_epochs(&[epoch(TextureClass::Fur, 1), other]).is_err());
    }

    #[test]
    fn file_round_trip_and_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.epo");
        write_epochs(&path, &[epoch(TextureClass::Fabric, 0)]).unwrap();
        let ds = read_dataset(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.layout.n_channels(), 2);
        let err = read_epochs(dir.path().join("missing.epo")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("missing.epo"));
    }

    #[test]
    fn cnn_model_round_trip() {
        let arch = CnnArch {
            n_channels: 3,
            n_samples: 32,
            f1: 2,
            depth_mult: 2,
            f2: 4,
            temporal_kernel: 5,
            separable_kernel: 4,
            pool1: 2,
            pool2: 2,
            dropout_p: 0.25,
            n_classes: 4,
        };
        let model = CnnModel::new(arch, &mut rng_for(0, "test", 0)).unwrap();
        let bytes = encode_cnn(&model, "meta");
        let (back, meta) = decode_cnn(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta, "meta");
        assert!(decode_ovr(&bytes).is_err());
        assert!(decode_cnn(&bytes[..bytes.len() - 3]).is_err());
    }
}
