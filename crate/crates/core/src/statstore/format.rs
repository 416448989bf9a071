//! SFHB encoding. Little-endian throughout:
//!
//! ```text
//! "SFHB"  u32 format_version
//! u32 layer_count, then per layer: u32 in  u32 out  u8 activation  u8 partition (0 extractor, 1 predictor)
//! u32 K  u32 N_Q
//! u8 task (0 classification, 1 regression)  u32 n_classes  u32 site_id_len  site_id bytes
//! per layer: in*out f64 weights (row-major), out f64 biases
//! K*N_Q f64 weights pi, then means, then variances (row k, column feature)
//! u64 FNV-1a checksum of every preceding byte
//! u64 creation timestamp (unix seconds)
//! ```

use ndarray::{Array1, Array2};

use super::{BundleMeta, Result, StatsBundle, StoreError};
use crate::gmm::GmmParams;
use crate::nn::{Activation, Dense, Partition, SplitModel, TaskKind, TaskSpec};

pub const SFHB_MAGIC: &[u8; 4] = b"SFHB";
pub const SFHB_VERSION: u32 = 1;

const TRAILER: usize = 16;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| StoreError::InvariantViolation(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_descriptor(buf: &mut Vec<u8>, model: &SplitModel) -> Result<()> {
    put_u32(buf, model.repr.len() + model.pred.len())?;
    for (partition, layer) in model.layers() {
        put_u32(buf, layer.input_dim())?;
        put_u32(buf, layer.output_dim())?;
        buf.push(layer.activation.tag());
        buf.push(partition.tag());
    }
    Ok(())
}

fn put_task(buf: &mut Vec<u8>, task: &TaskSpec) -> Result<()> {
    let (tag, n_classes) = match task.kind {
        TaskKind::Classification { n_classes } => (0u8, n_classes),
        TaskKind::Regression => (1u8, 0),
    };
    buf.push(tag);
    put_u32(buf, n_classes)
}

fn put_weights(buf: &mut Vec<u8>, model: &SplitModel) {
    for (_, layer) in model.layers() {
        // iter() walks logical row-major order regardless of memory layout
        put_f64s(buf, layer.weight.iter());
        put_f64s(buf, layer.bias.iter());
    }
}

pub fn serialize(bundle: &StatsBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let model = &bundle.weights;
    let mut buf = Vec::with_capacity(64 + 8 * (model.n_params() + 3 * bundle.stats.n_features() * bundle.meta.k));
    buf.extend_from_slice(SFHB_MAGIC);
    buf.extend_from_slice(&bundle.meta.format_version.to_le_bytes());

    put_descriptor(&mut buf, model)?;
    put_u32(&mut buf, bundle.meta.k)?;
    put_u32(&mut buf, bundle.meta.n_features)?;

    put_task(&mut buf, &bundle.meta.task)?;
    put_u32(&mut buf, bundle.meta.site_id.len())?;
    buf.extend_from_slice(bundle.meta.site_id.as_bytes());

    put_weights(&mut buf, model);
    let (w, m, v) = bundle.stats.to_arrays();
    for arr in [&w, &m, &v] {
        put_f64s(&mut buf, arr.iter());
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf.extend_from_slice(&bundle.meta.created_unix.to_le_bytes());
    Ok(buf)
}

/// Byte range of the three statistics arrays inside a serialised bundle.
pub fn stats_region(bytes: &[u8]) -> Result<std::ops::Range<usize>> {
    let bundle = deserialize(bytes)?;
    let len = 3 * 8 * bundle.meta.k * bundle.meta.n_features;
    let end = bytes.len() - TRAILER;
    Ok(end - len..end)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(StoreError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(StoreError::Truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

type LayerShape = (usize, usize, Activation, Partition);

fn invariant(m: String) -> StoreError {
    StoreError::InvariantViolation(m)
}

fn read_descriptor(r: &mut Reader) -> Result<Vec<LayerShape>> {
    let n_layers = r.usize()?;
    let mut shapes = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let input = r.usize()?;
        let output = r.usize()?;
        let act = r.u8()?;
        let activation = Activation::from_tag(act).ok_or_else(|| invariant(format!("activation tag {act}")))?;
        let partition = match r.u8()? {
            0 => Partition::Repr,
            1 => Partition::Pred,
            t => return Err(invariant(format!("partition tag {t}"))),
        };
        shapes.push((input, output, activation, partition));
    }
    Ok(shapes)
}

fn read_task(r: &mut Reader) -> Result<TaskSpec> {
    match r.u8()? {
        0 => Ok(TaskSpec::classification(r.usize()?)),
        1 => {
            r.usize()?;
            Ok(TaskSpec::regression())
        }
        t => Err(invariant(format!("task tag {t}"))),
    }
}

fn read_weights(r: &mut Reader, shapes: &[LayerShape]) -> Result<SplitModel> {
    let mut repr = Vec::new();
    let mut pred = Vec::new();
    for &(input, output, activation, partition) in shapes {
        let cells = input.checked_mul(output).ok_or(StoreError::Truncated)?;
        let weight = Array2::from_shape_vec((input, output), r.f64s(cells)?).map_err(|e| invariant(e.to_string()))?;
        let bias = Array1::from(r.f64s(output)?);
        let layer = Dense { weight, bias, activation };
        match partition {
            Partition::Repr if pred.is_empty() => repr.push(layer),
            Partition::Repr => return Err(invariant("extractor layer after predictor layer".into())),
            Partition::Pred => pred.push(layer),
        }
    }
    SplitModel::new(repr, pred).map_err(|e| invariant(e.to_string()))
}

/// Splits off and verifies the trailing checksum, returning the body.
fn checked_body<'a>(bytes: &'a [u8], trailer: usize, magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 8 + trailer {
        return Err(if bytes.len() >= 4 && &bytes[..4] != magic {
            StoreError::BadMagic
        } else {
            StoreError::Truncated
        });
    }
    let body_end = bytes.len() - trailer;
    let stored = u64::from_le_bytes(bytes[body_end..body_end + 8].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(StoreError::ChecksumMismatch { stored, computed });
    }
    Ok(&bytes[..body_end])
}

/// Decodes and fully validates a bundle. The checksum is verified before
/// anything else is parsed.
pub fn deserialize(bytes: &[u8]) -> Result<StatsBundle> {
    let body = checked_body(bytes, TRAILER, SFHB_MAGIC)?;
    let body_end = body.len();
    let created_unix = u64::from_le_bytes(bytes[body_end + 8..].try_into().expect("8 bytes"));

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != SFHB_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let format_version = r.u32()?;
    if format_version != SFHB_VERSION {
        return Err(StoreError::UnsupportedVersion(format_version));
    }
    let shapes = read_descriptor(&mut r)?;
    let k = r.usize()?;
    let n_features = r.usize()?;
    let task = read_task(&mut r)?;
    let id_len = r.usize()?;
    let site_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| invariant("site id is not UTF-8".into()))?;

    let weights = read_weights(&mut r, &shapes)?;

    let cells = k.checked_mul(n_features).ok_or(StoreError::Truncated)?;
    let mut arrays = Vec::with_capacity(3);
    for _ in 0..3 {
        arrays.push(Array2::from_shape_vec((k, n_features), r.f64s(cells)?).map_err(|e| invariant(e.to_string()))?);
    }
    if r.pos != body_end {
        return Err(invariant(format!("{} unexpected bytes before the checksum", body_end - r.pos)));
    }
    let stats = GmmParams::from_arrays(arrays[0].view(), arrays[1].view(), arrays[2].view())
        .map_err(|e| invariant(e.to_string()))?;

    let bundle =
        StatsBundle { weights, stats, meta: BundleMeta { format_version, k, n_features, task, created_unix, site_id } };
    bundle.validate()?;
    Ok(bundle)
}

/// Weights-only checkpoint: "SFHW", u32 version, layer descriptors, task,
/// weights, then the u64 checksum. No statistics, no timestamp.
pub const SFHW_MAGIC: &[u8; 4] = b"SFHW";

pub fn serialize_checkpoint(model: &SplitModel, task: &TaskSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(32 + 8 * model.n_params());
    buf.extend_from_slice(SFHW_MAGIC);
    buf.extend_from_slice(&SFHB_VERSION.to_le_bytes());
    put_descriptor(&mut buf, model)?;
    put_task(&mut buf, task)?;
    put_weights(&mut buf, model);
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok(buf)
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<(SplitModel, TaskSpec)> {
    let body = checked_body(bytes, 8, SFHW_MAGIC)?;
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != SFHW_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = r.u32()?;
    if version != SFHB_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let shapes = read_descriptor(&mut r)?;
    let task = read_task(&mut r)?;
    let model = read_weights(&mut r, &shapes)?;
    if r.pos != body.len() {
        return Err(invariant(format!("{} unexpected bytes before the checksum", body.len() - r.pos)));
    }
    if model.output_dim() != task.output_dim() {
        return Err(invariant(format!("{} outputs for task with {}", model.output_dim(), task.output_dim())));
    }
    Ok((model, task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::Gmm1D;
    use crate::nn::Architecture;

    fn bundle() -> StatsBundle {
        let model = SplitModel::mlp(&Architecture { input_dim: 6, hidden: vec![5], feature_dim: 3, output_dim: 4 }, 9);
        let stats = GmmParams::new(vec![
            Gmm1D::new(vec![0.4, 0.6], vec![-1.0, 2.0], vec![0.5, 1.5]).unwrap(),
            Gmm1D::new(vec![0.5, 0.5], vec![0.0, 0.1], vec![1.0, 1.0]).unwrap(),
            Gmm1D::new(vec![0.9, 0.1], vec![3.0, 7.0], vec![0.2, 4.0]).unwrap(),
        ])
        .unwrap();
        StatsBundle::new(model, stats, TaskSpec::classification(4), "site-1").unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bundle();
        let bytes = serialize(&b).unwrap();
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(serialize(&back).unwrap(), bytes);
    }

    #[test]
    fn timestamp_only_differs_in_trailer() {
        let a = bundle();
        let mut b = a.clone();
        b.meta.created_unix += 1000;
        let (x, y) = (serialize(&a).unwrap(), serialize(&b).unwrap());
        assert_eq!(x[..x.len() - 8], y[..y.len() - 8]);
        assert_ne!(x, y);
    }

    #[test]
    fn flipped_bytes_fail_checksum() {
        let bytes = serialize(&bundle()).unwrap();
        for i in 0..bytes.len() - 8 {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(matches!(deserialize(&bad), Err(StoreError::ChecksumMismatch { .. })), "byte {i} not caught");
        }
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let sum = fnv1a64(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        body.extend_from_slice(&0u64.to_le_bytes());
        body
    }

    #[test]
    fn header_errors() {
        let bytes = serialize(&bundle()).unwrap();
        let body = bytes[..bytes.len() - 16].to_vec();

        let mut wrong_magic = body.clone();
        wrong_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(deserialize(&reseal(wrong_magic)), Err(StoreError::BadMagic)));

        let mut wrong_version = body.clone();
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(deserialize(&reseal(wrong_version)), Err(StoreError::UnsupportedVersion(7))));

        assert!(matches!(deserialize(&bytes[..10]), Err(StoreError::Truncated)));
        assert!(matches!(deserialize(b"PK\x03\x04 a zip file"), Err(StoreError::BadMagic)));
        assert!(matches!(
            deserialize(b"PK\x03\x04 this is a much longer zip file"),
            Err(StoreError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn unsorted_or_invalid_stats_are_rejected() {
        let bytes = serialize(&bundle()).unwrap();
        let region = stats_region(&bytes).unwrap();
        let body_end = bytes.len() - 16;
        // first feature's two means live at region.start + 48 (k=0) and + 72 (k=1)
        let mut swapped = bytes[..body_end].to_vec();
        let mean0 = region.start + 3 * 2 * 8;
        let mean1 = mean0 + 3 * 8;
        let a: [u8; 8] = swapped[mean0..mean0 + 8].try_into().unwrap();
        let b: [u8; 8] = swapped[mean1..mean1 + 8].try_into().unwrap();
        swapped[mean0..mean0 + 8].copy_from_slice(&b);
        swapped[mean1..mean1 + 8].copy_from_slice(&a);
        assert!(matches!(deserialize(&reseal(swapped)), Err(StoreError::InvariantViolation(_))));

        let mut neg_var = bytes[..body_end].to_vec();
        let var0 = region.start + 2 * 3 * 2 * 8;
        neg_var[var0..var0 + 8].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(deserialize(&reseal(neg_var)), Err(StoreError::InvariantViolation(_))));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = bundle();
        let bytes = serialize_checkpoint(&b.weights, &b.meta.task).unwrap();
        let (model, task) = deserialize_checkpoint(&bytes).unwrap();
        assert_eq!(model, b.weights);
        assert_eq!(task, b.meta.task);
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(deserialize_checkpoint(&bad), Err(StoreError::ChecksumMismatch { .. })));
        assert!(matches!(deserialize_checkpoint(&serialize(&b).unwrap()), Err(StoreError::ChecksumMismatch { .. })));
    }
}
