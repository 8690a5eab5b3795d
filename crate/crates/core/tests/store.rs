use std::collections::BTreeMap;

use alps_core::store::*;
use alps_core::*;
use serde_json::Map;

fn sample() -> BTreeMap<String, Tensor> {
    let mut m = BTreeMap::new();
    m.insert("b.weight".to_string(), Tensor::from_f32(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    m.insert("a.bias".to_string(), Tensor::from_f64(vec![3], vec![0.5, -0.25, 1e-300]).unwrap());
    m.insert("c".to_string(), Tensor::from_f32(vec![1], vec![7.0]).unwrap());
    m
}

fn bytes_of(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let manifest = CheckpointManifest::describe(Map::new(), tensors);
    encode(&manifest, tensors).unwrap()
}

#[test]
fn roundtrip_is_bit_exact() {
    let tensors = sample();
    let ckpt = Checkpoint::from_bytes(&bytes_of(&tensors)).unwrap();
    assert_eq!(ckpt.tensors().unwrap(), tensors);
}

#[test]
fn encoding_is_deterministic() {
    assert_eq!(bytes_of(&sample()), bytes_of(&sample()));
}

#[test]
fn empty_container_is_valid() {
    let bytes = bytes_of(&BTreeMap::new());
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.names().count(), 0);
}

#[test]
fn f32_matrix_occupies_24_bytes() {
    let tensors = sample();
    let manifest = CheckpointManifest::describe(Map::new(), &tensors);
    let entry = &manifest.tensors["b.weight"];
    assert_eq!(entry.nbytes, 24);
    // a.bias (24 bytes) sorts first, so b.weight starts at 24.
    assert_eq!(entry.offset, 24);
    // c follows b.weight at 48.
    assert_eq!(manifest.tensors["c"].offset, 48);
}

#[test]
fn offsets_and_blob_are_aligned() {
    let bytes = bytes_of(&sample());
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!((16 + header_len) % 8, 0);
    assert_eq!(bytes.len() % 8, 0);
    // padding after "c" is zero
    assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == 0));
}

#[test]
fn bad_magic() {
    let mut bytes = bytes_of(&sample());
    bytes[0..4].copy_from_slice(b"XXXX");
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn bad_version() {
    let mut bytes = bytes_of(&sample());
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(2))));
}

fn forge(header: &str, blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(blob);
    out
}

#[test]
fn oversized_tensor_is_corrupt() {
    let header = r#"{"meta":{},"tensors":{"x":{"dtype":"f64","shape":[125],"offset":0,"nbytes":1000}}}"#;
    let bytes = forge(header, &[0u8; 8]);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn overlapping_tensors_are_corrupt() {
    let header = r#"{"meta":{},"tensors":{"x":{"dtype":"f64","shape":[2],"offset":0,"nbytes":16},"y":{"dtype":"f64","shape":[1],"offset":8,"nbytes":8}}}"#;
    let bytes = forge(header, &[0u8; 16]);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn truncated_payload_is_corrupt() {
    let mut bytes = bytes_of(&sample());
    bytes.truncate(bytes.len() - 16);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn nan_rejected_on_read() {
    let header = r#"{"meta":{},"tensors":{"x":{"dtype":"f64","shape":[1],"offset":0,"nbytes":8}}}"#;
    let bytes = forge(header, &f64::NAN.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Value(_))));
}

#[test]
fn manifest_mismatch_rejected_on_write() {
    let tensors = sample();
    let mut manifest = CheckpointManifest::describe(Map::new(), &tensors);
    manifest.tensors.get_mut("c").unwrap().dtype = DType::F64;
    assert!(matches!(encode(&manifest, &tensors), Err(Error::Value(_))));
    manifest.tensors.get_mut("c").unwrap().dtype = DType::F32;
    manifest.tensors.get_mut("c").unwrap().shape = vec![1, 1];
    assert!(matches!(encode(&manifest, &tensors), Err(Error::Value(_))));
}

#[test]
fn geometry_meta_requires_attention_tensors() {
    let geometry = ModelGeometry::new(1, 4, 2, 1).unwrap();
    let tensors = sample();
    let manifest = CheckpointManifest::with_geometry(&geometry, &tensors);
    assert!(matches!(encode(&manifest, &tensors), Err(Error::MissingTensor(_))));
}
