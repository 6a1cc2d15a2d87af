use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use gatecrush_core::data::{parse_cifar10, Dataset, Normalization};
use gatecrush_core::Real;

use crate::error::{io_err, Error, Result};

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => std::slice::from_ref(&TEST_FILE),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn is_available(dir: &Path) -> bool {
    TRAIN_FILES.iter().chain([&TEST_FILE]).all(|f| dir.join(f).is_file())
}

/// Loads a split from the binary distribution in `dir`. Files listed in
/// `checksums` must match their SHA-256 digest.
pub fn load_cifar10<T: Real>(dir: &Path, split: Split, norm: &Normalization, checksums: &BTreeMap<String, String>) -> Result<Dataset<T>> {
    let mut out: Option<Dataset<T>> = None;
    for name in split.files() {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                what: "CIFAR-10 batch file",
                path,
            });
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if let Some(want) = checksums.get(*name) {
            if !sha256_hex(&bytes).eq_ignore_ascii_case(want) {
                return Err(Error::Checksum(path));
            }
        }
        let part = parse_cifar10(&bytes, norm).map_err(|e| crate::error::format_err(&path, e.to_string()))?;
        match &mut out {
            None => out = Some(part),
            Some(d) => d.append(&part)?,
        }
    }
    Ok(out.expect("every split has at least one file"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gatecrush_core::data::{encode_cifar10_record, CIFAR_RECORD};

    fn fixture(dir: &Path, name: &str, n: usize) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(n * CIFAR_RECORD);
        for i in 0..n {
            let pixels: Vec<u8> = (0..3072).map(|p| ((p * 7 + i * 13) % 256) as u8).collect();
            bytes.extend(encode_cifar10_record((i % 10) as u8, &pixels).unwrap());
        }
        std::fs::write(dir.join(name), &bytes).unwrap();
        bytes
    }

    #[test]
    fn loads_fixture_test_split() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), TEST_FILE, 3);
        let d: Dataset<f64> = load_cifar10(dir.path(), Split::Test, &Normalization::IDENTITY, &BTreeMap::new()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert_eq!(d.image(1)[0], 13.0 / 255.0);
        assert_eq!(d.image(0)[1024], (1024 * 7 % 256) as f64 / 255.0);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10::<f32>(dir.path(), Split::Train, &Normalization::CIFAR10, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn checksum_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = fixture(dir.path(), TEST_FILE, 2);
        let good = BTreeMap::from([(TEST_FILE.to_string(), sha256_hex(&bytes))]);
        assert!(load_cifar10::<f32>(dir.path(), Split::Test, &Normalization::CIFAR10, &good).is_ok());
        let bad = BTreeMap::from([(TEST_FILE.to_string(), "00".repeat(32))]);
        assert!(matches!(
            load_cifar10::<f32>(dir.path(), Split::Test, &Normalization::CIFAR10, &bad),
            Err(Error::Checksum(_))
        ));
        std::fs::write(dir.path().join(TEST_FILE), &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_cifar10::<f32>(dir.path(), Split::Test, &Normalization::CIFAR10, &BTreeMap::new()).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
