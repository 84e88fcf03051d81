use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, NormStats};
use crate::error::{Error, Result};

const PLANE: usize = 32 * 32;
const PIXELS: usize = 3 * PLANE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// `<label><3072 pixels>`
    Cifar10,
    /// `<coarse><fine><3072 pixels>`; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        }
    }
}

/// Parses a binary CIFAR batch. Rejects lengths that are not a whole number
/// of records, reporting the remainder.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, stats: NormStats) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Cifar(format!("{}: empty file", variant.tag())));
    }
    if bytes.len() % rec != 0 {
        return Err(Error::Cifar(format!(
            "{}: length {} is not a multiple of the {rec}-byte record (remainder {})",
            variant.tag(),
            bytes.len(),
            bytes.len() % rec
        )));
    }
    let classes = variant.classes();
    let mut images = Vec::with_capacity(bytes.len() / rec);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (coarse_label, label, px) = match variant {
            CifarVariant::Cifar10 => (None, r[0] as usize, &r[1..]),
            CifarVariant::Cifar100 => (Some(r[0]), r[1] as usize, &r[2..]),
        };
        if label >= classes {
            return Err(Error::Cifar(format!("{}: record {i} has label {label} >= {classes}", variant.tag())));
        }
        if coarse_label.is_some_and(|c| c >= 20) {
            return Err(Error::Cifar(format!("{}: record {i} has coarse label {} >= 20", variant.tag(), r[0])));
        }
        images.push(LabeledImage {
            pixels: px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label,
            coarse_label,
            source: format!("{}:{i}", variant.tag()),
        });
    }
    Dataset::new(images, classes, [3, 32, 32], stats)
}

pub fn parse_cifar(path: &Path, variant: CifarVariant, stats: NormStats) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Cifar(format!("{}: {e}", path.display())))?;
    parse_cifar_bytes(&bytes, variant, stats)
}

/// Inverse of [`parse_cifar_bytes`]. Pixels are quantized as `round(v·255)`.
pub fn serialize_cifar(dataset: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if dataset.shape != [3, 32, 32] {
        return Err(Error::Cifar(format!("cannot serialize images of shape {:?}", dataset.shape)));
    }
    let mut out = Vec::with_capacity(dataset.len() * variant.record_len());
    for (i, img) in dataset.images.iter().enumerate() {
        if img.label >= variant.classes() {
            return Err(Error::Cifar(format!("image {i} label {} does not fit {}", img.label, variant.tag())));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(img.coarse_label.unwrap_or(0));
        }
        out.push(img.label as u8);
        out.extend(img.pixels.iter().map(|&v| super::quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar(path: &Path, dataset: &Dataset, variant: CifarVariant) -> Result<()> {
    std::fs::write(path, serialize_cifar(dataset, variant)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(variant: CifarVariant, n: usize) -> Vec<u8> {
        let mut v = Vec::new();
        for i in 0..n {
            if variant == CifarVariant::Cifar100 {
                v.push((i % 20) as u8);
            }
            v.push((i * 7 % variant.classes()) as u8);
            v.extend((0..PIXELS).map(|p| ((p * 31 + i * 17) % 256) as u8));
        }
        v
    }

    #[test]
    fn roundtrip_both_variants() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = fixture(variant, 3);
            let d = parse_cifar_bytes(&bytes, variant, NormStats::identity(3)).unwrap();
            assert_eq!(d.len(), 3);
            assert_eq!(serialize_cifar(&d, variant).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_bad_length_with_remainder() {
        let mut bytes = fixture(CifarVariant::Cifar10, 2);
        bytes.extend([1, 2, 3]);
        let e = parse_cifar_bytes(&bytes, CifarVariant::Cifar10, NormStats::identity(3)).unwrap_err();
        assert!(e.to_string().contains("remainder 3"), "{e}");
    }

    #[test]
    fn rejects_bad_label_by_record() {
        let mut bytes = fixture(CifarVariant::Cifar10, 3);
        bytes[2 * 3073] = 10;
        let e = parse_cifar_bytes(&bytes, CifarVariant::Cifar10, NormStats::identity(3)).unwrap_err();
        assert!(e.to_string().contains("record 2"), "{e}");
    }

    #[test]
    fn fine_label_is_used() {
        let bytes = fixture(CifarVariant::Cifar100, 2);
        let d = parse_cifar_bytes(&bytes, CifarVariant::Cifar100, NormStats::identity(3)).unwrap();
        assert_eq!(d.images[1].label, 7);
        assert_eq!(d.images[1].coarse_label, Some(1));
    }
}
