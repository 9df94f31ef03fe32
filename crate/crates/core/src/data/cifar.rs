//! CIFAR-10 binary layout: fixed 3073-byte records, one label byte (0–9)
//! followed by 3072 pixel bytes, plane-major R, G, B over a 32×32 grid.

use std::path::Path;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vision::Image;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

pub fn load_cifar10_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_binary(&bytes, split)
}

pub fn parse_cifar10_binary(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let samples = bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, record)| {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Format {
                    offset: (i * CIFAR_RECORD) as u64,
                    reason: format!("label {label} outside 0..=9"),
                });
            }
            let pixels = record[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(Sample {
                image: Image::new(Tensor::new(vec![3, 32, 32], pixels)?)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, CIFAR_CLASSES, split)
}

/// Serializes a 3×32×32 dataset back to the binary layout.
pub fn encode_cifar10_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for s in ds.samples() {
        if s.image.tensor().shape() != [3, 32, 32] || s.label >= CIFAR_CLASSES {
            return Err(Error::contract(
                "only 3×32×32 images with labels 0..=9 fit the CIFAR-10 layout",
            ));
        }
        out.push(s.label as u8);
        out.extend(
            s.image
                .pixels()
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}
