//! Image dataset container.
//!
//! On disk a dataset is a single little-endian file:
//!
//! | field    | type           |
//! |----------|----------------|
//! | magic    | `b"MGRQDATA"`  |
//! | version  | u32 (= 1)      |
//! | channels, height, width, classes | u32 each |
//! | split    | u8 (0 train, 1 test, 2 calibration) |
//! | count    | u64            |
//! | images   | count·C·H·W u8, channel-major per image |
//! | labels   | count u8       |

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::io::{read_file, Reader};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"MGRQDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Calibration,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Calibration => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            2 => Some(Split::Calibration),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: Split,
    images: Vec<u8>,
    labels: Vec<u8>,
}

/// Maps a stored byte to the model's input range `[-1, 1]`.
pub fn pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

impl Dataset {
    pub fn new(
        [channels, height, width]: [usize; 3],
        classes: usize,
        split: Split,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || classes == 0 || classes > 256 {
            return Err(Error::Contract(format!(
                "invalid dataset header: {channels}x{height}x{width}, {classes} classes"
            )));
        }
        if images.len() != labels.len() * per {
            return Err(Error::Contract(format!(
                "{} image bytes for {} records of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("label {bad} outside [0, {classes})"),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The selected records, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("record {i} out of range for {} records", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.image_shape(), self.classes, split, images, labels)
    }

    /// `[n, C, H, W]` model inputs for the selected records.
    pub fn tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("record {i} out of range for {} records", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| pixel(v)));
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    /// All records as one `[n, C, H, W]` tensor.
    pub fn all(&self) -> Result<Tensor> {
        self.tensor(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(41 + self.images.len() + self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in [self.channels, self.height, self.width, self.classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.split.code());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.images);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::BadMagic {
                what: "dataset",
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.format(format!("unsupported version {version}")));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let classes = r.u32()? as usize;
        let split = r.u8()?;
        let split = Split::from_code(split).ok_or_else(|| r.format(format!("unknown split tag {split}")))?;
        let count = r.u64()?;
        let per = dims.iter().product::<usize>() as u64;
        if per == 0 || classes == 0 || classes > 256 {
            return Err(r.format(format!("invalid header {dims:?} with {classes} classes")));
        }
        let image_bytes = count
            .checked_mul(per)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| r.format(format!("record count {count} too large")))?;
        let images = r.take(image_bytes)?.to_vec();
        let labels = r.take(count as usize)?.to_vec();
        r.finish()?;
        Self::new(dims, classes, split, images, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&read_file(path.as_ref())?)
}

/// `count` records drawn uniformly without replacement, reproducibly.
pub fn sample_calibration(dataset: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count > dataset.len() {
        return Err(Error::Contract(format!(
            "cannot sample {count} calibration images from {} records",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, dataset.len(), count).into_vec();
    dataset.subset(&picks, Split::Calibration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new([1, 2, 2], 3, Split::Train, (0..12).collect(), vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let d = tiny();
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset::new([3, 4, 4], 10, Split::Test, vec![], vec![]).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn error_contract() {
        let bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..5]), Err(Error::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Dataset::from_bytes(&extra), Err(Error::Format { .. })));
        let mut label = bytes;
        *label.last_mut().unwrap() = 7;
        assert!(matches!(Dataset::from_bytes(&label), Err(Error::Format { .. })));
    }

    #[test]
    fn sampling_is_a_seeded_selection() {
        let d = tiny();
        let a = sample_calibration(&d, 3, 5).unwrap();
        assert_eq!(a, sample_calibration(&d, 3, 5).unwrap());
        let mut labels = a.labels().to_vec();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(a.split, Split::Calibration);
        assert!(sample_calibration(&d, 4, 5).is_err());
    }

    #[test]
    fn pixels_map_to_unit_interval() {
        assert_eq!(pixel(0), -1.0);
        assert_eq!(pixel(255), 1.0);
        let t = tiny().tensor(&[1]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data()[0], pixel(4));
    }
}
