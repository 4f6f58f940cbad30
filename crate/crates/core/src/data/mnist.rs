//! IDX-format MNIST ingestion and the event-based sequential encoding.
//!
//! IDX layout: a big-endian `u32` magic (`0x00000803` for images,
//! `0x00000801` for labels), big-endian `u32` dimension sizes, then raw
//! `u8` payload.

use std::path::Path;

use super::event::event_encode;
use super::{IrregularSequence, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
/// Events per encoded image after padding; also the number of pixel periods
/// making up one unit of time.
pub const SEQMNIST_PAD_LEN: usize = 256;
pub const BINARIZE_THRESHOLD: u8 = 128;

#[derive(Debug, Clone)]
pub struct MnistSet {
    /// `count × 784` pixels, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let Some(chunk) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(self.fail("truncated header"));
        };
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32()?;
        if m != expected {
            self.pos -= 4;
            return Err(self.fail(format!("bad magic {m:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(self.fail(format!("truncated payload: need {len} bytes, have {have}")));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an image file and its label file. Fails without returning any
/// partial data on a malformed or mismatched pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistSet> {
    let image_bytes = read(images_path)?;
    let mut images = IdxReader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    images.magic(IMAGES_MAGIC)?;
    let count = images.u32()? as usize;
    let rows = images.u32()? as usize;
    let cols = images.u32()? as usize;
    if rows != SIDE || cols != SIDE {
        images.pos -= 8;
        return Err(images.fail(format!("images are {rows}x{cols}, expected 28x28")));
    }
    let pixels = images.payload(count * PIXELS)?.to_vec();

    let label_bytes = read(labels_path)?;
    let mut labels = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    labels.magic(LABELS_MAGIC)?;
    let label_count = labels.u32()? as usize;
    if label_count != count {
        labels.pos -= 4;
        return Err(labels.fail(format!("{label_count} labels for {count} images")));
    }
    let label_data = labels.payload(count)?.to_vec();
    if let Some(pos) = label_data.iter().position(|l| *l > 9) {
        labels.pos = 8 + pos;
        return Err(labels.fail(format!("label {} out of range", label_data[pos])));
    }
    Ok(MnistSet {
        pixels,
        labels: label_data,
    })
}

/// Binarizes at `pixel >= 128`, scans row-major into 784 symbols, run-length
/// encodes, and pads to exactly [`SEQMNIST_PAD_LEN`] events. Elapsed times
/// are in units where 256 pixel periods make one unit.
pub fn encode_seqmnist(image: &[u8], label: u8, index: usize) -> Result<IrregularSequence> {
    if image.len() != PIXELS {
        return Err(Error::dim(
            "encode_seqmnist",
            format!("{} pixels, expected {PIXELS}", image.len()),
        ));
    }
    let period = 1.0 / SEQMNIST_PAD_LEN as f64;
    let symbols: Vec<f64> = image
        .iter()
        .map(|p| if *p >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    let dense = IrregularSequence {
        features: Tensor::column(&symbols),
        elapsed: vec![period; PIXELS],
        label: Label::Class(label as usize),
        valid_len: PIXELS,
    };
    let events = event_encode(&dense)?;
    let n = events.valid_len;
    if n > SEQMNIST_PAD_LEN {
        return Err(Error::EncodingOverflow {
            index,
            events: n,
            limit: SEQMNIST_PAD_LEN,
        });
    }
    let mut features = events.features.data().to_vec();
    features.resize(SEQMNIST_PAD_LEN, 0.0);
    let mut elapsed = events.elapsed;
    elapsed.resize(SEQMNIST_PAD_LEN, period);
    Ok(IrregularSequence {
        features: Tensor::column(&features),
        elapsed,
        label: events.label,
        valid_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::event::event_decode;
    use std::io::Write;

    fn idx_images(count: u32, images: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        out.extend_from_slice(&28u32.to_be_bytes());
        out.extend_from_slice(&28u32.to_be_bytes());
        out.extend_from_slice(images);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn parses_well_formed_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut px = vec![0u8; 2 * PIXELS];
        px[PIXELS + 5] = 200;
        let i = write(dir.path(), "img", &idx_images(2, &px));
        let l = write(dir.path(), "lbl", &idx_labels(&[3, 7]));
        let set = load_mnist_idx(&i, &l).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![3, 7]);
        assert_eq!(set.image(1)[5], 200);
    }

    #[test]
    fn malformed_files_fail_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![0u8; 2 * PIXELS];
        let good_l = write(dir.path(), "lbl", &idx_labels(&[1, 2]));

        let truncated = idx_images(2, &px[..PIXELS + 10]);
        let i = write(dir.path(), "trunc", &truncated);
        match load_mnist_idx(&i, &good_l).unwrap_err() {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, 16);
                assert!(detail.contains("truncated"));
            }
            e => panic!("{e:?}"),
        }

        let mut bad = idx_images(2, &px);
        bad[3] = 0x01;
        let i = write(dir.path(), "magic", &bad);
        assert!(matches!(
            load_mnist_idx(&i, &good_l),
            Err(Error::Format { offset: 0, .. })
        ));

        let i = write(dir.path(), "img", &idx_images(2, &px));
        let short_l = write(dir.path(), "lbl3", &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_mnist_idx(&i, &short_l),
            Err(Error::Format { offset: 4, .. })
        ));

        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &good_l),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn black_image_is_one_long_event() {
        let s = encode_seqmnist(&[0u8; PIXELS], 4, 0).unwrap();
        assert_eq!(s.valid_len, 1);
        assert_eq!(s.len(), SEQMNIST_PAD_LEN);
        assert_eq!(s.elapsed[0], 3.0625);
        assert_eq!(s.class(), Some(4));
    }

    #[test]
    fn checkerboard_overflows() {
        let img: Vec<u8> = (0..PIXELS).map(|i| if i % 2 == 0 { 255 } else { 0 }).collect();
        match encode_seqmnist(&img, 0, 17).unwrap_err() {
            Error::EncodingOverflow { index, events, limit } => {
                assert_eq!((index, events, limit), (17, 784, 256));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn threshold_is_inclusive_and_round_trips() {
        let mut img = vec![0u8; PIXELS];
        img[10] = 128;
        img[11] = 127;
        img[400..420].fill(255);
        let s = encode_seqmnist(&img, 1, 0).unwrap();
        assert_eq!(s.valid_len, 5);
        let back = event_decode(&s, 1.0 / 256.0).unwrap();
        assert_eq!(back.valid_len, PIXELS);
        for (i, v) in back.features.data().iter().enumerate() {
            assert_eq!(*v == 1.0, img[i] >= 128);
        }
    }
}
