use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: format!("truncated while reading {what}"),
        })
}

fn check_magic(buf: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{}: magic 0x{magic:08x}, expected 0x{expected:08x}", path.display()),
        });
    }
    Ok(())
}

/// Parse an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255;
/// the class count is one past the largest label seen.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;
    parse_idx(&images, &labels, ip, lp)
}

pub(crate) fn parse_idx(images: &[u8], labels: &[u8], ip: &Path, lp: &Path) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES_MAGIC, ip)?;
    check_magic(labels, IDX_LABELS_MAGIC, lp)?;
    let n = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "row count")? as usize;
    let cols = be_u32(images, 12, "column count")? as usize;
    let n_labels = be_u32(labels, 4, "label count")? as usize;
    if n != n_labels {
        return Err(Error::Format {
            offset: 4,
            msg: format!(
                "{} holds {n_labels} labels but {} holds {n} images",
                lp.display(),
                ip.display()
            ),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = rows * cols;
    let need = 16 + n * dim;
    if images.len() < need {
        return Err(Error::Format {
            offset: images.len() as u64,
            msg: format!("{}: truncated pixel data, expected {need} bytes", ip.display()),
        });
    }
    if labels.len() < 8 + n {
        return Err(Error::Format {
            offset: labels.len() as u64,
            msg: format!("{}: truncated label data, expected {} bytes", lp.display(), 8 + n),
        });
    }
    let features = images[16..need].iter().map(|&p| p as f64 / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let n_classes = ys.iter().max().map_or(0, |m| m + 1);
    let name = ip
        .file_stem()
        .map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, dim, features, ys, n_classes)
}

/// Read `label,f1,...,fd` rows. Features are kept as given.
pub fn load_csv(path: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    parse_csv_dataset(&text, n_classes, name)
}

pub fn parse_csv_dataset(text: &str, n_classes: usize, name: impl Into<String>) -> Result<Dataset> {
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',').map(str::trim);
        let label_cell = cells.next().unwrap_or("");
        let label: usize = label_cell.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label {label_cell:?} is not a class index"),
        })?;
        if label >= n_classes {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label {label} is not below n_classes={n_classes}"),
            });
        }
        let start = features.len();
        for cell in cells {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("{cell:?} is not a number"),
            })?;
            features.push(v);
        }
        let d = features.len() - start;
        match dim {
            None if d == 0 => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "row has no feature columns".into(),
                })
            }
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("row has {d} features, expected {expected}"),
                })
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or(Error::EmptyDataset)?;
    Dataset::new(name, dim, features, labels, n_classes)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn idx_fixture(pixels: &[[u8; 4]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for p in pixels {
            img.extend_from_slice(p);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx3");
        let lp = dir.join("labels.idx1");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn three_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(&[[0, 255, 51, 0], [255; 4], [0; 4]], &[2, 0, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.row(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(ds.labels(), &[2, 0, 1]);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture(&[[0; 4], [0; 4], [0; 4]], &[0, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn bad_magic_names_expected_constant() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = idx_fixture(&[[0; 4]], &[0]);
        img[..4].copy_from_slice(&[0, 0, 0, 0]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("0x00000803"), "{err}");
    }

    #[test]
    fn truncated_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = idx_fixture(&[[1; 4], [2; 4]], &[0, 1]);
        img.truncate(img.len() - 1);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 23, .. })));
        let (ip, lp) = write_pair(dir.path(), &img[..10], &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_idx("/nonexistent/a.idx", "/nonexistent/b.idx").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.idx"));
    }

    #[test]
    fn csv_examples() {
        let ds = parse_csv_dataset("0,1.0,2.0\n1,3.0,4.0", 2, "c").unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 2));
        assert_eq!(ds.row(1), &[3.0, 4.0]);

        let err = parse_csv_dataset("2,1.0,2.0\n", 2, "c").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(matches!(parse_csv_dataset("", 2, "c"), Err(Error::EmptyDataset)));
        assert!(matches!(
            parse_csv_dataset("0,1\n1,2,3\n", 2, "c"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv_dataset("0,1\n1,x\n", 2, "c"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1,0.5\n0,0.25\n").unwrap();
        let ds = load_csv(&p, 2).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.name(), "d");
    }
}
