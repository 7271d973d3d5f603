//! Piano-roll rasters listed in manifests.
//!
//! A corpus directory holds `train.manifest`, `valid.manifest` and
//! `test.manifest`. Each non-empty line not starting with `#` reads
//! `path,label,piece_id`: `path` is relative to the directory, `label` is a
//! class index or class name, and `piece_id` names the piece the excerpt was
//! cut from. Class names come from an optional `classes.txt` (one per line)
//! and default to [`COMPOSER_CLASSES`].
//!
//! A raster is `PITCH_ROWS * TIME_COLUMNS` bytes, row-major with pitch rows
//! first, each byte 0 or 1.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

use super::{Dataset, Partition};

pub const PITCH_ROWS: usize = 68;
/// 50 quarter notes sampled every 32nd note.
pub const TIME_COLUMNS: usize = 50 * 8;

/// Four source classes followed by two target classes.
pub const COMPOSER_CLASSES: [&str; 6] = [
    "telemann-cantatas",
    "bach-cantatas",
    "handel-concerti-grossi",
    "handel-trio-sonatas",
    "haydn",
    "mozart",
];

const MANIFESTS: [(Partition, &str); 3] = [
    (Partition::Train, "train.manifest"),
    (Partition::Valid, "valid.manifest"),
    (Partition::Test, "test.manifest"),
];

fn read_raster(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != PITCH_ROWS * TIME_COLUMNS {
        return Err(Error::format(
            path,
            format!(
                "{} bytes, a {PITCH_ROWS}x{TIME_COLUMNS} raster needs {}",
                bytes.len(),
                PITCH_ROWS * TIME_COLUMNS
            ),
        ));
    }
    if let Some(&b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::format(
            path,
            format!("raster byte {b} is not 0 or 1"),
        ));
    }
    Tensor::new(
        vec![1, PITCH_ROWS, TIME_COLUMNS],
        bytes.iter().map(|&b| b as f64).collect(),
    )
}

pub fn write_raster(path: &Path, grid: &[u8]) -> Result<()> {
    if grid.len() != PITCH_ROWS * TIME_COLUMNS || grid.iter().any(|&b| b > 1) {
        return Err(Error::Usage("a raster is 68x400 bytes of 0 or 1".into()));
    }
    std::fs::write(path, grid).map_err(|e| Error::io(path, e))
}

fn class_names(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("classes.txt");
    if !path.is_file() {
        return Ok(COMPOSER_CLASSES.iter().map(|s| s.to_string()).collect());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::format(&path, "no class names"));
    }
    Ok(names)
}

pub fn load_pianoroll(dir: &Path) -> Result<Dataset> {
    let classes = class_names(dir)?;
    let mut items = Vec::new();
    let mut labels = Vec::new();
    let mut partitions = Vec::new();
    let mut pieces = Vec::new();
    let mut home: BTreeMap<String, Partition> = BTreeMap::new();
    for (partition, file) in MANIFESTS {
        let path = dir.join(file);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::format(&path, e.to_string()))?;
            if record.len() != 3 {
                return Err(Error::format(
                    &path,
                    format!("record {}: expected path,label,piece_id", line + 1),
                ));
            }
            let label = record[1]
                .parse::<usize>()
                .ok()
                .filter(|&l| l < classes.len())
                .or_else(|| classes.iter().position(|c| c == &record[1]))
                .ok_or_else(|| {
                    Error::format(
                        &path,
                        format!("record {}: unknown class `{}`", line + 1, &record[1]),
                    )
                })?;
            let piece = record[2].to_string();
            match home.get(&piece) {
                Some(&p) if p != partition => {
                    return Err(Error::format(
                        &path,
                        format!(
                            "piece `{piece}` appears in both the {p} and the {partition} subset"
                        ),
                    ))
                }
                _ => {
                    home.insert(piece.clone(), partition);
                }
            }
            items.push(read_raster(&dir.join(&record[0]))?);
            labels.push(label);
            partitions.push(partition);
            pieces.push(piece);
        }
    }
    Dataset::new("composers", items, labels, partitions, classes)?.with_piece_ids(pieces)
}

/// Writes a small corpus in the manifest layout. Each class plays in its own
/// pitch band, so the classes are learnable. Piece `j` of a class goes to the
/// training subset when `j % 4 < 2`, to validation when it is 2 and to test
/// when it is 3.
pub fn write_synthetic_pianoroll(
    dir: &Path,
    classes: &[&str],
    pieces_per_class: usize,
    excerpts_per_piece: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = seed::rng(seed, Stream::Init, 0x50_52);
    let mut manifests: BTreeMap<Partition, String> = BTreeMap::new();
    let band = PITCH_ROWS / classes.len().max(1);
    for (c, _) in classes.iter().enumerate() {
        for piece in 0..pieces_per_class {
            let partition = match piece % 4 {
                0 | 1 => Partition::Train,
                2 => Partition::Valid,
                _ => Partition::Test,
            };
            for e in 0..excerpts_per_piece {
                let mut grid = vec![0u8; PITCH_ROWS * TIME_COLUMNS];
                let mut t = 0;
                while t < TIME_COLUMNS {
                    let pitch = c * band + rng.gen_range(0..band.max(1));
                    let len = rng.gen_range(2..16).min(TIME_COLUMNS - t);
                    for col in t..t + len {
                        grid[pitch * TIME_COLUMNS + col] = 1;
                    }
                    t += len;
                }
                let name = format!("c{c}_p{piece}_e{e}.roll");
                write_raster(&dir.join(&name), &grid)?;
                manifests
                    .entry(partition)
                    .or_default()
                    .push_str(&format!("{name},{c},class{c}-piece{piece}\n"));
            }
        }
    }
    let names: String = classes.iter().map(|c| format!("{c}\n")).collect();
    std::fs::write(dir.join("classes.txt"), names).map_err(|e| Error::io(dir, e))?;
    for (partition, file) in MANIFESTS {
        let body = manifests.remove(&partition).unwrap_or_default();
        let path = dir.join(file);
        std::fs::write(&path, format!("# path,label,piece_id\n{body}"))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_pianoroll(dir.path(), &["a", "b"], 4, 2, 1).unwrap();
        let ds = load_pianoroll(dir.path()).unwrap();
        assert_eq!(ds.len(), 16);
        assert_eq!(ds.item_shape(), Some(&[1, 68, 400][..]));
        assert_eq!(ds.count(Partition::Train), 8);
        assert_eq!(ds.count(Partition::Test), 4);
        assert_eq!(ds.class_names, ["a", "b"]);
        assert!(ds
            .items
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn leaked_piece_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_pianoroll(dir.path(), &["a", "b"], 4, 1, 1).unwrap();
        let test = dir.path().join("test.manifest");
        let mut body = std::fs::read_to_string(&test).unwrap();
        body.push_str("c0_p0_e0.roll,0,class0-piece0\n");
        std::fs::write(&test, body).unwrap();
        let err = load_pianoroll(dir.path()).unwrap_err();
        assert!(err.to_string().contains("class0-piece0"), "{err}");
    }

    #[test]
    fn wrong_grid_shape_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.roll");
        std::fs::write(&path, vec![0u8; 68 * 399]).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Format { .. })));
        assert_eq!(TIME_COLUMNS, 400);
    }
}
