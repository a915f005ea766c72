use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DatasetTable, Item};
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Orders class names numerically when every name is an integer, otherwise
/// lexicographically.
fn order_class_names(names: BTreeSet<String>) -> Vec<String> {
    let mut names: Vec<String> = names.into_iter().collect();
    if names.iter().all(|n| n.parse::<u64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<u64>().unwrap());
    }
    names
}

/// Writes `label,domain,f0,...,f{d-1}` rows. Labels are class names.
pub fn write_csv<W: Write>(data: &DatasetTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string(), "domain".to_string()];
    header.extend((0..data.input_len()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for item in data.items() {
        let mut row = Vec::with_capacity(item.input.len() + 2);
        row.push(data.class_names()[item.label].clone());
        row.push(item.domain.clone());
        row.extend(item.input.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Ingestion(e.to_string())
}

/// Reads the vector dataset format written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<DatasetTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "label" || &header[1] != "domain" {
        return Err(Error::Ingestion(format!(
            "{}: header must start with label,domain,f0",
            path.display()
        )));
    }
    for (i, h) in header.iter().skip(2).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Ingestion(format!("{}: column {} should be f{i}, got {h:?}", path.display(), i + 2)));
        }
    }
    let dim = header.len() - 2;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Ingestion(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        if values.len() != dim {
            return Err(Error::Ingestion(format!("{}: row {} has {} features", path.display(), line + 2, values.len())));
        }
        rows.push((rec[0].to_string(), rec[1].to_string(), values));
    }
    let names = order_class_names(rows.iter().map(|r| r.0.clone()).collect());
    let domains: BTreeSet<&str> = rows.iter().map(|r| r.1.as_str()).collect();
    let domain_name = domains.into_iter().collect::<Vec<_>>().join("+");
    let items = rows
        .iter()
        .map(|(label, domain, values)| Item {
            input: values.clone(),
            label: names.iter().position(|n| n == label).unwrap(),
            domain: domain.clone(),
        })
        .collect();
    DatasetTable::new(items, names, domain_name, vec![dim])
}

/// Loads `root/<class>/<image>` into `height x width x 3` arrays in `[0, 1]`.
pub fn load_image_dataset(root: &Path, height: usize, width: usize) -> Result<DatasetTable> {
    let ingest = |p: &Path, e: &dyn std::fmt::Display| Error::Ingestion(format!("{}: {e}", p.display()));
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| ingest(root, &e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Ingestion(format!("{}: no class directories", root.display())));
    }
    let domain = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut items = Vec::new();
    for (label, (_, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| ingest(dir, &e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Ingestion(format!("{}: class directory has no images", dir.display())));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| ingest(&f, &e))?;
            let rgb = img
                .resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let input = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            items.push(Item {
                input,
                label,
                domain: domain.clone(),
            });
        }
    }
    let names = class_dirs.into_iter().map(|(n, _)| n).collect();
    DatasetTable::new(items, names, domain, vec![height, width, 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let items = vec![
            Item { input: vec![0.1, -2.5e-300], label: 1, domain: "a".into() },
            Item { input: vec![1.0 / 3.0, 7.0], label: 0, domain: "a".into() },
        ];
        let t = DatasetTable::new(items, vec!["2".into(), "10".into()], "a", vec![2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&t, fs::File::create(&p).unwrap()).unwrap();
        let back = read_csv(&p).unwrap();
        assert_eq!(back.class_names(), &["2", "10"]);
        assert_eq!(back.items(), t.items());
    }

    #[test]
    fn csv_header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "class,domain,f0\na,b,1\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Ingestion(_))));
    }

    #[test]
    fn names_sort_lexicographically_unless_numeric() {
        let s: BTreeSet<String> = ["happy", "angry"].iter().map(|s| s.to_string()).collect();
        assert_eq!(order_class_names(s), vec!["angry", "happy"]);
        let s: BTreeSet<String> = ["10", "9"].iter().map(|s| s.to_string()).collect();
        assert_eq!(order_class_names(s), vec!["9", "10"]);
    }
}
