//! Image records, identity labels and binary attribute annotations.
//!
//! Annotation files follow the CelebA layout: an identity file with
//! `<filename> <identity>` per line, and an attribute file whose first line is
//! the record count, second line the attribute names, then
//! `<filename> <±1> ...` rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// File stem, unique within a dataset.
    pub id: String,
    pub path: PathBuf,
    pub identity: i64,
    /// Aligned with [`Dataset::attribute_names`].
    pub attributes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    attribute_names: Vec<String>,
}

/// Counts of annotation rows that did not make it into the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Annotated in both files but no image on disk.
    pub missing_images: usize,
    /// Present in only one of the two annotation files.
    pub unmatched_annotations: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> usize {
        self.missing_images + self.unmatched_annotations
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSpec {
    pub attribute: String,
    pub value: bool,
}

impl SubgroupSpec {
    pub fn new(attribute: impl Into<String>, value: bool) -> Self {
        SubgroupSpec {
            attribute: attribute.into(),
            value,
        }
    }

    pub fn negated(&self) -> Self {
        SubgroupSpec {
            attribute: self.attribute.clone(),
            value: !self.value,
        }
    }

    /// CelebA-style token for the value: `1` or `-1`.
    pub fn value_token(&self) -> &'static str {
        if self.value {
            "1"
        } else {
            "-1"
        }
    }

    /// `Attribute=1` / `Attribute=-1`.
    pub fn label(&self) -> String {
        format!("{}={}", self.attribute, self.value_token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupPartition {
    pub spec: SubgroupSpec,
    pub protected: Vec<usize>,
    pub unprotected: Vec<usize>,
}

impl SubgroupPartition {
    /// Same partition with protected and unprotected exchanged.
    pub fn swapped(&self) -> Self {
        SubgroupPartition {
            spec: self.spec.negated(),
            protected: self.unprotected.clone(),
            unprotected: self.protected.clone(),
        }
    }

    /// Keep only the indices in `retained` (sorted ascending).
    pub fn restrict(&self, retained: &[usize]) -> Result<Self> {
        let keep = |v: &[usize]| -> Vec<usize> {
            v.iter()
                .copied()
                .filter(|i| retained.binary_search(i).is_ok())
                .collect()
        };
        let part = SubgroupPartition {
            spec: self.spec.clone(),
            protected: keep(&self.protected),
            unprotected: keep(&self.unprotected),
        };
        part.check_nondegenerate()?;
        Ok(part)
    }

    fn check_nondegenerate(&self) -> Result<()> {
        if self.protected.is_empty() || self.unprotected.is_empty() {
            return Err(Error::SubgroupDegenerate {
                attribute: self.spec.attribute.clone(),
                value: self.spec.value,
                protected: self.protected.len(),
                unprotected: self.unprotected.len(),
            });
        }
        Ok(())
    }
}

impl Dataset {
    /// Build a dataset from in-memory records. Records are re-sorted by id.
    pub fn new(mut records: Vec<ImageRecord>, attribute_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset has no records".into()));
        }
        for r in &records {
            if r.attributes.len() != attribute_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {} has {} attribute flags, expected {}",
                    r.id,
                    r.attributes.len(),
                    attribute_names.len()
                )));
            }
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument(format!("duplicate record id {}", w[0].id)));
        }
        Ok(Dataset {
            records,
            attribute_names,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn identities(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// Split record indices into protected (`flag == value`) and the complement.
    pub fn partition(&self, spec: &SubgroupSpec) -> Result<SubgroupPartition> {
        let col = self.attribute_index(&spec.attribute)?;
        let (protected, unprotected): (Vec<usize>, Vec<usize>) =
            (0..self.records.len()).partition(|&i| self.records[i].attributes[col] == spec.value);
        let part = SubgroupPartition {
            spec: spec.clone(),
            protected,
            unprotected,
        };
        part.check_nondegenerate()?;
        Ok(part)
    }

    /// Digest over ids, identities and attributes. Paths are excluded so the
    /// same annotations in a different directory hash identically.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.attribute_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update([0]);
            h.update(r.identity.to_le_bytes());
            h.update(r.attributes.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        hex::encode(h.finalize())
    }

    pub fn load_image(&self, index: usize) -> Result<RgbImage> {
        load_rgb(&self.records[index].path)
    }
}

/// Decode a JPEG or PNG to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        what: format!("decode {}", path.display()),
        source,
    })?;
    Ok(img.to_rgb8())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Parse `<filename> <integer>` lines. Blank lines are ignored.
pub fn parse_identity_file(path: &Path, text: &str) -> Result<BTreeMap<String, i64>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, lineno + 1, "expected \"<filename> <identity>\""));
        };
        let identity: i64 = id
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad identity {id:?}")))?;
        if out.insert(name.to_string(), identity).is_some() {
            return Err(Error::parse(path, lineno + 1, format!("duplicate filename {name}")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub rows: BTreeMap<String, Vec<bool>>,
}

/// Parse the CelebA attribute layout.
pub fn parse_attribute_file(path: &Path, text: &str) -> Result<AttributeTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (n0, count_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty attribute file"))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, n0 + 1, "first line must be the record count"))?;
    let (_, names_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 2, "missing attribute name line"))?;
    let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::parse(path, 2, "no attribute names"));
    }

    let mut rows = BTreeMap::new();
    for (lineno, line) in lines {
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-blank line");
        let flags = parts
            .map(|tok| match tok {
                "1" => Ok(true),
                "-1" => Ok(false),
                other => Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("attribute value must be 1 or -1, got {other:?}"),
                )),
            })
            .collect::<Result<Vec<bool>>>()?;
        if flags.len() != names.len() {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected {} attribute values, found {}", names.len(), flags.len()),
            ));
        }
        if rows.insert(name.to_string(), flags).is_some() {
            return Err(Error::parse(path, lineno + 1, format!("duplicate filename {name}")));
        }
    }
    if rows.len() != count {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {count} records but file has {}", rows.len()),
        ));
    }
    Ok(AttributeTable { names, rows })
}

/// Load the records present in both annotation files and on disk, ordered by id.
pub fn load_dataset(
    image_dir: &Path,
    identity_file: &Path,
    attr_file: &Path,
) -> Result<(Dataset, LoadReport)> {
    if !image_dir.is_dir() {
        return Err(Error::io(
            image_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image directory not found"),
        ));
    }
    let identities = parse_identity_file(identity_file, &read_text(identity_file)?)?;
    let attrs = parse_attribute_file(attr_file, &read_text(attr_file)?)?;

    let mut report = LoadReport {
        missing_images: 0,
        unmatched_annotations: identities.keys().filter(|k| !attrs.rows.contains_key(*k)).count()
            + attrs.rows.keys().filter(|k| !identities.contains_key(*k)).count(),
    };

    let mut by_id: HashMap<String, ImageRecord> = HashMap::new();
    for (name, identity) in &identities {
        let Some(flags) = attrs.rows.get(name) else {
            continue;
        };
        let path = image_dir.join(name);
        if !path.is_file() {
            report.missing_images += 1;
            continue;
        }
        let id = file_stem(name);
        let rec = ImageRecord {
            id: id.clone(),
            path,
            identity: *identity,
            attributes: flags.clone(),
        };
        if by_id.insert(id.clone(), rec).is_some() {
            return Err(Error::InvalidArgument(format!("two files share the id {id}")));
        }
    }
    if report.warnings() > 0 {
        log::warn!(
            "dataset load: {} annotated images missing on disk, {} rows present in only one annotation file",
            report.missing_images,
            report.unmatched_annotations
        );
    }
    let dataset = Dataset::new(by_id.into_values().collect(), attrs.names)?;
    Ok((dataset, report))
}

/// Something that can hand out the original raster for a record index.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<RgbImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for Dataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<RgbImage> {
        self.load_image(index)
    }
}

/// Images already decoded, in dataset order.
pub struct InMemoryImages(pub Vec<RgbImage>);

impl ImageSource for InMemoryImages {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<RgbImage> {
        Ok(self.0[index].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, flags: &[bool]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            identity: 0,
            attributes: flags.to_vec(),
        }
    }

    fn one_attr(flags: &[bool]) -> Dataset {
        let records = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| rec(&format!("{i:03}"), &[f]))
            .collect();
        Dataset::new(records, vec!["A".into()]).unwrap()
    }

    #[test]
    fn partition_by_flag() {
        let d = one_attr(&[true, true, false, false]);
        let p = d.partition(&SubgroupSpec::new("A", true)).unwrap();
        assert_eq!(p.protected, vec![0, 1]);
        assert_eq!(p.unprotected, vec![2, 3]);

        let d = one_attr(&[true, false, true]);
        let p = d.partition(&SubgroupSpec::new("A", false)).unwrap();
        assert_eq!(p.protected, vec![1]);
        assert_eq!(p.unprotected, vec![0, 2]);
    }

    #[test]
    fn partition_degenerate_and_unknown() {
        let d = one_attr(&[true, true]);
        assert!(matches!(
            d.partition(&SubgroupSpec::new("A", true)),
            Err(Error::SubgroupDegenerate { protected: 2, unprotected: 0, .. })
        ));
        assert!(matches!(
            d.partition(&SubgroupSpec::new("B", true)),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn restrict_keeps_intersection() {
        let d = one_attr(&[true, false, true, false]);
        let p = d.partition(&SubgroupSpec::new("A", true)).unwrap();
        let r = p.restrict(&[1, 2]).unwrap();
        assert_eq!(r.protected, vec![2]);
        assert_eq!(r.unprotected, vec![1]);
        assert!(p.restrict(&[0, 2]).is_err());
    }

    #[test]
    fn records_sorted_and_unique() {
        let d = Dataset::new(vec![rec("b", &[true]), rec("a", &[false])], vec!["A".into()]).unwrap();
        assert_eq!(d.ids(), vec!["a", "b"]);
        assert!(Dataset::new(vec![rec("a", &[true]), rec("a", &[false])], vec!["A".into()]).is_err());
        assert!(Dataset::new(vec![], vec!["A".into()]).is_err());
        assert!(Dataset::new(vec![rec("a", &[true, false])], vec!["A".into()]).is_err());
    }

    #[test]
    fn attribute_parse_errors_carry_line_numbers() {
        let p = Path::new("attrs.txt");
        let err = parse_attribute_file(p, "1\nA B\nx.jpg 1 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_attribute_file(p, "2\nA\nx.jpg 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let t = parse_attribute_file(p, "2\nA  B\nx.jpg  1 -1\ny.jpg -1  1\n").unwrap();
        assert_eq!(t.rows["x.jpg"], vec![true, false]);
        assert_eq!(t.rows["y.jpg"], vec![false, true]);
    }

    #[test]
    fn identity_parse_errors() {
        let p = Path::new("ids.txt");
        assert!(matches!(
            parse_identity_file(p, "a.jpg 1\nb.jpg x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_identity_file(p, "a.jpg 1\na.jpg 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_identity_file(p, "a.jpg\n"), Err(Error::Parse { line: 1, .. })));
    }
}
