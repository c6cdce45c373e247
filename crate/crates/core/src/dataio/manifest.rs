//! Dataset manifest: a UTF-8 CSV with header
//! `id,file,width_um,height_um,radius_um,split`, preceded by optional
//! `#key=value` metadata lines.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::image::GrayImage;
use crate::error::{Result, SimicError};

pub const COLUMNS: [&str; 6] = ["id", "file", "width_um", "height_um", "radius_um", "split"];

/// Acquisition metadata keys recorded for real SEM data.
pub const ACQUISITION_KEYS: [&str; 6] = [
    "beam_current",
    "acceleration_voltage",
    "working_distance",
    "sample_tilt",
    "field_of_view",
    "resolution",
];

pub const SCALE_KEY: &str = "scale_nm_per_px";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Eval,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
            Split::Unassigned => "",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = SimicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            "" => Ok(Split::Unassigned),
            other => Err(SimicError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Width, height and apex radius of one tip, in micrometers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipLabels {
    pub width_um: f64,
    pub height_um: f64,
    pub radius_um: f64,
}

impl TipLabels {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("width_um", self.width_um),
            ("height_um", self.height_um),
            ("radius_um", self.radius_um),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.radius_um >= self.width_um {
            return Err(format!(
                "radius_um {} must be smaller than width_um {}",
                self.radius_um, self.width_um
            ));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.width_um, self.height_um, self.radius_um]
    }
}

/// One labelled grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: TipLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Path as written in the manifest, relative to the manifest directory
    /// unless absolute.
    pub file: PathBuf,
    pub labels: TipLabels,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub metadata: Vec<(String, String)>,
    pub records: Vec<ManifestRecord>,
    /// Directory relative file paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn scale_nm_per_px(&self) -> Option<f64> {
        self.meta(SCALE_KEY).and_then(|v| v.trim().parse().ok())
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.file.is_absolute() {
            record.file.clone()
        } else {
            self.base_dir.join(&record.file)
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Parses and validates manifest text. Row numbers in errors count data
    /// rows from 1.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut metadata = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim_start();
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    metadata.push((k.trim().to_string(), v.trim().to_string()));
                }
            } else if !trimmed.is_empty() {
                break;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| SimicError::Manifest {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        let mut index = [0usize; 6];
        for (slot, col) in index.iter_mut().zip(COLUMNS) {
            *slot = headers
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| SimicError::Manifest {
                    row: 0,
                    message: format!("missing column {col:?}"),
                })?;
        }

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| SimicError::Manifest {
                row,
                message: e.to_string(),
            })?;
            let field = |k: usize| rec.get(index[k]).unwrap_or("");
            let number = |k: usize| -> Result<f64> {
                field(k).parse::<f64>().map_err(|_| SimicError::Manifest {
                    row,
                    message: format!("{} is not a number: {:?}", COLUMNS[k], field(k)),
                })
            };
            let id = field(0).to_string();
            if id.is_empty() {
                return Err(SimicError::Manifest {
                    row,
                    message: "empty id".into(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(SimicError::Manifest {
                    row,
                    message: format!("duplicate id {id:?}"),
                });
            }
            let labels = TipLabels {
                width_um: number(2)?,
                height_um: number(3)?,
                radius_um: number(4)?,
            };
            labels
                .validate()
                .map_err(|message| SimicError::Manifest { row, message })?;
            let split = field(5)
                .parse()
                .map_err(|e: SimicError| SimicError::Manifest {
                    row,
                    message: e.to_string(),
                })?;
            records.push(ManifestRecord {
                id,
                file: PathBuf::from(field(1)),
                labels,
                split,
            });
        }
        Ok(Self {
            metadata,
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("#{k}={v}\n"));
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(COLUMNS).expect("in-memory write");
        for r in &self.records {
            writer
                .write_record([
                    r.id.clone(),
                    r.file.to_string_lossy().replace('\\', "/"),
                    r.labels.width_um.to_string(),
                    r.labels.height_um.to_string(),
                    r.labels.radius_um.to_string(),
                    r.split.to_string(),
                ])
                .expect("in-memory write");
        }
        let body = writer.into_inner().expect("in-memory flush");
        out.push_str(&String::from_utf8(body).expect("utf-8 fields"));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| SimicError::io(path, e))
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<GrayImage> {
        GrayImage::read(self.resolve(record))
    }
}

/// Reads and validates a manifest; every referenced image must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| SimicError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, base)?;
    for (i, r) in manifest.records.iter().enumerate() {
        let file = manifest.resolve(r);
        if !file.is_file() {
            return Err(SimicError::Manifest {
                row: i + 1,
                message: format!("image file {} does not exist", file.display()),
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "#scale_nm_per_px=10\n#source=synthetic\n\
id,file,width_um,height_um,radius_um,split\n\
a,a.pgm,0.3,0.4,0.05,train\n\
b,b.pgm,0.25,0.35,0.04,val\n\
c,c.pgm,0.2,0.3,0.03,\n";

    #[test]
    fn parses_well_formed_rows_and_metadata() {
        let m = DatasetManifest::parse(GOOD, "/data").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.scale_nm_per_px(), Some(10.0));
        assert_eq!(m.meta("source"), Some("synthetic"));
        assert_eq!(m.records[1].split, Split::Val);
        assert_eq!(m.records[2].split, Split::Unassigned);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a.pgm"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DatasetManifest::parse(GOOD, "").unwrap();
        let again = DatasetManifest::parse(&m.to_csv(), "").unwrap();
        assert_eq!(m, again);
        assert_eq!(m.to_csv(), again.to_csv());
    }

    #[test]
    fn duplicate_id_cites_row() {
        let text = GOOD.replace("b,b.pgm", "a,b.pgm");
        match DatasetManifest::parse(&text, "") {
            Err(SimicError::Manifest { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn radius_not_below_width_is_rejected() {
        let text = GOOD.replace("0.2,0.3,0.03", "0.2,0.3,0.2");
        match DatasetManifest::parse(&text, "") {
            Err(SimicError::Manifest { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonpositive_label_and_missing_column() {
        let text = GOOD.replace("0.25,0.35", "-0.25,0.35");
        assert!(matches!(
            DatasetManifest::parse(&text, ""),
            Err(SimicError::Manifest { row: 2, .. })
        ));
        let text = GOOD.replace(",radius_um", ",r");
        let err = DatasetManifest::parse(&text, "").unwrap_err().to_string();
        assert!(err.contains("radius_um"), "{err}");
        let text = GOOD.replace("val", "holdout");
        assert!(DatasetManifest::parse(&text, "").is_err());
    }

    #[test]
    fn load_manifest_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, GOOD).unwrap();
        assert!(load_manifest(&path).is_err());
        for f in ["a.pgm", "b.pgm", "c.pgm"] {
            GrayImage::filled(4, 4, 0).write(dir.path().join(f)).unwrap();
        }
        assert_eq!(load_manifest(&path).unwrap().len(), 3);
    }
}
