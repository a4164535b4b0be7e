//! Dataset manifest: a CSV table with header `id,image,split,segmentation,label`
//! preceded by optional `# key=value` setting lines (`size=WxH`,
//! `normalization=unit|minmax`). Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use tpsmark::pipeline::Sample;
use tpsmark::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!("unknown split '{other}' (expected train, val or test)"),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How 8-bit intensities map to `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by 255.
    #[default]
    Unit,
    /// Stretch each image's own range to `[0, 1]`.
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub segmentation: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Expected `(width, height)`; every image must match when set.
    pub size: Option<(usize, usize)>,
    pub normalization: Normalization,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records,
            size: None,
            normalization: Normalization::Unit,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, base_dir).with_context(|| format!("manifest {}", path.display()))?;
        manifest.check_files()?;
        Ok(manifest)
    }

    /// Parses manifest text without touching the file system.
    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut manifest = Self::new(Vec::new(), base_dir);
        for line in text.lines().map(str::trim).filter(|l| l.starts_with('#')) {
            let Some((key, value)) = line.trim_start_matches('#').split_once('=') else {
                continue;
            };
            match key.trim() {
                "size" => {
                    let (w, h) = value
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| anyhow!("size must look like 128x128"))?;
                    manifest.size = Some((w.trim().parse()?, h.trim().parse()?));
                }
                "normalization" => {
                    manifest.normalization = match value.trim() {
                        "unit" => Normalization::Unit,
                        "minmax" => Normalization::MinMax,
                        other => bail!("unknown normalization '{other}'"),
                    }
                }
                other => bail!("unknown manifest setting '{other}'"),
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for (row, rec) in reader.deserialize::<RawRecord>().enumerate() {
            let rec = rec.with_context(|| format!("row {}", row + 1))?;
            manifest.records.push(Record {
                id: rec.id,
                image: PathBuf::from(rec.image),
                split: rec.split.parse()?,
                segmentation: rec.segmentation.filter(|s| !s.is_empty()).map(PathBuf::from),
                label: rec.label.filter(|s| !s.is_empty()),
            });
        }
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            bail!("manifest has no records");
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() {
                bail!("empty id");
            }
            if !seen.insert(r.id.as_str()) {
                bail!("duplicate id '{}'", r.id);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check_files(&self) -> Result<()> {
        for r in &self.records {
            for p in std::iter::once(&r.image).chain(r.segmentation.as_ref()) {
                if !self.resolve(p).is_file() {
                    bail!("record '{}': missing file {}", r.id, self.resolve(p).display());
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut out = out;
        if let Some((w, h)) = self.size {
            writeln!(out, "# size={w}x{h}")?;
        }
        let norm = match self.normalization {
            Normalization::Unit => "unit",
            Normalization::MinMax => "minmax",
        };
        writeln!(out, "# normalization={norm}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "image", "split", "segmentation", "label"])?;
        for r in &self.records {
            w.write_record([
                r.id.clone(),
                r.image.to_string_lossy().into_owned(),
                r.split.to_string(),
                r.segmentation.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default(),
                r.label.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.records
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| anyhow!("id '{id}' is not in the manifest"))
    }

    /// Record indices in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    fn read_image(&self, path: &Path) -> Result<Image> {
        let full = self.resolve(path);
        let img = Image::load(&full).with_context(|| format!("cannot read image {}", full.display()))?;
        if let Some((w, h)) = self.size {
            if img.width() != w || img.height() != h {
                bail!("{} is {}x{}, manifest expects {w}x{h}", full.display(), img.width(), img.height());
            }
        }
        Ok(match self.normalization {
            Normalization::Unit => img,
            Normalization::MinMax => {
                let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
                let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    Image::new(img.width(), img.height(), img.data().iter().map(|v| (v - lo) / (hi - lo)).collect())?
                } else {
                    img
                }
            }
        })
    }

    /// Loads the record at `index` as a pipeline sample. Segmentations are
    /// read unnormalized.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let image = self.read_image(&r.image).with_context(|| format!("record '{}'", r.id))?;
        let mut s = Sample::new(r.id.clone(), image);
        if let Some(seg) = &r.segmentation {
            let full = self.resolve(seg);
            let seg = Image::load(&full).with_context(|| format!("cannot read segmentation {}", full.display()))?;
            if !seg.same_extent(&s.image) {
                bail!("record '{}': segmentation and image differ in size", r.id);
            }
            s = s.with_segmentation(seg);
        }
        Ok(s)
    }

    /// Every record as a sample; all must share one extent.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        let samples = (0..self.records.len()).map(|i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        if samples.iter().any(|s| !s.image.same_extent(&samples[0].image)) {
            bail!("manifest images differ in size");
        }
        Ok(samples)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    image: String,
    split: String,
    #[serde(default)]
    segmentation: Option<String>,
    #[serde(default)]
    label: Option<String>,
}
