//! Dataset model: ship classes, tile files, and the manifest that ties a
//! directory of tiles into train/val/test splits.
//!
//! Tile files are a small purpose-built raster format ("SART"): magic,
//! version, dimensions, polarization, then row-major little-endian f32
//! backscatter values in linear power. The manifest is a CSV with one row
//! per tile plus a JSON sidecar holding split provenance (seed,
//! proportions) that does not fit the tabular schema.

mod import;
mod pipeline;
mod synth;

pub use import::{import_directory, label_from_metadata, ImportSummary};
pub use pipeline::{
    augment_manifest, augment_tiles, estimate_sea_background, flip_horizontal, flip_vertical,
    normalize_tile, denormalize_tile, resize_or_pad, rotate_bilinear, select_polarization,
    split_dataset, AugmentPolicy, DB_MAX, DB_MIN,
};
pub use synth::{synth_dataset, SynthParams};

use crate::error::{CoreError, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const TILE_MAGIC: &[u8; 4] = b"SART";
pub const TILE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShipClass {
    Tanker,
    ContainerShip,
    BulkCarrier,
}

impl ShipClass {
    pub const ALL: [ShipClass; 3] = [ShipClass::Tanker, ShipClass::ContainerShip, ShipClass::BulkCarrier];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShipClass::Tanker => "Tanker",
            ShipClass::ContainerShip => "ContainerShip",
            ShipClass::BulkCarrier => "BulkCarrier",
        }
    }

    /// Stable class index used for labels, confusion matrices, and reports.
    pub fn index(&self) -> usize {
        match self {
            ShipClass::Tanker => 0,
            ShipClass::ContainerShip => 1,
            ShipClass::BulkCarrier => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ShipClass> {
        ShipClass::ALL.get(i).copied()
    }

    /// Filesystem-friendly name used in tile ids and checkpoint filenames.
    pub fn slug(&self) -> &'static str {
        match self {
            ShipClass::Tanker => "tanker",
            ShipClass::ContainerShip => "container",
            ShipClass::BulkCarrier => "bulk",
        }
    }

    /// One-hot label over the stable class order.
    pub fn one_hot<T: sarcaps_tensor::Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); ShipClass::ALL.len()];
        v[self.index()] = T::one();
        v
    }
}

impl fmt::Display for ShipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShipClass {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Tanker" => Ok(ShipClass::Tanker),
            "ContainerShip" | "Container Ship" => Ok(ShipClass::ContainerShip),
            "BulkCarrier" | "Bulk Carrier" => Ok(ShipClass::BulkCarrier),
            other => Err(CoreError::InvalidArgument(format!("unknown ship class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarization {
    VH,
    VV,
}

impl Polarization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Polarization::VH => "VH",
            Polarization::VV => "VV",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Polarization::VH => 0,
            Polarization::VV => 1,
        }
    }

    fn from_code(c: u8) -> Option<Polarization> {
        match c {
            0 => Some(Polarization::VH),
            1 => Some(Polarization::VV),
            _ => None,
        }
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarization {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VH" => Ok(Polarization::VH),
            "VV" => Ok(Polarization::VV),
            other => Err(CoreError::InvalidArgument(format!("unknown polarization {other:?}"))),
        }
    }
}

/// Which experiment channel(s) a run draws from. `VHVV` is the union of
/// both channels as independent single-channel samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PolarizationMode {
    VH,
    VV,
    #[serde(alias = "VH-VV")]
    VHVV,
}

impl PolarizationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolarizationMode::VH => "VH",
            PolarizationMode::VV => "VV",
            PolarizationMode::VHVV => "VH-VV",
        }
    }

    pub fn accepts(&self, pol: Polarization) -> bool {
        match self {
            PolarizationMode::VH => pol == Polarization::VH,
            PolarizationMode::VV => pol == Polarization::VV,
            PolarizationMode::VHVV => true,
        }
    }
}

impl fmt::Display for PolarizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolarizationMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VH" => Ok(PolarizationMode::VH),
            "VV" => Ok(PolarizationMode::VV),
            "VHVV" | "VH-VV" => Ok(PolarizationMode::VHVV),
            other => Err(CoreError::InvalidArgument(format!("unknown polarization mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    /// Not yet assigned by `dataset split`.
    #[default]
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Unassigned => "",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "" => Ok(Split::Unassigned),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::BadManifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One σ₀ tile on disk, single- (or in principle multi-) channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SarTile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub polarization: Polarization,
    /// Row-major, channel-fastest, linear-power backscatter.
    pub data: Vec<f32>,
}

impl SarTile {
    pub fn new(height: usize, width: usize, polarization: Polarization, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::InvalidArgument(format!(
                "tile data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(SarTile { height, width, channels: 1, polarization, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        buf.extend_from_slice(TILE_MAGIC);
        buf.extend_from_slice(&TILE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.push(self.channels as u8);
        buf.push(self.polarization.code());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SarTile> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CoreError::io(path, e))?;
        let bad = |detail: &str| CoreError::BadTile { path: path.to_path_buf(), detail: detail.into() };
        if bytes.len() < 12 {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != TILE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TILE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let channels = bytes[10] as usize;
        let polarization = Polarization::from_code(bytes[11]).ok_or_else(|| bad("bad polarization code"))?;
        let expected = 12 + height * width * channels * 4;
        if bytes.len() != expected {
            return Err(bad(&format!("size {} != expected {expected}", bytes.len())));
        }
        let data: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(SarTile { height, width, channels, polarization, data })
    }
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub id: String,
    pub path: PathBuf,
    pub ship_class: ShipClass,
    pub polarization: Polarization,
    pub split: Split,
    pub synthetic: bool,
    pub elaborated_type: String,
    pub ais_type: Option<u32>,
}

/// Split provenance stored beside the CSV (`<manifest>.meta.json`).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ManifestMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_proportions: Option<[u32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "id", "path", "ship_class", "polarization", "split", "synthetic", "elaborated_type", "ais_type",
];

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    /// Directory containing the manifest CSV; tile paths resolve against it.
    pub dir: PathBuf,
    pub records: Vec<TileRecord>,
    pub meta: ManifestMeta,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Manifest { dir: dir.into(), records: Vec::new(), meta: ManifestMeta::default() }
    }

    fn meta_path(csv_path: &Path) -> PathBuf {
        let mut p = csv_path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// No synthetic tile may sit in the validation or test split.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.synthetic && matches!(r.split, Split::Val | Split::Test) {
                return Err(CoreError::BadManifest(format!(
                    "synthetic tile {} assigned to {}",
                    r.id,
                    r.split.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = csv_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                &r.path.to_string_lossy(),
                r.ship_class.as_str(),
                r.polarization.as_str(),
                r.split.as_str(),
                if r.synthetic { "true" } else { "false" },
                r.elaborated_type.as_str(),
                &r.ais_type.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| CoreError::io(csv_path, e))?;
        let meta_json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(Self::meta_path(csv_path), meta_json)
            .map_err(|e| CoreError::io(csv_path, e))?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Manifest> {
        let dir = csv_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut rdr = csv::Reader::from_path(csv_path)?;
        {
            let headers = rdr.headers()?;
            let got: Vec<&str> = headers.iter().collect();
            if got != MANIFEST_HEADER {
                return Err(CoreError::BadManifest(format!(
                    "header {:?} does not match expected {:?}",
                    got, MANIFEST_HEADER
                )));
            }
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != MANIFEST_HEADER.len() {
                return Err(CoreError::BadManifest(format!("row with {} fields", row.len())));
            }
            let ais = row[7].trim();
            records.push(TileRecord {
                id: row[0].to_string(),
                path: PathBuf::from(&row[1]),
                ship_class: row[2].parse()?,
                polarization: row[3].parse()?,
                split: Split::parse(&row[4])?,
                synthetic: match &row[5] {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(CoreError::BadManifest(format!("bad synthetic flag {other:?}")))
                    }
                },
                elaborated_type: row[6].to_string(),
                ais_type: if ais.is_empty() {
                    None
                } else {
                    Some(ais.parse().map_err(|_| {
                        CoreError::BadManifest(format!("bad ais_type {ais:?}"))
                    })?)
                },
            });
        }
        let meta = match std::fs::read_to_string(Self::meta_path(csv_path)) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => ManifestMeta::default(),
        };
        let m = Manifest { dir, records, meta };
        m.validate()?;
        Ok(m)
    }

    pub fn tile_path(&self, record: &TileRecord) -> PathBuf {
        self.dir.join(&record.path)
    }

    pub fn load_tile(&self, record: &TileRecord) -> Result<SarTile> {
        SarTile::read(&self.tile_path(record))
    }

    /// Records of one split; `Unassigned` records count as training data so
    /// unsplit manifests can still train/overfit.
    pub fn split_records(&self, split: Split) -> Vec<&TileRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split || (split == Split::Train && r.split == Split::Unassigned))
            .collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> BTreeMap<ShipClass, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            let keep = match split {
                None => true,
                Some(s) => r.split == s || (s == Split::Train && r.split == Split::Unassigned),
            };
            if keep {
                *counts.entry(r.ship_class).or_insert(0) += 1;
            }
        }
        counts
    }
}
