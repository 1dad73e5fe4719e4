//! Directory importer: scans a tree of tile rasters plus per-chip
//! metadata (XML or JSON) carrying `ElaboratedType` and
//! `AISShipInformation`, keeps the chips whose label passes the class
//! filter, and builds a self-contained manifest (tiles are copied in).

use super::{Manifest, SarTile, ShipClass, Split, TileRecord};
use crate::error::{CoreError, Result};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use walkdir::WalkDir;

/// The class filter: both the human-readable elaborated type and the AIS
/// numeric type must agree. Everything else is rejected (not an error).
pub fn label_from_metadata(elaborated_type: &str, ais_type: u32) -> Option<ShipClass> {
    match elaborated_type.trim() {
        "Container Ship" if (70..=79).contains(&ais_type) => Some(ShipClass::ContainerShip),
        "Tanker" if (80..=89).contains(&ais_type) => Some(ShipClass::Tanker),
        "Bulk Carrier" if (70..=79).contains(&ais_type) => Some(ShipClass::BulkCarrier),
        _ => None,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ImportSummary {
    pub imported: usize,
    pub rejected: usize,
    pub missing_metadata: usize,
}

fn extract_xml_field(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim().to_string())
}

fn find_json_field(value: &serde_json::Value, key: &str) -> Option<serde_json::Value> {
    match value {
        serde_json::Value::Object(map) => {
            if let Some(v) = map.get(key) {
                return Some(v.clone());
            }
            map.values().find_map(|v| find_json_field(v, key))
        }
        serde_json::Value::Array(items) => items.iter().find_map(|v| find_json_field(v, key)),
        _ => None,
    }
}

/// Metadata fields for one chip, however they were encoded.
fn read_metadata(path: &Path) -> Result<Option<(String, u32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let elaborated = find_json_field(&value, "ElaboratedType")
            .and_then(|v| v.as_str().map(str::to_string));
        let ais = find_json_field(&value, "AISShipInformation").and_then(|v| match v {
            serde_json::Value::Number(n) => n.as_u64().map(|x| x as u32),
            serde_json::Value::String(s) => s.trim().parse().ok(),
            _ => None,
        });
        Ok(elaborated.zip(ais))
    } else {
        let elaborated = extract_xml_field(&text, "ElaboratedType");
        let ais = extract_xml_field(&text, "AISShipInformation").and_then(|s| s.parse().ok());
        Ok(elaborated.zip(ais))
    }
}

fn metadata_sibling(tile_path: &Path) -> Option<PathBuf> {
    for ext in ["xml", "json"] {
        let candidate = tile_path.with_extension(ext);
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

/// Walk `input` for `.sart` tiles, filter by metadata, copy accepted tiles
/// under `manifest_dir/tiles/`, and return the manifest plus counts.
pub fn import_directory(input: &Path, manifest_dir: &Path) -> Result<(Manifest, ImportSummary)> {
    let mut manifest = Manifest::new(manifest_dir);
    manifest.meta.source = Some(format!("import {}", input.display()));
    let mut summary = ImportSummary::default();
    let mut seen_ids: HashSet<String> = HashSet::new();

    let mut tile_paths: Vec<PathBuf> = WalkDir::new(input)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "sart"))
        .collect();
    tile_paths.sort(); // walk order is filesystem-dependent; imports are not

    for tile_path in tile_paths {
        let Some(meta_path) = metadata_sibling(&tile_path) else {
            summary.missing_metadata += 1;
            continue;
        };
        let Some((elaborated, ais)) = read_metadata(&meta_path)? else {
            summary.missing_metadata += 1;
            continue;
        };
        let Some(class) = label_from_metadata(&elaborated, ais) else {
            summary.rejected += 1;
            continue;
        };
        let tile = SarTile::read(&tile_path)?;
        let stem = tile_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("chip{}", summary.imported));
        let mut id = stem.clone();
        let mut counter = 2;
        while !seen_ids.insert(id.clone()) {
            id = format!("{stem}-{counter}");
            counter += 1;
        }
        let rel = PathBuf::from("tiles").join(format!("{id}.sart"));
        tile.write(&manifest_dir.join(&rel))?;
        manifest.records.push(TileRecord {
            id,
            path: rel,
            ship_class: class,
            polarization: tile.polarization,
            split: Split::Unassigned,
            synthetic: false,
            elaborated_type: elaborated,
            ais_type: Some(ais),
        });
        summary.imported += 1;
    }
    Ok((manifest, summary))
}
