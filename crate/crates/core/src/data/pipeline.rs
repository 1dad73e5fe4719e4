//! Tile preparation: dB normalization, sea-background estimation,
//! resize-or-pad to the model input size, polarization selection,
//! stratified splitting, and flip/rotate augmentation.

use super::{Manifest, PolarizationMode, SarTile, ShipClass, Split, TileRecord};
use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::str::FromStr;

/// Default dB window mapped onto [0,1]: −35 dB sea clutter floor up to
/// 0 dB ship scatterers. Configurable at call sites.
pub const DB_MIN: f32 = -35.0;
pub const DB_MAX: f32 = 0.0;

const SIGMA_EPS: f32 = 1e-10;

/// Map linear-power σ₀ to [0,1] through a clamped dB window.
pub fn normalize_tile(data: &[f32], db_min: f32, db_max: f32) -> Result<Vec<f32>> {
    if db_min >= db_max {
        return Err(CoreError::InvalidArgument(format!(
            "db_min {db_min} must be below db_max {db_max}"
        )));
    }
    let span = db_max - db_min;
    Ok(data
        .iter()
        .map(|&x| {
            let db = 10.0 * x.max(SIGMA_EPS).log10();
            ((db - db_min) / span).clamp(0.0, 1.0)
        })
        .collect())
}

/// Inverse of [`normalize_tile`] on the interior of the window.
pub fn denormalize_tile(data: &[f32], db_min: f32, db_max: f32) -> Result<Vec<f32>> {
    if db_min >= db_max {
        return Err(CoreError::InvalidArgument(format!(
            "db_min {db_min} must be below db_max {db_max}"
        )));
    }
    let span = db_max - db_min;
    Ok(data
        .iter()
        .map(|&y| {
            let db = y.clamp(0.0, 1.0) * span + db_min;
            10f32.powf(db / 10.0)
        })
        .collect())
}

/// Median σ₀ over the 2-pixel-wide border ring. The ship sits centered in
/// OpenSARShip-style chips, so the ring is (almost) pure sea.
pub fn estimate_sea_background(tile: &SarTile) -> Result<f32> {
    if tile.height < 8 || tile.width < 8 {
        return Err(CoreError::InvalidArgument(format!(
            "tile {}x{} too small for border-ring estimate (need >= 8x8)",
            tile.height, tile.width
        )));
    }
    let (h, w) = (tile.height, tile.width);
    let mut ring = Vec::with_capacity(2 * 2 * (h + w));
    for y in 0..h {
        for x in 0..w {
            if y < 2 || y >= h - 2 || x < 2 || x >= w - 2 {
                ring.push(tile.data[y * w + x]);
            }
        }
    }
    ring.sort_by(f32::total_cmp);
    let n = ring.len();
    Ok(if n % 2 == 1 { ring[n / 2] } else { 0.5 * (ring[n / 2 - 1] + ring[n / 2]) })
}

fn bilinear_sample(data: &[f32], h: usize, w: usize, sy: f32, sx: f32) -> f32 {
    let sy = sy.clamp(0.0, (h - 1) as f32);
    let sx = sx.clamp(0.0, (w - 1) as f32);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f32;
    let fx = sx - x0 as f32;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bring a tile to `target`×`target`: larger tiles are bilinearly
/// resampled (half-pixel centers), smaller ones center-padded with the
/// sea-background estimate, exact-size tiles pass through untouched.
pub fn resize_or_pad(tile: &SarTile, target: usize) -> Result<SarTile> {
    if tile.height == 0 || tile.width == 0 {
        return Err(CoreError::InvalidArgument("empty tile".into()));
    }
    let (h, w) = (tile.height, tile.width);
    if h == target && w == target {
        return Ok(tile.clone());
    }
    if h.max(w) > target {
        let scale_y = h as f32 / target as f32;
        let scale_x = w as f32 / target as f32;
        let mut out = vec![0f32; target * target];
        for y in 0..target {
            let sy = (y as f32 + 0.5) * scale_y - 0.5;
            for x in 0..target {
                let sx = (x as f32 + 0.5) * scale_x - 0.5;
                out[y * target + x] = bilinear_sample(&tile.data, h, w, sy, sx);
            }
        }
        return SarTile::new(target, target, tile.polarization, out);
    }
    // Pad. Tiles too small for the ring estimator fall back to the global
    // median, which is the same statistic on everything we have.
    let background = if h >= 8 && w >= 8 {
        estimate_sea_background(tile)?
    } else {
        let mut all = tile.data.clone();
        all.sort_by(f32::total_cmp);
        let n = all.len();
        if n % 2 == 1 { all[n / 2] } else { 0.5 * (all[n / 2 - 1] + all[n / 2]) }
    };
    let mut out = vec![background; target * target];
    let oy = (target - h) / 2;
    let ox = (target - w) / 2;
    for y in 0..h {
        let dst = (y + oy) * target + ox;
        out[dst..dst + w].copy_from_slice(&tile.data[y * w..y * w + w]);
    }
    SarTile::new(target, target, tile.polarization, out)
}

pub fn flip_horizontal(tile: &SarTile) -> SarTile {
    let (h, w) = (tile.height, tile.width);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = tile.data[y * w + (w - 1 - x)];
        }
    }
    SarTile { height: h, width: w, channels: 1, polarization: tile.polarization, data: out }
}

pub fn flip_vertical(tile: &SarTile) -> SarTile {
    let (h, w) = (tile.height, tile.width);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&tile.data[(h - 1 - y) * w..(h - y) * w]);
    }
    SarTile { height: h, width: w, channels: 1, polarization: tile.polarization, data: out }
}

/// Rotate about the tile center by `angle` radians, bilinear sampling,
/// out-of-frame corners filled with `fill`.
pub fn rotate_bilinear(tile: &SarTile, angle: f32, fill: f32) -> SarTile {
    let (h, w) = (tile.height, tile.width);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![fill; h * w];
    for y in 0..h {
        let dy = y as f32 - cy;
        for x in 0..w {
            let dx = x as f32 - cx;
            // inverse mapping: rotate output coords by −angle
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx >= 0.0 && sx <= (w - 1) as f32 && sy >= 0.0 && sy <= (h - 1) as f32 {
                out[y * w + x] = bilinear_sample(&tile.data, h, w, sy, sx);
            }
        }
    }
    SarTile { height: h, width: w, channels: 1, polarization: tile.polarization, data: out }
}

/// Records visible under a polarization mode (`VHVV` = union of both).
pub fn select_polarization<'a>(manifest: &'a Manifest, mode: PolarizationMode) -> Vec<&'a TileRecord> {
    manifest.records.iter().filter(|r| mode.accepts(r.polarization)).collect()
}

/// Assign train/val/test stratified per class:
/// floor(n·p_train), floor(n·p_val), remainder to test, shuffled by seed.
/// Synthetic records always stay in the training split.
pub fn split_dataset(manifest: &mut Manifest, proportions: [u32; 3], seed: u64) -> Result<()> {
    if proportions.iter().sum::<u32>() != 100 {
        return Err(CoreError::InvalidArgument(format!(
            "split proportions {proportions:?} must sum to 100"
        )));
    }
    if manifest.records.is_empty() {
        return Err(CoreError::BadManifest("cannot split an empty manifest".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in ShipClass::ALL {
        let mut idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.ship_class == class && !r.synthetic)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = n * proportions[0] as usize / 100;
        let n_val = n * proportions[1] as usize / 100;
        for (rank, &i) in idx.iter().enumerate() {
            manifest.records[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    for r in &mut manifest.records {
        if r.synthetic {
            r.split = Split::Train;
        }
    }
    manifest.meta.split_seed = Some(seed);
    manifest.meta.split_proportions = Some(proportions);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPolicy {
    /// original + horizontal flip + vertical flip (3n)
    A,
    /// policy A + one random rotation per sample (4n)
    B,
}

impl FromStr for AugmentPolicy {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AugmentPolicy::A),
            "B" | "b" => Ok(AugmentPolicy::B),
            other => Err(CoreError::InvalidArgument(format!("unknown augment policy {other:?}"))),
        }
    }
}

/// Expand training tiles in memory. Returns `(suffix, tile)` variants per
/// input, originals included, in a stable order. Errors if any record is
/// assigned to val/test — augmentation is a train-split-only operation.
pub fn augment_tiles(
    items: &[(&TileRecord, SarTile)],
    policy: AugmentPolicy,
    seed: u64,
) -> Result<Vec<(String, SarTile)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(items.len() * 4);
    for (record, tile) in items {
        if matches!(record.split, Split::Val | Split::Test) {
            return Err(CoreError::InvalidArgument(format!(
                "augmentation requested for {} which is in the {} split",
                record.id,
                record.split.as_str()
            )));
        }
        out.push((record.id.clone(), tile.clone()));
        out.push((format!("{}-hf", record.id), flip_horizontal(tile)));
        out.push((format!("{}-vf", record.id), flip_vertical(tile)));
        if policy == AugmentPolicy::B {
            let angle = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
            let fill = if tile.height >= 8 && tile.width >= 8 {
                estimate_sea_background(tile)?
            } else {
                0.0
            };
            out.push((format!("{}-rot", record.id), rotate_bilinear(tile, angle, fill)));
        }
    }
    Ok(out)
}

/// Disk-level augmentation: expands the training split of a manifest,
/// writing new tiles under `aug/` and appending records. Returns the
/// number of records added.
pub fn augment_manifest(manifest: &mut Manifest, policy: AugmentPolicy, seed: u64) -> Result<usize> {
    let train: Vec<TileRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(CoreError::BadManifest("no training records to augment".into()));
    }
    let mut loaded = Vec::with_capacity(train.len());
    for r in &train {
        let tile = manifest.load_tile(r)?;
        loaded.push((r, tile));
    }
    let pairs: Vec<(&TileRecord, SarTile)> = loaded.iter().map(|(r, t)| (*r, t.clone())).collect();
    let variants = augment_tiles(&pairs, policy, seed)?;

    let per_sample = match policy {
        AugmentPolicy::A => 3,
        AugmentPolicy::B => 4,
    };
    let mut added = 0;
    for (i, (id, tile)) in variants.iter().enumerate() {
        if i % per_sample == 0 {
            continue; // the original is already in the manifest
        }
        let source = &train[i / per_sample];
        let rel = PathBuf::from("aug").join(format!("{id}.sart"));
        tile.write(&manifest.dir.join(&rel))?;
        manifest.records.push(TileRecord {
            id: id.clone(),
            path: rel,
            ship_class: source.ship_class,
            polarization: source.polarization,
            split: source.split,
            synthetic: source.synthetic,
            elaborated_type: source.elaborated_type.clone(),
            ais_type: source.ais_type,
        });
        added += 1;
    }
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Polarization;

    fn tile(h: usize, w: usize, data: Vec<f32>) -> SarTile {
        SarTile::new(h, w, Polarization::VH, data).unwrap()
    }

    #[test]
    fn normalize_closed_forms() {
        let out = normalize_tile(&[1.0, 10f32.powf(-3.5), 0.0], DB_MIN, DB_MAX).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6, "0 dB -> 1, got {}", out[0]);
        assert!(out[1].abs() < 1e-5, "-35 dB -> 0, got {}", out[1]);
        assert_eq!(out[2], 0.0, "zero power clamps to 0");
    }

    #[test]
    fn normalize_rejects_inverted_window() {
        assert!(normalize_tile(&[1.0], 0.0, -35.0).is_err());
        assert!(denormalize_tile(&[0.5], 5.0, 5.0).is_err());
    }

    #[test]
    fn normalize_denormalize_roundtrip() {
        let values: Vec<f32> = (1..100).map(|i| i as f32 / 100.0).collect();
        let sigma = denormalize_tile(&values, DB_MIN, DB_MAX).unwrap();
        let back = normalize_tile(&sigma, DB_MIN, DB_MAX).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn sea_background_constant_and_bright_center() {
        let t = tile(8, 8, vec![0.25; 64]);
        assert_eq!(estimate_sea_background(&t).unwrap(), 0.25);

        let mut data = vec![0.01f32; 100];
        for y in 2..8 {
            for x in 2..8 {
                data[y * 10 + x] = 1.0;
            }
        }
        let t = tile(10, 10, data);
        assert_eq!(estimate_sea_background(&t).unwrap(), 0.01);
    }

    #[test]
    fn sea_background_ignores_interior_permutations() {
        let mut data: Vec<f32> = (0..144).map(|i| i as f32 * 0.01).collect();
        let t1 = tile(12, 12, data.clone());
        let b1 = estimate_sea_background(&t1).unwrap();
        // scramble the interior only
        for y in 2..10 {
            for x in 2..10 {
                data[y * 12 + x] = 9.9 - data[y * 12 + x];
            }
        }
        let t2 = tile(12, 12, data);
        assert_eq!(estimate_sea_background(&t2).unwrap(), b1);
    }

    #[test]
    fn sea_background_needs_eight_by_eight() {
        let t = tile(7, 8, vec![0.1; 56]);
        assert!(estimate_sea_background(&t).is_err());
    }

    #[test]
    fn resize_identity_at_target() {
        let data: Vec<f32> = (0..128 * 128).map(|i| (i % 97) as f32 * 0.01).collect();
        let t = tile(128, 128, data.clone());
        let out = resize_or_pad(&t, 128).unwrap();
        assert_eq!(out.data, data, "exact-size tiles must pass through bit-identically");
    }

    #[test]
    fn pad_constant_tile_stays_constant() {
        let t = tile(64, 64, vec![0.3; 64 * 64]);
        let out = resize_or_pad(&t, 128).unwrap();
        assert_eq!(out.height, 128);
        assert!(out.data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn pad_preserves_interior_pixels() {
        let data: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let t = tile(10, 10, data.clone());
        let out = resize_or_pad(&t, 16).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(out.data[(y + 3) * 16 + (x + 3)], data[y * 10 + x]);
            }
        }
    }

    #[test]
    fn downscale_by_two_equals_box_average() {
        // independent oracle: plain 2x2 block means
        let n = 256;
        let data: Vec<f32> = (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                if (y / 4 + x / 4) % 2 == 0 { 1.0 } else { 0.05 }
            })
            .collect();
        let t = tile(n, n, data.clone());
        let out = resize_or_pad(&t, 128).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                let mean = (data[(2 * y) * n + 2 * x]
                    + data[(2 * y) * n + 2 * x + 1]
                    + data[(2 * y + 1) * n + 2 * x]
                    + data[(2 * y + 1) * n + 2 * x + 1])
                    / 4.0;
                let got = out.data[y * 128 + x];
                assert!((got - mean).abs() < 1e-6, "at ({y},{x}): {got} vs {mean}");
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let data: Vec<f32> = (0..48).map(|i| i as f32 * 1.7).collect();
        let t = tile(6, 8, data.clone());
        assert_eq!(flip_horizontal(&flip_horizontal(&t)).data, data);
        assert_eq!(flip_vertical(&flip_vertical(&t)).data, data);
    }

    #[test]
    fn rotation_by_zero_is_identity_and_fill_works() {
        let data: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let t = tile(8, 8, data.clone());
        let r0 = rotate_bilinear(&t, 0.0, -1.0);
        assert_eq!(r0.data, data);

        let constant = tile(16, 16, vec![0.2; 256]);
        let r45 = rotate_bilinear(&constant, std::f32::consts::FRAC_PI_4, 0.2);
        assert!(r45.data.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    fn record(i: usize, class: ShipClass, pol: Polarization) -> TileRecord {
        TileRecord {
            id: format!("r{i}"),
            path: PathBuf::from(format!("tiles/r{i}.sart")),
            ship_class: class,
            polarization: pol,
            split: Split::Unassigned,
            synthetic: false,
            elaborated_type: class.as_str().into(),
            ais_type: Some(75),
        }
    }

    #[test]
    fn split_floor_rule_on_2738_records() {
        let mut m = Manifest::new("/tmp/unused");
        for i in 0..2738 {
            m.records.push(record(i, ShipClass::Tanker, Polarization::VH));
        }
        split_dataset(&mut m, [64, 16, 20], 3).unwrap();
        let count = |s: Split| m.records.iter().filter(|r| r.split == s).count();
        assert_eq!(count(Split::Train), 1752);
        assert_eq!(count(Split::Val), 438);
        assert_eq!(count(Split::Test), 548);
    }

    #[test]
    fn split_is_stratified_deterministic_and_exhaustive() {
        let build = || {
            let mut m = Manifest::new("/tmp/unused");
            for i in 0..100 {
                m.records.push(record(i, ShipClass::Tanker, Polarization::VH));
            }
            for i in 100..150 {
                m.records.push(record(i, ShipClass::ContainerShip, Polarization::VH));
            }
            m
        };
        let mut m1 = build();
        split_dataset(&mut m1, [64, 16, 20], 7).unwrap();
        let count = |m: &Manifest, c: ShipClass, s: Split| {
            m.records.iter().filter(|r| r.ship_class == c && r.split == s).count()
        };
        assert_eq!(count(&m1, ShipClass::Tanker, Split::Train), 64);
        assert_eq!(count(&m1, ShipClass::Tanker, Split::Val), 16);
        assert_eq!(count(&m1, ShipClass::Tanker, Split::Test), 20);
        assert_eq!(count(&m1, ShipClass::ContainerShip, Split::Train), 32);
        assert_eq!(count(&m1, ShipClass::ContainerShip, Split::Val), 8);
        assert_eq!(count(&m1, ShipClass::ContainerShip, Split::Test), 10);
        assert!(m1.records.iter().all(|r| r.split != Split::Unassigned));

        let mut m2 = build();
        split_dataset(&mut m2, [64, 16, 20], 7).unwrap();
        for (a, b) in m1.records.iter().zip(&m2.records) {
            assert_eq!(a.split, b.split, "same seed must give identical assignment");
        }

        let mut m3 = build();
        split_dataset(&mut m3, [64, 16, 20], 8).unwrap();
        assert!(
            m1.records.iter().zip(&m3.records).any(|(a, b)| a.split != b.split),
            "different seed should shuffle differently"
        );
    }

    #[test]
    fn split_keeps_synthetic_in_train() {
        let mut m = Manifest::new("/tmp/unused");
        for i in 0..20 {
            let mut r = record(i, ShipClass::Tanker, Polarization::VH);
            r.synthetic = i % 2 == 0;
            m.records.push(r);
        }
        split_dataset(&mut m, [64, 16, 20], 1).unwrap();
        for r in &m.records {
            if r.synthetic {
                assert_eq!(r.split, Split::Train);
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn split_rejects_bad_proportions_and_empty_manifest() {
        let mut m = Manifest::new("/tmp/unused");
        m.records.push(record(0, ShipClass::Tanker, Polarization::VH));
        assert!(split_dataset(&mut m, [60, 20, 10], 0).is_err());
        let mut empty = Manifest::new("/tmp/unused");
        assert!(split_dataset(&mut empty, [64, 16, 20], 0).is_err());
    }

    #[test]
    fn polarization_union_doubles_paired_chips() {
        let mut m = Manifest::new("/tmp/unused");
        for i in 0..10 {
            m.records.push(record(i, ShipClass::Tanker, Polarization::VH));
            m.records.push(record(i + 1000, ShipClass::Tanker, Polarization::VV));
        }
        assert_eq!(select_polarization(&m, PolarizationMode::VH).len(), 10);
        assert_eq!(select_polarization(&m, PolarizationMode::VV).len(), 10);
        assert_eq!(select_polarization(&m, PolarizationMode::VHVV).len(), 20);
    }

    #[test]
    fn augment_counts_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(dir.path());
        for i in 0..10 {
            let mut r = record(i, ShipClass::Tanker, Polarization::VH);
            r.split = Split::Train;
            let data: Vec<f32> = (0..256).map(|p| ((p + i) % 10) as f32 * 0.02).collect();
            let t = tile(16, 16, data);
            t.write(&dir.path().join(&r.path)).unwrap();
            m.records.push(r);
        }
        let mut a = m.clone();
        let added = augment_manifest(&mut a, AugmentPolicy::A, 5).unwrap();
        assert_eq!(added, 20);
        assert_eq!(a.split_records(Split::Train).len(), 30, "policy A must give exactly 3n");

        let mut b = m.clone();
        let added = augment_manifest(&mut b, AugmentPolicy::B, 5).unwrap();
        assert_eq!(added, 30);
        assert_eq!(b.split_records(Split::Train).len(), 40, "policy B must give exactly 4n");
    }

    #[test]
    fn augment_refuses_val_and_test_records() {
        let mut r = record(0, ShipClass::Tanker, Polarization::VH);
        r.split = Split::Test;
        let t = tile(8, 8, vec![0.1; 64]);
        assert!(augment_tiles(&[(&r, t)], AugmentPolicy::A, 0).is_err());
    }
}
