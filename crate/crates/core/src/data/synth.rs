//! Procedural desk-scale dataset: three ship-like classes on exponential
//! sea clutter, for tests and demos where real chips are unavailable.
//!
//! Class recipes (by visual motif, not radiometric realism):
//! - Tanker: one elongated bright hull, smooth.
//! - ContainerShip: hull plus a few extra-bright rectangular deck blocks.
//! - BulkCarrier: hull modulated by periodic cross-axis stripes.

use super::{Manifest, Polarization, SarTile, ShipClass, Split, TileRecord};
use crate::error::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Mean linear-power sea clutter (≈ −27 dB).
const SEA_MEAN: f32 = 0.002;
/// Baseline hull backscatter before speckle (≈ −10 dB). Kept well below the
/// normalization ceiling so the ContainerShip deck blocks stay distinguishable
/// from speckle highlights instead of both clipping at the top of the range.
const HULL_BASE: f32 = 0.10;

fn exp_sample(rng: &mut ChaCha8Rng, mean: f32) -> f32 {
    let u: f32 = rng.gen_range(0.0..1.0);
    -mean * (1.0 - u).max(1e-7).ln()
}

/// One tile plus its ship mask (true where hull pixels were painted).
pub fn generate_tile(class: ShipClass, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<bool>) {
    let s = size as f32;
    let mut data: Vec<f32> = (0..size * size).map(|_| exp_sample(rng, SEA_MEAN)).collect();
    let mut mask = vec![false; size * size];

    let cy = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let cx = s / 2.0 + rng.gen_range(-s / 16.0..s / 16.0);
    let length = rng.gen_range(0.50..0.68) * s;
    let width = rng.gen_range(0.14..0.20) * s;
    let theta = rng.gen_range(0.0..std::f32::consts::PI);
    let (sin, cos) = theta.sin_cos();

    // Deck-block stations (ContainerShip): three fixed berths along the keel
    // with a little jitter, so the blocks stay separated instead of landing on
    // top of each other. Drawn up front so the RNG draw count per tile is
    // fixed per class.
    let blocks: Vec<f32> = [-0.55f32, 0.0, 0.55]
        .iter()
        .map(|base| base + rng.gen_range(-0.12..0.12f32))
        .collect();
    let stripe_period = rng.gen_range(0.22..0.30) * length;
    let brightness = rng.gen_range(0.9..1.15) * HULL_BASE;

    for y in 0..size {
        for x in 0..size {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            // hull-frame coordinates: u along the keel, v across
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let eu = u / (length / 2.0);
            let ev = v / (width / 2.0);
            if eu * eu + ev * ev > 1.0 {
                continue;
            }
            let mut value = brightness * (0.85 + exp_sample(rng, 0.15));
            match class {
                ShipClass::Tanker => {}
                ShipClass::ContainerShip => {
                    for &b in &blocks {
                        let center = b * length / 2.0;
                        if (u - center).abs() < length * 0.10 && ev.abs() < 0.75 {
                            value *= 6.0;
                        }
                    }
                }
                ShipClass::BulkCarrier => {
                    let phase = (u / stripe_period * std::f32::consts::TAU).sin();
                    value *= if phase > 0.0 { 2.5 } else { 0.4 };
                }
            }
            data[y * size + x] = value;
            mask[y * size + x] = true;
        }
    }
    (data, mask)
}

fn class_slug(class: ShipClass) -> &'static str {
    class.slug()
}

fn class_metadata(class: ShipClass) -> (&'static str, u32) {
    match class {
        ShipClass::Tanker => ("Tanker", 84),
        ShipClass::ContainerShip => ("Container Ship", 71),
        ShipClass::BulkCarrier => ("Bulk Carrier", 79),
    }
}

/// Generate `per_class` tiles per class under `dir/tiles/`, returning a
/// manifest rooted at `dir`. Bit-deterministic for a fixed seed: each tile
/// draws from its own counter-addressed RNG stream.
pub fn synth_dataset(params: &SynthParams, dir: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new(dir);
    manifest.meta.source = Some(format!(
        "synth per_class={} size={} seed={}",
        params.per_class, params.size, params.seed
    ));
    let mut stream = 0u64;
    for class in ShipClass::ALL {
        let (elaborated, ais) = class_metadata(class);
        for i in 0..params.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(stream);
            stream += 1;
            let (data, _) = generate_tile(class, params.size, &mut rng);
            let id = format!("{}-{i:04}", class_slug(class));
            let rel = PathBuf::from("tiles").join(format!("{id}.sart"));
            let tile = SarTile::new(params.size, params.size, Polarization::VH, data)?;
            tile.write(&dir.join(&rel))?;
            manifest.records.push(TileRecord {
                id,
                path: rel,
                ship_class: class,
                polarization: Polarization::VH,
                split: Split::Unassigned,
                synthetic: false,
                elaborated_type: elaborated.into(),
                ais_type: Some(ais),
            });
        }
    }
    Ok(manifest)
}
