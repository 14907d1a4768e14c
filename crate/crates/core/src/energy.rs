//! ADC precision assignment and normalized ADC energy.
//!
//! A tile's ADC needs `B - x` bits where `x` is the number of bits its least
//! sparse column lets us drop and `B = log2 n`. Energy is linear in
//! precision and normalized by a network where every tile runs at `B` bits.

use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::levels::{Level, SparsityLevelSet};
use crate::prune::PruneMask;
use crate::sparsity::{tile_stats, TileStat};
use crate::tiling::{partition, LayerMatrix, TileGrid};

/// Level and bit precision a pruned tile needs.
pub fn assign_bits(stat: &TileStat, levels: &SparsityLevelSet) -> (Level, u32) {
    let level = levels.level_for_max_nnz(stat.max_nnz());
    (level, levels.bits(level))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileAdc {
    pub index: usize,
    pub block_row: usize,
    pub block_col: usize,
    pub max_nnz: usize,
    pub level: Level,
    pub bits: u32,
}

/// Per-tile ADC precision for a set of tiles sharing one tile size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcProfile {
    pub tile_size: usize,
    pub full_bits: u32,
    pub tiles: Vec<TileAdc>,
}

impl AdcProfile {
    pub fn from_grid(grid: &TileGrid) -> Result<Self> {
        let levels = SparsityLevelSet::new(grid.tile_size())?;
        let tiles = grid
            .tiles
            .iter()
            .map(|tile| {
                let stat = tile_stats(tile);
                let (level, bits) = assign_bits(&stat, &levels);
                let (block_row, block_col) = grid.layout.block(tile.index);
                TileAdc {
                    index: tile.index,
                    block_row,
                    block_col,
                    max_nnz: stat.max_nnz(),
                    level,
                    bits,
                }
            })
            .collect();
        Ok(AdcProfile {
            tile_size: grid.tile_size(),
            full_bits: levels.full_bits(),
            tiles,
        })
    }

    /// Profile from raw bit assignments, mostly for hand-built cases.
    pub fn from_bits(tile_size: usize, bits: &[u32]) -> Result<Self> {
        let levels = SparsityLevelSet::new(tile_size)?;
        let full = levels.full_bits();
        let tiles = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let b = b.min(full);
                TileAdc {
                    index: i,
                    block_row: 0,
                    block_col: i,
                    max_nnz: Level::Reduced(full - b).keep(tile_size),
                    level: Level::Reduced(full - b),
                    bits: b,
                }
            })
            .collect();
        Ok(AdcProfile {
            tile_size,
            full_bits: full,
            tiles,
        })
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// `N_b` for `b = 0..=B`; entry 0 counts zero-cost tiles.
    pub fn precision_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.full_bits as usize + 1];
        for t in &self.tiles {
            counts[t.bits as usize] += 1;
        }
        counts
    }
}

/// `(1/N) sum_b N_b * b / B`.
pub fn normalized_energy(profile: &AdcProfile) -> Result<f64> {
    let n = profile.tile_count();
    if n == 0 {
        return Err(Error::InvalidArgument("energy of a profile with no tiles".into()));
    }
    let full = profile.full_bits as f64;
    let sum: f64 = profile
        .precision_counts()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(b, &count)| count as f64 * b as f64 / full)
        .sum();
    Ok(sum / n as f64)
}

/// Savings over the dense baseline; `AllPruned` when energy is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Savings {
    Ratio(f64),
    AllPruned,
}

impl Savings {
    pub fn from_energy(energy: f64) -> Self {
        if energy > 0.0 {
            Savings::Ratio(1.0 / energy)
        } else {
            Savings::AllPruned
        }
    }

    pub fn ratio(self) -> f64 {
        match self {
            Savings::Ratio(r) => r,
            Savings::AllPruned => f64::INFINITY,
        }
    }

    /// `"4.00x"` style label.
    pub fn label(self) -> String {
        match self {
            Savings::Ratio(r) => format!("{r:.2}x"),
            Savings::AllPruned => "all-pruned".to_string(),
        }
    }
}

impl Serialize for Savings {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Savings::Ratio(r) => s.serialize_f64(*r),
            Savings::AllPruned => s.serialize_str("all-pruned"),
        }
    }
}

impl<'de> Deserialize<'de> for Savings {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(Savings::Ratio(r)),
            Raw::Str(s) if s == "all-pruned" => Ok(Savings::AllPruned),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad savings value '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub tiles: usize,
    pub normalized_energy: f64,
    pub pruned_fraction: f64,
    pub tile_summaries: Vec<TileAdc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub tile_size: usize,
    pub full_bits: u32,
    pub total_tiles: usize,
    pub normalized_energy: f64,
    pub savings_ratio: Savings,
    /// `N_b` indexed by bit precision `b`.
    pub precision_counts: Vec<usize>,
    pub final_pruning_ratio: f64,
    pub layers: Vec<LayerEnergy>,
}

impl EnergyReport {
    /// Report for masked layers; mask-pruned and exactly-zero weights count
    /// as pruned.
    pub fn from_layers(layers: &[(&LayerMatrix, Option<&PruneMask>)], tile_size: usize) -> Result<Self> {
        let levels = SparsityLevelSet::new(tile_size)?;
        let mut per_layer = Vec::with_capacity(layers.len());
        let mut all_tiles = Vec::new();
        let mut zeros = 0usize;
        let mut total = 0usize;
        for &(m, mask) in layers {
            let mut masked = m.clone();
            if let Some(mk) = mask {
                mk.apply(&mut masked);
            }
            let layer_zeros = masked.values().iter().filter(|&&v| v == 0.0).count();
            zeros += layer_zeros;
            total += masked.values().len();
            let grid = partition(&masked, tile_size)?;
            let profile = AdcProfile::from_grid(&grid)?;
            per_layer.push(LayerEnergy {
                name: m.name().to_string(),
                tiles: profile.tile_count(),
                normalized_energy: normalized_energy(&profile)?,
                pruned_fraction: layer_zeros as f64 / masked.values().len() as f64,
                tile_summaries: profile.tiles.clone(),
            });
            all_tiles.extend(profile.tiles);
        }
        let profile = AdcProfile {
            tile_size,
            full_bits: levels.full_bits(),
            tiles: all_tiles,
        };
        let energy = normalized_energy(&profile)?;
        Ok(EnergyReport {
            tile_size,
            full_bits: levels.full_bits(),
            total_tiles: profile.tile_count(),
            normalized_energy: energy,
            savings_ratio: Savings::from_energy(energy),
            precision_counts: profile.precision_counts(),
            final_pruning_ratio: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
            layers: per_layer,
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Flat per-tile CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "tile", "block_row", "block_col", "max_nnz", "level", "bits"])?;
        for layer in &self.layers {
            for t in &layer.tile_summaries {
                w.write_record([
                    layer.name.clone(),
                    t.index.to_string(),
                    t.block_row.to_string(),
                    t.block_col.to_string(),
                    t.max_nnz.to_string(),
                    t.level.to_string(),
                    t.bits.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsRow {
    pub method: String,
    pub accuracy: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub normalized_energy: f64,
    pub savings: String,
    pub final_pruning_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsTable {
    pub tile_size: usize,
    pub rows: Vec<SavingsRow>,
}

impl SavingsTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "accuracy",
            "accuracy_delta",
            "normalized_energy",
            "savings",
            "final_pruning_ratio",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                opt(r.accuracy),
                opt(r.accuracy_delta),
                format!("{:.4}", r.normalized_energy),
                r.savings.clone(),
                format!("{:.4}", r.final_pruning_ratio),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// A report to compare, with an optional measured accuracy.
#[derive(Debug, Clone)]
pub struct Labeled<'a> {
    pub label: String,
    pub report: &'a EnergyReport,
    pub accuracy: Option<f64>,
}

/// Side-by-side savings relative to the first entry's accuracy and to the
/// dense energy of 1.0.
pub fn compare(entries: &[Labeled<'_>]) -> Result<SavingsTable> {
    let first = entries
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    for e in &entries[1..] {
        if e.report.tile_size != first.report.tile_size {
            return Err(Error::Mismatch(format!(
                "'{}' uses tile size {} but '{}' uses {}",
                e.label, e.report.tile_size, first.label, first.report.tile_size
            )));
        }
        let shape = |r: &EnergyReport| r.layers.iter().map(|l| (l.name.clone(), l.tiles)).collect::<Vec<_>>();
        if shape(e.report) != shape(first.report) {
            return Err(Error::Mismatch(format!(
                "'{}' and '{}' describe different networks",
                e.label, first.label
            )));
        }
    }
    let rows = entries
        .iter()
        .map(|e| SavingsRow {
            method: e.label.clone(),
            accuracy: e.accuracy,
            accuracy_delta: e.accuracy.zip(first.accuracy).map(|(a, b)| a - b),
            normalized_energy: e.report.normalized_energy,
            savings: e.report.savings_ratio.label(),
            final_pruning_ratio: e.report.final_pruning_ratio,
        })
        .collect();
    Ok(SavingsTable {
        tile_size: first.report.tile_size,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{LayerShape, Tile};

    fn tile_with_nnz(n: usize, per_col: usize) -> Tile {
        let mut values = vec![0.0; n * n];
        for c in 0..n {
            for r in 0..per_col {
                values[r * n + c] = 1.0;
            }
        }
        Tile::dense(0, n, values)
    }

    #[test]
    fn bits_examples() {
        let levels = SparsityLevelSet::new(64).unwrap();
        let (level, bits) = assign_bits(&tile_stats(&tile_with_nnz(64, 16)), &levels);
        assert_eq!((level, bits), (Level::Reduced(2), 4));
        let (_, bits) = assign_bits(&tile_stats(&tile_with_nnz(64, 64)), &levels);
        assert_eq!(bits, 6);
        let (level, bits) = assign_bits(&tile_stats(&tile_with_nnz(64, 1)), &levels);
        assert_eq!((level, bits), (Level::Reduced(6), 0));
        let (level, bits) = assign_bits(&tile_stats(&tile_with_nnz(64, 0)), &levels);
        assert_eq!((level, bits), (Level::Removed, 0));
    }

    #[test]
    fn energy_examples() {
        let full = AdcProfile::from_bits(64, &[6, 6, 6]).unwrap();
        assert_eq!(normalized_energy(&full).unwrap(), 1.0);
        let two = AdcProfile::from_bits(64, &[6, 3]).unwrap();
        assert_eq!(normalized_energy(&two).unwrap(), 0.75);
        let none = AdcProfile::from_bits(64, &[0, 0]).unwrap();
        assert_eq!(normalized_energy(&none).unwrap(), 0.0);
        let empty = AdcProfile::from_bits(64, &[]).unwrap();
        assert!(normalized_energy(&empty).is_err());
        assert_eq!(two.precision_counts(), vec![0, 0, 0, 1, 0, 0, 1]);
    }

    fn report(energy: f64) -> EnergyReport {
        EnergyReport {
            tile_size: 64,
            full_bits: 6,
            total_tiles: 1,
            normalized_energy: energy,
            savings_ratio: Savings::from_energy(energy),
            precision_counts: vec![],
            final_pruning_ratio: 0.0,
            layers: vec![],
        }
    }

    #[test]
    fn compare_examples() {
        let dense = report(1.0);
        let dub = report(0.25);
        let unstructured = report(0.384);
        let entries = [
            Labeled { label: "dense".into(), report: &dense, accuracy: Some(0.9) },
            Labeled { label: "dense2".into(), report: &dense, accuracy: Some(0.9) },
            Labeled { label: "dub".into(), report: &dub, accuracy: Some(0.89) },
            Labeled { label: "unstructured".into(), report: &unstructured, accuracy: None },
        ];
        let t = compare(&entries).unwrap();
        let savings: Vec<&str> = t.rows.iter().map(|r| r.savings.as_str()).collect();
        assert_eq!(savings, ["1.00x", "1.00x", "4.00x", "2.60x"]);
        assert!((t.rows[2].accuracy_delta.unwrap() + 0.01).abs() < 1e-12);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("dub,0.8900,-0.0100,0.2500,4.00x"));
    }

    #[test]
    fn compare_rejects_mismatch() {
        let a = report(1.0);
        let mut b = report(0.5);
        b.tile_size = 32;
        let entries = [
            Labeled { label: "a".into(), report: &a, accuracy: None },
            Labeled { label: "b".into(), report: &b, accuracy: None },
        ];
        assert!(matches!(compare(&entries), Err(Error::Mismatch(_))));
    }

    #[test]
    fn all_pruned_sentinel() {
        let m = LayerMatrix::zeros("z", LayerShape::dense(8, 8));
        let r = EnergyReport::from_layers(&[(&m, None)], 4).unwrap();
        assert_eq!(r.normalized_energy, 0.0);
        assert_eq!(r.savings_ratio, Savings::AllPruned);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"savings_ratio\":\"all-pruned\""));
        let back: EnergyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn dense_network_is_one() {
        let m = LayerMatrix::new("d", LayerShape::dense(48, 20), vec![0.5; 960]).unwrap();
        let r = EnergyReport::from_layers(&[(&m, None)], 16).unwrap();
        assert_eq!(r.normalized_energy, 1.0);
        assert_eq!(r.savings_ratio.label(), "1.00x");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 6);
    }
}
