use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::{read_csv, ProbabilityRow};
use crate::error::{Error, Result};

/// Keep probabilities pivoted to one row per (position, PET kind) and one
/// column per layer. Cells with no module at that layer are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub columns: Vec<String>,
    pub rows: Vec<HeatmapRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub position: String,
    pub pet_kind: String,
    pub cells: Vec<Option<f64>>,
}

impl HeatmapGrid {
    pub fn cell(&self, position: &str, pet_kind: &str, layer: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == layer)?;
        self.rows
            .iter()
            .find(|r| r.position == position && r.pet_kind == pet_kind)
            .and_then(|r| r.cells[col])
    }

    /// Number of filled cells.
    pub fn filled(&self) -> usize {
        self.rows.iter().map(|r| r.cells.iter().flatten().count()).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["position".to_string(), "pet_kind".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.position.clone(), r.pet_kind.clone()];
            rec.extend(r.cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

type Key = (String, String, String);

fn key(r: &ProbabilityRow) -> Key {
    (r.layer.clone(), r.position.clone(), r.pet_kind.clone())
}

fn describe(keys: &BTreeSet<&Key>) -> String {
    let shown: Vec<String> = keys.iter().take(5).map(|(l, p, k)| format!("{l}.{p}:{k}")).collect();
    let more = keys.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{} and {more} more", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

/// Averages each cell over `runs`, every run being the rows of one step.
pub fn heatmap_from_rows(runs: &[Vec<ProbabilityRow>]) -> Result<HeatmapGrid> {
    let Some(first) = runs.first() else {
        return Err(Error::config("heatmap needs at least one run"));
    };
    let mut maps: Vec<HashMap<Key, f64>> = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let mut m = HashMap::with_capacity(run.len());
        for r in run {
            if m.insert(key(r), r.p).is_some() {
                return Err(Error::Parse(format!(
                    "run {i}: {}.{}:{} appears twice",
                    r.layer, r.position, r.pet_kind
                )));
            }
        }
        maps.push(m);
    }
    let reference: BTreeSet<&Key> = maps[0].keys().collect();
    for (i, m) in maps.iter().enumerate().skip(1) {
        let keys: BTreeSet<&Key> = m.keys().collect();
        if keys != reference {
            let missing: BTreeSet<&Key> = reference.difference(&keys).copied().collect();
            let extra: BTreeSet<&Key> = keys.difference(&reference).copied().collect();
            return Err(Error::Mismatch(format!(
                "run {i} has a different site set than run 0 (missing: [{}]; extra: [{}])",
                describe(&missing),
                describe(&extra)
            )));
        }
    }
    let mut columns: Vec<String> = Vec::new();
    let mut row_keys: Vec<(String, String)> = Vec::new();
    for r in first {
        if !columns.contains(&r.layer) {
            columns.push(r.layer.clone());
        }
        let rk = (r.position.clone(), r.pet_kind.clone());
        if !row_keys.contains(&rk) {
            row_keys.push(rk);
        }
    }
    let n = runs.len() as f64;
    let rows = row_keys
        .into_iter()
        .map(|(position, pet_kind)| {
            let cells = columns
                .iter()
                .map(|layer| {
                    let k = (layer.clone(), position.clone(), pet_kind.clone());
                    maps[0].contains_key(&k).then(|| maps.iter().map(|m| m[&k]).sum::<f64>() / n)
                })
                .collect();
            HeatmapRow {
                position,
                pet_kind,
                cells,
            }
        })
        .collect();
    Ok(HeatmapGrid { columns, rows })
}

/// Reads `p.csv` files, keeps each file's last logged step, averages them
/// into a grid and writes it to `out`.
pub fn emit_heatmap(inputs: &[PathBuf], out: &Path) -> Result<HeatmapGrid> {
    let mut runs = Vec::with_capacity(inputs.len());
    for path in inputs {
        let rows: Vec<ProbabilityRow> = read_csv(path)?;
        let Some(last) = rows.iter().map(|r| r.step).max() else {
            return Err(Error::Parse(format!("{}: no rows", path.display())));
        };
        runs.push(rows.into_iter().filter(|r| r.step == last).collect::<Vec<_>>());
    }
    let grid = heatmap_from_rows(&runs)?;
    grid.save(out)?;
    Ok(grid)
}
