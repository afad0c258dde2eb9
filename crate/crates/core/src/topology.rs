//! Electrode montage and the five-level channel hierarchy: whole brain,
//! three anterior/central/posterior bands, left/mid/right zones within each
//! band, small local clusters, single channels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const LEVELS: usize = 5;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("unknown electrode label(s): {}", .0.join(", "))]
    UnknownLabels(Vec<String>),
    #[error("invalid montage: {0}")]
    Invalid(String),
    #[error("montage file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub band: String,
    pub zone: String,
    pub cluster: String,
}

/// Band, zone, and 10-20 geometric order of the built-in 19-channel layout.
/// Within a zone, rows are listed in pairing order.
const STANDARD_1020: &[(&str, &str, &str)] = &[
    ("Fp1", "Anterior", "LF"),
    ("F3", "Anterior", "LF"),
    ("F7", "Anterior", "LF"),
    ("Fz", "Anterior", "MF"),
    ("Fp2", "Anterior", "RF"),
    ("F4", "Anterior", "RF"),
    ("F8", "Anterior", "RF"),
    ("C3", "Central", "LC"),
    ("P3", "Central", "LC"),
    ("Cz", "Central", "MC"),
    ("C4", "Central", "RC"),
    ("P4", "Central", "RC"),
    ("T3", "Posterior", "LP"),
    ("T5", "Posterior", "LP"),
    ("O1", "Posterior", "LP"),
    ("Pz", "Posterior", "MP"),
    ("T4", "Posterior", "RP"),
    ("T6", "Posterior", "RP"),
    ("O2", "Posterior", "RP"),
];

/// Conventional recording order of the 19 standard electrodes.
pub const STANDARD_19: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

const ALIASES: &[(&str, &str)] = &[("T7", "T3"), ("T8", "T4"), ("P7", "T5"), ("P8", "T6")];

pub fn zone_description(zone: &str) -> &'static str {
    match zone {
        "LF" => "Left Frontal",
        "MF" => "Mid Frontal",
        "RF" => "Right Frontal",
        "LC" => "Left Central",
        "MC" => "Mid Central",
        "RC" => "Right Central",
        "LP" => "Left Posterior",
        "MP" => "Mid Posterior",
        "RP" => "Right Posterior",
        _ => "Unlabelled Zone",
    }
}

/// Canonical built-in label for `label` (case-insensitive, old/new 10-20
/// temporal names unified).
pub fn canonical_label(label: &str) -> Option<&'static str> {
    let l = label.trim();
    for (alias, canon) in ALIASES {
        if alias.eq_ignore_ascii_case(l) {
            return Some(canon);
        }
    }
    STANDARD_1020
        .iter()
        .find(|(name, _, _)| name.eq_ignore_ascii_case(l))
        .map(|(name, _, _)| *name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub labels: Vec<String>,
    pub assignments: BTreeMap<String, Assignment>,
}

#[derive(Deserialize)]
struct MontageFile {
    labels: Vec<String>,
    assignments: BTreeMap<String, Assignment>,
}

impl Montage {
    /// Built-in layout restricted to `labels` (kept in the given order).
    /// Clusters pair neighbouring present electrodes within each zone; an odd
    /// one out stays alone.
    pub fn standard(labels: &[String]) -> Result<Self, TopologyError> {
        let unknown: Vec<String> = labels
            .iter()
            .filter(|l| canonical_label(l).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(TopologyError::UnknownLabels(unknown));
        }
        let canon: Vec<&str> = labels.iter().map(|l| canonical_label(l).unwrap()).collect();
        for (i, c) in canon.iter().enumerate() {
            if canon[..i].contains(c) {
                return Err(TopologyError::Invalid(format!("electrode {c} listed twice")));
            }
        }
        let mut assignments = BTreeMap::new();
        let mut zone_seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (name, band, zone) in STANDARD_1020 {
            let Some(pos) = canon.iter().position(|c| c == name) else {
                continue;
            };
            let k = zone_seen.entry(zone).or_insert(0);
            let cluster = format!("{zone}{}", *k / 2 + 1);
            *k += 1;
            assignments.insert(
                labels[pos].clone(),
                Assignment {
                    band: band.to_string(),
                    zone: zone.to_string(),
                    cluster,
                },
            );
        }
        let m = Self {
            labels: labels.to_vec(),
            assignments,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn standard_19() -> Self {
        let labels: Vec<String> = STANDARD_19.iter().map(|s| s.to_string()).collect();
        Self::standard(&labels).expect("built-in table is consistent")
    }

    pub fn from_file(path: &Path) -> Result<Self, TopologyError> {
        let err = |msg: String| TopologyError::File {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let f: MontageFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let m = Self {
            labels: f.labels,
            assignments: f.assignments,
        };
        m.validate()?;
        Ok(m)
    }

    /// Restricts to `labels` in that order (matching is case-insensitive).
    pub fn select(&self, labels: &[String]) -> Result<Self, TopologyError> {
        let mut assignments = BTreeMap::new();
        let mut unknown = Vec::new();
        for l in labels {
            match self.assignments.iter().find(|(k, _)| k.eq_ignore_ascii_case(l)) {
                Some((_, a)) => {
                    assignments.insert(l.clone(), a.clone());
                }
                None => unknown.push(l.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(TopologyError::UnknownLabels(unknown));
        }
        let m = Self {
            labels: labels.to_vec(),
            assignments,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.labels.is_empty() {
            return Err(TopologyError::Invalid("montage has no electrodes".into()));
        }
        let missing: Vec<String> = self
            .labels
            .iter()
            .filter(|l| !self.assignments.contains_key(*l))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(TopologyError::UnknownLabels(missing));
        }
        let mut zone_band: BTreeMap<&str, &str> = BTreeMap::new();
        let mut cluster_zone: BTreeMap<&str, &str> = BTreeMap::new();
        for l in &self.labels {
            let a = &self.assignments[l];
            if let Some(b) = zone_band.insert(&a.zone, &a.band) {
                if b != a.band {
                    return Err(TopologyError::Invalid(format!(
                        "zone {} spans bands {b} and {}",
                        a.zone, a.band
                    )));
                }
            }
            if let Some(z) = cluster_zone.insert(&a.cluster, &a.zone) {
                if z != a.zone {
                    return Err(TopologyError::Invalid(format!(
                        "cluster {} spans zones {z} and {}",
                        a.cluster, a.zone
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One partition per level; groups hold channel indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub channels: usize,
    pub levels: Vec<Vec<Vec<usize>>>,
    /// Human-readable name per group per level.
    pub names: Vec<Vec<String>>,
}

fn group_by(keys: &[String]) -> (Vec<Vec<usize>>, Vec<String>) {
    let mut order: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        match order.iter().position(|o| o == k) {
            Some(g) => groups[g].push(i),
            None => {
                order.push(k.clone());
                groups.push(vec![i]);
            }
        }
    }
    (groups, order)
}

/// Keys sorted into the built-in band and zone order when they are built-in
/// names, otherwise first-appearance order.
fn rank_of(key: &str) -> usize {
    const ORDER: [&str; 12] = [
        "Anterior", "Central", "Posterior", "LF", "MF", "RF", "LC", "MC", "RC", "LP", "MP", "RP",
    ];
    ORDER.iter().position(|o| *o == key).unwrap_or(usize::MAX)
}

fn sorted_groups(keys: &[String]) -> (Vec<Vec<usize>>, Vec<String>) {
    let (groups, names) = group_by(keys);
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.sort_by_key(|&g| (rank_of(&names[g]), groups[g][0]));
    (
        idx.iter().map(|&g| groups[g].clone()).collect(),
        idx.iter().map(|&g| names[g].clone()).collect(),
    )
}

impl Hierarchy {
    pub fn build(m: &Montage) -> Result<Self, TopologyError> {
        m.validate()?;
        let c = m.labels.len();
        let get = |f: fn(&Assignment) -> &String| -> Vec<String> {
            m.labels.iter().map(|l| f(&m.assignments[l]).clone()).collect()
        };
        let (b2, n2) = sorted_groups(&get(|a| &a.band));
        let (b3, n3) = sorted_groups(&get(|a| &a.zone));
        let clusters = get(|a| &a.cluster);
        let zones = get(|a| &a.zone);
        // clusters ordered by their zone, then first member
        let (b4_raw, n4_raw) = group_by(&clusters);
        let mut idx: Vec<usize> = (0..b4_raw.len()).collect();
        idx.sort_by_key(|&g| (rank_of(&zones[b4_raw[g][0]]), b4_raw[g][0]));
        let b4: Vec<Vec<usize>> = idx.iter().map(|&g| b4_raw[g].clone()).collect();
        let n4: Vec<String> = idx.iter().map(|&g| n4_raw[g].clone()).collect();
        let b5: Vec<Vec<usize>> = (0..c).map(|i| vec![i]).collect();
        let h = Self {
            channels: c,
            levels: vec![vec![(0..c).collect()], b2, b3, b4, b5],
            names: vec![vec!["Whole".into()], n2, n3, n4, m.labels.clone()],
        };
        h.check()?;
        Ok(h)
    }

    /// Partition and refinement axioms.
    pub fn check(&self) -> Result<(), TopologyError> {
        for (li, level) in self.levels.iter().enumerate() {
            let mut seen = vec![false; self.channels];
            for g in level {
                if g.is_empty() {
                    return Err(TopologyError::Invalid(format!("empty group at level {}", li + 1)));
                }
                for &c in g {
                    if seen[c] {
                        return Err(TopologyError::Invalid(format!(
                            "channel {c} in two groups at level {}",
                            li + 1
                        )));
                    }
                    seen[c] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(TopologyError::Invalid(format!("level {} does not cover", li + 1)));
            }
            if li > 0 {
                let parent = self.group_of(li - 1);
                for g in level {
                    if g.iter().any(|&c| parent[c] != parent[g[0]]) {
                        return Err(TopologyError::Invalid(format!(
                            "level {} does not refine level {li}",
                            li + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// `level` is 0-based here (0 = whole brain).
    pub fn group_of(&self, level: usize) -> Vec<usize> {
        let mut out = vec![0; self.channels];
        for (g, members) in self.levels[level].iter().enumerate() {
            for &c in members {
                out[c] = g;
            }
        }
        out
    }

    /// Mean of member channels per patch. `x` is `C x P x E`, row-major.
    pub fn pool(&self, level: usize, x: &[f64], p: usize, e: usize) -> Vec<f64> {
        let groups = &self.levels[level];
        let mut out = vec![0.0; groups.len() * p * e];
        for (g, members) in groups.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &c in members {
                for k in 0..p * e {
                    out[g * p * e + k] += x[c * p * e + k] * inv;
                }
            }
        }
        out
    }

    /// Copies each group's feature to its member channels.
    pub fn broadcast(&self, level: usize, g: &[f64], p: usize, e: usize) -> Vec<f64> {
        let owner = self.group_of(level);
        let mut out = vec![0.0; self.channels * p * e];
        for (c, &gi) in owner.iter().enumerate() {
            out[c * p * e..(c + 1) * p * e].copy_from_slice(&g[gi * p * e..(gi + 1) * p * e]);
        }
        out
    }

    /// `(n*P) x (C*P)` matrix implementing [`Hierarchy::pool`] on rows
    /// ordered `c*P + p`.
    pub fn pool_matrix(&self, level: usize, p: usize) -> Tensor {
        let groups = &self.levels[level];
        let cols = self.channels * p;
        let mut m = vec![0.0; groups.len() * p * cols];
        for (g, members) in groups.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &c in members {
                for q in 0..p {
                    m[(g * p + q) * cols + c * p + q] = inv;
                }
            }
        }
        Tensor::new(vec![groups.len() * p, cols], m).expect("extent computed")
    }

    /// `(C*P) x (n*P)` matrix implementing [`Hierarchy::broadcast`].
    pub fn broadcast_matrix(&self, level: usize, p: usize) -> Tensor {
        let n = self.levels[level].len();
        let owner = self.group_of(level);
        let cols = n * p;
        let mut m = vec![0.0; self.channels * p * cols];
        for (c, &g) in owner.iter().enumerate() {
            for q in 0..p {
                m[(c * p + q) * cols + g * p + q] = 1.0;
            }
        }
        Tensor::new(vec![self.channels * p, cols], m).expect("extent computed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_sizes() {
        let h = Hierarchy::build(&Montage::standard_19()).unwrap();
        assert_eq!(h.sizes(), vec![1, 3, 9, 13, 19]);
    }

    #[test]
    fn fz_is_anterior_mid_frontal() {
        let m = Montage::standard_19();
        let a = &m.assignments["Fz"];
        assert_eq!((a.band.as_str(), a.zone.as_str()), ("Anterior", "MF"));
        let h = Hierarchy::build(&m).unwrap();
        let fz = m.labels.iter().position(|l| l == "Fz").unwrap();
        assert_eq!(h.names[1][h.group_of(1)[fz]], "Anterior");
        assert_eq!(h.names[2][h.group_of(2)[fz]], "MF");
    }

    #[test]
    fn single_channel_degenerates() {
        let h = Hierarchy::build(&Montage::standard(&["Cz".to_string()]).unwrap()).unwrap();
        assert_eq!(h.sizes(), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn aliases_and_case() {
        let labels: Vec<String> = ["t7", "P8", "cz"].iter().map(|s| s.to_string()).collect();
        let m = Montage::standard(&labels).unwrap();
        assert_eq!(m.assignments["t7"].zone, "LP");
        assert_eq!(m.assignments["P8"].zone, "RP");
    }

    #[test]
    fn unknown_label_is_listed() {
        let labels = vec!["Cz".to_string(), "X9".to_string()];
        let err = Montage::standard(&labels).unwrap_err().to_string();
        assert!(err.contains("X9"), "{err}");
    }

    #[test]
    fn pool_mean_and_broadcast() {
        let labels = vec!["Fz".to_string(), "Cz".to_string()];
        let h = Hierarchy::build(&Montage::standard(&labels).unwrap()).unwrap();
        assert_eq!(h.pool(0, &[1.0, 3.0], 1, 1), vec![2.0]);
        assert_eq!(h.broadcast(0, &[2.0], 1, 1), vec![2.0, 2.0]);
        let x = [1.0, 3.0];
        assert_eq!(h.pool(4, &x, 1, 1), x.to_vec());
    }

    #[test]
    fn matrix_forms_agree() {
        let h = Hierarchy::build(&Montage::standard_19()).unwrap();
        let (p, e) = (2, 3);
        let x: Vec<f64> = (0..19 * p * e).map(|i| (i as f64 * 0.37).sin()).collect();
        for lvl in 0..LEVELS {
            let xt = Tensor::new(vec![19 * p, e], x.clone()).unwrap();
            let via = h.pool_matrix(lvl, p).matmul(&xt).unwrap();
            let direct = h.pool(lvl, &x, p, e);
            for (a, b) in via.data().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn montage_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = Montage::standard_19();
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(Montage::from_file(&p).unwrap(), m);
    }
}
